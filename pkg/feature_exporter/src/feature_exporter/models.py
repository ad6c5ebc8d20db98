"""CIFAR-style backbones with named tap points.

Two classifiers sized for 32x32 inputs: a ResNet-34 (3x3 stem, four
stages of basic blocks) and a DenseNet-100 (bottleneck layers, growth
12, halving transitions). A tap point is the output feature map of one
residual/dense stage; `forward_taps` returns the spatially averaged
activation at every requested tap, which is what gets exported.

Weight layout is plain `state_dict`, loaded strictly: a file trained
for one architecture does not silently load into the other.
"""

from __future__ import annotations

import torch
from torch import nn

__all__ = [
    "MODEL_NAMES",
    "ExportError",
    "UnknownTapError",
    "build_model",
    "tap_channels",
]

MODEL_NAMES = ("resnet-34", "densenet-100")


class ExportError(RuntimeError):
    """Model construction or weight loading failed."""


class UnknownTapError(ExportError):
    """Requested tap point does not exist in the model graph."""


# ---------------------------------------------------------------------------
# ResNet-34


class BasicBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, stride=1, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(c_out)
        if stride != 1 or c_in != c_out:
            self.shortcut = nn.Sequential(
                nn.Conv2d(c_in, c_out, 1, stride=stride, bias=False),
                nn.BatchNorm2d(c_out),
            )
        else:
            self.shortcut = nn.Identity()
        self.relu = nn.ReLU(inplace=True)

    def forward(self, x):
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + self.shortcut(x))


class ResNet34(nn.Module):
    """Four stages of [3, 4, 6, 3] basic blocks; taps block1..block4."""

    tap_names = ("block1", "block2", "block3", "block4")

    def __init__(self, n_classes: int = 10):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(3, 64, 3, stride=1, padding=1, bias=False),
            nn.BatchNorm2d(64),
            nn.ReLU(inplace=True),
        )
        widths = (64, 128, 256, 512)
        depths = (3, 4, 6, 3)
        strides = (1, 2, 2, 2)
        stages = []
        c_in = 64
        for width, depth, stride in zip(widths, depths, strides):
            blocks = []
            for i in range(depth):
                blocks.append(BasicBlock(c_in, width, stride if i == 0 else 1))
                c_in = width
            stages.append(nn.Sequential(*blocks))
        self.stages = nn.ModuleList(stages)
        self.fc = nn.Linear(512, n_classes)
        self._channels = dict(zip(self.tap_names, widths))

    def forward_maps(self, x):
        maps = {}
        out = self.stem(x)
        for name, stage in zip(self.tap_names, self.stages):
            out = stage(out)
            maps[name] = out
        return maps

    def forward(self, x):
        out = self.forward_maps(x)[self.tap_names[-1]]
        return self.fc(out.mean(dim=(2, 3)))


# ---------------------------------------------------------------------------
# DenseNet-100 (bottleneck + compression, growth 12)


class Bottleneck(nn.Module):
    def __init__(self, c_in: int, growth: int):
        super().__init__()
        self.bn1 = nn.BatchNorm2d(c_in)
        self.conv1 = nn.Conv2d(c_in, 4 * growth, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(4 * growth)
        self.conv2 = nn.Conv2d(4 * growth, growth, 3, padding=1, bias=False)
        self.relu = nn.ReLU(inplace=True)

    def forward(self, x):
        out = self.conv1(self.relu(self.bn1(x)))
        out = self.conv2(self.relu(self.bn2(out)))
        return torch.cat([x, out], dim=1)


class Transition(nn.Module):
    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.bn = nn.BatchNorm2d(c_in)
        self.conv = nn.Conv2d(c_in, c_out, 1, bias=False)
        self.relu = nn.ReLU(inplace=True)
        self.pool = nn.AvgPool2d(2)

    def forward(self, x):
        return self.pool(self.conv(self.relu(self.bn(x))))


class DenseNet100(nn.Module):
    """Three dense blocks of 16 bottleneck layers; taps dense1..dense3."""

    tap_names = ("dense1", "dense2", "dense3")

    def __init__(self, n_classes: int = 10, growth: int = 12):
        super().__init__()
        layers_per_block = 16  # (100 - 4) / 6 with bottlenecks
        c = 2 * growth
        self.stem = nn.Conv2d(3, c, 3, padding=1, bias=False)
        blocks = []
        transitions = []
        channels = {}
        for bi, name in enumerate(self.tap_names):
            stage = []
            for _ in range(layers_per_block):
                stage.append(Bottleneck(c, growth))
                c += growth
            blocks.append(nn.Sequential(*stage))
            channels[name] = c
            if bi < len(self.tap_names) - 1:
                c_out = c // 2
                transitions.append(Transition(c, c_out))
                c = c_out
        self.blocks = nn.ModuleList(blocks)
        self.transitions = nn.ModuleList(transitions)
        self.bn_final = nn.BatchNorm2d(c)
        self.relu = nn.ReLU(inplace=True)
        self.fc = nn.Linear(c, n_classes)
        self._channels = channels

    def forward_maps(self, x):
        maps = {}
        out = self.stem(x)
        for bi, name in enumerate(self.tap_names):
            out = self.blocks[bi](out)
            maps[name] = out
            if bi < len(self.transitions):
                out = self.transitions[bi](out)
        return maps

    def forward(self, x):
        out = self.forward_maps(x)[self.tap_names[-1]]
        out = self.relu(self.bn_final(out))
        return self.fc(out.mean(dim=(2, 3)))


# ---------------------------------------------------------------------------


def build_model(
    name: str, weights: str | None = None, seed: int = 0, n_classes: int = 10
) -> nn.Module:
    """Construct a backbone, randomly initialized or from a weights file.

    Without ``weights`` the parameters are drawn deterministically from
    ``seed``. With it, the state dict must match the architecture
    exactly; a mismatch raises ExportError rather than loading a
    partial model.
    """
    if name == "resnet-34":
        factory = ResNet34
    elif name == "densenet-100":
        factory = DenseNet100
    else:
        raise ExportError(f"unknown model {name!r}; choose from {MODEL_NAMES}")
    torch.manual_seed(seed)
    model = factory(n_classes=n_classes)
    if weights is not None:
        try:
            state = torch.load(weights, map_location="cpu", weights_only=True)
        except Exception as exc:
            raise ExportError(f"cannot load weights {weights!r}: {exc}") from exc
        try:
            model.load_state_dict(state, strict=True)
        except RuntimeError as exc:
            raise ExportError(
                f"weights {weights!r} do not match architecture {name!r}: {exc}"
            ) from exc
    model.eval()
    return model


def tap_channels(model: nn.Module) -> dict[str, int]:
    """Tap name -> channel count for a built model."""
    return dict(model._channels)


def resolve_taps(model: nn.Module, taps: list[str] | None) -> list[str]:
    """Validate a tap list (None means every tap, in model order)."""
    known = list(model.tap_names)
    if taps is None:
        return known
    for tap in taps:
        if tap not in known:
            raise UnknownTapError(f"unknown tap point {tap!r}; model has {known}")
    return list(taps)


def spatial_mean_taps(model: nn.Module, x: torch.Tensor, taps: list[str]):
    """Per-tap spatially averaged activations, each (n, channels)."""
    maps = model.forward_maps(x)
    return {tap: maps[tap].mean(dim=(2, 3)) for tap in taps}
