"""Re-evaluate saved density models inside torch.

The detector directory written by the density package stores, per
layer, class means (RFM1) and one flow file per class (RFLOW1). To
perturb inputs along the score gradient we need those densities as
differentiable torch expressions, so this module parses the binary
formats directly and rebuilds the forward computation: whitening
linear map, then affine coupling blocks (3-layer leaky-ReLU nets,
log-scales clamped) interleaved with fixed permutations.

Only evaluation is implemented. Training, fitting, and serialization
stay in the density package; if the formats move, version checks here
fail loudly.

All flow math runs in float64 regardless of the network dtype: scores
must match the reference implementation to rounding error, and the
cast at the feature boundary keeps autograd intact.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass

import numpy as np
import torch

__all__ = [
    "FlowFileError",
    "TorchFlow",
    "DetectorLayer",
    "read_torch_flow",
    "load_detector_layers",
]

_FLOW_MAGIC = b"RFLOW1"
_FLOW_VERSION = 1
_MEANS_MAGIC = b"RFM1"
_DETECTOR_FORMAT = "RFDET1"
_DETECTOR_VERSION = 1
_PERM_KINDS = {0: "fixed_random", 1: "switch"}
_LOG_2PI = float(np.log(2.0 * np.pi))
_LEAKY_SLOPE = 0.01


class FlowFileError(ValueError):
    """Flow or detector file violates the expected layout."""


class _Cursor:
    def __init__(self, data: bytes, name: str):
        self.data = data
        self.name = name
        self.pos = 0

    def take(self, count: int) -> bytes:
        if self.pos + count > len(self.data):
            raise FlowFileError(f"{self.name}: truncated")
        out = self.data[self.pos : self.pos + count]
        self.pos += count
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))[0]

    def f64(self, count: int, shape=None) -> np.ndarray:
        arr = np.frombuffer(self.take(8 * count), dtype="<f8")
        return arr.reshape(shape) if shape is not None else arr

    def u32s(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype="<u4")

    def expect_end(self) -> None:
        if self.pos != len(self.data):
            raise FlowFileError(f"{self.name}: {len(self.data) - self.pos} trailing bytes")


@dataclass
class TorchFlow:
    """One flow as torch constants; call ``logprob`` on (n, dim) features."""

    mean: torch.Tensor
    a_forward: torch.Tensor
    logdet_half: float
    clamp: float
    rank: int
    dim: int
    nets: list[list[torch.Tensor]]   # per block: [s W1,b1,W2,b2,W3,b3, t ...]
    perms: list[torch.Tensor]

    def logprob(self, x: torch.Tensor) -> torch.Tensor:
        z = (x.to(torch.float64) - self.mean) @ self.a_forward.T
        logdet = torch.zeros(z.shape[0], dtype=torch.float64, device=z.device)
        d1 = (self.rank + 1) // 2
        for params, idx in zip(self.nets, self.perms):
            z1 = z[:, :d1]
            z2 = z[:, d1:]
            s_raw = _net3(z1, params[0:6])
            t = _net3(z1, params[6:12])
            s = torch.clamp(s_raw, -self.clamp, self.clamp)
            z = torch.cat([z1, z2 * torch.exp(s) + t], dim=1)
            logdet = logdet + s.sum(dim=1)
            z = z[:, idx]
        return (
            -0.5 * self.rank * _LOG_2PI
            - 0.5 * (z * z).sum(dim=1)
            + logdet
            - self.logdet_half
        )


def _net3(x: torch.Tensor, p: list[torch.Tensor]) -> torch.Tensor:
    h = torch.nn.functional.leaky_relu(x @ p[0] + p[1], _LEAKY_SLOPE)
    h = torch.nn.functional.leaky_relu(h @ p[2] + p[3], _LEAKY_SLOPE)
    return h @ p[4] + p[5]


def read_torch_flow(path) -> TorchFlow:
    """Parse one RFLOW1 file into evaluation-ready torch tensors."""
    with open(path, "rb") as fh:
        cur = _Cursor(fh.read(), str(path))
    if cur.take(len(_FLOW_MAGIC)) != _FLOW_MAGIC:
        raise FlowFileError(f"{path}: bad magic")
    version = cur.unpack("<H")
    if version != _FLOW_VERSION:
        raise FlowFileError(f"{path}: unsupported flow version {version}")
    dim = cur.unpack("<I")
    rank = cur.unpack("<I")
    n_blocks = cur.unpack("<I")
    hidden = cur.unpack("<I")
    clamp = cur.unpack("<d")
    cur.unpack("<q")  # training seed, irrelevant for evaluation
    logdet_half = cur.unpack("<d")
    mean = cur.f64(dim)
    a_forward = cur.f64(rank * dim, shape=(rank, dim))

    d1 = (rank + 1) // 2
    d2 = rank - d1
    nets = []
    for _ in range(n_blocks):
        params = []
        for _net in range(2):
            params.append(cur.f64(d1 * hidden, shape=(d1, hidden)))
            params.append(cur.f64(hidden))
            params.append(cur.f64(hidden * hidden, shape=(hidden, hidden)))
            params.append(cur.f64(hidden))
            params.append(cur.f64(hidden * d2, shape=(hidden, d2)))
            params.append(cur.f64(d2))
        nets.append([torch.from_numpy(a.copy()) for a in params])
    perms = []
    for _ in range(n_blocks):
        kind = cur.unpack("<B")
        if kind not in _PERM_KINDS:
            raise FlowFileError(f"{path}: unknown permutation code {kind}")
        idx = cur.u32s(rank)
        perms.append(torch.from_numpy(idx.astype(np.int64)))
    cur.expect_end()
    return TorchFlow(
        mean=torch.from_numpy(mean.copy()),
        a_forward=torch.from_numpy(a_forward.copy()),
        logdet_half=logdet_half,
        clamp=clamp,
        rank=rank,
        dim=dim,
        nets=nets,
        perms=perms,
    )


def _read_means(path) -> np.ndarray:
    with open(path, "rb") as fh:
        cur = _Cursor(fh.read(), str(path))
    if cur.take(len(_MEANS_MAGIC)) != _MEANS_MAGIC:
        raise FlowFileError(f"{path}: bad magic for a means file")
    n_classes = cur.unpack("<I")
    dim = cur.unpack("<I")
    means = cur.f64(n_classes * dim, shape=(n_classes, dim))
    cur.expect_end()
    return means


@dataclass
class DetectorLayer:
    """Per-layer scoring state: class means plus one flow per class."""

    layer_id: str
    means: torch.Tensor
    flows: list[TorchFlow]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def class_logprobs(self, feats: torch.Tensor) -> torch.Tensor:
        cols = [
            flow.logprob(feats.to(torch.float64) - mu)
            for mu, flow in zip(self.means, self.flows)
        ]
        return torch.stack(cols, dim=1)

    def score(self, feats: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(best log-density, best class); ties go to the lowest class."""
        logp = self.class_logprobs(feats)
        best = logp.argmax(dim=1)
        return logp.gather(1, best[:, None]).squeeze(1), best


def load_detector_layers(dirpath) -> tuple[dict, list[DetectorLayer]]:
    """Load detector.json plus every layer's means and flows."""
    with open(os.path.join(dirpath, "detector.json"), encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != _DETECTOR_FORMAT:
        raise FlowFileError(f"{dirpath}: not a detector directory")
    if manifest.get("version") != _DETECTOR_VERSION:
        raise FlowFileError(f"{dirpath}: unsupported detector version")
    n_classes = int(manifest["n_classes"])
    layers = []
    for li, lid in enumerate(manifest["layer_ids"]):
        means = _read_means(os.path.join(dirpath, "means", f"means_l{li}.bin"))
        flows = [
            read_torch_flow(
                os.path.join(dirpath, "flows", f"flow_l{li}_c{ci}.rflow")
            )
            for ci in range(n_classes)
        ]
        layers.append(
            DetectorLayer(
                layer_id=lid, means=torch.from_numpy(means.copy()), flows=flows
            )
        )
    return manifest, layers
