"""Feature export: backbone activations to RFFS1 files.

Two entry operations. ``export_features`` runs the images through the
backbone and writes the spatial-mean activation of every requested tap.
``export_perturbed`` additionally writes, for every tap, the features
of inputs nudged along the gradient of that tap's best-class
log-density: the densities come from a detector directory and are
re-evaluated in torch (flows.py), so the gradient flows through the
convolutional stack back to the pixels. The nudge per tap l is

    x~ = x + eps * sign(d/dx log p(phi_l(x); c_hat))

with c_hat picked on the unperturbed input; the perturbed record for
layer l holds phi_l(x~).

An optional FGSM mode swaps the base inputs for adversarial examples
built from the classifier head's cross-entropy; it needs labels and a
positive --fgsm-eps and exists for protocol parity, not for scoring.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .datasets import load_npz, parse_normalization
from .flows import DetectorLayer, load_detector_layers
from .models import (
    ExportError,
    build_model,
    resolve_taps,
    spatial_mean_taps,
    tap_channels,
)
from .rffs import write_rffs

__all__ = ["ExportSpec", "export_features", "export_perturbed", "fgsm_inputs"]


@dataclass(frozen=True)
class ExportSpec:
    """Everything one export run needs.

    ``weights`` may be None for a deterministic random-init model
    (useful for pipeline tests; real runs pass a trained state dict).
    ``taps`` of None means every tap the architecture defines.
    """

    model: str
    data: str
    out: str
    weights: str | None = None
    dataset: str | None = None
    taps: tuple[str, ...] | None = None
    batch_size: int = 128
    eps: float = 0.0
    detector: str | None = None
    normalization: str = "none"
    seed: int = 0
    head_classes: int = 10
    fgsm_eps: float = 0.0

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.eps < 0:
            raise ValueError("eps must be >= 0")
        if self.fgsm_eps < 0:
            raise ValueError("fgsm-eps must be >= 0")

    def dataset_name(self) -> str:
        if self.dataset:
            return self.dataset
        stem = str(self.data).rsplit("/", 1)[-1]
        return stem.rsplit(".", 1)[0] if "." in stem else stem


def _batches(n: int, size: int):
    for start in range(0, n, size):
        yield start, min(start + size, n)


def _prepare(spec: ExportSpec):
    spec.validate()
    mean, std = parse_normalization(spec.normalization)
    images, labels, splits = load_npz(spec.data, (mean, std))
    model = build_model(
        spec.model, weights=spec.weights, seed=spec.seed, n_classes=spec.head_classes
    )
    taps = resolve_taps(model, list(spec.taps) if spec.taps is not None else None)
    return model, taps, images, labels, splits


def _base_features(model, taps, images: np.ndarray, batch_size: int):
    chunks = {tap: [] for tap in taps}
    with torch.no_grad():
        for start, stop in _batches(images.shape[0], batch_size):
            x = torch.from_numpy(images[start:stop])
            feats = spatial_mean_taps(model, x, taps)
            for tap in taps:
                chunks[tap].append(feats[tap].cpu().numpy())
    return {tap: np.concatenate(chunks[tap], axis=0) for tap in taps}


def export_features(spec: ExportSpec) -> dict[str, np.ndarray]:
    """Write base features for every tap; returns the tensors."""
    model, taps, images, labels, splits = _prepare(spec)
    if spec.fgsm_eps > 0.0:
        if labels is None:
            raise ExportError("FGSM export needs labels")
        images = _fgsm_images(model, images, labels, spec.fgsm_eps, spec.batch_size)
    tensors = _base_features(model, taps, images, spec.batch_size)
    write_rffs(
        spec.out,
        dataset=spec.dataset_name(),
        layer_ids=taps,
        tensors=tensors,
        labels=labels,
        splits=splits,
    )
    return tensors


def _layers_for_taps(
    detector_dir: str, model, taps: list[str]
) -> dict[str, DetectorLayer]:
    manifest, layers = load_detector_layers(detector_dir)
    by_id = {layer.layer_id: layer for layer in layers}
    channels = tap_channels(model)
    chosen = {}
    for tap in taps:
        if tap not in by_id:
            raise ExportError(
                f"gradient unavailable for tap {tap!r}: detector has layers "
                f"{sorted(by_id)}"
            )
        layer = by_id[tap]
        if layer.dim != channels[tap]:
            raise ExportError(
                f"tap {tap!r} has {channels[tap]} channels, detector layer "
                f"expects {layer.dim}"
            )
        chosen[tap] = layer
    return chosen


def _perturb_batch(
    model, taps: list[str], layers: dict[str, DetectorLayer],
    x: torch.Tensor, eps: float,
) -> dict[str, torch.Tensor]:
    """Per-tap nudged inputs for one image batch."""
    x = x.clone().requires_grad_(True)
    feats = spatial_mean_taps(model, x, taps)
    out = {}
    for ti, tap in enumerate(taps):
        logp = layers[tap].class_logprobs(feats[tap])
        chat = logp.argmax(dim=1).detach()
        best = logp.gather(1, chat[:, None]).sum()
        (grad,) = torch.autograd.grad(
            best, x, retain_graph=ti < len(taps) - 1
        )
        out[tap] = (x + eps * torch.sign(grad)).detach()
    return out


def export_perturbed(spec: ExportSpec) -> dict[str, np.ndarray]:
    """Write base plus gradient-perturbed features; returns the perturbed set.

    Requires ``spec.detector``. With eps == 0 the perturbed records are
    bitwise copies of the base records and no gradients are computed.
    """
    if spec.detector is None:
        raise ExportError("perturbed export needs a detector directory")
    model, taps, images, labels, splits = _prepare(spec)
    tensors = _base_features(model, taps, images, spec.batch_size)
    if spec.eps == 0.0:
        perturbed = {tap: tensors[tap].copy() for tap in taps}
    else:
        layers = _layers_for_taps(spec.detector, model, taps)
        chunks = {tap: [] for tap in taps}
        for start, stop in _batches(images.shape[0], spec.batch_size):
            x = torch.from_numpy(images[start:stop])
            nudged = _perturb_batch(model, taps, layers, x, spec.eps)
            with torch.no_grad():
                for tap in taps:
                    feats = spatial_mean_taps(model, nudged[tap], [tap])[tap]
                    chunks[tap].append(feats.cpu().numpy())
        perturbed = {tap: np.concatenate(chunks[tap], axis=0) for tap in taps}
    write_rffs(
        spec.out,
        dataset=spec.dataset_name(),
        layer_ids=taps,
        tensors=tensors,
        labels=labels,
        splits=splits,
        perturbed=perturbed,
    )
    return perturbed


def fgsm_inputs(
    model, x: torch.Tensor, y: torch.Tensor, eps: float
) -> torch.Tensor:
    """Adversarial inputs from the classifier head's cross-entropy."""
    x = x.clone().requires_grad_(True)
    loss = torch.nn.functional.cross_entropy(model(x), y)
    (grad,) = torch.autograd.grad(loss, x)
    return (x + eps * torch.sign(grad)).detach()


def _fgsm_images(
    model, images: np.ndarray, labels: np.ndarray, eps: float, batch_size: int
) -> np.ndarray:
    chunks = []
    for start, stop in _batches(images.shape[0], batch_size):
        x = torch.from_numpy(images[start:stop])
        y = torch.from_numpy(labels[start:stop])
        chunks.append(fgsm_inputs(model, x, y, eps).cpu().numpy())
    return np.concatenate(chunks, axis=0)
