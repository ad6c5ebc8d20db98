"""Feature sets: on-disk format, synthetic generators, splits.

A FeatureSet holds per-layer activation matrices for one batch of
samples, with optional class labels, split tags, and a second
(perturbed) tensor per layer. On disk it is a single little-endian
binary file:

    magic  b"RFFS1"
    u16    version (1)
    u32    header length, then that many bytes of UTF-8 "key=value\\n"
           lines: dataset, has_labels, has_perturbed, has_splits,
           layers (comma list of id:dim), n_classes, n_samples
    i32[n] labels        (when has_labels)
    u8[n]  split codes   (when has_splits; 0 train, 1 val, 2 test)
    tensor records: for every layer in manifest order, then for every
           perturbed layer in the same order:
           u16 name length, name UTF-8, u32 n, u32 d, f32[n*d] row-major

Tensors are 32-bit on disk and float64 in memory. Perturbed records are
named "~" + layer id, so layer ids must not start with "~".
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .binio import ByteReader, ByteWriter, TruncatedError
from .seeding import derived_rng
from .validation import as_labels, as_matrix

__all__ = [
    "FeatureSet",
    "FeatureFormatError",
    "BadMagicError",
    "DimMismatchError",
    "TruncatedError",
    "SPLIT_NAMES",
    "write_featureset",
    "read_featureset",
    "SynthSpec",
    "generate",
    "split_featureset",
]

_MAGIC = b"RFFS1"
_VERSION = 1

SPLIT_NAMES = ("train", "val", "test")
_SPLIT_CODES = {name: i for i, name in enumerate(SPLIT_NAMES)}

_FORBIDDEN_ID_CHARS = set("=,:\n")


class FeatureFormatError(ValueError):
    """Feature file violates the format contract."""


class BadMagicError(FeatureFormatError):
    """File does not start with the expected magic bytes."""


class DimMismatchError(FeatureFormatError):
    """A tensor record disagrees with the manifest about its shape."""


def _check_layer_id(layer_id: str) -> None:
    if not layer_id or layer_id.startswith("~"):
        raise ValueError(f"invalid layer id {layer_id!r}")
    if any(c in _FORBIDDEN_ID_CHARS for c in layer_id):
        raise ValueError(f"invalid layer id {layer_id!r}")


@dataclass
class FeatureSet:
    """Per-layer feature tensors for one batch of samples.

    All tensors share the row count; ``labels`` (class ids) and
    ``splits`` (train/val/test codes) are per-row when present.
    """

    dataset: str
    layer_ids: list[str]
    tensors: dict[str, np.ndarray]
    labels: np.ndarray | None = None
    splits: np.ndarray | None = None
    perturbed: dict[str, np.ndarray] = field(default_factory=dict)
    n_classes: int = 0

    @property
    def n_samples(self) -> int:
        return self.tensors[self.layer_ids[0]].shape[0]

    def layer_dim(self, layer_id: str) -> int:
        return self.tensors[layer_id].shape[1]

    def validate(self) -> "FeatureSet":
        if not self.layer_ids:
            raise ValueError("feature set needs at least one layer")
        if len(set(self.layer_ids)) != len(self.layer_ids):
            raise ValueError("duplicate layer ids")
        for lid in self.layer_ids:
            _check_layer_id(lid)
            if lid not in self.tensors:
                raise ValueError(f"missing tensor for layer {lid!r}")
        n = self.n_samples
        for lid in self.layer_ids:
            arr = as_matrix(self.tensors[lid], f"tensor {lid!r}")
            if arr.shape[0] != n:
                raise ValueError(f"layer {lid!r} has {arr.shape[0]} rows, expected {n}")
            self.tensors[lid] = arr
        for lid, arr in self.perturbed.items():
            if lid not in self.tensors:
                raise ValueError(f"perturbed tensor for unknown layer {lid!r}")
            arr = as_matrix(arr, f"perturbed {lid!r}")
            if arr.shape != self.tensors[lid].shape:
                raise ValueError(f"perturbed {lid!r} shape differs from base tensor")
            self.perturbed[lid] = arr
        if self.labels is not None:
            self.labels = as_labels(self.labels, n, "labels")
            if self.n_classes < 1:
                raise ValueError("labelled feature set needs n_classes >= 1")
            if self.labels.size and self.labels.max() >= self.n_classes:
                raise ValueError("label out of range")
        if self.splits is not None:
            arr = np.asarray(self.splits)
            if arr.shape != (n,):
                raise ValueError("splits must be one code per sample")
            if arr.size and (arr.min() < 0 or arr.max() > 2):
                raise ValueError("split codes must be 0, 1, or 2")
            self.splits = arr.astype(np.uint8)
        return self

    def split_mask(self, name: str) -> np.ndarray:
        """Boolean row mask for one of train / val / test."""
        if name not in _SPLIT_CODES:
            raise ValueError(f"unknown split {name!r}")
        if self.splits is None:
            raise ValueError("feature set has no split tags")
        return self.splits == _SPLIT_CODES[name]

    def subset(self, mask: np.ndarray, dataset: str | None = None) -> "FeatureSet":
        """Row-subset copy; keeps layers, labels, splits, perturbed tensors."""
        mask = np.asarray(mask)
        return FeatureSet(
            dataset=self.dataset if dataset is None else dataset,
            layer_ids=list(self.layer_ids),
            tensors={lid: self.tensors[lid][mask].copy() for lid in self.layer_ids},
            labels=None if self.labels is None else self.labels[mask].copy(),
            splits=None if self.splits is None else self.splits[mask].copy(),
            perturbed={lid: arr[mask].copy() for lid, arr in self.perturbed.items()},
            n_classes=self.n_classes,
        ).validate()


def write_featureset(fs: FeatureSet, path) -> None:
    """Serialize to the RFFS1 format described in the module docstring.

    Tensor payloads are cast to float32; everything else is exact, so
    writing a file that was just read reproduces it byte for byte.
    """
    fs.validate()
    w = ByteWriter()
    w.raw(_MAGIC)
    w.u16(_VERSION)
    layers = ",".join(f"{lid}:{fs.layer_dim(lid)}" for lid in fs.layer_ids)
    header = (
        f"dataset={fs.dataset}\n"
        f"has_labels={int(fs.labels is not None)}\n"
        f"has_perturbed={int(bool(fs.perturbed))}\n"
        f"has_splits={int(fs.splits is not None)}\n"
        f"layers={layers}\n"
        f"n_classes={fs.n_classes}\n"
        f"n_samples={fs.n_samples}\n"
    ).encode("utf-8")
    w.u32(len(header))
    w.raw(header)
    if fs.labels is not None:
        w.i32_array(fs.labels)
    if fs.splits is not None:
        w.u8_array(fs.splits)

    def tensor_record(name: str, arr: np.ndarray) -> None:
        encoded = name.encode("utf-8")
        w.u16(len(encoded))
        w.raw(encoded)
        w.u32(arr.shape[0])
        w.u32(arr.shape[1])
        w.f32_array(arr)

    for lid in fs.layer_ids:
        tensor_record(lid, fs.tensors[lid])
    if fs.perturbed:
        for lid in fs.layer_ids:
            if lid not in fs.perturbed:
                raise ValueError(f"perturbed tensor missing for layer {lid!r}")
            tensor_record("~" + lid, fs.perturbed[lid])
    with open(path, "wb") as fh:
        fh.write(w.getvalue())


def _parse_manifest(header: str) -> dict[str, str]:
    fields: dict[str, str] = {}
    for line in header.splitlines():
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise FeatureFormatError(f"manifest line without '=': {line!r}")
        fields[key] = value
    for key in ("dataset", "layers", "n_samples", "n_classes"):
        if key not in fields:
            raise FeatureFormatError(f"manifest missing {key!r}")
    return fields


def read_featureset(path) -> FeatureSet:
    """Load an RFFS1 file into float64 arrays.

    Raises:
        BadMagicError: wrong leading bytes.
        TruncatedError: payload shorter than the manifest promises.
        DimMismatchError: tensor record shape disagrees with the manifest.
        FeatureFormatError: any other structural problem.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    r = ByteReader(data, name=str(path))
    if r.take(len(_MAGIC)) != _MAGIC:
        raise BadMagicError(f"{path}: bad magic")
    version = r.u16()
    if version != _VERSION:
        raise FeatureFormatError(f"{path}: unsupported version {version}")
    header = _parse_manifest(r.take(r.u32()).decode("utf-8"))
    n = int(header["n_samples"])
    n_classes = int(header["n_classes"])
    layer_ids: list[str] = []
    dims: dict[str, int] = {}
    for part in header["layers"].split(","):
        lid, sep, dim = part.partition(":")
        if not sep:
            raise FeatureFormatError(f"{path}: bad layer entry {part!r}")
        layer_ids.append(lid)
        dims[lid] = int(dim)
    labels = r.i32_array(n) if header.get("has_labels") == "1" else None
    splits = r.u8_array(n) if header.get("has_splits") == "1" else None

    def read_record(expected_name: str, lid: str) -> np.ndarray:
        name = r.take(r.u16()).decode("utf-8")
        if name != expected_name:
            raise FeatureFormatError(
                f"{path}: expected tensor {expected_name!r}, found {name!r}"
            )
        rows, cols = r.u32(), r.u32()
        if rows != n or cols != dims[lid]:
            raise DimMismatchError(
                f"{path}: tensor {name!r} is {rows}x{cols}, "
                f"manifest says {n}x{dims[lid]}"
            )
        return r.f32_array(rows * cols, shape=(rows, cols))

    tensors = {lid: read_record(lid, lid) for lid in layer_ids}
    perturbed: dict[str, np.ndarray] = {}
    if header.get("has_perturbed") == "1":
        perturbed = {lid: read_record("~" + lid, lid) for lid in layer_ids}
    if not r.exhausted:
        raise FeatureFormatError(f"{path}: trailing bytes after last tensor")
    return FeatureSet(
        dataset=header["dataset"],
        layer_ids=layer_ids,
        tensors=tensors,
        labels=labels,
        splits=splits,
        perturbed=perturbed,
        n_classes=n_classes,
    ).validate()


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for a synthetic FeatureSet.

    Kinds:
        gaussian     isotropic normal, ``scale`` standard deviation.
        banana       2-D curved ridge: x1 = z1, x2 = z2 + 0.25 z1^2 - 1
                     with z ~ N(0, diag(4, 1)).
        ring         2-D circle of ``radius`` with ``scale`` radial noise.
        mixture      ``n_classes`` Gaussians spaced ``class_sep`` apart
                     along the first axis; ``cov_kind`` "tied" gives every
                     class the same scale, "per_class" scales class c by
                     (c + 1).
        shifted-ood  ``base_kind`` (banana or gaussian) with ``offset``
                     added to every coordinate and, for the banana,
                     optionally the curvature sign flipped.

    ``layers`` independent copies are drawn per layer id; class labels
    are drawn once and shared by all layers.
    """

    kind: str
    n: int
    dim: int = 2
    seed: int = 0
    n_classes: int = 1
    layers: int = 1
    scale: float = 1.0
    radius: float = 3.0
    class_sep: float = 3.0
    cov_kind: str = "tied"
    offset: float = 0.0
    flip_curvature: bool = False
    base_kind: str = "banana"

    def validate(self) -> None:
        kinds = ("gaussian", "banana", "ring", "mixture", "shifted-ood")
        if self.kind not in kinds:
            raise ValueError(f"unknown kind {self.kind!r}; valid kinds: {kinds}")
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if self.kind == "mixture" and self.n_classes < 1:
            raise ValueError("mixture needs n_classes >= 1")
        if self.cov_kind not in ("tied", "per_class"):
            raise ValueError(f"unknown cov_kind {self.cov_kind!r}")
        if self.base_kind not in ("banana", "gaussian"):
            raise ValueError(f"unknown base_kind {self.base_kind!r}")
        needs_2d = self.kind in ("banana", "ring") or (
            self.kind == "shifted-ood" and self.base_kind == "banana"
        )
        if needs_2d and self.dim != 2:
            raise ValueError(f"kind {self.kind!r} is 2-D only")


def _banana_points(n: int, rng: np.random.Generator, flip: bool) -> np.ndarray:
    z = rng.standard_normal((n, 2)) * np.array([2.0, 1.0])
    bend = 0.25 * z[:, 0] ** 2 - 1.0
    x2 = z[:, 1] - bend if flip else z[:, 1] + bend
    return np.column_stack([z[:, 0], x2])


def _layer_points(spec: SynthSpec, labels: np.ndarray, rng) -> np.ndarray:
    if spec.kind == "gaussian":
        return spec.scale * rng.standard_normal((spec.n, spec.dim))
    if spec.kind == "banana":
        return _banana_points(spec.n, rng, flip=False)
    if spec.kind == "ring":
        theta = rng.uniform(0.0, 2.0 * np.pi, size=spec.n)
        radius = spec.radius + spec.scale * rng.standard_normal(spec.n)
        return np.column_stack([radius * np.cos(theta), radius * np.sin(theta)])
    if spec.kind == "mixture":
        centers = np.zeros((spec.n_classes, spec.dim))
        centers[:, 0] = spec.class_sep * (
            np.arange(spec.n_classes) - 0.5 * (spec.n_classes - 1)
        )
        scales = np.full(spec.n_classes, spec.scale)
        if spec.cov_kind == "per_class":
            scales = spec.scale * (np.arange(spec.n_classes) + 1.0)
        noise = rng.standard_normal((spec.n, spec.dim))
        return centers[labels] + noise * scales[labels][:, None]
    if spec.kind == "shifted-ood":
        if spec.base_kind == "banana":
            pts = _banana_points(spec.n, rng, flip=spec.flip_curvature)
        else:
            pts = spec.scale * rng.standard_normal((spec.n, spec.dim))
        return pts + spec.offset
    raise AssertionError(f"unreachable kind {spec.kind!r}")


def generate(spec: SynthSpec) -> FeatureSet:
    """Draw a deterministic synthetic FeatureSet from ``spec``.

    Layer tensors are independent draws (per-layer derived seeds); the
    label vector is drawn once. For the mixture kind labels are exactly
    balanced (round-robin, then shuffled).
    """
    spec.validate()
    if spec.kind == "mixture":
        labels = np.arange(spec.n, dtype=np.int64) % spec.n_classes
        labels = derived_rng(spec.seed, "labels").permutation(labels)
        n_classes = spec.n_classes
    else:
        labels = np.zeros(spec.n, dtype=np.int64)
        n_classes = 1
    layer_ids = [f"layer{i}" for i in range(spec.layers)]
    tensors = {
        lid: _layer_points(spec, labels, derived_rng(spec.seed, "layer", i))
        for i, lid in enumerate(layer_ids)
    }
    return FeatureSet(
        dataset=spec.kind,
        layer_ids=layer_ids,
        tensors=tensors,
        labels=labels,
        n_classes=n_classes,
    ).validate()


def split_featureset(fs: FeatureSet, fractions=(0.8, 0.2), seed: int = 0) -> FeatureSet:
    """Assign stratified train/val(/test) tags; returns a tagged copy.

    ``fractions`` has two or three entries summing to 1. Within every
    class the rows are shuffled with a class-derived seed and cut at the
    rounded cumulative boundaries, so the split is deterministic,
    stratified, and a partition of the input.
    """
    fs.validate()
    fracs = [float(f) for f in fractions]
    if len(fracs) not in (2, 3):
        raise ValueError("fractions must have 2 or 3 entries")
    if any(f < 0 for f in fracs):
        raise ValueError("fractions must be non-negative")
    if abs(sum(fracs) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(fracs)}")
    n = fs.n_samples
    labels = fs.labels if fs.labels is not None else np.zeros(n, dtype=np.int64)
    codes = np.zeros(n, dtype=np.uint8)
    for c in np.unique(labels):
        rows = np.flatnonzero(labels == c)
        rows = derived_rng(seed, "split", int(c)).permutation(rows)
        cuts = [int(round(sum(fracs[: j + 1]) * rows.size)) for j in range(len(fracs))]
        cuts[-1] = rows.size
        start = 0
        for code, stop in enumerate(cuts):
            codes[rows[start:stop]] = code
            start = stop
    out = replace(fs, splits=codes)
    return out.validate()
