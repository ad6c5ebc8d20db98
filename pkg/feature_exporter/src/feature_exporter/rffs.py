"""Write-only RFFS1 serializer.

The consumer side lives in the density-estimation package; this module
only produces files, and the byte layout is part of the contract:

    magic  b"RFFS1"
    u16    version (1)
    u32    header length, then UTF-8 "key=value\\n" lines in fixed
           order: dataset, has_labels, has_perturbed, has_splits,
           layers (comma list of id:dim), n_classes, n_samples
    i32[n] labels        (when has_labels)
    u8[n]  split codes   (when has_splits; 0 train, 1 val, 2 test)
    tensor records, one per layer then one per perturbed layer:
           u16 name length, name UTF-8, u32 n, u32 d, f32 row-major

Everything little-endian; tensors are cast to float32 on write.
Perturbed records are named "~" + layer id, so layer ids must not
start with "~" or contain "=", ",", ":" or newlines.
"""

from __future__ import annotations

import struct

import numpy as np

__all__ = ["write_rffs"]

_MAGIC = b"RFFS1"
_VERSION = 1
_FORBIDDEN = set("=,:\n")


def _check_layer_id(lid: str) -> None:
    if not lid or lid.startswith("~") or _FORBIDDEN & set(lid):
        raise ValueError(f"bad layer id {lid!r}")


def _tensor_record(out: bytearray, name: str, arr: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    out += struct.pack("<H", len(encoded))
    out += encoded
    out += struct.pack("<II", arr.shape[0], arr.shape[1])
    out += np.ascontiguousarray(arr, dtype="<f4").tobytes()


def write_rffs(
    path,
    dataset: str,
    layer_ids: list[str],
    tensors: dict[str, np.ndarray],
    labels: np.ndarray | None = None,
    splits: np.ndarray | None = None,
    perturbed: dict[str, np.ndarray] | None = None,
    n_classes: int | None = None,
) -> None:
    """Serialize one feature batch to ``path``.

    All tensors (and all perturbed tensors, when given: it is all
    layers or none) must agree on the row count; labels and splits,
    when present, must have that length. ``n_classes`` defaults to
    max(label) + 1, or 1 for unlabeled data.
    """
    if not layer_ids:
        raise ValueError("need at least one layer")
    if not perturbed:
        perturbed = None
    if _FORBIDDEN & set(dataset):
        raise ValueError(f"bad dataset name {dataset!r}")
    n = None
    for lid in layer_ids:
        _check_layer_id(lid)
        arr = np.asarray(tensors[lid])
        if arr.ndim != 2:
            raise ValueError(f"layer {lid!r}: tensor must be 2-D")
        if n is None:
            n = arr.shape[0]
        elif arr.shape[0] != n:
            raise ValueError(f"layer {lid!r}: row count differs")
    if perturbed is not None:
        missing = [lid for lid in layer_ids if lid not in perturbed]
        if missing:
            raise ValueError(f"perturbed tensors missing for {missing}")
        for lid in layer_ids:
            arr = np.asarray(perturbed[lid])
            if arr.shape != np.asarray(tensors[lid]).shape:
                raise ValueError(f"perturbed layer {lid!r}: shape differs from base")
    if labels is not None:
        labels = np.asarray(labels)
        if labels.shape != (n,):
            raise ValueError("labels length must match the tensors")
        if labels.min() < 0:
            raise ValueError("labels must be >= 0")
    if splits is not None:
        splits = np.asarray(splits)
        if splits.shape != (n,):
            raise ValueError("split codes length must match the tensors")
        if not np.isin(splits, (0, 1, 2)).all():
            raise ValueError("split codes must be 0 (train), 1 (val), or 2 (test)")
    if n_classes is None:
        n_classes = int(labels.max()) + 1 if labels is not None and n else 1

    layers = ",".join(
        f"{lid}:{np.asarray(tensors[lid]).shape[1]}" for lid in layer_ids
    )
    header = (
        f"dataset={dataset}\n"
        f"has_labels={int(labels is not None)}\n"
        f"has_perturbed={int(perturbed is not None)}\n"
        f"has_splits={int(splits is not None)}\n"
        f"layers={layers}\n"
        f"n_classes={n_classes}\n"
        f"n_samples={n}\n"
    ).encode("utf-8")

    out = bytearray()
    out += _MAGIC
    out += struct.pack("<H", _VERSION)
    out += struct.pack("<I", len(header))
    out += header
    if labels is not None:
        out += np.ascontiguousarray(labels, dtype="<i4").tobytes()
    if splits is not None:
        out += np.ascontiguousarray(splits, dtype="u1").tobytes()
    for lid in layer_ids:
        _tensor_record(out, lid, np.asarray(tensors[lid]))
    if perturbed is not None:
        for lid in layer_ids:
            _tensor_record(out, "~" + lid, np.asarray(perturbed[lid]))
    with open(path, "wb") as fh:
        fh.write(bytes(out))
