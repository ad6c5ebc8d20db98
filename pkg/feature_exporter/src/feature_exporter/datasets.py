"""Image batches from .npz archives.

The archive must hold an ``images`` array, either (n, 3, h, w) float or
(n, h, w, 3) in any integer/float dtype; integers are scaled by 1/255.
Optional arrays: ``labels`` (non-negative ints) and ``splits`` (codes
0 train / 1 val / 2 test). Normalization is per-channel (x - mean)/std
with presets for the common 32x32 datasets; the constants used are
reported back so the CLI can record them in the run manifest.
"""

from __future__ import annotations

import numpy as np

__all__ = ["NORMALIZATION", "parse_normalization", "load_npz"]

NORMALIZATION = {
    "none": ((0.0, 0.0, 0.0), (1.0, 1.0, 1.0)),
    "cifar10": ((0.4914, 0.4822, 0.4465), (0.2470, 0.2435, 0.2616)),
    "cifar100": ((0.5071, 0.4865, 0.4409), (0.2673, 0.2564, 0.2762)),
    "svhn": ((0.4377, 0.4438, 0.4728), (0.1980, 0.2010, 0.1970)),
}


def parse_normalization(text: str) -> tuple[tuple[float, ...], tuple[float, ...]]:
    """A preset name, or explicit "m1,m2,m3:s1,s2,s3" constants."""
    if text in NORMALIZATION:
        return NORMALIZATION[text]
    mean_part, sep, std_part = text.partition(":")
    if not sep:
        raise ValueError(
            f"unknown normalization {text!r}; use one of {sorted(NORMALIZATION)} "
            "or explicit m1,m2,m3:s1,s2,s3"
        )
    mean = tuple(float(v) for v in mean_part.split(","))
    std = tuple(float(v) for v in std_part.split(","))
    if len(mean) != 3 or len(std) != 3:
        raise ValueError("normalization needs three means and three stds")
    if any(s <= 0 for s in std):
        raise ValueError("normalization stds must be positive")
    return mean, std


def load_npz(path, normalization="none"):
    """Load and normalize an image archive.

    Returns (images, labels, splits): images float32 (n, 3, h, w),
    labels int64 or None, splits uint8 or None.
    """
    if isinstance(normalization, str):
        mean, std = parse_normalization(normalization)
    else:
        mean, std = normalization
    with np.load(path) as npz:
        if "images" not in npz:
            raise ValueError(f"{path}: no 'images' array")
        images = npz["images"]
        labels = npz["labels"] if "labels" in npz else None
        splits = npz["splits"] if "splits" in npz else None
    if images.ndim != 4:
        raise ValueError(f"{path}: images must be 4-D, got shape {images.shape}")
    if images.shape[-1] == 3 and images.shape[1] != 3:
        images = images.transpose(0, 3, 1, 2)
    if images.shape[1] != 3:
        raise ValueError(f"{path}: expected 3 channels, got shape {images.shape}")
    if np.issubdtype(images.dtype, np.integer):
        images = images.astype(np.float32) / 255.0
    else:
        images = images.astype(np.float32)
    images = images - np.asarray(mean, dtype=np.float32).reshape(1, 3, 1, 1)
    images = images / np.asarray(std, dtype=np.float32).reshape(1, 3, 1, 1)

    n = images.shape[0]
    if labels is not None:
        labels = np.asarray(labels).reshape(-1).astype(np.int64)
        if labels.shape != (n,) or (n and labels.min() < 0):
            raise ValueError(f"{path}: labels must be {n} non-negative ints")
    if splits is not None:
        splits = np.asarray(splits).reshape(-1).astype(np.uint8)
        if splits.shape != (n,) or (n and not np.isin(splits, (0, 1, 2)).all()):
            raise ValueError(f"{path}: split codes must be {n} values in 0/1/2")
    return np.ascontiguousarray(images), labels, splits
