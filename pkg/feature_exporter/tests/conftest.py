"""Shared fixtures: tiny image archives and a detector to climb.

The density package is installed in the test environment and acts as
the consumer side of every cross-component check; the exporter package
itself never imports it.
"""

import numpy as np
import pytest


def make_npz(path, n=48, n_classes=2, seed=0, with_labels=True, with_splits=False):
    """Images on a 1/1024 grid so float32 perturbation arithmetic is exact."""
    rng = np.random.default_rng(seed)
    images = rng.integers(0, 1024, size=(n, 3, 32, 32)).astype(np.float32) / 1024.0
    arrays = {"images": images}
    if with_labels:
        arrays["labels"] = rng.integers(0, n_classes, size=n).astype(np.int64)
    if with_splits:
        codes = np.zeros(n, dtype=np.uint8)
        codes[int(n * 0.75):] = 1
        arrays["splits"] = codes
    np.savez(path, **arrays)
    return arrays


@pytest.fixture(scope="session")
def image_npz(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "batch.npz"
    arrays = make_npz(path)
    return str(path), arrays


@pytest.fixture(scope="session")
def fitted_detector(tmp_path_factory, image_npz):
    """Exported block1 features -> untrained (Gaussian) detector directory."""
    from resflow import DetectorConfig, TrainConfig, fit_detector, save_detector
    from resflow.data import read_featureset

    from feature_exporter import ExportSpec, export_features

    root = tmp_path_factory.mktemp("det")
    feats_path = root / "train.rffs"
    npz_path, _ = image_npz
    export_features(
        ExportSpec(
            model="resnet-34", data=npz_path, out=str(feats_path),
            taps=("block1",), batch_size=16, seed=0,
        )
    )
    fs = read_featureset(feats_path)
    det = fit_detector(
        fs,
        DetectorConfig(n_blocks=2, hidden=16, seed=0, train=TrainConfig(max_epochs=0)),
    )
    det_dir = root / "detector"
    save_detector(det, det_dir)
    return str(det_dir), str(feats_path)
