"""The writer must be byte-compatible with the consumer package."""

import numpy as np
import pytest

from feature_exporter import write_rffs


def sample_payload(seed=0, n=20):
    rng = np.random.default_rng(seed)
    tensors = {
        "convA": rng.normal(size=(n, 5)),
        "convB": rng.normal(size=(n, 3)),
    }
    labels = rng.integers(0, 3, size=n).astype(np.int64)
    splits = (np.arange(n) % 3).astype(np.uint8)
    return tensors, labels, splits


def test_reader_package_accepts_output(tmp_path):
    from resflow.data import read_featureset

    tensors, labels, splits = sample_payload()
    path = tmp_path / "f.rffs"
    write_rffs(path, "toy", ["convA", "convB"], tensors,
               labels=labels, splits=splits)
    fs = read_featureset(path)
    assert fs.dataset == "toy"
    assert fs.layer_ids == ["convA", "convB"]
    assert fs.n_classes == 3
    assert np.array_equal(fs.labels, labels)
    assert np.array_equal(fs.splits, splits)
    for lid in fs.layer_ids:
        assert np.array_equal(
            fs.tensors[lid], tensors[lid].astype(np.float32).astype(np.float64)
        )


def test_bytes_match_reference_writer(tmp_path):
    from resflow.data import FeatureSet, write_featureset

    tensors, labels, splits = sample_payload(seed=1)
    perturbed = {lid: arr + 0.5 for lid, arr in tensors.items()}
    ours = tmp_path / "ours.rffs"
    write_rffs(ours, "toy", ["convA", "convB"], tensors,
               labels=labels, splits=splits, perturbed=perturbed)
    theirs = tmp_path / "theirs.rffs"
    write_featureset(
        FeatureSet(
            dataset="toy",
            layer_ids=["convA", "convB"],
            tensors={k: v.copy() for k, v in tensors.items()},
            labels=labels.copy(),
            splits=splits.copy(),
            perturbed={k: v.copy() for k, v in perturbed.items()},
            n_classes=3,
        ),
        theirs,
    )
    assert ours.read_bytes() == theirs.read_bytes()


def test_unlabeled_minimal_file(tmp_path):
    from resflow.data import read_featureset

    path = tmp_path / "m.rffs"
    write_rffs(path, "m", ["only"], {"only": np.zeros((4, 2))})
    fs = read_featureset(path)
    assert fs.labels is None and fs.splits is None and not fs.perturbed
    assert fs.n_classes == 1


def test_layer_id_rules():
    arr = {"ok": np.zeros((2, 2)), "~bad": np.zeros((2, 2)), "a=b": np.zeros((2, 2))}
    with pytest.raises(ValueError, match="bad layer id"):
        write_rffs("x", "d", ["~bad"], arr)
    with pytest.raises(ValueError, match="bad layer id"):
        write_rffs("x", "d", ["a=b"], arr)


def test_row_count_mismatch():
    tensors = {"a": np.zeros((3, 2)), "b": np.zeros((4, 2))}
    with pytest.raises(ValueError, match="row count differs"):
        write_rffs("x", "d", ["a", "b"], tensors)


def test_label_and_split_validation(tmp_path):
    tensors = {"a": np.zeros((3, 2))}
    with pytest.raises(ValueError, match="labels length"):
        write_rffs(tmp_path / "x", "d", ["a"], tensors, labels=np.zeros(5, int))
    with pytest.raises(ValueError, match="split codes"):
        write_rffs(tmp_path / "x", "d", ["a"], tensors,
                   splits=np.full(3, 9, dtype=np.uint8))


def test_partial_perturbed_rejected(tmp_path):
    tensors = {"a": np.zeros((3, 2)), "b": np.zeros((3, 2))}
    with pytest.raises(ValueError, match="perturbed tensors missing"):
        write_rffs(tmp_path / "x", "d", ["a", "b"], tensors,
                   perturbed={"a": np.zeros((3, 2))})
