import json
import subprocess
import sys

import pytest

from feature_exporter.cli import main

from conftest import make_npz


def test_basic_export(image_npz, tmp_path, capsys):
    npz_path, arrays = image_npz
    out = tmp_path / "feats.rffs"
    rc = main(["--model", "resnet-34", "--data", npz_path, "--out", str(out),
               "--taps", "block1", "--batch-size", "16"])
    assert rc == 0
    assert out.exists()
    msg = capsys.readouterr().out
    assert f"wrote {out}: {arrays['images'].shape[0]} samples, 1 tap(s)" in msg

    sidecar = json.loads((tmp_path / "feats.rffs.run.json").read_text())
    assert sidecar["command"] == "feature-export"
    assert sidecar["options"]["model"] == "resnet-34"
    assert sidecar["options"]["taps"] == "block1"
    assert sidecar["normalization"] == {"mean": [0.0, 0.0, 0.0],
                                        "std": [1.0, 1.0, 1.0]}
    assert "torch" in sidecar


def test_normalize_preset_lands_in_manifest(image_npz, tmp_path):
    npz_path, _ = image_npz
    out = tmp_path / "n.rffs"
    rc = main(["--model", "resnet-34", "--data", npz_path, "--out", str(out),
               "--taps", "block1", "--batch-size", "16",
               "--normalize", "cifar10"])
    assert rc == 0
    sidecar = json.loads((tmp_path / "n.rffs.run.json").read_text())
    assert sidecar["normalization"]["mean"] == pytest.approx(
        [0.4914, 0.4822, 0.4465]
    )


def test_detector_route_writes_perturbed(image_npz, fitted_detector, tmp_path,
                                          capsys):
    from resflow.data import read_featureset

    npz_path, _ = image_npz
    det_dir, _ = fitted_detector
    out = tmp_path / "p.rffs"
    rc = main(["--model", "resnet-34", "--data", npz_path, "--out", str(out),
               "--taps", "block1", "--batch-size", "16",
               "--detector", det_dir, "--eps", "0.002"])
    assert rc == 0
    assert "perturbed at eps=0.002" in capsys.readouterr().out
    fs = read_featureset(out)
    assert "block1" in fs.perturbed


def test_eps_without_detector_fails(image_npz, tmp_path, capsys):
    npz_path, _ = image_npz
    rc = main(["--model", "resnet-34", "--data", npz_path,
               "--out", str(tmp_path / "x.rffs"), "--eps", "0.01"])
    assert rc == 1
    assert "--eps needs --detector" in capsys.readouterr().err


def test_missing_data_file_fails(tmp_path, capsys):
    rc = main(["--model", "resnet-34", "--data", str(tmp_path / "no.npz"),
               "--out", str(tmp_path / "x.rffs")])
    assert rc == 1
    assert capsys.readouterr().err.startswith("error:")


def test_unlabeled_archive_round_trips(tmp_path):
    from resflow.data import read_featureset

    npz_path = tmp_path / "u.npz"
    make_npz(npz_path, n=8, with_labels=False)
    out = tmp_path / "u.rffs"
    rc = main(["--model", "densenet-100", "--data", str(npz_path),
               "--out", str(out), "--taps", "dense1", "--batch-size", "8"])
    assert rc == 0
    fs = read_featureset(out)
    assert fs.labels is None


def test_usage_errors_exit_2(image_npz, tmp_path):
    npz_path, _ = image_npz
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["--model", "vgg-16", "--data", npz_path,
              "--out", str(tmp_path / "x.rffs")])
    assert exc.value.code == 2


def test_module_entry_point():
    proc = subprocess.run(
        [sys.executable, "-m", "feature_exporter", "--help"],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0
    assert "feature-export" in proc.stdout
