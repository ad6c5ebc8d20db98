"""CLI: exit codes, file outputs, determinism, report consistency."""

import json
import os
import subprocess
import sys

import numpy as np
import pytest

from resflow.cli import main
from resflow.data import read_featureset
from resflow.metrics import evaluate_detection, parse_report
from resflow.pipeline import load_detector

SRC = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "src")


def synth_args(path, kind="mixture", n=160, seed=1, layers=2, extra=()):
    base = [
        "synth", "--kind", kind, "--n", str(n), "--dim", "2",
        "--layers", str(layers), "--seed", str(seed), "--out", str(path),
    ]
    return base + list(extra)


def make_train(tmp_path, seed=1):
    path = tmp_path / "train.rffs"
    rc = main(synth_args(path, extra=["--n-classes", "2", "--class-sep", "4.0"]))
    assert rc == 0
    return path


def make_ood(tmp_path, offset="4.0", seed=2, n=80):
    path = tmp_path / f"ood_{offset}.rffs"
    rc = main(
        synth_args(
            path, kind="shifted-ood", n=n, seed=seed,
            extra=["--base-kind", "gaussian", "--offset", offset],
        )
    )
    assert rc == 0
    return path


def make_detector(tmp_path, train, epochs=0):
    det = tmp_path / "det"
    rc = main(
        [
            "fit", "--features", str(train), "--out", str(det),
            "--epochs", str(epochs), "--n-blocks", "2", "--hidden", "8",
            "--seed", "0",
        ]
    )
    assert rc == 0
    return det


def test_synth_deterministic(tmp_path):
    a = tmp_path / "a.rffs"
    b = tmp_path / "b.rffs"
    c = tmp_path / "c.rffs"
    assert main(synth_args(a, kind="banana", layers=1)) == 0
    assert main(synth_args(b, kind="banana", layers=1)) == 0
    assert main(synth_args(c, kind="banana", layers=1, seed=9)) == 0
    assert a.read_bytes() == b.read_bytes()
    assert a.read_bytes() != c.read_bytes()
    manifest = json.loads((tmp_path / "a.rffs.run.json").read_text())
    assert manifest["command"] == "synth"
    assert manifest["options"]["kind"] == "banana"


def test_synth_split_tags(tmp_path):
    path = tmp_path / "s.rffs"
    rc = main(
        synth_args(
            path,
            extra=["--n-classes", "2", "--class-sep", "4.0", "--split", "0.8,0.2"],
        )
    )
    assert rc == 0
    fs = read_featureset(path)
    assert fs.split_mask("train").sum() == 128
    assert fs.split_mask("val").sum() == 32


def test_fit_writes_history_and_manifest(tmp_path):
    train = make_train(tmp_path)
    det = make_detector(tmp_path, train)
    assert (det / "detector.json").exists()
    history = sorted(os.listdir(det / "history"))
    assert history == [
        "history_l0_c0.csv", "history_l0_c1.csv",
        "history_l1_c0.csv", "history_l1_c1.csv",
    ]
    run = json.loads((det / "run.json").read_text())
    assert run["command"] == "fit"
    assert run["options"]["epochs"] == 0
    loaded = load_detector(det)
    assert loaded.layer_ids == ["layer0", "layer1"]


def test_eval_report_matches_scores_csv(tmp_path):
    train = make_train(tmp_path)
    ood = make_ood(tmp_path)
    det = make_detector(tmp_path, train)
    outdir = tmp_path / "results"
    rc = main(
        [
            "eval", "--detector", str(det), "--in-features", str(train),
            "--out-features", str(ood), "--outdir", str(outdir), "--mode", "off",
        ]
    )
    assert rc == 0
    report = parse_report((outdir / "report.txt").read_text())
    assert report.auroc > 0.95
    assert report.n_in == 160 and report.n_out == 80

    rows = (outdir / "scores.csv").read_text().splitlines()[1:]
    scores = np.array([float(r.split(",")[0]) for r in rows])
    labels = np.array([int(r.split(",")[1]) for r in rows])
    redo = evaluate_detection(scores[labels == 1], scores[labels == 0])
    assert redo.auroc == report.auroc
    assert redo.tnr_at_tpr95 == report.tnr_at_tpr95
    assert redo.detection_accuracy == report.detection_accuracy
    assert redo.aupr_in == report.aupr_in
    assert redo.aupr_out == report.aupr_out

    roc_rows = (outdir / "roc.csv").read_text().splitlines()
    assert roc_rows[0] == "fpr,tpr,threshold"
    first = roc_rows[1].split(",")
    assert float(first[0]) == 0.0 and float(first[1]) == 0.0


def test_tune_updates_detector(tmp_path):
    train = make_train(tmp_path)
    ood = make_ood(tmp_path, offset="2.0")
    det = make_detector(tmp_path, train)
    rc = main(
        [
            "tune", "--detector", str(det), "--in-features", str(train),
            "--out-features", str(ood), "--eps-grid", "0,0.001",
        ]
    )
    assert rc == 0
    manifest = json.loads((det / "detector.json").read_text())
    assert manifest["eps"] in (0.0, 0.001)
    assert len(manifest["weights"]) == 2
    tuning = (det / "tuning.csv").read_text().splitlines()
    assert tuning[0] == "eps,auroc"
    assert len(tuning) == 3
    # the tuned weights survive a reload
    loaded = load_detector(det)
    np.testing.assert_array_equal(loaded.weights, manifest["weights"])


def test_bench_baseline_equals_untrained_resflow(tmp_path, capsys):
    train = make_train(tmp_path)
    ood = make_ood(tmp_path)
    outdir = tmp_path / "bench"
    rc = main(
        [
            "bench", "--features", str(train), "--ood", str(ood),
            "--outdir", str(outdir), "--compare", "baseline,gda,resflow",
            "--epochs", "0", "--n-blocks", "2", "--hidden", "8", "--seed", "0",
        ]
    )
    assert rc == 0
    lines = capsys.readouterr().out.splitlines()
    table = {ln.split()[0]: ln.split()[1:] for ln in lines if ln and ln[0].isalpha()}
    assert table["baseline"] == table["resflow"]
    assert "gda" in table

    csv_rows = (outdir / "bench.csv").read_text().splitlines()[1:]
    by_name = {r.split(",")[0]: [float(v) for v in r.split(",")[1:]] for r in csv_rows}
    assert abs(by_name["baseline"][1] - by_name["resflow"][1]) < 1e-12


def test_bench_iterations_curve(tmp_path):
    train = make_train(tmp_path)
    ood = make_ood(tmp_path, offset="2.0")
    outdir = tmp_path / "bench"
    rc = main(
        [
            "bench", "--features", str(train), "--ood", str(ood),
            "--outdir", str(outdir), "--compare", "baseline,resflow", "--train",
            "--epochs", "2", "--iterations", "2", "--n-blocks", "2",
            "--hidden", "8", "--learning-rate", "1e-3", "--seed", "0",
        ]
    )
    assert rc == 0
    rows = (outdir / "iterations.csv").read_text().splitlines()
    assert rows[0] == "epoch,auroc"
    epochs = [int(r.split(",")[0]) for r in rows[1:]]
    assert epochs == [0, 1, 2]
    csv_rows = (outdir / "bench.csv").read_text().splitlines()[1:]
    baseline_auroc = next(
        float(r.split(",")[2]) for r in csv_rows if r.startswith("baseline")
    )
    first_curve = float(rows[1].split(",")[1])
    assert abs(first_curve - baseline_auroc) < 1e-12


def test_env_seed_override(tmp_path, monkeypatch):
    plain = tmp_path / "plain.rffs"
    assert main(synth_args(plain, kind="banana", layers=1, seed=5)) == 0
    monkeypatch.setenv("RESFLOW_SEED", "5")
    overridden = tmp_path / "env.rffs"
    assert main(synth_args(overridden, kind="banana", layers=1, seed=0)) == 0
    assert plain.read_bytes() == overridden.read_bytes()


def test_usage_errors_exit_2():
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["synth", "--kind", "banana"])  # missing required --n/--out
    assert exc.value.code == 2


def test_runtime_errors_return_1(tmp_path, capsys):
    rc = main(
        [
            "eval", "--detector", str(tmp_path / "nope"),
            "--in-features", "x.rffs", "--out-features", "y.rffs",
            "--outdir", str(tmp_path / "o"),
        ]
    )
    assert rc == 1
    assert "error:" in capsys.readouterr().err
    train = make_train(tmp_path)
    ood = make_ood(tmp_path)
    rc = main(
        [
            "bench", "--features", str(train), "--ood", str(ood),
            "--outdir", str(tmp_path / "b"), "--compare", "nonsense",
        ]
    )
    assert rc == 1
    assert "unknown candidate" in capsys.readouterr().err


def test_module_entrypoint_smoke(tmp_path):
    env = dict(os.environ, PYTHONPATH=SRC + os.pathsep + os.environ.get("PYTHONPATH", ""))
    out = tmp_path / "cli.rffs"
    proc = subprocess.run(
        [
            sys.executable, "-m", "resflow", "synth", "--kind", "banana",
            "--n", "32", "--out", str(out),
        ],
        capture_output=True,
        text=True,
        env=env,
        cwd=str(tmp_path),
    )
    assert proc.returncode == 0, proc.stderr
    assert "wrote" in proc.stdout
    assert out.exists()