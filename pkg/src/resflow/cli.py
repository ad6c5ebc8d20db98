"""Command line: synthesize data, fit, tune, evaluate, benchmark.

Every command that produces a directory drops a run.json manifest with
the options it ran under; synth writes a sidecar next to its output
file. The RESFLOW_SEED environment variable overrides --seed wherever a
command accepts one. Exit codes: 0 success, 1 runtime failure, 2 usage.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .data import (
    SynthSpec,
    generate,
    read_featureset,
    split_featureset,
    write_featureset,
)
from .flow import TrainConfig
from .gaussian import fit_gda, gda_score
from .metrics import evaluate_detection, report_lines, roc_curve
from .pipeline import (
    EPS_GRID,
    Detector,
    DetectorConfig,
    detector_score,
    fit_layer_models,
    load_detector,
    mahalanobis_score,
    save_detector,
    tune_detector,
)

_CANDIDATES = ("baseline", "gda", "resflow")


def _write_json(path, payload) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _run_manifest(args, path) -> None:
    options = {}
    for key, value in vars(args).items():
        if key == "func":
            continue
        if isinstance(value, (bool, int, float, str)) or value is None:
            options[key] = value
        else:
            options[key] = str(value)
    _write_json(path, {"command": args.command, "options": options})


def _write_csv(path, header: str, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(header + "\n")
        for row in rows:
            fh.write(",".join(repr(v) if isinstance(v, float) else str(v) for v in row))
            fh.write("\n")


def _train_config(args, max_epochs=None) -> TrainConfig:
    return TrainConfig(
        learning_rate=args.learning_rate,
        batch_size=args.batch_size,
        max_epochs=args.epochs if max_epochs is None else max_epochs,
        eval_interval=args.eval_interval,
        patience=args.patience,
        seed=args.seed,
    )


def _detector_config(args, max_epochs=None) -> DetectorConfig:
    return DetectorConfig(
        n_blocks=args.n_blocks,
        hidden=args.hidden,
        clamp=args.clamp,
        rank_tol=args.rank_tol,
        val_fraction=args.val_fraction,
        seed=args.seed,
        max_workers=args.parallel,
        train=_train_config(args, max_epochs),
    )


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    spec = SynthSpec(
        kind=args.kind,
        n=args.n,
        dim=args.dim,
        seed=args.seed,
        n_classes=args.n_classes,
        layers=args.layers,
        scale=args.scale,
        radius=args.radius,
        class_sep=args.class_sep,
        cov_kind=args.cov_kind,
        offset=args.offset,
        flip_curvature=args.flip_curvature,
        base_kind=args.base_kind,
    )
    fs = generate(spec)
    if args.split:
        fractions = tuple(float(f) for f in args.split.split(","))
        fs = split_featureset(fs, fractions, seed=args.seed)
    write_featureset(fs, args.out)
    _run_manifest(args, str(args.out) + ".run.json")
    print(
        f"wrote {args.out}: {fs.n_samples} samples, "
        f"{len(fs.layer_ids)} layer(s), {fs.n_classes} class(es)"
    )
    return 0


def _fit_models(fs, config):
    models, tagged, histories = fit_layer_models(fs, config)
    detector = Detector(
        dataset=tagged.dataset,
        layer_ids=list(tagged.layer_ids),
        models=models,
        n_classes=tagged.n_classes,
        eps=0.0,
        weights=np.ones(len(tagged.layer_ids)),
        bias=0.0,
        perturb_mode="feature_space",
        seed=config.seed,
    )
    return detector, tagged, histories


def cmd_fit(args) -> int:
    fs = read_featureset(args.features)
    config = _detector_config(args)
    detector, tagged, histories = _fit_models(fs, config)
    save_detector(detector, args.out)
    history_dir = os.path.join(args.out, "history")
    os.makedirs(history_dir, exist_ok=True)
    for li, lid in enumerate(tagged.layer_ids):
        for ci in range(tagged.n_classes):
            history = histories[(lid, ci)]
            _write_csv(
                os.path.join(history_dir, f"history_l{li}_c{ci}.csv"),
                "step,train_ll,val_ll",
                zip(history.steps, history.train_ll, history.val_ll),
            )
    _run_manifest(args, os.path.join(args.out, "run.json"))
    n_flows = len(tagged.layer_ids) * tagged.n_classes
    best = {k: h.best_val_ll for k, h in histories.items()}
    top = max(best.values())
    print(
        f"fitted {n_flows} flow(s) over {len(tagged.layer_ids)} layer(s); "
        f"best val ll {top:.4f}"
    )
    return 0


def cmd_tune(args) -> int:
    detector = load_detector(args.detector)
    fs_in = read_featureset(args.in_features)
    fs_out = read_featureset(args.out_features)
    grid = tuple(float(e) for e in args.eps_grid.split(","))
    tuned, rows = tune_detector(detector, fs_in, fs_out, eps_grid=grid, mode=args.mode)
    save_detector(tuned, args.detector)
    _write_csv(os.path.join(args.detector, "tuning.csv"), "eps,auroc", rows)
    _run_manifest(args, os.path.join(args.detector, "run.json"))
    best = max(a for _, a in rows)
    print(f"tuned: eps={tuned.eps!r} val_auroc={best!r}")
    return 0


def cmd_eval(args) -> int:
    detector = load_detector(args.detector)
    fs_in = read_featureset(args.in_features)
    fs_out = read_featureset(args.out_features)
    mode = args.mode or detector.perturb_mode
    s_in = detector_score(detector, fs_in, mode=mode)
    s_out = detector_score(detector, fs_out, mode=mode)
    report = evaluate_detection(s_in, s_out, tpr_target=args.tpr)
    os.makedirs(args.outdir, exist_ok=True)
    lines = report_lines(report) + [f"eps={detector.eps!r}", f"mode={mode}"]
    with open(os.path.join(args.outdir, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    fpr, tpr, thresholds = roc_curve(s_in, s_out)
    _write_csv(
        os.path.join(args.outdir, "roc.csv"),
        "fpr,tpr,threshold",
        zip(fpr.tolist(), tpr.tolist(), thresholds.tolist()),
    )
    scores_rows = [(float(s), 1) for s in s_in] + [(float(s), 0) for s in s_out]
    _write_csv(os.path.join(args.outdir, "scores.csv"), "score,label", scores_rows)
    _run_manifest(args, os.path.join(args.outdir, "run.json"))
    print("tnr@tpr95 auroc detect_acc aupr_in aupr_out")
    print(report.row())
    return 0


def _gda_layer_models(fs, train_mask):
    labels = fs.labels[train_mask]
    return {
        lid: fit_gda(fs.tensors[lid][train_mask], labels) for lid in fs.layer_ids
    }


def _gda_combined(models, fs):
    return sum(gda_score(models[lid], fs.tensors[lid]) for lid in fs.layer_ids)


def cmd_bench(args) -> int:
    wanted = []
    for name in args.compare.split(","):
        name = name.strip()
        if name not in _CANDIDATES:
            raise ValueError(
                f"unknown candidate {name!r}; pick from {', '.join(_CANDIDATES)}"
            )
        if name not in wanted:
            wanted.append(name)
    fs = read_featureset(args.features)
    ood = read_featureset(args.ood)
    base_config = _detector_config(args, max_epochs=0)
    det0, tagged, _ = _fit_models(fs, base_config)
    val_fs = tagged.subset(tagged.split_mask("val"))

    results = []
    for name in wanted:
        if name == "baseline":
            s_in = mahalanobis_score(det0, val_fs)
            s_out = mahalanobis_score(det0, ood)
        elif name == "gda":
            gda_models = _gda_layer_models(tagged, tagged.split_mask("train"))
            s_in = _gda_combined(gda_models, val_fs)
            s_out = _gda_combined(gda_models, ood)
        else:
            epochs = args.epochs if args.train else 0
            det, _, _ = _fit_models(fs, _detector_config(args, max_epochs=epochs))
            s_in = detector_score(det, val_fs, mode="off")
            s_out = detector_score(det, ood, mode="off")
        results.append((name, evaluate_detection(s_in, s_out)))

    os.makedirs(args.outdir, exist_ok=True)
    _write_csv(
        os.path.join(args.outdir, "bench.csv"),
        "candidate,tnr_at_tpr95,auroc,detection_accuracy,aupr_in,aupr_out",
        [
            (name, r.tnr_at_tpr95, r.auroc, r.detection_accuracy, r.aupr_in, r.aupr_out)
            for name, r in results
        ],
    )
    print("candidate tnr@tpr95 auroc detect_acc aupr_in aupr_out")
    for name, r in results:
        print(f"{name} {r.row()}")

    if args.iterations > 0 and "resflow" in wanted:
        points = np.linspace(0, args.epochs, args.iterations + 1)
        checkpoints = sorted({int(round(p)) for p in points})
        rows = []
        for epoch in checkpoints:
            det, _, _ = _fit_models(fs, _detector_config(args, max_epochs=epoch))
            s_in = detector_score(det, val_fs, mode="off")
            s_out = detector_score(det, ood, mode="off")
            rows.append((epoch, evaluate_detection(s_in, s_out).auroc))
        _write_csv(os.path.join(args.outdir, "iterations.csv"), "epoch,auroc", rows)
        print(f"wrote {len(rows)} checkpoint rows to iterations.csv")
    _run_manifest(args, os.path.join(args.outdir, "run.json"))
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_fit_options(sub) -> None:
    sub.add_argument("--n-blocks", type=int, default=10)
    sub.add_argument("--hidden", type=int, default=None)
    sub.add_argument("--clamp", type=float, default=15.0)
    sub.add_argument("--rank-tol", type=float, default=1e-10)
    sub.add_argument("--val-fraction", type=float, default=0.2)
    sub.add_argument("--learning-rate", type=float, default=1e-5)
    sub.add_argument("--batch-size", type=int, default=256)
    sub.add_argument("--epochs", type=int, default=100)
    sub.add_argument("--eval-interval", type=int, default=1)
    sub.add_argument("--patience", type=int, default=5)
    sub.add_argument("--seed", type=int, default=0)
    sub.add_argument("--parallel", type=int, default=1, metavar="WORKERS")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="resflow",
        description="Residual-flow density estimation and OOD detection.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic feature file")
    p.add_argument("--kind", required=True,
                   choices=("gaussian", "banana", "ring", "mixture", "shifted-ood"))
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--dim", type=int, default=2)
    p.add_argument("--layers", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-classes", type=int, default=2, help="mixture only")
    p.add_argument("--class-sep", type=float, default=3.0)
    p.add_argument("--cov-kind", choices=("tied", "per_class"), default="tied")
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--radius", type=float, default=3.0)
    p.add_argument("--offset", type=float, default=0.0)
    p.add_argument("--flip-curvature", action="store_true")
    p.add_argument("--base-kind", choices=("banana", "gaussian"), default="banana")
    p.add_argument("--split", default=None, metavar="FRACTIONS",
                   help="comma fractions, e.g. 0.8,0.2")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit", help="fit a detector from a labelled feature file")
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True, help="detector directory")
    _add_fit_options(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("tune", help="pick eps and layer weights on validation data")
    p.add_argument("--detector", required=True)
    p.add_argument("--in-features", required=True)
    p.add_argument("--out-features", required=True)
    p.add_argument("--eps-grid", default=",".join(str(e) for e in EPS_GRID))
    p.add_argument("--mode", choices=("off", "feature_space", "precomputed"),
                   default="feature_space")
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("eval", help="score a detector on in/out feature files")
    p.add_argument("--detector", required=True)
    p.add_argument("--in-features", required=True)
    p.add_argument("--out-features", required=True)
    p.add_argument("--outdir", required=True)
    p.add_argument("--mode", choices=("off", "feature_space", "precomputed"),
                   default=None, help="default: what the detector was tuned with")
    p.add_argument("--tpr", type=float, default=0.95)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="compare detectors on one in/out pair")
    p.add_argument("--features", required=True)
    p.add_argument("--ood", required=True)
    p.add_argument("--outdir", required=True)
    p.add_argument("--compare", default="baseline,gda,resflow")
    p.add_argument("--train", action="store_true",
                   help="train the resflow candidate for --epochs")
    p.add_argument("--iterations", type=int, default=0,
                   help="also write an AUROC-vs-epochs curve with this many steps")
    _add_fit_options(p)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    seed_env = os.environ.get("RESFLOW_SEED")
    try:
        if seed_env is not None and hasattr(args, "seed"):
            args.seed = int(seed_env)
        return args.func(args)
    except Exception as exc:  # the CLI boundary turns failures into exit 1
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
