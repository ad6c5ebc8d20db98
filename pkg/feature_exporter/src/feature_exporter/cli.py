"""Command line entry: one command, flags to file.

    feature-export --model resnet-34 --data batch.npz --out feats.rffs

Passing --detector switches to the perturbed export (base plus nudged
tensors in one file). A `<out>.run.json` sidecar records every flag
and the normalization constants actually applied, since downstream
reports need to know what the features were standardized with.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys

import torch

from .datasets import parse_normalization
from .export import ExportSpec, export_features, export_perturbed
from .models import MODEL_NAMES

__all__ = ["build_parser", "main"]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="feature-export",
        description="Export per-layer CNN activations to an RFFS1 feature file",
    )
    p.add_argument("--model", required=True, choices=MODEL_NAMES)
    p.add_argument("--data", required=True, help="npz with images[, labels, splits]")
    p.add_argument("--out", required=True, help="output .rffs path")
    p.add_argument("--weights", default=None, help="state-dict file (random init if absent)")
    p.add_argument("--dataset", default=None, help="dataset name for the file header")
    p.add_argument("--taps", default=None,
                   help="comma list of tap points (default: all)")
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--eps", type=float, default=0.0,
                   help="input perturbation size (needs --detector)")
    p.add_argument("--detector", default=None,
                   help="detector directory supplying the densities to climb")
    p.add_argument("--normalize", default="none",
                   help="preset name or m1,m2,m3:s1,s2,s3")
    p.add_argument("--seed", type=int, default=0, help="random-init seed")
    p.add_argument("--head-classes", type=int, default=10)
    p.add_argument("--fgsm-eps", type=float, default=0.0,
                   help="swap base inputs for FGSM adversarial examples")
    return p


def _run_manifest(args: argparse.Namespace, path: str) -> None:
    options = {
        key: value if isinstance(value, (bool, int, float, str)) or value is None
        else str(value)
        for key, value in vars(args).items()
    }
    mean, std = parse_normalization(args.normalize)
    payload = {
        "command": "feature-export",
        "options": options,
        "normalization": {"mean": list(mean), "std": list(std)},
        "torch": torch.__version__,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        taps = tuple(args.taps.split(",")) if args.taps else None
        spec = ExportSpec(
            model=args.model,
            data=args.data,
            out=args.out,
            weights=args.weights,
            dataset=args.dataset,
            taps=taps,
            batch_size=args.batch_size,
            eps=args.eps,
            detector=args.detector,
            normalization=args.normalize,
            seed=args.seed,
            head_classes=args.head_classes,
            fgsm_eps=args.fgsm_eps,
        )
        if args.detector is not None:
            tensors = export_perturbed(spec)
            detail = f", perturbed at eps={args.eps}"
        else:
            if args.eps > 0:
                raise ValueError("--eps needs --detector to supply the densities")
            tensors = export_features(spec)
            detail = ""
        _run_manifest(args, args.out + ".run.json")
        n = next(iter(tensors.values())).shape[0]
        print(f"wrote {args.out}: {n} samples, {len(tensors)} tap(s){detail}")
        return 0
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
