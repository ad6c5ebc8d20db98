"""Out-of-distribution detection from per-layer feature densities.

For every tapped layer the pipeline fits one flow per class on
class-centered features. The flows of a layer share a single linear
block, fit on the pooled centered training rows, so at initialization
every class density is the same Gaussian shifted to its class mean. A
sample's layer score is its best class log-density, optionally after a
small signed-gradient push toward the predicted class; the final
detector combines layer scores with logistic-regression weights.

A fitted detector persists as a directory:

    detector.json             hyperparameters, weights, layer table
    means/means_l{i}.bin      class means, one file per layer
    flows/flow_l{i}_c{j}.rflow

The flow files embed the shared linear block, so the directory is
self-contained.
"""

from __future__ import annotations

import json
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .binio import ByteReader, ByteWriter
from .data import FeatureSet, split_featureset
from .flow import (
    ResidualFlow,
    TrainConfig,
    TrainHistory,
    build_residual_flow,
    read_flow,
    resflow_logprob,
    resflow_logprob_grad,
    train_resflow,
    write_flow,
)
from .gaussian import GaussianModel, fit_gaussian, gaussian_logprob
from .metrics import auroc
from .seeding import derived_rng
from .validation import as_matrix

__all__ = [
    "EPS_GRID",
    "PERTURB_MODES",
    "DetectorConfig",
    "LayerModel",
    "Detector",
    "fit_layer_models",
    "fit_detector",
    "perturb_features",
    "layer_scores",
    "detector_score",
    "mahalanobis_layer_scores",
    "mahalanobis_score",
    "fit_layer_weights",
    "tune_detector",
    "save_detector",
    "load_detector",
]

EPS_GRID = (0.0, 0.0005, 0.001, 0.0014, 0.002)
PERTURB_MODES = ("off", "feature_space", "precomputed")

_MEANS_MAGIC = b"RFM1"
_DETECTOR_FORMAT = "RFDET1"
_DETECTOR_VERSION = 1


@dataclass(frozen=True)
class DetectorConfig:
    """Everything that shapes detector fitting.

    ``train`` is applied to every per-class flow; ``max_workers`` > 1
    fits the (layer, class) flows in a thread pool. Results are
    identical either way because every flow owns its seed and data.
    """

    n_blocks: int = 10
    hidden: int | None = None
    clamp: float = 15.0
    rank_tol: float = 1e-10
    val_fraction: float = 0.2
    seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)
    max_workers: int = 1

    def validate(self) -> None:
        if self.n_blocks < 0:
            raise ValueError("n_blocks must be >= 0")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in (0, 1)")
        if self.max_workers < 1:
            raise ValueError("max_workers must be >= 1")
        self.train.validate()


@dataclass
class LayerModel:
    """Per-layer piece of a detector: class means, shared Gaussian, flows."""

    layer_id: str
    class_means: np.ndarray
    gauss: GaussianModel
    flows: list[ResidualFlow]

    @property
    def n_classes(self) -> int:
        return self.class_means.shape[0]

    @property
    def dim(self) -> int:
        return self.class_means.shape[1]

    def class_logprobs(self, x) -> np.ndarray:
        """Flow log-density of ``x`` under every class, shape (n, C)."""
        x = as_matrix(x, f"features for layer {self.layer_id!r}")
        cols = [
            resflow_logprob(flow, x - mu)
            for mu, flow in zip(self.class_means, self.flows)
        ]
        return np.column_stack(cols)

    def score(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Best class log-density and the class achieving it.

        Ties go to the lowest class id.
        """
        logp = self.class_logprobs(x)
        best = logp.argmax(axis=1)
        return logp[np.arange(len(logp)), best], best

    def maha_logprobs(self, x) -> np.ndarray:
        """Gaussian log-density per class: what the flows score at init."""
        x = as_matrix(x, f"features for layer {self.layer_id!r}")
        cols = [gaussian_logprob(self.gauss, x - mu) for mu in self.class_means]
        return np.column_stack(cols)


@dataclass
class Detector:
    """Fitted multi-layer detector; high combined score means in-distribution."""

    dataset: str
    layer_ids: list[str]
    models: list[LayerModel]
    n_classes: int
    eps: float = 0.0
    weights: np.ndarray | None = None
    bias: float = 0.0
    perturb_mode: str = "feature_space"
    seed: int = 0

    def __post_init__(self):
        if self.weights is None:
            self.weights = np.ones(len(self.layer_ids))
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != (len(self.layer_ids),):
            raise ValueError("need one weight per layer")
        if self.perturb_mode not in PERTURB_MODES:
            raise ValueError(f"unknown perturb_mode {self.perturb_mode!r}")


def _flow_seed(seed: int, layer_index: int, class_id: int) -> int:
    return int(derived_rng(seed, "flow", layer_index, class_id).integers(1 << 63))


def _fit_one_flow(gauss, rows_train, rows_val, config, flow_seed):
    flow = build_residual_flow(
        gauss,
        n_blocks=config.n_blocks,
        hidden=config.hidden,
        clamp=config.clamp,
        seed=flow_seed,
    )
    history = train_resflow(flow, rows_train, rows_val, config.train)
    return flow, history


def fit_layer_models(
    fs: FeatureSet, config: DetectorConfig
) -> tuple[list[LayerModel], FeatureSet, dict]:
    """Fit per-layer class means, shared Gaussians, and per-class flows.

    Uses the feature set's split tags when present, otherwise draws a
    stratified split with ``config.val_fraction``. Classes without
    validation rows early-stop on their training rows instead. Returns
    the models, the (possibly newly tagged) feature set, and a history
    dict keyed by (layer_id, class_id).
    """
    config.validate()
    fs.validate()
    if fs.labels is None:
        raise ValueError("detector fitting needs class labels")
    if fs.splits is None:
        fs = split_featureset(
            fs, (1.0 - config.val_fraction, config.val_fraction), seed=config.seed
        )
    train_mask = fs.split_mask("train")
    val_mask = fs.split_mask("val")
    labels = fs.labels
    n_classes = fs.n_classes

    jobs = []
    layer_means = []
    layer_gauss = []
    for li, lid in enumerate(fs.layer_ids):
        x = fs.tensors[lid]
        means = np.empty((n_classes, x.shape[1]))
        for c in range(n_classes):
            rows = train_mask & (labels == c)
            count = int(rows.sum())
            if count < 2:
                raise ValueError(
                    f"layer {lid!r} class {c}: {count} training samples, need >= 2"
                )
            means[c] = x[rows].mean(axis=0)
        centered = x[train_mask] - means[labels[train_mask]]
        gauss = fit_gaussian(centered, rank_tol=config.rank_tol)
        layer_means.append(means)
        layer_gauss.append(gauss)
        for c in range(n_classes):
            rows_train = x[train_mask & (labels == c)] - means[c]
            rows_val = x[val_mask & (labels == c)] - means[c]
            if rows_val.shape[0] == 0:
                rows_val = rows_train
            jobs.append((li, c, gauss, rows_train, rows_val))

    def run(job):
        li, c, gauss, rows_train, rows_val = job
        return _fit_one_flow(
            gauss, rows_train, rows_val, config, _flow_seed(config.seed, li, c)
        )

    if config.max_workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=config.max_workers) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(job) for job in jobs]

    flows_by_layer: list[list[ResidualFlow]] = [[] for _ in fs.layer_ids]
    histories: dict[tuple[str, int], TrainHistory] = {}
    for (li, c, _gauss, _tr, _va), (flow, history) in zip(jobs, results):
        flows_by_layer[li].append(flow)
        histories[(fs.layer_ids[li], c)] = history
    models = [
        LayerModel(
            layer_id=lid,
            class_means=layer_means[li],
            gauss=layer_gauss[li],
            flows=flows_by_layer[li],
        )
        for li, lid in enumerate(fs.layer_ids)
    ]
    return models, fs, histories


def fit_detector(fs: FeatureSet, config: DetectorConfig | None = None) -> Detector:
    """Fit an untuned detector: equal layer weights, no perturbation."""
    config = config or DetectorConfig()
    models, fs, _ = fit_layer_models(fs, config)
    return Detector(
        dataset=fs.dataset,
        layer_ids=list(fs.layer_ids),
        models=models,
        n_classes=fs.n_classes,
        eps=0.0,
        weights=np.ones(len(fs.layer_ids)),
        bias=0.0,
        perturb_mode="feature_space",
        seed=config.seed,
    )


def perturb_features(model: LayerModel, x, eps: float) -> np.ndarray:
    """Push each row by eps * sign of the best-class log-density gradient.

    The class is picked on the unperturbed input. For in-distribution
    samples this raises the layer score to first order; far-off samples
    move less because their gradients do not align with any class.
    """
    x = as_matrix(x, f"features for layer {model.layer_id!r}")
    if eps < 0:
        raise ValueError("eps must be >= 0")
    if eps == 0.0:
        return x.copy()
    _, chat = model.score(x)
    grad = np.empty_like(x)
    for c in np.unique(chat):
        rows = chat == c
        grad[rows] = resflow_logprob_grad(
            model.flows[c], x[rows] - model.class_means[c]
        )
    return x + eps * np.sign(grad)


def _check_layers(detector_layer_ids, models, fs: FeatureSet) -> None:
    for lid, model in zip(detector_layer_ids, models):
        if lid not in fs.tensors:
            raise ValueError(f"feature set has no tensor for layer {lid!r}")
        got = fs.tensors[lid].shape[1]
        if got != model.dim:
            raise ValueError(
                f"layer {lid!r}: detector expects dim {model.dim}, features have {got}"
            )


def layer_scores(
    models: list[LayerModel],
    fs: FeatureSet,
    eps: float = 0.0,
    mode: str = "feature_space",
) -> np.ndarray:
    """Per-layer best-class log-densities, shape (n, L).

    ``mode`` controls what gets scored: "off" the raw features,
    "feature_space" a signed-gradient perturbation computed here,
    "precomputed" the perturbed tensors carried by the feature set.
    """
    if mode not in PERTURB_MODES:
        raise ValueError(f"unknown perturb mode {mode!r}")
    fs.validate()
    layer_ids = [m.layer_id for m in models]
    _check_layers(layer_ids, models, fs)
    cols = []
    for model in models:
        x = fs.tensors[model.layer_id]
        if mode == "feature_space":
            x = perturb_features(model, x, eps)
        elif mode == "precomputed":
            if model.layer_id not in fs.perturbed:
                raise ValueError(
                    f"no precomputed perturbation for layer {model.layer_id!r}"
                )
            x = fs.perturbed[model.layer_id]
        scores, _ = model.score(x)
        cols.append(scores)
    return np.column_stack(cols)


def detector_score(detector: Detector, fs: FeatureSet, mode: str | None = None):
    """Combined detector score: weights dot layer scores plus bias."""
    mode = detector.perturb_mode if mode is None else mode
    table = layer_scores(detector.models, fs, eps=detector.eps, mode=mode)
    return table @ detector.weights + detector.bias


def mahalanobis_layer_scores(models: list[LayerModel], fs: FeatureSet) -> np.ndarray:
    """Layer scores under the shared Gaussians alone (no flows).

    Matches ``layer_scores(..., mode="off")`` exactly while the flows
    are untrained, which pins the flow pipeline to the classical
    class-conditional Gaussian baseline.
    """
    fs.validate()
    _check_layers([m.layer_id for m in models], models, fs)
    cols = []
    for model in models:
        logp = model.maha_logprobs(fs.tensors[model.layer_id])
        cols.append(logp.max(axis=1))
    return np.column_stack(cols)


def mahalanobis_score(
    detector: Detector, fs: FeatureSet, weights=None, bias: float = 0.0
):
    """Combined Gaussian-baseline score with the given (default equal) weights."""
    table = mahalanobis_layer_scores(detector.models, fs)
    if weights is None:
        weights = np.ones(table.shape[1])
    return table @ np.asarray(weights, dtype=np.float64) + bias


def _sigmoid(eta: np.ndarray) -> np.ndarray:
    out = np.empty_like(eta)
    pos = eta >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-eta[pos]))
    ez = np.exp(eta[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def fit_layer_weights(
    scores_in, scores_out, n_iter: int = 50, ridge: float = 1e-6
) -> tuple[np.ndarray, float]:
    """Logistic-regression layer weights separating in from out scores.

    Columns are standardized for the Newton solve and the scaling is
    folded back, so the returned (weights, bias) apply to raw scores.
    The tiny ridge keeps the Hessian invertible when the classes are
    separable; steps are norm-capped for the same reason.
    """
    si = as_matrix(scores_in, "scores_in", min_rows=1)
    so = as_matrix(scores_out, "scores_out", min_rows=1)
    if si.shape[1] != so.shape[1]:
        raise ValueError("scores_in and scores_out need the same layer count")
    x = np.vstack([si, so])
    y = np.concatenate([np.ones(len(si)), np.zeros(len(so))])
    m = x.mean(axis=0)
    s = x.std(axis=0)
    if np.all(s == 0):
        raise ValueError("layer scores are constant across samples; nothing to fit")
    s = np.where(s == 0, 1.0, s)
    design = np.column_stack([(x - m) / s, np.ones(len(x))])
    w = np.zeros(design.shape[1])
    eye = np.eye(design.shape[1])
    for _ in range(n_iter):
        p = _sigmoid(design @ w)
        grad = design.T @ (y - p) - ridge * w
        hess = (design * (p * (1.0 - p))[:, None]).T @ design + ridge * eye
        step = np.linalg.solve(hess, grad)
        norm = float(np.linalg.norm(step))
        if norm > 25.0:
            step *= 25.0 / norm
        w += step
        if norm < 1e-10:
            break
    alpha = w[:-1] / s
    bias = float(w[-1] - np.dot(w[:-1], m / s))
    return alpha, bias


def tune_detector(
    detector: Detector,
    fs_in: FeatureSet,
    fs_out: FeatureSet,
    eps_grid=EPS_GRID,
    mode: str = "feature_space",
) -> tuple[Detector, list[tuple[float, float]]]:
    """Pick the perturbation size and layer weights on validation data.

    For every eps in the grid: perturb, score, fit weights, measure
    AUROC of the combined score. The best AUROC wins; exact ties go to
    the smallest eps. Returns the tuned detector and the (eps, auroc)
    table. Warns when even the best setting is close to chance.
    """
    grid = sorted(float(e) for e in eps_grid)
    if not grid:
        raise ValueError("eps_grid must not be empty")
    rows: list[tuple[float, float]] = []
    best = None
    for eps in grid:
        table_in = layer_scores(detector.models, fs_in, eps=eps, mode=mode)
        table_out = layer_scores(detector.models, fs_out, eps=eps, mode=mode)
        weights, bias = fit_layer_weights(table_in, table_out)
        score = auroc(table_in @ weights + bias, table_out @ weights + bias)
        rows.append((eps, score))
        if best is None or score > best[1]:
            best = (eps, score, weights, bias)
    eps, score, weights, bias = best
    if score < 0.55:
        warnings.warn(
            f"validation AUROC {score:.3f} is close to chance; "
            "the tuned detector may be useless",
            stacklevel=2,
        )
    tuned = replace(
        detector, eps=eps, weights=weights, bias=bias, perturb_mode=mode
    )
    return tuned, rows


# ---------------------------------------------------------------------------
# persistence


def _write_means(path, means: np.ndarray) -> None:
    w = ByteWriter()
    w.raw(_MEANS_MAGIC)
    w.u32(means.shape[0])
    w.u32(means.shape[1])
    w.f64_array(means)
    with open(path, "wb") as fh:
        fh.write(w.getvalue())


def _read_means(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    r = ByteReader(data, name=str(path))
    if r.take(len(_MEANS_MAGIC)) != _MEANS_MAGIC:
        raise ValueError(f"{path}: bad magic for a means file")
    n_classes, dim = r.u32(), r.u32()
    means = r.f64_array(n_classes * dim, shape=(n_classes, dim))
    r.expect_end()
    return means


def save_detector(detector: Detector, dirpath) -> None:
    """Write manifest, class means, and all flow files under ``dirpath``."""
    os.makedirs(os.path.join(dirpath, "flows"), exist_ok=True)
    os.makedirs(os.path.join(dirpath, "means"), exist_ok=True)
    manifest = {
        "format": _DETECTOR_FORMAT,
        "version": _DETECTOR_VERSION,
        "dataset": detector.dataset,
        "layer_ids": list(detector.layer_ids),
        "layer_dims": [m.dim for m in detector.models],
        "n_classes": detector.n_classes,
        "eps": detector.eps,
        "weights": [float(v) for v in detector.weights],
        "bias": detector.bias,
        "perturb_mode": detector.perturb_mode,
        "seed": detector.seed,
    }
    with open(os.path.join(dirpath, "detector.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    for li, model in enumerate(detector.models):
        _write_means(os.path.join(dirpath, "means", f"means_l{li}.bin"), model.class_means)
        for ci, flow in enumerate(model.flows):
            write_flow(flow, os.path.join(dirpath, "flows", f"flow_l{li}_c{ci}.rflow"))


def load_detector(dirpath) -> Detector:
    """Rebuild a detector saved by ``save_detector``."""
    with open(os.path.join(dirpath, "detector.json"), encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != _DETECTOR_FORMAT:
        raise ValueError(f"{dirpath}: not a detector directory")
    if manifest.get("version") != _DETECTOR_VERSION:
        raise ValueError(f"{dirpath}: unsupported detector version")
    layer_ids = manifest["layer_ids"]
    n_classes = int(manifest["n_classes"])
    models = []
    for li, lid in enumerate(layer_ids):
        means = _read_means(os.path.join(dirpath, "means", f"means_l{li}.bin"))
        if means.shape[0] != n_classes:
            raise ValueError(f"{dirpath}: means file for layer {lid!r} has wrong rows")
        flows = [
            read_flow(os.path.join(dirpath, "flows", f"flow_l{li}_c{ci}.rflow"))
            for ci in range(n_classes)
        ]
        first = flows[0]
        row_sq = np.einsum("ij,ij->i", first.a_forward, first.a_forward)
        gauss = GaussianModel(
            mean=first.mean,
            a_forward=first.a_forward,
            a_inverse=first.a_inverse,
            logdet_half=first.logdet_half,
            eigenvalues=1.0 / row_sq,
            dim=first.dim,
            rank=first.rank,
        )
        models.append(
            LayerModel(layer_id=lid, class_means=means, gauss=gauss, flows=flows)
        )
    return Detector(
        dataset=manifest.get("dataset", ""),
        layer_ids=list(layer_ids),
        models=models,
        n_classes=n_classes,
        eps=float(manifest["eps"]),
        weights=np.asarray(manifest["weights"], dtype=np.float64),
        bias=float(manifest["bias"]),
        perturb_mode=manifest.get("perturb_mode", "feature_space"),
        seed=int(manifest.get("seed", 0)),
    )
