"""Estimator-style wrappers around the functional API.

These follow the usual fit/score_samples/sample conventions: constructor
arguments are stored verbatim (so get_params/set_params/clone work),
fitted state lives in trailing-underscore attributes, and scoring before
fit raises NotFittedError.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .data import FeatureSet
from .flow import (
    TrainConfig,
    build_residual_flow,
    resflow_logprob,
    resflow_sample,
    train_resflow,
)
from .gaussian import fit_gaussian, gaussian_logprob, sample_gaussian
from .pipeline import (
    EPS_GRID,
    DetectorConfig,
    detector_score,
    fit_detector,
    layer_scores,
    tune_detector,
)
from .seeding import derived_rng
from .validation import as_labels, as_matrix

__all__ = [
    "GaussianDensityEstimator",
    "ResidualFlowDensityEstimator",
    "OodDetectorEstimator",
]


def _require_fitted(est, attr: str) -> None:
    if not hasattr(est, attr):
        raise NotFittedError(
            f"this {type(est).__name__} is not fitted yet; call fit first"
        )


class GaussianDensityEstimator(BaseEstimator):
    """Maximum-likelihood Gaussian density with spectral rank handling."""

    def __init__(self, rank_tol: float = 1e-10):
        self.rank_tol = rank_tol

    def fit(self, X, y=None):
        X = as_matrix(X, "X", min_rows=2)
        self.model_ = fit_gaussian(X, rank_tol=self.rank_tol)
        self.n_features_in_ = X.shape[1]
        return self

    def score_samples(self, X) -> np.ndarray:
        _require_fitted(self, "model_")
        return np.atleast_1d(gaussian_logprob(self.model_, as_matrix(X, "X")))

    def score(self, X, y=None) -> float:
        """Mean log-likelihood of ``X``."""
        return float(np.mean(self.score_samples(X)))

    def sample(self, n_samples: int = 1, seed: int = 0) -> np.ndarray:
        _require_fitted(self, "model_")
        return sample_gaussian(self.model_, n_samples, seed=seed)


class ResidualFlowDensityEstimator(BaseEstimator):
    """Residual flow density: Gaussian linear block plus coupling blocks.

    ``fit`` carves a validation slice out of X when none is given; the
    linear block is fit on the training slice only, so scores at
    ``max_epochs=0`` equal a plain Gaussian fit of that slice.
    """

    def __init__(
        self,
        n_blocks: int = 10,
        hidden: int | None = None,
        clamp: float = 15.0,
        rank_tol: float = 1e-10,
        learning_rate: float = 1e-5,
        batch_size: int = 256,
        max_epochs: int = 100,
        eval_interval: int = 1,
        patience: int = 5,
        val_fraction: float = 0.2,
        seed: int = 0,
    ):
        self.n_blocks = n_blocks
        self.hidden = hidden
        self.clamp = clamp
        self.rank_tol = rank_tol
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.eval_interval = eval_interval
        self.patience = patience
        self.val_fraction = val_fraction
        self.seed = seed

    def fit(self, X, y=None, X_val=None):
        X = as_matrix(X, "X", min_rows=2)
        if X_val is not None:
            train, val = X, as_matrix(X_val, "X_val", min_rows=1)
        else:
            if not 0.0 < self.val_fraction < 1.0:
                raise ValueError("val_fraction must be in (0, 1)")
            order = derived_rng(self.seed, "val-split").permutation(X.shape[0])
            n_val = int(round(self.val_fraction * X.shape[0]))
            n_val = min(max(n_val, 1), X.shape[0] - 2)
            val, train = X[order[:n_val]], X[order[n_val:]]
        gauss = fit_gaussian(train, rank_tol=self.rank_tol)
        flow = build_residual_flow(
            gauss,
            n_blocks=self.n_blocks,
            hidden=self.hidden,
            clamp=self.clamp,
            seed=self.seed,
        )
        config = TrainConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            eval_interval=self.eval_interval,
            patience=self.patience,
            seed=self.seed,
        )
        self.history_ = train_resflow(flow, train, val, config)
        self.flow_ = flow
        self.gauss_ = gauss
        self.n_features_in_ = X.shape[1]
        return self

    def score_samples(self, X) -> np.ndarray:
        _require_fitted(self, "flow_")
        return np.atleast_1d(resflow_logprob(self.flow_, as_matrix(X, "X")))

    def score(self, X, y=None) -> float:
        """Mean log-likelihood of ``X``."""
        return float(np.mean(self.score_samples(X)))

    def sample(self, n_samples: int = 1, seed: int = 0) -> np.ndarray:
        _require_fitted(self, "flow_")
        return resflow_sample(self.flow_, n_samples, seed=seed)


class OodDetectorEstimator(BaseEstimator):
    """Multi-layer out-of-distribution detector.

    ``fit`` takes either a labelled FeatureSet or a plain (X, y) pair,
    which is wrapped as a single layer. ``tune`` picks the perturbation
    size and layer weights against a held-out OOD sample. Following the
    outlier-detector convention, ``predict`` returns +1 for
    in-distribution and -1 for out.
    """

    def __init__(
        self,
        n_blocks: int = 10,
        hidden: int | None = None,
        clamp: float = 15.0,
        rank_tol: float = 1e-10,
        val_fraction: float = 0.2,
        learning_rate: float = 1e-5,
        batch_size: int = 256,
        max_epochs: int = 100,
        eval_interval: int = 1,
        patience: int = 5,
        seed: int = 0,
        max_workers: int = 1,
        eps_grid: tuple = EPS_GRID,
        perturb_mode: str = "feature_space",
        threshold: float = 0.0,
    ):
        self.n_blocks = n_blocks
        self.hidden = hidden
        self.clamp = clamp
        self.rank_tol = rank_tol
        self.val_fraction = val_fraction
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.eval_interval = eval_interval
        self.patience = patience
        self.seed = seed
        self.max_workers = max_workers
        self.eps_grid = eps_grid
        self.perturb_mode = perturb_mode
        self.threshold = threshold

    def _config(self) -> DetectorConfig:
        return DetectorConfig(
            n_blocks=self.n_blocks,
            hidden=self.hidden,
            clamp=self.clamp,
            rank_tol=self.rank_tol,
            val_fraction=self.val_fraction,
            seed=self.seed,
            max_workers=self.max_workers,
            train=TrainConfig(
                learning_rate=self.learning_rate,
                batch_size=self.batch_size,
                max_epochs=self.max_epochs,
                eval_interval=self.eval_interval,
                patience=self.patience,
                seed=self.seed,
            ),
        )

    def _wrap(self, features, y=None, for_fit=False) -> FeatureSet:
        if isinstance(features, FeatureSet):
            if y is not None:
                raise ValueError("pass labels inside the FeatureSet, not as y")
            return features
        X = as_matrix(features, "X")
        if for_fit:
            labels = as_labels(y, X.shape[0]) if y is not None else None
            if labels is None:
                raise ValueError("array input needs labels y")
            return FeatureSet(
                dataset="array",
                layer_ids=["layer0"],
                tensors={"layer0": X},
                labels=labels,
                n_classes=int(labels.max()) + 1,
            ).validate()
        if len(self.detector_.layer_ids) != 1:
            raise ValueError("multi-layer detector needs a FeatureSet, not an array")
        lid = self.detector_.layer_ids[0]
        return FeatureSet(
            dataset="array", layer_ids=[lid], tensors={lid: X}
        ).validate()

    def fit(self, features, y=None):
        fs = self._wrap(features, y, for_fit=True)
        self.detector_ = fit_detector(fs, self._config())
        self.layer_ids_ = list(self.detector_.layer_ids)
        return self

    def tune(self, features_in, features_out):
        """Pick eps and layer weights on validation in/out feature sets."""
        _require_fitted(self, "detector_")
        fs_in = self._wrap(features_in)
        fs_out = self._wrap(features_out)
        self.detector_, self.tuning_table_ = tune_detector(
            self.detector_,
            fs_in,
            fs_out,
            eps_grid=self.eps_grid,
            mode=self.perturb_mode,
        )
        return self

    def decision_function(self, features) -> np.ndarray:
        """Combined detector score; higher means more in-distribution."""
        _require_fitted(self, "detector_")
        return detector_score(self.detector_, self._wrap(features))

    def score_layers(self, features) -> np.ndarray:
        """Per-layer scores, shape (n, L)."""
        _require_fitted(self, "detector_")
        det = self.detector_
        return layer_scores(
            det.models, self._wrap(features), eps=det.eps, mode=det.perturb_mode
        )

    def predict(self, features) -> np.ndarray:
        scores = self.decision_function(features)
        return np.where(scores >= self.threshold, 1, -1)
