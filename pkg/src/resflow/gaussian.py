"""Maximum-likelihood Gaussian base model and class-conditional variant.

The Gaussian fit doubles as the frozen linear block of the residual flow:
``a_forward`` whitens into the retained eigenspace, ``a_inverse`` lifts
back. With a rank-deficient covariance only the k non-degenerate
directions are kept, in which case scoring happens in the k-dimensional
subspace and ``-||a_forward (x - mean)||^2`` equals the pseudo-inverse
Mahalanobis distance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .linalg import empirical_cov, empirical_mean, sample_standard_normal, sym_eig
from .validation import as_labels, as_matrix, as_vector

__all__ = [
    "GaussianModel",
    "fit_gaussian",
    "gaussian_from_moments",
    "linear_forward",
    "linear_inverse",
    "gaussian_logprob",
    "mahalanobis_score",
    "sample_gaussian",
    "GdaModel",
    "fit_gda",
    "gda_logprob",
    "gda_score",
]

_LOG_2PI = float(np.log(2.0 * np.pi))

# Shrinkage factor for class covariances fitted from fewer samples than
# dimensions: sigma <- sigma + (1e-6 * trace(sigma) / d) * I.
_GDA_SHRINKAGE = 1e-6


@dataclass(frozen=True)
class GaussianModel:
    """Gaussian density in whitened form.

    Attributes:
        mean: shape (d,).
        a_forward: shape (k, d); maps centered inputs to whitened coords.
        a_inverse: shape (d, k); lifts whitened coords back, so
            ``a_inverse @ a_forward`` projects onto the retained subspace.
        logdet_half: 0.5 * sum(log of retained eigenvalues).
        eigenvalues: the k retained covariance eigenvalues, descending.
        dim: ambient dimension d.
        rank: retained rank k (k == d for a full-rank covariance).
    """

    mean: np.ndarray
    a_forward: np.ndarray
    a_inverse: np.ndarray
    logdet_half: float
    eigenvalues: np.ndarray
    dim: int
    rank: int


def gaussian_from_moments(mean, cov, rank_tol: float = 1e-10) -> GaussianModel:
    """Build a GaussianModel from explicit moments.

    Eigenvalues below ``rank_tol`` times the largest are dropped; what
    remains defines the whitening maps A^-1 = D^{-1/2} Q^T and
    A = Q D^{1/2} restricted to the retained eigenpairs.

    Args:
        mean: shape (d,).
        cov: symmetric PSD, shape (d, d).
        rank_tol: relative eigenvalue cutoff.

    Returns:
        GaussianModel.

    Raises:
        ValueError: if every eigenvalue is cut (zero-rank covariance).
    """
    mu = as_vector(mean, "mean")
    d = mu.shape[0]
    dec = sym_eig(cov)
    if dec.source_dim != d:
        raise ValueError(
            f"cov has dimension {dec.source_dim}, mean has dimension {d}"
        )
    w = dec.eigenvalues
    cut = rank_tol * max(w[0], 0.0)
    keep = w > cut
    k = int(np.count_nonzero(keep))
    if k == 0:
        raise ValueError("covariance has zero rank; density is degenerate")
    wk = w[:k]
    qk = dec.eigenvectors[:, :k]
    inv_sqrt = 1.0 / np.sqrt(wk)
    a_forward = inv_sqrt[:, None] * qk.T
    a_inverse = qk * np.sqrt(wk)[None, :]
    return GaussianModel(
        mean=mu,
        a_forward=np.ascontiguousarray(a_forward),
        a_inverse=np.ascontiguousarray(a_inverse),
        logdet_half=0.5 * float(np.sum(np.log(wk))),
        eigenvalues=np.ascontiguousarray(wk),
        dim=d,
        rank=k,
    )


def fit_gaussian(data, rank_tol: float = 1e-10) -> GaussianModel:
    """Maximum-likelihood Gaussian fit (empirical mean, 1/n covariance).

    Args:
        data: shape (n, d), n >= 2.
        rank_tol: relative eigenvalue cutoff for the retained rank.

    Returns:
        GaussianModel fitted to ``data``.
    """
    x = as_matrix(data, "data", min_rows=2)
    mu = empirical_mean(x)
    cov = empirical_cov(x, mu)
    return gaussian_from_moments(mu, cov, rank_tol)


def _centered(model: GaussianModel, x) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    arr = as_matrix(arr, "x")
    if arr.shape[1] != model.dim:
        raise ValueError(
            f"x has dimension {arr.shape[1]}, model has dimension {model.dim}"
        )
    return arr - model.mean, single


def linear_forward(model: GaussianModel, x) -> np.ndarray:
    """Whiten ``x``: z = a_forward @ (x - mean).

    Accepts a single vector (d,) or a batch (n, d) and returns matching
    shape with d replaced by the retained rank k.
    """
    xc, single = _centered(model, x)
    z = xc @ model.a_forward.T
    return z[0] if single else z


def linear_inverse(model: GaussianModel, z) -> np.ndarray:
    """Lift whitened coords back: x = a_inverse @ z + mean.

    For a rank-deficient model this recovers the projection of the
    original point onto the retained subspace, not the point itself.
    """
    arr = np.asarray(z, dtype=np.float64)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    arr = as_matrix(arr, "z")
    if arr.shape[1] != model.rank:
        raise ValueError(
            f"z has dimension {arr.shape[1]}, model has rank {model.rank}"
        )
    x = arr @ model.a_inverse.T + model.mean
    return x[0] if single else x


def gaussian_logprob(model: GaussianModel, x) -> np.ndarray | float:
    """Gaussian log-density of ``x`` (over the retained subspace if k < d).

    log p(x) = -(k/2) log(2 pi) - 0.5 ||a_forward (x - mean)||^2
               - 0.5 * sum(log eigenvalues).
    """
    xc, single = _centered(model, x)
    z = xc @ model.a_forward.T
    lp = (
        -0.5 * model.rank * _LOG_2PI
        - 0.5 * np.einsum("ij,ij->i", z, z)
        - model.logdet_half
    )
    return float(lp[0]) if single else lp


def mahalanobis_score(model: GaussianModel, x) -> np.ndarray | float:
    """Negative (pseudo-inverse) Mahalanobis distance, higher = closer.

    Equals ``-(x - mean)^T sigma^+ (x - mean)`` computed as
    ``-||a_forward (x - mean)||^2``.
    """
    xc, single = _centered(model, x)
    z = xc @ model.a_forward.T
    s = -np.einsum("ij,ij->i", z, z)
    return float(s[0]) if single else s


def sample_gaussian(model: GaussianModel, n: int, seed: int = 0) -> np.ndarray:
    """Draw n samples; for a rank-deficient fit they lie on the subspace."""
    z = sample_standard_normal(n, model.rank, seed)
    return linear_inverse(model, z)


@dataclass(frozen=True)
class GdaModel:
    """Per-class Gaussians with their own covariances.

    High-variance by design: with few samples per class the per-class
    covariances are noisy, which is exactly the failure mode the tied
    alternative avoids.
    """

    class_models: dict[int, GaussianModel] = field(default_factory=dict)

    @property
    def class_ids(self) -> list[int]:
        return sorted(self.class_models)


def fit_gda(data, labels, rank_tol: float = 1e-10) -> GdaModel:
    """Fit one Gaussian per class, covariances not tied.

    Classes with fewer samples than dimensions get trace-scaled
    shrinkage, sigma <- sigma + (1e-6 * trace(sigma) / d) * I, so the
    whitening stays defined.

    Args:
        data: shape (n, d).
        labels: n integer class ids.
        rank_tol: relative eigenvalue cutoff per class.

    Returns:
        GdaModel with one entry per class id present in ``labels``.

    Raises:
        ValueError: if some class has fewer than 2 samples.
    """
    x = as_matrix(data, "data", min_rows=2)
    y = as_labels(labels, x.shape[0])
    d = x.shape[1]
    models: dict[int, GaussianModel] = {}
    for c in np.unique(y):
        xc = x[y == c]
        if xc.shape[0] < 2:
            raise ValueError(f"class {int(c)} has {xc.shape[0]} samples, needs >= 2")
        mu = empirical_mean(xc)
        cov = empirical_cov(xc, mu)
        if xc.shape[0] < d:
            lam = _GDA_SHRINKAGE * float(np.trace(cov)) / d
            cov = cov + lam * np.eye(d)
        models[int(c)] = gaussian_from_moments(mu, cov, rank_tol)
    return GdaModel(class_models=models)


def gda_logprob(model: GdaModel, x, class_id: int) -> np.ndarray | float:
    """Log-density of ``x`` under one class's Gaussian.

    Raises:
        ValueError: if ``class_id`` was not fitted.
    """
    if class_id not in model.class_models:
        raise ValueError(f"unknown class id {class_id}")
    return gaussian_logprob(model.class_models[class_id], x)


def gda_score(model: GdaModel, x) -> np.ndarray:
    """Max over classes of the class-conditional log-density.

    The log-determinant term matters here: classes with tighter
    covariances get a bonus that plain Mahalanobis scoring ignores.
    """
    if not model.class_models:
        raise ValueError("model has no fitted classes")
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    scores = np.stack(
        [gaussian_logprob(model.class_models[c], arr) for c in model.class_ids],
        axis=0,
    )
    out = scores.max(axis=0)
    return float(out[0]) if single else out
