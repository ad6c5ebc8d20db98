"""Dense linear-algebra primitives shared by the density models.

All routines work on float64 arrays and are deterministic. The
eigendecomposition is LAPACK's symmetric solver via ``numpy.linalg.eigh``
with results re-sorted to descending eigenvalue order, which is the
convention the Gaussian whitening code expects.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .validation import as_matrix, check_finite

__all__ = [
    "EigDecomposition",
    "empirical_mean",
    "empirical_cov",
    "sym_eig",
    "sample_standard_normal",
]

# Relative asymmetry we silently repair before factorizing. Anything worse
# is treated as a caller bug.
_SYMMETRY_RTOL = 1e-9


@dataclass(frozen=True)
class EigDecomposition:
    """Spectral decomposition ``M = Q diag(w) Q^T`` of a symmetric matrix.

    Attributes:
        eigenvalues: shape (d,), sorted descending.
        eigenvectors: shape (d, d), orthonormal columns; column j pairs
            with ``eigenvalues[j]``.
        source_dim: d, kept so callers can sanity-check shapes.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    source_dim: int


def empirical_mean(data) -> np.ndarray:
    """Column means of ``data``.

    Args:
        data: array of shape (n, d) with n >= 1.

    Returns:
        Mean vector of shape (d,).
    """
    x = as_matrix(data, "data", min_rows=1)
    return x.mean(axis=0)


def empirical_cov(data, mean=None) -> np.ndarray:
    """Biased (1/n) empirical covariance of ``data``.

    The 1/n normalization (not 1/(n-1)) is deliberate: it is the maximum
    likelihood estimate, which is what the Gaussian base model is defined
    around.

    Args:
        data: array of shape (n, d) with n >= 1.
        mean: optional precomputed mean of shape (d,); computed if omitted.

    Returns:
        Symmetric PSD matrix of shape (d, d). For n == 1 this is all zeros.
    """
    x = as_matrix(data, "data", min_rows=1)
    if mean is None:
        mu = x.mean(axis=0)
    else:
        mu = np.asarray(mean, dtype=np.float64)
        if mu.shape != (x.shape[1],):
            raise ValueError(
                f"mean must have shape ({x.shape[1]},), got {mu.shape}"
            )
    xc = x - mu
    cov = (xc.T @ xc) / x.shape[0]
    # dgemm does not promise exact symmetry; the eig solver does expect it.
    return 0.5 * (cov + cov.T)


def sym_eig(m) -> EigDecomposition:
    """Eigendecomposition of a symmetric matrix, eigenvalues descending.

    Args:
        m: square array of shape (d, d), symmetric up to a relative
            tolerance of 1e-9. Small asymmetry is repaired by averaging
            with the transpose.

    Returns:
        EigDecomposition with ``Q diag(w) Q^T`` reconstructing ``m``.

    Raises:
        ValueError: if ``m`` is not square or is visibly asymmetric.
    """
    a = as_matrix(m, "m", min_rows=1)
    d = a.shape[0]
    if a.shape != (d, d):
        raise ValueError(f"m must be square, got shape {a.shape}")
    scale = np.abs(a).max()
    if scale > 0 and np.abs(a - a.T).max() > _SYMMETRY_RTOL * scale:
        raise ValueError("m is not symmetric")
    a = 0.5 * (a + a.T)
    w, q = np.linalg.eigh(a)
    order = np.argsort(w)[::-1]
    return EigDecomposition(
        eigenvalues=np.ascontiguousarray(w[order]),
        eigenvectors=np.ascontiguousarray(q[:, order]),
        source_dim=d,
    )


def sample_standard_normal(n: int, d: int, seed: int) -> np.ndarray:
    """Draw ``n`` iid standard-normal vectors in ``d`` dimensions.

    Uses numpy's PCG64 generator, whose ``standard_normal`` is the
    ziggurat method. Deterministic for a given seed.

    Args:
        n: number of samples, >= 0.
        d: dimensionality, >= 1.
        seed: RNG seed.

    Returns:
        Array of shape (n, d).
    """
    if n < 0:
        raise ValueError(f"n must be >= 0, got {n}")
    if d < 1:
        raise ValueError(f"d must be >= 1, got {d}")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    out = rng.standard_normal((n, d))
    check_finite(out, "samples")
    return out
