import numpy as np
import pytest

from resflow.gaussian import (
    fit_gaussian,
    fit_gda,
    gaussian_from_moments,
    gaussian_logprob,
    gda_logprob,
    gda_score,
    linear_forward,
    linear_inverse,
    mahalanobis_score,
    sample_gaussian,
)
from resflow.linalg import sample_standard_normal

LOG_2PI = np.log(2.0 * np.pi)


def grid_integral_2d(logprob_fn, center, half_width, n=400):
    """Oracle: midpoint-rule integral of exp(logprob) over a 2-D box."""
    xs = np.linspace(center[0] - half_width[0], center[0] + half_width[0], n)
    ys = np.linspace(center[1] - half_width[1], center[1] + half_width[1], n)
    dx = xs[1] - xs[0]
    dy = ys[1] - ys[0]
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    return np.exp(logprob_fn(pts)).sum() * dx * dy


def test_standard_normal_logprob_at_origin():
    model = gaussian_from_moments(np.zeros(2), np.eye(2))
    assert gaussian_logprob(model, np.zeros(2)) == pytest.approx(-LOG_2PI, abs=1e-12)


def test_scalar_variance_four_logprob_at_mean():
    model = gaussian_from_moments(np.array([2.0]), np.array([[4.0]]))
    want = -0.5 * LOG_2PI - 0.5 * np.log(4.0)
    assert gaussian_logprob(model, np.array([2.0])) == pytest.approx(want, abs=1e-12)


def test_fit_recovers_known_covariance():
    rng = np.random.default_rng(42)
    a = rng.normal(size=(3, 3))
    sigma = a @ a.T + 0.5 * np.eye(3)
    b = np.array([1.0, -2.0, 0.5])
    z = sample_standard_normal(500, 3, seed=9)
    x = z @ np.linalg.cholesky(sigma).T + b
    model = fit_gaussian(x)
    cov_hat = model.a_inverse @ model.a_inverse.T
    assert np.linalg.norm(cov_hat - sigma) < 0.2 * np.linalg.norm(sigma) + 0.2
    assert np.abs(model.mean - b).max() < 0.2


def test_fit_requires_two_rows():
    with pytest.raises(ValueError):
        fit_gaussian(np.ones((1, 3)))


def test_constant_data_is_zero_rank_error():
    with pytest.raises(ValueError, match="zero rank"):
        fit_gaussian(np.ones((10, 2)))


def test_whitening_reconstructs_covariance():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(200, 4)) @ rng.normal(size=(4, 4))
    model = fit_gaussian(x)
    assert model.rank == 4
    xc = x - x.mean(axis=0)
    sigma = (xc.T @ xc) / x.shape[0]
    np.testing.assert_allclose(model.a_inverse @ model.a_inverse.T, sigma, atol=1e-9)
    # whitened data really is white under the same 1/n convention
    z = linear_forward(model, x)
    np.testing.assert_allclose((z.T @ z) / z.shape[0], np.eye(4), atol=1e-8)


def test_linear_round_trip_full_rank():
    rng = np.random.default_rng(13)
    x = rng.normal(size=(50, 3)) @ rng.normal(size=(3, 3)) + 2.0
    model = fit_gaussian(x)
    back = linear_inverse(model, linear_forward(model, x))
    np.testing.assert_allclose(back, x, atol=1e-9)


def test_linear_round_trip_degenerate_is_projection():
    rng = np.random.default_rng(21)
    base = rng.normal(size=(120, 2))
    x = np.column_stack([base, base.sum(axis=1)])  # third coord dependent
    model = fit_gaussian(x)
    assert model.rank == 2
    probe = rng.normal(size=(10, 3))
    back = linear_inverse(model, linear_forward(model, probe))
    # oracle: orthogonal projection onto the retained eigenspace
    dec_q = model.a_inverse / np.sqrt((model.a_inverse**2).sum(axis=0))
    proj = (probe - model.mean) @ dec_q @ dec_q.T + model.mean
    np.testing.assert_allclose(back, proj, atol=1e-9)


def test_density_integrates_to_one_2d():
    rng = np.random.default_rng(33)
    x = rng.normal(size=(300, 2)) @ np.array([[1.5, 0.3], [0.0, 0.7]])
    model = fit_gaussian(x)
    sig = np.sqrt(np.diag(model.a_inverse @ model.a_inverse.T))
    mass = grid_integral_2d(
        lambda pts: gaussian_logprob(model, pts), model.mean, 8.0 * sig
    )
    assert mass == pytest.approx(1.0, abs=0.02)


def test_mahalanobis_matches_pinv_oracle_degenerate():
    rng = np.random.default_rng(55)
    base = rng.normal(size=(80, 2))
    x = np.column_stack([base[:, 0], base[:, 1], base[:, 0] - base[:, 1]])
    model = fit_gaussian(x)
    xc = x - x.mean(axis=0)
    sigma = (xc.T @ xc) / x.shape[0]
    pinv = np.linalg.pinv(sigma, rcond=1e-10)
    probe = rng.normal(size=(15, 3))
    want = -np.einsum("ij,jk,ik->i", probe - model.mean, pinv, probe - model.mean)
    np.testing.assert_allclose(mahalanobis_score(model, probe), want, atol=1e-8)


def test_logprob_and_mahalanobis_rank_identically():
    rng = np.random.default_rng(70)
    x = rng.normal(size=(100, 3)) @ rng.normal(size=(3, 3))
    model = fit_gaussian(x)
    probe = rng.normal(size=(40, 3)) * 2.0
    lp = gaussian_logprob(model, probe)
    ms = mahalanobis_score(model, probe)
    np.testing.assert_array_equal(np.argsort(lp), np.argsort(ms))


def test_mahalanobis_ordering_is_affine_invariant():
    rng = np.random.default_rng(77)
    x = rng.normal(size=(150, 3))
    probe = rng.normal(size=(30, 3)) * 1.7
    r = rng.normal(size=(3, 3)) + 3.0 * np.eye(3)
    shift = rng.normal(size=3)
    m1 = fit_gaussian(x)
    m2 = fit_gaussian(x @ r.T + shift)
    s1 = mahalanobis_score(m1, probe)
    s2 = mahalanobis_score(m2, probe @ r.T + shift)
    np.testing.assert_array_equal(np.argsort(s1), np.argsort(s2))


def test_dimension_mismatch_errors():
    model = gaussian_from_moments(np.zeros(2), np.eye(2))
    with pytest.raises(ValueError):
        gaussian_logprob(model, np.zeros(3))
    with pytest.raises(ValueError):
        linear_inverse(model, np.zeros(3))


def test_gda_prefers_tight_class_at_shared_mean():
    rng = np.random.default_rng(88)
    tight = rng.normal(size=(200, 2)) * 0.1
    wide = rng.normal(size=(200, 2)) * 3.0
    x = np.vstack([tight, wide])
    y = np.array([0] * 200 + [1] * 200)
    model = fit_gda(x, y)
    # equal means; only the log-determinant term separates the classes
    lp_tight = gda_logprob(model, np.zeros(2), 0)
    lp_wide = gda_logprob(model, np.zeros(2), 1)
    assert lp_tight > lp_wide
    assert gda_score(model, np.zeros(2)) == pytest.approx(lp_tight)


def test_gda_unknown_class_errors():
    rng = np.random.default_rng(90)
    model = fit_gda(rng.normal(size=(20, 2)), np.array([0] * 10 + [1] * 10))
    with pytest.raises(ValueError, match="unknown class"):
        gda_logprob(model, np.zeros(2), 7)


def test_gda_shrinkage_handles_fewer_samples_than_dims():
    rng = np.random.default_rng(91)
    x = rng.normal(size=(6, 8))
    y = np.array([0, 0, 0, 1, 1, 1])
    model = fit_gda(x, y)  # 3 samples in 8 dims per class
    s = gda_score(model, rng.normal(size=(4, 8)))
    assert np.isfinite(s).all()


def test_gda_tiny_class_errors():
    with pytest.raises(ValueError, match="needs >= 2"):
        fit_gda(np.eye(3), np.array([0, 0, 1]))


def test_sample_gaussian_recovers_moments():
    mean = np.array([1.0, -2.0])
    cov = np.array([[2.0, 0.6], [0.6, 1.0]])
    model = gaussian_from_moments(mean, cov)
    draws = sample_gaussian(model, 200_000, seed=5)
    np.testing.assert_allclose(draws.mean(axis=0), mean, atol=0.02)
    emp = np.cov(draws, rowvar=False, bias=True)
    np.testing.assert_allclose(emp, cov, atol=0.03)
    np.testing.assert_array_equal(draws, sample_gaussian(model, 200_000, seed=5))


def test_sample_gaussian_degenerate_stays_on_subspace():
    # rank-1 covariance along (1, 1): samples never leave that line
    cov = np.ones((2, 2))
    model = gaussian_from_moments(np.zeros(2), cov)
    draws = sample_gaussian(model, 500, seed=3)
    np.testing.assert_allclose(draws[:, 0], draws[:, 1], atol=1e-12)
