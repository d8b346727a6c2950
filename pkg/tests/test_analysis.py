import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cobo import analysis as an
from cobo.losses import chi_mean_c


def textbook_pearson(x, y):
    """Direct covariance formula, written independently of the module."""
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    return sxy / math.sqrt(sxx * syy)


def test_collinear_is_one():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(12, 1))
    st_ = an.pairwise_stats(z, 2.0 * z[:, 0], max_pairs=None)
    assert st_.pearson == pytest.approx(1.0, abs=1e-12)


def test_constant_y_sentinel():
    z = np.random.default_rng(1).normal(size=(6, 2))
    s = an.pairwise_stats(z, np.full(6, 3.0))
    assert s.pearson is None
    with pytest.raises(ValueError):
        an.corr_lower_bound(s, 1.0)


def test_matches_textbook_oracle():
    rng = np.random.default_rng(2)
    z, y = rng.normal(size=(10, 4)), rng.normal(size=10)
    dz, dy = [], []
    for i in range(10):
        for j in range(i + 1, 10):
            dz.append(math.sqrt(sum((z[i, d] - z[j, d]) ** 2 for d in range(4))))
            dy.append(abs(y[i] - y[j]))
    s = an.pairwise_stats(z, y)
    assert s.n_pairs == 45
    assert s.pearson == pytest.approx(textbook_pearson(dz, dy), abs=1e-12)
    assert s.mu_dz == pytest.approx(sum(dz) / 45, abs=1e-12)
    assert s.var_dy == pytest.approx(np.var(dy), abs=1e-12)


def test_pair_subsample():
    rng = np.random.default_rng(3)
    z, y = rng.normal(size=(50, 2)), rng.normal(size=50)
    s = an.pairwise_stats(z, y, max_pairs=100, rng=np.random.default_rng(0))
    assert s.n_pairs == 100
    s2 = an.pairwise_stats(z, y, max_pairs=100, rng=np.random.default_rng(0))
    assert s.pearson == s2.pearson


def test_needs_three_points():
    with pytest.raises(ValueError):
        an.pairwise_stats(np.zeros((2, 2)), np.zeros(2))


@settings(max_examples=30, deadline=None)
@given(st.floats(0.1, 10.0), st.floats(-5.0, 5.0), st.integers(0, 1000))
def test_affine_invariance(a, b, seed):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=40), rng.normal(size=40)
    assert an.pearson(a * x + b, y) == pytest.approx(an.pearson(x, y), abs=1e-9)


# --- bound ---------------------------------------------------------------------

def test_bound_saturates_for_linear():
    rng = np.random.default_rng(4)
    dz = rng.uniform(0, 1, 1000)
    L = 2.5
    s = an.stats_from_distances(dz, L * dz)
    assert an.corr_lower_bound(s, L) == pytest.approx(1.0, abs=1e-9)
    assert s.pearson == pytest.approx(1.0, abs=1e-12)


def test_bound_decreasing_in_L():
    s = an.CorrelationStats(0.4, 0.05, 0.3, 0.02, 0.5, 100)
    assert an.corr_lower_bound(s, 2.0) < an.corr_lower_bound(s, 1.0)


def test_bound_formula():
    s = an.CorrelationStats(0.4, 0.05, 0.3, 0.02, 0.5, 100)
    L = 1.7
    expect = ((0.02 + 0.09) / L - L * 0.16) / math.sqrt(0.05 * 0.02)
    assert an.corr_lower_bound(s, L) == pytest.approx(expect, rel=1e-14)


def test_bound_rejects_bad_L():
    s = an.CorrelationStats(0.4, 0.05, 0.3, 0.02, 0.5, 100)
    for L in (0.0, -1.0):
        with pytest.raises(ValueError):
            an.corr_lower_bound(s, L)


def test_bound_experiment_all_families_hold():
    rep = an.bound_experiment(an.BoundConfig(trials=20, pairs=20_000))
    assert len(rep.rows) == 60
    assert rep.passed and rep.pass_rate == 1.0
    lin = rep.by_family()["linear"]
    assert lin["max_gap"] <= 0.02


def test_bound_experiment_empty():
    rep = an.bound_experiment(an.BoundConfig(families=[]))
    assert rep.rows == [] and rep.passed


def test_bound_experiment_understated_L_fails():
    # with L halved the linear family has D_Y = 2 L' D_Z, so the "bound" exceeds 1
    rep = an.bound_experiment(an.BoundConfig(families=["linear"], trials=5, pairs=5000, lipschitz_scale=0.5))
    assert not rep.passed


def test_bound_experiment_unknown_family():
    with pytest.raises(ValueError):
        an.bound_experiment(an.BoundConfig(families=["cubic"]))


# --- z-distance summary -------------------------------------------------------------

def test_zdist_two_points():
    out = an.zdist_summary(np.array([[0.0, 0.0], [3.0, 4.0]]))
    assert all(v == pytest.approx(5.0) for v in out.values())


def test_zdist_identical_points():
    out = an.zdist_summary(np.ones((5, 3)))
    assert all(v == 0.0 for v in out.values())


def test_zdist_needs_two():
    with pytest.raises(ValueError):
        an.zdist_summary(np.zeros((1, 3)))


def test_zdist_standard_normal_median_near_c():
    z = np.random.default_rng(5).standard_normal((100, 8))
    med = an.zdist_summary(z)["median"]
    assert abs(med / chi_mean_c(8) - 1) < 0.05


def test_zdist_permutation_invariant():
    rng = np.random.default_rng(6)
    z = rng.normal(size=(20, 3))
    assert an.zdist_summary(z) == an.zdist_summary(z[rng.permutation(20)])


# --- PCA -------------------------------------------------------------------------

def test_pca_axis_aligned():
    t = np.linspace(0, 2 * np.pi, 40, endpoint=False)
    z = np.zeros((40, 3))
    z[:, 0] = 3.0 * np.sin(t)
    z[:, 1] = np.cos(t)
    p = an.pca2d(z)
    np.testing.assert_allclose(np.abs(p.components[0]), [1, 0, 0], atol=1e-3)
    np.testing.assert_allclose(np.abs(p.components[1]), [0, 1, 0], atol=1e-3)
    assert p.explained.sum() == pytest.approx(1.0)


def test_pca_matches_eigh():
    rng = np.random.default_rng(8)
    z = rng.normal(size=(10, 8)) * np.linspace(3, 0.2, 8)
    p = an.pca2d(z)
    x = z - z.mean(0)
    evals, evecs = np.linalg.eigh(x.T @ x / len(x))
    top = evecs[:, ::-1][:, :2]
    for k in range(2):
        v = top[:, k]
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
        np.testing.assert_allclose(x @ v, p.points[:, k], atol=1e-6)
    np.testing.assert_allclose(p.explained, evals[::-1][:2] / evals.sum(), atol=1e-9)
    assert p.explained.sum() <= 1 + 1e-12


def test_pca_rank_one():
    t = np.linspace(-1, 1, 10)
    z = np.outer(t, [1.0, 2.0, -1.0])
    p = an.pca2d(z)
    assert p.explained[1] == 0.0
    np.testing.assert_array_equal(p.points[:, 1], 0.0)


def test_pca_contracts_distances():
    z = np.random.default_rng(9).normal(size=(30, 6))
    p = an.pca2d(z)
    full = np.linalg.norm(z[:, None] - z[None], axis=-1)
    flat = np.linalg.norm(p.points[:, None] - p.points[None], axis=-1)
    assert np.all(flat <= full + 1e-9)


def test_pca_needs_three():
    with pytest.raises(ValueError):
        an.pca2d(np.zeros((2, 4)))
