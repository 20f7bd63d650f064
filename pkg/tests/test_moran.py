import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from equidist.errors import ValidationError
from equidist.moran import (MoranNull, moran_expectation, morans_i, permutation_statistics,
                            weight_moments)
from equidist.neighbors import NeighborConfig, build_graph

from oracles import dense_moran, random_graph


@pytest.mark.parametrize("n, expected", [(11846, -8.442381e-05), (70483, -1.418802e-05)])
def test_expectation_table_values(n, expected):
    assert abs(moran_expectation(n) - expected) <= 1e-10


def test_sparse_equals_dense_double_sum(backend, rng):
    for _ in range(100):
        n = int(rng.integers(4, 51))
        g = random_graph(rng, n)
        x = rng.normal(size=n)
        assert morans_i(x, g).I == dense_moran(x, g.to_scipy().toarray())


def test_weight_moments_dense(rng):
    g = random_graph(rng, 30, "knn")
    W = g.to_scipy().toarray()
    s0, s1, s2 = weight_moments(g)
    assert s0 == pytest.approx(W.sum(), rel=1e-14)
    assert s1 == pytest.approx(0.5 * ((W + W.T) ** 2).sum(), rel=1e-14)
    assert s2 == pytest.approx(((W.sum(1) + W.sum(0)) ** 2).sum(), rel=1e-14)


def test_permutation_null_moments(rng):
    g = random_graph(np.random.default_rng(5), 100, "threshold")
    x = np.random.default_rng(6).exponential(size=100)  # skewed, so kurtosis matters
    draws = permutation_statistics(x, g, 10_000, seed=11)
    r = morans_i(x, g, MoranNull.RANDOMIZATION)
    se = draws.std(ddof=1) / np.sqrt(len(draws))
    assert abs(draws.mean() - r.expectation) < 3 * se
    # sample variance of 10k draws is good to a few percent
    assert draws.var(ddof=1) == pytest.approx(r.variance, rel=0.05)


def test_normality_variance_by_simulation(rng):
    g = random_graph(np.random.default_rng(8), 60, "knn")
    sims = np.array([morans_i(rng.normal(size=60), g, "normality").I for _ in range(8000)])
    r = morans_i(rng.normal(size=60), g, "normality")
    assert sims.var(ddof=1) == pytest.approx(r.variance, rel=0.06)
    assert abs(sims.mean() - r.expectation) < 4 * sims.std() / np.sqrt(len(sims))


def test_p_values(rng):
    g = random_graph(rng, 40, "knn")
    x = rng.normal(size=40)
    two = morans_i(x, g)
    assert two.p == pytest.approx(2 * norm.sf(abs(two.z)), rel=1e-12)
    assert morans_i(x, g, alternative="greater").p == pytest.approx(norm.sf(two.z), rel=1e-12)
    assert morans_i(x, g, alternative="less").p == pytest.approx(norm.cdf(two.z), rel=1e-12)
    with pytest.raises(ValidationError):
        morans_i(x, g, alternative="sideways")


def test_smooth_field_is_positive(rng):
    n = 80
    lat, lon = rng.uniform(30, 31, n), rng.uniform(-90, -89, n)
    g = build_graph((lat, lon), NeighborConfig("knn", k=4))
    r = morans_i(lat + lon, g)
    assert r.I > 0.5 and r.p < 1e-6


def test_validation(rng):
    g = random_graph(rng, 10)
    with pytest.raises(ValidationError, match="does not match"):
        morans_i(np.ones(9), g)
    with pytest.raises(ValidationError, match="constant"):
        morans_i(np.full(10, 2.0), g)
    small = build_graph(([0.0, 0.0, 0.0], [0.0, 0.01, 0.03]))
    with pytest.raises(ValidationError, match="4 observations"):
        morans_i([1.0, 2.0, 4.0], small)
    assert np.isfinite(morans_i([1.0, 2.0, 4.0], small, "normality").I)


def test_as_dict_keys(rng):
    g = random_graph(rng, 10)
    d = morans_i(rng.normal(size=10), g).as_dict()
    assert {"statistic", "p_value", "expectation", "variance", "z", "n"} <= set(d)


@settings(max_examples=50, deadline=None)
@given(st.floats(-1e3, 1e3), st.floats(0.01, 1e3), st.integers(0, 2**31))
def test_affine_invariance(shift, scale, seed):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, 25)
    x = rng.normal(size=25)
    a = morans_i(x, g).I
    assert morans_i(shift + scale * x, g).I == pytest.approx(a, rel=1e-9, abs=1e-12)
