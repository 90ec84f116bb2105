import numpy as np
import pytest

from facecloak.tsne import (
    check_perplexity,
    conditional_probabilities,
    feasible_perplexity,
    joint_probabilities,
    kl_of_embedding,
    tsne,
    tsne_gradient,
)

from oracles import linearly_separable


def two_clusters(seed, n=50, dim=32, sigma=1.0):
    rng = np.random.default_rng(seed)
    centre = np.zeros(dim)
    centre[0] = 10 * sigma
    a = rng.normal(0, sigma, (n, dim))
    b = rng.normal(0, sigma, (n, dim)) + centre
    return a, b


def numeric_grad(P, y, h=1e-6):
    g = np.zeros_like(y)
    for idx in np.ndindex(*y.shape):
        yp, ym = y.copy(), y.copy()
        yp[idx] += h
        ym[idx] -= h
        g[idx] = (kl_of_embedding(P, yp) - kl_of_embedding(P, ym)) / (2 * h)
    return g


class TestAffinities:
    def test_normalisation(self):
        x = np.random.default_rng(0).normal(size=(40, 5))
        pc = conditional_probabilities(x, 10.0)
        assert np.max(np.abs(pc.sum(axis=1) - 1)) < 1e-9
        assert np.all(np.diag(pc) == 0)
        P = joint_probabilities(x, 10.0)
        assert abs(P.sum() - 1) < 1e-9
        assert np.allclose(P, P.T)

    def test_rows_hit_perplexity(self):
        x = np.random.default_rng(1).normal(size=(30, 4))
        pc = conditional_probabilities(x, 5.0)
        for row in pc:
            p = row[row > 0]
            assert np.exp(-np.sum(p * np.log(p))) == pytest.approx(5.0, rel=1e-6)

    def test_infeasible(self):
        with pytest.raises(ValueError):
            check_perplexity(10, 3.0)
        with pytest.raises(ValueError):
            check_perplexity(3, 0.5)
        assert feasible_perplexity(10, 30.0) < 3.0
        with pytest.raises(ValueError):
            tsne(np.zeros((10, 2)), perplexity=30)


class TestOptimisation:
    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(6, 4))
        P = joint_probabilities(x, 1.5)
        for iters in (0, 5, 40):
            y = tsne(x, 1.5, iterations=iters, seed=3, track_kl=False).embedding if iters else rng.normal(size=(6, 2))
            g, n = tsne_gradient(P, y), numeric_grad(P, y)
            assert np.linalg.norm(g - n) / np.linalg.norm(n) < 1e-4

    def test_kl_non_negative(self):
        x = np.random.default_rng(4).normal(size=(30, 6))
        res = tsne(x, 8.0, iterations=300, seed=0)
        assert len(res.kl_history) == 300
        assert min(res.kl_history) >= 0

    def test_deterministic(self):
        x = np.random.default_rng(5).normal(size=(20, 3))
        a = tsne(x, 5.0, iterations=100, seed=9).embedding
        b = tsne(x, 5.0, iterations=100, seed=9).embedding
        assert np.array_equal(a, b)

    @pytest.mark.parametrize("seed", range(10))
    def test_two_clusters_separate(self, seed):
        a, b = two_clusters(seed)
        y = tsne(np.vstack([a, b]), 30.0, iterations=1000, seed=seed, track_kl=False).embedding
        assert linearly_separable(y[:50], y[50:]) > 0
