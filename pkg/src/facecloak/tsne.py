"""Exact t-SNE in numpy.

Per-point Gaussian bandwidths are found by bisection on the precision so each
conditional distribution matches the requested perplexity; the joint P is the
symmetrised conditional. The low-dimensional map uses Student-t affinities
and is optimised by gradient descent with momentum, per-parameter gains and
early exaggeration, following the reference implementation of the method.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def squared_distances(x: np.ndarray) -> np.ndarray:
    s = np.sum(x * x, axis=1)
    d = s[:, None] + s[None, :] - 2.0 * x @ x.T
    np.fill_diagonal(d, 0.0)
    return np.maximum(d, 0.0)


def _row_entropy(d_row: np.ndarray, beta: float):
    p = np.exp(-(d_row - d_row.min()) * beta)
    sp = p.sum()
    p /= sp
    h = -np.sum(p[p > 0] * np.log(p[p > 0]))
    return h, p


def conditional_probabilities(x, perplexity: float, tol: float = 1e-10, max_iter: int = 200) -> np.ndarray:
    """Row-stochastic matrix of p(j|i); the diagonal is zero."""
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    check_perplexity(n, perplexity)
    d = squared_distances(x)
    target = np.log(perplexity)
    P = np.zeros((n, n))
    for i in range(n):
        row = np.delete(d[i], i)
        beta, lo, hi = 1.0, 0.0, np.inf
        for _ in range(max_iter):
            h, p = _row_entropy(row, beta)
            diff = h - target
            if abs(diff) < tol:
                break
            if diff > 0:
                lo = beta
                beta = beta * 2 if hi == np.inf else (beta + hi) / 2
            else:
                hi = beta
                beta = (beta + lo) / 2
        P[i, np.arange(n) != i] = p
    return P


def joint_probabilities(x, perplexity: float) -> np.ndarray:
    pc = conditional_probabilities(x, perplexity)
    return (pc + pc.T) / (2.0 * len(pc))


def student_t_affinities(y: np.ndarray):
    """Returns (Q, W) with W the unnormalised kernel 1 / (1 + |yi - yj|^2)."""
    w = 1.0 / (1.0 + squared_distances(y))
    np.fill_diagonal(w, 0.0)
    return w / w.sum(), w


def kl_divergence(P: np.ndarray, Q: np.ndarray) -> float:
    m = P > 0
    return float(np.sum(P[m] * np.log(P[m] / Q[m])))


def kl_of_embedding(P: np.ndarray, y: np.ndarray) -> float:
    return kl_divergence(P, student_t_affinities(y)[0])


def tsne_gradient(P: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Gradient of KL(P || Q(y)) with respect to the map points."""
    Q, w = student_t_affinities(y)
    pq = (P - Q) * w
    return 4.0 * (np.diag(pq.sum(axis=1)) - pq) @ y


def check_perplexity(n: int, perplexity: float) -> None:
    if n < 4:
        raise ValueError(f"t-SNE needs at least 4 points, got {n}")
    if not (0 < perplexity < (n - 1) / 3):
        raise ValueError(f"perplexity {perplexity} is infeasible for {n} points (must be below {(n - 1) / 3:.3f})")


def feasible_perplexity(n: int, perplexity: float) -> float:
    """Clip a requested perplexity just below the (n - 1) / 3 limit."""
    limit = (n - 1) / 3
    return min(perplexity, limit * 0.99)


@dataclass
class TsneResult:
    embedding: np.ndarray
    kl_history: list[float] = field(default_factory=list)


def tsne(x, perplexity: float = 30.0, iterations: int = 1000, learning_rate: float = 200.0, seed: int = 0,
         exaggeration: float = 12.0, exaggeration_iters: int = 250, momentum: float = 0.5,
         final_momentum: float = 0.8, momentum_switch: int = 250, min_gain: float = 0.01,
         track_kl: bool = True) -> TsneResult:
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    check_perplexity(n, perplexity)
    P = joint_probabilities(x, perplexity)
    rng = np.random.default_rng(seed)
    y = rng.normal(0.0, 1e-4, size=(n, 2))
    update = np.zeros_like(y)
    gains = np.ones_like(y)
    history = []
    for it in range(iterations):
        scale = exaggeration if it < exaggeration_iters else 1.0
        grad = tsne_gradient(P * scale, y)
        mom = momentum if it < momentum_switch else final_momentum
        inc = np.sign(grad) != np.sign(update)
        gains = np.where(inc, gains + 0.2, gains * 0.8)
        gains = np.maximum(gains, min_gain)
        update = mom * update - learning_rate * gains * grad
        y = y + update
        y = y - y.mean(axis=0)
        if track_kl:
            history.append(kl_of_embedding(P, y))
    return TsneResult(y, history)
