"""Dense float64 numerics shared by every stage of the pipeline.

Everything here is deterministic given its inputs.  Randomness always comes
from a :class:`numpy.random.Generator` backed by the counter-based Philox
bit generator, built with :func:`make_rng`.
"""

from __future__ import annotations

import math
from typing import Callable, Mapping

import numpy as np
from scipy.special import erf

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Philox generator keyed by ``(seed, stream)``.

    Separate streams let independent consumers draw from the same user seed
    without sharing state.
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(stream)])))


def normal_cdf(x):
    return 0.5 * (1.0 + erf(np.asarray(x, dtype=np.float64) / _SQRT2))


def normal_pdf(x):
    x = np.asarray(x, dtype=np.float64)
    return _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def gelu(x):
    """Exact GeLU, ``x * Phi(x)``."""
    x = np.asarray(x, dtype=np.float64)
    return x * normal_cdf(x)


def gelu_grad(x):
    x = np.asarray(x, dtype=np.float64)
    return normal_cdf(x) + x * normal_pdf(x)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    # split on sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.logaddexp(0.0, x)


def softmax(v, axis: int = -1):
    """Max-subtracted softmax along ``axis``."""
    v = np.asarray(v, dtype=np.float64)
    z = v - np.max(v, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def logsumexp(v, axis: int = -1):
    v = np.asarray(v, dtype=np.float64)
    m = np.max(v, axis=axis, keepdims=True)
    return np.squeeze(m, axis=axis) + np.log(np.sum(np.exp(v - m), axis=axis))


def hadamard(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"hadamard: shape mismatch {a.shape} vs {b.shape}")
    return a * b


def xavier_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))


def pairwise_sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances between rows of ``x`` and rows of ``c``."""
    diff = x[:, None, :] - c[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def _sq_dists_fast(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _kmeanspp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]))
    first = int(rng.integers(n))
    centroids[0] = points[first]
    closest = ((points - centroids[0]) ** 2).sum(1)
    for j in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centroids[j] = points[idx]
        closest = np.minimum(closest, ((points - centroids[j]) ** 2).sum(1))
    return centroids


def kmeans(points, k: int, seed: int, max_iter: int = 100, return_sse: bool = False):
    """k-means++ seeding followed by Lloyd iterations.

    Stops at an assignment fixpoint or after ``max_iter`` rounds.  A cluster
    that loses all its points is re-seeded at the point farthest from its
    current centroid.  With ``return_sse`` the per-iteration within-cluster
    sum of squares is returned alongside the centroids.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ValueError("kmeans expects a 2-D point matrix")
    n = points.shape[0]
    if k < 1 or k > n:
        raise ValueError(f"kmeans: K={k} must be in [1, {n}]")
    rng = make_rng(seed, stream=17)
    centroids = _kmeanspp(points, k, rng)
    assign = None
    history: list[float] = []
    for _ in range(max_iter):
        dists = _sq_dists_fast(points, centroids)
        new_assign = np.argmin(dists, axis=1)
        sse = float(dists[np.arange(n), new_assign].sum())
        history.append(sse)
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        counts = np.bincount(assign, minlength=k)
        sums = np.zeros_like(centroids)
        np.add.at(sums, assign, points)
        nonempty = counts > 0
        centroids[nonempty] = sums[nonempty] / counts[nonempty, None]
        if not nonempty.all():
            point_cost = ((points - centroids[assign]) ** 2).sum(1)
            for j in np.flatnonzero(~nonempty):
                far = int(np.argmax(point_cost))
                centroids[j] = points[far]
                point_cost[far] = -1.0
    if return_sse:
        return centroids, history
    return centroids


def finite_difference_check(
    loss_fn: Callable[[Mapping[str, np.ndarray]], tuple[float, Mapping[str, np.ndarray]]],
    params: Mapping[str, np.ndarray],
    eps: float = 1e-3,
    report: dict | None = None,
) -> float:
    """Compare analytic gradients against a fourth-order central stencil.

    The wide step keeps float rounding in the loss (~1e-16 * |J| / eps) well
    below the absolute floor, so tiny gradient coordinates do not report
    spurious relative errors.

    ``loss_fn(params)`` must return ``(loss, grads)`` with ``grads`` keyed like
    ``params``.  Arrays in ``params`` are perturbed in place and restored.
    Returns ``max |g_a - g_n| / (|g_a| + |g_n| + 1e-8)`` over all coordinates;
    if ``report`` is given it receives the per-parameter maxima.
    """
    _, analytic = loss_fn(params)
    analytic = {k: np.array(v, dtype=np.float64, copy=True) for k, v in analytic.items()}
    worst = 0.0
    for name, arr in params.items():
        if name not in analytic:
            continue
        ga = analytic[name].reshape(-1)
        flat = arr.reshape(-1)
        if not np.shares_memory(flat, arr):
            raise ValueError(f"parameter {name!r} is not contiguous")
        local = 0.0
        for i in range(flat.size):
            orig = flat[i]
            vals = []
            for k in (2, 1, -1, -2):
                flat[i] = orig + k * eps
                vals.append(loss_fn(params)[0])
            flat[i] = orig
            gn = (-vals[0] + 8.0 * vals[1] - 8.0 * vals[2] + vals[3]) / (12.0 * eps)
            err = abs(ga[i] - gn) / (abs(ga[i]) + abs(gn) + 1e-8)
            local = max(local, err)
        if report is not None:
            report[name] = local
        worst = max(worst, local)
    return float(worst)


class Adam:
    """Adam over a dict of arrays, updated in place."""

    def __init__(self, params: Mapping[str, np.ndarray], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
