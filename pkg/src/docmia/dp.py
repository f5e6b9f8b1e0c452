"""DP-SGD training and a subsampled-Gaussian RDP accountant.

Each step computes per-example gradients (per-example parameter copies,
one backward pass), clips each to norm ``C``, sums them, adds Gaussian noise
with standard deviation ``sigma * C`` per coordinate, divides by the batch
size and hands the result to Adam.

The accountant tabulates Renyi DP of the Poisson-subsampled Gaussian
mechanism at integer orders 2..64,

    A_a = sum_k C(a, k) (1 - q)^(a - k) q^k exp((k^2 - k) / (2 sigma^2))
    rdp(a) = steps * log(A_a) / (a - 1)

and converts to (eps, delta) with

    eps = min_a rdp(a) + log((a - 1) / a) - (log(delta) + log(a)) / (a - 1).

At q = 1 the sum collapses to exp((a^2 - a) / (2 sigma^2)), i.e. the
Gaussian mechanism's a / (2 sigma^2).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, logsumexp

from . import numerics as nx
from .numerics import Tensor

ORDERS = tuple(range(2, 65))


@dataclass(frozen=True)
class DPConfig:
    clip_norm: float = 1.0
    noise_multiplier: float = 1.0
    delta: float | None = None  # None: 1 / (10 * training-set size)
    target_epsilon: float | None = None  # if set, the noise multiplier is calibrated to it

    def __post_init__(self):
        if not self.clip_norm > 0:
            raise ValueError("clip norm must be > 0")
        if not self.noise_multiplier >= 0:
            raise ValueError("noise multiplier must be >= 0")
        if self.delta is not None and not 0 < self.delta < 1:
            raise ValueError("delta must be in (0, 1)")

    def delta_for(self, n: int) -> float:
        return self.delta if self.delta is not None else 1.0 / (10 * n)


def _log_a(q: float, sigma: float, alpha: int) -> float:
    if q == 1.0:
        return (alpha * alpha - alpha) / (2 * sigma * sigma)
    k = np.arange(alpha + 1)
    log_binom = gammaln(alpha + 1) - gammaln(k + 1) - gammaln(alpha - k + 1)
    terms = log_binom + (alpha - k) * math.log1p(-q) + k * math.log(q) + (k * k - k) / (2 * sigma * sigma)
    return float(logsumexp(terms))


def rdp_subsampled_gaussian(q: float, sigma: float, steps: int, orders=ORDERS) -> np.ndarray:
    if not 0 < q <= 1:
        raise ValueError("sampling rate must be in (0, 1]")
    if steps == 0:
        return np.zeros(len(orders))
    if sigma == 0:
        return np.full(len(orders), np.inf)
    return np.array([steps * _log_a(q, sigma, a) / (a - 1) for a in orders])


def rdp_to_epsilon(rdp: np.ndarray, delta: float, orders=ORDERS) -> float:
    a = np.asarray(orders, dtype=np.float64)
    eps = rdp + np.log((a - 1) / a) - (math.log(delta) + np.log(a)) / (a - 1)
    return float(max(0.0, np.min(eps)))


def account_epsilon(noise_multiplier: float, sampling_rate: float, steps: int, delta: float) -> float:
    """(eps, delta)-DP after ``steps`` subsampled Gaussian steps; inf without noise."""
    if steps == 0:
        return 0.0
    if noise_multiplier == 0:
        return math.inf
    return rdp_to_epsilon(rdp_subsampled_gaussian(sampling_rate, noise_multiplier, steps), delta)


def noise_for_epsilon(target: float, sampling_rate: float, steps: int, delta: float, tol: float = 1e-4) -> float:
    """Smallest noise multiplier (to ``tol``) whose accounted epsilon is <= target."""
    if not target > 0:
        raise ValueError("target epsilon must be > 0")
    lo, hi = 0.0, 1.0
    while account_epsilon(hi, sampling_rate, steps, delta) > target:
        lo, hi = hi, hi * 2
        if hi > 1e4:
            raise ValueError("target epsilon is unreachable")
    while hi - lo > tol:
        mid = (lo + hi) / 2
        if mid > 0 and account_epsilon(mid, sampling_rate, steps, delta) <= target:
            hi = mid
        else:
            lo = mid
    return hi


def steps_for(n: int, batch_size: int, epochs: int) -> int:
    return epochs * math.ceil(n / batch_size)


# ---------------------------------------------------------------------------
# DP-SGD


def per_example_gradients(model, batch) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Gradients with a leading per-example axis, and per-example losses."""
    from .seqmodel import batch_loss

    n = len(batch)
    leaves = {k: Tensor(np.repeat(v[None], n, axis=0), True) for k, v in model.params.items()}
    total, per = batch_loss(model, batch, leaves)
    return nx.backward(total, leaves), per


def clip_per_example(grads: dict[str, np.ndarray], clip_norm: float) -> dict[str, np.ndarray]:
    n = next(iter(grads.values())).shape[0]
    norms = np.sqrt(sum(np.square(g).reshape(n, -1).sum(axis=1) for g in grads.values()))
    scale = np.minimum(1.0, clip_norm / np.maximum(norms, 1e-300))
    return {k: g * scale.reshape((n,) + (1,) * (g.ndim - 1)) for k, g in grads.items()}


def dp_sgd_step(model, batch, dp: DPConfig, noise_multiplier: float, state: nx.AdamState, rng: np.random.Generator) -> np.ndarray:
    """One private update of ``model.params`` in place; returns per-example losses."""
    grads, per = per_example_gradients(model, batch)
    clipped = clip_per_example(grads, dp.clip_norm)
    n = len(batch)
    noisy = {}
    for k in sorted(clipped):
        g = clipped[k].sum(axis=0)
        if noise_multiplier > 0:
            g = g + rng.normal(0.0, noise_multiplier * dp.clip_norm, size=g.shape)
        noisy[k] = g / n
        if not np.all(np.isfinite(noisy[k])):
            raise nx.NumericError(f"non-finite private gradient for {k!r}")
    nx.adam_step(model.params, noisy, state)
    return per


class DPTrainer:
    """Holds the calibrated noise level and the noise stream for one run."""

    def __init__(self, dp: DPConfig, n: int, seed: int, batch_size: int | None = None, epochs: int | None = None):
        self.dp = dp
        self.n = n
        self.delta = dp.delta_for(n)
        self.rng = nx.rng_stream(seed, "dp-noise")
        self.noise_multiplier = dp.noise_multiplier
        self.sampling_rate = None
        self.steps_planned = None
        if batch_size is not None:
            self.sampling_rate = min(1.0, batch_size / n)
            self.steps_planned = steps_for(n, batch_size, epochs or 0)
            if dp.target_epsilon is not None:
                self.noise_multiplier = noise_for_epsilon(dp.target_epsilon, self.sampling_rate, self.steps_planned, self.delta)
        elif dp.target_epsilon is not None:
            raise ValueError("calibrating to a target epsilon needs the batch size and epoch count")
        self.steps = 0

    def step(self, model, batch, state) -> np.ndarray:
        per = dp_sgd_step(model, batch, self.dp, self.noise_multiplier, state, self.rng)
        self.steps += 1
        return per

    def epsilon(self) -> float:
        if self.sampling_rate is None:
            raise ValueError("sampling rate unknown")
        return account_epsilon(self.noise_multiplier, self.sampling_rate, self.steps, self.delta)
