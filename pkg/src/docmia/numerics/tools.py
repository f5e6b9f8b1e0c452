"""Initializers, norms, clipping and named random streams."""
from __future__ import annotations

import hashlib
from collections.abc import Mapping

import numpy as np


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Counter-based (Philox) generator keyed by ``(seed, name)``.

    Distinct names give statistically independent streams, so adding a new
    consumer never shifts the draws of an existing one.
    """
    digest = hashlib.sha256(f"{int(seed)}/{name}".encode()).digest()
    key = np.frombuffer(digest[:16], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def kaiming_init(fan_in: int, shape, rng: np.random.Generator) -> np.ndarray:
    """Normal draws with variance ``2 / fan_in``."""
    if fan_in < 1:
        raise ValueError("fan_in must be >= 1")
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def l2_norm(x) -> float:
    """Euclidean norm over every entry of an array or a mapping of arrays."""
    if isinstance(x, Mapping):
        return float(np.sqrt(sum(float(np.sum(np.square(v))) for v in x.values())))
    return float(np.sqrt(np.sum(np.square(np.asarray(x, dtype=np.float64)))))


def clip_by_norm(grad, max_norm: float):
    """Rescale ``grad`` (array or mapping) so its L2 norm is at most ``max_norm``."""
    if not max_norm > 0:
        raise ValueError("clip norm must be positive")
    norm = l2_norm(grad)
    if norm <= max_norm:
        return grad
    scale = max_norm / norm
    if isinstance(grad, Mapping):
        return {k: v * scale for k, v in grad.items()}
    return np.asarray(grad) * scale
