"""Individual Renyi-DP accounting and the Gaussian / DP-SGD primitives.

Randomness comes from named sub-streams of numpy's Philox4x64 counter-based
generator. The 128-bit Philox key of a stream is the first 16 bytes of
``blake2b("<seed>/<name>/<index>...")`` read as a little-endian integer, so a
stream depends only on ``(seed, name, index...)``; draws from one stream
never shift another.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class RdpPoint:
    alpha: float
    epsilon: float

    def __post_init__(self):
        if not self.alpha > 1:
            raise ValueError(f"Renyi order must be > 1, got {self.alpha}")
        if not (self.epsilon >= 0 and math.isfinite(self.epsilon)):
            raise ValueError(f"epsilon must be finite and >= 0, got {self.epsilon}")


@dataclass(frozen=True)
class MechanismParams:
    sigma: float  # absolute noise standard deviation
    lipschitz_agg: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not self.sigma >= 0:
            raise ValueError("sigma must be >= 0")
        if not self.lipschitz_agg >= 0:
            raise ValueError("lipschitz_agg must be >= 0")


@dataclass(frozen=True)
class DpSgdParams:
    clip_bound: float = 0.1
    noise_multiplier: float = 5.0
    learning_rate: float = 0.1
    batch_size: int = 2000
    seed: int = 42

    def __post_init__(self):
        if not self.clip_bound > 0:
            raise ValueError("clip_bound must be > 0")
        if not self.noise_multiplier >= 0:
            raise ValueError("noise_multiplier must be >= 0")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @property
    def noise_std(self) -> float:
        return self.noise_multiplier * self.clip_bound


def individual_rdp(alpha: float, params: MechanismParams, grad_norm: float) -> RdpPoint:
    """RDP guarantee of one individual under the Gaussian mechanism.

    epsilon = alpha * L^2 * ||grad f_i||^2 / (2 sigma^2), with L the Lipschitz
    constant of the aggregation.
    """
    if not alpha > 1:
        raise ValueError(f"Renyi order must be > 1, got {alpha}")
    if params.sigma == 0:
        raise ValueError("sigma = 0 gives unbounded privacy loss")
    if not grad_norm >= 0:
        raise ValueError("grad_norm must be >= 0")
    eps = alpha * params.lipschitz_agg**2 * grad_norm**2 / (2 * params.sigma**2)
    return RdpPoint(alpha, eps)


def rdp_compose(points: Sequence[RdpPoint]) -> RdpPoint:
    """Sequential composition at a single order: epsilons add."""
    if not points:
        raise ValueError("nothing to compose")
    alpha = points[0].alpha
    if any(p.alpha != alpha for p in points):
        raise ValueError("all points must share one Renyi order")
    total = 0.0
    for p in points:
        total += p.epsilon
    return RdpPoint(alpha, total)


def substream(seed: int, name: str, *index: int) -> np.random.Generator:
    """Independent generator for ``(seed, name, *index)``."""
    label = "/".join([str(int(seed)), name, *(str(int(i)) for i in index)])
    digest = hashlib.blake2b(label.encode(), digest_size=16).digest()
    return np.random.Generator(np.random.Philox(key=int.from_bytes(digest, "little")))


def gaussian_noise(shape: int, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """``shape`` i.i.d. N(0, sigma^2) draws via the Box-Muller transform."""
    if not sigma >= 0:
        raise ValueError("sigma must be >= 0")
    n = int(shape)
    if sigma == 0:
        return np.zeros(n)
    pairs = (n + 1) // 2
    u = rng.random((pairs, 2))
    radius = np.sqrt(-2.0 * np.log1p(-u[:, 0]))  # 1 - u in (0, 1]
    theta = 2.0 * np.pi * u[:, 1]
    z = np.empty((pairs, 2))
    z[:, 0] = radius * np.cos(theta)
    z[:, 1] = radius * np.sin(theta)
    return sigma * z.ravel()[:n]


def l2_norm(v: np.ndarray) -> float:
    """Overflow/underflow-safe Euclidean norm."""
    v = np.asarray(v, dtype=np.float64)
    scale = float(np.max(np.abs(v))) if v.size else 0.0
    if scale == 0.0 or not math.isfinite(scale):
        return scale
    return scale * math.sqrt(float(np.sum((v / scale) ** 2)))


def clip_l2(v, clip_bound: float) -> np.ndarray:
    """Scale ``v`` down to L2 norm ``clip_bound`` if it is longer."""
    if not clip_bound > 0:
        raise ValueError("clip_bound must be > 0")
    v = np.asarray(v, dtype=np.float64)
    norm = l2_norm(v)
    if norm <= clip_bound:
        return v.copy()
    return v * (clip_bound / norm)


def clip_rows(g: np.ndarray, clip_bound: float) -> np.ndarray:
    """Row-wise :func:`clip_l2` of a ``(n, d)`` matrix of per-sample gradients."""
    if not clip_bound > 0:
        raise ValueError("clip_bound must be > 0")
    g = np.asarray(g, dtype=np.float64)
    scale = np.max(np.abs(g), axis=1)
    safe = np.where(scale > 0, scale, 1.0)
    norms = scale * np.sqrt(np.sum((g / safe[:, None]) ** 2, axis=1))
    factor = np.where(norms > clip_bound, clip_bound / np.where(norms > 0, norms, 1.0), 1.0)
    return g * factor[:, None]
