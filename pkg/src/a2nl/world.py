"""Synthetic oracle world with a known multi-modal conditional law.

Targets follow ``gain_m * A tanh(B cond_i) + c_m + noise_i`` where the mode ``m`` is
drawn per sequence and hidden from models. Modes differ in offset and in gain.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from functools import lru_cache

import numpy as np

from .seeding import np_rng


@dataclass(frozen=True)
class WorldConfig:
    seed: int = 0
    L: int = 32
    d_a: int = 8
    d_v: int = 8
    M: int = 2
    smooth: float = 4.0          # condition smoothing half-life, in frames
    noise_sigma: float = 0.25
    noise_halflife: float = 4.0  # AR(1) half-life in frames; 0 gives white noise
    mode_sep: float = 2.0        # distance between neighbouring mode offsets
    gain_step: float = 0.25      # mode m scales the smooth part by 1 + m * gain_step

    def __post_init__(self):
        if self.M < 1:
            raise ValueError("M must be >= 1")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.L < 1 or self.d_a < 1 or self.d_v < 1:
            raise ValueError("L, d_a and d_v must be positive")
        if self.M > 1 and self.mode_sep < 4 * self.noise_sigma:
            raise ValueError("mode offsets must be at least 4 * noise_sigma apart")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SamplePair:
    cond: np.ndarray
    target: np.ndarray
    mode: int


@dataclass(frozen=True)
class WorldParams:
    A: np.ndarray
    B: np.ndarray
    offsets: np.ndarray  # (M, d_v)
    gains: np.ndarray    # (M,)


@lru_cache(maxsize=32)
def world_params(cfg: WorldConfig) -> WorldParams:
    rng = np_rng(cfg.seed, "world", "params")
    B = rng.standard_normal((cfg.d_a, cfg.d_a)) / math.sqrt(cfg.d_a)
    A = rng.standard_normal((cfg.d_v, cfg.d_a)) * (1.5 / math.sqrt(cfg.d_a))
    u = rng.standard_normal(cfg.d_v)
    u /= np.linalg.norm(u)
    steps = np.arange(cfg.M) - (cfg.M - 1) / 2
    offsets = cfg.mode_sep * steps[:, None] * u[None, :]
    gains = 1.0 + cfg.gain_step * np.arange(cfg.M)
    return WorldParams(A=A, B=B, offsets=offsets, gains=gains)


def _ar1(rng: np.random.Generator, L: int, d: int, halflife: float) -> np.ndarray:
    """Stationary unit-variance AR(1) sequence with the given half-life."""
    if math.isinf(halflife):
        return np.repeat(rng.standard_normal((1, d)), L, axis=0)
    rho = 0.5 ** (1.0 / halflife) if halflife > 0 else 0.0
    eps = rng.standard_normal((L, d))
    out = np.empty((L, d))
    out[0] = eps[0]
    k = math.sqrt(1.0 - rho * rho)
    for i in range(1, L):
        out[i] = rho * out[i - 1] + k * eps[i]
    return out


def gen_condition(rng: np.random.Generator, L: int, d_a: int, smooth: float = 4.0) -> np.ndarray:
    """Exponentially smoothed Gaussian walk with stationary per-dim variance 1."""
    if L < 1:
        raise ValueError("L must be >= 1")
    return _ar1(rng, L, d_a, smooth)


def mode_mean(cond: np.ndarray, mode: int, cfg: WorldConfig) -> np.ndarray:
    """Noise-free target for ``cond`` under ``mode``."""
    p = world_params(cfg)
    return p.gains[mode] * np.tanh(cond @ p.B.T) @ p.A.T + p.offsets[mode]


def long_condition_segments(cfg: WorldConfig, n_seq: int, n_seg: int, stream: str = "long") -> list[np.ndarray]:
    """Continuous conditions of ``n_seg * (L - 1) + 1`` frames cut into ``n_seg`` windows of ``L``.

    Neighbouring windows share one frame, matching how stitched generation pins the
    first frame of each segment to the last frame of the previous one.
    """
    if n_seq < 1 or n_seg < 1:
        raise ValueError("n_seq and n_seg must be >= 1")
    L = cfg.L
    total = n_seg * (L - 1) + 1
    full = np.stack([gen_condition(np_rng(cfg.seed, stream, i), total, cfg.d_a, cfg.smooth)
                     for i in range(n_seq)]).astype(np.float32)
    return [full[:, k * (L - 1): k * (L - 1) + L] for k in range(n_seg)]


def gen_target(cond: np.ndarray, mode: int, rng: np.random.Generator, cfg: WorldConfig) -> np.ndarray:
    if not 0 <= mode < cfg.M:
        raise ValueError(f"mode {mode} outside [0, {cfg.M})")
    mean = mode_mean(cond, mode, cfg)
    if cfg.noise_sigma == 0:
        return mean
    return mean + cfg.noise_sigma * _ar1(rng, cond.shape[0], cfg.d_v, cfg.noise_halflife)


def gen_pair(cfg: WorldConfig, *labels) -> SamplePair:
    rng = np_rng(cfg.seed, *labels)
    mode = int(rng.integers(cfg.M))
    cond = gen_condition(rng, cfg.L, cfg.d_a, cfg.smooth)
    target = gen_target(cond, mode, rng, cfg)
    return SamplePair(cond=cond.astype(np.float32), target=target.astype(np.float32), mode=mode)


def gen_dataset(cfg: WorldConfig, count: int, split: str = "train") -> list[SamplePair]:
    """``count`` pairs with uniformly drawn modes; pair ``i`` depends only on (seed, split, i)."""
    if count < 1:
        raise ValueError("count must be >= 1")
    return [gen_pair(cfg, "data", split, i) for i in range(count)]


def classify_mode(cond: np.ndarray, target: np.ndarray, cfg: WorldConfig) -> int:
    """Nearest-mode classifier: the mode whose noise-free target is closest."""
    cond = np.asarray(cond, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    dists = [np.mean((target - mode_mean(cond, m, cfg)) ** 2) for m in range(cfg.M)]
    return int(np.argmin(dists))


def oracle_var(cfg: WorldConfig, n_mc: int = 1000, stream: str = "oracle_var") -> float:
    """Var metric of freshly generated ground truth: the value models should approach.

    ``stream`` names the Monte Carlo draw; the world itself is fixed by ``cfg.seed``.
    """
    from .metrics import variance_metric

    if n_mc < 100:
        raise ValueError("n_mc must be >= 100")
    targets = [gen_pair(cfg, stream, i).target.astype(np.float64) for i in range(n_mc)]
    return variance_metric(targets)


def random_mixing(rng: np.random.Generator, d: int, cond_max: float = 4.0) -> np.ndarray:
    """Well-conditioned invertible mixing matrix (orthogonal times a bounded diagonal)."""
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    q = q * np.sign(np.diag(r))
    scales = np.exp(rng.uniform(-0.5, 0.5, d) * math.log(cond_max))
    return q @ np.diag(scales)


def gen_mixed_visual(lip_factor: np.ndarray, nonlip_factor: np.ndarray, mixing: np.ndarray) -> np.ndarray:
    """``mixing @ concat(lip, nonlip)``; factors may be batched along the leading axis."""
    z = np.concatenate([lip_factor, nonlip_factor], axis=-1)
    if mixing.shape != (z.shape[-1], z.shape[-1]):
        raise ValueError(f"mixing shape {mixing.shape} does not match factor width {z.shape[-1]}")
    return z @ mixing.T
