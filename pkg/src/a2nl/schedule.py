"""Noise schedules and the closed-form forward (noising) process."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal-retention coefficients ``alpha_bar[0..T]``.

    ``alpha_bar[0]`` is exactly 1; everything else is derived from it on demand.
    """

    T: int
    alpha_bar: np.ndarray

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if ab.shape != (self.T + 1,):
            raise ValueError(f"alpha_bar must have length T+1={self.T + 1}, got {ab.shape}")
        if ab[0] != 1.0:
            raise ValueError("alpha_bar[0] must be exactly 1")
        if not np.all(np.diff(ab) < 0) or ab[-1] <= 0:
            raise ValueError("alpha_bar must be strictly decreasing and positive")
        ab.setflags(write=False)
        object.__setattr__(self, "alpha_bar", ab)

    @property
    def alphas(self) -> np.ndarray:
        """Per-step alpha_t for t=1..T (index 0 corresponds to t=1)."""
        return self.alpha_bar[1:] / self.alpha_bar[:-1]

    @property
    def betas(self) -> np.ndarray:
        return 1.0 - self.alphas

    def posterior_variance(self, t: int, t_prev: int | None = None) -> float:
        """Variance of q(n^{t_prev} | n^t, n^0); ``t_prev`` defaults to t-1."""
        t_prev = t - 1 if t_prev is None else t_prev
        ab_t, ab_prev = self.alpha_bar[t], self.alpha_bar[t_prev]
        beta = 1.0 - ab_t / ab_prev
        return float(beta * (1.0 - ab_prev) / (1.0 - ab_t))

    def posterior_coefs(self, t: int, t_prev: int | None = None) -> tuple[float, float, float]:
        """(coef_x0, coef_xt, variance) of the DDPM posterior between ``t`` and ``t_prev``."""
        t_prev = t - 1 if t_prev is None else t_prev
        if not 0 <= t_prev < t <= self.T:
            raise ValueError(f"need 0 <= t_prev < t <= T, got t={t}, t_prev={t_prev}")
        ab_t, ab_prev = self.alpha_bar[t], self.alpha_bar[t_prev]
        alpha = ab_t / ab_prev
        beta = 1.0 - alpha
        c0 = math.sqrt(ab_prev) * beta / (1.0 - ab_t)
        ct = math.sqrt(alpha) * (1.0 - ab_prev) / (1.0 - ab_t)
        var = beta * (1.0 - ab_prev) / (1.0 - ab_t)
        return float(c0), float(ct), float(var)


def build_schedule(kind: str = "linear", T: int = 1000) -> NoiseSchedule:
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    T = int(T)
    if kind == "linear":
        betas = np.linspace(1e-4, 0.02, T, dtype=np.float64) if T > 1 else np.array([1e-4])
        alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    elif kind == "cosine":
        # Nichol & Dhariwal cosine schedule with the usual 0.999 beta cap
        s = 0.008
        f = np.cos((np.arange(T + 1, dtype=np.float64) / T + s) / (1 + s) * math.pi / 2) ** 2
        betas = np.clip(1.0 - f[1:] / f[:-1], 1e-8, 0.999)
        alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    return NoiseSchedule(T=T, alpha_bar=alpha_bar)


def forward_sample(n0, t, noise, sched: NoiseSchedule):
    """Draw n^t ~ q(n^t | n^0) given explicit standard-normal ``noise``.

    ``t`` may be an int or a per-sequence integer tensor of shape (B,), in which
    case ``n0`` has shape (B, ...). Works on numpy arrays, torch tensors and floats.
    """
    if np.shape(noise) != np.shape(n0):
        raise ValueError(f"noise shape {np.shape(noise)} != n0 shape {np.shape(n0)}")
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        if int(t.min()) < 1 or int(t.max()) > sched.T:
            raise ValueError(f"t out of range [1, {sched.T}]")
        ab = torch.tensor(sched.alpha_bar, dtype=n0.dtype, device=n0.device)[t.long()]
        ab = ab.reshape(-1, *([1] * (n0.ndim - 1)))
        return ab.sqrt() * n0 + (1.0 - ab).sqrt() * noise
    t = int(t)
    if not 1 <= t <= sched.T:
        raise ValueError(f"t={t} out of range [1, {sched.T}]")
    ab = float(sched.alpha_bar[t])
    return math.sqrt(ab) * n0 + math.sqrt(1.0 - ab) * noise
