"""Losses that split a visual feature into lip and non-lip parts.

Symmetric contrastive alignment pulls the lip head towards the audio lip feature;
a memory-bank Pearson penalty decorrelates the non-lip head from it.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import torch
from torch import nn
import torch.nn.functional as F

PEARSON_EPS = 1e-8


class ProjectionHeads(nn.Module):
    """Two-layer perceptrons mapping a visual feature to lip and non-lip features."""

    def __init__(self, d_visual: int = 16, d_l: int = 8, d_nl: int = 8, hidden: int | None = None):
        super().__init__()
        hidden = hidden or 2 * d_visual
        self.head_l = nn.Sequential(nn.Linear(d_visual, hidden), nn.GELU(), nn.Linear(hidden, d_l))
        self.head_nl = nn.Sequential(nn.Linear(d_visual, hidden), nn.GELU(), nn.Linear(hidden, d_nl))

    def forward(self, v: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self.head_l(v), self.head_nl(v)


class MemoryBank:
    """Ring buffer of the last ``K - 1`` detached batches; oldest evicted first."""

    def __init__(self, K: int = 32):
        if K < 1:
            raise ValueError("K must be >= 1")
        self.K = K
        self._nl: deque = deque(maxlen=max(K - 1, 0))
        self._l: deque = deque(maxlen=max(K - 1, 0))

    def __len__(self) -> int:
        return len(self._nl)

    def push(self, f_nl: torch.Tensor, f_l: torch.Tensor) -> None:
        if self.K > 1:
            self._nl.append(f_nl.detach().clone())
            self._l.append(f_l.detach().clone())

    def contents(self) -> tuple[list[torch.Tensor], list[torch.Tensor]]:
        return list(self._nl), list(self._l)


@dataclass
class LossWeights:
    ol: float = 1.0
    gaze: float = 1.0
    L1: float = 1.0
    GAN: float = 1.0
    VGG: float = 1.0

    def __post_init__(self):
        for k, v in vars(self).items():
            if v < 0:
                raise ValueError(f"weight {k} must be non-negative")


def _normalize(x: torch.Tensor) -> torch.Tensor:
    norms = x.norm(dim=-1, keepdim=True)
    if (norms == 0).any():
        raise ValueError("zero-norm row cannot be normalized")
    return x / norms


def contrastive_loss(m: torch.Tensor, n: torch.Tensor, temperature: float | torch.Tensor = 0.07) -> torch.Tensor:
    """InfoNCE of rows of ``m`` against rows of ``n`` (matching index = positive)."""
    if m.ndim != 2 or m.shape != n.shape or m.shape[0] < 1:
        raise ValueError(f"expected matching (N, d) batches, got {tuple(m.shape)} and {tuple(n.shape)}")
    logits = _normalize(m) @ _normalize(n).T / temperature
    target = torch.arange(m.shape[0])
    return F.cross_entropy(logits, target)


def symmetric_contrastive(f_a: torch.Tensor, f_v: torch.Tensor, temperature=0.07) -> torch.Tensor:
    return 0.5 * (contrastive_loss(f_a, f_v, temperature) + contrastive_loss(f_v, f_a, temperature))


def pearson_matrix(X: torch.Tensor, Y: torch.Tensor, eps: float = PEARSON_EPS) -> torch.Tensor:
    """Cross-correlation matrix (d_x, d_y) between columns of ``X`` and ``Y`` (S samples each)."""
    if X.shape[0] != Y.shape[0]:
        raise ValueError("X and Y need the same number of samples")
    S = X.shape[0]
    if S < 2:
        raise ValueError("need at least 2 samples")
    Xc = X - X.mean(dim=0)
    Yc = Y - Y.mean(dim=0)
    cov = Xc.T @ Yc / (S - 1)
    sx = (Xc.pow(2).sum(dim=0) / (S - 1)).sqrt()
    sy = (Yc.pow(2).sum(dim=0) / (S - 1)).sqrt()
    return cov / (sx[:, None] * sy[None, :] + eps)


def orthogonal_loss(f_nl: torch.Tensor, f_l: torch.Tensor, bank: MemoryBank | None = None) -> torch.Tensor:
    """Sum of squared Pearson correlations divided by the non-lip width.

    The current batch is joined with the (detached) bank contents, then pushed into it.
    """
    nl_hist, l_hist = bank.contents() if bank is not None else ([], [])
    X = torch.cat([f_nl] + nl_hist, dim=0)
    Y = torch.cat([f_l] + l_hist, dim=0)
    if X.shape[0] < 2:
        raise ValueError("need at least 2 samples in batch plus bank")
    P = pearson_matrix(X, Y)
    loss = P.pow(2).sum() / f_nl.shape[1]
    if bank is not None:
        bank.push(f_nl, f_l)
    return loss


def feature_l1(feat_gt: torch.Tensor, feat_gen: torch.Tensor) -> torch.Tensor:
    """L1 distance between features from any pluggable extractor."""
    if feat_gt.shape != feat_gen.shape:
        raise ValueError(f"shape mismatch {tuple(feat_gt.shape)} vs {tuple(feat_gen.shape)}")
    return (feat_gt - feat_gen).abs().sum()


def combine_weighted(terms: dict, weights: LossWeights):
    """Weighted sum of named loss terms; names are the ``LossWeights`` fields."""
    known = vars(weights)
    total = 0.0
    for name, value in terms.items():
        if name not in known:
            raise ValueError(f"unknown loss term {name!r}")
        total = total + known[name] * value
    return total


class LogitTemperature(nn.Module):
    """Learnable temperature stored as a log inverse scale, initialised to 0.07."""

    def __init__(self, init: float = 0.07):
        super().__init__()
        self.log_scale = nn.Parameter(torch.tensor(math.log(1.0 / init)))

    def forward(self) -> torch.Tensor:
        return torch.exp(-self.log_scale)
