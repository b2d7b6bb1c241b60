"""Diffusion prior: training objectives, guided sampling, mask editing, stitching.

Also holds the causal autoregressive baseline, which shares the denoiser network.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .schedule import NoiseSchedule, forward_sample

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """Raised when a training loss becomes non-finite."""

    def __init__(self, step: int | None, value: float):
        self.step = step
        msg = f"non-finite loss {value}" + (f" at step {step}" if step is not None else "")
        super().__init__(msg)


@dataclass
class TrainBatch:
    n0: torch.Tensor                   # (B, L, d_v)
    cond: torch.Tensor                 # (B, L, d_a)
    mask: torch.Tensor | None = None   # (B, L) bool, True = ground truth revealed

    def __post_init__(self):
        if self.n0.ndim != 3 or self.n0.shape[0] == 0:
            raise ValueError("empty or malformed batch")
        if self.cond.shape[:2] != self.n0.shape[:2]:
            raise ValueError("n0 and cond disagree on batch size or length")
        if self.mask is not None and self.mask.shape != self.n0.shape[:2]:
            raise ValueError("mask must have shape (B, L)")


@dataclass
class TrainConfig:
    batch_size: int = 32
    steps: int = 5000
    lr: float = 1e-4
    cond_drop: float = 0.10
    hint_prob: float = 0.10
    velocity: bool = True
    mask_training: bool = True
    lr_decay: str = "none"   # none | cosine (to zero at ``steps``)

    def __post_init__(self):
        if self.lr_decay not in ("none", "cosine"):
            raise ValueError(f"unknown lr_decay {self.lr_decay!r}")

    def lr_at(self, step: int) -> float:
        if self.lr_decay == "cosine":
            return self.lr * 0.5 * (1 + math.cos(math.pi * min(step, self.steps) / self.steps))
        return self.lr


@dataclass
class MaskEdit:
    """Frames to pin during sampling.

    ``values`` has shape (k, d_v) or (B, k, d_v). ``hint=True`` feeds the clean values
    to the network at every step (what mask-editing training teaches); ``hint=False``
    replaces them with forward-noised copies only, i.e. editing at sampling time alone.
    """

    frames: Sequence[int]
    values: torch.Tensor
    hint: bool = True


@dataclass
class SamplerConfig:
    guidance: float = 1.5
    steps: int | None = None
    clip_x0: float | None = None
    mask_editing: MaskEdit | None = None

    def __post_init__(self):
        if self.guidance < 0:
            raise ValueError("guidance scale must be >= 0")
        if self.steps is not None and self.steps < 1:
            raise ValueError("steps must be >= 1")


# --- training objectives -------------------------------------------------------------

def sample_mask(gen: torch.Generator, B: int, L: int, p: float) -> torch.Tensor:
    """I.i.d. Bernoulli(p) reveal flags per frame."""
    return torch.rand(B, L, generator=gen) < p


def diffusion_losses(model: Callable, batch: TrainBatch, sched: NoiseSchedule, gen: torch.Generator,
                     cond_drop: float = 0.10) -> tuple[torch.Tensor, torch.Tensor]:
    """Returns (L_simple, prediction) for one noised draw of ``batch``.

    Draw order from ``gen``: steps, noise, dropout flags.
    """
    n0, cond = batch.n0, batch.cond
    B = n0.shape[0]
    t = torch.randint(1, sched.T + 1, (B,), generator=gen)
    noise = torch.randn(n0.shape, generator=gen, dtype=n0.dtype)
    drop = torch.rand(B, generator=gen) < cond_drop
    n_t = forward_sample(n0, t, noise, sched)
    if batch.mask is not None:
        n_t = torch.where(batch.mask[..., None], n0, n_t)
        # revealed frames are tagged with step 0 so the network can tell them apart
        t = torch.where(batch.mask, 0, t[:, None])
    pred = model(n_t, t, cond, drop)
    return ((pred - n0) ** 2).mean(), pred


def loss_simple(model: Callable, batch: TrainBatch, sched: NoiseSchedule, gen: torch.Generator,
                cond_drop: float = 0.10) -> torch.Tensor:
    return diffusion_losses(model, batch, sched, gen, cond_drop)[0]


def loss_velocity(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Mean over the batch of the per-sequence average L2 mismatch of frame deltas."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(gt.shape)}")
    if pred.shape[-2] < 2:
        raise ValueError("velocity loss needs L >= 2")
    d = torch.diff(pred, dim=-2) - torch.diff(gt, dim=-2)
    return torch.linalg.vector_norm(d, dim=-1).mean()


def a2nl_loss(model: Callable, batch: TrainBatch, sched: NoiseSchedule, gen: torch.Generator,
              cfg: TrainConfig) -> torch.Tensor:
    simple, pred = diffusion_losses(model, batch, sched, gen, cfg.cond_drop)
    if cfg.velocity:
        return simple + loss_velocity(pred, batch.n0)
    return simple


def _finite_or_raise(loss: torch.Tensor, step: int | None) -> None:
    if not torch.isfinite(loss):
        raise TrainingDiverged(step, float(loss.detach()))


def train_step(model, optimizer: torch.optim.Optimizer, batch: TrainBatch, sched: NoiseSchedule,
               gen: torch.Generator, cfg: TrainConfig, step: int | None = None) -> float:
    """One optimizer step on L_simple (+ L_vel); returns the loss at the pre-step params."""
    optimizer.zero_grad(set_to_none=True)
    loss = a2nl_loss(model, batch, sched, gen, cfg)
    _finite_or_raise(loss, step)
    loss.backward()
    optimizer.step()
    return float(loss.detach())


# --- autoregressive baseline ---------------------------------------------------------

def _require_causal(model) -> None:
    if getattr(model, "cfg", None) is None or model.cfg.attention_mode != "causal":
        raise ValueError("autoregressive prior needs a causal-attention denoiser")


def ar_inputs(model, n: torch.Tensor) -> torch.Tensor:
    """Targets shifted right by one frame behind the learned start token."""
    start = model.start_token.expand(n.shape[0], 1, -1).to(n.dtype)
    return torch.cat([start, n[:, :-1]], dim=1)


def ar_loss(model, batch: TrainBatch) -> torch.Tensor:
    _require_causal(model)
    pred = model(ar_inputs(model, batch.n0), 0, batch.cond)
    return ((pred - batch.n0) ** 2).mean()


def ar_train_step(model, optimizer: torch.optim.Optimizer, batch: TrainBatch, step: int | None = None) -> float:
    _require_causal(model)
    optimizer.zero_grad(set_to_none=True)
    loss = ar_loss(model, batch)
    _finite_or_raise(loss, step)
    loss.backward()
    optimizer.step()
    return float(loss.detach())


@torch.no_grad()
def ar_generate(model, cond: torch.Tensor) -> torch.Tensor:
    """Deterministic rollout feeding each prediction back as the next input.

    Step ``i`` runs the network on the first ``i + 1`` frames only, so a rollout on a
    truncated condition reproduces the prefix of a longer one bit for bit.
    """
    _require_causal(model)
    squeeze = cond.ndim == 2
    if squeeze:
        cond = cond[None]
    B, L, _ = cond.shape
    dtype = model.start_token.dtype
    cond = cond.to(dtype)
    inputs = model.start_token.expand(B, 1, -1).clone()
    outs = []
    for i in range(L):
        pred = model(inputs, 0, cond[:, : i + 1])
        nxt = pred[:, i : i + 1]
        outs.append(nxt)
        inputs = torch.cat([inputs, nxt], dim=1)
    out = torch.cat(outs, dim=1)
    return out[0] if squeeze else out


# --- sampling ------------------------------------------------------------------------

def guide(cond_pred, uncond_pred, s: float):
    """Classifier-free guidance: ``s * cond + (1 - s) * uncond``."""
    if np.shape(cond_pred) != np.shape(uncond_pred):
        raise ValueError("conditional and unconditional predictions differ in shape")
    return s * cond_pred + (1 - s) * uncond_pred


def timesteps(sched: NoiseSchedule, steps: int | None = None) -> list[int]:
    """Descending evenly strided step indices from T down to 1."""
    steps = sched.T if steps is None else steps
    if steps > sched.T:
        raise ValueError(f"steps={steps} exceeds T={sched.T}")
    ts = np.unique(np.round(np.linspace(1, sched.T, steps)).astype(int))[::-1]
    return [int(t) for t in ts]


def _edit_values(edit: MaskEdit, B: int, d_v: int, dtype) -> torch.Tensor:
    v = torch.as_tensor(edit.values, dtype=dtype)
    if v.ndim == 1:
        v = v[None]
    if v.ndim == 2:
        v = v.expand(B, -1, -1)
    if v.shape != (B, len(edit.frames), d_v):
        raise ValueError(f"edit values shape {tuple(v.shape)} incompatible with {len(edit.frames)} frames")
    return v


@torch.no_grad()
def sample(model, cond: torch.Tensor, sched: NoiseSchedule, cfg: SamplerConfig,
           gen: torch.Generator, d_v: int | None = None) -> torch.Tensor:
    """Guided ancestral sampling with x0-prediction and the DDPM posterior."""
    squeeze = cond.ndim == 2
    if squeeze:
        cond = cond[None]
    mcfg = getattr(model, "cfg", None)
    d_v = d_v or mcfg.d_v
    dtype = next(model.parameters()).dtype if isinstance(model, torch.nn.Module) else torch.float64
    cond = cond.to(dtype)
    B, L, _ = cond.shape
    if mcfg is not None and L > mcfg.max_len:
        raise ValueError(f"condition length {L} exceeds max_len {mcfg.max_len}")
    edit = cfg.mask_editing
    if edit is not None:
        frames = list(edit.frames)
        if any(not 0 <= f < L for f in frames):
            raise ValueError(f"edit frame out of range [0, {L})")
        values = _edit_values(edit, B, d_v, dtype)

    hinted = edit is not None and edit.hint
    if hinted:
        step_mask = torch.zeros(B, L, dtype=torch.bool)
        step_mask[:, frames] = True
    x = torch.randn((B, L, d_v), generator=gen, dtype=dtype)
    ts = timesteps(sched, cfg.steps)
    for k, t in enumerate(ts):
        t_prev = ts[k + 1] if k + 1 < len(ts) else 0
        t_in = t
        if hinted:
            x[:, frames] = values
            t_in = torch.where(step_mask, 0, t)
        c = model(x, t_in, cond)
        x0 = c if cfg.guidance == 1 else guide(c, model(x, t_in, None), cfg.guidance)
        if cfg.clip_x0 is not None:
            x0 = x0.clamp(-cfg.clip_x0, cfg.clip_x0)
        c0, ct, var = sched.posterior_coefs(t, t_prev)
        x = c0 * x0 + ct * x
        if var > 0:
            x = x + math.sqrt(var) * torch.randn(x.shape, generator=gen, dtype=dtype)
        if edit is not None:
            if t_prev > 0 and not edit.hint:
                noise = torch.randn(values.shape, generator=gen, dtype=dtype)
                x[:, frames] = forward_sample(values, t_prev, noise, sched)
            else:
                x[:, frames] = values
    return x[0] if squeeze else x


@torch.no_grad()
def generate_long(model, cond_stream: Sequence[torch.Tensor], sched: NoiseSchedule, cfg: SamplerConfig,
                  gen: torch.Generator, hint: bool = True, return_segments: bool = False):
    """Stitch segments, pinning each segment's first frame to the previous last frame.

    Boundary frames appear once in the concatenated output.
    """
    if len(cond_stream) == 0:
        raise ValueError("empty condition stream")
    segments = [sample(model, cond_stream[0], sched, cfg, gen)]
    for cond in cond_stream[1:]:
        prev_last = segments[-1][..., -1:, :]
        seg_cfg = SamplerConfig(cfg.guidance, cfg.steps, cfg.clip_x0,
                                MaskEdit(frames=[0], values=prev_last, hint=hint))
        segments.append(sample(model, cond, sched, seg_cfg, gen))
    out = torch.cat([segments[0]] + [s[..., 1:, :] for s in segments[1:]], dim=-2)
    return (out, segments) if return_segments else out


# --- training loops ------------------------------------------------------------------

def make_batch(n0: torch.Tensor, cond: torch.Tensor, gen: torch.Generator, cfg: TrainConfig,
               with_mask: bool = True) -> TrainBatch:
    idx = torch.randint(0, n0.shape[0], (cfg.batch_size,), generator=gen)
    mask = None
    if with_mask and cfg.mask_training:
        mask = sample_mask(gen, cfg.batch_size, n0.shape[1], cfg.hint_prob)
    return TrainBatch(n0=n0[idx], cond=cond[idx], mask=mask)


def fit(model, optimizer, n0: torch.Tensor, cond: torch.Tensor, cfg: TrainConfig, seed: int,
        sched: NoiseSchedule | None = None, start_step: int = 0, num_steps: int | None = None,
        on_step: Callable[[int, float], None] | None = None) -> list[float]:
    """Run the diffusion trainer (``sched`` given) or the AR trainer (``sched=None``).

    Step ``k`` draws everything from its own stream, so resuming at ``start_step``
    reproduces an uninterrupted run.
    """
    from .seeding import torch_gen

    end = cfg.steps if num_steps is None else start_step + num_steps
    losses = []
    for k in range(start_step, end):
        for group in optimizer.param_groups:
            group["lr"] = cfg.lr_at(k)
        gen = torch_gen(seed, "train", k)
        if sched is not None:
            batch = make_batch(n0, cond, gen, cfg)
            loss = train_step(model, optimizer, batch, sched, gen, cfg, step=k)
        else:
            batch = make_batch(n0, cond, gen, cfg, with_mask=False)
            loss = ar_train_step(model, optimizer, batch, step=k)
        losses.append(loss)
        if on_step is not None:
            on_step(k, loss)
    return losses
