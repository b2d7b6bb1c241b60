"""Sequence transformer mapping (noisy target, step, condition) to a clean target.

The same network serves as the bidirectional diffusion denoiser and, with
causal attention, as the autoregressive baseline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import torch
from torch import nn
import torch.nn.functional as F


@dataclass
class DenoiserConfig:
    num_layers: int = 2
    token_dim: int = 64
    ffn_dim: int = 128
    num_heads: int = 4
    max_len: int = 32
    attention_mode: str = "bidirectional"
    d_v: int = 8
    d_a: int = 8

    def __post_init__(self):
        if self.token_dim % self.num_heads:
            raise ValueError(f"token_dim={self.token_dim} not divisible by num_heads={self.num_heads}")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")
        if self.attention_mode not in ("bidirectional", "causal"):
            raise ValueError(f"unknown attention_mode {self.attention_mode!r}")
        if self.token_dim % 2:
            raise ValueError("token_dim must be even for the sinusoidal time encoding")

    @classmethod
    def desk(cls, **overrides) -> "DenoiserConfig":
        return cls(**overrides)

    @classmethod
    def full_scale(cls, **overrides) -> "DenoiserConfig":
        # the text says 8 layers, the implementation notes 6; we take 6
        base = dict(num_layers=6, token_dim=512, ffn_dim=1024, num_heads=8, max_len=128)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)


def param_count(cfg: DenoiserConfig) -> int:
    """Closed-form parameter count of :class:`Denoiser` for ``cfg``."""
    D, Fd, dv, da = cfg.token_dim, cfg.ffn_dim, cfg.d_v, cfg.d_a
    count = (dv + da) * D + D          # input projection
    count += cfg.max_len * D           # positional embeddings
    count += D * da + da               # time projection
    count += da                        # null condition
    per_layer = 2 * D                  # ln1
    per_layer += 3 * D * D + 3 * D     # qkv
    per_layer += D * D + D             # attention out
    per_layer += 2 * D                 # ln2
    per_layer += D * Fd + Fd + Fd * D + D
    count += cfg.num_layers * per_layer
    count += 2 * D                     # final norm
    count += D * dv + dv               # output projection
    if cfg.attention_mode == "causal":
        count += dv                    # start token for teacher forcing
    return count


def sinusoidal(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sin/cos encoding of integer steps ``t`` (shape (B,)) into (B, dim).

    First half holds cosines, second half sines, so ``t=0`` gives ones then zeros.
    """
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    ang = t.to(torch.float64)[:, None] * freqs[None, :]
    return torch.cat([ang.cos(), ang.sin()], dim=-1)


class Block(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        D = cfg.token_dim
        self.num_heads = cfg.num_heads
        self.causal = cfg.attention_mode == "causal"
        self.ln1 = nn.LayerNorm(D)
        self.qkv = nn.Linear(D, 3 * D)
        self.proj = nn.Linear(D, D)
        self.ln2 = nn.LayerNorm(D)
        self.fc1 = nn.Linear(D, cfg.ffn_dim)
        self.fc2 = nn.Linear(cfg.ffn_dim, D)

    def attention(self, x: torch.Tensor) -> torch.Tensor:
        B, L, D = x.shape
        H = self.num_heads
        q, k, v = self.qkv(x).view(B, L, 3, H, D // H).permute(2, 0, 3, 1, 4)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(D // H)
        if self.causal:
            mask = torch.ones(L, L, dtype=torch.bool, device=x.device).triu(1)
            att = att.masked_fill(mask, float("-inf"))
        att = att.softmax(dim=-1)
        out = (att @ v).transpose(1, 2).reshape(B, L, D)
        return self.proj(out)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attention(self.ln1(x))
        x = x + self.fc2(F.gelu(self.fc1(self.ln2(x))))
        return x


class Denoiser(nn.Module):
    """x0-predicting transformer.

    Per frame ``i`` the token is ``W [cond_i + time_emb ; n_t_i] + pos_i``; the time
    embedding is projected to the condition width so the two can be summed.
    """

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        D = cfg.token_dim
        self.in_proj = nn.Linear(cfg.d_a + cfg.d_v, D)
        self.pos_emb = nn.Parameter(torch.zeros(cfg.max_len, D))
        self.time_proj = nn.Linear(D, cfg.d_a)
        self.null_cond = nn.Parameter(torch.zeros(cfg.d_a))
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.num_layers))
        self.ln_f = nn.LayerNorm(D)
        self.out_proj = nn.Linear(D, cfg.d_v)
        if cfg.attention_mode == "causal":
            self.start_token = nn.Parameter(torch.zeros(cfg.d_v))

    @property
    def causal(self) -> bool:
        return self.cfg.attention_mode == "causal"

    def embed_time(self, t) -> torch.Tensor:
        """Time embedding of shape (B, d_a) for integer steps ``t`` (int or (B,) tensor)."""
        t = torch.as_tensor(t).reshape(-1)
        if (t < 0).any():
            raise ValueError("time step must be >= 0")
        base = sinusoidal(t, self.cfg.token_dim).to(self.time_proj.weight.dtype)
        return self.time_proj(base)

    def forward(self, n_t: torch.Tensor, t, cond: torch.Tensor | None = None,
                drop: torch.Tensor | None = None) -> torch.Tensor:
        """Predict n^0 for ``n_t`` of shape (B, L, d_v) or (L, d_v).

        ``t`` is an int, a (B,) tensor, or a (B, L) tensor of per-frame steps; a
        frame at step 0 is read as already clean.

        ``cond=None`` uses the learned null condition for every sequence; ``drop``
        (bool, shape (B,)) swaps it in for selected sequences only.
        """
        squeeze = n_t.ndim == 2
        if squeeze:
            n_t = n_t[None]
            cond = None if cond is None else cond[None]
        B, L, _ = n_t.shape
        if L > self.cfg.max_len:
            raise ValueError(f"sequence length {L} exceeds max_len {self.cfg.max_len}")
        null = self.null_cond.expand(B, L, -1)
        if cond is None:
            c = null
        else:
            if cond.shape[:2] != (B, L):
                raise ValueError(f"condition shape {tuple(cond.shape)} does not match target {(B, L)}")
            c = cond.to(n_t.dtype)
            if drop is not None:
                c = torch.where(drop.reshape(B, 1, 1), null, c)
        t = torch.as_tensor(t, device=n_t.device)
        if t.ndim == 2:
            if t.shape != (B, L):
                raise ValueError(f"per-frame steps {tuple(t.shape)} do not match {(B, L)}")
            temb = self.embed_time(t.reshape(-1)).reshape(B, L, -1)
        else:
            temb = self.embed_time(t.expand(B) if t.ndim == 0 else t.reshape(B))[:, None, :]
        c = c + temb
        x = self.in_proj(torch.cat([c, n_t], dim=-1)) + self.pos_emb[:L]
        for blk in self.blocks:
            x = blk(x)
        out = self.out_proj(self.ln_f(x))
        return out[0] if squeeze else out


def init_params(model: Denoiser, gen: torch.Generator) -> Denoiser:
    """Scaled-Gaussian init (std 1/sqrt(fan_in)) drawn from ``gen``; norms start at identity."""
    norms = {id(m.weight) for m in model.modules() if isinstance(m, nn.LayerNorm)}
    with torch.no_grad():
        for name, p in model.named_parameters():
            if id(p) in norms:
                p.fill_(1.0)
            elif name.endswith("bias"):
                p.zero_()
            else:
                # Linear weights are (out, in), so the last axis is fan-in
                p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) / math.sqrt(p.shape[-1]))
    return model


def build_denoiser(cfg: DenoiserConfig, seed: int, dtype=torch.float32) -> Denoiser:
    gen = torch.Generator().manual_seed(int(seed))
    model = Denoiser(cfg).to(dtype)
    return init_params(model, gen)
