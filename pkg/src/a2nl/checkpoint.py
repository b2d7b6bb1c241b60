"""Model + optimizer state persisted through the A2NL container."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from . import io
from .config import RunConfig, parse_config
from .denoiser import Denoiser, build_denoiser


@dataclass
class Checkpoint:
    config: RunConfig
    model: Denoiser
    optimizer: torch.optim.Optimizer
    step: int


def new_training_state(cfg: RunConfig) -> Checkpoint:
    from .seeding import derive_seed

    model = build_denoiser(cfg.model, derive_seed(cfg.seed, "init"))
    opt = torch.optim.Adam(model.parameters(), lr=cfg.train.lr)
    return Checkpoint(cfg, model, opt, 0)


def state_arrays(ckpt: Checkpoint) -> dict[str, np.ndarray]:
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in ckpt.model.state_dict().items()}
    names = [n for n, _ in ckpt.model.named_parameters()]
    state = ckpt.optimizer.state_dict()["state"]
    for idx, name in enumerate(names):
        if idx in state:
            for key in ("exp_avg", "exp_avg_sq", "step"):
                arrays[f"adam/{name}/{key}"] = torch.as_tensor(state[idx][key]).detach().cpu().numpy()
    return arrays


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    cfg = ckpt.config
    meta = {"kind": "checkpoint", "prior": cfg.prior, "step": ckpt.step, "seed": cfg.seed,
            "config_hash": cfg.digest()}
    io.save_container(path, state_arrays(ckpt), cfg.to_text(), meta)


def load_checkpoint(path) -> Checkpoint:
    arrays, text, meta = io.load_container(path)
    if meta.get("kind") != "checkpoint":
        raise io.FormatError(f"{path}: not a checkpoint")
    cfg = parse_config(text)
    ckpt = new_training_state(cfg)
    sd = {k[len("param/"):]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("param/")}
    ckpt.model.load_state_dict(sd, strict=True)
    names = [n for n, _ in ckpt.model.named_parameters()]
    opt_state = {}
    for idx, name in enumerate(names):
        key = f"adam/{name}/exp_avg"
        if key in arrays:
            opt_state[idx] = {
                "step": torch.tensor(arrays[f"adam/{name}/step"].item()),
                "exp_avg": torch.from_numpy(arrays[key]),
                "exp_avg_sq": torch.from_numpy(arrays[f"adam/{name}/exp_avg_sq"]),
            }
    sd_opt = ckpt.optimizer.state_dict()
    ckpt.optimizer.load_state_dict({"state": opt_state, "param_groups": sd_opt["param_groups"]})
    ckpt.step = int(meta.get("step", 0))
    return ckpt
