"""Run configuration as flat ``section.key = value`` text with a stable digest."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field, fields, replace

from .denoiser import DenoiserConfig
from .prior import TrainConfig
from .world import WorldConfig


class ConfigError(ValueError):
    pass


@dataclass
class ScheduleConfig:
    kind: str = "linear"
    T: int = 1000


@dataclass
class SamplerSettings:
    guidance: float = 1.5
    steps: int = 1000
    clip_x0: float = 0.0   # 0 disables clamping
    edit_mode: str = "auto"  # auto | hint | replace; auto follows train.mask_training


@dataclass
class DataSettings:
    n_train: int = 4000


@dataclass
class EvalSettings:
    n_test: int = 200
    conditions: int = 4     # conditions used for multimodality
    runs: int = 10          # generations per condition
    paired: bool = True


@dataclass
class RunConfig:
    seed: int = 0
    prior: str = "diffusion"
    world: WorldConfig = field(default_factory=WorldConfig)
    model: DenoiserConfig = field(default_factory=DenoiserConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(steps=20000, lr=1e-3, lr_decay="cosine"))
    sampler: SamplerSettings = field(default_factory=SamplerSettings)
    data: DataSettings = field(default_factory=DataSettings)
    eval: EvalSettings = field(default_factory=EvalSettings)

    def __post_init__(self):
        if self.prior not in ("diffusion", "ar"):
            raise ConfigError(f"prior must be 'diffusion' or 'ar', got {self.prior!r}")
        if (self.model.d_a, self.model.d_v) != (self.world.d_a, self.world.d_v):
            raise ConfigError("model.d_a/d_v must match world.d_a/d_v")
        if self.world.L > self.model.max_len:
            raise ConfigError("world.L exceeds model.max_len")
        if self.sampler.edit_mode not in ("auto", "hint", "replace"):
            raise ConfigError(f"sampler.edit_mode must be auto, hint or replace, got {self.sampler.edit_mode!r}")

    @property
    def edit_hint(self) -> bool:
        """Whether sampling-time edits feed clean values to the network."""
        if self.sampler.edit_mode == "auto":
            return self.train.mask_training
        return self.sampler.edit_mode == "hint"

    def to_text(self) -> str:
        return format_config(self)

    def digest(self) -> str:
        return config_hash(self)


SECTIONS = ("world", "model", "schedule", "train", "sampler", "data", "eval")


def _flatten(cfg: RunConfig) -> dict[str, object]:
    out: dict[str, object] = {"seed": cfg.seed, "prior": cfg.prior}
    for sec in SECTIONS:
        obj = getattr(cfg, sec)
        for f in fields(obj):
            out[f"{sec}.{f.name}"] = getattr(obj, f.name)
    return out


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def format_config(cfg: RunConfig) -> str:
    """Canonical text: one ``key = value`` per line, keys sorted."""
    flat = _flatten(cfg)
    return "".join(f"{k} = {_fmt(flat[k])}\n" for k in sorted(flat))


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(format_config(cfg).encode("utf-8")).hexdigest()[:16]


def _coerce(key: str, raw: str, like):
    raw = raw.strip()
    try:
        if isinstance(like, bool):
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Apply ``key = value`` lines on top of ``base`` (desk defaults when omitted).

    ``#`` starts a comment; unknown keys are rejected with their name.
    """
    base = base or RunConfig()
    flat = _flatten(base)
    updates: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in flat:
            raise ConfigError(f"unknown config key: {key}")
        updates[key] = _coerce(key, raw, flat[key])
    return apply_overrides(base, updates)


def apply_overrides(base: RunConfig, updates: dict[str, object]) -> RunConfig:
    flat = _flatten(base)
    for key in updates:
        if key not in flat:
            raise ConfigError(f"unknown config key: {key}")
    # an int given for a float field must hash like the float it is
    updates = {k: float(v) if isinstance(flat[k], float) and type(v) is int else v for k, v in updates.items()}
    top = {k: v for k, v in updates.items() if "." not in k}
    secs = {}
    for sec in SECTIONS:
        sub = {k.split(".", 1)[1]: v for k, v in updates.items() if k.startswith(sec + ".")}
        if sub:
            try:
                secs[sec] = replace(getattr(base, sec), **sub)
            except ValueError as e:
                raise ConfigError(f"invalid {sec} settings: {e}") from None
    try:
        return replace(base, **top, **secs)
    except ValueError as e:
        raise ConfigError(str(e)) from None


def full_scale() -> RunConfig:
    """Sizes reported for the full-scale model; far beyond desk budgets."""
    cfg = RunConfig()
    return apply_overrides(cfg, {
        "world.L": 128, "model.num_layers": 6, "model.token_dim": 512, "model.ffn_dim": 1024,
        "model.num_heads": 8, "model.max_len": 128, "train.batch_size": 64,
        "train.steps": 50000, "train.lr": 1e-4, "train.lr_decay": "none",
    })


def to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)
