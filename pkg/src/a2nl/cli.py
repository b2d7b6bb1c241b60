"""Command-line entry points.

    a2nl gen-data --config run.cfg --count 4000 --out train.a2ds
    a2nl train    --config run.cfg --data train.a2ds --prior diffusion --out model.ckpt
    a2nl sample   --checkpoint model.ckpt --data test.a2ds --out samples.seq [--long 4]
    a2nl edit     --checkpoint model.ckpt --data test.a2ds --frame 3 --values v.txt --out edit.seq
    a2nl evaluate --checkpoint model.ckpt --data test.a2ds --out report [--pooled]

Exit codes: 0 success, 2 validation error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import torch

from . import io, metrics
from .checkpoint import Checkpoint, load_checkpoint, new_training_state, save_checkpoint
from .config import ConfigError, RunConfig, apply_overrides, parse_config
from .prior import (MaskEdit, SamplerConfig, TrainingDiverged, ar_generate, fit, generate_long,
                    sample)
from .schedule import build_schedule
from .seeding import torch_gen
from .world import gen_dataset, long_condition_segments

log = logging.getLogger("a2nl")

EXIT_VALIDATION = 2
EXIT_RUNTIME = 3
DEFAULT_LONG_COUNT = 8


class ValidationError(ValueError):
    pass


def load_config(path: str | None, seed: int | None = None) -> RunConfig:
    text = ""
    if path:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise ValidationError(f"cannot read config {path}: {e.strerror}") from None
    cfg = parse_config(text)
    if seed is not None:
        cfg = apply_overrides(cfg, {"seed": seed})
    return cfg


def _stack(pairs, attr: str) -> torch.Tensor:
    return torch.from_numpy(np.stack([getattr(p, attr) for p in pairs]))


def _sampler(cfg: RunConfig, guidance=None, steps=None, edit=None) -> SamplerConfig:
    s = cfg.sampler
    return SamplerConfig(
        guidance=s.guidance if guidance is None else guidance,
        steps=s.steps if steps is None else steps,
        clip_x0=s.clip_x0 or None,
        mask_editing=edit,
    )


def _meta(cfg: RunConfig, kind: str, **extra) -> dict:
    return {"kind": kind, "seed": cfg.seed, "config_hash": cfg.digest(), **extra}


def write_sequences(path, seqs: np.ndarray, cfg: RunConfig, **meta) -> None:
    """Sequence container plus a per-frame CSV next to it."""
    arrays = {f"seq/{i:05d}": s for i, s in enumerate(seqs)}
    io.save_container(path, arrays, cfg.to_text(), _meta(cfg, "sequences", **meta))
    with open(Path(path).with_suffix(".csv"), "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# seed={cfg.seed} config_hash={cfg.digest()}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seq", "frame"] + [f"v{j}" for j in range(seqs.shape[-1])])
        for i, s in enumerate(seqs):
            for f, row in enumerate(np.asarray(s, dtype=np.float32)):
                w.writerow([i, f] + [repr(float(x)) for x in row])


def read_sequences(path) -> np.ndarray:
    arrays, _, meta = io.load_container(path)
    if meta.get("kind") != "sequences":
        raise io.FormatError(f"{path}: not a sequence file")
    return np.stack([arrays[k] for k in sorted(arrays)])


# --- commands ------------------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig, count: int, out, split: str = "train") -> None:
    if count < 1:
        raise ValidationError("count must be >= 1")
    pairs = gen_dataset(cfg.world, count, split)
    try:
        io.save_dataset(out, cfg.world, pairs)
    except OSError as e:
        raise OSError(f"cannot write dataset {out}: {e.strerror}") from None


def _for_prior(cfg: RunConfig, prior: str) -> RunConfig:
    mode = "causal" if prior == "ar" else "bidirectional"
    return apply_overrides(cfg, {"prior": prior, "model.attention_mode": mode})


def cmd_train(cfg: RunConfig, data, prior: str, out, resume=None, log_path=None,
              num_steps: int | None = None) -> Checkpoint:
    """Train (or resume) a prior; ``num_steps`` stops early, for staged runs."""
    world, pairs = io.load_dataset(data)
    if resume:
        ckpt = load_checkpoint(resume)
        cfg = ckpt.config
    else:
        cfg = _for_prior(cfg, prior)
        ckpt = new_training_state(cfg)
    n0, cond = _stack(pairs, "target"), _stack(pairs, "cond")
    sched = build_schedule(cfg.schedule.kind, cfg.schedule.T) if cfg.prior == "diffusion" else None
    rows = []
    t0 = time.perf_counter()

    def on_step(k, loss):
        rows.append((k, loss, time.perf_counter() - t0))
        if k % 500 == 0:
            log.info("step %d loss %.5f", k, loss)

    steps = cfg.train.steps - ckpt.step if num_steps is None else num_steps
    fit(ckpt.model, ckpt.optimizer, n0, cond, cfg.train, cfg.seed, sched,
        start_step=ckpt.step, num_steps=steps, on_step=on_step)
    ckpt.step += steps
    save_checkpoint(out, ckpt)
    if log_path:
        with open(log_path, "a" if resume else "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            if not resume:
                fh.write(f"# seed={cfg.seed} config_hash={cfg.digest()}\n")
                w.writerow(["step", "loss", "wallclock"])
            w.writerows((k, repr(l), f"{t:.3f}") for k, l, t in rows)
    return ckpt


def generate(ckpt: Checkpoint, conds: torch.Tensor, gen: torch.Generator, guidance=None, steps=None,
             edit: MaskEdit | None = None) -> torch.Tensor:
    cfg = ckpt.config
    model = ckpt.model.eval()
    if cfg.prior == "ar":
        if edit is not None:
            raise ValidationError("editing needs a diffusion prior")
        return ar_generate(model, conds)
    sched = build_schedule(cfg.schedule.kind, cfg.schedule.T)
    return sample(model, conds, sched, _sampler(cfg, guidance, steps, edit), gen)


def cmd_sample(checkpoint, data, out, count=None, guidance=None, steps=None, long_segments=None,
               seed=None) -> np.ndarray:
    ckpt = load_checkpoint(checkpoint)
    cfg = ckpt.config if seed is None else apply_overrides(ckpt.config, {"seed": seed})
    world, pairs = io.load_dataset(data)
    gen = torch_gen(cfg.seed, "sample")
    if long_segments:
        # stitching needs one continuous condition per sequence, drawn from the dataset's world
        if cfg.prior == "ar":
            raise ValidationError("stitched generation needs a diffusion prior")
        if long_segments < 1 or (count is not None and count < 1):
            raise ValidationError("--long and --count must be >= 1")
        segs = long_condition_segments(world, count or DEFAULT_LONG_COUNT, long_segments)
        sched = build_schedule(cfg.schedule.kind, cfg.schedule.T)
        seqs = generate_long(ckpt.model.eval(), [torch.from_numpy(c) for c in segs], sched,
                             _sampler(cfg, guidance, steps), gen, hint=cfg.edit_hint)
    else:
        n = count or len(pairs)
        seqs = generate(ckpt, _stack(pairs[:n], "cond"), gen, guidance, steps)
    seqs = seqs.numpy().astype(np.float32)
    write_sequences(out, seqs, cfg, checkpoint_hash=ckpt.config.digest())
    return seqs


def cmd_edit(checkpoint, data, edits: list[tuple[int, str]], out, count=None, guidance=None, steps=None,
             seed=None) -> np.ndarray:
    """Sample with frames pinned to values read from whitespace-separated text files."""
    ckpt = load_checkpoint(checkpoint)
    cfg = ckpt.config if seed is None else apply_overrides(ckpt.config, {"seed": seed})
    _, pairs = io.load_dataset(data)
    n = count or len(pairs)
    L = pairs[0].cond.shape[0]
    frames, values = [], []
    for frame, path in edits:
        if not 0 <= frame < L:
            raise ValidationError(f"frame index {frame} out of range [0, {L})")
        try:
            v = np.loadtxt(path, dtype=np.float64, ndmin=1)
        except OSError as e:
            raise ValidationError(f"cannot read values {path}: {e.strerror}") from None
        if v.shape != (cfg.model.d_v,):
            raise ValidationError(f"{path}: expected {cfg.model.d_v} values, got {v.size}")
        frames.append(frame)
        values.append(v)
    edit = MaskEdit(frames=frames, values=torch.tensor(np.stack(values)), hint=cfg.edit_hint)
    gen = torch_gen(cfg.seed, "edit")
    seqs = generate(ckpt, _stack(pairs[:n], "cond"), gen, guidance, steps, edit).numpy().astype(np.float32)
    # output is float32, so pinned frames are written as the float32 of the given values
    write_sequences(out, seqs, cfg, checkpoint_hash=ckpt.config.digest())
    return seqs


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("A2NL_THREADS", "1")))
    except ValueError:
        raise ValidationError("A2NL_THREADS must be an integer") from None


def compute_report(gen, ref, runs, paired: bool, metadata: dict) -> metrics.MetricReport:
    """Metric report with the independent metrics fanned out over A2NL_THREADS workers."""
    jobs = {
        "var": lambda: metrics.variance_metric(gen),
        "fid_fm": lambda: metrics.fid_fm(gen, ref, paired),
        "fid_delta_fm": lambda: metrics.fid_delta_fm(gen, ref, paired),
    }
    if runs is not None:
        jobs["multimodality"] = lambda: metrics.multimodality(runs)
    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        futs = {k: pool.submit(f) for k, f in jobs.items()}
        vals = {k: f.result() for k, f in futs.items()}
    rep = metrics.MetricReport(metadata=dict(metadata), **vals)
    rep.counts = {k: len(gen) for k in ("var", "fid_fm", "fid_delta_fm", "snd")}
    if runs is not None:
        rep.counts["multimodality"] = len(runs)
    return rep


def cmd_evaluate(checkpoint, data, out, paired=None, guidance=None, steps=None, gt_only=False,
                 cfg: RunConfig | None = None, seed=None) -> metrics.MetricReport:
    """Metrics of a checkpoint (or of the references themselves with ``gt_only``)."""
    _, pairs = io.load_dataset(data)
    if gt_only:
        cfg = cfg or RunConfig()
        ckpt = None
    else:
        ckpt = load_checkpoint(checkpoint)
        cfg = ckpt.config
    if seed is not None:
        cfg = apply_overrides(cfg, {"seed": seed})
    ev = cfg.eval
    paired = ev.paired if paired is None else paired
    n = min(ev.n_test, len(pairs))
    ref = [p.target.astype(np.float64) for p in pairs[:n]]
    runs = None
    if gt_only:
        gen = ref
        name = "GT"
    else:
        ckpt.config = cfg
        g = torch_gen(cfg.seed, "evaluate")
        gen = list(generate(ckpt, _stack(pairs[:n], "cond"), g, guidance, steps).numpy().astype(np.float64))
        C, R = min(ev.conditions, n), ev.runs
        if C >= 1 and R >= 2:
            conds = _stack(pairs[:C], "cond").repeat_interleave(R, dim=0)
            x = generate(ckpt, conds, g, guidance, steps).numpy().astype(np.float64)
            runs = [list(x[c * R:(c + 1) * R]) for c in range(C)]
        name = f"{cfg.prior} prior"
    meta = {"seed": cfg.seed, "config_hash": cfg.digest()}
    rep = compute_report(gen, ref, runs, paired, meta)
    gt_row = metrics.MetricReport(var=metrics.variance_metric(ref))
    out = Path(out)
    out.with_suffix(".csv").write_text(rep.to_csv(), encoding="utf-8")
    header = f"# seed={cfg.seed} config_hash={cfg.digest()} fid_mode={'paired' if paired else 'pooled'} n={n}\n"
    out.with_suffix(".txt").write_text(header + metrics.format_table({"GT": gt_row, name: rep}), encoding="utf-8")
    return rep


# --- argument parsing ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="a2nl", description="Conditional sequence diffusion prior")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="key = value config file (desk defaults when omitted)")
        sp.add_argument("--seed", type=int, help="override the root seed")
        sp.add_argument("--out", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic dataset")
    common(g)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--split", default="train")

    t = sub.add_parser("train", help="train a prior")
    common(t)
    t.add_argument("--data", required=True)
    t.add_argument("--prior", choices=("diffusion", "ar"), default="diffusion")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--steps", type=int, help="train only this many steps")
    t.add_argument("--log", help="CSV training log (step,loss,wallclock)")

    def sampling(sp):
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--data", required=True)
        sp.add_argument("--count", type=int)
        sp.add_argument("--guidance", type=float)
        sp.add_argument("--steps", type=int)

    s = sub.add_parser("sample", help="generate sequences")
    common(s, config=False)
    sampling(s)
    s.add_argument("--long", type=int, metavar="N_SEGMENTS", help="stitch N segments per sequence")

    e = sub.add_parser("edit", help="generate with pinned frames")
    common(e, config=False)
    sampling(e)
    e.add_argument("--frame", type=int, action="append", required=True)
    e.add_argument("--values", action="append", required=True, help="text file with d_v values")

    v = sub.add_parser("evaluate", help="metric report against a dataset")
    common(v)
    v.add_argument("--checkpoint")
    v.add_argument("--data", required=True)
    v.add_argument("--gt", action="store_true", help="score the dataset against itself")
    v.add_argument("--guidance", type=float)
    v.add_argument("--steps", type=int)
    mode = v.add_mutually_exclusive_group()
    mode.add_argument("--paired", dest="paired", action="store_true", default=None)
    mode.add_argument("--pooled", dest="paired", action="store_false")
    return p


def run(args: argparse.Namespace) -> None:
    if args.command == "gen-data":
        cmd_gen_data(load_config(args.config, args.seed), args.count, args.out, args.split)
    elif args.command == "train":
        cmd_train(load_config(args.config, args.seed), args.data, args.prior, args.out,
                  resume=args.resume, log_path=args.log, num_steps=args.steps)
    elif args.command == "sample":
        cmd_sample(args.checkpoint, args.data, args.out, args.count, args.guidance, args.steps,
                   args.long, args.seed)
    elif args.command == "edit":
        if len(args.frame) != len(args.values):
            raise ValidationError("each --frame needs a matching --values")
        cmd_edit(args.checkpoint, args.data, list(zip(args.frame, args.values)), args.out,
                 args.count, args.guidance, args.steps, args.seed)
    elif args.command == "evaluate":
        if not args.gt and not args.checkpoint:
            raise ValidationError("evaluate needs --checkpoint or --gt")
        cfg = load_config(args.config) if args.config else None
        cmd_evaluate(args.checkpoint, args.data, args.out, args.paired, args.guidance, args.steps,
                     gt_only=args.gt, cfg=cfg, seed=args.seed)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run(args)
    except (ValidationError, ConfigError, io.FormatError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except TrainingDiverged as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    sys.exit(main())
