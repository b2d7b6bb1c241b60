"""Naturalness and diversity metrics over feature sequences."""

from __future__ import annotations

import csv
import io
import itertools
from dataclasses import dataclass, field

import numpy as np

SHRINKAGE = 1e-6


@dataclass
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray
    n: int

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        d = self.mean.shape[0]
        if self.cov.shape != (d, d):
            raise ValueError(f"cov shape {self.cov.shape} does not match mean dim {d}")


def gaussian_stats(samples) -> GaussianStats:
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] < 2:
        raise ValueError("need at least 2 samples")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (x.shape[0] - 1)
    return GaussianStats(mean=mean, cov=0.5 * (cov + cov.T), n=x.shape[0])


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(a: GaussianStats, b: GaussianStats, eps: float = 0.0) -> float:
    """Fréchet distance between two Gaussians; ``eps`` adds eps*I to both covariances."""
    if a.mean.shape != b.mean.shape:
        raise ValueError(f"dimension mismatch: {a.mean.shape[0]} vs {b.mean.shape[0]}")
    for s in (a, b):
        if not (np.all(np.isfinite(s.mean)) and np.all(np.isfinite(s.cov))):
            raise ValueError("non-finite Gaussian statistics")
    if np.array_equal(a.mean, b.mean) and np.array_equal(a.cov, b.cov):
        return 0.0  # exact, where the square roots would leave roundoff
    eye = np.eye(a.mean.shape[0])
    ca, cb = a.cov + eps * eye, b.cov + eps * eye
    ra = _psd_sqrt(ca)
    cross = _psd_sqrt(ra @ cb @ ra)
    diff = a.mean - b.mean
    val = diff @ diff + np.trace(ca) + np.trace(cb) - 2.0 * np.trace(cross)
    return float(max(val, 0.0))


def _frames(video) -> np.ndarray:
    v = np.asarray(video, dtype=np.float64)
    return v[:, None] if v.ndim == 1 else v


def variance_metric(videos) -> float:
    """Per-video unbiased variance over frames, averaged over dims, then over videos."""
    vals = []
    for v in videos:
        v = _frames(v)
        if v.shape[0] < 2:
            raise ValueError("each video needs at least 2 frames")
        vals.append(v.var(axis=0, ddof=1).mean())
    return float(np.mean(vals))


def fid_fm(gen, ref, paired: bool = True, eps: float = SHRINKAGE) -> float:
    """Frame-distribution Fréchet distance.

    Paired: mean over videos of FD(gen_i frames, ref_i frames). Pooled: a single FD
    between all generated and all reference frames.
    """
    gen = [_frames(v) for v in gen]
    ref = [_frames(v) for v in ref]
    if any(v.shape[0] < 2 for v in itertools.chain(gen, ref)):
        raise ValueError("each video needs at least 2 frames")
    if paired:
        if len(gen) != len(ref):
            raise ValueError(f"paired mode needs equal counts, got {len(gen)} and {len(ref)}")
        return float(np.mean([
            frechet_distance(gaussian_stats(g), gaussian_stats(r), eps) for g, r in zip(gen, ref)
        ]))
    return frechet_distance(gaussian_stats(np.concatenate(gen)), gaussian_stats(np.concatenate(ref)), eps)


def fid_delta_fm(gen, ref, paired: bool = True, eps: float = SHRINKAGE) -> float:
    """:func:`fid_fm` on first differences between consecutive frames."""
    gen = [_frames(v) for v in gen]
    ref = [_frames(v) for v in ref]
    if any(v.shape[0] < 3 for v in itertools.chain(gen, ref)):
        raise ValueError("each video needs at least 3 frames")
    return fid_fm([np.diff(v, axis=0) for v in gen], [np.diff(v, axis=0) for v in ref], paired, eps)


def snd(fid_fm_val: float, fid_delta_val: float) -> float:
    """Sequence naturalness distance."""
    return fid_fm_val + fid_delta_val


def multimodality(generated_runs) -> float:
    """Mean pairwise frame-averaged distance between runs under the same condition.

    ``generated_runs`` is a list (one entry per condition) of R >= 2 sequences.
    """
    per_cond = []
    for runs in generated_runs:
        runs = [_frames(r) for r in runs]
        if len(runs) < 2:
            raise ValueError("need at least 2 runs per condition")
        d = [np.linalg.norm(a - b, axis=-1).mean() for a, b in itertools.combinations(runs, 2)]
        per_cond.append(np.mean(d))
    return float(np.mean(per_cond))


METRIC_NAMES = ("var", "fid_fm", "fid_delta_fm", "snd", "multimodality")


@dataclass
class MetricReport:
    var: float | None = None
    fid_fm: float | None = None
    fid_delta_fm: float | None = None
    multimodality: float | None = None
    metadata: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)

    @property
    def snd(self) -> float | None:
        if self.fid_fm is None or self.fid_delta_fm is None:
            return None
        return snd(self.fid_fm, self.fid_delta_fm)

    def values(self) -> dict:
        return {k: getattr(self, k) for k in METRIC_NAMES}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value", "n", "seed", "config_hash"])
        seed = self.metadata.get("seed", "")
        chash = self.metadata.get("config_hash", "")
        for k, v in self.values().items():
            if v is not None:
                w.writerow([k, repr(float(v)), self.counts.get(k, ""), seed, chash])
        return buf.getvalue()


def evaluate(gen, ref, runs=None, paired: bool = True, metadata: dict | None = None) -> MetricReport:
    """Full report for generated videos ``gen`` against references ``ref``."""
    f = fid_fm(gen, ref, paired)
    fd = fid_delta_fm(gen, ref, paired)
    rep = MetricReport(var=variance_metric(gen), fid_fm=f, fid_delta_fm=fd, metadata=dict(metadata or {}))
    rep.counts = {k: len(gen) for k in ("var", "fid_fm", "fid_delta_fm", "snd")}
    if runs is not None:
        rep.multimodality = multimodality(runs)
        rep.counts["multimodality"] = len(runs)
    return rep


def format_table(rows: dict[str, MetricReport]) -> str:
    """Fixed-width table with columns Var, FID_fm, FID_dfm, SND, one row per method."""
    head = f"{'Method':<24}{'Var':>10}{'FID_fm':>10}{'FID_dfm':>10}{'SND':>10}{'MModal':>10}"
    lines = [head, "-" * len(head)]

    def cell(v):
        return f"{v:>10.4f}" if v is not None else f"{'-':>10}"

    for name, r in rows.items():
        lines.append(f"{name:<24}" + "".join(cell(v) for v in
                     (r.var, r.fid_fm, r.fid_delta_fm, r.snd, r.multimodality)))
    return "\n".join(lines) + "\n"
