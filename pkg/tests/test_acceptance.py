"""Acceptance criteria, one test each; every test records a PASS/FAIL line.

Criteria 7-10 and 12 share one trained desk study per session. Set
``A2NL_ACCEPT_CACHE`` to a directory to keep its checkpoints between sessions
(files are keyed by config hash, so stale models are never reused).
"""

import math
import os
import time
from itertools import combinations

import numpy as np
import pytest
import torch

from a2nl import metrics
from a2nl.cli import main as cli_main
from a2nl.config import RunConfig
from a2nl.denoiser import DenoiserConfig, build_denoiser
from a2nl.disentangle import MemoryBank, orthogonal_loss, symmetric_contrastive
from a2nl.experiments import DeskStudy, run_disentangle
from a2nl.metrics import GaussianStats, frechet_distance
from a2nl.prior import (MaskEdit, SamplerConfig, TrainBatch, TrainConfig, a2nl_loss, generate_long, guide,
                        loss_simple, loss_velocity, sample)
from a2nl.schedule import build_schedule, forward_sample
from a2nl.world import long_condition_segments, world_params
from helpers import FD_RTOL, check_grads, verdict


@pytest.fixture(scope="session")
def study(tmp_path_factory):
    cache = os.environ.get("A2NL_ACCEPT_CACHE")
    workdir = cache or tmp_path_factory.mktemp("study")
    return DeskStudy(RunConfig(), workdir)


@pytest.fixture(scope="session")
def trained(study):
    """Train every variant once; returns wall-clock seconds per freshly trained model."""
    seconds = {}
    for name in ("diffusion", "ar", "no_vel", "no_edit"):
        t0 = time.perf_counter()
        was_cached = (study.workdir / f"{name}-{study.variant_config(name).digest()}.ckpt").exists()
        study.model(name)
        if not was_cached:
            seconds[name] = time.perf_counter() - t0
    return seconds


@pytest.fixture(scope="session")
def reports(study, trained):
    return {(name, paired): study.report(name, paired)
            for name in ("diffusion", "ar", "no_vel") for paired in (False, True)}


# --- 1-6: formula oracles and contracts ------------------------------------------------

def test_c01_snd_identity():
    anchors = [(3.81, 1.13, 4.94), (5.94, 1.30, 7.24)]
    anchor_err = max(abs(metrics.snd(a, b) - total) for a, b, total in anchors)
    rng = np.random.default_rng(1)
    exact = True
    for k in range(20):
        gen = [rng.standard_normal((12, 3)) * (1 + k % 3) for _ in range(4)]
        ref = [rng.standard_normal((12, 3)) for _ in range(4)]
        for paired in (True, False):
            rep = metrics.evaluate(gen, ref, runs=[gen], paired=paired)
            exact &= rep.snd == rep.fid_fm + rep.fid_delta_fm
    ok = anchor_err <= 1e-12 and exact
    assert verdict(1, ok, f"anchors 4.94/7.24 err={anchor_err:.1e}, 40 reports exact={exact}")


def test_c02_frechet_oracle():
    rng = np.random.default_rng(2)
    worst = 0.0
    for k in range(50):
        d = 1 if k < 25 else 2
        mu_a, mu_b = rng.normal(0, 2, d), rng.normal(0, 2, d)
        sd_a, sd_b = rng.uniform(0.1, 3, d), rng.uniform(0.1, 3, d)
        got = frechet_distance(GaussianStats(mu_a, np.diag(sd_a ** 2), 10), GaussianStats(mu_b, np.diag(sd_b ** 2), 10))
        want = np.sum((mu_a - mu_b) ** 2) + np.sum((sd_a - sd_b) ** 2)
        worst = max(worst, abs(got - want) / want)
    same = 0.0
    for _ in range(10):
        x = rng.standard_normal((40, 3)) @ rng.standard_normal((3, 3))
        s = metrics.gaussian_stats(x)
        same = max(same, abs(frechet_distance(s, GaussianStats(s.mean.copy(), s.cov.copy(), s.n))))
    ok = worst <= 1e-6 and same <= 1e-6
    assert verdict(2, ok, f"50 pairs max rel err={worst:.1e}, identical stats max={same:.1e}")


def test_c03_gradient_checks():
    torch.manual_seed(0)
    sched = build_schedule("linear", 1000)
    results = {}

    cfg = DenoiserConfig()
    m = build_denoiser(cfg, 4, dtype=torch.float64)
    g = torch.Generator().manual_seed(3)
    mask = torch.rand(2, 16, generator=g) < 0.2
    batch = TrainBatch(n0=torch.randn(2, 16, cfg.d_v, generator=g, dtype=torch.float64),
                       cond=torch.randn(2, 16, cfg.d_a, generator=g, dtype=torch.float64), mask=mask)
    params = dict(m.named_parameters())
    results["L_simple (desk denoiser)"] = check_grads(
        lambda: loss_simple(m, batch, sched, torch.Generator().manual_seed(5), 0.5), params)
    results["L_simple + L_vel (desk denoiser)"] = check_grads(
        lambda: a2nl_loss(m, batch, sched, torch.Generator().manual_seed(5), TrainConfig(cond_drop=0.5)), params)

    causal = build_denoiser(DenoiserConfig(attention_mode="causal"), 4, dtype=torch.float64)
    cparams = {k: v for k, v in causal.named_parameters() if k != "start_token"}
    n_t, cond = batch.n0 + 0.3, batch.cond
    results["causal desk denoiser"] = check_grads(lambda: causal(n_t, 0, cond).pow(2).sum(), cparams)

    pred = torch.randn(3, 10, 4, generator=g, dtype=torch.float64)
    gt = torch.randn(3, 10, 4, generator=g, dtype=torch.float64)
    results["L_vel"] = check_grads(lambda: loss_velocity(pred, gt), {"pred": pred}, n_coords=10)

    f_a = torch.randn(8, 5, generator=g, dtype=torch.float64)
    f_v = torch.randn(8, 5, generator=g, dtype=torch.float64)
    tau = torch.tensor(0.07, dtype=torch.float64)
    results["symmetric_contrastive"] = check_grads(lambda: symmetric_contrastive(f_a, f_v, tau),
                                                   {"f_a": f_a, "f_v": f_v, "tau": tau})

    hist = (torch.randn(8, 4, generator=g, dtype=torch.float64), torch.randn(8, 3, generator=g, dtype=torch.float64))
    f_nl = torch.randn(8, 4, generator=g, dtype=torch.float64)
    f_l = torch.randn(8, 3, generator=g, dtype=torch.float64)

    def ol():
        bank = MemoryBank(4)
        bank.push(*hist)
        return orthogonal_loss(f_nl, f_l, bank)

    results["orthogonal_loss"] = check_grads(ol, {"f_nl": f_nl, "f_l": f_l})

    worst = {name: max(w.values()) for name, w in results.items()}
    ok = max(worst.values()) <= FD_RTOL
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    assert verdict(3, ok, f"max rel err per loss (<= {FD_RTOL:g}): {detail}")


def test_c04_forward_marginals():
    sched = build_schedule("linear", 1000)
    n0 = torch.tensor([1.5, -0.5, 0.0, 2.0], dtype=torch.float64)
    N = 10_000
    g = torch.Generator().manual_seed(4)
    worst = 0.0
    for t in (1, 300, 1000):
        noise = torch.randn(N, 4, generator=g, dtype=torch.float64)
        x = forward_sample(n0.expand(N, -1), torch.full((N,), t), noise, sched).numpy()
        ab = float(sched.alpha_bar[t])
        var = 1 - ab
        z_mean = np.abs(x.mean(0) - math.sqrt(ab) * n0.numpy()) / math.sqrt(var / N)
        z_var = np.abs(x.var(0, ddof=1) - var) / (var * math.sqrt(2 / (N - 1)))
        worst = max(worst, z_mean.max(), z_var.max())
    assert verdict(4, worst <= 4, f"t in (1, 300, 1000), 10^4 draws, max |z| = {worst:.2f} (<= 4 SE)")


def test_c05_cfg_identities():
    g = torch.Generator().manual_seed(5)
    c, u = torch.randn(4, 7, 3, generator=g), torch.randn(4, 7, 3, generator=g)
    ones = torch.equal(guide(c, u, 1.0), c)
    zeros = torch.equal(guide(c, u, 0.0), u)
    scalar = guide(2.0, 1.0, 3.0) == 4.0
    ok = ones and zeros and scalar
    assert verdict(5, ok, f"s=1 -> cond {ones}, s=0 -> uncond {zeros}, (2,1,3) -> 4 {scalar}")


def test_c06_inpainting_contract():
    cfg = RunConfig()
    m = build_denoiser(cfg.model, 6).eval()
    sched = build_schedule("linear", 1000)
    g = torch.Generator().manual_seed(6)
    cond = torch.randn(3, cfg.world.L, cfg.world.d_a, generator=g)
    v = torch.randn(2, cfg.world.d_v, generator=g)
    clamped = True
    for hint in (True, False):
        sc = SamplerConfig(steps=50, mask_editing=MaskEdit([4, 20], v, hint))
        out = sample(m, cond, sched, sc, torch.Generator().manual_seed(1))
        clamped &= torch.equal(out[:, 4], v[0].expand(3, -1)) and torch.equal(out[:, 20], v[1].expand(3, -1))
    stream = [torch.from_numpy(c) for c in long_condition_segments(cfg.world, 3, 3)]
    full, segs = generate_long(m, stream, sched, SamplerConfig(steps=50), torch.Generator().manual_seed(2),
                               return_segments=True)
    L = cfg.world.L
    shared = all(torch.equal(segs[k][:, -1], segs[k + 1][:, 0]) for k in range(2))
    once = full.shape[1] == 3 * (L - 1) + 1 and torch.equal(full[:, L - 1], segs[0][:, -1])
    ok = clamped and shared and once
    assert verdict(6, ok, f"clamped frames exact {clamped}, boundary frames shared {shared}, stored once {once}")


# --- 7-10: trained desk study ----------------------------------------------------------

@pytest.mark.slow
def test_c07_one_to_many(study, trained):
    res = study.one_to_many("diffusion", n=200, index=0)
    offsets = world_params(study.cfg.world).offsets
    sep = min(np.linalg.norm(a - b) for a, b in combinations(offsets, 2))
    freq = res["mode_freq"]
    train_s = trained.get("diffusion")
    fast = train_s is None or train_s <= 600
    ok = freq.min() >= 0.2 and res["multimodality"] > 0.5 * sep and fast
    when = "cached" if train_s is None else f"{train_s:.0f}s"
    assert verdict(7, ok, f"mode freq {np.round(freq, 3).tolist()} (each >= 0.2), multimodality "
                          f"{res['multimodality']:.3f} > {0.5 * sep:.3f}, training {when} (<= 600s)")


@pytest.mark.slow
def test_c08_diffusion_vs_ar(study, reports):
    ov = study.oracle_var()
    d, a = reports[("diffusion", False)], reports[("ar", False)]
    dp, ap = reports[("diffusion", True)], reports[("ar", True)]
    identity = all(r.snd == r.fid_fm + r.fid_delta_fm for r in reports.values())
    ok = d.snd < a.snd and abs(d.var - ov) < abs(a.var - ov) and identity
    assert verdict(8, ok, f"pooled SND diffusion {d.snd:.3f} < AR {a.snd:.3f}; Var {d.var:.3f} vs AR {a.var:.3f} "
                          f"(oracle {ov:.3f}); paired SND for reference {dp.snd:.3f} vs {ap.snd:.3f}")


@pytest.mark.slow
def test_c09_velocity_ablation(study, reports):
    ov = study.oracle_var()
    full, nov = reports[("diffusion", False)], reports[("no_vel", False)]
    ok = abs(nov.var - ov) > abs(full.var - ov) and nov.snd >= full.snd
    assert verdict(9, ok, f"Var |err| w/o L_vel {abs(nov.var - ov):.3f} > full {abs(full.var - ov):.3f}; "
                          f"SND w/o L_vel {nov.snd:.3f} >= full {full.snd:.3f}")


@pytest.mark.slow
def test_c10_mask_editing_ablation(study, trained):
    with_edit = study.boundary_test("diffusion")
    without = study.boundary_test("no_edit")
    ok = with_edit["pvalue"] > 0.01 and without["pvalue"] <= 0.01
    assert verdict(10, ok, f"KS p with editing {with_edit['pvalue']:.3g} (> 0.01, boundary mean "
                           f"{with_edit['boundary_mean']:.3f} vs {with_edit['inner_mean']:.3f}); without "
                           f"{without['pvalue']:.3g} (<= 0.01, {without['boundary_mean']:.3f} vs "
                           f"{without['inner_mean']:.3f})")


# --- 11: disentanglement ---------------------------------------------------------------

def test_c11_disentanglement():
    full = run_disentangle(seed=0, use_ol=True)
    ablated = run_disentangle(seed=0, use_ol=False)
    ok = full.cross_corr <= 0.02 and full.probe_r2 >= 0.9 and ablated.cross_corr > 0.02
    assert verdict(11, ok, f"with L_ol cross-corr {full.cross_corr:.4f} (<= 0.02), probe R^2 {full.probe_r2:.3f} "
                           f"(>= 0.9); without L_ol cross-corr {ablated.cross_corr:.4f} (> 0.02)")


# --- 12: determinism -------------------------------------------------------------------

@pytest.mark.slow
def test_c12_determinism(study, trained, tmp_path):
    """Rerun criterion 7's training through the CLI and compare every artifact byte for byte."""
    cfg = study.cfg
    conf = tmp_path / "desk.cfg"
    conf.write_text(cfg.to_text())
    run = lambda *argv: cli_main([str(a) for a in argv])  # noqa: E731
    same = {}
    for name in ("a", "b"):
        assert run("gen-data", "--config", conf, "--count", cfg.data.n_train, "--out", tmp_path / f"train_{name}.a2ds") == 0
        assert run("gen-data", "--config", conf, "--count", cfg.eval.n_test, "--split", "test",
                   "--out", tmp_path / f"test_{name}.a2ds") == 0
    same["datasets"] = all((tmp_path / f"{s}_a.a2ds").read_bytes() == (tmp_path / f"{s}_b.a2ds").read_bytes()
                           for s in ("train", "test"))

    assert run("train", "--config", conf, "--data", tmp_path / "train_a.a2ds", "--out", tmp_path / "m.ckpt") == 0
    cached = study.workdir / f"diffusion-{study.variant_config('diffusion').digest()}.ckpt"
    same["checkpoint"] = (tmp_path / "m.ckpt").read_bytes() == cached.read_bytes()

    for name in ("a", "b"):
        assert run("sample", "--checkpoint", tmp_path / "m.ckpt", "--data", tmp_path / "test_a.a2ds",
                   "--out", tmp_path / f"s_{name}.seq") == 0
        assert run("evaluate", "--checkpoint", tmp_path / "m.ckpt", "--data", tmp_path / "test_a.a2ds",
                   "--out", tmp_path / f"r_{name}") == 0
    same["sequences"] = ((tmp_path / "s_a.seq").read_bytes() == (tmp_path / "s_b.seq").read_bytes()
                         and (tmp_path / "s_a.csv").read_bytes() == (tmp_path / "s_b.csv").read_bytes())
    same["metric CSVs"] = (tmp_path / "r_a.csv").read_bytes() == (tmp_path / "r_b.csv").read_bytes()
    ok = all(same.values())
    assert verdict(12, ok, "byte-identical " + ", ".join(f"{k} {v}" for k, v in same.items()))
