import csv

import numpy as np
import pytest

from a2nl import io
from a2nl.checkpoint import load_checkpoint
from a2nl.cli import main, read_sequences

TINY = """\
world.L = 8
model.max_len = 8
model.num_layers = 1
model.token_dim = 16
model.ffn_dim = 32
model.num_heads = 2
train.steps = 6
train.batch_size = 4
sampler.steps = 4
eval.n_test = 6
eval.conditions = 2
eval.runs = 3
"""


@pytest.fixture()
def ws(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(TINY)
    assert main(["gen-data", "--config", str(cfg), "--count", "24", "--out", str(tmp_path / "train.a2ds")]) == 0
    assert main(["gen-data", "--config", str(cfg), "--count", "6", "--split", "test",
                 "--out", str(tmp_path / "test.a2ds")]) == 0
    return tmp_path


def _train(ws, out="m.ckpt", *extra):
    argv = ["train", "--config", str(ws / "run.cfg"), "--data", str(ws / "train.a2ds"), "--out", str(ws / out)]
    return main(argv + list(extra))


def test_gen_data_deterministic_and_round_trip(ws):
    assert main(["gen-data", "--config", str(ws / "run.cfg"), "--count", "24", "--out", str(ws / "again.a2ds")]) == 0
    assert (ws / "again.a2ds").read_bytes() == (ws / "train.a2ds").read_bytes()
    from a2nl.config import parse_config
    from a2nl.world import gen_dataset

    world, pairs = io.load_dataset(ws / "train.a2ds")
    expected = gen_dataset(parse_config(TINY).world, 24)
    assert all(np.array_equal(a.target, b.target) and a.mode == b.mode for a, b in zip(pairs, expected))


def test_gen_data_rejections(ws, capsys):
    assert main(["gen-data", "--count", "0", "--out", str(ws / "x.a2ds")]) == 2
    bad = ws / "bad.cfg"
    bad.write_text("world.colour = 1\n")
    assert main(["gen-data", "--config", str(bad), "--count", "3", "--out", str(ws / "x.a2ds")]) == 2
    assert "world.colour" in capsys.readouterr().err
    assert main(["gen-data", "--count", "3", "--out", str(ws / "missing" / "dir" / "x.a2ds")]) == 3


def test_train_log_and_checkpoint(ws):
    assert _train(ws, "m.ckpt", "--log", str(ws / "log.csv")) == 0
    ckpt = load_checkpoint(ws / "m.ckpt")
    assert ckpt.step == 6 and ckpt.config.prior == "diffusion"
    lines = (ws / "log.csv").read_text().splitlines()
    assert lines[0].startswith("# seed=0 config_hash=")
    rows = list(csv.reader(lines[1:]))
    assert rows[0] == ["step", "loss", "wallclock"] and len(rows) == 7


def test_train_ar_forces_causal(ws):
    assert _train(ws, "ar.ckpt", "--prior", "ar") == 0
    cfg = load_checkpoint(ws / "ar.ckpt").config
    assert cfg.prior == "ar" and cfg.model.attention_mode == "causal"


def test_resume_is_bitwise(ws):
    assert _train(ws, "full.ckpt") == 0
    assert _train(ws, "half.ckpt", "--steps", "3") == 0
    assert main(["train", "--data", str(ws / "train.a2ds"), "--resume", str(ws / "half.ckpt"),
                 "--out", str(ws / "resumed.ckpt")]) == 0
    assert (ws / "resumed.ckpt").read_bytes() == (ws / "full.ckpt").read_bytes()


def test_training_is_reproducible(ws):
    assert _train(ws, "a.ckpt") == 0
    assert _train(ws, "b.ckpt") == 0
    assert (ws / "a.ckpt").read_bytes() == (ws / "b.ckpt").read_bytes()


def test_sample_outputs_and_determinism(ws):
    assert _train(ws) == 0
    base = ["sample", "--checkpoint", str(ws / "m.ckpt"), "--data", str(ws / "test.a2ds")]
    assert main(base + ["--out", str(ws / "s1.seq")]) == 0
    assert main(base + ["--out", str(ws / "s2.seq")]) == 0
    assert (ws / "s1.seq").read_bytes() == (ws / "s2.seq").read_bytes()
    assert (ws / "s1.csv").read_bytes() == (ws / "s2.csv").read_bytes()
    seqs = read_sequences(ws / "s1.seq")
    assert seqs.shape == (6, 8, 8)
    _, _, meta = io.load_container(ws / "s1.seq")
    assert {"seed", "config_hash"} <= meta.keys()
    assert (ws / "s1.csv").read_text().startswith("# seed=0 config_hash=")
    assert main(base + ["--out", str(ws / "s3.seq"), "--seed", "5"]) == 0
    assert not np.array_equal(read_sequences(ws / "s3.seq"), seqs)


def test_sample_long(ws):
    assert _train(ws) == 0
    out = ws / "long.seq"
    assert main(["sample", "--checkpoint", str(ws / "m.ckpt"), "--data", str(ws / "test.a2ds"),
                 "--long", "3", "--count", "2", "--out", str(out)]) == 0
    assert read_sequences(out).shape == (2, 3 * 7 + 1, 8)
    assert _train(ws, "ar.ckpt", "--prior", "ar") == 0
    assert main(["sample", "--checkpoint", str(ws / "ar.ckpt"), "--data", str(ws / "test.a2ds"),
                 "--long", "3", "--out", str(out)]) == 2


def test_edit_clamps_frame(ws):
    assert _train(ws) == 0
    values = np.linspace(-1, 1, 8)
    vfile = ws / "v.txt"
    np.savetxt(vfile, values)
    out = ws / "edit.seq"
    base = ["edit", "--checkpoint", str(ws / "m.ckpt"), "--data", str(ws / "test.a2ds")]
    assert main(base + ["--frame", "3", "--values", str(vfile), "--out", str(out)]) == 0
    seqs = read_sequences(out)
    assert np.array_equal(seqs[:, 3], np.broadcast_to(values.astype(np.float32), (6, 8)))
    assert main(base + ["--frame", "8", "--values", str(vfile), "--out", str(out)]) == 2
    short = ws / "short.txt"
    np.savetxt(short, values[:3])
    assert main(base + ["--frame", "1", "--values", str(short), "--out", str(out)]) == 2


def test_evaluate_gt_self_comparison(ws):
    assert main(["evaluate", "--gt", "--data", str(ws / "test.a2ds"), "--out", str(ws / "gt")]) == 0
    rows = {r["metric"]: r for r in csv.DictReader((ws / "gt.csv").open())}
    assert float(rows["fid_fm"]["value"]) == 0.0
    assert float(rows["fid_delta_fm"]["value"]) == 0.0
    assert float(rows["snd"]["value"]) == 0.0


def test_evaluate_report_and_determinism(ws):
    assert _train(ws) == 0
    for name in ("r1", "r2"):
        assert main(["evaluate", "--checkpoint", str(ws / "m.ckpt"), "--data", str(ws / "test.a2ds"),
                     "--out", str(ws / name), "--pooled"]) == 0
    assert (ws / "r1.csv").read_bytes() == (ws / "r2.csv").read_bytes()
    rows = {r["metric"]: r for r in csv.DictReader((ws / "r1.csv").open())}
    assert float(rows["snd"]["value"]) == float(rows["fid_fm"]["value"]) + float(rows["fid_delta_fm"]["value"])
    assert "multimodality" in rows
    table = (ws / "r1.txt").read_text()
    assert "fid_mode=pooled" in table and "GT" in table


def test_evaluate_needs_source_and_version_check(ws):
    assert main(["evaluate", "--data", str(ws / "test.a2ds"), "--out", str(ws / "x")]) == 2
    bad = ws / "bad.ckpt"
    assert _train(ws) == 0
    raw = bytearray((ws / "m.ckpt").read_bytes())
    raw[4] = 9
    bad.write_bytes(bytes(raw))
    assert main(["evaluate", "--checkpoint", str(bad), "--data", str(ws / "test.a2ds"),
                 "--out", str(ws / "x")]) == 2


def test_evaluate_thread_cap(ws, monkeypatch):
    assert _train(ws) == 0
    argv = ["evaluate", "--checkpoint", str(ws / "m.ckpt"), "--data", str(ws / "test.a2ds")]
    monkeypatch.setenv("A2NL_THREADS", "3")
    assert main(argv + ["--out", str(ws / "t3")]) == 0
    monkeypatch.setenv("A2NL_THREADS", "1")
    assert main(argv + ["--out", str(ws / "t1")]) == 0
    assert (ws / "t3.csv").read_bytes() == (ws / "t1.csv").read_bytes()
    monkeypatch.setenv("A2NL_THREADS", "lots")
    assert main(argv + ["--out", str(ws / "tx")]) == 2
