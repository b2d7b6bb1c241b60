"""Binary containers for checkpoints, sequence files and datasets.

Checkpoint / sequence container, all integers little-endian::

    b"A2NL" | u32 version | u32 len + config text | u32 len + metadata text
    | u32 n_arrays | n_arrays x (u16 len + name, u8 dtype, u8 ndim, ndim x u32)
    | float32 payload, row-major, in manifest order

Dataset file::

    b"A2NLDS" | u32 version | u32 len + world config text | u32 count
    | u32 L | u32 d_a | u32 d_v | count x (f32 cond[L, d_a], f32 target[L, d_v], u32 mode)
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .world import SamplePair, WorldConfig

MAGIC = b"A2NL"
DATASET_MAGIC = b"A2NLDS"
VERSION = 1
_DTYPES = {1: np.dtype("<f4")}


class FormatError(ValueError):
    pass


def _pack_text(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.path}: truncated file")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def text(self) -> str:
        (n,) = self.unpack("<I")
        return self.take(n).decode("utf-8")


def format_meta(meta: dict) -> str:
    return "".join(f"{k} = {meta[k]}\n" for k in sorted(meta))


def parse_meta(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def encode_container(arrays: dict[str, np.ndarray], config_text: str = "", meta: dict | None = None) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION), _pack_text(config_text), _pack_text(format_meta(meta or {})),
             struct.pack("<I", len(arrays))]
    payload = []
    for name, arr in arrays.items():
        a = np.ascontiguousarray(np.asarray(arr), dtype="<f4")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<BB", 1, a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        payload.append(a.tobytes(order="C"))
    return b"".join(parts + payload)


def decode_container(data: bytes, path="<bytes>") -> tuple[dict[str, np.ndarray], str, dict]:
    r = _Reader(data, path)
    if r.take(4) != MAGIC:
        raise FormatError(f"{path}: not an A2NL container")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported container version {version}")
    config_text = r.text()
    meta = parse_meta(r.text())
    (count,) = r.unpack("<I")
    manifest = []
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        code, ndim = r.unpack("<BB")
        if code not in _DTYPES:
            raise FormatError(f"{path}: unknown element type {code} for {name}")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        manifest.append((name, _DTYPES[code], tuple(shape)))
    arrays = {}
    for name, dt, shape in manifest:
        n = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(r.take(n * dt.itemsize), dtype=dt).reshape(shape).copy()
    return arrays, config_text, meta


def save_container(path, arrays, config_text="", meta=None) -> None:
    Path(path).write_bytes(encode_container(arrays, config_text, meta))


def load_container(path):
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise FormatError(f"cannot read {path}: {e.strerror}") from None
    return decode_container(data, path)


# --- datasets ------------------------------------------------------------------------

def world_text(cfg: WorldConfig) -> str:
    d = cfg.to_dict()
    return "".join(f"world.{k} = {d[k]!r}\n" for k in sorted(d))


def parse_world_text(text: str) -> WorldConfig:
    import ast

    kw = {}
    for line in text.splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            kw[k.strip().removeprefix("world.")] = ast.literal_eval(v.strip())
    return WorldConfig(**kw)


def encode_dataset(cfg: WorldConfig, pairs: list[SamplePair]) -> bytes:
    if not pairs:
        raise ValueError("dataset must hold at least one pair")
    L, d_a = pairs[0].cond.shape
    d_v = pairs[0].target.shape[1]
    parts = [DATASET_MAGIC, struct.pack("<I", VERSION), _pack_text(world_text(cfg)),
             struct.pack("<IIII", len(pairs), L, d_a, d_v)]
    for p in pairs:
        parts.append(np.ascontiguousarray(p.cond, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(p.target, dtype="<f4").tobytes())
        parts.append(struct.pack("<I", p.mode))
    return b"".join(parts)


def decode_dataset(data: bytes, path="<bytes>") -> tuple[WorldConfig, list[SamplePair]]:
    r = _Reader(data, path)
    if r.take(6) != DATASET_MAGIC:
        raise FormatError(f"{path}: not an A2NLDS dataset")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported dataset version {version}")
    cfg = parse_world_text(r.text())
    count, L, d_a, d_v = r.unpack("<IIII")
    pairs = []
    for _ in range(count):
        cond = np.frombuffer(r.take(4 * L * d_a), dtype="<f4").reshape(L, d_a).astype(np.float32)
        target = np.frombuffer(r.take(4 * L * d_v), dtype="<f4").reshape(L, d_v).astype(np.float32)
        (mode,) = r.unpack("<I")
        pairs.append(SamplePair(cond=cond, target=target, mode=int(mode)))
    return cfg, pairs


def save_dataset(path, cfg: WorldConfig, pairs) -> None:
    Path(path).write_bytes(encode_dataset(cfg, pairs))


def load_dataset(path):
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise FormatError(f"cannot read {path}: {e.strerror}") from None
    return decode_dataset(data, path)
