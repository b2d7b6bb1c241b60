"""Named RNG streams derived from a single root seed."""

from __future__ import annotations

import hashlib

import numpy as np
import torch


def derive_seed(root: int, *labels) -> int:
    """Stable 63-bit seed for the stream ``labels`` under ``root``."""
    text = "/".join([str(int(root))] + [str(x) for x in labels])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def np_rng(root: int, *labels) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, *labels))


def torch_gen(root: int, *labels) -> torch.Generator:
    return torch.Generator().manual_seed(derive_seed(root, *labels))
