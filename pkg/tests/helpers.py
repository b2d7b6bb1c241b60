"""Shared test utilities: central finite differences against autograd."""

import torch

FD_STEP = 1e-5
FD_RTOL = 1e-4
# Gradients smaller than FD_FLOOR * max(1, |loss|) are compared on that absolute scale:
# a structurally zero gradient has no meaningful relative error, only roundoff.
FD_FLOOR = 1e-6


def rel_err(a: float, b: float, floor: float = FD_FLOOR) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def check_grads(loss_fn, tensors: dict, n_coords: int = 5, seed: int = 0) -> dict:
    """Compare autograd with central differences on ``n_coords`` random coordinates per tensor.

    ``loss_fn()`` must rebuild the loss from the current tensor values. Returns the
    worst relative error per tensor name.
    """
    for t in tensors.values():
        t.requires_grad_(True)
    loss = loss_fn()
    floor = FD_FLOOR * max(1.0, abs(float(loss.detach())))
    grads = torch.autograd.grad(loss, list(tensors.values()), allow_unused=True)
    gen = torch.Generator().manual_seed(seed)
    worst = {}
    for (name, t), g in zip(tensors.items(), grads):
        g = torch.zeros_like(t) if g is None else g
        flat = t.data.view(-1)
        k = min(n_coords, flat.numel())
        idx = torch.randperm(flat.numel(), generator=gen)[:k]
        errs = []
        for i in idx.tolist():
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + FD_STEP
                up = float(loss_fn())
                flat[i] = orig - FD_STEP
                down = float(loss_fn())
                flat[i] = orig
            fd = (up - down) / (2 * FD_STEP)
            errs.append(rel_err(fd, float(g.view(-1)[i]), floor))
        worst[name] = max(errs)
    return worst


VERDICTS: list[str] = []


def verdict(n: int, ok: bool, detail: str) -> bool:
    """Record and print one acceptance line, e.g. ``PASS criterion 3: ...``."""
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    VERDICTS.append(line)
    print(line)
    return ok
