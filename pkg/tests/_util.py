"""Finite-difference oracles shared by the test modules."""

import numpy as np


def fd_grad(fn, x, eps=1e-5):
    """Central differences of scalar ``fn`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.empty_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        up = fn(x)
        flat[i] = old - eps
        down = fn(x)
        flat[i] = old
        gf[i] = (up - down) / (2 * eps)
    return g


def rel_err(a, b, floor=1e-6):
    """Entrywise |a - b| / max(|a|, |b|, floor * max|b|, tiny)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(float(np.max(np.abs(b))) if b.size else 0.0, 1.0)
    den = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor * scale)
    return np.abs(a - b) / den
