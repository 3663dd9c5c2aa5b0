"""Shared test utilities.

``fd_grad`` is the independent finite-difference oracle used throughout:
it perturbs raw numpy storage and re-runs a closure, so it never touches
the library's own gradient rules.
"""

import numpy as np
import pytest


def fd_grad(func, array: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar-valued ``func`` wrt ``array``.

    ``func`` must read ``array`` afresh on every call (the perturbation is
    done in place and undone afterwards).
    """
    grad = np.zeros_like(array, dtype=np.float64)
    flat = array.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        up = func()
        flat[i] = keep - h
        down = func()
        flat[i] = keep
        gflat[i] = (up - down) / (2 * h)
    return grad


def rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """max |a-b| / max(|a|,|b|,floor)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float((np.abs(a - b) / denom).max())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
