"""Shared test helpers: finite-difference oracles and tolerances."""

from __future__ import annotations

import numpy as np

FD_H = 1e-5
FD_REL_TOL = 1e-4
# entries whose reference gradient is below this compare against it
# absolutely; central differences carry ~1e-10 of roundoff noise
FD_FLOOR = 1e-4


def fd_grad(f, arr: np.ndarray, h: float = FD_H) -> np.ndarray:
    """Central finite differences of scalar f() w.r.t. ``arr`` in place."""
    g = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def fd_grads(f, params: dict[str, np.ndarray], h: float = FD_H
             ) -> dict[str, np.ndarray]:
    return {name: fd_grad(f, arr, h) for name, arr in params.items()}


def max_rel_err(computed: np.ndarray, reference: np.ndarray,
                floor: float = FD_FLOOR) -> float:
    computed = np.asarray(computed, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    denom = np.maximum(np.abs(reference), floor)
    return float((np.abs(computed - reference) / denom).max())


def tree_max_rel_err(computed: dict, reference: dict) -> float:
    return max(max_rel_err(computed[k], reference[k]) for k in reference)
