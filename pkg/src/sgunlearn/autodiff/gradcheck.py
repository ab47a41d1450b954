"""Central finite-difference check of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    coords: np.ndarray
    analytic: np.ndarray
    numeric: np.ndarray
    tol: float
    worst_coord: int = field(default=-1)


def relative_error(a: np.ndarray, n: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def gradient_check(
    loss_fn: Callable[[np.ndarray], float],
    grad_fn: Callable[[np.ndarray], np.ndarray],
    theta: np.ndarray,
    h: float = 1e-5,
    tol: float = 1e-4,
    n_coords: int = 50,
    seed: int = 0,
) -> GradCheckReport:
    """Compare ``grad_fn`` with central differences of ``loss_fn``.

    Checks ``max(n_coords, 50)`` coordinates drawn without replacement (all
    of them when θ is smaller).  Relative error uses a denominator floor of
    1e-6 so vanishing gradient entries do not blow up the ratio.
    """
    theta = np.asarray(theta, dtype=np.float64)
    rng = np.random.default_rng(seed)
    k = min(theta.size, max(n_coords, 50))
    coords = np.sort(rng.choice(theta.size, size=k, replace=False))
    analytic = np.asarray(grad_fn(theta.copy()), dtype=np.float64).ravel()[coords]
    numeric = np.empty(k)
    for i, c in enumerate(coords):
        tp = theta.copy()
        tp.flat[c] += h
        tm = theta.copy()
        tm.flat[c] -= h
        numeric[i] = (loss_fn(tp) - loss_fn(tm)) / (2.0 * h)
    err = relative_error(analytic, numeric)
    worst = int(np.argmax(err)) if k else -1
    max_err = float(err[worst]) if k else 0.0
    return GradCheckReport(max_err < tol, max_err, coords, analytic, numeric, tol, int(coords[worst]) if k else -1)
