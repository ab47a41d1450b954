"""Hessian-vector products and a damped conjugate-gradient solver."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..errors import DimensionMismatch, NaNEncountered


def default_hvp_eps(theta: np.ndarray) -> float:
    return 1e-4 * (1.0 + float(np.max(np.abs(theta)))) if theta.size else 1e-4


def hessian_vector_product(
    grad_fn: Callable[[np.ndarray], np.ndarray],
    theta: np.ndarray,
    v: np.ndarray,
    eps: float | None = None,
) -> np.ndarray:
    """Central difference of gradients: (g(θ+εv) - g(θ-εv)) / 2ε.

    Exact for quadratics; costs two gradient evaluations.
    """
    theta = np.asarray(theta, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != theta.shape:
        raise DimensionMismatch(f"|v| = {v.shape} but |theta| = {theta.shape}")
    if not np.any(v):
        return np.zeros_like(theta)
    if eps is None:
        eps = default_hvp_eps(theta)
    gp = grad_fn(theta + eps * v)
    gm = grad_fn(theta - eps * v)
    return (gp - gm) / (2.0 * eps)


@dataclass
class CGResult:
    x: np.ndarray
    iterations: int
    residual: float  # ||(H + damping I) x - b|| / ||b||
    converged: bool

    @property
    def not_converged(self) -> bool:
        return not self.converged


def conjugate_gradient_solve(
    apply_h: Callable[[np.ndarray], np.ndarray],
    b: np.ndarray,
    damping: float = 0.01,
    tol: float = 1e-6,
    max_iter: int = 200,
) -> CGResult:
    """Solve (H + damping·I) x = b given only products with H.

    Without convergence the last iterate is returned, flagged: CG iterates
    decrease the error monotonically in the (H + damping·I)-norm even when
    the residual norm does not.  A non-positive curvature direction
    (indefinite system) stops the solve at the iterate reached before it;
    on the very first direction that iterate would be zero, so the step
    ``b·|b|²/|curvature|`` along the right-hand side is returned instead.
    """
    if damping < 0:
        raise ValueError("damping must be non-negative")
    b = np.asarray(b, dtype=np.float64)
    if not np.all(np.isfinite(b)):
        raise NaNEncountered("right-hand side contains non-finite values")
    bnorm = float(np.linalg.norm(b))
    x = np.zeros_like(b)
    if bnorm == 0.0:
        return CGResult(x, 0, 0.0, True)

    def a(p):
        out = apply_h(p) + damping * p
        if not np.all(np.isfinite(out)):
            raise NaNEncountered("Hessian-vector product produced non-finite values")
        return out

    r = b.copy()
    p = r.copy()
    rs = float(r @ r)
    res = 1.0
    for it in range(1, max_iter + 1):
        ap = a(p)
        curv = float(p @ ap)
        if not np.isfinite(curv):
            raise NaNEncountered("non-finite curvature in conjugate gradient")
        if curv <= 0.0:
            if it == 1 and curv < 0.0:
                x = (rs / -curv) * b
                res = float(np.linalg.norm(b - a(x))) / bnorm
            return CGResult(x, it - 1, res, False)
        alpha = rs / curv
        x = x + alpha * p
        r = r - alpha * ap
        rs_new = float(r @ r)
        res = np.sqrt(rs_new) / bnorm
        if res < tol:
            return CGResult(x, it, float(res), True)
        p = r + (rs_new / rs) * p
        rs = rs_new
    return CGResult(x, max_iter, float(res), False)
