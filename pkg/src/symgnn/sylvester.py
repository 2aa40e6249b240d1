"""Classic linear Sylvester equation ``X = alpha * A1 X A2^T + (1 - alpha) * H``.

``X`` and ``H`` are n1 x n2; ``A1`` acts on rows and ``A2`` on columns.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from symgnn.graph_data import PriorAssociation

logger = logging.getLogger(__name__)

KRON_CAP = 4096


@dataclass(frozen=True)
class SolverConfig:
    alpha: float = 0.5
    tol: float = 1e-9
    max_iter: int = 10000

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be positive")


@dataclass
class SolutionX:
    x: np.ndarray
    iterations: int
    final_residual: float
    converged: bool = True
    residuals: List[float] = field(default_factory=list)


def _dense(a):
    return a.toarray() if sp.issparse(a) else np.asarray(a, dtype=np.float64)


def fixed_point_solve(a1, a2, h, cfg: SolverConfig = SolverConfig()) -> SolutionX:
    """Iterate ``X <- alpha A1 X A2^T + (1 - alpha) H`` from ``X = H``.

    Stops when successive iterates differ by at most ``cfg.tol`` in Frobenius
    norm.  ``residuals[t]`` holds ``||X^{t+1} - X^t||_F``; with symmetrically
    normalized inputs the ratio of consecutive residuals is at most alpha.
    On hitting ``max_iter`` the last iterate is returned with
    ``converged=False``.
    """
    h = np.asarray(h, dtype=np.float64)
    a1 = a1.tocsr() if sp.issparse(a1) else np.asarray(a1, dtype=np.float64)
    a2 = a2.tocsr() if sp.issparse(a2) else np.asarray(a2, dtype=np.float64)
    if a1.shape != (h.shape[0], h.shape[0]) or a2.shape != (h.shape[1], h.shape[1]):
        raise ValueError(f"shape mismatch: A1 {a1.shape}, A2 {a2.shape}, H {h.shape}")
    alpha = cfg.alpha

    def step(m):
        # A1 M A2^T as two left-multiplications so sparse operands stay sparse
        return alpha * np.asarray(a2 @ np.asarray(a1 @ m).T).T

    # the update D is propagated on its own, D <- alpha A1 D A2^T, so each
    # residual ||D|| is computed without cancelling two nearly equal iterates
    diff = step(h) - alpha * h
    x = h.copy()
    residuals = []
    for it in range(1, cfg.max_iter + 1):
        if it > 1:
            diff = step(diff)
        x = x + diff
        res = float(np.linalg.norm(diff))
        residuals.append(res)
        if res <= cfg.tol:
            return SolutionX(x, it, res, True, residuals)
    logger.warning("fixed point iteration stopped after %d iterations (residual %.3e)", cfg.max_iter, res)
    return SolutionX(x, cfg.max_iter, res, False, residuals)


def kronecker_direct_solve(a1, a2, h, alpha: float, cap: int = KRON_CAP) -> SolutionX:
    """Dense solve of ``(I - alpha A1 (x) A2) vec(X) = (1 - alpha) vec(H)``.

    ``vec`` is row-major, which pairs ``A1 (x) A2`` with ``A1 X A2^T``.  Only
    meant as an oracle for small problems.
    """
    h = np.asarray(h, dtype=np.float64)
    n1, n2 = h.shape
    if n1 * n2 > cap:
        raise ValueError(f"{n1 * n2} unknowns exceed the direct-solve cap of {cap}")
    system = np.eye(n1 * n2) - alpha * np.kron(_dense(a1), _dense(a2))
    lu = scipy.linalg.lu_factor(system)
    x = scipy.linalg.lu_solve(lu, (1.0 - alpha) * h.ravel()).reshape(n1, n2)
    res = float(np.linalg.norm(alpha * _dense(a1) @ x @ _dense(a2).T + (1.0 - alpha) * h - x))
    return SolutionX(x, 1, res, True, [res])


@dataclass(frozen=True)
class Calibration:
    scale: float
    offset: float
    low: float
    high: float
    degenerate: bool = False

    def apply(self, x: np.ndarray) -> np.ndarray:
        return np.clip(self.scale * x + self.offset, self.low, self.high)


def fit_calibration(x: np.ndarray, h: np.ndarray, train_mask: np.ndarray,
                    classes: Sequence[float]) -> Calibration:
    """Least-squares ``a * X + b`` on training entries, clipped to the class range."""
    sel = train_mask.astype(bool)
    xs, hs = x[sel], h[sel]
    lo, hi = float(min(classes)), float(max(classes))
    if xs.size == 0:
        raise ValueError("calibration needs at least one training entry")
    if np.ptp(xs) <= 1e-12 * max(1.0, np.abs(xs).max()):
        warnings.warn("solution is constant on training entries; predicting the training mean")
        return Calibration(0.0, float(hs.mean()), lo, hi, degenerate=True)
    design = np.column_stack([xs, np.ones_like(xs)])
    (a, b), *_ = np.linalg.lstsq(design, hs, rcond=None)
    return Calibration(float(a), float(b), lo, hi)


def sylvester_predict(sol: SolutionX, prior: PriorAssociation, train_mask: np.ndarray,
                      calibration: str = "affine") -> np.ndarray:
    """Map a solution to ratings: affine fit on train entries then clip, or clip only."""
    if not sol.converged:
        warnings.warn("predicting from a non-converged solution")
    lo, hi = min(prior.classes), max(prior.classes)
    if calibration == "clip":
        return np.clip(sol.x, lo, hi)
    if calibration != "affine":
        raise ValueError(f"unknown calibration {calibration!r}")
    return fit_calibration(sol.x, prior.h, train_mask, prior.classes).apply(sol.x)


def rmse(pred: np.ndarray, h: np.ndarray, mask: np.ndarray) -> float:
    sel = mask.astype(bool)
    if not sel.any():
        raise ValueError("RMSE over an empty mask")
    return float(np.sqrt(np.mean((h[sel] - pred[sel]) ** 2)))


@dataclass
class SylvesterResult:
    alpha: float
    val_rmse: float
    test_rmse: float
    solution: SolutionX
    prediction: np.ndarray
    grid: dict


def sylvester_baseline(data, alphas=(0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9),
                       calibration: str = "affine", tol: float = 1e-9, max_iter: int = 10000) -> SylvesterResult:
    """Solve with the training ratings as prior, pick alpha on validation RMSE."""
    split = data.split
    h_train = data.train_h()
    a1, a2 = data.net1.norm_adjacency, data.net2.norm_adjacency
    best = None
    grid = {}
    for alpha in alphas:
        sol = fixed_point_solve(a1, a2, h_train, SolverConfig(alpha, tol, max_iter))
        pred = sylvester_predict(sol, data.prior, split.train_mask, calibration)
        score = rmse(pred, data.prior.h, split.val_mask) if split.val_mask.any() else rmse(
            pred, data.prior.h, split.train_mask)
        grid[alpha] = score
        logger.info("sylvester alpha=%.2f iterations=%d val_rmse=%.4f", alpha, sol.iterations, score)
        if best is None or score < best[1]:
            best = (alpha, score, sol, pred)
    alpha, score, sol, pred = best
    test = rmse(pred, data.prior.h, split.test_mask) if split.test_mask.any() else float("nan")
    return SylvesterResult(alpha, score, test, sol, pred, grid)
