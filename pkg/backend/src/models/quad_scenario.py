"""
Quadratic Scenario Data Models
Synthetic losses with exactly known curvature, used to check the excess-loss bound.
"""

import math
from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, Optional

import numpy as np

from errors import InvariantViolation

THEORY_COLUMNS = ['scenario_id', 'which', 'lambda', 'lhs', 'lhs_stderr', 'rhs', 'holds']
_PSD_TOL = 1e-12


class Which(str, Enum):
    """Which posterior a bound check draws from"""
    FEDIT = "FedIT"
    LOCAL = "Local"
    MERGE = "Merge"


def _vec(values, d: int, name: str) -> np.ndarray:
    arr = np.array(values, dtype=np.float64).reshape(-1)
    if arr.shape != (d,):
        raise ValueError(f"{name} must have {d} entries, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class QuadScenario:
    """
    Loss L(w) = 1/2 sum h_k e_k^2 + c3 sum |e_k|^3 with e = w - w_star.

    The Hessian at the optimum is diag(h) <= L I and the Hessian is 6 c3
    Lipschitz. Model draws are w_pre + theta, where (theta_F, theta_L) is a
    coordinate-wise joint Gaussian with diagonal blocks var_f, var_l, var_cross.
    """
    w_star: np.ndarray
    h: np.ndarray
    smoothness: float
    delta: float
    w_pre: np.ndarray
    mu_f: np.ndarray
    mu_l: np.ndarray
    var_f: np.ndarray
    var_l: np.ndarray
    var_cross: np.ndarray
    c3: float = 0.0
    scenario_id: int = 0

    def __post_init__(self):
        d = np.asarray(self.w_star).size
        if d < 1:
            raise ValueError("Scenario dimension must be >= 1")
        for name in ("w_star", "h", "w_pre", "mu_f", "mu_l", "var_f", "var_l", "var_cross"):
            object.__setattr__(self, name, _vec(getattr(self, name), d, name))
        if not self.smoothness > 0 or not self.delta > 0 or self.c3 < 0:
            raise ValueError("Scenario needs L > 0, delta > 0 and c3 >= 0")
        if np.any(self.h < 0) or np.any(self.h > self.smoothness):
            raise InvariantViolation("Curvature must satisfy 0 <= H <= L I")
        if np.any(self.var_f < 0) or np.any(self.var_l < 0):
            raise InvariantViolation("Posterior variances must be non-negative")
        if np.any(self.var_cross < 0) or np.any(self.var_cross > np.minimum(self.var_f, self.var_l)):
            raise InvariantViolation("Cross covariance must satisfy 0 <= Sigma_Cross <= Sigma_F, Sigma_L")
        for lam in (0.0, 1.0):
            # the error norm is convex in lambda, so the endpoints bound the segment
            if self.endpoint_error_norm(lam) > self.delta * (1 + _PSD_TOL):
                raise InvariantViolation(
                    f"Mean model at lambda={lam} lies outside the basin of radius {self.delta}"
                )

    @property
    def d(self) -> int:
        return self.w_star.size

    @property
    def hessian_lipschitz(self) -> float:
        return 6.0 * self.c3

    def mean(self, which: Which, lam: Optional[float] = None) -> np.ndarray:
        which = Which(which)
        if which == Which.FEDIT:
            return self.mu_f
        if which == Which.LOCAL:
            return self.mu_l
        return lam * self.mu_f + (1.0 - lam) * self.mu_l

    def variance(self, which: Which, lam: Optional[float] = None) -> np.ndarray:
        """Diagonal covariance; Merge is l^2 S_F + (1-l)^2 S_L + 2 l (1-l) S_Cross."""
        which = Which(which)
        if which == Which.FEDIT:
            return self.var_f
        if which == Which.LOCAL:
            return self.var_l
        return (lam * lam * self.var_f + (1.0 - lam) ** 2 * self.var_l
                + 2.0 * lam * (1.0 - lam) * self.var_cross)

    def trace(self, which: Which, lam: Optional[float] = None) -> float:
        return math.fsum(self.variance(which, lam))

    def endpoint_error_norm(self, lam: float) -> float:
        return float(np.linalg.norm(self.w_pre + self.mean(Which.MERGE, lam) - self.w_star))

    def loss(self, w: np.ndarray) -> np.ndarray:
        """Loss of one model (d,) or a batch (n, d); the optimum has loss 0."""
        e = np.asarray(w, dtype=np.float64) - self.w_star
        return 0.5 * (e * e) @ self.h + self.c3 * (np.abs(e) ** 3).sum(axis=-1)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'scenario_id': self.scenario_id,
            'd': self.d,
            'L': self.smoothness,
            'L_H': self.hessian_lipschitz,
            'delta': self.delta,
            'trace_f': self.trace(Which.FEDIT),
            'trace_l': self.trace(Which.LOCAL),
            'trace_cross': math.fsum(self.var_cross),
        }


@dataclass(frozen=True)
class BoundCheck:
    """Monte Carlo expected excess loss against the bound for one posterior"""
    scenario_id: int
    which: Which
    lam: float
    lhs: float
    lhs_stderr: float
    rhs: float
    n: int
    escapes: int = 0

    @property
    def holds(self) -> bool:
        return self.lhs - 3.0 * self.lhs_stderr <= self.rhs

    def to_row(self) -> Dict[str, Any]:
        return {
            'scenario_id': self.scenario_id,
            'which': Which(self.which).value,
            'lambda': self.lam,
            'lhs': self.lhs,
            'lhs_stderr': self.lhs_stderr,
            'rhs': self.rhs,
            'holds': self.holds,
        }
