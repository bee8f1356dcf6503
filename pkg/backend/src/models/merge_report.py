"""
Merge Data Models
Mixing weights, grid-search and interpolation curves, and per-client merge results.
"""

from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import pandas as pd

from errors import InvariantViolation

DEFAULT_DEGENERACY_TOL = 1e-15
DEFAULT_GRID = tuple(i / 10 for i in range(11))
TRACE_SLACK = 1e-12

MERGE_COLUMNS = ['client', 'a', 'b', 'c', 'lambda_fedit', 'pred_trace', 'acc_fedit',
                 'acc_local', 'acc_merged', 'lambda_grid', 'acc_grid']


@dataclass(frozen=True)
class MixingWeights:
    """Convex weights of the federated and local task vectors"""
    lambda_fedit: float
    a: float
    b: float
    c: float
    degenerate: bool = False

    @property
    def lambda_local(self) -> float:
        return 1.0 - self.lambda_fedit

    @property
    def predicted_trace(self) -> float:
        """g(lambda) = a l^2 + b (1-l)^2 + 2 l (1-l) c"""
        lam = self.lambda_fedit
        return self.a * lam * lam + self.b * (1 - lam) ** 2 + 2 * lam * (1 - lam) * self.c

    @classmethod
    def fixed(cls, lambda_fedit: float) -> 'MixingWeights':
        """Weights for an explicit lambda, with no trace information."""
        if not 0.0 <= lambda_fedit <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {lambda_fedit}")
        return cls(float(lambda_fedit), 0.0, 0.0, 0.0)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'lambda_fedit': self.lambda_fedit,
            'lambda_local': self.lambda_local,
            'a': self.a,
            'b': self.b,
            'c': self.c,
            'degenerate': self.degenerate,
            'pred_trace': self.predicted_trace,
        }


@dataclass(frozen=True)
class GridSearchResult:
    best_lambda: float
    best_loss: float
    best_acc: float
    grid: Tuple[float, ...]
    losses: Tuple[float, ...]
    accs: Tuple[float, ...]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({'lambda': self.grid, 'loss': self.losses, 'acc': self.accs},
                            columns=['lambda', 'loss', 'acc'])


@dataclass(frozen=True)
class LmcScan:
    """Loss along lambda * w1 + (1 - lambda) * w2; curve[0] is w2, curve[-1] is w1"""
    lambdas: Tuple[float, ...]
    losses: Tuple[float, ...]
    accs: Tuple[float, ...]

    @property
    def barrier(self) -> float:
        return max(self.losses) - max(self.losses[0], self.losses[-1])

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({'lambda': self.lambdas, 'loss': self.losses, 'acc': self.accs},
                            columns=['lambda', 'loss', 'acc'])


@dataclass
class ClientMergeResult:
    """One merge.csv row plus the per-method accuracies that feed the summary"""
    client_id: int
    weights: MixingWeights
    acc_fedit: float
    acc_local: float
    acc_merged: float
    lambda_grid: Optional[float] = None
    acc_grid: Optional[float] = None
    acc_fisher_merge: Optional[float] = None
    barrier: Optional[float] = None

    def to_row(self) -> Dict[str, Any]:
        return {
            'client': self.client_id,
            'a': self.weights.a,
            'b': self.weights.b,
            'c': self.weights.c,
            'lambda_fedit': self.weights.lambda_fedit,
            'pred_trace': self.weights.predicted_trace,
            'acc_fedit': self.acc_fedit,
            'acc_local': self.acc_local,
            'acc_merged': self.acc_merged,
            'lambda_grid': self.lambda_grid,
            'acc_grid': self.acc_grid,
        }


@dataclass
class MergeReport:
    """Per-client merge outcomes for one FedIT checkpoint round"""
    fedit_round: int
    clients: List[ClientMergeResult] = field(default_factory=list)

    def __post_init__(self):
        for result in self.clients:
            self._check(result)

    @staticmethod
    def _check(result: ClientMergeResult) -> None:
        w = result.weights
        bound = min(w.a, w.b)
        if w.predicted_trace > bound + TRACE_SLACK * max(1.0, bound):
            raise InvariantViolation(
                f"Client {result.client_id}: predicted trace {w.predicted_trace} exceeds min({w.a}, {w.b})"
            )

    def add(self, result: ClientMergeResult) -> None:
        self._check(result)
        self.clients.append(result)

    def to_frame(self) -> pd.DataFrame:
        ordered = sorted(self.clients, key=lambda r: r.client_id)
        return pd.DataFrame([r.to_row() for r in ordered], columns=MERGE_COLUMNS)

    def mean(self, attribute: str) -> Optional[float]:
        values = [getattr(r, attribute) for r in self.clients if getattr(r, attribute) is not None]
        if not values:
            return None
        return float(sum(values) / len(values))
