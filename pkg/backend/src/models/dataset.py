"""
Client Dataset Data Models
Labeled examples, client datasets and partition specifications.
"""

from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, Iterator, Sequence

import numpy as np


class PartitionMode(str, Enum):
    """Heterogeneity regime used to split the pool across clients"""
    DIRICHLET_SKEW = "dirichlet"
    DISTINCT_TASKS = "distinct_tasks"


class TaskKind(str, Enum):
    """How distinct client tasks are derived from the base pool"""
    IDENTITY = "identity"
    LABEL_PERMUTATION = "permutation"
    INPUT_ROTATION = "rotation"


@dataclass(frozen=True)
class Example:
    """A single labeled example"""
    x: np.ndarray
    y: int


@dataclass(frozen=True, eq=False)
class LabeledSet:
    """
    Array-backed list of examples: X is (N, d_in) float64, y is (N,) int64.

    Iterating yields Example objects; models consume X and y directly.
    """
    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        X = np.array(self.X, dtype=np.float64, copy=True)
        y = np.array(self.y, dtype=np.int64, copy=True).reshape(-1)
        if X.ndim == 1:
            X = X.reshape(len(y), -1) if len(y) else X.reshape(0, 0)
        if X.ndim != 2 or X.shape[0] != y.shape[0]:
            raise ValueError(f"Feature matrix {X.shape} does not match {y.shape[0]} labels")
        if not np.all(np.isfinite(X)):
            raise ValueError("Feature vectors must be finite")
        if np.any(y < 0):
            raise ValueError("Labels must be non-negative")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @classmethod
    def from_examples(cls, examples: Sequence[Example]) -> "LabeledSet":
        if not examples:
            return cls(np.zeros((0, 0)), np.zeros(0, dtype=np.int64))
        return cls(np.stack([np.asarray(e.x, dtype=np.float64) for e in examples]),
                   np.array([int(e.y) for e in examples], dtype=np.int64))

    def __len__(self) -> int:
        return int(self.y.shape[0])

    def __iter__(self) -> Iterator[Example]:
        for i in range(len(self)):
            yield Example(self.X[i], int(self.y[i]))

    @property
    def d_in(self) -> int:
        return int(self.X.shape[1])

    def subset(self, indices: Sequence[int]) -> "LabeledSet":
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledSet(self.X[indices], self.y[indices])

    def concat(self, other: "LabeledSet") -> "LabeledSet":
        return LabeledSet(np.vstack([self.X, other.X]), np.concatenate([self.y, other.y]))

    def class_histogram(self, n_classes: int) -> np.ndarray:
        return np.bincount(self.y, minlength=n_classes)


def as_labeled_set(batch) -> LabeledSet:
    """Accept a LabeledSet or any sequence of Example."""
    if isinstance(batch, LabeledSet):
        return batch
    return LabeledSet.from_examples(list(batch))


@dataclass(frozen=True, eq=False)
class ClientDataset:
    """Train/test data owned by one client"""
    client_id: int
    train: LabeledSet
    test: LabeledSet
    task_tag: str = "identity"

    def __post_init__(self):
        if len(self.train) == 0 or len(self.test) == 0:
            raise ValueError(f"Client {self.client_id} needs nonempty train and test sets")

    def to_dict(self) -> Dict[str, Any]:
        """Summary for logs and summary.json"""
        return {
            'client_id': self.client_id,
            'task_tag': self.task_tag,
            'n_train': len(self.train),
            'n_test': len(self.test),
        }


@dataclass(frozen=True)
class PartitionSpec:
    """How the base pool is split into client datasets"""
    mode: PartitionMode = PartitionMode.DIRICHLET_SKEW
    n_clients: int = 8
    samples_per_client_train: int = 100
    samples_per_client_test: int = 100
    alpha: float = 0.5
    task_kind: TaskKind = TaskKind.INPUT_ROTATION
    max_angle_deg: float = 90.0

    def __post_init__(self):
        object.__setattr__(self, "mode", PartitionMode(self.mode))
        object.__setattr__(self, "task_kind", TaskKind(self.task_kind))
        if self.n_clients < 1:
            raise ValueError(f"n_clients must be >= 1, got {self.n_clients}")
        if self.mode == PartitionMode.DIRICHLET_SKEW and not self.alpha > 0:
            raise ValueError(f"Dirichlet alpha must be > 0, got {self.alpha}")
        if self.samples_per_client_train < 1 or self.samples_per_client_test < 1:
            raise ValueError("Per-client train and test sizes must be positive")

    def to_dict(self) -> Dict[str, Any]:
        return {
            'mode': self.mode.value,
            'n_clients': self.n_clients,
            'samples_per_client_train': self.samples_per_client_train,
            'samples_per_client_test': self.samples_per_client_test,
            'alpha': self.alpha,
            'task_kind': self.task_kind.value,
            'max_angle_deg': self.max_angle_deg,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'PartitionSpec':
        return cls(
            mode=data.get('mode', PartitionMode.DIRICHLET_SKEW.value),
            n_clients=int(data.get('n_clients', 8)),
            samples_per_client_train=int(data.get('samples_per_client_train', 100)),
            samples_per_client_test=int(data.get('samples_per_client_test', 100)),
            alpha=float(data.get('alpha', 0.5)),
            task_kind=data.get('task_kind', TaskKind.INPUT_ROTATION.value),
            max_angle_deg=float(data.get('max_angle_deg', 90.0)),
        )


@dataclass(frozen=True)
class PoolConfig:
    """Gaussian-mixture generator for the base example pool"""
    n_classes: int = 4
    d_in: int = 8
    samples_per_class: int = 500
    margin: float = 6.0
    noise_std: float = 1.0

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError(f"n_classes must be >= 2, got {self.n_classes}")
        if self.d_in < 1 or self.samples_per_class < 1:
            raise ValueError("d_in and samples_per_class must be positive")
        if self.margin < 0 or self.noise_std <= 0:
            raise ValueError("margin must be >= 0 and noise_std > 0")

    def to_dict(self) -> Dict[str, Any]:
        return {
            'n_classes': self.n_classes,
            'd_in': self.d_in,
            'samples_per_class': self.samples_per_class,
            'margin': self.margin,
            'noise_std': self.noise_std,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'PoolConfig':
        return cls(
            n_classes=int(data.get('n_classes', 4)),
            d_in=int(data.get('d_in', 8)),
            samples_per_class=int(data.get('samples_per_class', 500)),
            margin=float(data.get('margin', 6.0)),
            noise_std=float(data.get('noise_std', 1.0)),
        )
