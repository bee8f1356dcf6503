"""
Posterior Data Models
Diagonal Laplace posteriors of trained task vectors and their cross-covariance.
"""

from dataclasses import dataclass
from enum import Enum

import numpy as np

from models.param_vector import ParamVector

DEFAULT_DAMPING = 1e-8
EXACT_LABEL_LIMIT = 32


class LabelMode(str, Enum):
    """How the expectation over labels in the Fisher is taken"""
    EXACT_EXPECTATION = "exact"
    MODEL_SAMPLED = "sampled"

    @classmethod
    def default_for(cls, n_classes: int) -> 'LabelMode':
        return cls.EXACT_EXPECTATION if n_classes <= EXACT_LABEL_LIMIT else cls.MODEL_SAMPLED


@dataclass(frozen=True, eq=False)
class GaussianDiag:
    """N(mean, diag(var)) with var = 1 / (Fisher + damping)"""
    mean: ParamVector
    var: ParamVector

    def __post_init__(self):
        self.mean.check_compatible(self.var)
        if np.any(self.var.flatten() < 0):
            raise ValueError("Posterior variances must be non-negative")

    def sample(self, generator: np.random.Generator) -> ParamVector:
        noise = generator.standard_normal(self.mean.size)
        return self.mean.from_flat(self.mean.flatten() + np.sqrt(self.var.flatten()) * noise)


@dataclass(frozen=True, eq=False)
class CrossDiag:
    """Clipped per-coordinate correlation and the resulting cross variances"""
    rho: ParamVector
    cross_var: ParamVector
    rho_raw: ParamVector
