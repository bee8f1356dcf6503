"""
Merge Service Module

Trace-optimal mixing of a federated and a local LoRA task vector, the
Fisher-weighted merging baseline, the lambda grid-search oracle and the linear
interpolation scan between two full models.

A and B are merged as separate matrices, so the merged update is
(l B_F + (1-l) B_L)(l A_F + (1-l) A_L), not the convex combination of the two
products. lmc_scan interpolates effective weights and measures that gap.
"""

import logging
import math
from typing import List, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed

from errors import InvariantViolation, ShapeMismatchError
from models.adapted_model import AdaptedModel, LoraAdapter, ModelSpec, adapters_from_vector, adapters_to_vector
from models.dataset import LabeledSet
from models.merge_report import DEFAULT_DEGENERACY_TOL, GridSearchResult, LmcScan, MixingWeights
from models.param_vector import ParamVector, axpby
from models.posterior import DEFAULT_DAMPING
from services.model_service import evaluate, evaluate_weights

logger = logging.getLogger(__name__)


def optimal_weights(a: float, b: float, c: float,
                    tol: float = DEFAULT_DEGENERACY_TOL) -> MixingWeights:
    """
    lambda_F = (b - c) / (a + b - 2c), the minimizer of
    g(l) = a l^2 + b (1-l)^2 + 2 l (1-l) c.

    Falls back to 0.5 when a + b - 2c is within tol * (a + b) of zero, where g
    is constant in lambda.
    """
    for name, value in (("a", a), ("b", b), ("c", c)):
        if not math.isfinite(value) or value < 0:
            raise ValueError(f"Trace {name} must be finite and non-negative, got {value}")
    if c > min(a, b):
        raise InvariantViolation(f"Cross trace c={c} exceeds min(a={a}, b={b})")

    denom = a + b - 2.0 * c
    if a + b == 0 or denom <= tol * (a + b):
        logger.warning(f"Degenerate traces a={a} b={b} c={c}; using lambda = 0.5")
        return MixingWeights(0.5, a, b, c, degenerate=True)
    raw = (b - c) / denom
    lam = min(1.0, max(0.0, raw))
    if lam != raw:
        logger.warning(f"Clamped lambda {raw} into [0, 1]")
    return MixingWeights(lam, a, b, c)


def merge_vectors(fedit: ParamVector, local: ParamVector, weights: MixingWeights) -> ParamVector:
    if not fedit.is_compatible(local):
        raise ShapeMismatchError("FedIT and Local adapters have different layouts",
                                 block=fedit.mismatch(local))
    lam = weights.lambda_fedit
    if lam == 1.0 or fedit == local:
        return fedit
    if lam == 0.0:
        return local
    return axpby(lam, fedit, weights.lambda_local, local)


def merge_adapters(fedit: Sequence[LoraAdapter], local: Sequence[LoraAdapter],
                   weights: MixingWeights) -> List[LoraAdapter]:
    """Per-matrix convex combination: A = l A_F + (1-l) A_L, B likewise."""
    merged = merge_vectors(adapters_to_vector(fedit), adapters_to_vector(local), weights)
    return adapters_from_vector(merged)


def fisher_merge_baseline(models: Sequence[Tuple[ParamVector, ParamVector]],
                          damping: float = DEFAULT_DAMPING) -> ParamVector:
    """
    Per-coordinate sum_i F_i mu_i / (sum_i F_i + damping).

    Args:
        models: (mean, fisher) pairs sharing one layout, at least two
        damping: added to the Fisher denominator
    """
    if len(models) < 2:
        raise ValueError(f"Fisher merging needs at least 2 models, got {len(models)}")
    layout = models[0][0]
    for mean, fisher in models:
        if not layout.is_compatible(mean) or not layout.is_compatible(fisher):
            raise ShapeMismatchError("Fisher-merged models must share one layout",
                                     block=layout.mismatch(mean) or layout.mismatch(fisher))
        if np.any(fisher.flatten() < 0):
            raise ValueError("Fisher values must be non-negative")
    numerator = np.zeros(layout.size)
    denominator = np.zeros(layout.size)
    for mean, fisher in models:
        f = fisher.flatten()
        numerator += f * mean.flatten()
        denominator += f
    return layout.from_flat(numerator / (denominator + damping))


def _evaluate_merged(template: AdaptedModel, fedit: ParamVector, local: ParamVector,
                     lam: float, eval_set: LabeledSet) -> Tuple[float, float]:
    merged = merge_vectors(fedit, local, MixingWeights.fixed(lam))
    return evaluate(template.with_adapter_vector(merged), eval_set)


def grid_search_lambda(template: AdaptedModel, fedit: Sequence[LoraAdapter],
                       local: Sequence[LoraAdapter], grid: Sequence[float],
                       eval_set: LabeledSet, workers: int = 1) -> GridSearchResult:
    """
    Test loss and accuracy of the merged model at each grid lambda.

    The best lambda minimizes loss; ties go to the smaller lambda.
    """
    grid = tuple(float(g) for g in grid)
    if not grid:
        raise ValueError("Lambda grid must not be empty")
    if len(eval_set) == 0:
        raise ValueError("Evaluation set must not be empty")
    fedit_vector, local_vector = adapters_to_vector(fedit), adapters_to_vector(local)
    if workers > 1 and len(grid) > 1:
        points = Parallel(n_jobs=workers, prefer="threads")(
            delayed(_evaluate_merged)(template, fedit_vector, local_vector, lam, eval_set)
            for lam in grid)
    else:
        points = [_evaluate_merged(template, fedit_vector, local_vector, lam, eval_set) for lam in grid]

    losses = tuple(p[0] for p in points)
    accs = tuple(p[1] for p in points)
    best = min(range(len(grid)), key=lambda i: (losses[i], grid[i]))
    return GridSearchResult(grid[best], losses[best], accs[best], grid, losses, accs)


def lmc_scan(spec: ModelSpec, w1: ParamVector, w2: ParamVector, eval_set: LabeledSet,
             n_points: int = 11) -> LmcScan:
    """Loss of lambda * w1 + (1 - lambda) * w2 at n_points equispaced lambdas in [0, 1]."""
    if n_points < 2:
        raise ValueError(f"n_points must be >= 2, got {n_points}")
    if not w1.is_compatible(w2):
        raise ShapeMismatchError("Interpolated models have different layouts", block=w1.mismatch(w2))
    lambdas = tuple(float(v) for v in np.linspace(0.0, 1.0, n_points))
    losses, accs = [], []
    for lam in lambdas:
        if lam == 0.0:
            weights = w2
        elif lam == 1.0:
            weights = w1
        else:
            weights = axpby(lam, w1, 1.0 - lam, w2)
        loss, acc = evaluate_weights(spec, weights, eval_set)
        losses.append(loss)
        accs.append(acc)
    scan = LmcScan(lambdas, tuple(losses), tuple(accs))
    logger.debug(f"LMC scan over {n_points} points, barrier {scan.barrier:.4g}")
    return scan


def lmc_scan_models(model_1: AdaptedModel, model_2: AdaptedModel, eval_set: LabeledSet,
                    n_points: int = 11) -> LmcScan:
    return lmc_scan(model_1.spec, model_1.effective_weights(), model_2.effective_weights(),
                    eval_set, n_points)
