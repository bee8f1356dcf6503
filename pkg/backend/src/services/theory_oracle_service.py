"""
Theory Oracle Service Module

Monte Carlo checks of the expected excess-loss bound
    E[L(w_pre + theta) - L(w_star)] <= (L/2 + L_H delta / 6) (delta^2 + tr Sigma)
on synthetic scenarios where every constant is known exactly, plus the trace
Cauchy-Schwarz property behind the optimal mixing weight.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from errors import InvariantViolation
from models.quad_scenario import THEORY_COLUMNS, BoundCheck, QuadScenario, Which
from models.rng import Rng
from services.merge_service import optimal_weights

logger = logging.getLogger(__name__)

MIN_BOUND_SAMPLES = 10_000
MC_BATCH = 10_000
DEFAULT_LAMBDAS = (0.0, 0.25, 0.5, 0.75, 1.0)


def sample_joint(sc: QuadScenario, n: int, rng: Rng) -> Tuple[np.ndarray, np.ndarray]:
    """
    n exact draws of (theta_F, theta_L), each (n, d).

    Every coordinate pair is drawn through the Cholesky factor of its 2x2 block
    [[var_f, cross], [cross, var_l]].
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    vf, vl, vc = sc.var_f, sc.var_l, sc.var_cross
    if np.any(vc * vc > vf * vl * (1 + 1e-12)):
        raise InvariantViolation("Joint covariance block is not positive semidefinite")
    l11 = np.sqrt(vf)
    with np.errstate(divide="ignore", invalid="ignore"):
        l21 = np.where(l11 > 0, vc / np.where(l11 > 0, l11, 1.0), 0.0)
    l22 = np.sqrt(np.maximum(vl - l21 * l21, 0.0))
    z = rng.generator.standard_normal((2, n, sc.d))
    theta_f = sc.mu_f + l11 * z[0]
    theta_l = sc.mu_l + l21 * z[0] + l22 * z[1]
    return theta_f, theta_l


def bound_rhs(sc: QuadScenario, which: Which, lam: Optional[float] = None) -> float:
    """(L/2 + L_H delta / 6) * (delta^2 + tr Sigma)."""
    factor = sc.smoothness / 2.0 + sc.hessian_lipschitz * sc.delta / 6.0
    return factor * (sc.delta ** 2 + sc.trace(which, lam))


def _resolve_lambda(which: Which, lam: Optional[float]) -> float:
    if which == Which.FEDIT:
        return 1.0
    if which == Which.LOCAL:
        return 0.0
    if lam is None or not 0.0 <= lam <= 1.0:
        raise ValueError(f"Merge checks need lambda in [0, 1], got {lam}")
    return float(lam)


def _excess_batch(sc: QuadScenario, which: Which, lam: float, n: int, rng: Rng
                  ) -> Tuple[np.ndarray, int]:
    theta_f, theta_l = sample_joint(sc, n, rng)
    if which == Which.FEDIT:
        theta = theta_f
    elif which == Which.LOCAL:
        theta = theta_l
    else:
        theta = lam * theta_f + (1.0 - lam) * theta_l
    w = sc.w_pre + theta
    escapes = int(np.count_nonzero(np.linalg.norm(w - sc.w_star, axis=1) > sc.delta))
    return sc.loss(w), escapes


def check_bound(sc: QuadScenario, which: Which, rng: Rng, lam: Optional[float] = None,
                n: int = 100_000, workers: int = 1) -> BoundCheck:
    """
    Monte Carlo lhs (mean excess loss, with its standard error) against the
    bound. Draws are taken in fixed-size batches, each from its own child
    stream, and accumulated in batch order. Draws that leave the basin are
    counted, not truncated.
    """
    which = Which(which)
    lam = _resolve_lambda(which, lam)
    if n < MIN_BOUND_SAMPLES:
        raise ValueError(f"Bound checks need n >= {MIN_BOUND_SAMPLES}, got {n}")

    sizes = [MC_BATCH] * (n // MC_BATCH)
    if n % MC_BATCH:
        sizes.append(n % MC_BATCH)
    jobs = [(sc, which, lam, size, rng.child(f"batch{i}")) for i, size in enumerate(sizes)]
    if workers > 1 and len(jobs) > 1:
        parts = Parallel(n_jobs=workers, prefer="threads")(delayed(_excess_batch)(*job) for job in jobs)
    else:
        parts = [_excess_batch(*job) for job in jobs]

    excess = np.concatenate([p[0] for p in parts])
    escapes = sum(p[1] for p in parts)
    lhs = math.fsum(excess) / n
    stderr = float(np.std(excess, ddof=1) / math.sqrt(n))
    result = BoundCheck(sc.scenario_id, which, lam, lhs, stderr, bound_rhs(sc, which, lam), n, escapes)
    if escapes:
        logger.warning(f"Scenario {sc.scenario_id} {which.value} lambda={lam}: "
                       f"{escapes}/{n} draws left the basin")
    if not result.holds:
        logger.warning(f"Bound violated: scenario {sc.scenario_id} {which.value} lambda={lam} "
                       f"lhs={lhs:.6g} rhs={result.rhs:.6g}")
    return result


def expected_excess_exact(sc: QuadScenario, which: Which, lam: Optional[float] = None) -> float:
    """
    Closed-form E[excess] for pure quadratics:
    1/2 sum h_k (m_k^2 + var_k), m = w_pre + E[theta] - w_star.
    """
    if sc.c3 != 0:
        raise ValueError("The closed form only holds for pure quadratics (c3 = 0)")
    which = Which(which)
    lam = _resolve_lambda(which, lam)
    m = sc.w_pre + sc.mean(which, lam) - sc.w_star
    return 0.5 * math.fsum(sc.h * (m * m + sc.variance(which, lam)))


def _random_error(generator: np.random.Generator, d: int, radius: float) -> np.ndarray:
    direction = generator.standard_normal(d)
    direction /= np.linalg.norm(direction)
    return direction * radius * generator.uniform(0.0, 1.0)


def _random_variances(generator: np.random.Generator, d: int, budget: float) -> np.ndarray:
    weights = generator.uniform(0.1, 1.0, d)
    return budget * generator.uniform(0.1, 1.0) * weights / weights.sum()


def random_scenario(rng: Rng, d: int = 8, cubic: bool = False, scenario_id: int = 0) -> QuadScenario:
    """
    A scenario meeting every assumption of the bound.

    Both mean errors have norm <= delta/2 and each posterior trace is
    <= delta^2/144, so a draw 6 standard deviations out still lies in the basin.
    Cross variances are rho_k * min(var_f, var_l) with rho_k in [0, 1].
    """
    if d < 1:
        raise ValueError(f"d must be >= 1, got {d}")
    g = rng.generator
    smoothness = g.uniform(0.5, 2.0)
    h = g.uniform(0.0, smoothness, d)
    h[g.integers(d)] = smoothness
    delta = g.uniform(0.5, 2.0)
    w_star = g.standard_normal(d)
    w_pre = w_star + g.standard_normal(d)
    e_f = _random_error(g, d, delta / 2.0)
    e_l = _random_error(g, d, delta / 2.0)
    budget = delta ** 2 / 144.0
    var_f = _random_variances(g, d, budget)
    var_l = _random_variances(g, d, budget)
    var_cross = g.uniform(0.0, 1.0, d) * np.minimum(var_f, var_l)
    c3 = g.uniform(0.0, 0.5) * smoothness / delta if cubic else 0.0
    return QuadScenario(
        w_star=w_star, h=h, smoothness=smoothness, delta=delta, w_pre=w_pre,
        mu_f=w_star + e_f - w_pre, mu_l=w_star + e_l - w_pre,
        var_f=var_f, var_l=var_l, var_cross=var_cross, c3=c3, scenario_id=scenario_id,
    )


def optimal_lambda(sc: QuadScenario) -> float:
    a, b = sc.trace(Which.FEDIT), sc.trace(Which.LOCAL)
    c = min(math.fsum(sc.var_cross), a, b)
    return optimal_weights(a, b, c).lambda_fedit


def check_trace_cs(n_trials: int, rng: Rng, d: int = 16) -> int:
    """
    Count of random diagonal joint blocks with |tr S12| <= sqrt(tr S1 tr S2).

    Every trial draws per-coordinate correlations in [-1, 1], so all must pass.
    """
    if n_trials < 1:
        raise ValueError(f"n_trials must be >= 1, got {n_trials}")
    passes = 0
    for i in range(n_trials):
        g = rng.child(f"trial{i}").generator
        v1 = g.exponential(1.0, d)
        v2 = g.exponential(1.0, d)
        v12 = g.uniform(-1.0, 1.0, d) * np.sqrt(v1 * v2)
        lhs = abs(math.fsum(v12))
        rhs = math.sqrt(math.fsum(v1) * math.fsum(v2))
        if lhs <= rhs * (1 + 1e-12):
            passes += 1
    if passes < n_trials:
        logger.warning(f"Trace Cauchy-Schwarz failed in {n_trials - passes}/{n_trials} trials")
    return passes


@dataclass
class TheorySuiteResult:
    """Every bound check of a suite run plus the aggregate verdicts"""
    checks: List[BoundCheck] = field(default_factory=list)
    tighter_at_optimum: int = 0
    n_scenarios: int = 0
    cs_passes: int = 0
    cs_trials: int = 0
    escapes: int = 0

    @property
    def violations(self) -> int:
        return sum(1 for c in self.checks if not c.holds)

    @property
    def all_hold(self) -> bool:
        return (self.violations == 0 and self.cs_passes == self.cs_trials
                and self.tighter_at_optimum == self.n_scenarios)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([c.to_row() for c in self.checks], columns=THEORY_COLUMNS)


def check_suite_args(n_trials: int, n_samples: int, d: int, cs_trials: int, workers: int) -> None:
    """Raise ValueError on suite arguments that cannot produce a meaningful check."""
    if n_trials < 1:
        raise ValueError(f"n_trials must be >= 1, got {n_trials}")
    if n_samples < MIN_BOUND_SAMPLES:
        raise ValueError(f"Bound checks need n >= {MIN_BOUND_SAMPLES}, got {n_samples}")
    if d < 1:
        raise ValueError(f"d must be >= 1, got {d}")
    if cs_trials < 0:
        raise ValueError(f"cs_trials must be >= 0, got {cs_trials}")
    if workers < 1:
        raise ValueError(f"workers must be >= 1, got {workers}")


def run_theory_suite(n_trials: int, rng: Rng, n_samples: int = 100_000, d: int = 8,
                     lambdas: Sequence[float] = DEFAULT_LAMBDAS, cubic_every: int = 2,
                     cs_trials: int = 10_000, out_path: Optional[str] = None,
                     workers: int = 1) -> TheorySuiteResult:
    """
    Check FedIT, Local and Merge at every lambda in `lambdas` and at the
    trace-optimal lambda on n_trials random scenarios; every `cubic_every`-th
    scenario carries a cubic term. Writes theory.csv when out_path is given.
    """
    check_suite_args(n_trials, n_samples, d, cs_trials, workers)
    result = TheorySuiteResult(n_scenarios=n_trials, cs_trials=cs_trials)
    for i in range(n_trials):
        cubic = cubic_every > 0 and i % cubic_every == cubic_every - 1
        sc = random_scenario(rng.child(f"scenario{i}"), d=d, cubic=cubic, scenario_id=i)
        stream = rng.child(f"draws{i}")
        lam_star = optimal_lambda(sc)
        targets = [(Which.FEDIT, None), (Which.LOCAL, None)]
        targets += [(Which.MERGE, float(lam)) for lam in lambdas]
        targets.append((Which.MERGE, lam_star))
        for which, lam in targets:
            label = f"{which.value}:{lam!r}"
            check = check_bound(sc, which, stream.child(label), lam, n_samples, workers)
            result.checks.append(check)
            result.escapes += check.escapes
        rhs_star = bound_rhs(sc, Which.MERGE, lam_star)
        rhs_best_endpoint = min(bound_rhs(sc, Which.MERGE, 0.0), bound_rhs(sc, Which.MERGE, 1.0))
        if rhs_star <= rhs_best_endpoint * (1 + 1e-12):
            result.tighter_at_optimum += 1
        logger.debug(f"Scenario {i} (cubic={cubic}) checked, lambda*={lam_star:.4f}")

    if cs_trials > 0:
        result.cs_passes = check_trace_cs(cs_trials, rng.child("trace_cs"))
    logger.info(f"Theory suite: {len(result.checks)} checks, {result.violations} violations, "
                f"optimum tighter in {result.tighter_at_optimum}/{n_trials} scenarios, "
                f"{result.escapes} basin escapes")

    if out_path:
        try:
            result.to_frame().to_csv(out_path, index=False, float_format="%.17g")
        except OSError as e:
            logger.error(f"Failed to write {out_path}: {e}")
            raise
        logger.info(f"Wrote {out_path}")
    return result
