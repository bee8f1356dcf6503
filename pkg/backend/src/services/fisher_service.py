"""
Fisher Service Module

Diagonal Fisher information at a trained adapter mean, Laplace posterior
variances, and clipped gradient-correlation estimates of the cross-covariance
between a federated and a local posterior. Fisher and correlations are taken
over the LoRA factors A and B separately, never over the product BA.
"""

import logging
import math
from typing import Optional, Tuple

import numpy as np

from errors import InvariantViolation, ShapeMismatchError
from models.adapted_model import AdaptedModel
from models.dataset import as_labeled_set
from models.param_vector import ParamVector
from models.posterior import DEFAULT_DAMPING, CrossDiag, GaussianDiag, LabelMode
from models.rng import Rng
from services.model_service import per_sample_grad_matrix, predict_proba

logger = logging.getLogger(__name__)


def fisher_diag(model: AdaptedModel, batch, label_mode: Optional[LabelMode] = None,
                rng: Optional[Rng] = None, n_draws: int = 1) -> ParamVector:
    """
    F_k = (1/N) sum_n E_{y ~ p(.|x_n)} [(d log p(y|x_n) / d mu_k)^2].

    ExactExpectation weights every label by the model probability;
    ModelSampled draws n_draws labels per example from the model and uses the
    empirical label frequencies instead.
    """
    batch = as_labeled_set(batch)
    if len(batch) == 0:
        raise ValueError("Fisher batch must not be empty")
    spec = model.spec
    label_mode = LabelMode(label_mode) if label_mode is not None else LabelMode.default_for(spec.n_classes)
    n = len(batch)
    probs = predict_proba(model, batch.X)

    if label_mode == LabelMode.EXACT_EXPECTATION:
        weights = probs
    else:
        if rng is None:
            raise ValueError("ModelSampled Fisher needs an Rng")
        if n_draws < 1:
            raise ValueError(f"n_draws must be >= 1, got {n_draws}")
        generator = rng.generator
        weights = np.stack([generator.multinomial(n_draws, p / p.sum()) for p in probs]) / n_draws

    fisher = np.zeros(model.adapter_vector().size)
    for label in range(spec.n_classes):
        column = weights[:, label]
        if not np.any(column):
            continue
        grads = per_sample_grad_matrix(model, batch, labels=np.full(n, label))
        if not np.all(np.isfinite(grads)):
            raise InvariantViolation("Non-finite per-sample gradient in Fisher estimate")
        fisher += column @ (grads ** 2)
    fisher /= n
    logger.debug(f"Fisher ({label_mode.value}) over {n} examples: mean {fisher.mean():.3e}")
    return model.adapter_vector().from_flat(fisher)


def posterior_from_fisher(mean: ParamVector, fisher: ParamVector,
                          damping: float = DEFAULT_DAMPING) -> GaussianDiag:
    if damping <= 0:
        raise ValueError(f"damping must be > 0, got {damping}")
    return GaussianDiag(mean, fisher.map_values(lambda f: 1.0 / (f + damping)))


def gaussian_posterior(model: AdaptedModel, batch, label_mode: Optional[LabelMode] = None,
                       damping: float = DEFAULT_DAMPING, rng: Optional[Rng] = None,
                       n_draws: int = 1) -> Tuple[GaussianDiag, ParamVector]:
    """Laplace posterior at the trained adapters; also returns the Fisher itself."""
    fisher = fisher_diag(model, batch, label_mode, rng, n_draws)
    return posterior_from_fisher(model.adapter_vector(), fisher, damping), fisher


def clip_correlation(rho_raw: np.ndarray, var_f: np.ndarray, var_l: np.ndarray
                     ) -> Tuple[np.ndarray, np.ndarray]:
    """
    rho = max(0, min(rho_raw, rho_max)), rho_max = min(sqrt(vF/vL), sqrt(vL/vF)),
    cross = rho * sqrt(vF * vL). Returns (rho, cross) with 0 <= cross <= min(vF, vL).
    """
    var_f = np.asarray(var_f, dtype=np.float64)
    var_l = np.asarray(var_l, dtype=np.float64)
    if np.any(var_f < 0) or np.any(var_l < 0):
        raise ValueError("Variances must be non-negative")
    lo = np.minimum(var_f, var_l)
    hi = np.maximum(var_f, var_l)
    with np.errstate(divide="ignore", invalid="ignore"):
        rho_max = np.where(hi > 0, np.sqrt(lo / np.where(hi > 0, hi, 1.0)), 0.0)
    rho = np.clip(np.minimum(rho_raw, rho_max), 0.0, None)
    cross = np.minimum(rho * np.sqrt(var_f * var_l), lo)
    return rho, cross


def cross_corr(model_f: AdaptedModel, model_l: AdaptedModel, batch,
               var_f: ParamVector, var_l: ParamVector) -> CrossDiag:
    """
    Per-coordinate correlation of per-sample loss gradients (true labels) under
    the federated and local models on the same batch, clipped into a valid
    cross-covariance.
    """
    batch = as_labeled_set(batch)
    layout = model_f.adapter_vector()
    if not layout.is_compatible(model_l.adapter_vector()):
        raise ShapeMismatchError("FedIT and Local adapters have different layouts",
                                 block=layout.mismatch(model_l.adapter_vector()))
    layout.check_compatible(var_f)
    layout.check_compatible(var_l)
    if len(batch) < 2:
        raise ValueError("Cross-correlation needs a batch of at least 2 examples")

    g_f = per_sample_grad_matrix(model_f, batch)
    g_l = per_sample_grad_matrix(model_l, batch)
    d_f = g_f - g_f.mean(axis=0)
    d_l = g_l - g_l.mean(axis=0)
    var_gf = (d_f * d_f).mean(axis=0)
    var_gl = (d_l * d_l).mean(axis=0)
    cov = (d_f * d_l).mean(axis=0)
    denom = np.sqrt(var_gf) * np.sqrt(var_gl)
    with np.errstate(divide="ignore", invalid="ignore"):
        rho_raw = np.where(denom > 0, cov / np.where(denom > 0, denom, 1.0), 0.0)

    rho, cross = clip_correlation(rho_raw, var_f.flatten(), var_l.flatten())
    return CrossDiag(rho=layout.from_flat(rho), cross_var=layout.from_flat(cross),
                     rho_raw=layout.from_flat(rho_raw))


def traces(var_f: ParamVector, var_l: ParamVector, cross: CrossDiag) -> Tuple[float, float, float]:
    """(a, b, c) = (tr Sigma_F, tr Sigma_L, tr Sigma_Cross), each correctly rounded."""
    var_f.check_compatible(var_l)
    var_f.check_compatible(cross.cross_var)
    f, l, x = var_f.flatten(), var_l.flatten(), cross.cross_var.flatten()
    if np.any(f < 0) or np.any(l < 0):
        raise ValueError("Variances must be non-negative")
    a, b, c = math.fsum(f), math.fsum(l), math.fsum(x)
    if c < 0 or c > min(a, b):
        raise InvariantViolation(f"Cross trace {c} outside [0, min({a}, {b})]")
    return a, b, c
