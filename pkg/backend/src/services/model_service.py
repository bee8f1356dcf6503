"""
Model Service Module

Forward pass, exact backpropagation and SGD for the desk-scale adapted models.
Gradients are taken with respect to the LoRA factors only; the base weights are
touched solely by `pretrain_base`, which produces W_Pre before adaptation.
"""

import json
import logging
import os
from typing import Collection, Dict, List, Optional, Tuple

import numpy as np
from sklearn.metrics import accuracy_score

from models.adapted_model import AdaptedModel, Architecture, ModelSpec, adapters_from_vector
from models.dataset import LabeledSet, as_labeled_set
from models.param_vector import ROLE_BASE, ROLE_LORA_A, ROLE_LORA_B, ParamVector, block_role
from models.rng import Rng
from services.pvec_codec import load_pvec, save_pvec

logger = logging.getLogger(__name__)


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _layer_weights(spec: ModelSpec, weights: ParamVector) -> List[np.ndarray]:
    return [weights[f"{name}.{ROLE_BASE}"] for name, _, _ in spec.layer_shapes()]


def _check_inputs(spec: ModelSpec, X: np.ndarray) -> None:
    if X.ndim != 2 or X.shape[1] != spec.d_in:
        raise ValueError(f"Expected inputs of dimension {spec.d_in}, got shape {X.shape}")


def _forward_cache(spec: ModelSpec, weights: List[np.ndarray], X: np.ndarray):
    """Logits plus the per-layer inputs (and hidden activations) backprop needs."""
    if spec.architecture == Architecture.LINEAR_SOFTMAX:
        (W,) = weights
        return X @ W.T, [X], None
    W1, W2 = weights
    h = np.tanh(X @ W1.T)
    return h @ W2.T, [X, h], h


def _layer_deltas(spec: ModelSpec, weights: List[np.ndarray],
                  hidden: Optional[np.ndarray], out_delta: np.ndarray) -> List[np.ndarray]:
    """dLoss/d(pre-activation) per layer and per sample, in layer order."""
    if spec.architecture == Architecture.LINEAR_SOFTMAX:
        return [out_delta]
    _, W2 = weights
    hidden_delta = (out_delta @ W2) * (1.0 - hidden ** 2)
    return [hidden_delta, out_delta]


def forward_weights(spec: ModelSpec, weights: ParamVector, X: np.ndarray) -> np.ndarray:
    """Class probabilities (N, n_classes) for full effective weights."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    _check_inputs(spec, X)
    logits, _, _ = _forward_cache(spec, _layer_weights(spec, weights), X)
    return _softmax(logits)


def predict_proba(model: AdaptedModel, X: np.ndarray) -> np.ndarray:
    return forward_weights(model.spec, model.effective_weights(), X)


def forward(model: AdaptedModel, x: np.ndarray) -> np.ndarray:
    """Probability vector for a single input x of dimension d_in."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != model.spec.d_in:
        raise ValueError(f"Expected input of dimension {model.spec.d_in}, got shape {x.shape}")
    return predict_proba(model, x[None, :])[0]


def adapter_block_names(model: AdaptedModel) -> List[str]:
    return model.adapter_vector().names


def role_mask(model: AdaptedModel, roles: Collection[str]) -> List[str]:
    """Adapter block names whose role is in `roles`."""
    return [name for name in adapter_block_names(model) if block_role(name) in roles]


def _resolve_mask(model: AdaptedModel, wrt: Optional[Collection[str]]) -> set:
    names = adapter_block_names(model)
    if wrt is None:
        return set(names)
    unknown = [w for w in wrt if w not in names]
    if unknown:
        raise ValueError(f"Gradient mask may only select adapter blocks, got {unknown}")
    return set(wrt)


def _labels_in_range(spec: ModelSpec, y: np.ndarray) -> None:
    if y.size and (y.min() < 0 or y.max() >= spec.n_classes):
        raise ValueError(f"Labels must lie in [0, {spec.n_classes})")


def _per_sample_adapter_grads(model: AdaptedModel, X: np.ndarray, y: np.ndarray
                              ) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
    """Per-sample losses (N,) and per-sample gradients {block: (N, *shape)}."""
    spec = model.spec
    _check_inputs(spec, X)
    _labels_in_range(spec, y)
    weights = _layer_weights(spec, model.effective_weights())
    logits, inputs, hidden = _forward_cache(spec, weights, X)
    log_p = _log_softmax(logits)
    rows = np.arange(len(y))
    losses = -log_p[rows, y]
    out_delta = np.exp(log_p)
    out_delta[rows, y] -= 1.0
    deltas = _layer_deltas(spec, weights, hidden, out_delta)

    grads = {}
    for adapter, delta, layer_in in zip(model.adapters, deltas, inputs):
        grads[f"{adapter.layer_name}.{ROLE_LORA_A}"] = np.einsum(
            "nr,nk->nrk", delta @ adapter.B, layer_in)
        grads[f"{adapter.layer_name}.{ROLE_LORA_B}"] = np.einsum(
            "nm,nr->nmr", delta, layer_in @ adapter.A.T)
    return losses, grads


def per_sample_grad_matrix(model: AdaptedModel, batch, labels: Optional[np.ndarray] = None
                           ) -> np.ndarray:
    """(N, D) per-sample loss gradients flattened in adapter-vector order."""
    batch = as_labeled_set(batch)
    if len(batch) == 0:
        raise ValueError("Batch must not be empty")
    y = batch.y if labels is None else np.asarray(labels, dtype=np.int64)
    _, grads = _per_sample_adapter_grads(model, batch.X, y)
    n = len(batch)
    return np.concatenate(
        [grads[name].reshape(n, -1) for name in adapter_block_names(model)], axis=1)


def per_sample_grads(model: AdaptedModel, batch) -> List[ParamVector]:
    """One adapter-coordinate gradient per example, in input order."""
    matrix = per_sample_grad_matrix(model, batch)
    layout = model.adapter_vector()
    return [layout.from_flat(row) for row in matrix]


def loss_and_grad(model: AdaptedModel, batch, wrt: Optional[Collection[str]] = None
                  ) -> Tuple[float, ParamVector]:
    """
    Mean cross-entropy and its gradient over the adapter layout.

    Blocks outside `wrt` (a collection of adapter block names; default all) come
    back as exact zeros.
    """
    batch = as_labeled_set(batch)
    if len(batch) == 0:
        raise ValueError("Batch must not be empty")
    mask = _resolve_mask(model, wrt)
    spec = model.spec
    _check_inputs(spec, batch.X)
    _labels_in_range(spec, batch.y)
    n = len(batch)

    weights = _layer_weights(spec, model.effective_weights())
    logits, inputs, hidden = _forward_cache(spec, weights, batch.X)
    log_p = _log_softmax(logits)
    rows = np.arange(n)
    loss = float(-log_p[rows, batch.y].mean())
    out_delta = np.exp(log_p)
    out_delta[rows, batch.y] -= 1.0
    deltas = _layer_deltas(spec, weights, hidden, out_delta)

    items = []
    for adapter, delta, layer_in in zip(model.adapters, deltas, inputs):
        name_a = f"{adapter.layer_name}.{ROLE_LORA_A}"
        name_b = f"{adapter.layer_name}.{ROLE_LORA_B}"
        grad_a = (delta @ adapter.B).T @ layer_in / n
        grad_b = delta.T @ (layer_in @ adapter.A.T) / n
        items.append((name_a, grad_a if name_a in mask else np.zeros_like(adapter.A)))
        items.append((name_b, grad_b if name_b in mask else np.zeros_like(adapter.B)))
    return loss, ParamVector.from_items(items)


def sgd_step(model: AdaptedModel, batch, lr: float,
             wrt: Optional[Collection[str]] = None) -> Tuple[AdaptedModel, float]:
    loss, grad = loss_and_grad(model, batch, wrt)
    updated = model.adapter_vector().zip_values(grad, lambda p, g: p - lr * g)
    return AdaptedModel(model.spec, model.base, tuple(adapters_from_vector(updated))), loss


def evaluate_weights(spec: ModelSpec, weights: ParamVector, dataset: LabeledSet) -> Tuple[float, float]:
    """(mean cross-entropy, accuracy) of full effective weights on a dataset."""
    if len(dataset) == 0:
        raise ValueError("Evaluation set must not be empty")
    probs = forward_weights(spec, weights, dataset.X)
    rows = np.arange(len(dataset))
    loss = float(-np.log(np.maximum(probs[rows, dataset.y], np.finfo(np.float64).tiny)).mean())
    acc = float(accuracy_score(dataset.y, probs.argmax(axis=1)))
    return loss, acc


def evaluate(model: AdaptedModel, dataset: LabeledSet) -> Tuple[float, float]:
    return evaluate_weights(model.spec, model.effective_weights(), dataset)


def init_base(spec: ModelSpec, rng: Rng, init_std: float = 0.1) -> ParamVector:
    return ParamVector.from_items(
        (f"{name}.{ROLE_BASE}", rng.child(f"base.{name}").generator.normal(0.0, init_std, size=(m, n)))
        for name, m, n in spec.layer_shapes()
    )


def pretrain_base(spec: ModelSpec, pool: LabeledSet, rng: Rng, steps: int = 50,
                  lr: float = 0.1, batch_size: int = 32, init_std: float = 0.1) -> ParamVector:
    """
    Produce the frozen W_Pre: full-weight minibatch SGD on the untransformed pool.

    steps=0 returns the random initialization unchanged.
    """
    base = init_base(spec, rng.child("init"), init_std)
    if steps <= 0:
        return base
    if len(pool) == 0:
        raise ValueError("Pretraining pool must not be empty")
    generator = rng.child("batches").generator
    weights = _layer_weights(spec, base)
    n = len(pool)
    size = min(batch_size, n)
    loss = float("nan")
    for _ in range(steps):
        idx = generator.choice(n, size=size, replace=False)
        X, y = pool.X[idx], pool.y[idx]
        logits, inputs, hidden = _forward_cache(spec, weights, X)
        log_p = _log_softmax(logits)
        rows = np.arange(size)
        loss = float(-log_p[rows, y].mean())
        out_delta = np.exp(log_p)
        out_delta[rows, y] -= 1.0
        deltas = _layer_deltas(spec, weights, hidden, out_delta)
        weights = [W - lr * (delta.T @ layer_in) / size
                   for W, delta, layer_in in zip(weights, deltas, inputs)]
    logger.info(f"Pretrained base for {steps} steps, final batch loss {loss:.4f}")
    return ParamVector.from_items(
        (f"{name}.{ROLE_BASE}", W) for (name, _, _), W in zip(spec.layer_shapes(), weights)
    )


def model_to_vector(model: AdaptedModel) -> ParamVector:
    """Base blocks followed by adapter blocks."""
    return ParamVector(model.base.blocks + model.adapter_vector().blocks)


def save_model(model: AdaptedModel, path: str) -> None:
    """Write `<stem>.pvec` plus the `<stem>.json` architecture descriptor."""
    save_pvec(model_to_vector(model), path)
    sidecar = os.path.splitext(path)[0] + ".json"
    try:
        with open(sidecar, "w", encoding="utf-8") as f:
            json.dump(model.spec.to_dict(), f, sort_keys=True)
    except OSError as e:
        logger.error(f"Failed to write descriptor {sidecar}: {e}")
        raise


def load_model(path: str) -> AdaptedModel:
    sidecar = os.path.splitext(path)[0] + ".json"
    try:
        with open(sidecar, "r", encoding="utf-8") as f:
            spec = ModelSpec.from_dict(json.load(f))
    except OSError as e:
        logger.error(f"Failed to read descriptor {sidecar}: {e}")
        raise
    vector = load_pvec(path)
    base = vector.select([ROLE_BASE])
    adapters = adapters_from_vector(vector.select([ROLE_LORA_A, ROLE_LORA_B]))
    return AdaptedModel(spec, base, tuple(adapters))
