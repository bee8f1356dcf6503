"""
Federated Service Module

FedIT orchestration: broadcast the shared LoRA blocks, run local SGD on every
client, upload per strategy, average uniformly. Local-only training runs the
same client kernel with no communication.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed

from models.adapted_model import AdaptedModel, LoraAdapter, ModelSpec, adapters_from_vector, adapters_to_vector
from models.dataset import ClientDataset, LabeledSet
from models.federated import (
    BYTES_PER_PARAM, CommLedger, Direction, FederatedConfig, FederatedRun,
    RoundMetrics, RoundState, Strategy, trajectory_rounds
)
from models.param_vector import ParamVector
from models.rng import Rng
from services.model_service import evaluate, role_mask, sgd_step

logger = logging.getLogger(__name__)


def aggregate_uniform(vectors: Sequence[ParamVector]) -> ParamVector:
    """
    Unweighted mean in the given order.

    Computed as v_0 + (sum of (v_i - v_0)) / K so that K identical inputs return
    v_0 bit-exactly.
    """
    if not vectors:
        raise ValueError("Cannot aggregate an empty list")
    ref = vectors[0]
    k = len(vectors)

    def _mean(*arrays):
        acc = np.zeros_like(arrays[0])
        for a in arrays[1:]:
            acc = acc + (a - arrays[0])
        return arrays[0] + acc / k

    for v in vectors[1:]:
        ref.check_compatible(v)
    return ParamVector.from_items(
        (name, _mean(*[v[name] for v in vectors])) for name in ref.names
    )


def round_batches(generator: np.random.Generator, n: int, batch_size: int,
                  local_iters: int) -> List[np.ndarray]:
    """
    Index batches for one round: a fresh permutation per round, consumed in
    slices without replacement, reshuffled when an epoch runs out.
    """
    size = min(batch_size, n)
    batches = []
    order = generator.permutation(n)
    pos = 0
    for _ in range(local_iters):
        if pos + size > n:
            order = generator.permutation(n)
            pos = 0
        batches.append(order[pos:pos + size])
        pos += size
    return batches


def _local_round(model: AdaptedModel, train: LabeledSet, batches: List[np.ndarray],
                 lr: float, wrt: List[str]) -> Tuple[Tuple[LoraAdapter, ...], float]:
    """The client kernel: SGD over the given batches; returns adapters and mean loss."""
    losses = []
    for idx in batches:
        model, loss = sgd_step(model, train.subset(idx), lr, wrt)
        losses.append(loss)
    return model.adapters, float(np.mean(losses))


def _shared_count(vector: ParamVector, strategy: Strategy) -> int:
    return vector.select(strategy.shared_roles).size


@dataclass
class _ClientSlot:
    client: ClientDataset
    generator: np.random.Generator
    vector: ParamVector
    losses: List[float] = field(default_factory=list)


def run_fedit(clients: Sequence[ClientDataset], template: AdaptedModel, config: FederatedConfig,
              rng: Rng, checkpoint_rounds: Sequence[int] = ()) -> FederatedRun:
    """
    Algorithm: for t = 1..T, broadcast -> local SGD -> upload -> uniform average.

    Blocks a strategy does not upload stay client-local across rounds. Clients
    are processed in ascending client_id; client i draws batches from
    rng.child(f"client{i}") only.
    """
    if not clients:
        raise ValueError("run_fedit needs at least one client")
    if config.batch_size < 1:
        raise ValueError("batch_size must be positive")
    strategy = config.strategy
    checkpoints_wanted = trajectory_rounds(checkpoint_rounds, config.rounds)
    ordered = sorted(clients, key=lambda c: c.client_id)
    wrt = role_mask(template, strategy.trained_roles)
    shared = strategy.shared_roles

    template_vector = template.adapter_vector()
    global_vector = template_vector
    slots = [
        _ClientSlot(c, rng.child(f"client{c.client_id}").generator, template_vector)
        for c in ordered
    ]
    ledger = CommLedger()
    n_shared = _shared_count(template_vector, strategy)
    checkpoints: Dict[int, RoundState] = {}
    metrics: List[RoundMetrics] = []
    state = _snapshot(0, global_vector, slots, shared)

    logger.info(f"Starting {strategy.value}: {len(ordered)} clients, {config.rounds} rounds, "
                f"{n_shared} shared parameters per client")

    for t in range(1, config.rounds + 1):
        # broadcast
        for slot in slots:
            if shared:
                slot.vector = slot.vector.replace(global_vector.select(shared))
                ledger.record(t, slot.client.client_id, Direction.DOWN, strategy, n_shared)

        # local training
        plans = [
            round_batches(slot.generator, len(slot.client.train), config.batch_size, config.local_iters)
            for slot in slots
        ]
        jobs = [
            (template.with_adapter_vector(slot.vector), slot.client.train, plan, config.lr, wrt)
            for slot, plan in zip(slots, plans)
        ]
        if config.workers > 1 and len(jobs) > 1:
            results = Parallel(n_jobs=config.workers, prefer="threads")(
                delayed(_local_round)(*job) for job in jobs)
        else:
            results = [_local_round(*job) for job in jobs]
        for slot, (adapters, loss) in zip(slots, results):
            slot.vector = adapters_to_vector(adapters)
            slot.losses = [loss]

        # upload + aggregate
        if shared:
            for slot in slots:
                ledger.record(t, slot.client.client_id, Direction.UP, strategy, n_shared)
            averaged = aggregate_uniform([slot.vector.select(shared) for slot in slots])
            global_vector = global_vector.replace(averaged)

        state = _snapshot(t, global_vector, slots, shared)
        if t in checkpoints_wanted:
            checkpoints[t] = state
        if t % config.eval_every == 0 or t == config.rounds:
            metrics.extend(_round_metrics(t, strategy, slots, state, template,
                                          BYTES_PER_PARAM * n_shared if shared else 0))
        logger.debug(f"{strategy.value} round {t} done")

    logger.info(f"{strategy.value} finished: {ledger.total(Direction.UP)} bytes uploaded")
    return FederatedRun(strategy, checkpoints, state, ledger, metrics)


def _snapshot(t: int, global_vector: ParamVector, slots: List[_ClientSlot],
              shared: Tuple[str, ...]) -> RoundState:
    """Client views combine the client's local blocks with the global shared blocks."""
    views = []
    for slot in slots:
        vector = slot.vector.replace(global_vector.select(shared)) if shared else slot.vector
        views.append(tuple(adapters_from_vector(vector)))
    return RoundState(t, tuple(adapters_from_vector(global_vector)), tuple(views))


def _round_metrics(t: int, strategy: Strategy, slots: List[_ClientSlot], state: RoundState,
                   template: AdaptedModel, transfer_bytes: int) -> List[RoundMetrics]:
    rows = []
    for slot, adapters in zip(slots, state.client_adapters):
        test_loss, test_acc = evaluate(template.with_adapters(adapters), slot.client.test)
        cid = slot.client.client_id
        rows.append(RoundMetrics(
            round_index=t, client_id=cid, strategy=strategy,
            train_loss=float(np.mean(slot.losses)), test_loss=test_loss, test_acc=test_acc,
            up_bytes=transfer_bytes, down_bytes=transfer_bytes,
        ))
    return rows


@dataclass(eq=False)
class LocalTrajectory:
    """Checkpoints of one client's purely local training"""
    client_id: int
    checkpoints: Dict[int, Tuple[LoraAdapter, ...]]
    final_adapters: Tuple[LoraAdapter, ...]
    metrics: List[RoundMetrics]


def run_local(client: ClientDataset, template: AdaptedModel, config: FederatedConfig, rng: Rng,
              checkpoint_rounds: Sequence[int] = ()) -> LocalTrajectory:
    """Same kernel and batch stream as the client's FedIT step, no communication."""
    run = run_fedit([client], template, config.with_strategy(Strategy.LOCAL_ONLY), rng,
                    checkpoint_rounds)
    return LocalTrajectory(
        client_id=client.client_id,
        checkpoints={t: s.client_adapters[0] for t, s in run.checkpoints.items()},
        final_adapters=run.final_state.client_adapters[0],
        metrics=run.metrics,
    )


def shared_params_per_round(spec: ModelSpec, strategy: Strategy) -> int:
    """Parameters one client uploads per round for a model spec."""
    strategy = Strategy(strategy)
    total = 0
    for _, m, n in spec.layer_shapes():
        total += ledger_predict(strategy, spec.rank, m, n, 1) // BYTES_PER_PARAM
    return total


def ledger_predict(strategy: Strategy, r: int, m: int, n: int, T: int, n_clients: int = 1) -> int:
    """
    Exact upload bytes of one adapted m x n layer over T rounds, summed over
    n_clients (n_clients=1 gives the per-client figure).
    """
    strategy = Strategy(strategy)
    if min(r, m, n) < 1 or T < 0 or n_clients < 0:
        raise ValueError(f"Invalid ledger dims r={r} m={m} n={n} T={T} n_clients={n_clients}")
    per_round = {
        Strategy.FEDIT: r * (m + n),
        Strategy.FEDSA: r * n,
        Strategy.FFA_LORA: r * m,
        Strategy.LOCAL_ONLY: 0,
    }[strategy]
    return BYTES_PER_PARAM * per_round * T * n_clients
