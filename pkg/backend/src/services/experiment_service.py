"""
Experiment Service Module

The end-to-end pipeline: data -> base pretraining -> FedIT and baseline
strategies -> local training -> per-client Fisher and cross-covariance ->
trace-optimal merge -> evaluation -> artifacts. Every random draw descends from
Rng(config.seed), and all strategies share one training stream, so a client
sees the same mini-batches under every strategy.
"""

import logging
import os
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd

from models.adapted_model import AdaptedModel
from models.dataset import ClientDataset, LabeledSet, PartitionMode
from models.experiment_config import ExperimentConfig
from models.federated import Direction, FederatedConfig, FederatedRun, Strategy
from models.merge_report import ClientMergeResult, MergeReport
from models.rng import Rng
from services.data_service import make_base_pool, make_task_transforms, partition_dirichlet, partition_distinct_tasks
from services.federated_service import run_fedit
from services.fisher_service import cross_corr, gaussian_posterior, traces
from services.merge_service import (
    fisher_merge_baseline, grid_search_lambda, lmc_scan_models, merge_adapters, optimal_weights
)
from services.model_service import evaluate, pretrain_base, save_model
from services.pvec_codec import save_pvec
from services.report_service import method_entry, run_metadata, write_csv, write_json

logger = logging.getLogger(__name__)


@dataclass
class ExperimentResult:
    """Everything a run produced, keyed for tests and the CLI"""
    config: ExperimentConfig
    clients: List[ClientDataset]
    runs: Dict[Strategy, FederatedRun]
    local_run: Optional[FederatedRun]
    reports: Dict[int, MergeReport] = field(default_factory=dict)
    summary: Dict[str, Any] = field(default_factory=dict)
    artifacts: Dict[str, str] = field(default_factory=dict)

    @property
    def report(self) -> Optional[MergeReport]:
        return self.reports.get(self.config.training.merge_round)


def build_pool(config: ExperimentConfig, rng: Rng) -> LabeledSet:
    """Base pool; Dirichlet pools grow so every client can be filled."""
    part = config.partition
    pool_config = config.pool
    if part.mode == PartitionMode.DIRICHLET_SKEW:
        needed = part.n_clients * (part.samples_per_client_train + part.samples_per_client_test)
        if pool_config.samples_per_class < needed:
            logger.info(f"Raising samples_per_class from {pool_config.samples_per_class} to {needed}")
            pool_config = replace(pool_config, samples_per_class=needed)
    return make_base_pool(pool_config, rng.child("pool"))


def build_clients(config: ExperimentConfig, pool: LabeledSet, rng: Rng) -> List[ClientDataset]:
    part = config.partition
    n_classes = config.pool.n_classes
    if part.mode == PartitionMode.DIRICHLET_SKEW:
        return partition_dirichlet(pool, part.alpha, part.n_clients, rng.child("partition"),
                                   part.samples_per_client_train, part.samples_per_client_test, n_classes)
    transforms = make_task_transforms(part.task_kind, part.n_clients, n_classes,
                                      rng.child("tasks"), part.max_angle_deg)
    return partition_distinct_tasks(pool, transforms, part.n_clients, rng.child("partition"),
                                    part.samples_per_client_train, part.samples_per_client_test)


def build_template(config: ExperimentConfig, pool: LabeledSet, rng: Rng) -> AdaptedModel:
    """Pretrain W_Pre on the untransformed pool, then attach fresh adapters."""
    spec = config.model_spec()
    base = pretrain_base(spec, pool, rng.child("pretrain"), steps=config.model.pretrain_steps,
                         lr=config.model.pretrain_lr, init_std=config.model.base_init_std)
    return AdaptedModel.initialize(spec, base, rng.child("adapters"), config.model.init_std)


def _fisher_batch(client: ClientDataset, size: int, rng: Rng) -> LabeledSet:
    n = len(client.train)
    idx = rng.generator.choice(n, size=min(size, n), replace=False)
    return client.train.subset(np.sort(idx))


def _client_accuracies(run: FederatedRun, template: AdaptedModel, clients: List[ClientDataset]) -> List[float]:
    return [
        evaluate(template.with_adapters(adapters), client.test)[1]
        for client, adapters in zip(clients, run.final_state.client_adapters)
    ]


def _upload_per_client(run: FederatedRun, clients: List[ClientDataset], up_to_round: Optional[int] = None) -> int:
    return run.ledger.total(Direction.UP, client_id=clients[0].client_id, up_to_round=up_to_round)


def merge_client(config: ExperimentConfig, template: AdaptedModel, client: ClientDataset,
                 fedit_adapters, local_adapters, rng: Rng, out_dir: Optional[str] = None,
                 curves: bool = False) -> ClientMergeResult:
    """Fisher, cross-covariance, optimal weights and evaluation for one client."""
    cid = client.client_id
    fisher_cfg, merge_cfg = config.fisher, config.merge
    model_f = template.with_adapters(fedit_adapters)
    model_l = template.with_adapters(local_adapters)

    batch = _fisher_batch(client, fisher_cfg.batch_size, rng.child("batch"))
    post_f, fisher_f = gaussian_posterior(model_f, batch, fisher_cfg.label_mode, fisher_cfg.damping,
                                          rng.child("labels.fedit"), fisher_cfg.n_draws)
    post_l, fisher_l = gaussian_posterior(model_l, batch, fisher_cfg.label_mode, fisher_cfg.damping,
                                          rng.child("labels.local"), fisher_cfg.n_draws)
    cross = cross_corr(model_f, model_l, batch, post_f.var, post_l.var)
    a, b, c = traces(post_f.var, post_l.var, cross)
    weights = optimal_weights(a, b, c, merge_cfg.degeneracy_tol)
    merged = template.with_adapters(merge_adapters(fedit_adapters, local_adapters, weights))

    result = ClientMergeResult(
        client_id=cid, weights=weights,
        acc_fedit=evaluate(model_f, client.test)[1],
        acc_local=evaluate(model_l, client.test)[1],
        acc_merged=evaluate(merged, client.test)[1],
    )
    if merge_cfg.grid_search:
        grid = grid_search_lambda(template, fedit_adapters, local_adapters, merge_cfg.grid,
                                  client.test, config.workers)
        result.lambda_grid, result.acc_grid = grid.best_lambda, grid.best_acc
        if curves and out_dir:
            write_csv(grid.to_frame(), os.path.join(out_dir, f"grid_{cid}.csv"))
    if merge_cfg.fisher_baseline:
        fisher_merged = fisher_merge_baseline([(post_f.mean, fisher_f), (post_l.mean, fisher_l)],
                                              fisher_cfg.damping)
        result.acc_fisher_merge = evaluate(template.with_adapter_vector(fisher_merged), client.test)[1]
    if curves:
        scan = lmc_scan_models(model_f, model_l, client.test, merge_cfg.scan_points)
        result.barrier = scan.barrier
        if out_dir:
            write_csv(scan.to_frame(), os.path.join(out_dir, f"scan_{cid}.csv"))
    if config.save_checkpoints and out_dir and curves:
        save_pvec(fisher_f, os.path.join(out_dir, f"fisher_c{cid}_FedIT.pvec"))
        save_pvec(fisher_l, os.path.join(out_dir, f"fisher_c{cid}_Local.pvec"))

    logger.info(f"Client {cid}: a={a:.4g} b={b:.4g} c={c:.4g} lambda={weights.lambda_fedit:.4f} "
                f"acc fedit/local/merged = {result.acc_fedit:.3f}/{result.acc_local:.3f}/{result.acc_merged:.3f}")
    return result


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    """
    Run the whole pipeline and write rounds.csv, comm.csv, merge.csv,
    merge_r<t>.csv, scan_<client>.csv, grid_<client>.csv, summary.json and
    config.resolved.json into config.out_dir.
    """
    config = config.validate()
    out_dir = config.out_dir
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as e:
        logger.error(f"Cannot create output directory {out_dir}: {e}")
        raise
    training = config.training
    root = Rng(config.seed)
    artifacts = {'config': write_json(config.to_dict(), os.path.join(out_dir, "config.resolved.json"))}

    data_rng = root.child("data")
    pool = build_pool(config, data_rng)
    clients = sorted(build_clients(config, pool, data_rng), key=lambda c: c.client_id)
    template = build_template(config, pool, root.child("model"))
    train_rng = root.child("train")
    base_config = FederatedConfig(
        rounds=training.rounds, local_iters=training.local_iters, lr=training.lr,
        batch_size=training.batch_size, workers=config.workers, eval_every=training.eval_every,
    )

    runs: Dict[Strategy, FederatedRun] = {}
    for strategy in training.strategies:
        if strategy == Strategy.LOCAL_ONLY:
            continue
        checkpoints = training.merge_rounds if strategy == Strategy.FEDIT else ()
        runs[strategy] = _run(clients, template, base_config.with_strategy(strategy), train_rng,
                              checkpoints, config, out_dir)

    local_run = None
    if Strategy.LOCAL_ONLY in training.strategies or training.merge_enabled:
        # same client streams as FedIT, so each client's trajectory equals run_local's
        local_config = base_config.with_strategy(Strategy.LOCAL_ONLY, rounds=training.local_round_count)
        local_run = _run(clients, template, local_config, train_rng, (), config, out_dir)

    reports: Dict[int, MergeReport] = {}
    if training.merge_enabled:
        fedit_run = runs[Strategy.FEDIT]
        for t in training.merge_rounds:
            main = t == training.merge_round
            report = MergeReport(t)
            for idx, client in enumerate(clients):
                report.add(merge_client(
                    config, template, client,
                    fedit_run.client_adapters_at(t, idx), local_run.final_state.client_adapters[idx],
                    root.child(f"merge.r{t}.c{client.client_id}"), out_dir, curves=main,
                ))
            reports[t] = report
            name = "merge.csv" if main else f"merge_r{t}.csv"
            artifacts[name] = write_csv(report.to_frame(), os.path.join(out_dir, name))
    else:
        logger.info("No FedIT run configured; merge stage skipped")

    all_runs = list(runs.values()) + ([local_run] if local_run is not None
                                      and Strategy.LOCAL_ONLY in training.strategies else [])
    artifacts['rounds.csv'] = write_csv(
        pd.concat([r.metrics_frame() for r in all_runs], ignore_index=True),
        os.path.join(out_dir, "rounds.csv"))
    artifacts['comm.csv'] = write_csv(
        pd.concat([r.ledger.to_frame() for r in all_runs], ignore_index=True),
        os.path.join(out_dir, "comm.csv"))

    summary = build_summary(config, clients, template, runs, local_run, reports)
    artifacts['summary.json'] = write_json(summary, os.path.join(out_dir, "summary.json"))
    logger.info(f"Experiment finished, artifacts in {out_dir}")
    return ExperimentResult(config, clients, runs, local_run, reports, summary, artifacts)


def _run(clients, template, fed_config: FederatedConfig, rng: Rng, checkpoints,
         config: ExperimentConfig, out_dir: str) -> FederatedRun:
    run = run_fedit(clients, template, fed_config, rng, checkpoints)
    if config.save_checkpoints:
        name = fed_config.strategy.value
        for t, state in run.checkpoints.items():
            save_model(template.with_adapters(state.global_adapters),
                       os.path.join(out_dir, f"ckpt_{name}_r{t}.pvec"))
        for client, adapters in zip(clients, run.final_state.client_adapters):
            save_model(template.with_adapters(adapters),
                       os.path.join(out_dir, f"ckpt_{name}_r{fed_config.rounds}_c{client.client_id}.pvec"))
    return run


def build_summary(config: ExperimentConfig, clients: List[ClientDataset], template: AdaptedModel,
                  runs: Dict[Strategy, FederatedRun], local_run: Optional[FederatedRun],
                  reports: Dict[int, MergeReport]) -> Dict[str, Any]:
    """summary.json: deterministic content plus a 'meta' block with run facts."""
    methods: Dict[str, Any] = {}
    for strategy, run in runs.items():
        methods[strategy.value] = method_entry(_client_accuracies(run, template, clients),
                                               _upload_per_client(run, clients))
    if local_run is not None and Strategy.LOCAL_ONLY in config.training.strategies:
        methods[Strategy.LOCAL_ONLY.value] = method_entry(_client_accuracies(local_run, template, clients), 0)

    potara = []
    main = reports.get(config.training.merge_round)
    if main is not None:
        fedit_run = runs[Strategy.FEDIT]
        upload = _upload_per_client(fedit_run, clients, config.training.merge_round)
        ordered = sorted(main.clients, key=lambda r: r.client_id)
        methods['Merged'] = method_entry([r.acc_merged for r in ordered], upload)
        if config.merge.grid_search:
            methods['GridMerged'] = method_entry([r.acc_grid for r in ordered], upload)
        if config.merge.fisher_baseline:
            methods['FisherMerge'] = method_entry([r.acc_fisher_merge for r in ordered], upload)
        for t, report in sorted(reports.items()):
            potara.append({
                'fedit_round': t,
                'mean_acc': report.mean('acc_merged'),
                'mean_lambda': float(np.mean([r.weights.lambda_fedit for r in report.clients])),
                'upload_bytes_per_client': _upload_per_client(fedit_run, clients, t),
            })

    return {
        'seed': config.seed,
        'n_clients': len(clients),
        'model': template.spec.to_dict(),
        'methods': methods,
        'potara': potara,
        'merge': [{**r.to_row(), "barrier": r.barrier} for r in sorted(main.clients, key=lambda r: r.client_id)]
        if main is not None else [],
        'meta': run_metadata(),
    }
