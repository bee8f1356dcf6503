"""
Experiment Configuration Data Models

One JSON document configures a whole run. Every section is a dataclass with
to_dict/from_dict; validation happens once, up front, and raises ConfigError.
"""

import os
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Tuple

from errors import ConfigError
from models.adapted_model import Architecture, ModelSpec
from models.dataset import PartitionMode, PartitionSpec, PoolConfig, TaskKind
from models.federated import Strategy
from models.merge_report import DEFAULT_DEGENERACY_TOL, DEFAULT_GRID
from models.posterior import DEFAULT_DAMPING, LabelMode

ENV_OUT_DIR = "FEDMERGE_OUT_DIR"
ENV_WORKERS = "FEDMERGE_WORKERS"
ENV_LOG_LEVEL = "FEDMERGE_LOG_LEVEL"
DEFAULT_OUT_DIR = "results"


def _optional(value, cast):
    return None if value is None else cast(value)


def _check_keys(data: Dict[str, Any], allowed, where: str) -> None:
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise ConfigError(f"Unknown key(s) in {where}: {', '.join(unknown)}")


def _section(data: Dict[str, Any], key: str, allowed) -> Dict[str, Any]:
    value = data.get(key, {})
    if not isinstance(value, dict):
        raise ConfigError(f"Config section '{key}' must be an object")
    _check_keys(value, allowed, f"section '{key}'")
    return value


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and base-model pretraining; input and class dims come from the pool"""
    architecture: Architecture = Architecture.LINEAR_SOFTMAX
    rank: int = 2
    d_hidden: Optional[int] = None
    init_std: Optional[float] = None  # None means 1/sqrt(rank)
    base_init_std: float = 0.1
    pretrain_steps: int = 50
    pretrain_lr: float = 0.1

    def to_dict(self) -> Dict[str, Any]:
        return {
            'architecture': Architecture(self.architecture).value,
            'rank': self.rank,
            'd_hidden': self.d_hidden,
            'init_std': self.init_std,
            'base_init_std': self.base_init_std,
            'pretrain_steps': self.pretrain_steps,
            'pretrain_lr': self.pretrain_lr,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'ModelConfig':
        return cls(
            architecture=Architecture(data.get('architecture', Architecture.LINEAR_SOFTMAX.value)),
            rank=int(data.get('rank', 2)),
            d_hidden=_optional(data.get('d_hidden'), int),
            init_std=_optional(data.get('init_std'), float),
            base_init_std=float(data.get('base_init_std', 0.1)),
            pretrain_steps=int(data.get('pretrain_steps', 50)),
            pretrain_lr=float(data.get('pretrain_lr', 0.1)),
        )


@dataclass(frozen=True)
class TrainingConfig:
    """
    FedIT and local training schedule.

    fedit_round is the checkpoint merged with the local model (defaults to
    rounds); extra_fedit_rounds adds merges of earlier checkpoints.
    """
    rounds: int = 100
    fedit_round: Optional[int] = None
    extra_fedit_rounds: Tuple[int, ...] = ()
    local_rounds: Optional[int] = None
    local_iters: int = 5
    lr: float = 0.1
    batch_size: int = 10
    eval_every: int = 1
    strategies: Tuple[Strategy, ...] = (
        Strategy.FEDIT, Strategy.FEDSA, Strategy.FFA_LORA, Strategy.LOCAL_ONLY
    )

    @property
    def merge_round(self) -> int:
        return self.rounds if self.fedit_round is None else self.fedit_round

    @property
    def local_round_count(self) -> int:
        return self.rounds if self.local_rounds is None else self.local_rounds

    @property
    def merge_rounds(self) -> List[int]:
        return sorted(set(self.extra_fedit_rounds) | {self.merge_round})

    @property
    def merge_enabled(self) -> bool:
        return Strategy.FEDIT in self.strategies

    def to_dict(self) -> Dict[str, Any]:
        return {
            'rounds': self.rounds,
            'fedit_round': self.fedit_round,
            'extra_fedit_rounds': list(self.extra_fedit_rounds),
            'local_rounds': self.local_rounds,
            'local_iters': self.local_iters,
            'lr': self.lr,
            'batch_size': self.batch_size,
            'eval_every': self.eval_every,
            'strategies': [Strategy(s).value for s in self.strategies],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'TrainingConfig':
        default = cls()
        return cls(
            rounds=int(data.get('rounds', default.rounds)),
            fedit_round=_optional(data.get('fedit_round'), int),
            extra_fedit_rounds=tuple(int(r) for r in data.get('extra_fedit_rounds', ())),
            local_rounds=_optional(data.get('local_rounds'), int),
            local_iters=int(data.get('local_iters', default.local_iters)),
            lr=float(data.get('lr', default.lr)),
            batch_size=int(data.get('batch_size', default.batch_size)),
            eval_every=int(data.get('eval_every', default.eval_every)),
            strategies=tuple(Strategy(s) for s in data.get(
                'strategies', [s.value for s in default.strategies])),
        )


@dataclass(frozen=True)
class FisherConfig:
    batch_size: int = 30
    label_mode: Optional[LabelMode] = None  # None picks by class count
    damping: float = DEFAULT_DAMPING
    n_draws: int = 1

    def to_dict(self) -> Dict[str, Any]:
        return {
            'batch_size': self.batch_size,
            'label_mode': LabelMode(self.label_mode).value if self.label_mode else 'auto',
            'damping': self.damping,
            'n_draws': self.n_draws,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'FisherConfig':
        mode = data.get('label_mode', 'auto')
        return cls(
            batch_size=int(data.get('batch_size', 30)),
            label_mode=None if mode in (None, 'auto') else LabelMode(mode),
            damping=float(data.get('damping', DEFAULT_DAMPING)),
            n_draws=int(data.get('n_draws', 1)),
        )


@dataclass(frozen=True)
class MergeConfig:
    grid: Tuple[float, ...] = DEFAULT_GRID
    scan_points: int = 11
    degeneracy_tol: float = DEFAULT_DEGENERACY_TOL
    grid_search: bool = True
    fisher_baseline: bool = True

    def to_dict(self) -> Dict[str, Any]:
        return {
            'grid': list(self.grid),
            'scan_points': self.scan_points,
            'degeneracy_tol': self.degeneracy_tol,
            'grid_search': self.grid_search,
            'fisher_baseline': self.fisher_baseline,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'MergeConfig':
        return cls(
            grid=tuple(float(g) for g in data.get('grid', DEFAULT_GRID)),
            scan_points=int(data.get('scan_points', 11)),
            degeneracy_tol=float(data.get('degeneracy_tol', DEFAULT_DEGENERACY_TOL)),
            grid_search=bool(data.get('grid_search', True)),
            fisher_baseline=bool(data.get('fisher_baseline', True)),
        )


def _default_partition() -> PartitionSpec:
    return PartitionSpec(mode=PartitionMode.DISTINCT_TASKS, task_kind=TaskKind.INPUT_ROTATION)


@dataclass(frozen=True)
class ExperimentConfig:
    """Complete, validated description of one experiment run"""
    seed: int = 0
    pool: PoolConfig = field(default_factory=PoolConfig)
    partition: PartitionSpec = field(default_factory=_default_partition)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    fisher: FisherConfig = field(default_factory=FisherConfig)
    merge: MergeConfig = field(default_factory=MergeConfig)
    out_dir: str = DEFAULT_OUT_DIR
    workers: int = 1
    save_checkpoints: bool = False

    def model_spec(self) -> ModelSpec:
        return ModelSpec(self.model.architecture, self.pool.d_in, self.pool.n_classes,
                         self.model.rank, self.model.d_hidden)

    def validate(self) -> 'ExperimentConfig':
        """Raise ConfigError on the first problem; returns self."""
        t = self.training
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        if t.rounds < 1:
            raise ConfigError(f"training.rounds must be >= 1, got {t.rounds}")
        if t.local_round_count < 1:
            raise ConfigError(f"training.local_rounds must be >= 1, got {t.local_rounds}")
        for r in t.merge_rounds:
            if not 1 <= r <= t.rounds:
                raise ConfigError(f"FedIT merge round {r} outside [1, {t.rounds}]")
        if t.local_iters < 1 or t.batch_size < 1 or t.eval_every < 1:
            raise ConfigError("local_iters, batch_size and eval_every must be >= 1")
        if not t.lr > 0:
            raise ConfigError(f"training.lr must be > 0, got {t.lr}")
        if not t.strategies:
            raise ConfigError("training.strategies must not be empty")
        if len(set(t.strategies)) != len(t.strategies):
            raise ConfigError("training.strategies must not repeat")
        if self.fisher.batch_size < 2:
            raise ConfigError(f"fisher.batch_size must be >= 2, got {self.fisher.batch_size}")
        if not self.fisher.damping > 0 or self.fisher.n_draws < 1:
            raise ConfigError("fisher.damping must be > 0 and fisher.n_draws >= 1")
        if not self.merge.grid or any(not 0.0 <= g <= 1.0 for g in self.merge.grid):
            raise ConfigError("merge.grid must be a nonempty list of values in [0, 1]")
        if self.merge.scan_points < 2:
            raise ConfigError(f"merge.scan_points must be >= 2, got {self.merge.scan_points}")
        if self.merge.degeneracy_tol < 0:
            raise ConfigError("merge.degeneracy_tol must be >= 0")
        if self.model.init_std is not None and not self.model.init_std > 0:
            raise ConfigError("model.init_std must be > 0")
        if self.model.pretrain_steps < 0:
            raise ConfigError("model.pretrain_steps must be >= 0")
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")
        try:
            self.model_spec()
        except ValueError as e:
            raise ConfigError(f"Invalid model section: {e}") from e
        return self

    def with_overrides(self, seed: Optional[int] = None, out_dir: Optional[str] = None,
                       workers: Optional[int] = None) -> 'ExperimentConfig':
        updates = {}
        if seed is not None:
            updates['seed'] = int(seed)
        if out_dir is not None:
            updates['out_dir'] = out_dir
        if workers is not None:
            updates['workers'] = int(workers)
        return replace(self, **updates)

    def with_env(self) -> 'ExperimentConfig':
        """Apply FEDMERGE_OUT_DIR and FEDMERGE_WORKERS over the file values."""
        workers = os.getenv(ENV_WORKERS)
        try:
            return self.with_overrides(out_dir=os.getenv(ENV_OUT_DIR),
                                       workers=int(workers) if workers else None)
        except ValueError as e:
            raise ConfigError(f"{ENV_WORKERS} must be an integer, got {workers!r}") from e

    def to_dict(self) -> Dict[str, Any]:
        return {
            'seed': self.seed,
            'pool': self.pool.to_dict(),
            'partition': self.partition.to_dict(),
            'model': self.model.to_dict(),
            'training': self.training.to_dict(),
            'fisher': self.fisher.to_dict(),
            'merge': self.merge.to_dict(),
            'out_dir': self.out_dir,
            'workers': self.workers,
            'save_checkpoints': self.save_checkpoints,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'ExperimentConfig':
        if not isinstance(data, dict):
            raise ConfigError("Config must be a JSON object")
        try:
            _check_keys(data, cls().to_dict(), "config")
            partition = _section(data, 'partition', _default_partition().to_dict())
            config = cls(
                seed=int(data.get('seed', 0)),
                pool=PoolConfig.from_dict(_section(data, 'pool', PoolConfig().to_dict())),
                partition=PartitionSpec.from_dict({**_default_partition().to_dict(), **partition}),
                model=ModelConfig.from_dict(_section(data, 'model', ModelConfig().to_dict())),
                training=TrainingConfig.from_dict(_section(data, 'training', TrainingConfig().to_dict())),
                fisher=FisherConfig.from_dict(_section(data, 'fisher', FisherConfig().to_dict())),
                merge=MergeConfig.from_dict(_section(data, 'merge', MergeConfig().to_dict())),
                out_dir=str(data.get('out_dir', DEFAULT_OUT_DIR)),
                workers=int(data.get('workers', 1)),
                save_checkpoints=bool(data.get('save_checkpoints', False)),
            )
        except ConfigError:
            raise
        except (TypeError, ValueError) as e:
            raise ConfigError(f"Invalid config: {e}") from e
        return config.validate()
