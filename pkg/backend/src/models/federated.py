"""
Federated Training Data Models
Upload strategies, round state, communication ledger and run results.
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple

import pandas as pd

from models.adapted_model import LoraAdapter
from models.param_vector import ROLE_LORA_A, ROLE_LORA_B

BYTES_PER_PARAM = 4  # transfers are metered at float32 width


class Strategy(str, Enum):
    """Which LoRA factors a client uploads each round"""
    FEDIT = "FedIT"
    FEDSA = "FedSA"
    FFA_LORA = "FfaLora"
    LOCAL_ONLY = "LocalOnly"

    @property
    def shared_roles(self) -> Tuple[str, ...]:
        """Roles transmitted up and down (and averaged by the server)."""
        return {
            Strategy.FEDIT: (ROLE_LORA_A, ROLE_LORA_B),
            Strategy.FEDSA: (ROLE_LORA_A,),
            Strategy.FFA_LORA: (ROLE_LORA_B,),
            Strategy.LOCAL_ONLY: (),
        }[self]

    @property
    def trained_roles(self) -> Tuple[str, ...]:
        """FFA-LoRA keeps A frozen at its initialization."""
        if self == Strategy.FFA_LORA:
            return (ROLE_LORA_B,)
        return (ROLE_LORA_A, ROLE_LORA_B)


class Direction(str, Enum):
    UP = "up"
    DOWN = "down"


@dataclass(frozen=True)
class LedgerEntry:
    """One metered transfer between the server and a client"""
    round_index: int
    client_id: int
    direction: Direction
    strategy: Strategy
    n_params: int

    @property
    def bytes(self) -> int:
        return BYTES_PER_PARAM * self.n_params


@dataclass
class CommLedger:
    """Append-only byte accounting of every upload and download"""
    entries: List[LedgerEntry] = field(default_factory=list)

    def record(self, round_index: int, client_id: int, direction: Direction,
               strategy: Strategy, n_params: int) -> LedgerEntry:
        if n_params < 0:
            raise ValueError(f"Transfer size must be non-negative, got {n_params}")
        entry = LedgerEntry(round_index, client_id, Direction(direction), Strategy(strategy), int(n_params))
        self.entries.append(entry)
        return entry

    def total(self, direction: Optional[Direction] = None, client_id: Optional[int] = None,
              up_to_round: Optional[int] = None) -> int:
        return sum(
            e.bytes for e in self.entries
            if (direction is None or e.direction == direction)
            and (client_id is None or e.client_id == client_id)
            and (up_to_round is None or e.round_index <= up_to_round)
        )

    def bytes_for(self, round_index: int, client_id: int, direction: Direction) -> int:
        return sum(e.bytes for e in self.entries
                   if e.round_index == round_index and e.client_id == client_id
                   and e.direction == direction)

    def to_frame(self) -> pd.DataFrame:
        """comm.csv rows with a running byte total in entry order."""
        rows, running = [], 0
        for e in self.entries:
            running += e.bytes
            rows.append({
                'round': e.round_index,
                'client': e.client_id,
                'direction': e.direction.value,
                'strategy': e.strategy.value,
                'params': e.n_params,
                'bytes': e.bytes,
                'cumulative_bytes': running,
            })
        columns = ['round', 'client', 'direction', 'strategy', 'params', 'bytes', 'cumulative_bytes']
        return pd.DataFrame(rows, columns=columns)


@dataclass(frozen=True, eq=False)
class RoundState:
    """
    Snapshot after a round's aggregation.

    global_adapters carry the averaged shared blocks (non-shared blocks keep
    the template values); client_adapters are what each client evaluates with.
    """
    round_index: int
    global_adapters: Tuple[LoraAdapter, ...]
    client_adapters: Tuple[Tuple[LoraAdapter, ...], ...]


@dataclass(frozen=True)
class FederatedConfig:
    """Training loop settings shared by federated and local runs"""
    rounds: int = 100
    local_iters: int = 5
    lr: float = 0.1
    batch_size: int = 10
    strategy: Strategy = Strategy.FEDIT
    workers: int = 1
    eval_every: int = 1

    def __post_init__(self):
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        if self.rounds < 0:
            raise ValueError(f"rounds must be >= 0, got {self.rounds}")
        if self.local_iters < 1:
            raise ValueError(f"local_iters must be >= 1, got {self.local_iters}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.workers < 1:
            raise ValueError(f"workers must be >= 1, got {self.workers}")

    def with_strategy(self, strategy: Strategy, rounds: Optional[int] = None) -> 'FederatedConfig':
        return FederatedConfig(
            rounds=self.rounds if rounds is None else rounds,
            local_iters=self.local_iters, lr=self.lr, batch_size=self.batch_size,
            strategy=strategy, workers=self.workers, eval_every=self.eval_every,
        )


@dataclass(frozen=True)
class RoundMetrics:
    """One rounds.csv row"""
    round_index: int
    client_id: int
    strategy: Strategy
    train_loss: float
    test_loss: float
    test_acc: float
    up_bytes: int
    down_bytes: int

    def to_dict(self) -> Dict[str, Any]:
        return {
            'round': self.round_index,
            'client': self.client_id,
            'strategy': self.strategy.value,
            'train_loss': self.train_loss,
            'test_loss': self.test_loss,
            'test_acc': self.test_acc,
            'up_bytes': self.up_bytes,
            'down_bytes': self.down_bytes,
        }


ROUNDS_COLUMNS = ['round', 'client', 'strategy', 'train_loss', 'test_loss', 'test_acc',
                  'up_bytes', 'down_bytes']


@dataclass(eq=False)
class FederatedRun:
    """Result of run_fedit: checkpoints by round, final client states, ledger, metrics"""
    strategy: Strategy
    checkpoints: Dict[int, RoundState]
    final_state: RoundState
    ledger: CommLedger
    metrics: List[RoundMetrics] = field(default_factory=list)

    def client_adapters_at(self, round_index: int, client_id: int) -> Tuple[LoraAdapter, ...]:
        return self.checkpoints[round_index].client_adapters[client_id]

    def metrics_frame(self) -> pd.DataFrame:
        return pd.DataFrame([m.to_dict() for m in self.metrics], columns=ROUNDS_COLUMNS)


def trajectory_rounds(requested: Sequence[int], rounds: int) -> List[int]:
    """Sorted unique checkpoint rounds, validated against the run length."""
    out = sorted(set(int(r) for r in requested))
    for r in out:
        if r < 1 or r > rounds:
            raise ValueError(f"Checkpoint round {r} outside [1, {rounds}]")
    return out
