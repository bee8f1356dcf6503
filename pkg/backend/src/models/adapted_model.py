"""
Adapted Model Data Models

Frozen base weights plus per-layer low-rank adapters. The effective weight of an
adapted layer is base + B @ A; only the adapter factors are trainable.
"""

import math
from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from models.param_vector import (
    ROLE_BASE, ROLE_LORA_A, ROLE_LORA_B, ParamVector, block_layer
)
from models.rng import Rng


class Architecture(str, Enum):
    """Supported desk-scale architectures"""
    LINEAR_SOFTMAX = "linear_softmax"
    MLP1 = "mlp1"


@dataclass(frozen=True)
class ModelSpec:
    """Architecture descriptor; also the checkpoint sidecar JSON"""
    architecture: Architecture
    d_in: int
    n_classes: int
    rank: int
    d_hidden: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "architecture", Architecture(self.architecture))
        if self.d_in < 1 or self.n_classes < 2 or self.rank < 1:
            raise ValueError(
                f"Invalid model dims d_in={self.d_in} n_classes={self.n_classes} rank={self.rank}"
            )
        if self.architecture == Architecture.MLP1:
            if not self.d_hidden or self.d_hidden < 1:
                raise ValueError("mlp1 requires a positive d_hidden")
        for name, m, n in self.layer_shapes():
            if self.rank > min(m, n):
                raise ValueError(f"rank {self.rank} exceeds min({m}, {n}) for layer '{name}'")

    def layer_shapes(self) -> List[Tuple[str, int, int]]:
        """(layer name, out dim m, in dim n) in forward order."""
        if self.architecture == Architecture.LINEAR_SOFTMAX:
            return [("out", self.n_classes, self.d_in)]
        return [("hidden", self.d_hidden, self.d_in), ("out", self.n_classes, self.d_hidden)]

    def to_dict(self) -> Dict[str, Any]:
        data = {
            'architecture': self.architecture.value,
            'd_in': self.d_in,
            'n_classes': self.n_classes,
            'rank': self.rank,
        }
        if self.d_hidden is not None:
            data['d_hidden'] = self.d_hidden
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'ModelSpec':
        return cls(
            architecture=data['architecture'],
            d_in=int(data['d_in']),
            n_classes=int(data['n_classes']),
            rank=int(data['rank']),
            d_hidden=int(data['d_hidden']) if data.get('d_hidden') is not None else None,
        )


@dataclass(frozen=True, eq=False)
class LoraAdapter:
    """Low-rank factors of one layer: B is m x r, A is r x n"""
    layer_name: str
    B: np.ndarray
    A: np.ndarray

    def __post_init__(self):
        B = np.array(self.B, dtype=np.float64, copy=True)
        A = np.array(self.A, dtype=np.float64, copy=True)
        if B.ndim != 2 or A.ndim != 2 or B.shape[1] != A.shape[0]:
            raise ValueError(
                f"Adapter '{self.layer_name}' factors {B.shape} and {A.shape} do not chain"
            )
        r = B.shape[1]
        if r < 1 or r > min(B.shape[0], A.shape[1]):
            raise ValueError(
                f"Adapter '{self.layer_name}' rank {r} outside [1, min{(B.shape[0], A.shape[1])}]"
            )
        B.setflags(write=False)
        A.setflags(write=False)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "A", A)

    @classmethod
    def initialize(cls, layer_name: str, m: int, n: int, rank: int, rng: Rng,
                   init_std: Optional[float] = None) -> 'LoraAdapter':
        """B = 0, A ~ N(0, init_std^2) with init_std defaulting to 1/sqrt(r)."""
        std = 1.0 / math.sqrt(rank) if init_std is None else init_std
        A = rng.generator.normal(0.0, std, size=(rank, n))
        return cls(layer_name, np.zeros((m, rank)), A)

    @property
    def rank(self) -> int:
        return int(self.B.shape[1])

    @property
    def m(self) -> int:
        return int(self.B.shape[0])

    @property
    def n(self) -> int:
        return int(self.A.shape[1])

    def compose_update(self) -> np.ndarray:
        """Delta W = B @ A, an m x n matrix of rank at most r."""
        return self.B @ self.A

    def same_values(self, other: 'LoraAdapter') -> bool:
        return (self.layer_name == other.layer_name
                and np.array_equal(self.A, other.A) and np.array_equal(self.B, other.B))


def compose_update(adapter: LoraAdapter) -> np.ndarray:
    return adapter.compose_update()


def adapters_to_vector(adapters: Sequence[LoraAdapter]) -> ParamVector:
    """Blocks `<layer>.loraA`, `<layer>.loraB` per layer, in layer order."""
    items = []
    for adapter in adapters:
        items.append((f"{adapter.layer_name}.{ROLE_LORA_A}", adapter.A))
        items.append((f"{adapter.layer_name}.{ROLE_LORA_B}", adapter.B))
    return ParamVector.from_items(items)


def adapters_from_vector(vector: ParamVector) -> List[LoraAdapter]:
    layers = []
    for name in vector.names:
        layer = block_layer(name)
        if layer not in layers:
            layers.append(layer)
    return [
        LoraAdapter(layer, vector[f"{layer}.{ROLE_LORA_B}"], vector[f"{layer}.{ROLE_LORA_A}"])
        for layer in layers
    ]


@dataclass(frozen=True, eq=False)
class AdaptedModel:
    """
    Immutable model snapshot: frozen base weights and trainable adapters.

    base holds one `<layer>.base` block of shape (m, n) per layer of `spec`.
    """
    spec: ModelSpec
    base: ParamVector
    adapters: Tuple[LoraAdapter, ...]

    def __post_init__(self):
        adapters = tuple(self.adapters)
        shapes = self.spec.layer_shapes()
        if len(adapters) != len(shapes):
            raise ValueError(f"Expected {len(shapes)} adapters, got {len(adapters)}")
        for (name, m, n), adapter in zip(shapes, adapters):
            if adapter.layer_name != name or adapter.m != m or adapter.n != n:
                raise ValueError(f"Adapter for layer '{name}' must be {m}x{n}")
            if f"{name}.{ROLE_BASE}" not in self.base or self.base[f"{name}.{ROLE_BASE}"].shape != (m, n):
                raise ValueError(f"Base weights for layer '{name}' must be {m}x{n}")
        object.__setattr__(self, "adapters", adapters)

    @classmethod
    def initialize(cls, spec: ModelSpec, base: ParamVector, rng: Rng,
                   init_std: Optional[float] = None) -> 'AdaptedModel':
        adapters = tuple(
            LoraAdapter.initialize(name, m, n, spec.rank, rng.child(f"adapter.{name}"), init_std)
            for name, m, n in spec.layer_shapes()
        )
        return cls(spec, base, adapters)

    def adapter_vector(self) -> ParamVector:
        return adapters_to_vector(self.adapters)

    def with_adapter_vector(self, vector: ParamVector) -> 'AdaptedModel':
        self.adapter_vector().check_compatible(vector)
        return AdaptedModel(self.spec, self.base, tuple(adapters_from_vector(vector)))

    def with_adapters(self, adapters: Sequence[LoraAdapter]) -> 'AdaptedModel':
        return AdaptedModel(self.spec, self.base, tuple(adapters))

    def effective_weights(self) -> ParamVector:
        """Full weights W_Pre + B @ A per layer, as `<layer>.base` blocks."""
        return ParamVector.from_items(
            (f"{a.layer_name}.{ROLE_BASE}", self.base[f"{a.layer_name}.{ROLE_BASE}"] + a.compose_update())
            for a in self.adapters
        )
