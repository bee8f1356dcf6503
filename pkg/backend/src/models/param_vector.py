"""
Parameter Vector Data Model

Flat, named, ordered collection of float64 parameter blocks. Models, gradients,
task vectors and Fisher diagonals all travel as ParamVector values.
"""

import math
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, Iterator, List, Sequence, Tuple

import numpy as np

from errors import ShapeMismatchError

ROLE_LORA_A = "loraA"
ROLE_LORA_B = "loraB"
ROLE_BASE = "base"
ROLES = (ROLE_LORA_A, ROLE_LORA_B, ROLE_BASE)


def block_role(name: str) -> str:
    """Role suffix of a `<layer>.<role>` block name."""
    return name.rsplit(".", 1)[-1]


def block_layer(name: str) -> str:
    """Layer prefix of a `<layer>.<role>` block name."""
    return name.rsplit(".", 1)[0]


@dataclass(frozen=True, eq=False)
class Block:
    """One named block; values are a read-only float64 array."""
    name: str
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64, copy=True)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.values.shape)

    @property
    def size(self) -> int:
        return int(self.values.size)


@dataclass(frozen=True, eq=False)
class ParamVector:
    """
    Immutable ordered parameter container.

    Block order is fixed at construction and preserved by every operation. Two
    vectors are shape-compatible iff names, order and shapes match exactly.
    """
    blocks: Tuple[Block, ...] = ()

    def __post_init__(self):
        blocks = tuple(
            b if isinstance(b, Block) else Block(b[0], b[1]) for b in self.blocks
        )
        seen = set()
        for b in blocks:
            if b.name in seen:
                raise ValueError(f"Duplicate block name '{b.name}'")
            seen.add(b.name)
        object.__setattr__(self, "blocks", blocks)

    @classmethod
    def from_items(cls, items: Iterable[Tuple[str, np.ndarray]]) -> "ParamVector":
        return cls(tuple(Block(name, values) for name, values in items))

    # ---- introspection -------------------------------------------------

    @property
    def names(self) -> List[str]:
        return [b.name for b in self.blocks]

    @property
    def shapes(self) -> List[Tuple[int, ...]]:
        return [b.shape for b in self.blocks]

    @property
    def size(self) -> int:
        """Total coordinate count."""
        return sum(b.size for b in self.blocks)

    def __len__(self) -> int:
        return len(self.blocks)

    def __iter__(self) -> Iterator[Tuple[str, np.ndarray]]:
        for b in self.blocks:
            yield b.name, b.values

    def __contains__(self, name: str) -> bool:
        return any(b.name == name for b in self.blocks)

    def __getitem__(self, name: str) -> np.ndarray:
        for b in self.blocks:
            if b.name == name:
                return b.values
        raise KeyError(name)

    def to_dict(self) -> Dict[str, np.ndarray]:
        return {b.name: b.values for b in self.blocks}

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParamVector) or not self.is_compatible(other):
            return False
        return all(np.array_equal(a.values, b.values) for a, b in zip(self.blocks, other.blocks))

    __hash__ = None

    def __repr__(self) -> str:
        inner = ", ".join(f"{b.name}{list(b.shape)}" for b in self.blocks)
        return f"ParamVector({inner})"

    # ---- compatibility -------------------------------------------------

    def mismatch(self, other: "ParamVector") -> str:
        """Name of the first mismatching block, or '' if compatible."""
        for i in range(max(len(self.blocks), len(other.blocks))):
            if i >= len(self.blocks):
                return other.blocks[i].name
            if i >= len(other.blocks):
                return self.blocks[i].name
            a, b = self.blocks[i], other.blocks[i]
            if a.name != b.name or a.shape != b.shape:
                return a.name
        return ""

    def is_compatible(self, other: "ParamVector") -> bool:
        return self.mismatch(other) == ""

    def check_compatible(self, other: "ParamVector") -> None:
        name = self.mismatch(other)
        if name:
            raise ShapeMismatchError(f"Shape mismatch at block '{name}'", block=name)

    # ---- algebra -------------------------------------------------------

    def map_values(self, fn: Callable[[np.ndarray], np.ndarray]) -> "ParamVector":
        return ParamVector.from_items((b.name, fn(b.values)) for b in self.blocks)

    def zip_values(self, other: "ParamVector",
                   fn: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> "ParamVector":
        self.check_compatible(other)
        return ParamVector.from_items(
            (a.name, fn(a.values, b.values)) for a, b in zip(self.blocks, other.blocks)
        )

    def scale(self, alpha: float) -> "ParamVector":
        return self.map_values(lambda v: alpha * v)

    def add(self, other: "ParamVector") -> "ParamVector":
        return self.zip_values(other, np.add)

    def sub(self, other: "ParamVector") -> "ParamVector":
        return self.zip_values(other, np.subtract)

    def dot(self, other: "ParamVector") -> float:
        return dot(self, other)

    def norm(self) -> float:
        return math.sqrt(dot(self, self))

    def zeros_like(self) -> "ParamVector":
        return self.map_values(np.zeros_like)

    def flatten(self) -> np.ndarray:
        if not self.blocks:
            return np.zeros(0, dtype=np.float64)
        return np.concatenate([b.values.ravel() for b in self.blocks])

    def from_flat(self, flat: np.ndarray) -> "ParamVector":
        """New vector with this layout and the given flat coordinates."""
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.size,):
            raise ShapeMismatchError(
                f"Flat vector has {flat.size} coordinates, layout needs {self.size}"
            )
        items, offset = [], 0
        for b in self.blocks:
            items.append((b.name, flat[offset:offset + b.size].reshape(b.shape)))
            offset += b.size
        return ParamVector.from_items(items)

    def select(self, roles: Sequence[str]) -> "ParamVector":
        """Sub-vector of the blocks whose role is in `roles`, order preserved."""
        return ParamVector(tuple(b for b in self.blocks if block_role(b.name) in roles))

    def replace(self, other: "ParamVector") -> "ParamVector":
        """Copy with every block of `other` substituted by name."""
        updates = other.to_dict()
        for name, values in updates.items():
            if name not in self:
                raise ShapeMismatchError(f"Unknown block '{name}'", block=name)
            if tuple(values.shape) != tuple(self[name].shape):
                raise ShapeMismatchError(f"Shape mismatch at block '{name}'", block=name)
        return ParamVector.from_items(
            (b.name, updates.get(b.name, b.values)) for b in self.blocks
        )


def axpby(alpha: float, x: ParamVector, beta: float, y: ParamVector) -> ParamVector:
    """alpha*x + beta*y coordinate-wise."""
    return x.zip_values(y, lambda a, b: alpha * a + beta * b)


def dot(x: ParamVector, y: ParamVector) -> float:
    """Sum of coordinate products, correctly rounded, in block order."""
    x.check_compatible(y)
    return math.fsum(
        p for a, b in zip(x.blocks, y.blocks) for p in (a.values * b.values).ravel()
    )
