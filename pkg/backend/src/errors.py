"""
Exception hierarchy for the federated-local merging simulator.

The CLI maps these onto process exit codes, see fedmerge.py.
"""


class FedMergeError(Exception):
    """Base class for every error raised by the simulator."""


class ShapeMismatchError(FedMergeError, ValueError):
    """Two parameter containers do not share block names, order and shapes."""

    def __init__(self, message: str, block: str = None):
        super().__init__(message)
        self.block = block


class FormatError(FedMergeError, ValueError):
    """A PVEC payload is malformed, truncated or fails its checksum."""


class ConfigError(FedMergeError, ValueError):
    """Experiment configuration failed validation."""


class InvariantViolation(FedMergeError, ArithmeticError):
    """A numerical invariant that upstream code guarantees was broken."""


class PoolExhaustedError(FedMergeError, ValueError):
    """A partition asked for more examples of a class than the pool holds."""
