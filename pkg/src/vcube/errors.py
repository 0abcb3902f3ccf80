"""Exception types raised across the package."""

from __future__ import annotations


class VCubeError(Exception):
    """Base class for all package errors."""


class ShapeError(VCubeError, ValueError):
    """Operands of an op have incompatible shapes."""

    def __init__(self, op: str, shapes, detail: str = ""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{op}: incompatible shapes {list(self.shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NonFiniteError(VCubeError, FloatingPointError):
    """A forward value contains NaN or inf."""

    def __init__(self, op: str, tag: str | None = None):
        self.op = op
        self.tag = tag
        where = f" [{tag}]" if tag else ""
        super().__init__(f"{op}{where}: non-finite value in forward pass")


class GraphError(VCubeError, RuntimeError):
    """Misuse of the autodiff graph (non-scalar root, reuse, cycles)."""


class NonDeterministicError(VCubeError, RuntimeError):
    """A function expected to be deterministic returned different values."""


class FormatError(VCubeError, ValueError):
    """Malformed binary file; `offset` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (at byte offset {offset})")


class StreamOrderError(VCubeError, ValueError):
    """A streamed frame arrived with a timestamp not after the previous one."""


class NonFiniteGradientError(VCubeError, FloatingPointError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"non-finite gradient for parameter {name!r}")


class TrainingAborted(VCubeError, RuntimeError):
    """Training hit a non-finite loss; `checkpoint` holds the last good state."""

    def __init__(self, step: int, checkpoint: str | None):
        self.step = step
        self.checkpoint = checkpoint
        super().__init__(f"non-finite loss at step {step}; last good checkpoint: {checkpoint}")


class ConfigError(VCubeError, ValueError):
    pass
