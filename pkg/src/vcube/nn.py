"""Parameter containers and the few layer helpers the model needs."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from vcube.autodiff import Value, ops
from vcube.rng import Rng


class Module:
    """Holds named :class:`Value` parameters and child modules."""

    def __init__(self):
        self._params: dict[str, Value] = {}
        self._children: dict[str, Module] = {}

    def param(self, name: str, data: np.ndarray) -> Value:
        v = Value(np.array(data, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = v
        return v

    def child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Value]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, c in self._children.items():
            yield from c.named_parameters(f"{prefix}{cname}.")

    def parameters(self) -> list[Value]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters(prefix)}

    def load_state_dict(self, state: dict[str, np.ndarray], prefix: str = "", strict: bool = True):
        for name, p in self.named_parameters(prefix):
            if name not in state:
                if strict:
                    raise KeyError(f"missing parameter {name!r}")
                continue
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} does not match {p.shape}")
            p.data = arr.copy()


def glorot(rng: Rng, fan_in: int, fan_out: int, gain: float = 1.0) -> np.ndarray:
    limit = gain * np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform((fan_in, fan_out), -limit, limit)


def linear(x: Value, w: Value, b: Value | None = None) -> Value:
    y = ops.matmul(x, w)
    return y if b is None else ops.add(y, b)


def layer_norm(x: Value, gain: Value, bias: Value) -> Value:
    return ops.add(ops.mul(ops.layernorm(x), gain), bias)
