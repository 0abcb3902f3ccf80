"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from vcube.autodiff.core import Value, backward, no_grad
from vcube.errors import NonDeterministicError


def _evaluate(f: Callable[[], Value]) -> float:
    with no_grad():
        return float(np.asarray(f().data).reshape(()))


def gradient_errors(
    f: Callable[[], Value],
    params: Iterable[Value],
    h: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> dict[int, float]:
    """Relative error per parameter between backprop and central differences.

    The error for one parameter is ``|a - c| / (|a| + |c| + 1e-12)`` with
    ``|.|`` the Euclidean norm over the checked coordinates.  ``max_coords``
    limits the number of coordinates probed per parameter (chosen at random
    with ``seed``); ``None`` probes all of them.  Keys of the result are
    positions in ``params``.
    """
    params = list(params)
    first, second = _evaluate(f), _evaluate(f)
    if first != second and not (np.isnan(first) and np.isnan(second)):
        raise NonDeterministicError(f"two forward passes disagree: {first!r} vs {second!r}")

    saved = [p.grad for p in params]
    for p in params:
        p.grad = None
    root = f()
    backward(root)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    for p, g in zip(params, saved):
        p.grad = g

    pick = np.random.default_rng(seed)
    errors = {}
    for k, p in enumerate(params):
        flat = p.data.reshape(-1)
        if max_coords is None or flat.size <= max_coords:
            coords = np.arange(flat.size)
        else:
            coords = np.sort(pick.choice(flat.size, size=max_coords, replace=False))
        numeric = np.empty(coords.size)
        for j, c in enumerate(coords):
            orig = flat[c]
            flat[c] = orig + h
            up = _evaluate(f)
            flat[c] = orig - h
            down = _evaluate(f)
            flat[c] = orig
            numeric[j] = (up - down) / (2.0 * h)
        a = analytic[k].reshape(-1)[coords]
        errors[k] = float(np.linalg.norm(a - numeric) / (np.linalg.norm(a) + np.linalg.norm(numeric) + 1e-12))
    return errors


def grad_check(
    f: Callable[[], Value],
    params: Iterable[Value],
    h: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Largest per-parameter relative gradient error (see :func:`gradient_errors`)."""
    errs = gradient_errors(f, params, h=h, max_coords=max_coords, seed=seed)
    return max(errs.values()) if errs else 0.0
