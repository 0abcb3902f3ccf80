"""Nonuniform cube partitioning of a frame sequence.

Pipeline per video: feature momentum -> gate MLP -> (training) Gumbel-perturbed
softmax -> top-k keyframe selection -> straight-through hard gates.  A causal
threshold-based variant (:class:`StreamPartitioner`) commits keyframes online.
"""

from __future__ import annotations

import json
import math
from fractions import Fraction
from dataclasses import dataclass, field

import numpy as np

from vcube.autodiff import Value, no_grad, ops
from vcube.errors import ShapeError, StreamOrderError
from vcube.nn import Module, glorot, layer_norm, linear
from vcube.rng import Rng


@dataclass
class CubingConfig:
    alpha: float = 0.9
    fpq: float = 5
    tau: float = 1.0
    eta0: float = 1.0
    eta_final: float = 0.01
    anneal_ratio: float = 0.6
    beta: float = 0.001
    hidden: int = 64

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.fpq < 1:
            raise ValueError(f"fpq must be >= 1, got {self.fpq}")
        if self.tau <= 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")
        if not self.eta0 >= self.eta_final >= 0:
            raise ValueError("need eta0 >= eta_final >= 0")
        if not 0.0 < self.anneal_ratio <= 1.0:
            raise ValueError(f"anneal_ratio must lie in (0, 1], got {self.anneal_ratio}")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")


# --- momentum and gate --------------------------------------------------------------

def momentum_matrix(n_frames: int, alpha: float) -> np.ndarray:
    """Linear map taking frames to momenta: ``delta = M @ frames``.

    Row 0 is zero; row i is ``alpha*(e_i - e_{i-1}) + (1-alpha)*row_{i-1}``.
    """
    m = np.zeros((n_frames, n_frames))
    for i in range(1, n_frames):
        m[i] = (1.0 - alpha) * m[i - 1]
        m[i, i] += alpha
        m[i, i - 1] -= alpha
    return m


def momentum(features, alpha: float) -> Value:
    """Discounted accumulation of frame-to-frame differences, same shape as input."""
    x = features if isinstance(features, Value) else Value(features)
    if x.ndim < 1 or x.shape[0] < 1:
        raise ShapeError("momentum", [x.shape], "need at least one frame")
    n = x.shape[0]
    flat = ops.reshape(x, (n, -1))
    out = ops.matmul(Value(momentum_matrix(n, alpha)), flat)
    return ops.reshape(out, x.shape)


class GateMLP(Module):
    """LayerNorm then a two-layer MLP producing 2 logits per frame."""

    def __init__(self, dim: int, hidden: int = 64, rng: Rng | None = None):
        super().__init__()
        rng = rng or Rng(0)
        self.dim, self.hidden = dim, hidden
        self.param("ln.g", np.ones(dim))
        self.param("ln.b", np.zeros(dim))
        self.param("w1", glorot(rng.child("w1"), dim, hidden))
        self.param("b1", np.zeros(hidden))
        self.param("w2", glorot(rng.child("w2"), hidden, 2))
        self.param("b2", np.zeros(2))

    def from_token_mean(self, mean_delta: Value) -> Value:
        if mean_delta.shape[-1] != self.dim:
            raise ShapeError("gate", [mean_delta.shape, (self.dim,)])
        p = self._params
        h = layer_norm(mean_delta, p["ln.g"], p["ln.b"])
        h = ops.gelu(linear(h, p["w1"], p["b1"]))
        return linear(h, p["w2"], p["b2"])

    def __call__(self, delta: Value) -> Value:
        """``delta`` is (N_F, N1, d); returns logits (N_F, 2)."""
        if delta.ndim != 3:
            raise ShapeError("gate", [delta.shape], "expected (N_F, N1, d)")
        return self.from_token_mean(ops.mean(delta, axis=1))


def keyframe_probability(z) -> np.ndarray:
    """``softmax(z)[..., 0]`` = ``1 / (1 + exp(w1 - w0))``."""
    z = np.asarray(z.data if isinstance(z, Value) else z, dtype=np.float64)
    return 1.0 / (1.0 + np.exp(z[..., 1] - z[..., 0]))


def gumbel_perturb(z: Value, tau: float, eta: float, rng: Rng | None) -> Value:
    """``softmax((z + eta * g) / tau)`` with ``g = -log(-log(u))``, ``u ~ U(0, 1)``."""
    if tau <= 0:
        raise ValueError("tau must be > 0")
    if eta < 0:
        raise ValueError("eta must be >= 0")
    z = z if isinstance(z, Value) else Value(z)
    logits = z
    if eta > 0:
        if rng is None:
            raise ValueError("an Rng is required when eta > 0")
        logits = ops.add(z, eta * rng.gumbel(z.shape))
    return ops.softmax(ops.scale(logits, 1.0 / tau))


# --- partitioning -------------------------------------------------------------------

def num_cubes(n_frames: int, fpq: float) -> int:
    """``max(1, round(N_F / FPQ))``, halves rounded up, in exact arithmetic."""
    return max(1, math.floor(Fraction(n_frames) / Fraction(fpq) + Fraction(1, 2)))


@dataclass(frozen=True)
class CubePartition:
    keyframes: tuple[int, ...]
    n_frames: int

    def __post_init__(self):
        k = self.keyframes
        if not k or k[0] != 0:
            raise ValueError("first keyframe must be frame 0")
        if any(b <= a for a, b in zip(k, k[1:])) or k[-1] >= self.n_frames:
            raise ValueError(f"keyframes must be increasing and < {self.n_frames}: {k}")

    @property
    def n_cubes(self) -> int:
        return len(self.keyframes)

    @property
    def spans(self) -> list[tuple[int, int]]:
        ends = list(self.keyframes[1:]) + [self.n_frames]
        return list(zip(self.keyframes, ends))

    @property
    def lengths(self) -> list[int]:
        return [b - a for a, b in self.spans]

    def flags(self) -> np.ndarray:
        f = np.zeros(self.n_frames, dtype=bool)
        f[list(self.keyframes)] = True
        return f


@dataclass
class GateSeries:
    z_soft: Value | None
    z_noisy: Value
    z_hard: Value
    keyframe_flags: np.ndarray = field(repr=False)

    @property
    def hard_gate(self) -> Value:
        """Component 0 of the straight-through gates, one value per frame."""
        return ops.getitem(self.z_hard, (slice(None), 0))


def select_keyframes(scores: np.ndarray, n_cubes: int) -> tuple[int, ...]:
    """Frame 0 plus the ``n_cubes - 1`` highest-scoring later frames.

    Ties go to the earlier frame.
    """
    scores = np.asarray(scores, dtype=np.float64)
    k = min(n_cubes, len(scores)) - 1
    if k <= 0:
        return (0,)
    order = np.argsort(-scores[1:], kind="stable")[:k] + 1
    return (0,) + tuple(sorted(int(i) for i in order))


def partition(
    z_noisy: Value,
    fpq: float,
    mode: str = "train",
    eta: float = 0.0,
    z_soft: Value | None = None,
) -> tuple[CubePartition, GateSeries]:
    """Top-k cube partition from gate probabilities of shape (N_F, 2)."""
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    if mode == "infer" and eta != 0:
        raise ValueError("inference partitions must be computed without Gumbel noise (eta=0)")
    z_noisy = z_noisy if isinstance(z_noisy, Value) else Value(z_noisy)
    if z_noisy.ndim != 2 or z_noisy.shape[1] != 2:
        raise ShapeError("partition", [z_noisy.shape], "expected (N_F, 2)")
    n = z_noisy.shape[0]
    part = CubePartition(select_keyframes(z_noisy.data[:, 0], num_cubes(n, fpq)), n)
    flags = part.flags()
    hard = np.stack([flags, ~flags], axis=1).astype(np.float64)
    gates = GateSeries(z_soft, z_noisy, ops.straight_through(hard, z_noisy), flags)
    return part, gates


def uniform_partition(n_frames: int, fpq: float) -> CubePartition:
    """Evenly spaced cubes with the same cube count as the learned partition."""
    nq = num_cubes(n_frames, fpq)
    return CubePartition(tuple(sorted({(j * n_frames) // nq for j in range(nq)})), n_frames)


def anneal_eta(step: int, total_steps: int, cfg: CubingConfig) -> float:
    """Cosine decay of the noise scale from ``eta0`` to ``eta_final`` over ``anneal_ratio * total_steps``."""
    if step < 0:
        raise ValueError("step must be >= 0")
    horizon = cfg.anneal_ratio * total_steps
    if step >= horizon:
        return cfg.eta_final
    return cfg.eta_final + (cfg.eta0 - cfg.eta_final) * (1.0 + math.cos(math.pi * step / horizon)) / 2.0


# --- streaming ----------------------------------------------------------------------

class StreamPartitioner:
    """Causal keyframe commitment over a frame stream.

    A frame becomes a keyframe when its keyframe probability exceeds
    ``threshold`` and at least ``min_gap`` frames have passed since the last
    keyframe.  Frame 0 is always a keyframe.  Committed keyframes are final.
    """

    def __init__(self, gate: GateMLP, alpha: float = 0.9, threshold: float = 0.5, min_gap: int = 2):
        if min_gap < 1:
            raise ValueError("min_gap must be >= 1")
        self.gate = gate
        self.alpha = alpha
        self.threshold = threshold
        self.min_gap = min_gap
        self.keyframes: list[int] = []
        self.probabilities: list[float] = []
        self._n = 0
        self._last_t: float | None = None
        self._prev_mean: np.ndarray | None = None
        self._delta: np.ndarray | None = None

    @property
    def n_frames(self) -> int:
        return self._n

    def push(self, frame: np.ndarray, timestamp: float) -> int | None:
        """Consume one (N1, d) frame; returns its index if it opens a cube."""
        frame = np.asarray(frame, dtype=np.float64)
        if frame.ndim != 2 or frame.shape[1] != self.gate.dim:
            raise ShapeError("stream", [frame.shape, (self.gate.dim,)], "expected (N1, d)")
        if self._last_t is not None and not timestamp > self._last_t:
            raise StreamOrderError(f"frame at t={timestamp} arrived after t={self._last_t}")
        mean = frame.mean(axis=0)
        if self._prev_mean is None:
            self._delta = np.zeros_like(mean)
        else:
            self._delta = self.alpha * (mean - self._prev_mean) + (1.0 - self.alpha) * self._delta
        self._prev_mean = mean
        self._last_t = float(timestamp)
        i = self._n
        self._n += 1
        with no_grad():
            z = self.gate.from_token_mean(Value(self._delta[None, :])).data[0]
        p = float(keyframe_probability(z))
        self.probabilities.append(p)
        if i == 0 or (p > self.threshold and i - self.keyframes[-1] >= self.min_gap):
            self.keyframes.append(i)
            return i
        return None

    def partition(self) -> CubePartition:
        return CubePartition(tuple(self.keyframes), self._n)


def stream_partition(gate: GateMLP, frames: np.ndarray, timestamps, **kw) -> CubePartition:
    sp = StreamPartitioner(gate, **kw)
    for f, t in zip(frames, timestamps):
        sp.push(f, t)
    return sp.partition()


# --- export -------------------------------------------------------------------------

def segments(part: CubePartition, timestamps: np.ndarray, fps: float) -> list[dict]:
    """Segment records ``{cube_index, keyframe_index, start_s, end_s, n_frames}``."""
    ts = np.asarray(timestamps, dtype=np.float64)
    out = []
    for j, (a, b) in enumerate(part.spans):
        end = float(ts[b]) if b < len(ts) else float(ts[-1] + 1.0 / fps)
        out.append({"cube_index": j, "keyframe_index": a, "start_s": float(ts[a]), "end_s": end, "n_frames": b - a})
    return out


def segments_json(part: CubePartition, timestamps: np.ndarray, fps: float) -> str:
    return json.dumps(segments(part, timestamps, fps), indent=2)


def cube_length_histogram(partitions) -> dict:
    """Counts of cube lengths over many partitions, plus summary statistics."""
    lengths = [n for p in partitions for n in p.lengths]
    if not lengths:
        return {"counts": {}, "median": None, "mean": None, "n_cubes": 0}
    values, counts = np.unique(lengths, return_counts=True)
    return {
        "counts": {int(v): int(c) for v, c in zip(values, counts)},
        "median": float(np.median(lengths)),
        "mean": float(np.mean(lengths)),
        "n_cubes": len(lengths),
    }
