"""Frame-token feature videos: synthesis, QSVF files and a toy frame encoder.

A :class:`FeatureVideo` stands in for the output of a frozen visual encoder:
``N_F`` frames of ``N1`` tokens of width ``d``.  Synthetic videos are built
from a :class:`SceneScript`; every frame of a scene is that scene's prototype
plus Gaussian noise, so scene starts are known exactly.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from vcube.autodiff import Value, ops
from vcube.errors import FormatError, ShapeError
from vcube.nn import Module
from vcube.rng import Rng, stream_id

QSVF_MAGIC = b"QSVF"
QSVF_VERSION = 1
_HEADER = struct.Struct("<4sIIIIf")


@dataclass
class FeatureVideo:
    features: np.ndarray  # (N_F, N1, d)
    fps: float = 1.0
    timestamps: np.ndarray | None = None
    source_id: str = ""

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 3:
            raise ShapeError("FeatureVideo", [self.features.shape], "features must be (N_F, N1, d)")
        if self.features.shape[0] < 1:
            raise ValueError("a video needs at least one frame")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features contain non-finite values")
        if self.fps <= 0:
            raise ValueError(f"fps must be positive, got {self.fps}")
        if self.timestamps is None:
            self.timestamps = np.arange(self.n_frames) / float(self.fps)
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        if self.timestamps.shape != (self.n_frames,):
            raise ShapeError("FeatureVideo", [self.timestamps.shape, (self.n_frames,)], "one timestamp per frame")
        if np.any(np.diff(self.timestamps) <= 0):
            raise ValueError("timestamps must be strictly increasing")

    @property
    def n_frames(self) -> int:
        return self.features.shape[0]

    @property
    def n_tokens(self) -> int:
        return self.features.shape[1]

    @property
    def dim(self) -> int:
        return self.features.shape[2]


@dataclass(frozen=True)
class Scene:
    duration: int
    label: int
    prototype_seed: int


@dataclass
class SceneScript:
    scenes: list[Scene]
    noise_sigma: float = 0.1
    grid: tuple[int, int] = (4, 4)
    n_tokens: int = 16
    dim: int = 32
    fps: float = 1.0

    def __post_init__(self):
        if not self.scenes:
            raise ValueError("a script needs at least one scene")
        if any(s.duration < 1 for s in self.scenes):
            raise ValueError("scene durations must be >= 1")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")

    @property
    def n_frames(self) -> int:
        return sum(s.duration for s in self.scenes)

    @property
    def labels(self) -> list[int]:
        return [s.label for s in self.scenes]

    @property
    def boundaries(self) -> list[int]:
        starts, t = [], 0
        for s in self.scenes:
            starts.append(t)
            t += s.duration
        return starts


def prototype(seed: int, n_tokens: int, dim: int) -> np.ndarray:
    """Scene prototype; entries ~ U(-1, 1), a pure function of ``seed``."""
    return Rng(seed, stream_id("prototype")).uniform((n_tokens, dim), -1.0, 1.0)


def label_prototype_seed(prototype_key: int, label: int) -> int:
    return stream_id("label-prototype", prototype_key, label)


def synthesize(script: SceneScript, rng: Rng) -> tuple[FeatureVideo, list[int]]:
    """Render a script to features; returns the video and its scene start frames.

    Values are rounded to float32 so that the video survives a QSVF round trip
    bit-exactly.
    """
    rows, cols = script.grid
    if rows * cols != script.n_tokens:
        raise ShapeError("synthesize", [(rows, cols), (script.n_tokens,)], "grid rows*cols must equal N1")
    chunks = []
    for k, scene in enumerate(script.scenes):
        proto = prototype(scene.prototype_seed, script.n_tokens, script.dim)
        noise = rng.child("scene", k).normal((scene.duration, script.n_tokens, script.dim))
        chunks.append(proto[None] + script.noise_sigma * noise)
    feats = np.concatenate(chunks).astype(np.float32).astype(np.float64)
    video = FeatureVideo(feats, fps=script.fps)
    return video, script.boundaries


def random_script(
    rng: Rng,
    *,
    min_frames: int = 16,
    max_frames: int = 64,
    scenes_min: int = 3,
    scenes_max: int = 8,
    sigma: float = 0.1,
    n_labels: int = 8,
    prototype_key: int = 0,
    grid: tuple[int, int] = (4, 4),
    dim: int = 32,
    duration_range: tuple[int, int] = (2, 12),
    fps: float = 1.0,
    max_tries: int = 100_000,
) -> SceneScript:
    """Draw scene count and durations, rejecting totals outside the frame range.

    Neighbouring scenes always get different labels, so every scene start is a
    visible change.
    """
    lo, hi = duration_range
    if scenes_min < 1 or scenes_max < scenes_min or min_frames > max_frames:
        raise ValueError("invalid scene/frame ranges")
    feasible = any(k * lo <= max_frames and k * hi >= min_frames for k in range(scenes_min, scenes_max + 1))
    if not feasible:
        raise ValueError("no scene count in range can produce a video length in range")
    if n_labels < 2 and scenes_max > 1:
        raise ValueError("need at least two labels for multi-scene videos")
    for _ in range(max_tries):
        k = rng.integers(scenes_min, scenes_max)
        durations = rng.integers(lo, hi, size=k)
        total = int(durations.sum())
        if min_frames <= total <= max_frames:
            break
    else:
        raise ValueError("could not draw a script within the frame range")
    labels = [rng.integers(0, n_labels - 1)]
    for _ in range(k - 1):
        nxt = rng.integers(0, n_labels - 2)
        labels.append(nxt if nxt < labels[-1] else nxt + 1)
    scenes = [Scene(int(d), int(lab), label_prototype_seed(prototype_key, int(lab)))
              for d, lab in zip(durations, labels)]
    return SceneScript(scenes, noise_sigma=sigma, grid=grid, n_tokens=grid[0] * grid[1], dim=dim, fps=fps)


# --- QSVF files ---------------------------------------------------------------------

def dumps_features(video: FeatureVideo, allow_lossy: bool = False) -> bytes:
    f32 = video.features.astype("<f4")
    if not allow_lossy and not np.array_equal(f32.astype(np.float64), video.features):
        raise ValueError("features are not float32-representable; pass allow_lossy=True to round")
    n_f, n1, d = video.features.shape
    return _HEADER.pack(QSVF_MAGIC, QSVF_VERSION, n_f, n1, d, video.fps) + f32.tobytes(order="C")


def loads_features(buf: bytes, source_id: str = "") -> FeatureVideo:
    if len(buf) < _HEADER.size:
        raise FormatError("file shorter than the QSVF header", len(buf))
    magic, version, n_f, n1, d, fps = _HEADER.unpack_from(buf, 0)
    if magic != QSVF_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {QSVF_MAGIC!r}", 0)
    if version != QSVF_VERSION:
        raise FormatError(f"unsupported QSVF version {version}", 4)
    if n_f < 1:
        raise FormatError("N_F must be >= 1", 8)
    if not np.isfinite(fps) or fps <= 0:
        raise FormatError(f"fps must be positive and finite, got {fps}", 20)
    count = n_f * n1 * d
    need = _HEADER.size + 4 * count
    if len(buf) < need:
        have = (len(buf) - _HEADER.size) // 4
        raise FormatError(
            f"truncated payload: header declares {n_f} frames ({count} values), found {have} values",
            len(buf),
        )
    if len(buf) > need:
        raise FormatError("trailing bytes after payload", need)
    vals = np.frombuffer(buf, dtype="<f4", count=count, offset=_HEADER.size)
    bad = np.flatnonzero(~np.isfinite(vals))
    if bad.size:
        raise FormatError("non-finite feature value", _HEADER.size + 4 * int(bad[0]))
    feats = vals.astype(np.float64).reshape(n_f, n1, d)
    return FeatureVideo(feats, fps=float(fps), source_id=source_id)


def save_features(path: str | os.PathLike, video: FeatureVideo, allow_lossy: bool = False) -> None:
    Path(path).write_bytes(dumps_features(video, allow_lossy=allow_lossy))


def load_features(path: str | os.PathLike) -> FeatureVideo:
    path = Path(path)
    return loads_features(path.read_bytes(), source_id=path.stem)


def sidecar_path(path: str | os.PathLike) -> Path:
    return Path(path).with_suffix(".json")


def save_sidecar(path: str | os.PathLike, boundaries: list[int], labels: list[int]) -> None:
    scenes = [{"start_frame": int(b), "label": int(lab)} for b, lab in zip(boundaries, labels)]
    Path(path).write_text(json.dumps(scenes))


def load_sidecar(path: str | os.PathLike) -> tuple[list[int], list[int]]:
    scenes = json.loads(Path(path).read_text())
    return [int(s["start_frame"]) for s in scenes], [int(s["label"]) for s in scenes]


# --- toy frame encoder --------------------------------------------------------------

class FrameEncoder(Module):
    """Per-token residual MLP standing in for trainable visual-encoder layers.

    ``depth=0`` passes features through untouched.
    """

    def __init__(self, depth: int, width: int, rng: Rng | None = None):
        super().__init__()
        if depth not in (0, 1, 2):
            raise ValueError(f"encoder depth must be 0, 1 or 2, got {depth}")
        self.depth = depth
        self.width = width
        rng = rng or Rng(0)
        for i in range(depth):
            r = rng.child("encoder", i)
            self.param(f"layer{i}.w", r.normal((width, width)) * (0.5 / np.sqrt(width)))
            self.param(f"layer{i}.b", np.zeros(width))

    def __call__(self, x: Value) -> Value:
        if x.shape[-1] != self.width:
            raise ShapeError("encode", [x.shape, (self.width,)], "feature width must equal encoder width")
        for i in range(self.depth):
            w, b = self._params[f"layer{i}.w"], self._params[f"layer{i}.b"]
            x = ops.add(x, ops.gelu(ops.add(ops.matmul(x, w), b)))
        return x


def encode(video: FeatureVideo, encoder: FrameEncoder) -> FeatureVideo:
    """Apply ``encoder`` to every token; returns a new video of the same shape."""
    from vcube.autodiff import no_grad

    with no_grad():
        out = encoder(Value(video.features)).data
    return FeatureVideo(out, fps=video.fps, timestamps=video.timestamps, source_id=video.source_id)


__all__ = [
    "FeatureVideo", "FrameEncoder", "Scene", "SceneScript", "encode", "load_features", "load_sidecar",
    "loads_features", "dumps_features", "prototype", "random_script", "save_features", "save_sidecar",
    "sidecar_path", "synthesize", "label_prototype_seed",
]
