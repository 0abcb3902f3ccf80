"""Fixed-budget token resampling for cubes and the video thumbnail.

Each cube is unfolded frame-major into ``n_frames * N1`` tokens, tagged with a
sinusoidal (t, x, y) encoding on the keys, and compressed to ``N2`` tokens by
learned queries through one multi-head cross-attention block.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from vcube.autodiff import Value, ops
from vcube.cubing import CubePartition
from vcube.errors import ShapeError
from vcube.nn import Module, glorot, layer_norm, linear
from vcube.rng import Rng


def default_pe_split(dim: int, pe: str = "3d") -> tuple[int, int, int]:
    if pe == "2d":
        if dim % 4:
            raise ValueError("2D positional encoding needs dim divisible by 4")
        return (0, dim // 2, dim // 2)
    if pe != "3d":
        raise ValueError(f"pe must be '2d' or '3d', got {pe!r}")
    spatial = 2 * (dim // 6)
    return (dim - 2 * spatial, spatial, spatial)


@dataclass
class ResamplerConfig:
    n_out: int = 8
    dim: int = 32
    heads: int = 2
    pe_split: tuple[int, int, int] | None = None

    def __post_init__(self):
        if self.pe_split is None:
            self.pe_split = default_pe_split(self.dim)
        self.pe_split = tuple(int(v) for v in self.pe_split)
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if sum(self.pe_split) != self.dim or any(v < 0 or v % 2 for v in self.pe_split):
            raise ShapeError("pe_3d", [self.pe_split, (self.dim,)], "PE split must be even parts summing to dim")
        if self.n_out < 1:
            raise ValueError("n_out must be >= 1")


@dataclass
class CubeTokens:
    tokens: np.ndarray  # (L, d)
    coords: np.ndarray  # (L, 3) ints: frame-within-cube, col, row


def token_coords(n_frames: int, grid: tuple[int, int], t0: int = 0) -> np.ndarray:
    """(frame, col, row) per token for ``n_frames`` unfolded frame-major."""
    rows, cols = grid
    j = np.arange(rows * cols)
    t = np.repeat(np.arange(t0, t0 + n_frames), rows * cols)
    return np.stack([t, np.tile(j % cols, n_frames), np.tile(j // cols, n_frames)], axis=1)


def unfold_cube(frames: np.ndarray, grid: tuple[int, int]) -> CubeTokens:
    frames = np.asarray(frames, dtype=np.float64)
    n, n1, d = frames.shape
    if grid[0] * grid[1] != n1:
        raise ShapeError("unfold_cube", [frames.shape, grid], "grid must cover N1 tokens")
    return CubeTokens(frames.reshape(n * n1, d), token_coords(n, grid))


def _axis_encoding(pos: np.ndarray, width: int) -> np.ndarray:
    if width == 0:
        return np.zeros(pos.shape + (0,))
    half = width // 2
    freqs = 1.0 / (10000.0 ** (2.0 * np.arange(half) / width))
    ang = pos[..., None].astype(np.float64) * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def pe_3d(coords, cfg: ResamplerConfig) -> np.ndarray:
    """Sinusoidal encoding per axis on its own slice of the embedding: [t | x | y]."""
    coords = np.asarray(coords)
    if coords.shape[-1] != 3:
        raise ShapeError("pe_3d", [coords.shape], "coords must be (..., 3)")
    if np.any(coords < 0):
        raise ValueError("coordinates must be non-negative")
    dt, dx, dy = cfg.pe_split
    return np.concatenate(
        [_axis_encoding(coords[..., 0], dt), _axis_encoding(coords[..., 1], dx), _axis_encoding(coords[..., 2], dy)],
        axis=-1,
    )


class Resampler(Module):
    """Learned queries -> LN -> multi-head cross-attention over (LN(kv) + PE) -> LN -> projection."""

    def __init__(self, cfg: ResamplerConfig, rng: Rng | None = None):
        super().__init__()
        rng = rng or Rng(0)
        self.cfg = cfg
        d = cfg.dim
        self.param("query", rng.child("query").normal((cfg.n_out, d)))
        self.param("ln_q.g", np.ones(d))
        self.param("ln_q.b", np.zeros(d))
        self.param("kv_proj", glorot(rng.child("kv_proj"), d, d))
        self.param("ln_kv.g", np.ones(d))
        self.param("ln_kv.b", np.zeros(d))
        for name in ("wq", "wk", "wv", "wo"):
            self.param(name, glorot(rng.child(name), d, d))
        # no key bias: softmax over keys is invariant to it
        for name in ("bq", "bv", "bo"):
            self.param(name, np.zeros(d))
        self.param("ln_post.g", np.ones(d))
        self.param("ln_post.b", np.zeros(d))
        self.param("proj", glorot(rng.child("proj"), d, d))

    def _heads(self, x: Value) -> Value:
        # (..., L, d) -> (..., H, L, d/H)
        h = self.cfg.heads
        lead = x.shape[:-2]
        n = x.shape[-2]
        x = ops.reshape(x, lead + (n, h, self.cfg.dim // h))
        return ops.swapaxes(x, -2, -3)

    def __call__(self, keys: Value, pe: np.ndarray, key_weights=None) -> Value:
        """``keys`` (C, L, d), ``pe`` (C, L, d), ``key_weights`` (C, L) -> (C, N2, d)."""
        keys = keys if isinstance(keys, Value) else Value(keys)
        if keys.ndim != 3 or keys.shape[-1] != self.cfg.dim:
            raise ShapeError("resample", [keys.shape], f"expected (C, L, {self.cfg.dim})")
        if keys.shape[1] < 1:
            raise ShapeError("resample", [keys.shape], "empty cube")
        if pe.shape != keys.shape:
            raise ShapeError("resample", [keys.shape, pe.shape], "positional encoding shape")
        p = self._params
        c, length, d = keys.shape
        dh = d // self.cfg.heads

        kv = layer_norm(ops.matmul(keys, p["kv_proj"]), p["ln_kv.g"], p["ln_kv.b"])
        q = layer_norm(p["query"], p["ln_q.g"], p["ln_q.b"])
        q = self._heads(linear(q, p["wq"], p["bq"]))                           # (H, N2, dh)
        k = self._heads(linear(ops.add(kv, pe), p["wk"]))                       # (C, H, L, dh)
        v = self._heads(linear(kv, p["wv"], p["bv"]))                           # (C, H, L, dh)
        scores = ops.scale(ops.matmul(q, ops.swapaxes(k, -1, -2)), 1.0 / np.sqrt(dh))  # (C, H, N2, L)
        if key_weights is None:
            attn = ops.softmax(scores)
        else:
            w = key_weights if isinstance(key_weights, Value) else Value(key_weights)
            if w.shape != (c, length):
                raise ShapeError("resample", [w.shape, (c, length)], "key weights")
            attn = ops.weighted_softmax(scores, ops.reshape(w, (c, 1, 1, length)))
        out = ops.matmul(attn, v)                                                # (C, H, N2, dh)
        out = ops.reshape(ops.swapaxes(out, 1, 2), (c, self.cfg.n_out, d))
        out = linear(out, p["wo"], p["bo"])
        return ops.matmul(layer_norm(out, p["ln_post.g"], p["ln_post.b"]), p["proj"])

    def attention_weights(self, keys: np.ndarray, pe: np.ndarray, key_weights=None) -> np.ndarray:
        """Attention probabilities (C, H, N2, L) for inspection."""
        from vcube.autodiff import no_grad

        p = self._params
        with no_grad():
            kv = layer_norm(ops.matmul(Value(keys), p["kv_proj"]), p["ln_kv.g"], p["ln_kv.b"])
            q = self._heads(linear(layer_norm(p["query"], p["ln_q.g"], p["ln_q.b"]), p["wq"], p["bq"]))
            k = self._heads(linear(ops.add(kv, pe), p["wk"]))
            s = ops.scale(ops.matmul(q, ops.swapaxes(k, -1, -2)), 1.0 / np.sqrt(self.cfg.dim // self.cfg.heads))
            if key_weights is None:
                return ops.softmax(s).data
            c, length = keys.shape[:2]
            return ops.weighted_softmax(s, np.reshape(key_weights, (c, 1, 1, length))).data

    def resample(self, cube: CubeTokens) -> Value:
        """Compress one cube's tokens to (N2, d)."""
        if cube.tokens.shape[0] < 1:
            raise ShapeError("resample", [cube.tokens.shape], "empty cube")
        tokens = cube.tokens if isinstance(cube.tokens, Value) else Value(cube.tokens)
        out = self(ops.reshape(tokens, (1,) + tokens.shape), pe_3d(cube.coords, self.cfg)[None])
        return ops.reshape(out, (self.cfg.n_out, self.cfg.dim))


def thumbnail_tokens(frames: Value, gate: Value | np.ndarray, normalize: str = "selected") -> Value:
    """Gate-weighted average of frames (N_F, N1, d) -> (N1, d).

    ``normalize="selected"`` divides by the gate sum; ``"all"`` by N_F.
    """
    frames = frames if isinstance(frames, Value) else Value(frames)
    gate = gate if isinstance(gate, Value) else Value(gate)
    if gate.shape != (frames.shape[0],):
        raise ShapeError("thumbnail", [frames.shape, gate.shape])
    if normalize == "selected":
        if not np.any(gate.data != 0):
            raise ValueError("thumbnail gate selects no frame")
        return ops.masked_mean(frames, gate, axis=0)
    if normalize == "all":
        weighted = ops.mul(frames, ops.reshape(gate, (-1, 1, 1)))
        return ops.scale(ops.sum(weighted, axis=0), 1.0 / frames.shape[0])
    raise ValueError(f"normalize must be 'selected' or 'all', got {normalize!r}")


def thumbnail(frames: Value, gate, resampler: Resampler, grid: tuple[int, int], normalize: str = "selected") -> Value:
    tokens = thumbnail_tokens(frames, gate, normalize)
    return resampler.resample(CubeTokens(tokens, token_coords(1, grid)))


@dataclass
class CubeBatchLayout:
    """Index plan for resampling the thumbnail and all cubes in one batch."""

    source_index: np.ndarray   # (C, L) rows of concat([frames_flat, thumbnail])
    coords: np.ndarray         # (C, L, 3)
    frame_index: np.ndarray    # (C, S) frame whose gate modulates each slot
    weight_base: np.ndarray    # (C, S)
    weight_sign: np.ndarray    # (C, S)
    slots: int                 # frame slots per row


def cube_batch_layout(part: CubePartition, n_tokens: int, grid: tuple[int, int], membership: bool) -> CubeBatchLayout:
    """Row 0 is the thumbnail; row j+1 holds cube j's frames.

    With ``membership`` each cube also carries the next cube's keyframe at
    weight ``1 - gate`` (0 in the forward pass) and its own interior frames at
    ``1 - gate`` (1 in the forward pass), which routes boundary gradients
    to the gates without changing forward values.
    """
    spans = part.spans
    n_f = part.n_frames
    extra = [1 if membership and b < n_f else 0 for _, b in spans]
    slots = max(max(b - a + e for (a, b), e in zip(spans, extra)), 1)
    c = len(spans) + 1
    frame_index = np.zeros((c, slots), dtype=np.int64)
    base = np.zeros((c, slots))
    sign = np.zeros((c, slots))
    coords = np.zeros((c, slots * n_tokens, 3), dtype=np.int64)
    src = np.zeros((c, slots * n_tokens), dtype=np.int64)

    tok = np.arange(n_tokens)
    base[0, 0] = 1.0
    src[0, :n_tokens] = n_f * n_tokens + tok
    coords[0] = token_coords(slots, grid)
    coords[0, :, 0] = 0
    for j, ((a, b), e) in enumerate(zip(spans, extra), start=1):
        frames = np.arange(a, b + e)
        m = len(frames)
        frame_index[j, :m] = frames
        base[j, :m] = 1.0
        if membership:
            sign[j, 1:m] = -1.0
        src[j, :m * n_tokens] = (frames[:, None] * n_tokens + tok[None, :]).reshape(-1)
        coords[j] = token_coords(slots, grid)
    return CubeBatchLayout(src, coords, frame_index, base, sign, slots)


def encode_video(
    frames: Value,
    part: CubePartition,
    gate: Value | np.ndarray,
    resampler: Resampler,
    grid: tuple[int, int],
    *,
    membership: bool = False,
    detach_cubes: bool = False,
    thumbnail_norm: str = "selected",
) -> Value:
    """Visual tokens ``[thumbnail | cube_1 | ... | cube_NQ]``, shape ((N_Q+1)*N2, d).

    ``gate`` holds one straight-through keyframe gate per frame.  With
    ``detach_cubes`` the cube rows see neither the frame graph nor the gates,
    so gate gradients can only arrive through the thumbnail.
    """
    frames = frames if isinstance(frames, Value) else Value(frames)
    gate = gate if isinstance(gate, Value) else Value(gate)
    n_f, n1, d = frames.shape
    if part.n_frames != n_f:
        raise ShapeError("encode_video", [frames.shape, (part.n_frames,)], "partition length")
    layout = cube_batch_layout(part, n1, grid, membership and not detach_cubes)
    thumb = thumbnail_tokens(frames, gate, thumbnail_norm)
    flat = ops.reshape(frames, (n_f * n1, d))
    if detach_cubes:
        flat = ops.detach(flat)
    source = ops.concat([flat, thumb], axis=0)
    keys = ops.take(source, layout.source_index, axis=0)                        # (C, L, d)

    if membership and not detach_cubes and gate.requires_grad:
        slot_w = ops.add(ops.mul(ops.take(gate, layout.frame_index, axis=0), layout.weight_sign), layout.weight_base)
        weights = ops.take(slot_w, np.repeat(np.arange(layout.slots), n1), axis=1)
    else:
        weights = Value(np.repeat(layout.weight_base + layout.weight_sign * gate.data[layout.frame_index], n1, axis=1))
    out = resampler(keys, pe_3d(layout.coords, resampler.cfg), weights)
    return ops.reshape(out, (out.shape[0] * out.shape[1], d))
