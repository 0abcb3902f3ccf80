"""Toy causal decoder over interleaved text ids and injected visual vectors."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from vcube.autodiff import Value, no_grad, ops
from vcube.errors import ShapeError
from vcube.nn import Module, glorot, layer_norm, linear
from vcube.rng import Rng

SPECIALS = ("<pad>", "<bos>", "<eos>", "<video>", "</video>", "<thumb>", "</thumb>", "<ts>", "</ts>")
DIGITS = tuple("0123456789")
MASK_VALUE = -1e9


class Vocab:
    """Dense ids: specials, then digits and '.', then one id per answer label."""

    def __init__(self, n_labels: int = 8):
        if n_labels < 1:
            raise ValueError("need at least one label")
        self.n_labels = n_labels
        self.tokens = list(SPECIALS) + list(DIGITS) + ["."] + [f"<label_{k}>" for k in range(n_labels)]
        self.ids = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def __getitem__(self, token: str) -> int:
        return self.ids[token]

    def label_id(self, label: int) -> int:
        if not 0 <= label < self.n_labels:
            raise ValueError(f"label {label} outside [0, {self.n_labels})")
        return self.ids[f"<label_{label}>"]

    def id_label(self, token_id: int) -> int | None:
        tok = self.tokens[token_id]
        return int(tok[7:-1]) if tok.startswith("<label_") else None

    def decode(self, ids) -> list[str]:
        return [self.tokens[i] for i in ids]


def format_timestamp(t: float, vocab: Vocab, style: str = "centiseconds") -> list[int]:
    """``<ts> digits </ts>`` for time ``t`` in seconds.

    ``centiseconds`` renders the integer count of 0.01 s units (12.34 s -> 1234);
    ``fixed2`` renders seconds with two decimals (12.34 s -> 12.34).
    """
    if not t >= 0:
        raise ValueError(f"timestamp must be >= 0, got {t}")
    cs = int(math.floor(t / 0.01 + 0.5))
    if style == "centiseconds":
        text = str(cs)
    elif style == "fixed2":
        text = f"{cs // 100}.{cs % 100:02d}"
    else:
        raise ValueError(f"unknown timestamp style {style!r}")
    return [vocab["<ts>"]] + [vocab[c] for c in text] + [vocab["</ts>"]]


@dataclass
class AssembledSequence:
    ids: np.ndarray          # token id per slot, -1 on visual slots
    visual_rows: np.ndarray  # row of the visual matrix per slot, -1 on text slots
    target_mask: np.ndarray  # True where the slot's token is a training target

    def __len__(self):
        return len(self.ids)

    @property
    def n_visual(self) -> int:
        return int((self.visual_rows >= 0).sum())

    def to_json(self, vocab: Vocab | None = None) -> str:
        slots = []
        for tid, row, tgt in zip(self.ids, self.visual_rows, self.target_mask):
            if row >= 0:
                slots.append({"visual": int(row)})
            else:
                slots.append({"id": int(tid), "token": vocab.tokens[tid] if vocab else None, "target": bool(tgt)})
        return json.dumps(slots)


def assemble(
    n_out: int,
    n_cubes: int,
    cube_times,
    prompt,
    answer,
    vocab: Vocab,
    timestamp_style: str = "centiseconds",
) -> AssembledSequence:
    """Lay out ``<bos><video><thumb>[thumb]</thumb>{<ts>..</ts>[cube]}*</video> prompt answer <eos>``.

    Visual rows follow encode order: rows ``0..n_out-1`` are the thumbnail and
    cube ``j`` occupies rows ``(j+1)*n_out ..``.  Targets are the answer and
    the closing ``<eos>``.
    """
    cube_times = list(cube_times)
    if len(cube_times) != n_cubes:
        raise ShapeError("assemble", [(len(cube_times),), (n_cubes,)], "one start time per cube")
    ids: list[int] = []
    rows: list[int] = []

    def text(toks):
        ids.extend(toks)
        rows.extend([-1] * len(toks))

    def visual(block):
        ids.extend([-1] * n_out)
        rows.extend(range(block * n_out, (block + 1) * n_out))

    text([vocab["<bos>"], vocab["<video>"], vocab["<thumb>"]])
    visual(0)
    text([vocab["</thumb>"]])
    for j, t in enumerate(cube_times):
        text(format_timestamp(t, vocab, timestamp_style))
        visual(j + 1)
    text([vocab["</video>"]])
    text(list(prompt))
    start = len(ids)
    text(list(answer) + [vocab["<eos>"]])
    mask = np.zeros(len(ids), dtype=bool)
    mask[start:] = True
    return AssembledSequence(np.array(ids, dtype=np.int64), np.array(rows, dtype=np.int64), mask)


def sequence_length(n_out: int, timestamp_digits, prompt_len: int, answer_len: int) -> int:
    """Slots in :func:`assemble`'s output: video and thumbnail markers, <bos> and <eos>, payload."""
    return 2 + 2 + n_out + sum(2 + k + n_out for k in timestamp_digits) + prompt_len + answer_len + 2


@dataclass
class DecoderConfig:
    dim: int = 32
    layers: int = 2
    heads: int = 2
    max_len: int = 512
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} is not divisible by heads {self.heads}")


class Decoder(Module):
    """Pre-LN causal transformer with learned absolute positions."""

    def __init__(self, cfg: DecoderConfig, vocab: Vocab, rng: Rng | None = None):
        super().__init__()
        rng = rng or Rng(0)
        self.cfg, self.vocab = cfg, vocab
        d = cfg.dim
        self.param("tok_emb", 0.5 * rng.child("tok_emb").normal((len(vocab), d)))
        self.param("pos_emb", 0.1 * rng.child("pos_emb").normal((cfg.max_len, d)))
        for i in range(cfg.layers):
            r = rng.child("layer", i)
            for name, shape in (("wq", (d, d)), ("wk", (d, d)), ("wv", (d, d)), ("wo", (d, d)),
                                ("w1", (d, cfg.mlp_ratio * d)), ("w2", (cfg.mlp_ratio * d, d))):
                self.param(f"h{i}.{name}", glorot(r.child(name), *shape))
                if name != "wk":   # a key bias cannot change the attention softmax
                    self.param(f"h{i}.b{name[1:]}", np.zeros(shape[1]))
            for ln in ("ln1", "ln2"):
                self.param(f"h{i}.{ln}.g", np.ones(d))
                self.param(f"h{i}.{ln}.b", np.zeros(d))
        self.param("ln_f.g", np.ones(d))
        self.param("ln_f.b", np.zeros(d))
        self.param("head", glorot(rng.child("head"), d, len(vocab)))

    def embed(self, seq: AssembledSequence, visual: Value | None) -> Value:
        n = len(seq)
        if n > self.cfg.max_len:
            raise ShapeError("decode", [(n,), (self.cfg.max_len,)], "sequence exceeds max length")
        table = self._params["tok_emb"]
        v = len(self.vocab)
        index = np.where(seq.visual_rows >= 0, v + seq.visual_rows, seq.ids)
        if seq.n_visual:
            if visual is None or visual.shape[-1] != self.cfg.dim or seq.visual_rows.max() >= visual.shape[0]:
                got = [] if visual is None else [visual.shape]
                raise ShapeError("decode", got + [(int(seq.visual_rows.max()) + 1, self.cfg.dim)], "visual rows")
            table = ops.concat([table, visual], axis=0)
        x = ops.take(table, index, axis=0)
        return ops.add(x, ops.getitem(self._params["pos_emb"], slice(0, n)))

    def _attention(self, x: Value, i: int) -> Value:
        p = self._params
        n, d = x.shape
        h = self.cfg.heads
        dh = d // h

        def split(t):
            return ops.swapaxes(ops.reshape(t, (n, h, dh)), 0, 1)   # (H, n, dh)

        q = split(linear(x, p[f"h{i}.wq"], p[f"h{i}.bq"]))
        k = split(linear(x, p[f"h{i}.wk"]))
        v = split(linear(x, p[f"h{i}.wv"], p[f"h{i}.bv"]))
        s = ops.scale(ops.matmul(q, ops.swapaxes(k, -1, -2)), 1.0 / np.sqrt(dh))
        s = ops.add(s, np.triu(np.full((n, n), MASK_VALUE), k=1))
        out = ops.matmul(ops.softmax(s), v)                          # (H, n, dh)
        out = ops.reshape(ops.swapaxes(out, 0, 1), (n, d))
        return linear(out, p[f"h{i}.wo"], p[f"h{i}.bo"])

    def logits(self, seq: AssembledSequence, visual: Value | None = None) -> Value:
        p = self._params
        x = self.embed(seq, visual)
        for i in range(self.cfg.layers):
            x = ops.add(x, self._attention(layer_norm(x, p[f"h{i}.ln1.g"], p[f"h{i}.ln1.b"]), i))
            hdn = ops.gelu(linear(layer_norm(x, p[f"h{i}.ln2.g"], p[f"h{i}.ln2.b"]), p[f"h{i}.w1"], p[f"h{i}.b1"]))
            x = ops.add(x, linear(hdn, p[f"h{i}.w2"], p[f"h{i}.b2"]))
        return ops.matmul(layer_norm(x, p["ln_f.g"], p["ln_f.b"]), p["head"])

    def loss(self, seq: AssembledSequence, visual: Value | None = None) -> tuple[Value, Value]:
        """Mean next-token cross-entropy over target slots, and the logits."""
        pos = np.flatnonzero(seq.target_mask)
        if pos.size == 0 or pos[0] == 0:
            raise ShapeError("decode", [seq.target_mask.shape], "need targets after position 0")
        logits = self.logits(seq, visual)
        return ops.cross_entropy(ops.take(logits, pos - 1, axis=0), seq.ids[pos]), logits

    def greedy_decode(self, seq: AssembledSequence, visual: Value | None, max_new: int = 16) -> list[int]:
        """Generate after the last non-target slot until ``<eos>`` or ``max_new`` tokens."""
        keep = ~seq.target_mask
        cur = AssembledSequence(seq.ids[keep], seq.visual_rows[keep], np.zeros(int(keep.sum()), dtype=bool))
        out: list[int] = []
        eos = self.vocab["<eos>"]
        with no_grad():
            for _ in range(max_new):
                if len(cur) >= self.cfg.max_len:
                    break
                nxt = int(np.argmax(self.logits(cur, visual).data[-1]))
                if nxt == eos:
                    break
                out.append(nxt)
                cur = AssembledSequence(np.append(cur.ids, nxt), np.append(cur.visual_rows, -1),
                                        np.append(cur.target_mask, False))
        return out


def gate_penalty(z: Value) -> Value:
    """Mean over frames of the squared gate-logit norm."""
    return ops.scale(ops.square_sum(z), 1.0 / z.shape[0])


def total_loss(ntp: Value, z: Value, beta: float) -> Value:
    if beta < 0:
        raise ValueError("beta must be >= 0")
    if beta == 0:
        return ntp
    return ops.add(ntp, ops.scale(gate_penalty(z), beta))
