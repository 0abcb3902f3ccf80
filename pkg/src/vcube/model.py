"""End-to-end pipeline: encoder -> cubing -> resampler -> decoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from vcube.autodiff import Value, no_grad, ops
from vcube.cubing import (
    CubePartition, CubingConfig, GateMLP, gumbel_perturb, momentum, partition, uniform_partition,
)
from vcube.features import FeatureVideo, FrameEncoder
from vcube.lm import Decoder, DecoderConfig, Vocab, assemble, total_loss
from vcube.nn import Module
from vcube.resampler import Resampler, ResamplerConfig, encode_video
from vcube.rng import Rng

GROUPS = ("cubing", "resampler", "encoder", "lm")


@dataclass
class ModelConfig:
    dim: int = 32
    n_tokens: int = 16
    grid: tuple[int, int] = (4, 4)
    n_labels: int = 8
    encoder_depth: int = 0
    cubing: CubingConfig = None
    resampler: ResamplerConfig = None
    decoder: DecoderConfig = None
    thumbnail_norm: str = "selected"
    membership: bool = False
    timestamp_style: str = "centiseconds"

    def __post_init__(self):
        self.cubing = self.cubing or CubingConfig()
        self.resampler = self.resampler or ResamplerConfig(dim=self.dim)
        self.decoder = self.decoder or DecoderConfig(dim=self.dim)
        if self.grid[0] * self.grid[1] != self.n_tokens:
            raise ValueError(f"grid {self.grid} does not cover {self.n_tokens} tokens")
        if self.resampler.dim != self.dim or self.decoder.dim != self.dim:
            raise ValueError("resampler and decoder widths must equal the feature width")


@dataclass
class Forward:
    loss: Value
    ntp: Value
    z: Value
    partition: CubePartition
    visual: Value
    sequence: object


class QuickModel(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        rng = Rng(seed).child("init")
        self.vocab = Vocab(cfg.n_labels)
        self.encoder = self.child("encoder", FrameEncoder(cfg.encoder_depth, cfg.dim, rng.child("encoder")))
        self.gate = self.child("cubing", GateMLP(cfg.dim, cfg.cubing.hidden, rng.child("cubing")))
        self.resampler = self.child("resampler", Resampler(cfg.resampler, rng.child("resampler")))
        self.decoder = self.child("lm", Decoder(cfg.decoder, self.vocab, rng.child("lm")))

    def group_parameters(self, groups) -> list[Value]:
        unknown = set(groups) - set(GROUPS)
        if unknown:
            raise ValueError(f"unknown parameter groups {sorted(unknown)}")
        return [p for name, p in self.named_parameters() if name.split(".", 1)[0] in groups]

    def gate_logits(self, features) -> tuple[Value, Value]:
        x = self.encoder(features if isinstance(features, Value) else Value(features))
        return x, self.gate(momentum(x, self.cfg.cubing.alpha))

    def infer_partition(self, video: FeatureVideo) -> CubePartition:
        with no_grad():
            _, z = self.gate_logits(video.features)
            part, _ = partition(ops.softmax(ops.scale(z, 1.0 / self.cfg.cubing.tau)), self.cfg.cubing.fpq, mode="infer")
        return part

    def answer_ids(self, labels) -> list[int]:
        return [self.vocab.label_id(int(k)) for k in labels]

    def forward(
        self,
        video: FeatureVideo,
        labels,
        *,
        eta: float = 0.0,
        rng: Rng | None = None,
        fixed_partition: bool = False,
        partition_override: CubePartition | None = None,
        surrogate: bool = False,
        detach_cubes: bool = False,
        beta: float | None = None,
        prompt=(),
    ) -> Forward:
        """One video's loss.

        ``surrogate`` replaces the straight-through gates with the continuous
        gate probabilities so the loss is a smooth function of every
        parameter; pair it with ``partition_override`` for finite differences.
        """
        cc = self.cfg.cubing
        x, z = self.gate_logits(video.features)
        probs = gumbel_perturb(z, cc.tau, eta, rng)
        if fixed_partition:
            part = uniform_partition(video.n_frames, cc.fpq)
            gate = Value(part.flags().astype(np.float64))
        else:
            part, gs = partition(probs, cc.fpq, mode="train")
            gate = gs.hard_gate
            if partition_override is not None:
                part = partition_override
                gate = ops.straight_through(part.flags().astype(np.float64), ops.getitem(probs, (slice(None), 0)))
            if surrogate:
                gate = ops.getitem(probs, (slice(None), 0))
        visual = encode_video(
            x, part, gate, self.resampler, self.cfg.grid,
            membership=self.cfg.membership, detach_cubes=detach_cubes, thumbnail_norm=self.cfg.thumbnail_norm,
        )
        times = [float(video.timestamps[a]) for a in part.keyframes]
        seq = assemble(self.cfg.resampler.n_out, part.n_cubes, times, prompt, self.answer_ids(labels),
                       self.vocab, self.cfg.timestamp_style)
        ntp, _ = self.decoder.loss(seq, visual)
        loss = total_loss(ntp, z, cc.beta if beta is None else beta)
        return Forward(loss, ntp, z, part, visual, seq)

    def predict_labels(self, video: FeatureVideo, fixed_partition: bool = False, max_new: int = 16) -> list[int]:
        with no_grad():
            x, z = self.gate_logits(video.features)
            if fixed_partition:
                part = uniform_partition(video.n_frames, self.cfg.cubing.fpq)
            else:
                part, _ = partition(ops.softmax(ops.scale(z, 1.0 / self.cfg.cubing.tau)), self.cfg.cubing.fpq, mode="infer")
            gate = Value(part.flags().astype(np.float64))
            visual = encode_video(x, part, gate, self.resampler, self.cfg.grid, thumbnail_norm=self.cfg.thumbnail_norm)
            times = [float(video.timestamps[a]) for a in part.keyframes]
            seq = assemble(self.cfg.resampler.n_out, part.n_cubes, times, (), [], self.vocab, self.cfg.timestamp_style)
        out = self.decoder.greedy_decode(seq, visual, max_new=max_new)
        return [lab for lab in (self.vocab.id_label(t) for t in out) if lab is not None]
