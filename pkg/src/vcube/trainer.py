"""Training loop, optimizer, schedules and evaluation metrics."""

from __future__ import annotations

import csv
import dataclasses
import itertools
import json
import math
import os
import time
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from vcube import checkpoint
from vcube.autodiff import backward, ops
from vcube.cubing import CubePartition, CubingConfig, anneal_eta, cube_length_histogram, uniform_partition
from vcube.errors import ConfigError, NonFiniteGradientError, TrainingAborted
from vcube.features import FeatureVideo, random_script, synthesize
from vcube.lm import DecoderConfig
from vcube.model import GROUPS, ModelConfig, QuickModel
from vcube.resampler import ResamplerConfig, default_pe_split
from vcube.rng import Rng


@dataclass
class TrainConfig:
    seed: int = 0
    steps: int = 2000
    batch_size: int = 8
    lr: float = 3e-3
    warmup_frac: float = 0.05
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    eval_every: int = 250
    # cubing
    alpha: float = 0.9
    fpq: float = 5
    tau: float = 1.0
    eta0: float = 1.0
    eta_final: float = 0.01
    anneal_ratio: float = 0.6
    anneal: bool = True
    beta: float = 0.001
    gate_hidden: int = 64
    fixed_partition: bool = False
    membership: bool = False
    # resampler / decoder
    dim: int = 32
    n_out: int = 8
    heads: int = 2
    pe: str = "3d"
    thumbnail_norm: str = "selected"
    lm_layers: int = 2
    lm_heads: int = 2
    max_len: int = 512
    timestamp_style: str = "centiseconds"
    # features
    n_tokens: int = 16
    grid_rows: int = 4
    grid_cols: int = 4
    n_labels: int = 8
    encoder_depth: int = 0
    trainable: str = "all"

    def __post_init__(self):
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ConfigError(f"warmup_frac must lie in [0, 1), got {self.warmup_frac}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.steps < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise ConfigError("steps, batch_size and eval_every must be >= 1")
        if self.pe not in ("2d", "3d"):
            raise ConfigError(f"pe must be 2d or 3d, got {self.pe!r}")
        try:
            self.trainable_groups()
            self.model_config()
        except (ValueError, ConfigError) as e:
            raise ConfigError(str(e)) from None

    def trainable_groups(self) -> tuple[str, ...]:
        if self.trainable == "all":
            return GROUPS
        if self.trainable == "partial":
            return ("cubing", "resampler", "encoder")
        groups = tuple(g.strip() for g in self.trainable.split(",") if g.strip())
        bad = [g for g in groups if g not in GROUPS]
        if bad or not groups:
            raise ConfigError(f"trainable must be all, partial or a list of {GROUPS}, got {self.trainable!r}")
        return groups

    def cubing_config(self) -> CubingConfig:
        eta_final = self.eta_final if self.anneal else self.eta0
        return CubingConfig(self.alpha, self.fpq, self.tau, self.eta0, eta_final, self.anneal_ratio,
                            self.beta, self.gate_hidden)

    def model_config(self) -> ModelConfig:
        rc = ResamplerConfig(self.n_out, self.dim, self.heads, default_pe_split(self.dim, self.pe))
        dc = DecoderConfig(self.dim, self.lm_layers, self.lm_heads, self.max_len)
        return ModelConfig(self.dim, self.n_tokens, (self.grid_rows, self.grid_cols), self.n_labels,
                           self.encoder_depth, self.cubing_config(), rc, dc, self.thumbnail_norm,
                           self.membership, self.timestamp_style)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _parse_value(name: str, text: str, kind):
    text = text.strip()
    if kind is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {text!r}")
    try:
        return kind(text)
    except ValueError:
        raise ConfigError(f"{name}: expected {kind.__name__}, got {text!r}") from None


_FIELD_TYPES = {f.name: {"int": int, "float": float, "bool": bool, "str": str}[f.type]
                for f in dataclasses.fields(TrainConfig)}


def config_from_pairs(pairs: dict[str, str], base: TrainConfig | None = None) -> TrainConfig:
    unknown = sorted(set(pairs) - set(_FIELD_TYPES))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    values = (base or TrainConfig()).to_dict()
    for k, v in pairs.items():
        values[k] = _parse_value(k, v, _FIELD_TYPES[k]) if isinstance(v, str) else v
    return TrainConfig(**values)


def parse_config_text(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    pairs = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        if k in pairs:
            raise ConfigError(f"line {lineno}: duplicate key {k!r}")
        pairs[k] = v
    return config_from_pairs(pairs, base)


def load_config(path) -> TrainConfig:
    return parse_config_text(Path(path).read_text())


def dump_config(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {str(v).lower() if isinstance(v, bool) else v}\n" for k, v in cfg.to_dict().items())


# --- optimizer and schedules --------------------------------------------------------

class AdamW:
    """Adam with bias correction and decoupled weight decay on matrices."""

    def __init__(self, named_params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = list(named_params)
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.m = [np.zeros_like(p.data) for _, p in self.params]
        self.v = [np.zeros_like(p.data) for _, p in self.params]
        self.t = 0

    def step(self, lr: float | None = None):
        lr = self.lr if lr is None else lr
        for name, p in self.params:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NonFiniteGradientError(name)
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for (_, p), m, v in zip(self.params, self.m, self.v):
            g = np.zeros_like(p.data) if p.grad is None else p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay and p.data.ndim >= 2:
                update = update + self.weight_decay * p.data
            p.data = p.data - lr * update

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {"optim.t": np.array([self.t], dtype=np.float64)}
        for (name, _), m, v in zip(self.params, self.m, self.v):
            out[f"optim.m.{name}"] = m.copy()
            out[f"optim.v.{name}"] = v.copy()
        return out


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    sq = sum(float((p.grad * p.grad).sum()) for p in params if p.grad is not None)
    norm = math.sqrt(sq)
    if max_norm > 0 and norm > max_norm:
        s = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * s
    return norm


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``cfg.lr`` then cosine decay to 0 at ``cfg.steps``."""
    if step < 0:
        raise ValueError("step must be >= 0")
    warm = cfg.warmup_frac * cfg.steps
    if step < warm:
        return cfg.lr * step / warm
    if step >= cfg.steps:
        return 0.0
    frac = (step - warm) / (cfg.steps - warm)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * frac))


# --- data ---------------------------------------------------------------------------

@dataclass
class Example:
    video: FeatureVideo
    boundaries: list[int]
    labels: list[int]


def synthetic_dataset(n: int, seed: int, split: str = "train", **script_kw) -> list[Example]:
    """``n`` videos drawn from independent per-index streams of ``seed``."""
    root = Rng(seed).child("dataset", split)
    out = []
    for i in range(n):
        r = root.child(i)
        script = random_script(r.child("script"), **script_kw)
        video, bounds = synthesize(script, r.child("render"))
        video.source_id = f"{split}_{i:05d}"
        out.append(Example(video, bounds, script.labels))
    return out


# --- metrics ------------------------------------------------------------------------

def match_boundaries(pred, truth, tol: int = 1) -> int:
    """Size of a largest one-to-one matching of frames within ``tol`` of each other.

    Sweeping truths in order and taking the earliest free prediction in the
    window is optimal here because every window has the same width.
    """
    preds = sorted(set(pred))
    hits, j = 0, 0
    for t in sorted(set(truth)):
        while j < len(preds) and preds[j] < t - tol:
            j += 1
        if j < len(preds) and preds[j] <= t + tol:
            hits += 1
            j += 1
    return hits


def boundary_prf(preds, truths, tol: int = 1) -> dict:
    """Micro-averaged precision/recall/F1 over many videos."""
    tp = sum(match_boundaries(p, t, tol) for p, t in zip(preds, truths))
    n_pred = sum(len(set(p)) for p in preds)
    n_true = sum(len(set(t)) for t in truths)
    precision = tp / n_pred if n_pred else 0.0
    recall = tp / n_true if n_true else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {"precision": precision, "recall": recall, "f1": f1, "tp": tp, "n_pred": n_pred, "n_true": n_true}


def compression_row(n_frames, n1: int, n2: int, fpq, thumbnail: bool = True) -> dict:
    """Exact tokens/frame and compression for one video length; ``n_frames=None`` gives the large-N_F limit."""
    if n_frames is None:
        tpf = Fraction(n2) / Fraction(fpq).limit_denominator()
    else:
        from vcube.cubing import num_cubes

        nq = num_cubes(n_frames, fpq)
        tpf = Fraction((nq + (1 if thumbnail else 0)) * n2, n_frames)
    return {"tokens_per_frame": tpf, "compression": Fraction(n1) / tpf}


def compression_stats(frame_counts, n1: int, n2: int, fpq) -> dict:
    per = []
    for n in frame_counts:
        a = compression_row(n, n1, n2, fpq, True)
        b = compression_row(n, n1, n2, fpq, False)
        per.append({"n_frames": n, "tokens_per_frame": a["tokens_per_frame"], "compression": a["compression"],
                    "tokens_per_frame_no_thumb": b["tokens_per_frame"], "compression_no_thumb": b["compression"]})
    lim = compression_row(None, n1, n2, fpq)
    mean = (lambda k: sum((r[k] for r in per), Fraction(0)) / len(per)) if per else (lambda k: None)
    return {
        "per_video": per,
        "mean_compression": mean("compression"),
        "mean_compression_no_thumb": mean("compression_no_thumb"),
        "mean_tokens_per_frame": mean("tokens_per_frame"),
        "asymptotic_tokens_per_frame": lim["tokens_per_frame"],
        "asymptotic_compression": lim["compression"],
    }


def fraction_str(x: Fraction) -> str:
    return str(x.numerator) if x.denominator == 1 else format(float(x), ".6g")


def predicted_partitions(model: QuickModel, examples, fixed: bool = False) -> list[CubePartition]:
    if fixed:
        return [uniform_partition(e.video.n_frames, model.cfg.cubing.fpq) for e in examples]
    return [model.infer_partition(e.video) for e in examples]


def evaluate_boundaries(model: QuickModel, examples, fixed: bool = False, tol: int = 1) -> dict:
    parts = predicted_partitions(model, examples, fixed)
    res = boundary_prf([p.keyframes for p in parts], [e.boundaries for e in examples], tol)
    hist = cube_length_histogram(parts)
    cfg = model.cfg
    comp = [Fraction(e.video.n_frames * cfg.n_tokens, (p.n_cubes + 1) * cfg.resampler.n_out)
            for e, p in zip(examples, parts)]
    res.update(mean_cube_length=hist["mean"], median_cube_length=hist["median"],
               compression=float(sum(comp, Fraction(0)) / len(comp)) if comp else None)
    return res


def answer_accuracy(model: QuickModel, examples, fixed: bool = False) -> float:
    hits = sum(model.predict_labels(e.video, fixed_partition=fixed) == list(e.labels) for e in examples)
    return hits / len(examples) if examples else 0.0


# --- training -----------------------------------------------------------------------

@dataclass
class TrainResult:
    model: QuickModel
    records: list[dict]
    checkpoint: str | None
    seconds: float


def model_state(model: QuickModel, cfg: TrainConfig) -> dict[str, np.ndarray]:
    state = model.state_dict()
    raw = np.frombuffer(json.dumps(cfg.to_dict(), sort_keys=True).encode(), dtype=np.uint8)
    state["meta.config"] = raw.astype(np.float64)
    return state


def config_from_state(state: dict[str, np.ndarray]) -> TrainConfig:
    if "meta.config" not in state:
        raise ConfigError("checkpoint carries no config")
    return TrainConfig(**json.loads(state["meta.config"].astype(np.uint8).tobytes().decode()))


def load_model(path) -> tuple[QuickModel, TrainConfig]:
    state = checkpoint.load(path)
    cfg = config_from_state(state)
    model = QuickModel(cfg.model_config(), seed=cfg.seed)
    model.load_state_dict({k: v for k, v in state.items() if not k.startswith("meta.")})
    return model, cfg


def batch_indices(n: int, step: int, batch: int, seed: int, cache: dict | None = None) -> list[int]:
    """Deterministic epoch-shuffled batches; step ``s`` covers positions ``s*batch ..``."""
    cache = {} if cache is None else cache
    out = []
    for pos in range(step * batch, (step + 1) * batch):
        epoch, k = divmod(pos, n)
        if epoch not in cache:
            cache.clear()
            cache[epoch] = Rng(seed).child("shuffle", epoch).permutation(n)
        out.append(int(cache[epoch][k]))
    return out


def train(
    cfg: TrainConfig,
    train_set: list[Example],
    eval_set: list[Example] | None = None,
    out_dir=None,
    log_timing: bool = True,
) -> TrainResult:
    """Train end to end.

    Writes ``metrics.jsonl`` (one record per step; boundary metrics at the
    eval cadence and on the last step) and ``final.qsck`` when ``out_dir`` is
    given.  A non-finite loss saves the previous parameters to
    ``last_good.qsck`` and raises :class:`TrainingAborted`.
    """
    if not train_set:
        raise ValueError("training set is empty")
    model = QuickModel(cfg.model_config(), seed=cfg.seed)
    groups = cfg.trainable_groups()
    trainable = [(n, p) for n, p in model.named_parameters() if n.split(".", 1)[0] in groups]
    frozen = [p for n, p in model.named_parameters() if n.split(".", 1)[0] not in groups]
    for p in frozen:
        p.requires_grad = False
    opt = AdamW(trainable, cfg.lr, weight_decay=cfg.weight_decay)
    cc = model.cfg.cubing
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    metrics_fh = open(out / "metrics.jsonl", "w") if out is not None else None
    timing_fh = open(out / "timing.jsonl", "w") if out is not None and log_timing else None
    shuffle = {}
    records = []
    t_start = time.perf_counter()
    try:
        for step in range(cfg.steps):
            eta = anneal_eta(step, cfg.steps, cc)
            lr = lr_schedule(step, cfg)
            model.zero_grad()
            order = batch_indices(len(train_set), step, cfg.batch_size, cfg.seed, shuffle)
            total = 0.0
            for i in range(cfg.batch_size):
                ex = train_set[order[i]]
                fw = model.forward(ex.video, ex.labels, eta=eta, rng=Rng(cfg.seed).child("gumbel", step, i),
                                   fixed_partition=cfg.fixed_partition)
                loss = fw.loss
                if not np.isfinite(loss.data):
                    raise FloatingPointError(f"non-finite loss at step {step}")
                backward(ops.scale(loss, 1.0 / cfg.batch_size))
                total += float(loss.data)
            grads = [p for _, p in trainable]
            norm = clip_grad_norm(grads, cfg.grad_clip)
            opt.step(lr)
            rec = {"step": step, "loss": total / cfg.batch_size, "eta": eta, "lr": lr, "grad_norm": norm}
            if eval_set and ((step + 1) % cfg.eval_every == 0 or step + 1 == cfg.steps):
                ev = evaluate_boundaries(model, eval_set, fixed=cfg.fixed_partition)
                rec.update({k: ev[k] for k in ("precision", "recall", "f1", "mean_cube_length", "compression")})
            records.append(rec)
            if metrics_fh:
                metrics_fh.write(json.dumps(rec) + "\n")
                metrics_fh.flush()
            if timing_fh:
                timing_fh.write(json.dumps({"step": step, "wall_clock": time.perf_counter() - t_start}) + "\n")
    except (FloatingPointError, NonFiniteGradientError) as exc:
        path = None
        if out is not None:
            path = str(out / "last_good.qsck")
            checkpoint.save(path, model_state(model, cfg))
        raise TrainingAborted(step, path) from exc
    finally:
        if metrics_fh:
            metrics_fh.close()
        if timing_fh:
            timing_fh.close()
    ck = None
    if out is not None:
        ck = str(out / "final.qsck")
        checkpoint.save(ck, model_state(model, cfg))
    return TrainResult(model, records, ck, time.perf_counter() - t_start)


# --- ablations ----------------------------------------------------------------------

ABLATION_AXES = {
    "pe": ("2d", "3d"),
    "beta": (0.1, 0.001),
    "anneal": (True, False),
    "encoder_depth": (0, 2),
    "trainable": ("partial", "all"),
}


def run_ablation(base: TrainConfig, train_set, eval_set, out_csv, axes: dict | None = None) -> list[dict]:
    """Train every combination of ``axes`` and write (axes -> final F1, final loss) rows to CSV."""
    axes = ABLATION_AXES if axes is None else axes
    bad = set(axes) - set(ABLATION_AXES)
    if bad:
        raise ConfigError(f"unknown ablation axes {sorted(bad)}")
    names = list(axes)
    rows = []
    for combo in itertools.product(*(axes[n] for n in names)):
        cfg = config_from_pairs(dict(zip(names, combo)), base)
        res = train(cfg, train_set, eval_set)
        ev = evaluate_boundaries(res.model, eval_set, fixed=cfg.fixed_partition)
        rows.append({**dict(zip(names, combo)), "final_f1": ev["f1"], "final_loss": res.records[-1]["loss"]})
    os.makedirs(os.path.dirname(os.path.abspath(out_csv)), exist_ok=True)
    with open(out_csv, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=names + ["final_f1", "final_loss"])
        w.writeheader()
        w.writerows(rows)
    return rows
