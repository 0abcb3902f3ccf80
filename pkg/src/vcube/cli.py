"""``vcube`` command line: gen, train, segment, eval, stats.

Exit codes: 0 success, 2 usage, 3 IO, 4 numeric abort, 5 partial eval.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from fractions import Fraction
from pathlib import Path

from vcube import __version__
from vcube.cubing import StreamPartitioner, cube_length_histogram, segments
from vcube.errors import ConfigError, FormatError, TrainingAborted, VCubeError
from vcube.features import (
    load_features, load_sidecar, random_script, save_features, save_sidecar, sidecar_path, synthesize,
)
from vcube.rng import Rng

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC, EXIT_PARTIAL = 0, 2, 3, 4, 5
REFERENCE = {"name": "reference", "n1": 576, "n2": 64, "fpq": 5}
SCHEMA_PATH = Path(__file__).parent / "schemas" / "eval_report.schema.json"


class UsageError(Exception):
    pass


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat()


def worker_count() -> int:
    raw = os.environ.get("QSV_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"QSV_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"QSV_THREADS must be a positive integer, got {raw!r}")
    return n


def write_manifest(path: Path, command: str, config: dict, seed: int, artifacts: dict, stamp: bool = True) -> None:
    """``stamp=False`` leaves out the start time so reruns are byte-identical."""
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "code_version": __version__,
        "artifacts": artifacts,
    }
    if stamp:
        manifest["started"] = _now()
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# --- gen ----------------------------------------------------------------------------

def cmd_gen(args) -> int:
    if args.videos < 1:
        raise UsageError("--videos must be >= 1")
    if args.sigma < 0:
        raise UsageError("--sigma must be >= 0")
    kw = dict(min_frames=args.min_frames, max_frames=args.max_frames, scenes_min=args.scenes_min,
              scenes_max=args.scenes_max, sigma=args.sigma, n_labels=args.n_labels)
    try:
        random_script(Rng(args.seed).child("probe"), **kw)
    except ValueError as e:
        raise UsageError(str(e)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    root = Rng(args.seed).child("gen")

    def make(i: int) -> str:
        r = root.child(i)
        script = random_script(r.child("script"), **kw)
        video, bounds = synthesize(script, r.child("render"))
        path = out / f"video_{i:05d}.qsvf"
        save_features(path, video)
        save_sidecar(sidecar_path(path), bounds, script.labels)
        return path.name

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        names = list(pool.map(make, range(args.videos)))
    write_manifest(out / "manifest.json", "gen", {k: v for k, v in vars(args).items() if k not in ("func", "out")},
                   args.seed, {"videos": names}, stamp=False)
    print(f"wrote {len(names)} videos to {out}")
    return EXIT_OK


# --- data loading -------------------------------------------------------------------

def load_dir(path, require_sidecar: bool = True):
    """Examples from every ``*.qsvf`` in ``path`` (sorted); returns (examples, skipped names)."""
    from vcube.trainer import Example

    d = Path(path)
    if not d.is_dir():
        raise FileNotFoundError(f"data directory not found: {d}")
    examples, skipped = [], []
    for f in sorted(d.glob("*.qsvf")):
        side = sidecar_path(f)
        if not side.exists():
            if require_sidecar:
                raise FileNotFoundError(f"missing sidecar for {f.name}")
            print(f"warning: skipping {f.name}: no sidecar {side.name}", file=sys.stderr)
            skipped.append(f.name)
            continue
        bounds, labels = load_sidecar(side)
        examples.append(Example(load_features(f), bounds, labels))
    return examples, skipped


# --- train --------------------------------------------------------------------------

def cmd_train(args) -> int:
    from vcube.trainer import TrainConfig, config_from_pairs, dump_config, load_config, train

    cfg = load_config(args.config) if args.config else TrainConfig()
    overrides = {}
    if args.fixed_partition:
        overrides["fixed_partition"] = True
    if args.no_anneal:
        overrides["anneal"] = False
    for key in ("pe", "beta", "seed", "steps"):
        if getattr(args, key) is not None:
            overrides[key] = getattr(args, key)
    cfg = config_from_pairs(overrides, cfg)
    train_set, _ = load_dir(args.data)
    if not train_set:
        raise UsageError(f"no .qsvf files in {args.data}")
    eval_set = load_dir(args.eval_data)[0] if args.eval_data else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(dump_config(cfg))
    write_manifest(out / "manifest.json", "train", cfg.to_dict(), cfg.seed, {
        "data": str(args.data), "eval_data": args.eval_data, "metrics": "metrics.jsonl",
        "timing": "timing.jsonl", "checkpoint": "final.qsck", "completion": "run_end.json",
    })
    try:
        res = train(cfg, train_set, eval_set, out_dir=out)
    except TrainingAborted as e:
        print(f"error: {e}", file=sys.stderr)
        (out / "run_end.json").write_text(json.dumps({"ended": _now(), "status": "aborted",
                                                      "step": e.step, "checkpoint": e.checkpoint}) + "\n")
        return EXIT_NUMERIC
    (out / "run_end.json").write_text(json.dumps({"ended": _now(), "status": "ok",
                                                  "checkpoint": res.checkpoint, "seconds": res.seconds}) + "\n")
    last = res.records[-1]
    msg = f"trained {cfg.steps} steps, final loss {last['loss']:.4f}"
    if "f1" in last:
        msg += f", boundary F1 {last['f1']:.3f}" + (" (fixed partition)" if cfg.fixed_partition else "")
    print(msg)
    return EXIT_OK


# --- segment ------------------------------------------------------------------------

def cmd_segment(args) -> int:
    from vcube.trainer import load_model

    model, _ = load_model(args.checkpoint)
    video = load_features(args.features)
    if args.mode == "offline":
        part = model.infer_partition(video)
    else:
        sp = StreamPartitioner(model.gate, alpha=model.cfg.cubing.alpha, threshold=args.threshold,
                               min_gap=args.min_gap)
        if model.cfg.encoder_depth:
            from vcube.features import encode

            video_in = encode(video, model.encoder)
        else:
            video_in = video
        for frame, t in zip(video_in.features, video_in.timestamps):
            sp.push(frame, t)
        part = sp.partition()
    report = {
        "source_id": video.source_id,
        "mode": args.mode,
        "n_frames": video.n_frames,
        "fps": video.fps,
        "segments": segments(part, video.timestamps, video.fps),
        "histogram": cube_length_histogram([part]),
    }
    text = json.dumps(report, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return EXIT_OK


# --- eval ---------------------------------------------------------------------------

def cmd_eval(args) -> int:
    from vcube.trainer import answer_accuracy, evaluate_boundaries, load_model

    model, _ = load_model(args.checkpoint)
    examples, skipped = load_dir(args.data, require_sidecar=False)
    if examples:
        ev = evaluate_boundaries(model, examples, fixed=args.fixed_partition, tol=args.tolerance)
        acc = answer_accuracy(model, examples, fixed=args.fixed_partition)
    else:
        ev = {"precision": 0.0, "recall": 0.0, "f1": 0.0, "mean_cube_length": None,
              "median_cube_length": None, "compression": None}
        acc = 0.0
    report = {
        "checkpoint": str(args.checkpoint),
        "data": str(args.data),
        "n_videos": len(examples),
        "n_skipped": len(skipped),
        "skipped": skipped,
        "precision": ev["precision"],
        "recall": ev["recall"],
        "f1": ev["f1"],
        "answer_accuracy": acc,
        "mean_cube_length": ev["mean_cube_length"],
        "median_cube_length": ev["median_cube_length"],
        "compression": ev["compression"],
        "fixed_partition": bool(args.fixed_partition),
        "tolerance": args.tolerance,
    }
    print(f"precision {report['precision']:.4f}  recall {report['recall']:.4f}  f1 {report['f1']:.4f}  "
          f"answer accuracy {acc:.4f}  ({len(examples)} videos, {len(skipped)} skipped)")
    if args.report:
        Path(args.report).write_text(json.dumps(report, indent=2) + "\n")
    return EXIT_PARTIAL if skipped else EXIT_OK


# --- stats --------------------------------------------------------------------------

def stats_rows(configs, frame_counts=()) -> list[dict]:
    from vcube.trainer import compression_row, fraction_str

    rows = []
    for c in configs:
        for n in [None, *frame_counts]:
            with_t = compression_row(n, c["n1"], c["n2"], c["fpq"], True)
            no_t = compression_row(n, c["n1"], c["n2"], c["fpq"], False)
            rows.append({
                "config": c["name"], "n1": c["n1"], "n2": c["n2"], "fpq": fraction_str(Fraction(c["fpq"])),
                "n_frames": "inf" if n is None else n,
                "tokens_per_frame": fraction_str(with_t["tokens_per_frame"]),
                "compression": fraction_str(with_t["compression"]),
                "tokens_per_frame_no_thumb": fraction_str(no_t["tokens_per_frame"]),
                "compression_no_thumb": fraction_str(no_t["compression"]),
            })
    return rows


def cmd_stats(args) -> int:
    from vcube.trainer import TrainConfig, load_config

    cfg = load_config(args.config) if args.config else TrainConfig()
    fpq = Fraction(str(cfg.fpq)).limit_denominator()
    desk = {"name": "config", "n1": cfg.n_tokens, "n2": cfg.n_out, "fpq": fpq}
    rows = stats_rows([desk, REFERENCE], args.frames or ())
    if args.json:
        print(json.dumps(rows, indent=2))
        return EXIT_OK
    cols = ["config", "n1", "n2", "fpq", "n_frames", "tokens_per_frame", "compression",
            "tokens_per_frame_no_thumb", "compression_no_thumb"]
    widths = {c: max(len(c), *(len(str(r[c])) for r in rows)) for c in cols}
    print("  ".join(c.ljust(widths[c]) for c in cols))
    for r in rows:
        print("  ".join(str(r[c]).ljust(widths[c]) for c in cols))
    return EXIT_OK


# --- entry --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vcube", description="Nonuniform video cubing: gen, train, segment, eval, stats.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate synthetic QSVF videos with ground-truth sidecars")
    g.add_argument("--videos", type=int, required=True)
    g.add_argument("--min-frames", type=int, default=16)
    g.add_argument("--max-frames", type=int, default=64)
    g.add_argument("--scenes-min", type=int, default=3)
    g.add_argument("--scenes-max", type=int, default=8)
    g.add_argument("--sigma", type=float, default=0.1)
    g.add_argument("--n-labels", type=int, default=8)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train end to end")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--eval-data")
    t.add_argument("--out", required=True)
    t.add_argument("--fixed-partition", action="store_true")
    t.add_argument("--no-anneal", action="store_true")
    t.add_argument("--pe", choices=("2d", "3d"))
    t.add_argument("--beta", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("segment", help="export cube segments for one feature file")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--features", required=True)
    s.add_argument("--mode", choices=("offline", "stream"), default="offline")
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--min-gap", type=int, default=2)
    s.add_argument("--out")
    s.set_defaults(func=cmd_segment)

    e = sub.add_parser("eval", help="boundary P/R/F1 and answer accuracy on labelled data")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report")
    e.add_argument("--fixed-partition", action="store_true")
    e.add_argument("--tolerance", type=int, default=1)
    e.set_defaults(func=cmd_eval)

    st = sub.add_parser("stats", help="tokens per frame and compression rate")
    st.add_argument("--config")
    st.add_argument("--frames", type=int, nargs="*")
    st.add_argument("--json", action="store_true")
    st.set_defaults(func=cmd_stats)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FormatError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except (TrainingAborted, FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except VCubeError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
