import csv
import itertools
import json
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vcube import checkpoint
from vcube.autodiff import Value
from vcube.errors import ConfigError, NonFiniteGradientError, TrainingAborted
from vcube.model import QuickModel
from vcube.trainer import (
    AdamW, TrainConfig, batch_indices, boundary_prf, clip_grad_norm, compression_row, compression_stats,
    config_from_pairs, dump_config, evaluate_boundaries, fraction_str, load_model, lr_schedule, match_boundaries,
    parse_config_text, run_ablation, synthetic_dataset, train,
)

TINY = dict(dim=8, n_tokens=4, grid_rows=2, grid_cols=2, n_out=2, gate_hidden=8, lm_layers=1, n_labels=4,
            batch_size=2, eval_every=5)
TINY_DATA = dict(grid=(2, 2), dim=8, n_labels=4, min_frames=8, max_frames=16, scenes_min=2, scenes_max=3)


def tiny(**kw):
    return TrainConfig(**{**TINY, **kw})


@pytest.fixture(scope="module")
def tiny_sets():
    return synthetic_dataset(4, 0, "train", **TINY_DATA), synthetic_dataset(3, 0, "eval", **TINY_DATA)


# --- config -------------------------------------------------------------------------

def test_config_text_roundtrip():
    cfg = tiny(seed=7, anneal=False, pe="2d", beta=0.1)
    assert parse_config_text(dump_config(cfg)) == cfg


def test_config_comments_and_types():
    cfg = parse_config_text("# header\nsteps = 12  # short\n\nanneal = off\nlr=0.5\n")
    assert (cfg.steps, cfg.anneal, cfg.lr) == (12, False, 0.5)


@pytest.mark.parametrize("text", [
    "stepz = 3\n",
    "steps = 3\nsteps = 4\n",
    "steps 3\n",
    "steps = three\n",
    "anneal = maybe\n",
    "warmup_frac = 1.0\n",
    "lr = 0\n",
    "pe = 4d\n",
    "trainable = lm,vision\n",
    "heads = 3\n",
])
def test_config_rejects(text):
    with pytest.raises(ConfigError):
        parse_config_text(text)


def test_trainable_groups():
    assert tiny(trainable="partial").trainable_groups() == ("cubing", "resampler", "encoder")
    assert tiny(trainable="lm, cubing").trainable_groups() == ("lm", "cubing")


def test_no_anneal_holds_eta():
    cc = tiny(anneal=False).cubing_config()
    assert cc.eta_final == cc.eta0


# --- schedules ----------------------------------------------------------------------

def test_lr_endpoints():
    cfg = TrainConfig(steps=2000, warmup_frac=0.05, lr=3e-3)
    assert lr_schedule(0, cfg) == 0.0
    assert lr_schedule(100, cfg) == 3e-3
    assert abs(lr_schedule(2000, cfg)) < 1e-12
    with pytest.raises(ValueError):
        lr_schedule(-1, cfg)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 400), st.floats(0.0, 0.9), st.floats(1e-5, 1.0))
def test_lr_unimodal(steps, warm, peak):
    cfg = TrainConfig(steps=steps, warmup_frac=warm, lr=peak)
    lrs = np.array([lr_schedule(s, cfg) for s in range(steps + 1)])
    top = int(np.argmax(lrs))
    assert np.all(np.diff(lrs[:top + 1]) >= 0)
    assert np.all(np.diff(lrs[top:]) <= 1e-15)
    assert lrs.max() <= peak * (1 + 1e-12)
    assert abs(lrs[-1]) < 1e-12


def test_cosine_midpoint():
    cfg = TrainConfig(steps=100, warmup_frac=0.0, lr=2.0)
    assert lr_schedule(50, cfg) == pytest.approx(1.0, abs=1e-12)


# --- optimizer ----------------------------------------------------------------------

def test_adamw_zero_grad_no_decay_is_identity():
    p = Value(np.arange(6.0).reshape(2, 3), requires_grad=True)
    p.grad = np.zeros((2, 3))
    AdamW([("p", p)], lr=0.1).step()
    assert np.array_equal(p.data, np.arange(6.0).reshape(2, 3))


def test_adamw_descends_quadratic():
    x = Value(np.array([1.0]), requires_grad=True)
    opt = AdamW([("x", x)], lr=1e-3)
    x.grad = 2 * x.data
    opt.step()
    assert x.data[0] < 1.0


def test_adamw_matches_reference_loop():
    rng = np.random.default_rng(0)
    w0, b0 = rng.normal(size=(3, 2)), rng.normal(size=2)
    w, b = Value(w0.copy(), requires_grad=True), Value(b0.copy(), requires_grad=True)
    opt = AdamW([("w", w), ("b", b)], lr=0.01, weight_decay=0.1)
    ref = {"w": w0.copy(), "b": b0.copy()}
    m = {k: 0.0 for k in ref}
    v = {k: 0.0 for k in ref}
    for t in range(1, 6):
        grads = {"w": rng.normal(size=(3, 2)), "b": rng.normal(size=2)}
        w.grad, b.grad = grads["w"], grads["b"]
        opt.step()
        for k in ref:
            g = grads[k]
            m[k] = 0.9 * m[k] + 0.1 * g
            v[k] = 0.999 * v[k] + 0.001 * g * g
            mh, vh = m[k] / (1 - 0.9 ** t), v[k] / (1 - 0.999 ** t)
            decay = 0.1 * ref[k] if k == "w" else 0.0
            ref[k] = ref[k] - 0.01 * (mh / (np.sqrt(vh) + 1e-8) + decay)
    np.testing.assert_allclose(w.data, ref["w"], rtol=1e-13)
    np.testing.assert_allclose(b.data, ref["b"], rtol=1e-13)


def test_adamw_first_step_is_signed_lr():
    p = Value(np.array([0.0, 0.0, 0.0]), requires_grad=True)
    p.grad = np.array([3.0, -0.5, 1e-3])
    AdamW([("p", p)], lr=0.1, eps=0.0).step()
    np.testing.assert_allclose(p.data, [-0.1, 0.1, -0.1], rtol=1e-12)


def test_adamw_rejects_non_finite_gradient():
    good, bad = Value(np.ones(2), requires_grad=True), Value(np.ones(2), requires_grad=True)
    good.grad, bad.grad = np.ones(2), np.array([1.0, np.nan])
    with pytest.raises(NonFiniteGradientError) as ei:
        AdamW([("good", good), ("gate.w", bad)]).step()
    assert ei.value.name == "gate.w"
    assert np.array_equal(good.data, np.ones(2))


def test_clip_grad_norm():
    a, b = Value(np.zeros(2), requires_grad=True), Value(np.zeros(1), requires_grad=True)
    a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
    assert clip_grad_norm([a, b], 1.0) == 5.0
    assert math.isclose(math.hypot(*a.grad, *b.grad), 1.0)
    assert clip_grad_norm([a, b], 10.0) == pytest.approx(1.0)


# --- boundary metrics ---------------------------------------------------------------

def brute_force_matches(pred, truth, tol):
    pred, truth = sorted(set(pred)), sorted(set(truth))
    best = 0
    for k in range(min(len(pred), len(truth)), 0, -1):
        for ps in itertools.combinations(pred, k):
            for ts in itertools.permutations(truth, k):
                if all(abs(p - t) <= tol for p, t in zip(ps, ts)):
                    return k
    return best


def test_perfect_prediction():
    r = boundary_prf([[0, 4, 9]], [[0, 4, 9]])
    assert r["f1"] == 1.0


def test_single_keyframe_recall():
    r = boundary_prf([[0]], [[0, 5, 10, 15]])
    assert r["recall"] == 0.25 and r["precision"] == 1.0


def test_each_truth_matched_once():
    assert match_boundaries([4, 5, 6], [5]) == 1
    assert match_boundaries([5], [4, 6]) == 1


def test_matcher_beats_closest_first():
    # closest-first would take (2, 2) and strand truth 1
    assert match_boundaries([2, 3], [1, 2]) == 2


@settings(max_examples=200, deadline=None)
@given(st.sets(st.integers(0, 20), max_size=6), st.sets(st.integers(0, 20), max_size=6), st.integers(0, 2))
def test_matcher_is_maximum(pred, truth, tol):
    assert match_boundaries(pred, truth, tol) == brute_force_matches(pred, truth, tol)


@settings(max_examples=100, deadline=None)
@given(st.sets(st.integers(0, 40), max_size=8), st.sets(st.integers(0, 40), max_size=8), st.integers(-50, 50))
def test_matcher_translation_symmetric(pred, truth, shift):
    assert match_boundaries(pred, truth) == match_boundaries({p + shift for p in pred}, {t + shift for t in truth})


def test_empty_prediction_sets():
    r = boundary_prf([[]], [[0, 3]])
    assert r["precision"] == 0.0 and r["f1"] == 0.0


# --- compression --------------------------------------------------------------------

def test_reference_compression_asymptote():
    row = compression_row(None, 576, 64, 5)
    assert row["tokens_per_frame"] == Fraction(64, 5) and float(row["tokens_per_frame"]) == 12.8
    assert row["compression"] == 45


def test_reference_compression_no_thumbnail_exact_on_multiples():
    row = compression_row(500, 576, 64, 5, thumbnail=False)
    assert row["tokens_per_frame"] == Fraction(64, 5) and row["compression"] == 45


def test_five_frames_with_thumbnail():
    assert compression_row(5, 576, 64, 5)["tokens_per_frame"] == Fraction(128, 5)
    assert float(compression_row(5, 576, 64, 5)["tokens_per_frame"]) == 25.6


def test_desk_compression():
    row = compression_row(None, 16, 8, 5)
    assert row["tokens_per_frame"] == Fraction(8, 5) and row["compression"] == 10


def test_identity_budget():
    assert compression_row(37, 16, 16, 1, thumbnail=False)["compression"] == 1


def test_compression_stats_mean():
    s = compression_stats([5, 10], 576, 64, 5)
    # 5 frames: 2 blocks -> 576*5/128 = 22.5; 10 frames: 3 blocks -> 576*10/192 = 30
    assert s["mean_compression"] == Fraction(105, 4)
    assert s["mean_compression_no_thumb"] == 45
    assert fraction_str(s["asymptotic_compression"]) == "45"
    assert fraction_str(Fraction(64, 5)) == "12.8"


# --- data ---------------------------------------------------------------------------

def test_dataset_deterministic_and_split_independent():
    a = synthetic_dataset(3, 1, "train", **TINY_DATA)
    b = synthetic_dataset(3, 1, "train", **TINY_DATA)
    c = synthetic_dataset(3, 1, "eval", **TINY_DATA)
    for x, y in zip(a, b):
        assert np.array_equal(x.video.features, y.video.features) and x.labels == y.labels
    assert not np.array_equal(a[0].video.features[:1], c[0].video.features[:1])


def test_dataset_prefix_stable():
    short = synthetic_dataset(2, 3, **TINY_DATA)
    long = synthetic_dataset(4, 3, **TINY_DATA)
    assert all(np.array_equal(s.video.features, l.video.features) for s, l in zip(short, long))


def test_default_dataset_ranges():
    for e in synthetic_dataset(20, 0):
        assert 16 <= e.video.n_frames <= 64
        assert 3 <= len(e.boundaries) <= 8
        assert e.boundaries[0] == 0
        assert all(a != b for a, b in zip(e.labels, e.labels[1:]))


def test_batches_cover_each_epoch():
    cache = {}
    seen = [i for s in range(5) for i in batch_indices(10, s, 2, 0, cache)]
    assert sorted(seen) == list(range(10))
    assert batch_indices(10, 7, 3, 0) == batch_indices(10, 7, 3, 0, {})


# --- training -----------------------------------------------------------------------

def test_smoke_ten_steps(tiny_sets, tmp_path):
    tr, ev = tiny_sets
    res = train(tiny(steps=10), tr, ev, out_dir=tmp_path)
    lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
    assert len(res.records) == len(lines) == 10
    recs = [json.loads(x) for x in lines]
    assert [r["step"] for r in recs] == list(range(10))
    assert all(np.isfinite(r["loss"]) for r in recs)
    assert {"precision", "recall", "f1", "mean_cube_length", "compression"} <= set(recs[4]) & set(recs[9])
    assert "f1" not in recs[3]
    etas = [r["eta"] for r in recs]
    assert all(a >= b for a, b in zip(etas, etas[1:]))
    assert (tmp_path / "final.qsck").exists()


def test_bit_identical_metrics(tiny_sets, tmp_path):
    tr, ev = tiny_sets
    train(tiny(steps=6, seed=3), tr, ev, out_dir=tmp_path / "a")
    train(tiny(steps=6, seed=3), tr, ev, out_dir=tmp_path / "b")
    assert (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "metrics.jsonl").read_bytes()
    assert (tmp_path / "a" / "final.qsck").read_bytes() == (tmp_path / "b" / "final.qsck").read_bytes()


def test_seed_changes_run(tiny_sets):
    tr, _ = tiny_sets
    a = train(tiny(steps=3, seed=0), tr).records
    b = train(tiny(steps=3, seed=1), tr).records
    assert a != b


def test_partial_trainable_freezes_lm(tiny_sets):
    tr, _ = tiny_sets
    cfg = tiny(steps=3, trainable="partial")
    init = QuickModel(cfg.model_config(), seed=cfg.seed)
    res = train(cfg, tr)
    for (name, p0), (_, p1) in zip(init.named_parameters(), res.model.named_parameters()):
        same = np.array_equal(p0.data, p1.data)
        assert same == name.startswith("lm."), name


def test_checkpoint_reload_predicts_same(tiny_sets, tmp_path):
    tr, ev = tiny_sets
    res = train(tiny(steps=4), tr, out_dir=tmp_path)
    model, cfg = load_model(res.checkpoint)
    assert cfg == tiny(steps=4)
    a = evaluate_boundaries(res.model, ev)
    b = evaluate_boundaries(model, ev)
    assert a == b


def test_fixed_partition_run_reports_uniform_f1(tiny_sets):
    tr, ev = tiny_sets
    res = train(tiny(steps=2, fixed_partition=True, eval_every=2), tr, ev)
    assert res.records[-1]["f1"] == evaluate_boundaries(res.model, ev, fixed=True)["f1"]


def test_nan_loss_aborts_with_last_good(tiny_sets, tmp_path, monkeypatch):
    tr, _ = tiny_sets
    real = QuickModel.forward
    calls = {"n": 0}

    def flaky(self, *a, **kw):
        calls["n"] += 1
        out = real(self, *a, **kw)
        if calls["n"] > 6:              # step 3 with batch 2
            out.loss.data = np.array(np.nan)
        return out

    monkeypatch.setattr(QuickModel, "forward", flaky)
    with pytest.raises(TrainingAborted) as ei:
        train(tiny(steps=10), tr, out_dir=tmp_path)
    assert ei.value.step == 3
    state = checkpoint.load(ei.value.checkpoint)
    assert all(np.all(np.isfinite(v)) for v in state.values())
    assert not (tmp_path / "final.qsck").exists()
    assert len((tmp_path / "metrics.jsonl").read_text().splitlines()) == 3


def test_empty_training_set():
    with pytest.raises(ValueError):
        train(tiny(steps=1), [])


def test_ablation_csv(tiny_sets, tmp_path):
    tr, ev = tiny_sets
    rows = run_ablation(tiny(steps=2), tr, ev, tmp_path / "abl.csv", axes={"pe": ("2d", "3d"), "beta": (0.1, 0.001)})
    assert len(rows) == 4
    with open(tmp_path / "abl.csv") as fh:
        got = list(csv.DictReader(fh))
    assert [(r["pe"], r["beta"]) for r in got] == [("2d", "0.1"), ("2d", "0.001"), ("3d", "0.1"), ("3d", "0.001")]
    assert all(0.0 <= float(r["final_f1"]) <= 1.0 for r in got)
    with pytest.raises(ConfigError):
        run_ablation(tiny(steps=1), tr, ev, tmp_path / "x.csv", axes={"lr": (1, 2)})


def test_ablation_axes_cover_all_toggles():
    from vcube.trainer import ABLATION_AXES

    assert ABLATION_AXES == {
        "pe": ("2d", "3d"), "beta": (0.1, 0.001), "anneal": (True, False),
        "encoder_depth": (0, 2), "trainable": ("partial", "all"),
    }
    for axis, values in ABLATION_AXES.items():
        for v in values:
            config_from_pairs({axis: v})
