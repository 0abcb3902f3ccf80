"""Hand-built gates and fixtures shared by several test modules."""

import numpy as np

from vcube import checkpoint
from vcube.cubing import GateMLP
from vcube.rng import Rng


def change_detector(dim: int, bias: float = 16.0) -> GateMLP:
    """Gate whose component-0 logit is about the L1 norm of the normalized momentum.

    ``gelu(x) + gelu(-x)`` is close to ``|x|`` once ``|x|`` is past 2 or so.
    """
    g = GateMLP(dim, 2 * dim, Rng(0))
    set_change_detector(g, bias)
    return g


def set_change_detector(g: GateMLP, bias: float = 16.0) -> None:
    d = g.dim
    if g.hidden != 2 * d:
        raise ValueError("detector needs hidden = 2 * dim")
    p = g._params
    p["w1"].data = np.concatenate([np.eye(d), -np.eye(d)], axis=1)
    p["b1"].data = np.zeros(2 * d)
    p["w2"].data = np.zeros((2 * d, 2))
    p["w2"].data[:, 0] = 1.0
    p["b2"].data = np.array([0.0, bias])


def perfect_checkpoint(path, fpq: float = 5) -> None:
    """Checkpoint that is exact on noise-free videos with one scene per cube.

    ``alpha = 1`` makes the momentum a plain frame difference, which is zero
    inside a noise-free scene.
    """
    from vcube.model import QuickModel
    from vcube.trainer import TrainConfig, model_state

    cfg = TrainConfig(alpha=1.0, fpq=fpq, steps=1)
    model = QuickModel(cfg.model_config(), seed=0)
    set_change_detector(model.gate)
    checkpoint.save(path, model_state(model, cfg))


def two_scene_stream(seed: int, change: int, n_frames: int, gap: float = 10.0, n_tokens: int = 16, dim: int = 32):
    """Noise-free stream: prototype ``a`` then ``b``, with RMS(b - a) = ``gap``."""
    rng = np.random.default_rng(seed)
    a = rng.uniform(-1, 1, size=(n_tokens, dim))
    d = rng.uniform(-1, 1, size=(n_tokens, dim)) - a
    b = a + gap * d / np.sqrt((d ** 2).mean())
    return np.concatenate([np.repeat(a[None], change, 0), np.repeat(b[None], n_frames - change, 0)])
