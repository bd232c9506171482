"""Guidance network over a 5x5 grid of (steer, throttle) bins.

It proposes where to sample candidate actions and learns by imitating the
actions of good (or expert) episodes.
"""

from __future__ import annotations

import numpy as np

from ipcnav import autodiff as ad
from ipcnav.predictor.model import adam_update, history_arrays
from ipcnav.predictor.network import encode, init_encoder, wrap
from ipcnav.predictor.types import NonFiniteLossError, PredictorConfig, PredictorParams

BINS_PER_AXIS = 5
N_BINS = BINS_PER_AXIS**2
EDGES = np.linspace(-1.0, 1.0, BINS_PER_AXIS + 1)
BIN_WIDTH = 2.0 / BINS_PER_AXIS


def axis_bin(x):
    """Bin along one axis; interior boundaries belong to the lower bin."""
    return np.clip(np.searchsorted(EDGES, x, side="left") - 1, 0, BINS_PER_AXIS - 1)


def action_to_bin(steer, throttle):
    return axis_bin(steer) * BINS_PER_AXIS + axis_bin(throttle)


def bin_rect(i):
    """(steer_lo, steer_hi, throttle_lo, throttle_hi) of bin i."""
    s, t = np.divmod(np.asarray(i), BINS_PER_AXIS)
    return EDGES[s], EDGES[s + 1], EDGES[t], EDGES[t + 1]


def bin_center(i):
    s, t = np.divmod(np.asarray(i), BINS_PER_AXIS)
    return -1.0 + BIN_WIDTH * (s + 0.5), -1.0 + BIN_WIDTH * (t + 0.5)


def init_guidance(cfg: PredictorConfig, seed: int = 0, dtype=np.float32) -> PredictorParams:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 25]))
    arrays = init_encoder(cfg, rng, dtype)
    # zero output layer: the untrained proposal is exactly uniform
    arrays["out_w"] = np.zeros((cfg.hidden_dim, N_BINS), dtype)
    arrays["out_b"] = np.zeros(N_BINS, dtype)
    return PredictorParams(arrays)


def _logits(P: dict, grids, speed, cfg: PredictorConfig):
    return ad.linear(encode(P, grids, speed, cfg), P["out_w"], P["out_b"])


def softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, float)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def bin_distribution(history, params: PredictorParams, cfg: PredictorConfig) -> np.ndarray:
    grids, speed = history_arrays(history, cfg)
    with ad.no_grad():
        z = _logits(wrap(params.arrays), grids, speed, cfg).value[0]
    return softmax(z)


def sample_sequences(probs: np.ndarray | None, n0: int, horizon: int, eps: float, rng) -> tuple[np.ndarray, np.ndarray]:
    """Draw n0 action sequences of length `horizon`.

    Each action independently picks a uniform bin with probability eps and a
    bin from `probs` otherwise, then a uniform point inside that bin. `probs`
    of None means uniform. Returns (actions (n0, T, 2), bins (n0, T)).
    """
    if not 0.0 <= eps <= 1.0:
        raise ValueError("eps must lie in [0, 1]")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    shape = (n0, horizon)
    p = np.full(N_BINS, 1.0 / N_BINS) if probs is None else np.asarray(probs, float)
    explore = rng.random(shape) < eps
    uniform_bins = rng.integers(0, N_BINS, shape)
    guided = rng.choice(N_BINS, size=shape, p=p / p.sum())
    bins = np.where(explore, uniform_bins, guided)
    s_lo, s_hi, t_lo, t_hi = bin_rect(bins)
    u = rng.random(shape + (2,))
    actions = np.stack([s_lo + u[..., 0] * (s_hi - s_lo), t_lo + u[..., 1] * (t_hi - t_lo)], axis=-1)
    return actions, bins


def padded_history(steps, t: int, k: int):
    """Observations t-k+1..t of an episode, repeating the first frame before the start."""
    return [steps[max(0, j)].obs for j in range(t - k + 1, t + 1)]


def imitation_batch(episodes, batch: int, cfg: PredictorConfig, rng):
    lens = np.array([len(e) for e in episodes])
    cum = np.cumsum(lens)
    draws = rng.integers(0, int(cum[-1]), size=batch)
    idx = np.searchsorted(cum, draws, side="right")
    ts = draws - (cum[idx] - lens[idx])
    grids, speeds, targets = [], [], []
    for e, t in zip(idx, ts):
        steps = episodes[e].steps
        hist = padded_history(steps, int(t), cfg.history_len)
        grids.append(np.stack([o.grid for o in hist]))
        speeds.append(hist[-1].ego_speed)
        targets.append(int(action_to_bin(*steps[t].action)))
    return np.stack(grids), np.array(speeds), np.array(targets)


def guidance_step(params: PredictorParams, grids, speeds, targets, cfg: PredictorConfig, lr: float | None = None):
    P = wrap(params.arrays, requires_grad=True)
    loss = ad.softmax_cross_entropy(_logits(P, grids, speeds, cfg), targets, 1.0 / len(targets))
    ad.backward(loss)
    val = float(loss.value)
    if not np.isfinite(val):
        raise NonFiniteLossError(f"non-finite guidance loss {val}")
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.value)) for k, t in P.items()}
    arrays, m, v, step = adam_update(
        params.arrays, grads, params.adam_m, params.adam_v, params.step, cfg.lr if lr is None else lr, cfg
    )
    return PredictorParams(arrays, m, v, step), val


def train_guidance(params: PredictorParams, episodes, steps: int, seed, cfg: PredictorConfig, batch: int = 16):
    """Cross-entropy imitation of the recorded actions' bins. Returns (params, last loss)."""
    episodes = [e for e in episodes if len(e)]
    if not episodes:
        raise ValueError("no episodes to imitate")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    loss = float("nan")
    for _ in range(steps):
        grids, speeds, targets = imitation_batch(episodes, batch, cfg, rng)
        params, loss = guidance_step(params, grids, speeds, targets, cfg)
    return params, loss
