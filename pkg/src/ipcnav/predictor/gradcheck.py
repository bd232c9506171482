"""Finite-difference check of the analytic gradients on a reduced 64-bit model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ipcnav import autodiff as ad
from ipcnav.observation import InstanceBox
from ipcnav.predictor.losses import TrainBatch, assign_anchors, batch_loss
from ipcnav.predictor.network import init_params
from ipcnav.predictor.types import PredictorConfig

TINY = PredictorConfig(grid=8, hidden_dim=8, horizon=2, history_len=3, batch_size=2)
HEAD_PREFIXES = ("seg_", "det_", "scene_")


@dataclass
class GradCheckResult:
    max_rel_error: float
    n_checked: int
    per_array: dict[str, float]
    worst: str


def tiny_batch(cfg: PredictorConfig, rng: np.random.Generator, batch: int = 2) -> TrainBatch:
    """Random inputs and labels. Every label frame holds a box covering an anchor center."""
    G, K, T = cfg.grid, cfg.history_len, cfg.horizon
    pos, offs, phis, counts = [], [], [], []
    for _ in range(batch * T):
        boxes = []
        for j in range(rng.integers(1, 3)):
            x1, y1 = rng.uniform(0, 3.5, 2)
            x2, y2 = rng.uniform(4.5, G, 2)
            boxes.append(InstanceBox(x1, y1, x2, y2, j + 1, int(rng.integers(0, 2))))
        p, o, f = assign_anchors(boxes, cfg)
        pos.append(p)
        offs.append(o)
        phis.append(f)
        counts.append(len(boxes))
    A = cfg.n_anchors
    return TrainBatch(
        hist_grids=rng.integers(0, 4, (batch, K, G, G)).astype(np.uint8),
        hist_speed=rng.uniform(0, 15, batch),
        actions=rng.uniform(-1, 1, (batch, T, 2)),
        label_grids=rng.integers(0, 4, (batch, T, G, G)).astype(np.uint8),
        flags=rng.integers(0, 2, (batch, T, 3)).astype(float),
        speed=rng.uniform(0, 15, (batch, T)),
        pos=np.array(pos).reshape(batch, T, A),
        offsets=np.array(offs).reshape(batch, T, A, 4),
        phi=np.array(phis).reshape(batch, T, A),
        counts=np.array(counts).reshape(batch, T),
    )


def _loss(arrays, batch, cfg) -> float:
    with ad.no_grad():
        loss, _, _ = batch_loss(arrays, batch, cfg, requires_grad=False)
    return float(loss.value)


def gradient_check(
    cfg: PredictorConfig = TINY, seed: int = 0, n_params: int = 240, h: float = 1e-5, floor: float = 1e-5
) -> GradCheckResult:
    """Max relative error |a - n| / max(|a|, |n|, floor) over sampled parameters.

    Parameters are drawn from every array (so every head is covered) and the
    weights are jittered away from their initial values to avoid trivially
    zero gradients.
    """
    rng = np.random.default_rng(seed)
    params = init_params(cfg, seed, dtype=np.float64)
    arrays = {k: v + rng.normal(0, 0.3, v.shape) for k, v in params.arrays.items()}
    batch = tiny_batch(cfg, rng)

    loss, P, _ = batch_loss(arrays, batch, cfg)
    ad.backward(loss)
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.value)) for k, t in P.items()}

    names = sorted(arrays)
    per_name = max(1, -(-n_params // len(names)))
    worst, worst_name, total = 0.0, "", 0
    per_array = {}
    for name in names:
        arr = arrays[name]
        idx = rng.choice(arr.size, size=min(per_name, arr.size), replace=False)
        errs = []
        for i in idx:
            flat = arr.reshape(-1)
            old = flat[i]
            flat[i] = old + h
            lp = _loss(arrays, batch, cfg)
            flat[i] = old - h
            lm = _loss(arrays, batch, cfg)
            flat[i] = old
            num = (lp - lm) / (2 * h)
            ana = grads[name].reshape(-1)[i]
            errs.append(abs(ana - num) / max(abs(ana), abs(num), floor))
        total += len(idx)
        per_array[name] = float(max(errs))
        if per_array[name] > worst:
            worst, worst_name = per_array[name], name
    return GradCheckResult(worst, total, per_array, worst_name)
