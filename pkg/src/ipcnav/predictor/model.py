"""Inference (encode, rollout, decode) and Adam training for the forecasting model."""

from __future__ import annotations

import numpy as np

from ipcnav import autodiff as ad
from ipcnav.autodiff import _sigmoid
from ipcnav.predictor.losses import TrainBatch, batch_loss
from ipcnav.predictor.network import anchor_boxes, encode, forward, gru_step, wrap, det_head, scene_head, seg_head
from ipcnav.predictor.types import (
    ANCHOR_BLOCK,
    InstancePrediction,
    NonFiniteLossError,
    PredictorConfig,
    PredictorParams,
    ScenePrediction,
    StatePrediction,
)

MIN_BOX = 1e-3


def history_arrays(observations, cfg: PredictorConfig):
    if len(observations) != cfg.history_len:
        raise ValueError(f"expected {cfg.history_len} history frames, got {len(observations)}")
    grids = np.stack([o.grid for o in observations])[None]
    return grids, np.array([observations[-1].ego_speed], float)


def encode_history(observations, params: PredictorParams, cfg: PredictorConfig) -> np.ndarray:
    """K observations, oldest first -> feature vector (hidden_dim,)."""
    grids, speed = history_arrays(observations, cfg)
    with ad.no_grad():
        return encode(wrap(params.arrays), grids, speed, cfg).value[0]


def rollout_raw(params: PredictorParams, feature: np.ndarray, actions: np.ndarray, cfg: PredictorConfig, with_seg=False):
    """Batched rollout from one feature under N action sequences (N, T, 2).

    Returns raw head arrays: "scene" (N, T, 4), "det" (N, T, A, 6) and
    optionally "seg" (N, T, G, G, 4).
    """
    acts = np.asarray(actions, dtype=params.arrays["fuse_w"].dtype)
    if acts.ndim == 2:
        acts = acts[None]
    N, T = acts.shape[:2]
    P = wrap(params.arrays)
    with ad.no_grad():
        h = ad.Tensor(np.broadcast_to(np.asarray(feature, acts.dtype), (N, feature.shape[-1])).copy())
        hs = []
        for t in range(T):
            h = gru_step(P, h, acts[:, t])
            hs.append(h.value)
        hid = ad.Tensor(np.stack(hs, axis=1).reshape(N * T, -1))
        out = {
            "scene": scene_head(P, hid).value.reshape(N, T, 4),
            "det": det_head(P, hid, cfg).value.reshape(N, T, cfg.n_anchors, -1),
        }
        if with_seg:
            out["seg"] = seg_head(P, hid, cfg).value.reshape(N, T, cfg.grid, cfg.grid, -1)
    return out


def decode_scene(scene_raw: np.ndarray) -> ScenePrediction:
    p = _sigmoid(np.asarray(scene_raw[:3], float))
    return ScenePrediction(float(p[0]), float(p[1]), float(p[2]), float(np.clip(15.0 * scene_raw[3], 0.0, 15.0)))


def decode_boxes(det_raw: np.ndarray, cfg: PredictorConfig) -> np.ndarray:
    """(..., A, 6) raw -> (..., A, 4) boxes with x1 < x2 and y1 < y2."""
    anchors = anchor_boxes(cfg)
    b = anchors + ANCHOR_BLOCK * np.asarray(det_raw[..., 1:5], float)
    x1 = np.minimum(b[..., 0], b[..., 2])
    x2 = np.maximum(np.maximum(b[..., 0], b[..., 2]), x1 + MIN_BOX)
    y1 = np.minimum(b[..., 1], b[..., 3])
    y2 = np.maximum(np.maximum(b[..., 1], b[..., 3]), y1 + MIN_BOX)
    return np.stack([x1, y1, x2, y2], axis=-1)


def decode_detections(det_raw: np.ndarray, cfg: PredictorConfig) -> list[InstancePrediction]:
    """Threshold at c_thr, sort by confidence (ties by anchor index), keep at most d_max."""
    det_raw = np.asarray(det_raw, float)
    c = _sigmoid(det_raw[:, 0])
    phi = _sigmoid(det_raw[:, 5])
    keep = np.flatnonzero(c >= cfg.c_thr)
    keep = keep[np.argsort(-c[keep], kind="stable")][: cfg.d_max]
    boxes = decode_boxes(det_raw, cfg)
    return [
        InstancePrediction(float(c[i]), *map(float, boxes[i]), float(phi[i]), int(i))
        for i in keep
    ]


def rollout(feature: np.ndarray, actions, params: PredictorParams, cfg: PredictorConfig, decode_seg=True):
    """One action sequence (T, 2) -> T decoded state predictions."""
    raw = rollout_raw(params, feature, np.asarray(actions, float)[None], cfg, with_seg=decode_seg)
    T = raw["scene"].shape[1]
    return [
        StatePrediction(
            raw["seg"][0, t] if decode_seg else None,
            decode_scene(raw["scene"][0, t]),
            decode_detections(raw["det"][0, t], cfg),
        )
        for t in range(T)
    ]


# --- training --------------------------------------------------------------


def adam_update(arrays, grads, m, v, step, lr, cfg: PredictorConfig):
    """Returns new (arrays, m, v, step). Inputs are not modified."""
    t = step + 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_a, new_m, new_v = {}, {}, {}
    for k, p in arrays.items():
        g = grads[k]
        mk = m.get(k, np.zeros_like(p))
        vk = v.get(k, np.zeros_like(p))
        mk = (b1 * mk + (1 - b1) * g).astype(p.dtype)
        vk = (b2 * vk + (1 - b2) * g * g).astype(p.dtype)
        upd = (lr / c1) * mk / (np.sqrt(vk / c2) + cfg.adam_eps)
        new_a[k] = (p - upd.astype(p.dtype)) if lr != 0 else p.copy()
        new_m[k], new_v[k] = mk, vk
    return new_a, new_m, new_v, t


def compute_gradients(arrays: dict, batch: TrainBatch, cfg: PredictorConfig):
    loss, P, parts = batch_loss(arrays, batch, cfg)
    ad.backward(loss)
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.value)) for k, t in P.items()}
    return float(loss.value), grads, parts


def train_step(params: PredictorParams, batch: TrainBatch, cfg: PredictorConfig, lr: float | None = None):
    """One Adam step on the batch-mean loss. Returns (new params, loss, breakdown).

    Raises NonFiniteLossError (leaving `params` untouched) if the loss or any
    gradient is not finite.
    """
    lr = cfg.lr if lr is None else lr
    loss, grads, parts = compute_gradients(params.arrays, batch, cfg)
    if not np.isfinite(loss):
        raise NonFiniteLossError(f"non-finite loss {loss} (terms: {parts})")
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise NonFiniteLossError(f"non-finite gradients in {bad} (loss {loss})")
    arrays, m, v, step = adam_update(params.arrays, grads, params.adam_m, params.adam_v, params.step, lr, cfg)
    if not all(np.all(np.isfinite(a)) for a in arrays.values()):
        raise NonFiniteLossError("update produced non-finite parameters")
    return PredictorParams(arrays, m, v, step), loss, parts


def evaluate_loss(params: PredictorParams, batch: TrainBatch, cfg: PredictorConfig):
    with ad.no_grad():
        loss, _, parts = batch_loss(params.arrays, batch, cfg, requires_grad=False)
    return float(loss.value), parts


def predict_batch(params: PredictorParams, batch: TrainBatch, cfg: PredictorConfig, with_seg=True) -> dict:
    """Raw head outputs for a batch, reshaped to (B, T, ...)."""
    B, T = batch.actions.shape[:2]
    with ad.no_grad():
        out = forward(wrap(params.arrays), batch.hist_grids, batch.hist_speed, batch.actions, cfg, with_seg=with_seg)
    res = {
        "scene": out["scene"].value.reshape(B, T, 4),
        "det": out["det"].value.reshape(B, T, cfg.n_anchors, -1),
    }
    if with_seg:
        res["seg"] = out["seg"].value.reshape(B, T, cfg.grid, cfg.grid, -1)
    return res
