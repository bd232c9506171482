"""Encoder, recurrent core and prediction heads of the forecasting model.

Layout (G = grid side, A = (G/8)^2 anchors, H = hidden size):

    K frames (G, G) --one-hot--> 4x4/4 conv -> 8ch -> 2x2/2 conv -> 16ch
    concat K frames + speed/15 -> linear -> tanh          feature h0 (H,)
    h_t = GRU(h_{t-1}, a_t)                               t = 1..T
    seg:   linear -> (G/8, G/8, 16) -> 2x2 deconv -> 8ch -> 4x4 deconv -> 4 logits
    det:   linear -> A x [c, dx1, dy1, dx2, dy2, phi]
    scene: linear -> [offroad, offlane, collision logits, speed/15]

Convolutions use kernel == stride, so they are plain matmuls over patches.
"""

from __future__ import annotations

import math

import numpy as np

from ipcnav import autodiff as ad
from ipcnav.autodiff import Tensor
from ipcnav.predictor.types import ANCHOR_BLOCK, PredictorConfig, PredictorParams

N_CLASSES = 4
DET_FIELDS = 6
SEG_CODE = 16
ENC_CH = (8, 16)


def _uniform(rng, fan_in, fan_out, shape, dtype):
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, shape).astype(dtype)


def encoder_shapes(cfg: PredictorConfig) -> dict[str, tuple]:
    s = cfg.anchors_per_side
    flat = cfg.history_len * s * s * ENC_CH[1] + 1
    return {
        "enc1_w": (4 * 4 * N_CLASSES, ENC_CH[0]),
        "enc1_b": (ENC_CH[0],),
        "enc2_w": (2 * 2 * ENC_CH[0], ENC_CH[1]),
        "enc2_b": (ENC_CH[1],),
        "fuse_w": (flat, cfg.hidden_dim),
        "fuse_b": (cfg.hidden_dim,),
    }


def init_encoder(cfg: PredictorConfig, rng: np.random.Generator, dtype=np.float32) -> dict[str, np.ndarray]:
    out = {}
    for name, shape in encoder_shapes(cfg).items():
        if name.endswith("_b"):
            out[name] = np.zeros(shape, dtype)
        else:
            out[name] = _uniform(rng, shape[0], shape[1], shape, dtype)
    return out


def init_params(cfg: PredictorConfig, seed: int = 0, dtype=np.float32) -> PredictorParams:
    rng = np.random.default_rng(seed)
    H = cfg.hidden_dim
    s = cfg.anchors_per_side
    p = init_encoder(cfg, rng, dtype)
    for gate in ("z", "r", "n"):
        p[f"gru_w{gate}"] = _uniform(rng, H + 2, H, (H + 2, H), dtype)
        p[f"gru_b{gate}"] = np.zeros(H, dtype)
    p["seg_w"] = _uniform(rng, H, s * s * SEG_CODE, (H, s * s * SEG_CODE), dtype)
    p["seg_b"] = np.zeros(s * s * SEG_CODE, dtype)
    p["seg_up1_w"] = _uniform(rng, SEG_CODE, 8, (SEG_CODE, 2 * 2 * 8), dtype)
    p["seg_up1_b"] = np.zeros(8, dtype)
    p["seg_up2_w"] = _uniform(rng, 8, N_CLASSES, (8, 4 * 4 * N_CLASSES), dtype)
    p["seg_up2_b"] = np.zeros(N_CLASSES, dtype)
    p["det_w"] = _uniform(rng, H, DET_FIELDS, (H, s * s * DET_FIELDS), dtype) * 0.1
    det_b = np.zeros((s * s, DET_FIELDS), dtype)
    det_b[:, 0] = -math.log((1 - cfg.prior) / cfg.prior)
    p["det_b"] = det_b.reshape(-1)
    p["scene_w"] = _uniform(rng, H, 4, (H, 4), dtype)
    p["scene_b"] = np.zeros(4, dtype)
    return PredictorParams(p)


def one_hot(grids: np.ndarray, dtype) -> np.ndarray:
    return np.eye(N_CLASSES, dtype=dtype)[grids]


def encode(P: dict, grids: np.ndarray, speed: np.ndarray, cfg: PredictorConfig) -> Tensor:
    """grids (B, K, G, G) class ids, speed (B,) m/s of the latest frame -> (B, H)."""
    dtype = P["fuse_w"].value.dtype
    B, K = grids.shape[:2]
    G = cfg.grid
    x = one_hot(grids.reshape(B * K, G, G), dtype)
    h = ad.relu(ad.patch_conv(x, P["enc1_w"], P["enc1_b"], 4))
    h = ad.relu(ad.patch_conv(h, P["enc2_w"], P["enc2_b"], 2))
    h = ad.reshape(h, (B, -1))
    z = ad.concat([h, (np.asarray(speed, dtype=dtype) / 15.0).reshape(B, 1)], axis=1)
    return ad.tanh(ad.linear(z, P["fuse_w"], P["fuse_b"]))


def gru_step(P: dict, h: Tensor, a) -> Tensor:
    xa = ad.concat([h, a], axis=1)
    z = ad.sigmoid(ad.linear(xa, P["gru_wz"], P["gru_bz"]))
    r = ad.sigmoid(ad.linear(xa, P["gru_wr"], P["gru_br"]))
    n = ad.tanh(ad.linear(ad.concat([r * h, a], axis=1), P["gru_wn"], P["gru_bn"]))
    return n + z * (h - n)


def seg_features(P: dict, h: Tensor, cfg: PredictorConfig) -> Tensor:
    """(N, H) -> (N, G/4, G/4, 8), the input of the last upsampling layer."""
    s = cfg.anchors_per_side
    x = ad.relu(ad.linear(h, P["seg_w"], P["seg_b"]))
    x = ad.reshape(x, (-1, s, s, SEG_CODE))
    return ad.relu(ad.patch_deconv(x, P["seg_up1_w"], P["seg_up1_b"], 2))


def seg_head(P: dict, h: Tensor, cfg: PredictorConfig) -> Tensor:
    return ad.patch_deconv(seg_features(P, h, cfg), P["seg_up2_w"], P["seg_up2_b"], 4)


def to_blocks(grids: np.ndarray, k: int = 4) -> np.ndarray:
    """(N, G, G) -> (N*(G/k)^2, k*k), matching the last upsampling layer's layout."""
    n, g = grids.shape[0], grids.shape[1]
    m = g // k
    return grids.reshape(n, m, k, m, k).transpose(0, 1, 3, 2, 4).reshape(n * m * m, k * k)


def det_head(P: dict, h: Tensor, cfg: PredictorConfig) -> Tensor:
    return ad.reshape(ad.linear(h, P["det_w"], P["det_b"]), (-1, cfg.n_anchors, DET_FIELDS))


def scene_head(P: dict, h: Tensor) -> Tensor:
    return ad.linear(h, P["scene_w"], P["scene_b"])


def forward(P: dict, grids, speed, actions, cfg: PredictorConfig, with_seg: bool | str = True) -> dict:
    """Full batched forward pass.

    actions: (B, T, 2). Returns tensors keyed "seg" (B*T, G, G, 4) or None,
    "det" (B*T, A, 6) and "scene" (B*T, 4), time-major within each sample.
    with_seg="features" stops before the last upsampling layer (for the fused loss).
    """
    dtype = P["fuse_w"].value.dtype
    acts = np.asarray(actions, dtype=dtype)
    B, T = acts.shape[:2]
    h = encode(P, grids, speed, cfg)
    hs = []
    for t in range(T):
        h = gru_step(P, h, acts[:, t])
        hs.append(h)
    hid = ad.reshape(ad.stack(hs, axis=1), (B * T, -1))
    return {
        "seg": seg_head(P, hid, cfg) if with_seg == "logits" or with_seg is True else None,
        "seg_features": seg_features(P, hid, cfg) if with_seg == "features" else None,
        "det": det_head(P, hid, cfg),
        "scene": scene_head(P, hid),
        "hidden": hid,
    }


def wrap(arrays: dict[str, np.ndarray], requires_grad: bool = False) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in arrays.items()}


def anchor_boxes(cfg: PredictorConfig) -> np.ndarray:
    """(A, 4) anchor block rectangles as x1, y1, x2, y2 in grid units."""
    s = cfg.anchors_per_side
    r, c = np.divmod(np.arange(s * s), s)
    x1 = c * ANCHOR_BLOCK
    y1 = r * ANCHOR_BLOCK
    return np.stack([x1, y1, x1 + ANCHOR_BLOCK, y1 + ANCHOR_BLOCK], axis=1).astype(float)
