"""Training targets and the multi-event prediction loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ipcnav import autodiff as ad
from ipcnav.autodiff import PROB_CLAMP
from ipcnav.predictor.network import anchor_boxes, forward, to_blocks, wrap
from ipcnav.predictor.types import ANCHOR_BLOCK, PredictorConfig


def focal_loss(p: float, target: int, gamma: float = 2.0, alpha: float = 0.25) -> float:
    p = min(max(float(p), PROB_CLAMP), 1.0 - PROB_CLAMP)
    if target:
        return float(-alpha * (1.0 - p) ** gamma * np.log(p))
    return float(-(1.0 - alpha) * p**gamma * np.log(1.0 - p))


def horizon_weights(counts) -> np.ndarray:
    """w_t = 2 at t = 1 or when the instance count rises from t-1 to t, else 1."""
    counts = np.asarray(counts)
    w = np.ones(counts.shape, dtype=float)
    w[..., 0] = 2.0
    w[..., 1:][counts[..., 1:] > counts[..., :-1]] = 2.0
    return w


def assign_anchors(boxes, cfg: PredictorConfig):
    """Positive mask, offset targets and phi targets for one frame.

    An anchor is positive when its block center lies inside a box; with several
    candidates the smallest box wins. Offsets are normalized by the block size.
    """
    anchors = anchor_boxes(cfg)
    A = len(anchors)
    pos = np.zeros(A, dtype=bool)
    offsets = np.zeros((A, 4))
    phi = np.zeros(A)
    if not boxes:
        return pos, offsets, phi
    cx = 0.5 * (anchors[:, 0] + anchors[:, 2])
    cy = 0.5 * (anchors[:, 1] + anchors[:, 3])
    best_area = np.full(A, np.inf)
    for b in boxes:
        inside = (cx >= b.x1) & (cx < b.x2) & (cy >= b.y1) & (cy < b.y2)
        area = (b.x2 - b.x1) * (b.y2 - b.y1)
        take = inside & (area < best_area)
        if not take.any():
            continue
        best_area[take] = area
        pos[take] = True
        offsets[take] = (np.array([b.x1, b.y1, b.x2, b.y2])[None] - anchors[take]) / ANCHOR_BLOCK
        phi[take] = b.collision
    return pos, offsets, phi


@dataclass
class TrainBatch:
    hist_grids: np.ndarray  # (B, K, G, G) uint8
    hist_speed: np.ndarray  # (B,) speed of the latest history frame
    actions: np.ndarray  # (B, T, 2)
    label_grids: np.ndarray  # (B, T, G, G)
    flags: np.ndarray  # (B, T, 3) offroad, offlane, collision
    speed: np.ndarray  # (B, T) m/s
    pos: np.ndarray  # (B, T, A) bool
    offsets: np.ndarray  # (B, T, A, 4)
    phi: np.ndarray  # (B, T, A)
    counts: np.ndarray  # (B, T) ground-truth instance counts

    @property
    def size(self) -> int:
        return self.actions.shape[0]


def label_arrays(labels, cfg: PredictorConfig):
    grids = np.stack([o.grid for o in labels])
    flags = np.array([[o.event_flags.offroad, o.event_flags.offlane, o.event_flags.collision] for o in labels], float)
    speed = np.array([o.ego_speed for o in labels], float)
    assigned = [assign_anchors(o.boxes, cfg) for o in labels]
    pos = np.stack([a[0] for a in assigned])
    offsets = np.stack([a[1] for a in assigned])
    phi = np.stack([a[2] for a in assigned])
    counts = np.array([len(o.boxes) for o in labels])
    return grids, flags, speed, pos, offsets, phi, counts


def make_batch(segments, cfg: PredictorConfig) -> TrainBatch:
    """Segments expose `.history` (K observations), `.actions` (T, 2), `.labels` (T observations)."""
    cols = [label_arrays(s.labels, cfg) for s in segments]
    return TrainBatch(
        hist_grids=np.stack([np.stack([o.grid for o in s.history]) for s in segments]),
        hist_speed=np.array([s.history[-1].ego_speed for s in segments], float),
        actions=np.stack([np.asarray(s.actions, float) for s in segments]),
        label_grids=np.stack([c[0] for c in cols]),
        flags=np.stack([c[1] for c in cols]),
        speed=np.stack([c[2] for c in cols]),
        pos=np.stack([c[3] for c in cols]),
        offsets=np.stack([c[4] for c in cols]),
        phi=np.stack([c[5] for c in cols]),
        counts=np.stack([c[6] for c in cols]),
    )


def loss_terms(out: dict, batch: TrainBatch, cfg: PredictorConfig, params: dict | None = None) -> dict[str, ad.Tensor]:
    """Batch-mean loss pieces as scalar tensors: det (weighted by w_t), seg, scene."""
    B, T = batch.actions.shape[:2]
    G = cfg.grid
    terms = {}

    if out.get("seg_features") is not None:
        terms["seg"] = ad.deconv_softmax_ce(
            out["seg_features"], params["seg_up2_w"], params["seg_up2_b"], 4,
            to_blocks(batch.label_grids.reshape(B * T, G, G)), 1.0 / (G * G * B),
        )
    else:
        terms["seg"] = ad.softmax_cross_entropy(out["seg"], batch.label_grids.reshape(-1), 1.0 / (G * G * B))

    sc = out["scene"]
    ev_w = np.full((B * T, 3), 1.0 / B)
    terms["scene"] = ad.add(
        ad.bce_with_logits(sc[:, :3], batch.flags.reshape(B * T, 3), ev_w),
        ad.squared_error(sc[:, 3], batch.speed.reshape(-1) / 15.0, np.full(B * T, 1.0 / B)),
    )

    if cfg.use_detection:
        wt = horizon_weights(batch.counts)  # (B, T)
        pos = batch.pos.reshape(B * T, -1)
        npos = np.maximum(1, pos.sum(axis=1))
        per = (wt.reshape(-1) / npos / B)[:, None]  # (B*T, 1)
        det = out["det"]
        A = pos.shape[1]
        focal = ad.sigmoid_focal(
            det[:, :, 0], pos.astype(float), np.broadcast_to(per, (B * T, A)), cfg.focal_alpha, cfg.focal_gamma
        )
        box = ad.smooth_l1(det[:, :, 1:5], batch.offsets.reshape(B * T, A, 4), (pos * per)[..., None] * np.ones(4))
        phi = ad.bce_with_logits(det[:, :, 5], batch.phi.reshape(B * T, A), pos * per)
        terms["det"] = ad.add(ad.add(focal, box), phi)
    return terms


def batch_loss(arrays: dict, batch: TrainBatch, cfg: PredictorConfig, requires_grad: bool = True):
    """Forward + loss. Returns (total tensor, wrapped params, breakdown floats)."""
    P = wrap(arrays, requires_grad=requires_grad)
    out = forward(P, batch.hist_grids, batch.hist_speed, batch.actions, cfg, with_seg="features")
    terms = loss_terms(out, batch, cfg, P)
    tot = terms["seg"]
    for k in ("scene", "det"):
        if k in terms:
            tot = ad.add(tot, terms[k])
    return tot, P, {k: float(v.value) for k, v in terms.items()}


def mep_loss(head_outputs: dict, labels, cfg: PredictorConfig):
    """Loss of one predicted sequence against its T label observations.

    `head_outputs` holds raw (pre-threshold) arrays: "seg" (T, G, G, 4),
    "det" (T, A, 6), "scene" (T, 4). Returns (L_D, breakdown).
    """
    T = len(labels)
    if head_outputs["scene"].shape[0] != T or head_outputs["det"].shape[0] != T or head_outputs["seg"].shape[0] != T:
        raise ValueError("prediction and label sequences differ in length")
    grids, flags, speed, pos, offsets, phi, counts = label_arrays(labels, cfg)
    batch = TrainBatch(
        hist_grids=np.zeros((1, cfg.history_len, cfg.grid, cfg.grid), np.uint8),
        hist_speed=np.zeros(1),
        actions=np.zeros((1, T, 2)),
        label_grids=grids[None],
        flags=flags[None],
        speed=speed[None],
        pos=pos[None],
        offsets=offsets[None],
        phi=phi[None],
        counts=counts[None],
    )
    out = {k: ad.Tensor(np.asarray(v, float)) for k, v in head_outputs.items()}
    terms = loss_terms(out, batch, cfg)
    parts = {k: float(v.value) for k, v in terms.items()}
    return sum(parts.values()), parts
