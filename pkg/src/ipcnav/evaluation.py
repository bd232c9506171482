"""Metrics: horizon-wise event accuracy, segmentation scores, driving statistics,
reward curves with bootstrap intervals, and the ablation benchmark driver."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from ipcnav.autodiff import _sigmoid
from ipcnav.predictor.losses import make_batch
from ipcnav.predictor.model import predict_batch

EVENTS = ("collision", "offroad", "offlane", "collision_with_vehicle")

# Published CARLA figures (32 vehicles), kept for side-by-side reports only.
# They come from a different simulator and are never used as pass/fail targets.
CARLA_REFERENCE = {
    "collision_accuracy_by_horizon": (97.34, 97.28, 97.17, 97.07, 96.86, 96.71, 96.52, 96.31, 96.07, 95.81),
    "avg_speed": 10.22,
    "collision_per_100": 1.23,
    "coll_with_vehicle_per_100": 1.07,
    "offroad_per_100": 1.12,
}


@dataclass
class HorizonAccuracyTable:
    accuracy: dict[str, np.ndarray]  # event -> (T,) percent, nan where no samples
    counts: dict[str, np.ndarray]  # event -> (T,)

    def rows(self):
        for ev in self.accuracy:
            for h, (acc, n) in enumerate(zip(self.accuracy[ev], self.counts[ev]), start=1):
                if n > 0:
                    yield ev, h, float(acc), int(n)


def event_accuracy(pred: dict, truth: dict, threshold: float = 0.5) -> HorizonAccuracyTable:
    """pred/truth map event -> (N, T) arrays; truth may be nan where unlabeled."""
    acc, cnt = {}, {}
    for ev in pred:
        p = np.atleast_2d(np.asarray(pred[ev], float))
        t = np.atleast_2d(np.asarray(truth[ev], float))
        valid = ~np.isnan(t)
        hit = ((p >= threshold) == (t >= 0.5)) & valid
        n = valid.sum(axis=0)
        with np.errstate(invalid="ignore", divide="ignore"):
            acc[ev] = np.where(n > 0, 100.0 * hit.sum(axis=0) / np.maximum(n, 1), np.nan)
        cnt[ev] = n
    return HorizonAccuracyTable(acc, cnt)


def majority_rate(truth) -> float:
    """Accuracy (percent) of always predicting the more frequent class."""
    t = np.asarray(truth, float)
    t = t[~np.isnan(t)]
    if t.size == 0:
        return float("nan")
    pos = float((t >= 0.5).mean())
    return 100.0 * max(pos, 1.0 - pos)


def collect_forecasts(params, cfg, segments, batch: int = 32, with_seg: bool = False):
    """Teacher-forced forecasts on recorded segments.

    Returns (pred, truth) dicts of (N, T) arrays for every event, plus the
    predicted and ground-truth grids (N, T, G, G) when `with_seg` is set.
    """
    preds = {ev: [] for ev in EVENTS}
    truth = {ev: [] for ev in EVENTS}
    seg_pred, seg_gt = [], []
    for i in range(0, len(segments), batch):
        chunk = segments[i : i + batch]
        b = make_batch(chunk, cfg)
        out = predict_batch(params, b, cfg, with_seg=with_seg)
        probs = _sigmoid(out["scene"][..., :3].astype(float))
        preds["offroad"].append(probs[..., 0])
        preds["offlane"].append(probs[..., 1])
        preds["collision"].append(probs[..., 2])
        det = out["det"].astype(float)
        c = _sigmoid(det[..., 0])
        phi = _sigmoid(det[..., 5])
        preds["collision_with_vehicle"].append((phi * (c >= cfg.c_thr)).max(axis=-1))
        truth["offroad"].append(b.flags[..., 0])
        truth["offlane"].append(b.flags[..., 1])
        truth["collision"].append(b.flags[..., 2])
        truth["collision_with_vehicle"].append(
            np.array([[o.event_flags.collision_with_vehicle for o in s.labels] for s in chunk], float)
        )
        if with_seg:
            seg_pred.append(out["seg"].argmax(axis=-1).astype(np.uint8))
            seg_gt.append(b.label_grids)
    pred = {k: np.concatenate(v) for k, v in preds.items()}
    tru = {k: np.concatenate(v) for k, v in truth.items()}
    if with_seg:
        return pred, tru, np.concatenate(seg_pred), np.concatenate(seg_gt)
    return pred, tru


# --- segmentation ---------------------------------------------------------------


@dataclass
class SegMetrics:
    pixel_acc: float
    mean_acc: float
    mean_iu: float
    fw_iu: float
    vehicle_acc: float | None  # None when no ground-truth vehicle cells exist

    def as_dict(self) -> dict:
        return {
            "pixel_acc": self.pixel_acc,
            "mean_acc": self.mean_acc,
            "mean_iu": self.mean_iu,
            "fw_iu": self.fw_iu,
            "vehicle_acc": self.vehicle_acc,
        }


def confusion_matrix(pred, gt, n_classes: int = 4) -> np.ndarray:
    pred = np.asarray(pred).reshape(-1).astype(np.int64)
    gt = np.asarray(gt).reshape(-1).astype(np.int64)
    return np.bincount(gt * n_classes + pred, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def seg_metrics(pred, gt, n_classes: int = 4, vehicle_class: int = 3) -> SegMetrics:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    n = confusion_matrix(pred, gt, n_classes).astype(float)
    t = n.sum(axis=1)
    diag = np.diag(n)
    present = t > 0
    iu = diag[present] / (t[present] + n.sum(axis=0)[present] - diag[present])
    total = t.sum()
    return SegMetrics(
        pixel_acc=100.0 * diag.sum() / total,
        mean_acc=100.0 * float(np.mean(diag[present] / t[present])),
        mean_iu=100.0 * float(np.mean(iu)),
        fw_iu=100.0 * float((t[present] * iu).sum() / total),
        vehicle_acc=100.0 * diag[vehicle_class] / t[vehicle_class] if t[vehicle_class] > 0 else None,
    )


def seg_metrics_by_horizon(pred, gt) -> list[SegMetrics]:
    """pred, gt: (N, T, G, G) -> one SegMetrics per horizon step."""
    return [seg_metrics(pred[:, t], gt[:, t]) for t in range(pred.shape[1])]


# --- driving statistics ---------------------------------------------------------


@dataclass
class DrivingStats:
    avg_speed: float
    collision: float
    coll_with_vehicle: float
    offroad: float
    steps: int


def driving_stats(lines) -> DrivingStats:
    """Per-100-step event frequencies and mean speed from episode-log lines."""
    lines = list(lines)
    n = len(lines)
    if n < 100:
        raise ValueError(f"need at least 100 steps, got {n}")
    coll = sum(int(ln["events"]["collision"]) for ln in lines)
    cwv = sum(int(ln["events"].get("collision_with_vehicle", 0)) for ln in lines)
    off = sum(int(ln["events"]["offroad"]) for ln in lines)
    speed = float(np.mean([ln["speed"] for ln in lines]))
    return DrivingStats(speed, 100.0 * coll / n, 100.0 * cwv / n, 100.0 * off / n, n)


# --- curves and intervals ---------------------------------------------------------


def reward_curve(rewards, window: int = 1000) -> list[tuple[int, float]]:
    """Mean per-step reward over consecutive windows: (end step, mean)."""
    r = np.asarray(rewards, float)
    out = []
    for end in range(window, len(r) + 1, window):
        out.append((end, float(r[end - window : end].mean())))
    return out


def bootstrap_ci(values, n_boot: int = 2000, level: float = 0.95, seed: int = 0) -> tuple[float, float]:
    v = np.asarray(values, float)
    if v.size == 0:
        return float("nan"), float("nan")
    if v.size == 1:
        return float(v[0]), float(v[0])
    rng = np.random.default_rng(seed)
    means = v[rng.integers(0, v.size, (n_boot, v.size))].mean(axis=1)
    lo, hi = np.percentile(means, [50 * (1 - level), 100 - 50 * (1 - level)])
    return float(lo), float(hi)


def write_csv(path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([f"{x:.6f}" if isinstance(x, float) else x for x in r])
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(buf.getvalue())


def accuracy_rows(table: HorizonAccuracyTable):
    return [(ev, h, acc, n) for ev, h, acc, n in table.rows()]


def seg_rows(per_horizon: list[SegMetrics]):
    rows = []
    for h, m in enumerate(per_horizon, start=1):
        for k, v in m.as_dict().items():
            if v is not None:
                rows.append((k, h, float(v)))
    return rows


# --- benchmark ------------------------------------------------------------------

VARIANTS = ("ipc", "no-mep", "single-stage", "no-guidance")


def _bench_one(args):
    from ipcnav.runtime import train_run

    cfg, window = args
    state = train_run(cfg)
    return reward_curve(state.step_rewards, window)


def run_benchmark(config, variants, seeds, out_dir, window: int = 1000, workers: int = 1) -> dict:
    """Train every (variant, seed) pair and emit reward curves and final-reward intervals.

    Writes metrics/reward_curves.csv (step,variant,seed,mean_reward) and
    metrics/final_rewards.csv (variant,mean_final_reward,ci_low,ci_high,n_seeds)
    under `out_dir`. The final reward of a run is the mean of its last curve window.
    An "expert" reference row gives the scripted expert's mean per-step reward.
    Runs are independent, so `workers` > 1 trains them in separate processes
    with identical results.
    """
    import os
    from concurrent.futures import ProcessPoolExecutor
    from dataclasses import replace

    from ipcnav.runtime import expert_reference_reward

    for v in variants:
        if v not in VARIANTS:
            raise ValueError(f"unknown variant {v!r}")
    os.makedirs(os.path.join(out_dir, "metrics"), exist_ok=True)
    jobs = [
        (v, int(s), replace(config, variant=v, seed=int(s), output_dir=os.path.join(out_dir, "runs", f"{v}-{s}")))
        for v in variants
        for s in seeds
    ]
    args = [(cfg, window) for _, _, cfg in jobs]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_bench_one, args))
    else:
        results = [_bench_one(a) for a in args]
    curves, finals = [], {v: [] for v in variants}
    for (v, s, _), c in zip(jobs, results):
        curves += [(step, v, s, val) for step, val in c]
        if c:
            finals[v].append(c[-1][1])
    expert = expert_reference_reward(config, seeds)
    last = max((c[0] for c in curves), default=0)
    curves += [(step, "expert", -1, expert) for step in range(window, last + 1, window)]
    write_csv(os.path.join(out_dir, "metrics", "reward_curves.csv"), ["step", "variant", "seed", "mean_reward"], curves)
    table = []
    for v in variants:
        lo, hi = bootstrap_ci(finals[v])
        mean = float(np.mean(finals[v])) if finals[v] else float("nan")
        table.append((v, mean, lo, hi, len(finals[v])))
    table.append(("expert", expert, expert, expert, len(seeds)))
    write_csv(
        os.path.join(out_dir, "metrics", "final_rewards.csv"),
        ["variant", "mean_final_reward", "ci_low", "ci_high", "n_seeds"],
        table,
    )
    return {"curves": curves, "final": {row[0]: row[1:] for row in table}}


def ordering_report(final: dict) -> str:
    """Plain-text summary of mean final rewards and whether the full method beats no-mep."""
    lines = ["variant,mean_final_reward,ci_low,ci_high,n_seeds"]
    for v, (mean, lo, hi, n) in final.items():
        lines.append(f"{v},{mean:.6f},{lo:.6f},{hi:.6f},{n}")
    if "ipc" in final and "no-mep" in final:
        a, b = final["ipc"][0], final["no-mep"][0]
        verdict = "matches" if a > b else "does not match"
        lines.append(
            f"ipc mean final reward {a:.4f} vs no-mep {b:.4f}: "
            f"{verdict} the expected direction (instance prediction speeds up reward growth)"
        )
    return "\n".join(lines) + "\n"
