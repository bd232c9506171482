"""Two-stage sequential action sampling over forecast futures.

Stage 1 ranks candidate action sequences by scene-level cost and keeps the N1
best; stage 2 picks, among those, the sequence with the lowest instance-level
collision cost. The first action of that sequence is executed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ipcnav.autodiff import _sigmoid
from ipcnav.guidance import bin_distribution, sample_sequences
from ipcnav.predictor.model import decode_detections, decode_scene, encode_history, rollout_raw
from ipcnav.predictor.types import PredictorConfig, PredictorParams, StatePrediction
from ipcnav.world import Action, detect_events, is_terminated, step

ALPHA_FLOOR = 0.125


@dataclass(frozen=True)
class PlannerConfig:
    n0: int = 20
    n1: int = 5
    horizon: int = 10
    v_max: float = 15.0
    offlane_weight: float = 0.2
    single_stage: bool = False
    use_instances: bool = True  # False: instance cost is identically zero

    def __post_init__(self):
        if not 1 <= self.n1 <= self.n0:
            raise ValueError("need 1 <= n1 <= n0")
        if self.horizon < 1 or self.v_max <= 0:
            raise ValueError("horizon must be >= 1 and v_max > 0")


# --- cost formulas -----------------------------------------------------------


def horizon_weight(i: int) -> float:
    if i < 1:
        raise ValueError("horizon index starts at 1")
    return max(2.0**-i, ALPHA_FLOOR)


def horizon_weights(T: int) -> np.ndarray:
    return np.array([horizon_weight(i) for i in range(1, T + 1)])


def accident_cost(x, p_speed, v_max: float = 15.0):
    return -p_speed * (1.0 - x) + v_max * x


def scene_step_cost(scene, v_max: float = 15.0, offlane_weight: float = 0.2) -> float:
    v = scene.p_speed
    return (
        accident_cost(scene.p_offroad, v, v_max)
        + accident_cost(scene.p_collision, v, v_max)
        + offlane_weight * accident_cost(scene.p_offlane, v, v_max)
    )


def scene_step_costs(probs: np.ndarray, speed: np.ndarray, v_max=15.0, offlane_weight=0.2) -> np.ndarray:
    """Vectorized step cost; probs (..., 3) ordered offroad, offlane, collision."""
    return (
        accident_cost(probs[..., 0], speed, v_max)
        + accident_cost(probs[..., 2], speed, v_max)
        + offlane_weight * accident_cost(probs[..., 1], speed, v_max)
    )


def scene_cost(predictions: list[StatePrediction], v_max=15.0, offlane_weight=0.2) -> float:
    a = horizon_weights(len(predictions))
    return float(sum(w * scene_step_cost(p.scene, v_max, offlane_weight) for w, p in zip(a, predictions)))


def instance_cost(predictions: list[StatePrediction]) -> float:
    a = horizon_weights(len(predictions))
    return float(sum(w * sum(d.phi * d.c for d in p.instances) for w, p in zip(a, predictions)))


def stage_one(scene_costs: np.ndarray, n1: int) -> np.ndarray:
    """Indices of the n1 lowest scene costs, ties broken by candidate index."""
    order = np.lexsort((np.arange(len(scene_costs)), scene_costs))
    return order[:n1]


def stage_two(kept: np.ndarray, instance_costs: np.ndarray) -> int:
    kept = np.sort(kept)
    return int(kept[np.argmin(instance_costs[kept])])


def select_two_stage(scene_costs, instance_costs, n1: int) -> tuple[int, np.ndarray]:
    kept = stage_one(np.asarray(scene_costs, float), n1)
    return stage_two(kept, np.asarray(instance_costs, float)), kept


def select_single_stage(scene_costs, instance_costs) -> int:
    return int(np.argmin(np.asarray(scene_costs, float) + np.asarray(instance_costs, float)))


# --- forecast models -----------------------------------------------------------


@dataclass
class Forecast:
    """Per candidate and step: scene probabilities (N, T, 3), speed (N, T) and
    the summed phi*c over detected instances (N, T)."""

    probs: np.ndarray
    speed: np.ndarray
    inst: np.ndarray
    raw: dict = field(default_factory=dict)


class LearnedModel:
    def __init__(self, params: PredictorParams, cfg: PredictorConfig):
        self.params = params
        self.cfg = cfg

    def forecast(self, history, world, actions: np.ndarray) -> Forecast:
        feat = encode_history(history, self.params, self.cfg)
        raw = rollout_raw(self.params, feat, actions, self.cfg)
        sc = raw["scene"]
        probs = _sigmoid(sc[..., :3].astype(float))
        speed = np.clip(15.0 * sc[..., 3].astype(float), 0.0, 15.0)
        det = raw["det"].astype(float)
        c = _sigmoid(det[..., 0])
        phi = _sigmoid(det[..., 5])
        keep = c >= self.cfg.c_thr
        if self.cfg.d_max < c.shape[-1]:
            # only the d_max most confident anchors per step count
            ranked = np.where(keep, c, -1.0)
            rank = np.argsort(np.argsort(-ranked, axis=-1, kind="stable"), axis=-1, kind="stable")
            keep &= rank < self.cfg.d_max
        inst = (phi * c * keep).sum(axis=-1)
        return Forecast(probs, speed, inst, raw)

    def predictions(self, fc: Forecast, i: int) -> list[StatePrediction]:
        raw = fc.raw
        return [
            StatePrediction(None, decode_scene(raw["scene"][i, t]), decode_detections(raw["det"][i, t], self.cfg))
            for t in range(raw["scene"].shape[1])
        ]


class OracleModel:
    """Ground-truth dynamics: each candidate is simulated on a clone of the world.

    Scene probabilities are the realized event flags, the speed is the realized
    speed, and every vehicle the ego collides with counts as an instance with
    c = 1 and phi = 1 (all other instances contribute phi = 0).
    """

    def forecast(self, history, world, actions: np.ndarray) -> Forecast:
        N, T = actions.shape[:2]
        probs = np.zeros((N, T, 3))
        speed = np.zeros((N, T))
        inst = np.zeros((N, T))
        for n in range(N):
            w = world.clone()
            ev = None
            for t in range(T):
                if not is_terminated(w)[0]:
                    w, ev, _ = step(w, Action(*actions[n, t]))
                elif ev is None:
                    ev = detect_events(w)
                probs[n, t] = (ev.offroad, ev.offlane, ev.collision)
                speed[n, t] = w.ego.speed
                inst[n, t] = len(ev.colliding_agent_ids)
        return Forecast(probs, speed, inst)


# --- planning --------------------------------------------------------------------


@dataclass
class PlanResult:
    action: Action
    chosen: int
    scene_costs: np.ndarray
    instance_costs: np.ndarray  # nan where not evaluated
    kept: np.ndarray
    actions: np.ndarray
    forecast: Forecast | None = None

    def diagnostics(self) -> dict:
        kept = set(int(k) for k in self.kept)
        cands = []
        for i, sc in enumerate(self.scene_costs):
            d = {"scene_cost": float(sc), "kept": i in kept}
            if not np.isnan(self.instance_costs[i]):
                d["instance_cost"] = float(self.instance_costs[i])
            cands.append(d)
        return {"candidates": cands, "chosen": self.chosen, "action": list(self.action.as_tuple())}


def score(fc: Forecast, cfg: PlannerConfig) -> tuple[np.ndarray, np.ndarray]:
    a = horizon_weights(fc.probs.shape[1])
    sc = (scene_step_costs(fc.probs, fc.speed, cfg.v_max, cfg.offlane_weight) * a).sum(axis=1)
    ic = (fc.inst * a).sum(axis=1) if cfg.use_instances else np.zeros(len(sc))
    return sc, ic


def choose(scene_costs, instance_costs, cfg: PlannerConfig) -> tuple[int, np.ndarray, np.ndarray]:
    """Returns (chosen index, kept indices, instance costs masked to the evaluated set)."""
    n = len(scene_costs)
    if cfg.single_stage:
        return select_single_stage(scene_costs, instance_costs), np.arange(n), np.asarray(instance_costs, float)
    chosen, kept = select_two_stage(scene_costs, instance_costs, cfg.n1)
    masked = np.full(n, np.nan)
    masked[kept] = np.asarray(instance_costs, float)[kept]
    return chosen, kept, masked


def plan(history, model, guidance: PredictorParams | None, eps: float, rng, cfg: PlannerConfig,
         guidance_cfg: PredictorConfig | None = None, world=None) -> PlanResult:
    """Sample N0 candidates, forecast them, and return the first action of the selected one.

    `guidance` of None samples bins uniformly. `world` is only read by the
    oracle model.
    """
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    probs = None
    if guidance is not None and eps < 1.0:
        probs = bin_distribution(history, guidance, guidance_cfg or PredictorConfig())
    actions, _ = sample_sequences(probs, cfg.n0, cfg.horizon, eps, rng)
    fc = model.forecast(history, world, actions)
    sc, ic = score(fc, cfg)
    chosen, kept, masked = choose(sc, ic, cfg)
    act = Action(*actions[chosen, 0])
    return PlanResult(act, chosen, sc, masked, kept, actions, fc)
