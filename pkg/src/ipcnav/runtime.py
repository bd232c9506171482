"""Closed training loop, run configuration, checkpoint/resume and evaluation runs."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import pickle
from dataclasses import dataclass, field

import numpy as np

from ipcnav import evaluation as ev
from ipcnav.experience import (
    EpisodeRecord,
    ReplayBuffer,
    StepRecord,
    ingest_expert,
    replay_log,
    select_good_episodes,
    step_line,
)
from ipcnav.guidance import guidance_step, imitation_batch, init_guidance
from ipcnav.observation import render_observation
from ipcnav.planner import LearnedModel, PlannerConfig, plan
from ipcnav.predictor.checkpoint import load_checkpoint, save_checkpoint
from ipcnav.predictor.losses import make_batch
from ipcnav.predictor.model import train_step
from ipcnav.predictor.network import init_params
from ipcnav.predictor.types import NonFiniteLossError, PredictorConfig, PredictorParams
from ipcnav.world import is_terminated, reset, resolve_map, step

log = logging.getLogger(__name__)

IMITATION_MODES = ("none", "self", "expert", "both")
VARIANTS = ("ipc", "no-mep", "single-stage", "no-guidance")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    map: str = "loop"
    n_agents: int = 8
    total_steps: int = 100_000
    seed: int = 0
    exploration_steps: int = 100_000
    train_every: int = 4
    warmup_steps: int = 1000
    imitation: str = "self"
    output_dir: str = "runs/default"
    checkpoint_every: int = 10_000
    variant: str = "ipc"
    expert_episodes: int = 5
    expert_demos: str | None = None  # JSONL from demo-record; generated when absent
    good_min_reward: float = 200.0
    good_quantile: float = 90.0
    buffer_capacity: int = 20_000
    guidance_batch: int = 16
    log_plans: bool = False
    predictor: dict = field(default_factory=dict)
    planner: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.imitation not in IMITATION_MODES:
            raise ConfigError(f"imitation must be one of {IMITATION_MODES}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}")
        for name in ("n_agents", "train_every", "exploration_steps", "buffer_capacity", "guidance_batch"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("total_steps", "warmup_steps", "checkpoint_every", "expert_episodes"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        try:
            self.predictor_config()
            self.planner_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        try:
            with open(path, encoding="utf-8") as f:
                d = json.load(f)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON in {path}: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(d)

    def predictor_config(self) -> PredictorConfig:
        return PredictorConfig(**{**self.predictor, "use_detection": self.variant != "no-mep"})

    def planner_config(self) -> PlannerConfig:
        return PlannerConfig(
            **{
                **self.planner,
                "single_stage": self.variant == "single-stage",
                "use_instances": self.variant != "no-mep",
            }
        )


def epsilon(step_index: int, exploration_steps: int = 100_000) -> float:
    if step_index < 0:
        raise ValueError("step must be >= 0")
    return max(0.0, 1.0 - step_index / exploration_steps)


@dataclass
class RunState:
    step: int
    grad_steps: int
    episode: int
    world: object
    ep_steps: list
    history: list
    buffer: ReplayBuffer
    predictor: PredictorParams
    guidance: PredictorParams
    rng_env: np.random.Generator
    rng_plan: np.random.Generator
    rng_train: np.random.Generator
    step_rewards: list = field(default_factory=list)
    losses: list = field(default_factory=list)  # (grad_step, env_step, total, seg, scene, det, guidance)
    log_offset: int = 0
    ep_seed: int = 0


def _paths(out: str) -> dict[str, str]:
    return {
        "ckpt": os.path.join(out, "checkpoints"),
        "logs": os.path.join(out, "logs"),
        "metrics": os.path.join(out, "metrics"),
    }


def prepare_output(out: str) -> dict[str, str]:
    p = _paths(out)
    try:
        for d in p.values():
            os.makedirs(d, exist_ok=True)
        probe = os.path.join(out, ".write-test")
        with open(probe, "w") as f:
            f.write("")
        os.remove(probe)
    except OSError as exc:
        raise ConfigError(f"output directory {out!r} is not writable: {exc}") from exc
    return p


def _new_episode(state: RunState, world_map, cfg: RunConfig, pcfg: PredictorConfig) -> None:
    state.ep_seed = int(state.rng_env.integers(2**31))
    state.world = reset(world_map, cfg.n_agents, state.ep_seed)
    state.ep_steps = []
    state.history = [render_observation(state.world)] * pcfg.history_len


def initial_state(cfg: RunConfig) -> RunState:
    pcfg = cfg.predictor_config()
    ss = np.random.SeedSequence(cfg.seed)
    s_env, s_plan, s_train, s_init = ss.spawn(4)
    init_seed = int(s_init.generate_state(1)[0])
    state = RunState(
        step=0,
        grad_steps=0,
        episode=0,
        world=None,
        ep_steps=[],
        history=[],
        buffer=ReplayBuffer(cfg.buffer_capacity),
        predictor=init_params(pcfg, init_seed),
        guidance=init_guidance(pcfg, init_seed),
        rng_env=np.random.default_rng(s_env),
        rng_plan=np.random.default_rng(s_plan),
        rng_train=np.random.default_rng(s_train),
    )
    _new_episode(state, resolve_map(cfg.map), cfg, pcfg)
    return state


def expert_pool(cfg: RunConfig) -> list[EpisodeRecord]:
    if cfg.imitation not in ("expert", "both"):
        return []
    if cfg.expert_demos:
        return replay_log(cfg.expert_demos)
    seed = int(np.random.SeedSequence([cfg.seed, 7]).generate_state(1)[0])
    return ingest_expert(resolve_map(cfg.map), cfg.n_agents, cfg.expert_episodes, seed)


def imitation_pool(state: RunState, cfg: RunConfig, experts: list[EpisodeRecord]) -> list[EpisodeRecord]:
    pool = []
    if cfg.imitation in ("self", "both"):
        pool += select_good_episodes(state.buffer, cfg.good_quantile, cfg.good_min_reward)
    if cfg.imitation in ("expert", "both"):
        pool += experts
    return pool


def save_run(state: RunState, paths: dict, tag: str) -> str:
    ipck = os.path.join(paths["ckpt"], f"{tag}.ipck")
    save_checkpoint(ipck, state.predictor, state.guidance)
    rest = dataclasses.replace(state, predictor=None, guidance=None)
    tmp = os.path.join(paths["ckpt"], f"{tag}.state.pkl.tmp")
    with open(tmp, "wb") as f:
        pickle.dump(rest, f, protocol=pickle.HIGHEST_PROTOCOL)
    os.replace(tmp, os.path.join(paths["ckpt"], f"{tag}.state.pkl"))
    return ipck


def load_run(ipck_path: str) -> RunState:
    base = ipck_path[: -len(".ipck")] if ipck_path.endswith(".ipck") else ipck_path
    with open(base + ".state.pkl", "rb") as f:
        state = pickle.load(f)
    pred, guid = load_checkpoint(base + ".ipck")
    state.predictor, state.guidance = pred, guid
    return state


def _train_once(state: RunState, cfg: RunConfig, pcfg: PredictorConfig, experts) -> None:
    segs = state.buffer.sample_segments(pcfg.batch_size, pcfg.history_len, pcfg.horizon, state.rng_train)
    try:
        state.predictor, loss, parts = train_step(state.predictor, make_batch(segs, pcfg), pcfg)
    except NonFiniteLossError:
        raise
    g_loss = float("nan")
    if cfg.variant != "no-guidance":
        pool = imitation_pool(state, cfg, experts)
        if pool:
            grids, speeds, targets = imitation_batch(pool, cfg.guidance_batch, pcfg, state.rng_train)
            state.guidance, g_loss = guidance_step(state.guidance, grids, speeds, targets, pcfg)
    state.grad_steps += 1
    state.losses.append(
        (state.grad_steps, state.step, loss, parts["seg"], parts["scene"], parts.get("det", 0.0), g_loss)
    )


def write_run_metrics(state: RunState, cfg: RunConfig, paths: dict) -> None:
    curve = ev.reward_curve(state.step_rewards)
    ev.write_csv(
        os.path.join(paths["metrics"], "reward_curve.csv"),
        ["step", "variant", "seed", "mean_reward"],
        [(s, cfg.variant, cfg.seed, r) for s, r in curve],
    )
    ev.write_csv(
        os.path.join(paths["metrics"], "train_loss.csv"),
        ["grad_step", "env_step", "loss", "seg", "scene", "det", "guidance"],
        state.losses,
    )


def train_run(cfg: RunConfig, resume: str | None = None, stop_at: int | None = None) -> RunState:
    """Explore, store, train and plan for cfg.total_steps environment steps.

    `resume` is a checkpoint path (.ipck with its .state.pkl sibling); the run
    continues exactly where that checkpoint left off. `stop_at` ends the loop
    early (after checkpointing) without changing any other behavior.
    """
    paths = prepare_output(cfg.output_dir)
    pcfg = cfg.predictor_config()
    plcfg = cfg.planner_config()
    world_map = resolve_map(cfg.map)
    experts = expert_pool(cfg)
    log_path = os.path.join(paths["logs"], "train.jsonl")
    if resume:
        state = load_run(resume)
        if os.path.exists(log_path) and os.path.getsize(log_path) >= state.log_offset:
            with open(log_path, "ab") as f:
                f.truncate(state.log_offset)
        else:
            open(log_path, "w").close()
    else:
        state = initial_state(cfg)
        open(log_path, "w").close()
        save_run(state, paths, f"step_{0:07d}")
    end = cfg.total_steps if stop_at is None else min(stop_at, cfg.total_steps)
    plan_log = open(os.path.join(paths["logs"], "plans.jsonl"), "a" if resume else "w") if cfg.log_plans else None
    model = LearnedModel(state.predictor, pcfg)
    guidance = None if cfg.variant == "no-guidance" else state.guidance
    with open(log_path, "a", encoding="utf-8") as logf:
        while state.step < end:
            eps = epsilon(state.step, cfg.exploration_steps)
            model.params = state.predictor
            if guidance is not None:
                guidance = state.guidance
            res = plan(state.history, model, guidance, eps, state.rng_plan, plcfg, pcfg, state.world)
            obs = state.history[-1]
            state.world, flags, reward = step(state.world, res.action)
            rec = StepRecord(obs, res.action.as_tuple(), reward, flags, state.world.ego.speed)
            state.ep_steps.append(rec)
            state.history = state.history[1:] + [render_observation(state.world, flags)]
            state.step_rewards.append(reward)
            logf.write(
                json.dumps(step_line(state.episode, len(state.ep_steps) - 1, rec, step=state.step, eps=eps)) + "\n"
            )
            if plan_log is not None:
                plan_log.write(json.dumps({"step": state.step, **res.diagnostics()}) + "\n")
            state.step += 1
            if is_terminated(state.world)[0]:
                state.buffer.push_episode(EpisodeRecord(state.ep_steps, state.ep_seed, "exploration"))
                state.episode += 1
                _new_episode(state, world_map, cfg, pcfg)
            if (
                state.step % cfg.train_every == 0
                and len(state.buffer) >= cfg.warmup_steps
                and state.buffer.segment_counts(pcfg.history_len + pcfg.horizon).sum() > 0
            ):
                try:
                    _train_once(state, cfg, pcfg, experts)
                except NonFiniteLossError:
                    logf.flush()
                    state.log_offset = logf.tell()
                    save_run(state, paths, f"abort_{state.step:07d}")
                    raise
            if cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                logf.flush()
                state.log_offset = logf.tell()
                save_run(state, paths, f"step_{state.step:07d}")
        logf.flush()
        state.log_offset = logf.tell()
    if plan_log is not None:
        plan_log.close()
    save_run(state, paths, "final")
    write_run_metrics(state, cfg, paths)
    return state


# --- evaluation runs -------------------------------------------------------------


def infer_predictor_config(params: PredictorParams, **overrides) -> PredictorConfig:
    """Recover grid, history length and hidden size from the stored array shapes."""
    a = params.arrays
    hidden = a["fuse_w"].shape[1]
    side = int(round(math.sqrt(a["det_w"].shape[1] / 6)))
    k = (a["fuse_w"].shape[0] - 1) // (side * side * 16)
    return PredictorConfig(**{"grid": side * 8, "history_len": k, "hidden_dim": hidden, **overrides})


def eval_run(
    checkpoint: str,
    episodes: int,
    n_agents: int = 8,
    seed: int = 0,
    world_map: str = "loop",
    out: str = "eval",
    eps: float = 0.0,
    variant: str = "ipc",
    planner: dict | None = None,
) -> dict:
    """Drive `episodes` fresh episodes with the checkpointed planner and write metrics.

    Outputs under `out`: logs/eval.jsonl, metrics/driving_stats.csv,
    metrics/event_accuracy.csv (teacher-forced forecasts on the episodes' own
    segments) and metrics/seg_metrics.csv.
    """
    if episodes < 1:
        raise ConfigError("episodes must be >= 1")
    paths = prepare_output(out)
    pred, guid = load_checkpoint(checkpoint)
    pcfg = infer_predictor_config(pred)
    cfg = RunConfig(variant=variant, planner=planner or {}, predictor={
        "grid": pcfg.grid, "history_len": pcfg.history_len, "hidden_dim": pcfg.hidden_dim})
    plcfg = cfg.planner_config()
    m = resolve_map(world_map)
    model = LearnedModel(pred, pcfg)
    guidance = None if variant == "no-guidance" else guid
    ss = np.random.SeedSequence([seed, 99])
    rng_plan = np.random.default_rng(ss.spawn(1)[0])
    ep_seeds = [int(s) for s in ss.generate_state(episodes)]
    records, lines = [], []
    for i, s in enumerate(ep_seeds):
        w = reset(m, n_agents, s)
        hist = [render_observation(w)] * pcfg.history_len
        steps = []
        while not is_terminated(w)[0]:
            res = plan(hist, model, guidance, eps, rng_plan, plcfg, pcfg, w)
            obs = hist[-1]
            w, flags, r = step(w, res.action)
            rec = StepRecord(obs, res.action.as_tuple(), r, flags, w.ego.speed)
            steps.append(rec)
            lines.append(step_line(i, len(steps) - 1, rec, seed=s))
            hist = hist[1:] + [render_observation(w, flags)]
        records.append(EpisodeRecord(steps, s))
    with open(os.path.join(paths["logs"], "eval.jsonl"), "w", encoding="utf-8") as f:
        for ln in lines:
            f.write(json.dumps(ln) + "\n")
    result = {"episodes": episodes, "steps": len(lines)}
    buf = ReplayBuffer(capacity=10**9)
    for r in records:
        buf.push_episode(r)
    segs = [
        buf.segment(e, st, pcfg.history_len, pcfg.horizon)
        for e, n in enumerate(buf.segment_counts(pcfg.history_len + pcfg.horizon))
        for st in range(int(n))
    ]
    if len(lines) >= 100:
        ds = ev.driving_stats(lines)
        result["driving"] = dataclasses.asdict(ds)
        ev.write_csv(
            os.path.join(paths["metrics"], "driving_stats.csv"),
            ["metric", "value"],
            [(k, float(v)) for k, v in dataclasses.asdict(ds).items()],
        )
    if segs:
        p, t, sp, sg = ev.collect_forecasts(pred, pcfg, segs, with_seg=True)
        table = ev.event_accuracy(p, t)
        ev.write_csv(
            os.path.join(paths["metrics"], "event_accuracy.csv"),
            ["event", "horizon", "accuracy", "count"],
            ev.accuracy_rows(table),
        )
        ev.write_csv(
            os.path.join(paths["metrics"], "seg_metrics.csv"),
            ["metric", "horizon", "value"],
            ev.seg_rows(ev.seg_metrics_by_horizon(sp, sg)),
        )
        result["event_accuracy"] = {k: v.tolist() for k, v in table.accuracy.items()}
        result["majority_collision_h1"] = ev.majority_rate(t["collision"][:, 0])
    return result


def expert_reference_reward(cfg: RunConfig, seeds) -> float:
    """Mean per-step reward of the scripted expert on the run's map."""
    rewards = []
    for s in seeds:
        for e in ingest_expert(resolve_map(cfg.map), cfg.n_agents, 1, int(s)):
            rewards += [st.reward for st in e.steps]
    return float(np.mean(rewards))
