"""Episode records, the replay buffer, good-episode selection and expert demos."""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from ipcnav.observation import Observation, render_observation
from ipcnav.world import Action, EventFlags, builtin_map, expert_policy, is_terminated, reset, resolve_map, step

CAPACITY = 20_000
MAX_EPISODE_LEN = 1000
GOOD_QUANTILE = 90.0
GOOD_MIN_REWARD = 200.0


@dataclass
class StepRecord:
    obs: Observation  # observation before the action
    action: tuple[float, float]
    reward: float
    flags: EventFlags  # events produced by the action
    speed: float  # ego speed after the action


@dataclass
class EpisodeRecord:
    steps: list[StepRecord]
    seed: int = 0
    source: str = "exploration"
    total_reward: float = field(init=False)

    def __post_init__(self):
        if self.source not in ("exploration", "expert"):
            raise ValueError(f"unknown episode source {self.source!r}")
        if len(self.steps) > MAX_EPISODE_LEN:
            raise ValueError("episode longer than 1000 steps")
        self.total_reward = math.fsum(s.reward for s in self.steps)

    def __len__(self):
        return len(self.steps)


@dataclass
class Segment:
    """K history frames, the T actions taken from the last of them, and the T frames they produced."""

    history: list[Observation]
    actions: np.ndarray
    labels: list[Observation]
    episode: int = 0
    start: int = 0


class ReplayBuffer:
    def __init__(self, capacity: int = CAPACITY):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.episodes: deque[EpisodeRecord] = deque()
        self.size = 0
        self.pushed = 0  # running count of episodes ever pushed

    def __len__(self):
        return self.size

    def push_episode(self, episode: EpisodeRecord) -> "ReplayBuffer":
        if len(episode) == 0:
            raise ValueError("cannot store an empty episode")
        self.episodes.append(episode)
        self.size += len(episode)
        self.pushed += 1
        while self.size > self.capacity:
            self.size -= len(self.episodes.popleft())
        return self

    def segment_counts(self, segment_len: int) -> np.ndarray:
        return np.array([max(0, len(e) - segment_len + 1) for e in self.episodes], dtype=np.int64)

    def segment(self, episode: int, start: int, history_len: int, horizon: int) -> Segment:
        steps = self.episodes[episode].steps
        window = steps[start : start + history_len + horizon]
        return Segment(
            history=[s.obs for s in window[:history_len]],
            actions=np.array([s.action for s in window[history_len - 1 : history_len - 1 + horizon]], float),
            labels=[s.obs for s in window[history_len:]],
            episode=episode,
            start=start,
        )

    def sample_segments(self, batch: int, history_len: int, horizon: int, seed) -> list[Segment]:
        """Uniform over all valid (episode, start) windows of history_len + horizon steps."""
        counts = self.segment_counts(history_len + horizon)
        total = int(counts.sum())
        if total == 0:
            raise ValueError(
                f"no episode with at least {history_len + horizon} steps in the buffer; collect more data first"
            )
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        cum = np.cumsum(counts)
        draws = rng.integers(0, total, size=batch)
        eps = np.searchsorted(cum, draws, side="right")
        starts = draws - (cum[eps] - counts[eps])
        return [self.segment(int(e), int(s), history_len, horizon) for e, s in zip(eps, starts)]


def select_good_episodes(
    episodes, quantile: float = GOOD_QUANTILE, min_reward: float = GOOD_MIN_REWARD
) -> list[EpisodeRecord]:
    """Episodes at or above the given reward percentile and strictly above `min_reward`."""
    eps = list(episodes.episodes if isinstance(episodes, ReplayBuffer) else episodes)
    if not eps:
        return []
    rewards = np.array([e.total_reward for e in eps])
    cut = np.percentile(rewards, quantile)
    return [e for e, r in zip(eps, rewards) if r >= cut and r > min_reward]


def run_episode(world, policy, seed: int = 0, source: str = "exploration", max_steps: int = MAX_EPISODE_LEN):
    """Roll a policy(world, obs) -> Action closed-loop until termination."""
    steps = []
    obs = render_observation(world)
    while not is_terminated(world)[0] and len(steps) < max_steps:
        act = policy(world, obs)
        world, ev, r = step(world, act)
        steps.append(StepRecord(obs, act.as_tuple(), r, ev, world.ego.speed))
        obs = render_observation(world, ev)
    return EpisodeRecord(steps, seed, source)


def episode_seeds(seed: int, n: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(n)]


def ingest_expert(
    world_map="loop",
    n_agents: int = 8,
    episodes: int = 1,
    seed: int = 0,
    target_speed: float | None = None,
    max_steps: int = MAX_EPISODE_LEN,
) -> list[EpisodeRecord]:
    """Closed-loop expert episodes. `target_speed` overrides the ego's cruising speed."""
    m = resolve_map(world_map) if not hasattr(world_map, "spawn_points") else world_map
    out = []
    for s in episode_seeds(seed, episodes):
        w = reset(m, n_agents, s)
        if target_speed is not None:
            w.drivers[0].target_speed = float(target_speed)
        out.append(run_episode(w, lambda wd, _o: expert_policy(wd), s, "expert", max_steps))
    return out


# --- JSONL episode logs -----------------------------------------------------


def step_line(ep: int, t: int, rec: StepRecord, **extra) -> dict:
    line = {
        "ep": ep,
        "t": t,
        "action": [float(rec.action[0]), float(rec.action[1])],
        "reward": float(rec.reward),
        "events": {
            "offroad": rec.flags.offroad,
            "offlane": rec.flags.offlane,
            "collision": rec.flags.collision,
            "collision_with_vehicle": rec.flags.collision_with_vehicle,
        },
        "speed": float(rec.speed),
    }
    line.update(extra)
    return line


def write_episode_log(path, episodes, first_ep: int = 0, **extra) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for i, e in enumerate(episodes):
            for t, rec in enumerate(e.steps):
                f.write(json.dumps(step_line(first_ep + i, t, rec, seed=e.seed, **extra)) + "\n")


def read_episode_log(path) -> list[dict]:
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def replay_log(path, world_map=None, n_agents: int | None = None, source: str = "expert") -> list[EpisodeRecord]:
    """Rebuild full episodes (with observations) from a log by replaying its actions.

    The simulator is deterministic, so a seed plus the action list reproduces
    every observation. Lines must carry "seed"; "map" and "n_agents" are read
    from the log when not given.
    """
    lines = read_episode_log(path)
    by_ep: dict[int, list[dict]] = {}
    for ln in lines:
        by_ep.setdefault(ln["ep"], []).append(ln)
    out = []
    for ep in sorted(by_ep):
        rows = sorted(by_ep[ep], key=lambda r: r["t"])
        m = world_map if world_map is not None else rows[0].get("map", "loop")
        m = builtin_map(m) if isinstance(m, str) else m
        n = n_agents if n_agents is not None else rows[0].get("n_agents", 8)
        w = reset(m, n, rows[0]["seed"])
        it = iter(rows)
        out.append(run_episode(w, lambda _w, _o: Action(*next(it)["action"]), rows[0]["seed"], source, len(rows)))
    return out
