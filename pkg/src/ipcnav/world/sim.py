"""Deterministic 2D multi-agent driving world.

Agent 0 is the ego vehicle; every other agent runs :func:`scripted_policy`.
All randomness flows through the generator stored on the :class:`WorldState`,
so (map, seed, ego actions) fully determines a trajectory.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ipcnav.world.geometry import points_in_rect, rect_corners, rects_overlap, resample_polyline, wrap_angle
from ipcnav.world.maps import WorldMap

DT = 0.1
V_MAX = 15.0
A_MAX = 4.0
K_STEER = 0.2
HALF_LENGTH = 2.2
HALF_WIDTH = 0.9
MAX_STEPS = 1000
MAX_COLLISIONS = 20
MAX_STREAK = 30
STUCK_SPEED = 0.1
CURB_DEPTH = 1.0  # corners this far past the drivable edge hit the roadside barrier
TARGET_SPEED_RANGE = (4.0, 10.0)
SPEED_NOISE = 0.5
EGO_INITIAL_SPEED = 5.0
ROUTE_SPACING = 1.0


class EpisodeTerminatedError(RuntimeError):
    """Raised when stepping a world whose episode already ended."""


@dataclass(frozen=True)
class Action:
    steer: float = 0.0
    throttle: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "steer", min(1.0, max(-1.0, float(self.steer))))
        object.__setattr__(self, "throttle", min(1.0, max(-1.0, float(self.throttle))))

    def as_tuple(self) -> tuple[float, float]:
        return (self.steer, self.throttle)


@dataclass
class VehicleState:
    x: float
    y: float
    heading: float
    speed: float
    agent_id: int
    half_length: float = HALF_LENGTH
    half_width: float = HALF_WIDTH

    def corners(self) -> np.ndarray:
        return rect_corners(self.x, self.y, self.heading, self.half_length, self.half_width)

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass
class EventFlags:
    offroad: int = 0
    offlane: int = 0
    collision: int = 0
    collision_with_vehicle: int = 0
    colliding_agent_ids: list[int] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {"offroad": self.offroad, "offlane": self.offlane, "collision": self.collision}


@dataclass
class Driver:
    """Lane-following state of one agent: a dense route polyline and progress along it."""

    target_speed: float
    route: np.ndarray
    progress: int = 0
    lane: int = 0
    yields_to_ego: bool = True

    def copy(self) -> "Driver":
        # route arrays are never mutated in place, so sharing them is safe
        return Driver(self.target_speed, self.route, self.progress, self.lane, self.yields_to_ego)


@dataclass
class WorldState:
    map: WorldMap
    vehicles: list[VehicleState]
    drivers: list[Driver]
    rng: np.random.Generator
    step_index: int = 0
    collision_count: int = 0
    stuck_or_offroad_streak: int = 0
    seed: int = 0

    @property
    def ego(self) -> VehicleState:
        return self.vehicles[0]

    def clone(self) -> "WorldState":
        rng = np.random.Generator(np.random.PCG64())
        rng.bit_generator.state = self.rng.bit_generator.state
        return WorldState(
            self.map,
            [VehicleState(v.x, v.y, v.heading, v.speed, v.agent_id, v.half_length, v.half_width) for v in self.vehicles],
            [d.copy() for d in self.drivers],
            rng,
            self.step_index,
            self.collision_count,
            self.stuck_or_offroad_streak,
            self.seed,
        )

    def __getstate__(self):
        d = self.__dict__.copy()
        d["rng"] = self.rng.bit_generator.state
        return d

    def __setstate__(self, d):
        state = d.pop("rng")
        rng = np.random.Generator(np.random.PCG64())
        rng.bit_generator.state = state
        d["rng"] = rng
        self.__dict__.update(d)


# --- kinematics -----------------------------------------------------------


def apply_kinematics(v: VehicleState, a: Action, dt: float = DT) -> VehicleState:
    if not dt > 0:
        raise ValueError("dt must be positive")
    speed = min(V_MAX, max(0.0, v.speed + A_MAX * a.throttle * dt))
    heading = v.heading + K_STEER * a.steer * speed * dt
    return VehicleState(
        v.x + speed * dt * math.cos(heading),
        v.y + speed * dt * math.sin(heading),
        heading,
        speed,
        v.agent_id,
        v.half_length,
        v.half_width,
    )


# --- routes ---------------------------------------------------------------


def _connector(p0: np.ndarray, d0: np.ndarray, p1: np.ndarray, d1: np.ndarray) -> np.ndarray:
    """Quadratic Bezier from p0 (heading d0) to p1 (heading d1)."""
    cross = d0[0] * d1[1] - d0[1] * d1[0]
    if abs(cross) < 1e-6:
        ctrl = 0.5 * (p0 + p1)
    else:
        diff = p1 - p0
        s = (diff[0] * d1[1] - diff[1] * d1[0]) / cross
        ctrl = p0 + s * d0
    t = np.linspace(0.0, 1.0, 12)[:, None]
    return (1 - t) ** 2 * p0 + 2 * (1 - t) * t * ctrl + t**2 * p1


def _extend_route(world: WorldState, drv: Driver) -> None:
    lanes = world.map.lanes
    cur = lanes[drv.lane]
    route = drv.route
    if cur.successors:
        nxt = cur.successors[int(world.rng.integers(len(cur.successors)))]
        nl = lanes[nxt]
        if np.linalg.norm(nl.points[0] - route[-1]) > 0.5:
            bridge = _connector(route[-1], cur.end_dir, nl.points[0], nl.start_dir)
            extra = np.vstack([resample_polyline(bridge, ROUTE_SPACING)[1:], nl.points[1:]])
        else:
            extra = nl.points[1:]
        drv.lane = nxt
    else:
        # dead end: keep going straight
        d = route[-1] - route[-2]
        d = d / np.linalg.norm(d)
        extra = route[-1] + np.arange(1, 101)[:, None] * ROUTE_SPACING * d
    if drv.progress > 200:
        cut = drv.progress - 100
        route = route[cut:]
        drv.progress -= cut
    drv.route = np.vstack([route, extra])


def _new_driver(world_map: WorldMap, v: VehicleState, target_speed: float) -> Driver:
    lane, k = world_map.nearest_lane(v.x, v.y, v.heading)
    pts = world_map.lanes[lane].points[k:]
    return Driver(target_speed, pts.copy(), 0, lane)


def _localize(world: WorldState, agent_id: int) -> tuple[Driver, int]:
    """Project the agent onto its route; returns (driver, nearest route index)."""
    v = world.vehicles[agent_id]
    drv = world.drivers[agent_id]
    for attempt in range(2):
        while len(drv.route) - drv.progress < 60:
            _extend_route(world, drv)
        win = drv.route[drv.progress : drv.progress + 25]
        d2 = (win[:, 0] - v.x) ** 2 + (win[:, 1] - v.y) ** 2
        k = int(np.argmin(d2))
        if d2[k] <= 25.0 or attempt == 1:
            break
        # far off the route (ego under outside control): re-anchor on the nearest lane
        fresh = _new_driver(world.map, v, drv.target_speed)
        fresh.yields_to_ego = drv.yields_to_ego
        world.drivers[agent_id] = drv = fresh
    drv.progress += k
    return drv, drv.progress


def _lookahead(speed: float) -> float:
    return max(4.0, 2.0 + 0.5 * speed)


def _pure_pursuit_steer(v: VehicleState, target: np.ndarray) -> float:
    dx, dy = target[0] - v.x, target[1] - v.y
    dist = math.hypot(dx, dy)
    if dist < 1e-6:
        return 0.0
    alpha = wrap_angle(math.atan2(dy, dx) - v.heading)
    curvature = 2.0 * math.sin(alpha) / dist
    return max(-1.0, min(1.0, curvature / K_STEER))


def corridor_blocked(world: WorldState, agent_id: int, others: list[int] | None = None) -> bool:
    """True if any vehicle in `others` sits in the agent's forward corridor.

    The corridor reaches from the front bumper for the stopping distance plus
    2 m, both along the agent's route and straight along its heading, and is
    the agent's width plus 0.3 m each side.
    """
    v = world.vehicles[agent_id]
    drv, k = _localize(world, agent_id)
    length = v.speed**2 / (2.0 * A_MAX) + 2.0
    path = drv.route[k : k + int(math.ceil(v.half_length + length)) + 2]
    s = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(path, axis=0).T))])
    path = path[(s >= v.half_length) & (s <= v.half_length + length)]
    bumper = [v.x + v.half_length * math.cos(v.heading), v.y + v.half_length * math.sin(v.heading)]
    samples = np.vstack([[bumper], path])
    if others is None:
        others = range(len(world.vehicles))
    pad = v.half_width + 0.3
    c, sn = math.cos(v.heading), math.sin(v.heading)
    mid = v.half_length + 0.5 * length
    straight = rect_corners(v.x + mid * c, v.y + mid * sn, v.heading, 0.5 * length, pad)
    for j in others:
        if j == agent_id:
            continue
        o = world.vehicles[j]
        if abs(o.x - v.x) > length + 10.0 or abs(o.y - v.y) > length + 10.0:
            continue
        if np.any(points_in_rect(samples, o.x, o.y, o.heading, o.half_length + pad, o.half_width + pad)):
            return True
        if rects_overlap(straight, o.corners()):
            return True
    return False


def _route_pose(route: np.ndarray, k: int, dist: float) -> tuple[float, float, float]:
    j = min(k + int(round(dist / ROUTE_SPACING)), len(route) - 2)
    d = route[j + 1] - route[j]
    return float(route[j, 0]), float(route[j, 1]), math.atan2(d[1], d[0])


def conflict_ahead(world: WorldState, agent_id: int, others: list[int] | None = None, *, ego_on_route: bool = False) -> bool:
    """Short-horizon conflict prediction at 0.5, 1.0 and 1.5 s.

    The agent is advanced along its route at max(speed, 2 m/s); other vehicles
    move straight along their heading at their current speed (the ego, when
    `ego_on_route`, along its own route).
    """
    v = world.vehicles[agent_id]
    drv, k = _localize(world, agent_id)
    own_speed = max(v.speed, 2.0)
    if others is None:
        others = range(len(world.vehicles))
    near = [world.vehicles[j] for j in others if j != agent_id and abs(world.vehicles[j].x - v.x) < 25.0 and abs(world.vehicles[j].y - v.y) < 25.0]
    if not near:
        return False
    for t in (0.5, 1.0, 1.5):
        x, y, h = _route_pose(drv.route, k, own_speed * t)
        mine = rect_corners(x, y, h, v.half_length + 0.3, v.half_width + 0.3)
        for o in near:
            if ego_on_route and o.agent_id == 0:
                continue
            ox = o.x + o.speed * t * math.cos(o.heading)
            oy = o.y + o.speed * t * math.sin(o.heading)
            if rects_overlap(mine, rect_corners(ox, oy, o.heading, o.half_length, o.half_width)):
                return True
    return False


def _follow_route(world: WorldState, agent_id: int) -> Action:
    """Pure-pursuit steering plus noisy proportional speed control (consumes world rng)."""
    v = world.vehicles[agent_id]
    drv, k = _localize(world, agent_id)
    ahead = int(round(_lookahead(v.speed) / ROUTE_SPACING))
    target = drv.route[min(k + ahead, len(drv.route) - 1)]
    steer = _pure_pursuit_steer(v, target)
    goal = drv.target_speed + SPEED_NOISE * float(world.rng.standard_normal())
    throttle = max(-1.0, min(1.0, 0.5 * (goal - v.speed)))
    return Action(steer, throttle)


def scripted_policy(world: WorldState, agent_id: int) -> Action:
    """Lane-following policy of non-ego agents; brakes for the ego in its corridor."""
    if agent_id == 0:
        raise ValueError("scripted_policy drives non-ego agents only")
    if not 0 < agent_id < len(world.vehicles):
        raise KeyError(f"unknown agent id {agent_id}")
    act = _follow_route(world, agent_id)
    if world.drivers[agent_id].yields_to_ego and (
        corridor_blocked(world, agent_id, [0]) or conflict_ahead(world, agent_id, [0])
    ):
        return Action(act.steer, -1.0)
    return act


def _in_junction_conflict(world: WorldState) -> bool:
    # crossing traffic only matters near junctions; elsewhere the corridor suffices
    ego = world.ego
    if not world.map.intersection_zones:
        return False
    probe = np.array([[ego.x, ego.y], [ego.x + 12.0 * math.cos(ego.heading), ego.y + 12.0 * math.sin(ego.heading)]])
    if not world.map.in_intersection(probe).any():
        return False
    return conflict_ahead(world, 0)


def expert_policy(world: WorldState) -> Action:
    """Ego lane following with a full-brake override for anything in the corridor."""
    act = _follow_route(world, 0)
    if corridor_blocked(world, 0) or _in_junction_conflict(world):
        return Action(act.steer, -1.0)
    return act


# --- events, reward, termination -------------------------------------------


def detect_events(world: WorldState) -> EventFlags:
    ego = world.ego
    m = world.map
    corners = ego.corners()
    center = ego.position[None]
    depth = m.offroad_depth(np.vstack([center, corners]))
    offroad = int(depth[0] > 0.05)
    offlane = 0
    if not offroad and not m.in_intersection(center)[0]:
        tan = m.lane_tangent(center[0])
        if tan is not None and tan[0] * math.cos(ego.heading) + tan[1] * math.sin(ego.heading) < 0:
            offlane = 1
    hit = []
    for v in world.vehicles[1:]:
        if abs(v.x - ego.x) > 8.0 or abs(v.y - ego.y) > 8.0:
            continue
        if rects_overlap(corners, v.corners()):
            hit.append(v.agent_id)
    barrier = bool(np.any(depth[1:] > CURB_DEPTH))
    return EventFlags(
        offroad=offroad,
        offlane=offlane,
        collision=int(bool(hit) or barrier),
        collision_with_vehicle=int(bool(hit)),
        colliding_agent_ids=hit,
    )


def compute_reward(speed: float, ev: EventFlags) -> float:
    return speed / 15.0 - (ev.offroad + 2.0 * ev.collision + 0.2 * ev.offlane)


def is_terminated(world: WorldState) -> tuple[bool, str | None]:
    if world.collision_count >= MAX_COLLISIONS:
        return True, "collisions"
    if world.stuck_or_offroad_streak >= MAX_STREAK:
        return True, "stuck_or_offroad"
    if world.step_index >= MAX_STEPS:
        return True, "step_cap"
    return False, None


def step(world: WorldState, ego_action: Action) -> tuple[WorldState, EventFlags, float]:
    """Advance every agent by one tick; mutates and returns `world`."""
    if is_terminated(world)[0]:
        raise EpisodeTerminatedError("cannot step a terminated episode; call reset()")
    actions = [ego_action] + [scripted_policy(world, i) for i in range(1, len(world.vehicles))]
    world.vehicles = [apply_kinematics(v, a) for v, a in zip(world.vehicles, actions)]
    ev = detect_events(world)
    reward = compute_reward(world.ego.speed, ev)
    world.step_index += 1
    world.collision_count += ev.collision
    if ev.offroad or world.ego.speed < STUCK_SPEED:
        world.stuck_or_offroad_streak += 1
    else:
        world.stuck_or_offroad_streak = 0
    return world, ev, reward


def reset(world_map: WorldMap, n_agents: int, seed: int) -> WorldState:
    if n_agents < 1:
        raise ValueError("need at least the ego agent")
    if n_agents > len(world_map.spawn_points):
        raise ValueError(f"{n_agents} agents exceed the {len(world_map.spawn_points)} spawn points of map {world_map.name!r}")
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(world_map.spawn_points), size=n_agents, replace=False)
    vehicles, drivers = [], []
    for agent_id, idx in enumerate(picks):
        sp = world_map.spawn_points[int(idx)]
        target = float(rng.uniform(*TARGET_SPEED_RANGE))
        speed = EGO_INITIAL_SPEED if agent_id == 0 else target
        v = VehicleState(sp.x, sp.y, sp.heading, speed, agent_id)
        vehicles.append(v)
        drivers.append(_new_driver(world_map, v, target))
    return WorldState(world_map, vehicles, drivers, rng, seed=seed)


def place_vehicle(world: WorldState, v: VehicleState, target_speed: float, yields_to_ego: bool = True) -> None:
    """Insert or replace a vehicle (scenario construction helper)."""
    drv = _new_driver(world.map, v, target_speed)
    drv.yields_to_ego = yields_to_ego
    if v.agent_id < len(world.vehicles):
        world.vehicles[v.agent_id] = v
        world.drivers[v.agent_id] = drv
    elif v.agent_id == len(world.vehicles):
        world.vehicles.append(v)
        world.drivers.append(drv)
    else:
        raise ValueError("agent ids must be contiguous")
