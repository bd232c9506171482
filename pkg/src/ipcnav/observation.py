"""Ego-centric semantic grid observations and ground-truth instance boxes."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ipcnav.world.maps import JUNCTION, LANE
from ipcnav.world.sim import EventFlags, VehicleState, WorldState

GRID = 64
CELL = 0.5
ANCHOR_ROW = 56
ANCHOR_COL = 32
N_CLASSES = 4
OFFROAD, OWN_LANE, OPPOSITE_LANE, VEHICLE = 0, 1, 2, 3


@dataclass
class InstanceBox:
    x1: float
    y1: float
    x2: float
    y2: float
    agent_id: int
    collision: int = 0

    @property
    def center(self) -> tuple[float, float]:
        """(row, col) center."""
        return (0.5 * (self.y1 + self.y2), 0.5 * (self.x1 + self.x2))


@dataclass
class Observation:
    grid: np.ndarray  # uint8 (GRID, GRID)
    boxes: list[InstanceBox] = field(default_factory=list)
    ego_speed: float = 0.0
    event_flags: EventFlags = field(default_factory=EventFlags)


def world_to_grid(point, ego_pose) -> np.ndarray:
    """World (x, y) -> continuous grid (row, col). `ego_pose` is (x, y, heading).

    Accepts a single point or an (N, 2) array.
    """
    ex, ey, h = ego_pose
    p = np.asarray(point, dtype=float)
    dx = p[..., 0] - ex
    dy = p[..., 1] - ey
    c, s = math.cos(h), math.sin(h)
    fwd = dx * c + dy * s
    right = -dx * s + dy * c
    return np.stack([ANCHOR_ROW - fwd / CELL, ANCHOR_COL + right / CELL], axis=-1)


def grid_to_world(grid_point, ego_pose) -> np.ndarray:
    ex, ey, h = ego_pose
    g = np.asarray(grid_point, dtype=float)
    fwd = (ANCHOR_ROW - g[..., 0]) * CELL
    right = (g[..., 1] - ANCHOR_COL) * CELL
    c, s = math.cos(h), math.sin(h)
    return np.stack([ex + fwd * c - right * s, ey + fwd * s + right * c], axis=-1)


_rows, _cols = np.mgrid[0:GRID, 0:GRID]
_FWD = (ANCHOR_ROW - (_rows + 0.5)) * CELL  # ego-frame offsets of cell centers
_RIGHT = ((_cols + 0.5) - ANCHOR_COL) * CELL


def _road_layer(world: WorldState) -> np.ndarray:
    ego = world.ego
    c, s = math.cos(ego.heading), math.sin(ego.heading)
    wx = ego.x + _FWD * c - _RIGHT * s
    wy = ego.y + _FWD * s + _RIGHT * c
    r = world.map.raster
    ix = np.rint((wx - r.origin[0]) / r.res).astype(np.int64)
    iy = np.rint((wy - r.origin[1]) / r.res).astype(np.int64)
    ny, nx = r.code.shape
    valid = (ix >= 0) & (ix < nx) & (iy >= 0) & (iy < ny)
    ix = np.clip(ix, 0, nx - 1)
    iy = np.clip(iy, 0, ny - 1)
    code = np.where(valid, r.code[iy, ix], 0)
    tan = r.tangent[iy, ix]
    own = tan[..., 0] * c + tan[..., 1] * s >= 0
    grid = np.zeros((GRID, GRID), dtype=np.uint8)
    grid[code == JUNCTION] = OWN_LANE
    lane = code == LANE
    grid[lane & own] = OWN_LANE
    grid[lane & ~own] = OPPOSITE_LANE
    return grid


def _vehicle_cells(v: VehicleState, ego_pose) -> tuple[np.ndarray, np.ndarray] | None:
    corners = world_to_grid(v.corners(), ego_pose)
    r0 = max(int(math.floor(corners[:, 0].min())), 0)
    r1 = min(int(math.ceil(corners[:, 0].max())), GRID)
    c0 = max(int(math.floor(corners[:, 1].min())), 0)
    c1 = min(int(math.ceil(corners[:, 1].max())), GRID)
    if r0 >= r1 or c0 >= c1:
        return None
    rr, cc = np.mgrid[r0:r1, c0:c1]
    centers = grid_to_world(np.stack([rr + 0.5, cc + 0.5], axis=-1), ego_pose)
    ch, sh = math.cos(v.heading), math.sin(v.heading)
    dx = centers[..., 0] - v.x
    dy = centers[..., 1] - v.y
    inside = (np.abs(dx * ch + dy * sh) <= v.half_length) & (np.abs(-dx * sh + dy * ch) <= v.half_width)
    if not inside.any():
        return None
    return rr[inside], cc[inside]


def render_observation(world: WorldState, event_flags: EventFlags | None = None) -> Observation:
    """Rasterize the ego-centric grid, then the other vehicles and their boxes.

    `event_flags` are the flags of the step that produced this state (labels for
    collision supervision); a fresh episode has none.
    """
    flags = event_flags if event_flags is not None else EventFlags()
    ego = world.ego
    pose = (ego.x, ego.y, ego.heading)
    grid = _road_layer(world)
    boxes = []
    reach = (GRID * CELL) * 1.5
    colliding = set(flags.colliding_agent_ids)
    for v in world.vehicles[1:]:
        if abs(v.x - ego.x) > reach or abs(v.y - ego.y) > reach:
            continue
        cells = _vehicle_cells(v, pose)
        if cells is None:
            continue
        rr, cc = cells
        grid[rr, cc] = VEHICLE
        boxes.append(
            InstanceBox(
                float(cc.min()), float(rr.min()), float(cc.max() + 1), float(rr.max() + 1),
                v.agent_id, int(v.agent_id in colliding),
            )
        )
    return Observation(grid, boxes, float(ego.speed), flags)


def write_pgm(grid: np.ndarray, path) -> None:
    """Binary PGM (P5) with maxval 3, for eyeballing grids."""
    g = np.asarray(grid, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{g.shape[1]} {g.shape[0]}\n3\n".encode("ascii"))
        f.write(g.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4], dtype=np.uint8, count=w * h).reshape(h, w).copy()
