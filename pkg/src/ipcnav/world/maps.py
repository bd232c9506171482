"""Road maps: lane segments, intersection zones, spawn points, and the JSON map format."""

from __future__ import annotations

import functools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ipcnav.world.geometry import points_in_convex_polygon, resample_polyline, segment_distances

DRIVABLE_TOL = 0.05
RASTER_RES = 0.25
# raster codes
OFFROAD, JUNCTION, LANE = 0, 1, 2


class MapError(ValueError):
    pass


@dataclass
class LaneSegment:
    points: np.ndarray
    width: float
    direction: str = "forward"

    def __post_init__(self) -> None:
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 2)
        if self.points.shape[0] < 2:
            raise MapError("lane segment needs at least 2 points")
        if not self.width > 0:
            raise MapError("lane width must be positive")
        if self.direction not in ("forward", "reverse"):
            raise MapError(f"bad lane direction {self.direction!r}")

    def travel_points(self) -> np.ndarray:
        return self.points if self.direction == "forward" else self.points[::-1]


@dataclass(frozen=True)
class SpawnPoint:
    x: float
    y: float
    heading: float


@dataclass
class DirectedLane:
    segment: int
    points: np.ndarray  # resampled at ~1 m in travel order
    successors: list[int] = field(default_factory=list)

    @property
    def start_dir(self) -> np.ndarray:
        d = self.points[1] - self.points[0]
        return d / np.linalg.norm(d)

    @property
    def end_dir(self) -> np.ndarray:
        d = self.points[-1] - self.points[-2]
        return d / np.linalg.norm(d)


class WorldMap:
    """Static road layout with drivable-area queries.

    The drivable area is the union of every lane strip (points within
    width/2 of the lane polyline) and every intersection zone.
    """

    def __init__(
        self,
        lane_segments: list[LaneSegment],
        intersection_zones: list[np.ndarray],
        spawn_points: list[SpawnPoint],
        name: str = "custom",
    ) -> None:
        if not lane_segments:
            raise MapError("map needs at least one lane segment")
        self.lane_segments = lane_segments
        self.intersection_zones = [np.asarray(z, dtype=float).reshape(-1, 2) for z in intersection_zones]
        self.spawn_points = list(spawn_points)
        self.name = name

        a, b, hw, tan, seg_idx = [], [], [], [], []
        for i, lane in enumerate(lane_segments):
            p = lane.points
            d = np.diff(p, axis=0)
            n = np.linalg.norm(d, axis=1)
            ok = n > 1e-9
            t = d[ok] / n[ok, None]
            if lane.direction == "reverse":
                t = -t
            a.append(p[:-1][ok])
            b.append(p[1:][ok])
            tan.append(t)
            hw.append(np.full(int(ok.sum()), lane.width / 2.0))
            seg_idx.append(np.full(int(ok.sum()), i))
        self._a = np.concatenate(a)
        self._b = np.concatenate(b)
        self._hw = np.concatenate(hw)
        self._tan = np.concatenate(tan)
        self._seg = np.concatenate(seg_idx)
        if self.intersection_zones:
            ea, eb = [], []
            for z in self.intersection_zones:
                ea.append(z)
                eb.append(np.roll(z, -1, axis=0))
            self._zone_a = np.concatenate(ea)
            self._zone_b = np.concatenate(eb)

        self.lanes = self._build_directed_lanes()
        for sp in self.spawn_points:
            if not self.is_drivable(np.array([[sp.x, sp.y]]))[0]:
                raise MapError(f"spawn point ({sp.x}, {sp.y}) is not on drivable area")
        self._raster = None

    # --- area queries -------------------------------------------------
    def offroad_depth(self, points: np.ndarray) -> np.ndarray:
        """How far (m) each point lies outside the drivable area; <= 0 inside a lane."""
        points = np.asarray(points, dtype=float).reshape(-1, 2)
        depth = (segment_distances(points, self._a, self._b) - self._hw[None]).min(axis=1)
        if self.intersection_zones:
            inside = self.in_intersection(points)
            edge = segment_distances(points, self._zone_a, self._zone_b).min(axis=1)
            depth = np.where(inside, np.minimum(depth, 0.0), np.minimum(depth, edge))
        return depth

    def is_drivable(self, points: np.ndarray) -> np.ndarray:
        return self.offroad_depth(points) <= DRIVABLE_TOL

    def in_intersection(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float).reshape(-1, 2)
        out = np.zeros(points.shape[0], dtype=bool)
        for z in self.intersection_zones:
            out |= points_in_convex_polygon(points, z)
        return out

    def lane_tangent(self, point) -> np.ndarray | None:
        """Travel direction of the lane containing `point` (nearest centerline wins)."""
        p = np.asarray(point, dtype=float).reshape(1, 2)
        d = segment_distances(p, self._a, self._b)[0]
        inside = d <= self._hw + DRIVABLE_TOL
        if not np.any(inside):
            return None
        k = int(np.argmin(np.where(inside, d, np.inf)))
        return self._tan[k]

    # --- lane graph ---------------------------------------------------
    def _build_directed_lanes(self) -> list[DirectedLane]:
        lanes = []
        for i, seg in enumerate(self.lane_segments):
            lanes.append(DirectedLane(i, resample_polyline(seg.travel_points(), 1.0)))
        for lane in lanes:
            end = lane.points[-1]
            for j, other in enumerate(lanes):
                gap = float(np.linalg.norm(other.points[0] - end))
                if gap > 20.0:
                    continue
                if float(lane.end_dir @ other.start_dir) <= -0.5:
                    continue  # no U-turns
                if gap > 0.5 and not self._same_junction(end, other.points[0]):
                    continue
                lane.successors.append(j)
        return lanes

    def _same_junction(self, p: np.ndarray, q: np.ndarray) -> bool:
        for z in self.intersection_zones:
            inside = points_in_convex_polygon(np.stack([p, q]), _inflate(z, 1.0))
            if inside.all():
                return True
        return False

    def nearest_lane(self, x: float, y: float, heading: float) -> tuple[int, int]:
        """(lane index, point index) of the closest lane point roughly aligned with `heading`."""
        hv = np.array([math.cos(heading), math.sin(heading)])
        best = (0, 0)
        best_d = math.inf
        for li, lane in enumerate(self.lanes):
            d = np.hypot(lane.points[:, 0] - x, lane.points[:, 1] - y)
            tang = np.gradient(lane.points, axis=0)
            align = tang @ hv
            d = np.where(align > 0, d, d + 50.0)
            k = int(np.argmin(d))
            if d[k] < best_d:
                best_d = float(d[k])
                best = (li, k)
        return best

    # --- raster for fast rendering -----------------------------------
    @property
    def raster(self):
        if self._raster is None:
            self._raster = _build_raster(self)
        return self._raster

    def __getstate__(self):
        d = self.__dict__.copy()
        d["_raster"] = None  # rebuilt lazily
        return d

    # --- serialization ------------------------------------------------
    def to_json(self) -> dict:
        return {
            "lane_segments": [
                {"points": seg.points.tolist(), "width": seg.width, "direction": seg.direction}
                for seg in self.lane_segments
            ],
            "intersections": [z.tolist() for z in self.intersection_zones],
            "spawn_points": [{"pos": [sp.x, sp.y], "heading": sp.heading} for sp in self.spawn_points],
        }


def _inflate(poly: np.ndarray, margin: float) -> np.ndarray:
    c = poly.mean(axis=0)
    d = poly - c
    n = np.linalg.norm(d, axis=1, keepdims=True)
    return c + d * (1.0 + margin / np.maximum(n, 1e-9))


@dataclass
class Raster:
    origin: np.ndarray  # world coords of cell (0, 0) center
    res: float
    code: np.ndarray  # uint8 (ny, nx)
    tangent: np.ndarray  # float32 (ny, nx, 2)


def _build_raster(m: WorldMap) -> Raster:
    pts = np.concatenate([m._a, m._b] + m.intersection_zones)
    # origin snapped to the lattice so quarter-turn rotated maps sample identically
    lo = np.floor((pts.min(axis=0) - 12.0) / RASTER_RES) * RASTER_RES
    hi = pts.max(axis=0) + 12.0
    nx = int(math.ceil((hi[0] - lo[0]) / RASTER_RES))
    ny = int(math.ceil((hi[1] - lo[1]) / RASTER_RES))
    xs = lo[0] + RASTER_RES * np.arange(nx)
    ys = lo[1] + RASTER_RES * np.arange(ny)
    gx, gy = np.meshgrid(xs, ys)
    flat = np.stack([gx.ravel(), gy.ravel()], axis=1)
    code = np.zeros(flat.shape[0], dtype=np.uint8)
    tangent = np.zeros((flat.shape[0], 2), dtype=np.float32)
    chunk = 4096
    for s in range(0, flat.shape[0], chunk):
        p = flat[s : s + chunk]
        d = segment_distances(p, m._a, m._b) - m._hw[None]
        k = np.argmin(d, axis=1)
        on_lane = d[np.arange(len(p)), k] <= DRIVABLE_TOL
        code[s : s + chunk][on_lane] = LANE
        tangent[s : s + chunk][on_lane] = m._tan[k[on_lane]]
    if m.intersection_zones:
        code[m.in_intersection(flat)] = JUNCTION
    return Raster(lo.copy(), RASTER_RES, code.reshape(ny, nx), tangent.reshape(ny, nx, 2))


# --- map file format ----------------------------------------------------


def map_from_json(doc: dict, name: str = "custom") -> WorldMap:
    try:
        lanes = [
            LaneSegment(np.asarray(s["points"], dtype=float), float(s["width"]), s.get("direction", "forward"))
            for s in doc["lane_segments"]
        ]
        zones = [np.asarray(z, dtype=float) for z in doc.get("intersections", [])]
        spawns = [SpawnPoint(float(s["pos"][0]), float(s["pos"][1]), float(s["heading"])) for s in doc["spawn_points"]]
    except (KeyError, TypeError, IndexError) as exc:
        raise MapError(f"malformed map document: {exc}") from exc
    return WorldMap(lanes, zones, spawns, name=name)


def load_map(path: str | Path) -> WorldMap:
    path = Path(path)
    with open(path, encoding="utf-8") as f:
        return map_from_json(json.load(f), name=path.stem)


def save_map(m: WorldMap, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(m.to_json(), f)


# --- built-in generators --------------------------------------------------

LANE_WIDTH = 3.5


def rounded_rect(a: float, b: float, r: float, n_arc: int = 16) -> np.ndarray:
    """Closed polyline of a rounded rectangle (straight half-lengths a, b; corner radius r).

    Points follow increasing polar angle, i.e. clockwise on screen in the y-down frame.
    """
    pts = []
    for cx, cy, a0 in ((a, b, 0.0), (-a, b, 0.5 * math.pi), (-a, -b, math.pi), (a, -b, 1.5 * math.pi)):
        for k in range(n_arc + 1):
            t = a0 + 0.5 * math.pi * k / n_arc
            pts.append((cx + r * math.cos(t), cy + r * math.sin(t)))
    pts.append(pts[0])
    return np.array(pts)


def spawn_points_along(lanes: list[LaneSegment], zones: list[np.ndarray], spacing: float, margin: float = 0.0):
    spawns = []
    for lane in lanes:
        pts = resample_polyline(lane.travel_points(), spacing)
        closed = np.linalg.norm(pts[0] - pts[-1]) < 1e-6
        if closed:
            pts = pts[:-1]
        for k in range(len(pts)):
            nxt = pts[k + 1] if k + 1 < len(pts) else (pts[0] if closed else None)
            if nxt is None:
                continue
            p = pts[k]
            if zones and any(points_in_convex_polygon(p[None], _inflate(z, margin))[0] for z in zones):
                continue
            h = math.atan2(nxt[1] - p[1], nxt[0] - p[0])
            spawns.append(SpawnPoint(float(p[0]), float(p[1]), h))
    return spawns


def loop_map(half_x: float = 45.0, half_y: float = 25.0, radius: float = 15.0, spacing: float = 12.0) -> WorldMap:
    """Single rounded-rectangle circuit with one lane per direction."""
    off = LANE_WIDTH / 2.0
    inner = LaneSegment(rounded_rect(half_x, half_y, radius - off), LANE_WIDTH, "forward")
    outer = LaneSegment(rounded_rect(half_x, half_y, radius + off), LANE_WIDTH, "reverse")
    lanes = [inner, outer]
    return WorldMap(lanes, [], spawn_points_along(lanes, [], spacing), name="loop")


def grid_map(block: float = 50.0, zone_half: float = 10.0, spacing: float = 12.0) -> WorldMap:
    """2x2 block grid: three roads each way, nine junctions (4-way in the middle)."""
    off = LANE_WIDTH / 2.0
    coords = (-block, 0.0, block)
    zones = [
        np.array([[cx - zone_half, cy - zone_half], [cx + zone_half, cy - zone_half],
                  [cx + zone_half, cy + zone_half], [cx - zone_half, cy + zone_half]])
        for cy in coords
        for cx in coords
    ]
    lanes = []
    for c in coords:
        for lo, hi in zip(coords[:-1], coords[1:]):
            s, e = lo + zone_half, hi - zone_half
            # horizontal road at y=c: eastbound keeps right (+y), westbound at -y
            lanes.append(LaneSegment(np.array([[s, c + off], [e, c + off]]), LANE_WIDTH, "forward"))
            lanes.append(LaneSegment(np.array([[s, c - off], [e, c - off]]), LANE_WIDTH, "reverse"))
            # vertical road at x=c: southbound (+y) keeps right at -x
            lanes.append(LaneSegment(np.array([[c - off, s], [c - off, e]]), LANE_WIDTH, "forward"))
            lanes.append(LaneSegment(np.array([[c + off, s], [c + off, e]]), LANE_WIDTH, "reverse"))
    return WorldMap(lanes, zones, spawn_points_along(lanes, zones, spacing, margin=1.0), name="grid")


def crossing_map(arm: float = 60.0, zone_half: float = 10.0) -> WorldMap:
    """A single 4-way junction with four arms, used for the crossing-ambush scenario."""
    off = LANE_WIDTH / 2.0
    zone = np.array([[-zone_half, -zone_half], [zone_half, -zone_half], [zone_half, zone_half], [-zone_half, zone_half]])
    lanes = []
    for lo, hi in ((-arm, -zone_half), (zone_half, arm)):
        lanes.append(LaneSegment(np.array([[lo, off], [hi, off]]), LANE_WIDTH, "forward"))
        lanes.append(LaneSegment(np.array([[lo, -off], [hi, -off]]), LANE_WIDTH, "reverse"))
        lanes.append(LaneSegment(np.array([[-off, lo], [-off, hi]]), LANE_WIDTH, "forward"))
        lanes.append(LaneSegment(np.array([[off, lo], [off, hi]]), LANE_WIDTH, "reverse"))
    return WorldMap(lanes, [zone], spawn_points_along(lanes, [zone], 10.0, margin=1.0), name="crossing")


@functools.lru_cache(maxsize=None)
def builtin_map(name: str) -> WorldMap:
    if name == "loop":
        return loop_map()
    if name == "grid":
        return grid_map()
    if name == "crossing":
        return crossing_map()
    raise MapError(f"unknown built-in map {name!r}")


def resolve_map(spec: str) -> WorldMap:
    """Built-in map name or path to a JSON map file."""
    if spec in ("loop", "grid", "crossing"):
        return builtin_map(spec)
    return load_map(spec)
