import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ipcnav.observation import (
    ANCHOR_COL,
    ANCHOR_ROW,
    GRID,
    OFFROAD,
    VEHICLE,
    grid_to_world,
    read_pgm,
    render_observation,
    world_to_grid,
    write_pgm,
)
from ipcnav.world import EventFlags, VehicleState, builtin_map, detect_events, reset
from ipcnav.world.sim import place_vehicle


def _scene(others, ego=(-40.0, 1.75, 0.0, 5.0)):
    m = builtin_map("crossing")
    w = reset(m, 1, 0)
    place_vehicle(w, VehicleState(*ego, 0), 5.0)
    for i, (x, y, h) in enumerate(others, start=1):
        place_vehicle(w, VehicleState(x, y, h, 0.0, i), 0.0)
    return w


def test_vehicle_five_metres_ahead():
    w = _scene([(-35.0, 1.75, 0.0)])
    obs = render_observation(w)
    assert len(obs.boxes) == 1
    r, c = obs.boxes[0].center
    assert r == pytest.approx(46.0, abs=0.5)
    assert c == pytest.approx(32.0, abs=0.5)


def test_vehicle_forty_metres_ahead_excluded():
    w = _scene([(0.0, 1.75, 0.0)])
    obs = render_observation(w)
    assert obs.boxes == []
    assert not (obs.grid == VEHICLE).any()


def test_ego_not_rendered_as_vehicle():
    obs = render_observation(_scene([]))
    assert not (obs.grid == VEHICLE).any()
    assert obs.grid.shape == (GRID, GRID) and obs.grid.dtype == np.uint8
    assert obs.grid.max() <= 3


def test_point_left_of_ego():
    pose = (10.0, -3.0, 0.0)
    # left of an east-facing vehicle is north, i.e. -y in this frame
    rc = world_to_grid((10.0, -3.5), pose)
    assert rc == pytest.approx([ANCHOR_ROW, ANCHOR_COL - 1])
    assert world_to_grid((10.0, -3.0), pose) == pytest.approx([ANCHOR_ROW, ANCHOR_COL])


@given(
    st.floats(-100, 100), st.floats(-100, 100), st.floats(-math.pi, math.pi),
    st.floats(-200, 200), st.floats(-200, 200),
)
def test_transform_roundtrip(ex, ey, h, px, py):
    pose = (ex, ey, h)
    back = grid_to_world(world_to_grid((px, py), pose), pose)
    assert back == pytest.approx([px, py], abs=1e-8)


def test_rotation_equivariance():
    # turn the whole scene about the map center by a quarter turn; the grid must not change.
    # the ego sits 0.15 m off its lane center so no sample falls exactly on the divider
    m = builtin_map("crossing")
    base = [(-34.0, 1.75, 0.0), (-44.0, -1.75, math.pi)]

    def rotated(k):
        w = reset(m, 1, 0)
        ang = k * math.pi / 2
        c, s = math.cos(ang), math.sin(ang)
        place_vehicle(w, VehicleState(-40.0 * c - 1.6 * s, -40.0 * s + 1.6 * c, ang, 5.0, 0), 5.0)
        for i, (x, y, hh) in enumerate(base, start=1):
            place_vehicle(w, VehicleState(x * c - y * s, x * s + y * c, hh + ang, 0.0, i), 0.0)
        return render_observation(w)

    # the crossing map is symmetric under quarter turns about the origin
    g0 = rotated(0)
    for k in (1, 2, 3):
        gk = rotated(k)
        assert np.array_equal(g0.grid, gk.grid)
        assert [(b.x1, b.y1, b.x2, b.y2) for b in g0.boxes] == [(b.x1, b.y1, b.x2, b.y2) for b in gk.boxes]


def test_boxes_cover_vehicle_cells():
    w = reset(builtin_map("loop"), 24, 3)
    obs = render_observation(w)
    assert obs.boxes
    covered = np.zeros_like(obs.grid, dtype=bool)
    for b in obs.boxes:
        assert 0 <= b.x1 < b.x2 <= GRID and 0 <= b.y1 < b.y2 <= GRID
        covered[int(b.y1):int(b.y2), int(b.x1):int(b.x2)] = True
    assert covered[obs.grid == VEHICLE].all()


def test_collision_label_on_boxes():
    w = _scene([(-36.5, 1.75, 0.0), (-30.0, -1.75, math.pi)])
    ev = detect_events(w)
    assert ev.colliding_agent_ids == [1]
    obs = render_observation(w, ev)
    phi = {b.agent_id: b.collision for b in obs.boxes}
    assert phi == {1: 1, 2: 0}
    assert obs.event_flags.collision == 1


def test_no_flags_means_zero_labels():
    obs = render_observation(_scene([(-36.5, 1.75, 0.0)]))
    assert all(b.collision == 0 for b in obs.boxes)
    assert obs.event_flags == EventFlags()


def test_offroad_far_from_roads():
    obs = render_observation(_scene([], ego=(-40.0, 30.0, 0.0, 0.0)))
    assert (obs.grid == OFFROAD).mean() > 0.9


def test_own_and_opposite_lane_classes():
    obs = render_observation(_scene([]))
    # a cell 2 m right of the ego (same lane) and 2 m left (opposite lane)
    assert obs.grid[ANCHOR_ROW - 4, ANCHOR_COL + 1] == 1
    assert obs.grid[ANCHOR_ROW - 4, ANCHOR_COL - 7] == 2


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 1000))
def test_render_is_pure(seed):
    w = reset(builtin_map("loop"), 8, seed)
    a = render_observation(w)
    b = render_observation(w)
    assert np.array_equal(a.grid, b.grid) and a.boxes == b.boxes


def test_pgm_roundtrip(tmp_path):
    g = np.random.default_rng(0).integers(0, 4, (GRID, GRID)).astype(np.uint8)
    write_pgm(g, tmp_path / "g.pgm")
    assert np.array_equal(read_pgm(tmp_path / "g.pgm"), g)
