import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ipcnav.evaluation import (
    CARLA_REFERENCE,
    bootstrap_ci,
    confusion_matrix,
    driving_stats,
    event_accuracy,
    majority_rate,
    ordering_report,
    reward_curve,
    seg_metrics,
    write_csv,
)


def test_event_accuracy_example():
    t = event_accuracy({"collision": [[0.9], [0.2], [0.6]]}, {"collision": [[1], [0], [0]]})
    assert t.accuracy["collision"][0] == pytest.approx(200 / 3)
    assert t.counts["collision"][0] == 3


def test_event_accuracy_perfect_and_unlabeled():
    truth = np.array([[1, 0, np.nan], [0, 1, np.nan]])
    t = event_accuracy({"offroad": np.nan_to_num(truth)}, {"offroad": truth})
    assert t.accuracy["offroad"][:2].tolist() == [100.0, 100.0]
    assert np.isnan(t.accuracy["offroad"][2]) and t.counts["offroad"][2] == 0
    assert [r[:2] for r in t.rows()] == [("offroad", 1), ("offroad", 2)]


def test_majority_rate():
    assert majority_rate([0, 0, 0, 1]) == 75.0
    assert majority_rate([1, 1, np.nan]) == 100.0
    assert np.isnan(majority_rate([]))


def test_seg_metrics_two_class_example():
    gt = np.array([0, 0, 1, 1])
    pred = np.array([0, 1, 1, 1])
    m = seg_metrics(pred, gt, n_classes=2, vehicle_class=1)
    assert m.pixel_acc == pytest.approx(75.0)
    assert m.mean_iu == pytest.approx(100 * (1 / 2 + 2 / 3) / 2)
    assert m.mean_acc == pytest.approx(75.0)
    assert m.fw_iu == pytest.approx(100 * (0.5 * 0.5 + 0.5 * 2 / 3))


def test_seg_metrics_identical_and_no_vehicle():
    g = np.random.default_rng(0).integers(0, 3, (8, 8))
    m = seg_metrics(g, g)
    assert (m.pixel_acc, m.mean_acc, m.mean_iu, m.fw_iu) == (100.0, 100.0, 100.0, 100.0)
    assert m.vehicle_acc is None
    g[0, 0] = 3
    assert seg_metrics(g, g).vehicle_acc == 100.0


def test_seg_metrics_shape_mismatch():
    with pytest.raises(ValueError):
        seg_metrics(np.zeros((2, 2)), np.zeros((3, 2)))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_confusion_matrix_matches_loop(seed):
    rng = np.random.default_rng(seed)
    p, g = rng.integers(0, 4, 50), rng.integers(0, 4, 50)
    ref = np.zeros((4, 4), int)
    for a, b in zip(g, p):
        ref[a, b] += 1
    np.testing.assert_array_equal(confusion_matrix(p, g), ref)
    m = seg_metrics(p, g)
    # per-class IU never exceeds per-class accuracy
    assert 0.0 <= m.mean_iu <= m.mean_acc + 1e-9
    assert m.mean_acc <= 100.0 + 1e-9


def line(speed=10.0, coll=0, cwv=0, off=0):
    return {"speed": speed, "reward": 0.0, "events": {"collision": coll, "collision_with_vehicle": cwv, "offroad": off, "offlane": 0}}


def test_driving_stats_examples():
    lines = [line(coll=int(i < 12)) for i in range(1000)]
    d = driving_stats(lines)
    assert d.collision == pytest.approx(1.2)
    assert d.avg_speed == pytest.approx(10.0)
    assert d.steps == 1000
    with pytest.raises(ValueError):
        driving_stats(lines[:99])


def test_reward_curve_windows():
    r = np.arange(10.0)
    assert reward_curve(r, 5) == [(5, 2.0), (10, 7.0)]
    assert reward_curve(r, 20) == []


def test_bootstrap_ci_brackets_mean():
    v = np.random.default_rng(0).normal(3, 1, 40)
    lo, hi = bootstrap_ci(v, seed=1)
    assert lo < v.mean() < hi
    assert bootstrap_ci([2.5]) == (2.5, 2.5)
    assert bootstrap_ci(v, seed=1) == (lo, hi)


def test_write_csv_is_byte_stable(tmp_path):
    rows = [("ipc", 0.1 + 0.2, 3), ("x", 1.0, 0)]
    write_csv(tmp_path / "a.csv", ["v", "x", "n"], rows)
    write_csv(tmp_path / "b.csv", ["v", "x", "n"], rows)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    with open(tmp_path / "a.csv") as f:
        assert list(csv.reader(f))[1] == ["ipc", "0.300000", "3"]


def test_ordering_report_direction():
    rep = ordering_report({"ipc": (0.5, 0.4, 0.6, 3), "no-mep": (0.3, 0.2, 0.4, 3)})
    assert "matches the expected direction" in rep
    rep = ordering_report({"ipc": (0.1, 0.0, 0.2, 3), "no-mep": (0.3, 0.2, 0.4, 3)})
    assert "does not match" in rep


def test_reference_constants_are_frozen():
    assert CARLA_REFERENCE["collision_accuracy_by_horizon"][0] == 97.34
    assert CARLA_REFERENCE["avg_speed"] == 10.22
    assert CARLA_REFERENCE["collision_per_100"] == 1.23
