import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ipcnav.experience import EpisodeRecord, StepRecord, run_episode
from ipcnav.guidance import (
    N_BINS,
    action_to_bin,
    axis_bin,
    bin_center,
    bin_distribution,
    bin_rect,
    init_guidance,
    padded_history,
    sample_sequences,
    softmax,
    train_guidance,
)
from ipcnav.observation import render_observation
from ipcnav.predictor import PredictorConfig
from ipcnav.world import Action, builtin_map, reset

CFG = PredictorConfig(hidden_dim=16)


@pytest.fixture(scope="module")
def history():
    w = reset(builtin_map("loop"), 3, 0)
    return [render_observation(w)] * CFG.history_len


def test_bin_center_round_trip():
    for i in range(N_BINS):
        assert action_to_bin(*bin_center(i)) == i


def test_boundaries_go_to_lower_bin():
    assert axis_bin(-1.0) == 0
    assert axis_bin(-0.6) == 0
    assert axis_bin(-0.6 + 1e-12) == 1
    assert axis_bin(0.2) == 2
    assert axis_bin(1.0) == 4
    assert action_to_bin(0.0, 0.0) == 12


@settings(max_examples=300, deadline=None)
@given(st.floats(-1, 1), st.floats(-1, 1))
def test_every_action_lies_in_its_bin(s, t):
    s_lo, s_hi, t_lo, t_hi = bin_rect(action_to_bin(s, t))
    assert s_lo <= s <= s_hi and t_lo <= t <= t_hi


def test_untrained_distribution_is_uniform(history):
    p = bin_distribution(history, init_guidance(CFG, 0), CFG)
    np.testing.assert_allclose(p, 1 / 25, atol=1e-12)


def test_softmax_properties():
    z = np.random.default_rng(0).normal(size=25) * 4
    assert softmax(z).sum() == pytest.approx(1.0, abs=1e-6)
    np.testing.assert_allclose(softmax(z + 123.0), softmax(z), atol=1e-9)
    np.testing.assert_allclose(softmax(np.zeros(25)), np.full(25, 1 / 25))


def test_sample_shapes_and_determinism():
    a, bins = sample_sequences(None, 20, 10, 0.3, 7)
    b, _ = sample_sequences(None, 20, 10, 0.3, 7)
    assert a.shape == (20, 10, 2) and bins.shape == (20, 10)
    np.testing.assert_array_equal(a, b)


def test_samples_inside_chosen_bins():
    p = softmax(np.random.default_rng(1).normal(size=25))
    acts, bins = sample_sequences(p, 200, 10, 0.2, 3)
    s_lo, s_hi, t_lo, t_hi = bin_rect(bins)
    assert np.all((s_lo <= acts[..., 0]) & (acts[..., 0] <= s_hi))
    assert np.all((t_lo <= acts[..., 1]) & (acts[..., 1] <= t_hi))


def within_3_sigma(bins, expected_p):
    n = bins.size
    counts = np.bincount(bins.reshape(-1), minlength=N_BINS)
    sigma = np.sqrt(n * expected_p * (1 - expected_p))
    return np.all(np.abs(counts - n * expected_p) <= 3 * sigma + 1e-9)


def test_full_exploration_is_uniform():
    peaked = np.zeros(25)
    peaked[3] = 1.0
    _, bins = sample_sequences(peaked, 10_000, 10, 1.0, 11)
    assert within_3_sigma(bins, np.full(25, 1 / 25))


def test_epsilon_mixture_frequencies():
    p = softmax(np.random.default_rng(2).normal(size=25) * 1.5)
    eps = 0.35
    _, bins = sample_sequences(p, 10_000, 10, eps, 12)
    assert within_3_sigma(bins, eps / 25 + (1 - eps) * p)


def test_epsilon_validation():
    with pytest.raises(ValueError):
        sample_sequences(None, 2, 2, 1.5, 0)


def test_padded_history_repeats_first_frame():
    steps = [StepRecord(i, (0, 0), 0.0, None, 0.0) for i in range(5)]
    assert padded_history(steps, 0, 3) == [0, 0, 0]
    assert padded_history(steps, 1, 3) == [0, 0, 1]
    assert padded_history(steps, 4, 3) == [2, 3, 4]


@pytest.fixture(scope="module")
def bin12_episode():
    # actions near (0, 0) all fall in the center bin
    w = reset(builtin_map("loop"), 2, 4)
    rng = np.random.default_rng(0)
    return run_episode(w, lambda _w, _o: Action(*rng.uniform(-0.15, 0.15, 2)), 4, "expert", max_steps=30)


def test_training_learns_constant_bin(bin12_episode):
    cfg = PredictorConfig(hidden_dim=16, lr=3e-3)
    g, loss = train_guidance(init_guidance(cfg, 0), [bin12_episode], 60, 0, cfg)
    assert loss < 0.5
    for t in (0, 10, 29):
        p = bin_distribution(padded_history(bin12_episode.steps, t, 3), g, cfg)
        assert int(np.argmax(p)) == 12
        assert p.sum() == pytest.approx(1.0, abs=1e-6)


def test_zero_steps_and_determinism(bin12_episode):
    g0 = init_guidance(CFG, 0)
    g, _ = train_guidance(g0, [bin12_episode], 0, 0, CFG)
    for k in g0.arrays:
        np.testing.assert_array_equal(g.arrays[k], g0.arrays[k])
    a, la = train_guidance(init_guidance(CFG, 0), [bin12_episode], 5, 9, CFG)
    b, lb = train_guidance(init_guidance(CFG, 0), [bin12_episode], 5, 9, CFG)
    assert la == lb
    for k in a.arrays:
        assert a.arrays[k].tobytes() == b.arrays[k].tobytes()


def test_training_rejects_empty():
    with pytest.raises(ValueError):
        train_guidance(init_guidance(CFG, 0), [], 5, 0, CFG)
    with pytest.raises(ValueError):
        train_guidance(init_guidance(CFG, 0), [EpisodeRecord([])], 5, 0, CFG)
