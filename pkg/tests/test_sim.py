import numpy as np
import pytest
from hypothesis import given, strategies as st

from toa_rtls.errors import InvalidInputError
from toa_rtls.sim import (
    ScenarioConfig,
    aggregate,
    aligned_clock_rmse,
    build_geometry,
    default_workers,
    draw_agents,
    nlos_accuracy,
    position_rmse,
    run_monte_carlo,
    run_trial,
    run_trials,
    runtime_comparison,
    trial_rng,
    with_overrides,
)

SMALL = ScenarioConfig(t_max=15, trials=2)


def test_geometry_examples():
    g = build_geometry(ScenarioConfig(m=4))
    np.testing.assert_allclose(g.anchors, [[0, 0, 5], [0, 32, 5], [32, 0, 5], [32, 32, 5]])
    g = build_geometry(ScenarioConfig())
    assert g.dim == 3 and g.m == 25
    xs = np.unique(g.anchors[:, 0])
    np.testing.assert_allclose(np.diff(xs), 8.0)
    with pytest.raises(InvalidInputError):
        ScenarioConfig(m=5)


@pytest.mark.parametrize(
    "kw",
    [dict(m=1), dict(nlos_fraction=0.5), dict(alpha=0.5), dict(lam=0.0), dict(sigma=-1.0), dict(t_max=0),
     dict(trials=0), dict(selection_mode="x"), dict(n_agents=0), dict(nlos_range=(-1.0, 5.0))],
)
def test_config_validation(kw):
    with pytest.raises(InvalidInputError):
        ScenarioConfig(**kw)


def test_nlos_count():
    assert ScenarioConfig().nlos_count == 3
    assert ScenarioConfig(m=16).nlos_count == 2
    assert ScenarioConfig(m=36).nlos_count == 5
    assert ScenarioConfig(nlos_fraction=0.0).nlos_count == 0


def test_draw_agents():
    cfg = ScenarioConfig()
    agents = draw_agents(cfg, trial_rng(0, 0))
    assert len(agents) == 4
    for a in agents:
        assert len(a.nlos_set) == 3 and len(a.los_set) == 22
        assert 0 <= a.position[0] <= 32 and a.position[2] == 1.5
        assert np.all((a.nlos_errors[list(a.nlos_set)] >= 10) & (a.nlos_errors[list(a.nlos_set)] <= 40))


def test_position_rmse_formula():
    truths = np.random.default_rng(0).uniform(size=(4, 3))
    off = np.array([0.3, 0.0, 0.0])
    assert position_rmse(truths + off, truths) == pytest.approx(0.3, abs=1e-15)
    dirs = np.array([[0.3, 0, 0], [0, 0.3, 0], [0, 0, -0.3], [0.18, 0.24, 0]])
    assert position_rmse(truths + dirs, truths) == pytest.approx(0.3, abs=1e-15)
    assert position_rmse(truths + [[1, 0, 0], [0, 0, 0], [0, 0, 0], [0, 0, 0]], truths) == pytest.approx(0.5)


@given(st.lists(st.floats(-10, 10), min_size=2, max_size=30), st.floats(-100, 100))
def test_aligned_clock_rmse_gauge_invariant(vals, kappa):
    est = np.array(vals)
    truth = np.linspace(-8, 8, est.size)
    assert aligned_clock_rmse(est, truth + kappa) == pytest.approx(aligned_clock_rmse(est, truth), abs=1e-9)
    assert aligned_clock_rmse(truth + kappa, truth) <= 1e-9


def test_nlos_accuracy_examples():
    m = 5
    truth = [[(0, 1, 2), (0, 1, 2, 3, 4)], [(1, 2, 3), (0, 1, 2, 4)]]
    assert nlos_accuracy(truth, truth, m) == 1.0
    est = [[(0, 1, 3), (0, 1, 2)], [(1, 2, 3), (0, 1, 2, 3)]]
    # cells: {3,4} -> 1 of 2; (1,2,3) true nlos {0,4} -> 2/2; {3} -> 0/1
    assert nlos_accuracy(est, truth, m) == pytest.approx((0.5 + 1.0 + 0.0) / 3)
    assert np.isnan(nlos_accuracy([[(0, 1)]], [[(0, 1)]], 2))


def test_run_trial_noiseless():
    cfg = ScenarioConfig(t_max=20, sigma=0.0, nlos_fraction=0.0, offset_range=(0.0, 0.0))
    tr = run_trial(cfg, 0)
    assert tr.pos_rmse.max() <= 1e-6
    assert tr.clock_rmse.max() <= 1e-9


def test_run_trial_traces_and_modes():
    tr = run_trial(with_overrides(SMALL, selection_mode="oracle"), 0, keep_traces=True)
    truth_sets = [[a.los_set for a in frame] for frame in tr.truths]
    assert tr.selections == truth_sets
    assert tr.nlos_hits.sum() == tr.nlos_total.sum()
    tr = run_trial(with_overrides(SMALL, selection_mode="all"), 0, keep_traces=True)
    assert tr.nlos_hits.sum() == 0
    assert all(s == tuple(range(25)) for f in tr.selections for s in f)
    assert tr.delta_hat.shape == (15, 25)


def test_trials_one_equals_single_trial():
    cfg = with_overrides(SMALL, trials=1)
    ms = run_monte_carlo(cfg)
    tr = run_trial(cfg, 0)
    np.testing.assert_array_equal(ms.pos_rmse, tr.pos_rmse)
    np.testing.assert_array_equal(ms.clock_rmse, tr.clock_rmse)
    assert ms.pos_rmse.shape == (15,)


def test_monte_carlo_deterministic():
    a, b = run_monte_carlo(SMALL), run_monte_carlo(SMALL)
    np.testing.assert_array_equal(a.pos_rmse, b.pos_rmse)
    np.testing.assert_array_equal(a.clock_rmse, b.clock_rmse)
    assert a.nlos_accuracy == b.nlos_accuracy
    assert np.all(a.pos_rmse >= 0) and np.all(a.clock_rmse >= 0) and np.all(a.step_time >= 0)


def test_parallel_trials_match_serial():
    serial = aggregate(run_trials(SMALL, 1))
    parallel = aggregate(run_trials(SMALL, 2))
    np.testing.assert_array_equal(serial.pos_rmse, parallel.pos_rmse)
    np.testing.assert_array_equal(serial.clock_rmse, parallel.clock_rmse)


def test_clock_rmse_invariant_to_offset_shift():
    # dyadic shift keeps every measurement bit-identical
    cfg = ScenarioConfig(t_max=10, trials=1, offset_range=(-8.0, 8.0), tx_time_range=(0.0, 100.0))
    shifted = with_overrides(cfg, offset_range=(-6.0, 10.0), tx_time_range=(-2.0, 98.0))
    a, b = run_trial(cfg, 0), run_trial(shifted, 0)
    np.testing.assert_allclose(a.clock_rmse, b.clock_rmse, atol=1e-9)
    np.testing.assert_allclose(a.pos_rmse, b.pos_rmse, atol=1e-9)


def test_aggregate_counts():
    ms = run_monte_carlo(SMALL)
    assert ms.branch_counts["full"] + ms.branch_counts["reduced"] == 30
    assert 1 <= ms.max_growth <= 25
    assert ms.trials == 2
    assert 0.0 <= ms.nlos_accuracy <= 1.0
    assert ms.mean_after(10) == pytest.approx(ms.pos_rmse[10:].mean())


def test_runtime_comparison_small():
    rt = runtime_comparison(ScenarioConfig(t_max=12), repeats=1)
    assert rt.brmp_step_s.shape == rt.direct_step_s.shape == (12,)
    assert np.all(rt.direct_step_s > 0) and np.all(rt.brmp_step_s > 0)
    assert rt.max_delta_gap < 1e-6
    np.testing.assert_allclose(rt.brmp_step_s, rt.localize_s + rt.brmp_sync_s)


def test_default_workers_env(monkeypatch):
    monkeypatch.setenv("TOA_RTLS_THREADS", "3")
    assert default_workers() == 3
    monkeypatch.delenv("TOA_RTLS_THREADS")
    assert default_workers() >= 1


def test_with_overrides_ignores_none():
    cfg = with_overrides(ScenarioConfig(), sigma=None, m=16)
    assert cfg.sigma == 0.4 and cfg.m == 16
