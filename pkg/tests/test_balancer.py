import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from stagealloc import balancer, kernels
from stagealloc.balancer import (ControllerState, FeedbackConfig, MPCConfig, Plant, RequestPool, SystemModel,
                                 closed_loop_run, feedback_step, fit_system_model, mpc_objective,
                                 solve_lambda_sequence, trajectory_cost)
from stagealloc.costbench import BenchConfig, cost_table, run_bench
from stagealloc.envsim import TrafficProfile, generate_traffic
from stagealloc.metrics import overutilization_rate, utilization_rate

from oracles import mpc_objective_loop, overutilization, utilization


@pytest.fixture(scope="module")
def pool(env):
    ctx = env.sample_contexts(1000, np.random.default_rng([7, 61]))
    model, _ = run_bench(env, BenchConfig(noise=0.0, repeats=1))
    rep = ctx.repeat(env.n_joint)
    q = env.latent_revenue(rep, np.tile(env.joint_actions, (1000, 1))).reshape(1000, -1)
    return RequestPool(q, cost_table(env, model, ctx))


@pytest.fixture(scope="module")
def plant(pool):
    return Plant(pool, 100.0)


@pytest.fixture(scope="module")
def gmodel(plant):
    return balancer.train_system_model(plant, seed=0, days=2, iterations=2000)


@pytest.fixture(scope="module")
def linear_model():
    return fit_system_model(*_linear_plant(), iterations=3000)


def _linear_plant(n=1500, seed=0):
    rng = np.random.default_rng(seed)
    c = rng.uniform(0, 2, n)
    traffic = rng.uniform(0.2, 0.6, n)
    lam = rng.uniform(0, 0.2, n)
    return c, traffic[:, None], lam, 0.8 * c - 2 * lam + traffic


def test_system_model_fits_linear_plant(linear_model):
    assert linear_model.rmse < 0.05 * linear_model.value_range


def test_system_model_non_increasing_in_lambda_on_linear_plant(linear_model):
    m = linear_model
    grid = np.linspace(0, 0.2, 41)
    for c0, tr in [(0.5, 0.3), (1.0, 0.4), (1.5, 0.5)]:
        pred = m.predict(np.full(41, c0), np.full((41, 1), tr), grid)
        assert np.all(np.diff(pred) <= 1e-3)


def test_system_model_fit_is_deterministic():
    c, exo, lam, nxt = _linear_plant(300)
    a = fit_system_model(c, exo, lam, nxt, iterations=200)
    b = fit_system_model(c, exo, lam, nxt, iterations=200)
    assert a.rmse == b.rmse and np.array_equal(a.predict(c, exo, lam), b.predict(c, exo, lam))


def test_system_model_needs_100_transitions():
    c, exo, lam, nxt = _linear_plant(99)
    with pytest.raises(ValueError, match="at least 100"):
        fit_system_model(c, exo, lam, nxt)


def test_system_model_predictions_non_negative(gmodel):
    rng = np.random.default_rng(0)
    exo = np.column_stack([rng.uniform(0, 3, 500), rng.uniform(-1, 1, (500, 2))])
    assert gmodel.predict(rng.uniform(0, 2, 500), exo, rng.uniform(0, 1000, 500)).min() >= 0


def test_system_model_arrays_roundtrip(gmodel):
    back = SystemModel.from_arrays(gmodel.to_arrays())
    exo = np.array([[1.0, 0.0, 1.0]])
    assert back.rmse == gmodel.rmse and np.array_equal(back.predict(0.7, exo, 5.0), gmodel.predict(0.7, exo, 5.0))


def test_rollout_kernel_matches_stepwise_predict(gmodel):
    rng = np.random.default_rng(1)
    exo = np.column_stack([rng.uniform(0.5, 2, 6), rng.uniform(-1, 1, (6, 2))])
    lams = rng.uniform(0, 100, 6)
    traj = gmodel.rollout(0.75, exo, lams[None])[0]
    c = 0.75
    assert traj[0] == c
    for i in range(6):
        c = float(gmodel.predict(c, exo[i:i + 1], lams[i])[0])
        assert traj[i + 1] == pytest.approx(c, rel=1e-12, abs=1e-12)


def test_objective_zero_on_budget():
    traj = np.full((1, 11), 0.8)
    assert trajectory_cost(traj, 0.8, MPCConfig())[0] == 0.0


def test_objective_constant_overshoot():
    d, cfg = 0.05, MPCConfig()
    traj = np.full((1, 11), 0.8 + d)
    expect = sum(cfg.alpha ** i * d * d for i in range(11))
    assert trajectory_cost(traj, 0.8 + d, cfg)[0] == pytest.approx(expect, rel=1e-12)


@given(st.integers(0, 100_000), st.booleans())
def test_objective_matches_loop_recomputation(seed, per_step):
    rng = np.random.default_rng(seed)
    traj = rng.uniform(0.5, 1.1, size=(3, 11))
    cfg = MPCConfig(alpha=float(rng.uniform(0.1, 1)), beta=float(rng.uniform(0, 10)), per_step=per_step)
    got = trajectory_cost(traj, 0.7, cfg)
    for g in range(3):
        expect = mpc_objective_loop(traj[g], 0.7, cfg.budget, cfg.alpha, cfg.beta, per_step)
        assert abs(got[g] - expect) <= 1e-12 * max(1.0, abs(expect))


@given(st.integers(0, 100_000))
def test_objective_zero_iff_on_budget(seed):
    rng = np.random.default_rng(seed)
    traj = np.full((1, 11), 0.8)
    traj[0, int(rng.integers(0, 11))] += float(rng.choice([-1, 1]) * rng.uniform(1e-6, 0.3))
    assert trajectory_cost(traj, 0.8, MPCConfig())[0] > 0


def test_mpc_objective_uses_model_rollout(gmodel):
    cfg = MPCConfig()
    exo = np.tile([1.2, 0.0, 1.0], (10, 1))
    lams = np.linspace(1, 50, 10)
    traj = gmodel.rollout(0.85, exo, lams[None])[0]
    expect = mpc_objective_loop(traj, 0.82, cfg.budget, cfg.alpha, cfg.beta)
    assert mpc_objective(lams, 0.85, exo, gmodel, cfg, c_prev=0.82) == pytest.approx(expect, rel=1e-12)
    with pytest.raises(ValueError):
        mpc_objective(lams[:5], 0.85, exo, gmodel, cfg)


def test_one_step_solver_matches_fine_grid(gmodel):
    cfg = MPCConfig(horizon=1)
    grid = np.asarray(cfg.lam_grid)
    cell = grid[2] / grid[1]
    fine = np.concatenate([[0.0], np.geomspace(1e-2, 2e3, 4000)])
    for c0, traffic in [(0.95, 1.3), (0.85, 1.0), (0.9, 1.6)]:
        exo = np.array([[traffic, 0.0, 1.0]])
        lam = solve_lambda_sequence(c0, exo, gmodel, cfg)[0]
        costs = trajectory_cost(gmodel.rollout(c0, exo, fine[:, None]), c0, cfg)
        best = fine[int(np.argmin(costs))]
        j = trajectory_cost(gmodel.rollout(c0, exo, np.array([[lam]])), c0, cfg)[0]
        assert j <= costs.min() + 1e-6 or (best > 0 and 1 / cell <= lam / best <= cell)


def test_loose_budget_drives_lambda_to_lower_bound(linear_model):
    cfg = MPCConfig(budget=50.0, lam_grid=np.concatenate([[0.0], np.geomspace(1e-3, 0.2, 12)]))
    exo = np.full((10, 1), 0.4)
    assert np.all(solve_lambda_sequence(0.8, exo, linear_model, cfg) == 0.0)


def test_repeated_solves_reach_fixed_point(gmodel):
    cfg = MPCConfig()
    exo = np.tile([1.3, 0.5, 0.5], (10, 1))
    plan, firsts = None, []
    for _ in range(12):
        plan = solve_lambda_sequence(0.9, exo, gmodel, cfg, None if plan is None else balancer.shift_plan(plan))
        firsts.append(plan[0])
    assert abs(firsts[-1] - firsts[-2]) < 1e-6


def test_solver_keeps_unimprovable_warm_start(linear_model):
    cfg = MPCConfig(budget=50.0, lam_grid=np.concatenate([[0.0], np.geomspace(1e-3, 0.2, 12)]))
    warm = np.zeros(10)
    assert np.array_equal(solve_lambda_sequence(0.8, np.full((10, 1), 0.4), linear_model, cfg, warm), warm)


def test_solver_rejects_bad_warm_start(gmodel):
    with pytest.raises(ValueError):
        solve_lambda_sequence(0.8, np.zeros((10, 3)), gmodel, MPCConfig(), warm_start=-np.ones(10))


def test_mpc_config_validation():
    for bad in (dict(horizon=0), dict(alpha=0.0), dict(beta=-1), dict(budget=0), dict(forecast="psychic")):
        with pytest.raises(ValueError):
            MPCConfig(**bad)


def test_feedback_zero_error_keeps_lambda():
    st_ = ControllerState(lam=3.0)
    assert feedback_step(st_, 0.8, 0.8) == 3.0


def test_feedback_integrates_sustained_overload():
    st_ = ControllerState(lam=0.0)
    lams = [feedback_step(st_, 0.9, 0.8) for _ in range(10)]
    assert np.all(np.diff(lams) > 0)


def test_feedback_never_negative():
    st_ = ControllerState(lam=1.0)
    for _ in range(20):
        assert feedback_step(st_, 0.1, 0.8) >= 0.0


def test_controller_state_rejects_negative_lambda():
    with pytest.raises(ValueError):
        ControllerState(lam=-1.0)


def test_feedback_settles_after_burst(plant):
    profile = TrafficProfile(base_qps=100.0, amplitude=0.2, bursts=((200, 30, 1.8),), noise=0.02, seed=3)
    r = closed_loop_run("feedback", plant, profile, 400, seed=3)
    util = np.array([row["realized"] for row in r.trace])
    assert util[200:230].max() > 0.8  # the burst actually loads the system
    assert np.all(np.abs(util[270:] - 0.8) <= 0.08)


def test_mu_nu_examples():
    assert utilization_rate([0.8] * 5, 0.8) == 1.0 and overutilization_rate([0.8] * 5, 0.8) == 0.0
    assert utilization_rate([0.88] * 5, 0.8) == 1.0
    assert overutilization_rate([0.88] * 5, 0.8) == pytest.approx(0.1, rel=1e-12)


@given(st.lists(st.floats(0, 5), min_size=1, max_size=50), st.floats(0.1, 2))
def test_mu_nu_formulas(trace, budget):
    mu, nu = utilization_rate(trace, budget), overutilization_rate(trace, budget)
    assert 0 <= mu <= 1 and nu >= 0
    assert mu == pytest.approx(utilization(trace, budget), rel=1e-12, abs=1e-15)
    assert nu == pytest.approx(overutilization(trace, budget), rel=1e-12, abs=1e-15)


def test_static_controller_holds_lambda(plant):
    r = closed_loop_run("static", plant, balancer.control_traffic(1, 120), 120)
    assert len({row["lambda"] for row in r.trace}) == 1


def test_mpc_applies_first_element_only(plant, gmodel):
    cfg = MPCConfig(horizon=4)
    profile = balancer.control_traffic(2, 30)
    r = closed_loop_run("mpc", plant, profile, 30, gmodel, cfg, seed=2)
    _, counts = generate_traffic(profile, 30)
    c, c_prev, plan = cfg.budget, cfg.budget, None
    for row in r.trace[:8]:
        t = row["t"]
        exo = balancer._forecast_exo(plant, profile, counts, t, 4, "oracle")
        plan = solve_lambda_sequence(c, exo, gmodel, cfg, None if plan is None else balancer.shift_plan(plan), c_prev)
        assert row["lambda"] == plan[0]
        c_prev, c = c, row["realized"]


def test_realized_load_non_increasing_in_lambda(plant):
    _, counts = generate_traffic(balancer.control_traffic(4, 60), 60)
    rows = plant.request_rows(counts, 4)
    loads = [sum(plant.load(r, lam) for r in rows) for lam in np.concatenate([[0], np.logspace(-1, 3, 49)])]
    assert np.all(np.diff(loads) <= 1e-12)


def test_unknown_controller_rejected(plant):
    with pytest.raises(ValueError, match="unknown controller"):
        closed_loop_run("pid", plant, TrafficProfile(), 5)
    with pytest.raises(ValueError, match="system model"):
        closed_loop_run("mpc", plant, TrafficProfile(), 5)


def test_control_traffic_bursts_scale_with_horizon():
    assert len(balancer.control_traffic(0, 1440).bursts) == 4
    assert len(balancer.control_traffic(0, 360).bursts) == 1


def test_trace_and_summary_files(plant, tmp_path):
    r = closed_loop_run("feedback", plant, balancer.control_traffic(5, 20), 20)
    balancer.write_trace_csv(r, tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "t,traffic,lambda,predicted,realized,over_budget" and len(lines) == 21
    balancer.write_summary_json([r], tmp_path / "s.json", {"seed": 5})
    body = json.loads((tmp_path / "s.json").read_text())
    assert body["controllers"][0]["controller"] == "feedback" and body["seed"] == 5


def test_sweep_covers_grid(plant, gmodel):
    rows = balancer.sensitivity_sweep(plant, balancer.control_traffic(6, 8), 8, gmodel, MPCConfig(),
                                      alphas=(0.2, 0.6), betas=(0, 8), horizons=(2, 3))
    assert [(r["parameter"], r["value"]) for r in rows] == [
        ("alpha", 0.2), ("alpha", 0.6), ("beta", 0.0), ("beta", 8.0), ("horizon", 2.0), ("horizon", 3.0)]


def test_pool_shape_check():
    with pytest.raises(ValueError):
        RequestPool(np.zeros((2, 3)), np.zeros((2, 4)))


def test_kernel_rollout_shape(gmodel):
    traj = kernels.rollout(0.5, np.zeros((3, 3)), np.zeros((4, 3)), gmodel.kernel_params())
    assert traj.shape == (4, 4)
