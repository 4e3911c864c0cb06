import math
import time

import numpy as np
import pytest

from rheston.config import ModelParams
from rheston.errors import DegenerateModelError, DomainError
from rheston.kernel import KernelApprox, preset
from rheston.pathscheme import (
    MarketState,
    PathBatch,
    Simulator,
    bs_substep,
    euler_step,
    full_step,
    stock_coefficients,
    w_substep,
)
from rheston.volscheme import StepStats, VolPropagator, trinomial_law

PARAMS = ModelParams()


def _state(params, kernel, n=3):
    return MarketState.initial(params, kernel, n)


def test_coefficients_vanish_without_correlation():
    k = preset(0.1, "T1", 2)
    c = stock_coefficients(ModelParams(rho=0.0), k)
    assert c.a == 0.0
    assert np.allclose(c.b, 0.0) and np.allclose(c.c, 0.0)


@pytest.mark.parametrize("N", [1, 2, 3, 4])
def test_coefficients_satisfy_consistency(N):
    k = preset(0.1, "T1", N)
    c = stock_coefficients(PARAMS, k)
    assert np.abs(c.residuals(PARAMS, k)).max() < 1e-12
    assert c.c[0] == pytest.approx(-0.7 / 0.3)


def test_coefficients_one_factor_closed_form():
    k = preset(0.1, "T1", 1)
    c = stock_coefficients(PARAMS, k)
    ratio = -0.7 / 0.3
    assert c.a == pytest.approx(-(2.1649 * 0.02 / 2.6233 + 0.02) * ratio)
    assert c.b[0] == pytest.approx(ratio * 2.1649 + 0.3 * 2.6233 * ratio - 0.5 * 2.6233 * 0.49)


def test_coefficients_need_vol_of_vol():
    with pytest.raises(DegenerateModelError):
        stock_coefficients(ModelParams(nu=0.0), preset(0.1, "T1", 2))


def test_bs_substep_direct_formula():
    params = ModelParams(rho=0.0, V0=0.04)
    k = KernelApprox.from_pairs([0.0], [1.0], V0=0.04)
    out = bs_substep(_state(params, k, 1), params, k, 1.0, np.zeros(1))
    assert out.S[0] == pytest.approx(math.exp(-0.02), rel=1e-14)


@pytest.mark.parametrize("rho", [-1.0, 1.0])
def test_bs_substep_full_correlation_is_identity(rho):
    params = ModelParams(rho=rho)
    k = preset(0.1, "T1", 2)
    state = _state(params, k)
    out = bs_substep(state, params, k, 0.1, np.array([1.0, -2.0, 0.5]))
    assert np.array_equal(out.S, state.S)
    assert out.V is state.V


def test_w_substep_without_correlation_keeps_price():
    params = ModelParams(rho=0.0)
    k = preset(0.1, "T1", 2)
    prop = VolPropagator(k, params.lam, params.theta, params.nu, 0.1)
    state = _state(params, k)
    out = w_substep(state, prop, stock_coefficients(params, k), 0.1, np.array([0.1, 0.5, 0.99]))
    assert np.allclose(out.S, state.S)
    assert not np.allclose(out.V, state.V)
    assert np.all(out.Y @ k.weights > 0)
    assert w_substep(state, prop, stock_coefficients(params, k), 0.0, np.zeros(3)) is state


def test_w_substep_against_scalar_recursion():
    k = preset(0.1, "T1", 1)
    p = PARAMS
    h = 0.1
    x, w = float(k.nodes[0]), float(k.weights[0])
    v0 = float(k.v0split[0])
    a_ = -p.lam * w - x
    b_ = p.theta + x * v0

    def drift(v, dt):
        return math.exp(a_ * dt) * v + (math.exp(a_ * dt) - 1.0) / a_ * b_

    mid = drift(v0, h / 2)
    law = trinomial_law(w * mid, p.nu**2 * w**2 * h)
    u = float(law.p1) + float(law.p2) / 2
    after = drift(float(law.x2) / w, h / 2)
    dY = 0.5 * h * (v0 + after)
    ratio = p.rho / p.nu
    log_s = ratio * (-(x * v0 + p.theta) * h + x * dY + (p.lam - 0.5 * p.rho * p.nu) * w * dY + (after - v0))

    prop = VolPropagator(k, p.lam, p.theta, p.nu, h)
    out = w_substep(_state(p, k, 1), prop, stock_coefficients(p, k), h, np.array([u]))
    assert out.V[0, 0] == pytest.approx(after, rel=1e-12)
    assert out.Y[0, 0] == pytest.approx(dY, rel=1e-12)
    assert out.S[0] == pytest.approx(math.exp(log_s), rel=1e-12)


@pytest.mark.parametrize("u_order", [0.3, 0.7])
def test_full_step_order_branch(u_order):
    k = preset(0.1, "T1", 2)
    h = 0.1
    prop = VolPropagator(k, PARAMS.lam, PARAMS.theta, PARAMS.nu, h)
    coeffs = stock_coefficients(PARAMS, k)
    state = _state(PARAMS, k)
    u_tri = np.array([0.2, 0.6, 0.95])
    g = np.array([-1.0, 0.3, 1.7])
    out = full_step(state, PARAMS, prop, coeffs, np.full(3, u_order), u_tri, g)
    if u_order <= 0.5:
        expected = w_substep(bs_substep(state, PARAMS, k, h, g), prop, coeffs, h, u_tri)
    else:
        expected = bs_substep(w_substep(state, prop, coeffs, h, u_tri), PARAMS, k, h, g)
    assert np.allclose(out.S, expected.S, rtol=1e-13)
    assert np.allclose(out.V, expected.V)
    assert out.t == pytest.approx(h)


def test_euler_constant_kernel_is_pure_drift():
    params = ModelParams(nu=0.0, lam=0.0)
    k = KernelApprox.from_pairs([0.0], [1.0], V0=params.V0)
    out = euler_step(_state(params, k, 2), params, k, 0.01, np.array([1.0, -1.0]), np.zeros(2))
    assert np.allclose(out.V[:, 0], params.V0 + params.theta * 0.01, rtol=1e-14)


def test_euler_matches_explicit_drift_to_second_order():
    k = preset(0.1, "T1", 2)
    h = 1e-4
    state = _state(PARAMS, k, 1)
    V = state.V[0] * np.array([1.5, 0.5])
    state = MarketState(S=state.S, V=V[None, :], Y=state.Y)
    out = euler_step(state, PARAMS, k, h, np.zeros(1), np.zeros(1))
    explicit = h * (PARAMS.theta - PARAMS.lam * (V @ k.weights) + k.nodes * (k.v0split - V))
    assert np.allclose(out.V[0] - V, explicit, rtol=0, atol=10 * h * h)
    assert np.allclose(out.Y[0], h * V)


def test_euler_floor_is_counted():
    k = KernelApprox.from_pairs([0.0], [1.0], V0=PARAMS.V0)
    stats = StepStats()
    gB = np.array([-1000.0, 0.0, 0.0])
    out = euler_step(_state(PARAMS, k), PARAMS, k, 0.01, np.zeros(3), gB, stats=stats)
    assert out.S[0] == 0.0
    assert np.allclose(out.S[1:], PARAMS.S0)
    assert stats.floor_events == 1
    assert stats.clamp_events == 0


def test_simulator_dimensions():
    k = preset(0.1, "T1", 2)
    assert Simulator(PARAMS, k, "weak", 16).dimension == 48
    assert Simulator(PARAMS, k, "euler", 16).dimension == 32
    with pytest.raises(DomainError):
        Simulator(PARAMS, k, "weak", 16).run(np.full((4, 10), 0.5))


def test_simulator_rejects_mismatched_split():
    with pytest.raises(DomainError):
        Simulator(ModelParams(V0=0.04), preset(0.1, "T1", 2), "weak", 4)


@pytest.mark.parametrize("scheme", ["weak", "euler"])
def test_price_is_a_martingale(scheme):
    k = preset(0.1, "T1", 2)
    sim = Simulator(PARAMS, k, scheme, 16)
    u = np.random.default_rng(11).random((1 << 14, sim.dimension))
    batch = sim.run(u)
    S = batch.S[:, -1]
    se = S.std(ddof=1) / math.sqrt(len(S))
    assert abs(S.mean() - 1.0) < 4 * se
    if scheme == "weak":
        assert batch.stats.clamp_events == 0


def test_black_scholes_limit():
    params = ModelParams(rho=0.0, nu=1e-8, theta=0.0, lam=0.0)
    k = preset(0.1, "T1", 2)
    sim = Simulator(params, k, "weak", 8)
    u = np.random.default_rng(3).random((1 << 15, sim.dimension))
    logs = np.log(sim.run(u).S[:, -1])
    var = logs.var(ddof=1)
    assert abs(var - params.V0) < 4 * params.V0 * math.sqrt(2.0 / len(logs))


def test_randomized_order_averages_the_two_orders():
    k = preset(0.1, "T1", 1)
    sim = Simulator(PARAMS, k, "weak", 16)
    u = np.random.default_rng(5).random((1 << 14, sim.dimension))
    payoffs = []
    for order in (None, 0.0, 1.0):
        v = u.copy()
        if order is not None:
            v[:, 2::3] = order
        payoffs.append(np.maximum(sim.run(v).S[:, -1] - 1.0, 0.0))
    diff = 0.5 * (payoffs[1] + payoffs[2]) - payoffs[0]
    # equal in expectation up to the O(h^2) discretisation bias of each estimator
    assert abs(diff.mean()) < 4 * diff.std(ddof=1) / math.sqrt(len(diff)) + 5e-4


def test_run_records_requested_steps_and_rate():
    params = ModelParams(r=0.05)
    k = preset(0.1, "T1", 2)
    sim = Simulator(params, k, "weak", 8)
    u = np.random.default_rng(1).random((16, sim.dimension))
    batch = sim.run(u, record_steps=[0, 4, 8], track_log_integral=True, track_factors=True)
    assert np.allclose(batch.times, [0.0, 0.5, 1.0])
    assert np.allclose(batch.S[:, 0], 1.0)
    assert batch.V.shape == (16, 3, 2)
    assert batch.log_integral.shape == (16,)
    with pytest.raises(DomainError):
        sim.run(u, record_steps=[4, 2])


def test_single_step_log_integral_is_two_node_rule():
    k = preset(0.1, "T1", 2)
    sim = Simulator(PARAMS, k, "weak", 1)
    u = np.random.default_rng(2).random((8, sim.dimension))
    batch = sim.run(u, track_log_integral=True)
    assert np.allclose(batch.log_integral, 0.5 * (math.log(PARAMS.S0) + np.log(batch.S[:, -1])))


def test_path_batch_concat():
    a = PathBatch(times=np.array([1.0]), S=np.ones((2, 1)), stats=StepStats(1, 4))
    b = PathBatch(times=np.array([1.0]), S=np.zeros((3, 1)), stats=StepStats(2))
    out = PathBatch.concat([a, b])
    assert out.paths == 5
    assert out.stats.clamp_events == 3
    assert out.stats.floor_events == 4


def _best_run_time(steps, paths=1000, repeats=3):
    sim = Simulator(PARAMS, preset(0.1, "T1", 2), "weak", steps)
    u = np.random.default_rng(steps).random((paths, sim.dimension))
    best = math.inf
    for _ in range(repeats):
        start = time.perf_counter()
        sim.run(u)
        best = min(best, time.perf_counter() - start)
    return best


def test_cost_is_linear_in_steps():
    assert _best_run_time(1024) / _best_run_time(512) <= 2.5
