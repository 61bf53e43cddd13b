import math

import numpy as np
import pytest
import scipy.sparse as sp

from ergodic_control.errors import CFLError, ContractError, ConvergenceError
from ergodic_control.grid import build_kernel, default_L_scheme, make_grid
from ergodic_control.model import JumpModel, NoiseLaw, PointMass, TwoPoint, Uniform, auction_v1
from ergodic_control.solvers import (ControlGrid, EmpiricalKernelSet, bellman_defect, correction_solve,
                                     estimate_empirical_kernels, generator_gap_table, jump_defect,
                                     policy_evaluate, policy_iterate, rvi_solve)

from conftest import stationary, toy_model


def test_control_grid():
    cg = ControlGrid(4)
    assert np.array_equal(cg.points, [0, 0.25, 0.5, 0.75, 1.0])
    assert ControlGrid(0).size == 1
    with pytest.raises(ContractError):
        ControlGrid(-1)


# ---------------------------------------------------------------- diffusive

def test_rvi_constant_reward():
    m = toy_model(lambda x, a: 0.3 * np.asarray(a) - 0.5 * np.asarray(x),
                  reward=lambda x, a: np.full(np.broadcast(np.asarray(x), np.asarray(a)).shape, 0.7))
    g = make_grid(10, 0.1, None, 1.0)
    sol = rvi_solve(g, m, ControlGrid(5))
    assert sol.rho == pytest.approx(0.7, abs=1e-10)
    assert np.allclose(sol.w, 0.7 * g.dt, atol=1e-12)


@pytest.mark.parametrize("drift", [lambda x, a: 0 * np.asarray(x, float),
                                   lambda x, a: 0.2 - 0.5 * np.asarray(x, float)])
def test_rvi_matches_stationary_distribution(drift):
    # 7 states, one action: rho = pi . r with pi from an eigen-solve of the kernel
    m = toy_model(drift, sigma=0.5, reward=lambda x, a: np.asarray(x, float) + 0 * np.asarray(a))
    g = make_grid(3, 0.1, None, 1.0)
    K = build_kernel(g, m, 0.0).matrix.toarray()
    rho_oracle = stationary(K) @ g.points
    sol = rvi_solve(g, m, ControlGrid(0), tol=1e-13)
    assert sol.rho == pytest.approx(rho_oracle, abs=1e-8)
    assert sol.w[g.ref_index] == pytest.approx(sol.rho * g.dt, abs=1e-10)


@pytest.fixture(scope="module")
def auction_rvi(small_grid, diff_model):
    return rvi_solve(small_grid, diff_model, ControlGrid(20), record_spans=100_000)


def test_rvi_solution_invariants(auction_rvi, diff_model):
    sol = auction_rvi
    g = sol.grid
    assert sol.w[g.ref_index] == pytest.approx(sol.rho * g.dt, abs=1e-10)
    Z, A = np.meshgrid(g.points, sol.actions, indexing="ij")
    assert abs(sol.rho) <= np.max(np.abs(diff_model.reward(Z, A)))
    defect, pol = bellman_defect(sol, diff_model)
    assert defect <= 10 * 1e-9
    assert np.array_equal(pol, sol.policy)


def test_rvi_span_monotone_after_burn_in(auction_rvi):
    spans = auction_rvi.span_history
    tail = spans[len(spans) // 10:]
    assert np.all(np.diff(tail) <= 1e-15)


@pytest.mark.parametrize("drift", [lambda x, a: np.asarray(a) - np.asarray(x),
                                   lambda x, a: -0.5 * np.asarray(x) + 0 * np.asarray(a)])
def test_rvi_span_monotone_toy_models(drift):
    m = toy_model(drift, sigma=0.6, reward=lambda x, a: -np.abs(np.asarray(x) - 0.3) - 0.1 * np.asarray(a))
    sol = rvi_solve(make_grid(8, 0.1, None, 0.9), m, ControlGrid(4), record_spans=50_000)
    tail = sol.span_history[len(sol.span_history) // 10:]
    assert np.all(np.diff(tail) <= 1e-15)


def test_rvi_reward_shift(auction_rvi, diff_model):
    g = auction_rvi.grid
    Z, A = np.meshgrid(g.points, auction_rvi.actions, indexing="ij")
    shifted = rvi_solve(g, diff_model, ControlGrid(20), reward_table=diff_model.reward(Z, A) + 1.7)
    assert shifted.rho == pytest.approx(auction_rvi.rho + 1.7, abs=1e-8)
    assert np.array_equal(shifted.policy, auction_rvi.policy)


def test_rvi_errors(diff_model, small_grid):
    with pytest.raises(ConvergenceError) as info:
        rvi_solve(small_grid, diff_model, ControlGrid(2), max_iter=5)
    assert info.value.residual > 0 and info.value.iterations == 5
    with pytest.raises(CFLError):
        rvi_solve(make_grid(500, 0.04, None, default_L_scheme(diff_model.sigma)), diff_model, ControlGrid(2))


def test_solution_csv(auction_rvi, tmp_path):
    p = tmp_path / "sol.csv"
    auction_rvi.to_csv(p)
    lines = p.read_text().splitlines()
    assert lines[0] == "index,z,w,policy_action"
    assert len(lines) == auction_rvi.grid.n + 1
    assert set(auction_rvi.scalar_record()) == {"rho", "iterations", "residual", "wall_time_ms"}


# ---------------------------------------------------------------- jump

def test_policy_evaluate_constant_reward():
    P = sp.csr_matrix(np.array([[0.5, 0.5, 0], [0.2, 0.3, 0.5], [0, 0.9, 0.1]]))
    rho, W = policy_evaluate(P, np.full(3, 2.5), 0.3, 1)
    assert rho == pytest.approx(2.5, abs=1e-12)
    assert np.allclose(W, 2.5, atol=1e-12)


def test_policy_evaluate_uniform_rows():
    R = np.random.default_rng(0).normal(size=6)
    rho, _ = policy_evaluate(np.full((6, 6), 1 / 6), R, 0.2, 0)
    assert rho == pytest.approx(R.mean(), abs=1e-12)


@pytest.mark.parametrize("method", ["dense", "splu", "bicgstab"])
def test_policy_evaluate_stationary_oracle(method):
    P = np.array([[0.1, 0.6, 0.3], [0.4, 0.4, 0.2], [0.5, 0.0, 0.5]])
    R = np.array([1.0, -2.0, 0.5])
    rho, W = policy_evaluate(sp.csr_matrix(P), R, 0.25, 2, method)
    assert rho == pytest.approx(stationary(P) @ R, abs=1e-8)
    assert W[2] == rho
    assert np.max(np.abs((P - np.eye(3)) @ W / 0.25 - W[2] + R)) <= 1e-9 * np.max(np.abs(R))


def test_policy_evaluate_seven_states():
    rng = np.random.default_rng(4)
    P = rng.uniform(size=(7, 7))
    P /= P.sum(axis=1, keepdims=True)
    R = rng.normal(size=7)
    for m in ("dense", "splu", "bicgstab"):
        assert policy_evaluate(P, R, 0.1, 3, m)[0] == pytest.approx(stationary(P) @ R, abs=1e-8)


def test_policy_evaluate_bad_reference():
    with pytest.raises(ContractError):
        policy_evaluate(np.eye(2), np.ones(2), 0.5, 5)


def _jump(law, eps=0.25):
    from ergodic_control.model import AuctionReward, auction_law
    return JumpModel(law, eps, AuctionReward(auction_law()), (0.0, 1.0))


def test_kernels_point_mass_noise():
    law = NoiseLaw(PointMass(1.0), PointMass(1.0), PointMass(0.0), PointMass(0.5))
    jm = _jump(law)
    g = make_grid(10, 0.1)
    ks = estimate_empirical_kernels(g, jm, ControlGrid(2), 5, seed=0)
    for a, P in zip(ControlGrid(2).points, ks.matrices):
        P = P.toarray()
        target = g.project(g.points + 0.25 * (a - g.points))
        assert np.array_equal(P, np.eye(g.n)[target])


def test_kernels_rows_are_empirical_frequencies(jump_model):
    g = make_grid(20, 0.1)
    N = 37
    ks = estimate_empirical_kernels(g, jump_model, ControlGrid(3), N, seed=1)
    for P in ks.matrices:
        assert np.allclose(np.asarray(P.sum(axis=1)).ravel(), 1.0, atol=1e-14)
        assert np.allclose(P.data * N, np.round(P.data * N), atol=1e-9)
        assert P.data.min() > 0 and P.data.max() <= 1


@pytest.mark.parametrize("sampling", ["common", "independent"])
def test_kernels_two_point_binomial(sampling):
    # e1 = 1, e3 = +-v: targets x + eps (a e2 - x) +- sqrt(eps) v land in distinct cells
    v = 0.83  # keeps every target off the cell midpoints
    law = NoiseLaw(PointMass(1.0), PointMass(1.0), TwoPoint(-v, 0.5, v), PointMass(0.5))
    jm = _jump(law, 0.25)
    g = make_grid(20, 0.1)
    N = 4000
    ks = estimate_empirical_kernels(g, jm, ControlGrid(0), N, seed=2, sampling=sampling)
    P = ks.matrices[0].toarray()
    tol = 3 * math.sqrt(0.25 / N)
    for i in range(5, 15):
        x = g.points[i]
        lo, hi = g.project(x + 0.25 * (0 - x) - 0.5 * v), g.project(x + 0.25 * (0 - x) + 0.5 * v)
        assert lo != hi
        assert abs(P[i, lo] - 0.5) <= tol and abs(P[i, hi] - 0.5) <= tol


def test_kernels_deterministic(jump_model):
    g = make_grid(15, 0.1)
    a = estimate_empirical_kernels(g, jump_model, ControlGrid(3), 50, seed=9)
    b = estimate_empirical_kernels(g, jump_model, ControlGrid(3), 50, seed=9)
    for P, Q in zip(a.matrices, b.matrices):
        assert (P != Q).nnz == 0
    Z, A = np.meshgrid(g.points, ControlGrid(3).points, indexing="ij")
    R = jump_model.reward(Z, A)
    s1, s2 = policy_iterate(a, R, 0.25), policy_iterate(b, R, 0.25)
    assert s1.rho == s2.rho and np.array_equal(s1.w, s2.w) and np.array_equal(s1.policy, s2.policy)


def test_kernels_errors(jump_model):
    g = make_grid(5, 0.1)
    with pytest.raises(ContractError):
        estimate_empirical_kernels(g, jump_model, ControlGrid(1), 0, seed=0)
    with pytest.raises(ContractError):
        estimate_empirical_kernels(g, jump_model, ControlGrid(1), 5, seed=0, sampling="lhs")


def test_policy_iterate_single_action_equals_evaluation(jump_model):
    g = make_grid(15, 0.1)
    ks = estimate_empirical_kernels(g, jump_model, ControlGrid(0, 0.6, 0.6), 40, seed=3)
    R = jump_model.reward(g.points, 0.6)[:, None]
    sol = policy_iterate(ks, R, 0.25)
    rho, W = policy_evaluate(ks.matrices[0], R[:, 0], 0.25, g.ref_index)
    assert sol.rho == rho and np.array_equal(sol.w, W)


def test_policy_iterate_action_independent_problem():
    g = make_grid(6, 0.2)
    rng = np.random.default_rng(0)
    P = rng.uniform(size=(g.n, g.n))
    P = sp.csr_matrix(P / P.sum(axis=1, keepdims=True))
    cg = ControlGrid(3)
    ks = EmpiricalKernelSet(g, cg, [P] * 4, 10, 0)
    r = rng.normal(size=g.n)
    sol = policy_iterate(ks, np.repeat(r[:, None], 4, axis=1), 0.5)
    assert sol.iterations <= 2
    assert sol.rho == pytest.approx(policy_evaluate(P, r, 0.5, g.ref_index)[0], abs=1e-12)
    assert np.all(sol.policy == 0)


def test_policy_iterate_defect_and_normalisation(jump_model):
    g = make_grid(30, 0.1)
    cg = ControlGrid(10)
    ks = estimate_empirical_kernels(g, jump_model, cg, 100, seed=4)
    Z, A = np.meshgrid(g.points, cg.points, indexing="ij")
    R = jump_model.reward(Z, A)
    sol = policy_iterate(ks, R, 0.25)
    assert sol.w[g.ref_index] == sol.rho
    defect, greedy = jump_defect(sol, ks, R, 0.25)
    assert defect <= 10 * 1e-9
    assert np.array_equal(greedy, sol.policy)
    shifted = policy_iterate(ks, R + 1.7, 0.25)
    assert shifted.rho == pytest.approx(sol.rho + 1.7, abs=1e-10)
    assert np.array_equal(shifted.policy, sol.policy)


def test_policy_iterate_max_iter(jump_model):
    g = make_grid(30, 0.1)
    cg = ControlGrid(10)
    ks = estimate_empirical_kernels(g, jump_model, cg, 100, seed=4)
    Z, A = np.meshgrid(g.points, cg.points, indexing="ij")
    with pytest.raises(ConvergenceError):
        policy_iterate(ks, jump_model.reward(Z, A), 0.25, max_iter=1)


# ---------------------------------------------------------------- correction

def test_correction_zero_inputs(auction_rvi, diff_model, jump_model):
    g = auction_rvi.grid
    f = generator_gap_table(g, diff_model, auction_rvi, auction_rvi.actions)
    assert f.max() <= 1e-6
    # delta_r = -f makes the running reward vanish identically
    res = correction_solve(g, diff_model, auction_rvi, jump_model, delta_r_table=-f)
    assert res.delta_rho == pytest.approx(0.0, abs=1e-12)
    assert np.ptp(res.delta_w) <= 1e-12
    assert res.rho_corrected == pytest.approx(auction_rvi.rho, abs=1e-12)


def test_correction_refuses_non_optimal_base(auction_rvi, diff_model, jump_model):
    from dataclasses import replace
    bad = replace(auction_rvi, rho=auction_rvi.rho - 0.1)
    with pytest.raises(ConvergenceError):
        correction_solve(auction_rvi.grid, diff_model, bad, jump_model,
                         delta_r_table=np.zeros((auction_rvi.grid.n, auction_rvi.actions.size)))
