import dataclasses

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from slqpgd import optimizer
from slqpgd.forward import build_resolvent
from slqpgd.model import make_paper_example
from slqpgd.optimizer import (
    SolverConfig,
    StepSizeWarning,
    cost,
    estimate_lipschitz,
    hessian_apply,
    lipschitz_bound,
    project_box,
    solve,
    update_control,
)
from slqpgd.paths import TimeGrid

from builders import random_problem, scalar_problem

vec3 = arrays(np.float64, 3, elements=st.floats(-1e6, 1e6))


def test_project_box_example():
    np.testing.assert_array_equal(project_box([3.0, 0.0, -5.0], -2.0, 2.0), [2.0, 0.0, -2.0])


@given(vec3, vec3)
def test_project_box_properties(u, v):
    lo, hi = np.array([-2.0, -1.0, 0.0]), np.array([2.0, 3.0, 0.5])
    pu, pv = project_box(u, lo, hi), project_box(v, lo, hi)
    assert np.all(pu >= lo) and np.all(pu <= hi)
    np.testing.assert_array_equal(project_box(pu, lo, hi), pu)
    assert np.linalg.norm(pu - pv) <= np.linalg.norm(u - v) * (1 + 1e-15)
    np.testing.assert_array_equal(project_box(u, -np.inf, np.inf), u)


def test_update_with_kappa_equal_alpha_projects_zero():
    u = np.full((2, 5, 1), 0.7)
    out = update_control(u, np.zeros((2, 5, 1)), 0.3, 0.3, [[1.0]], [0.1], [2.0])
    np.testing.assert_array_equal(out, 0.1)


def test_update_shrink_with_benchmark_parameters():
    u = np.ones((3, 20, 4))
    out = update_control(u, np.zeros((3, 21, 10)), 0.04, 0.45, np.ones((10, 4)), -2.0, 2.0)
    np.testing.assert_allclose(out, 1 - 0.04 / 0.45, rtol=1e-15)
    assert abs(out[0, 0, 0] - 0.9111) < 1e-4


def test_update_interior_fixed_point():
    rng = np.random.default_rng(5)
    mat_N = rng.standard_normal((3, 2))
    p = rng.standard_normal((4, 6, 3)) * 0.1
    alpha = 0.7
    u = p @ mat_N / alpha
    assert np.all(np.abs(u) < 2.0)
    out = update_control(u, p, alpha, 1.9, mat_N, -2.0, 2.0)
    np.testing.assert_allclose(out, u, rtol=0, atol=1e-14)


def test_update_shape_mismatch():
    with pytest.raises(ValueError):
        update_control(np.zeros((1, 4, 2)), np.zeros((1, 3, 3)), 1.0, 1.0, np.zeros((3, 2)), -1, 1)


def test_cost_examples():
    g1 = TimeGrid(1.0, 4)
    p = scalar_problem()
    assert cost(p, g1, np.zeros((3, 5, 1)), np.zeros((3, 4, 1))) == 0.0
    x = np.zeros((1, 5, 1))
    x[0, -1] = 2.0
    assert cost(p, g1, x, np.zeros((1, 4, 1))) == pytest.approx(2.0, rel=1e-15)
    q = scalar_problem(B=0.0, D=0.0, alpha=1.0)
    assert cost(q, g1, np.ones((2, 5, 1)), np.ones((2, 4, 1))) == pytest.approx(0.5, rel=1e-15)


def test_cost_quadrature_nodes():
    # state counts on nodes 1..N, control on 0..N-1
    p = scalar_problem(B=1.0, D=0.0, alpha=1.0)
    g = TimeGrid(1.0, 2)
    x = np.array([[[100.0], [1.0], [2.0]]])
    u = np.array([[[3.0], [0.0]]])
    assert cost(p, g, x, u) == pytest.approx(0.5 * (0.5 * (1 + 4) + 0.5 * 9), rel=1e-15)


def test_cost_rejects_mismatch():
    with pytest.raises(ValueError):
        cost(scalar_problem(), TimeGrid(1.0, 4), np.zeros((3, 5, 1)), np.zeros((2, 4, 1)))
    with pytest.raises(ValueError):
        cost(scalar_problem(), TimeGrid(1.0, 4), np.zeros((3, 4, 1)), np.zeros((3, 4, 1)))


def test_lipschitz_trivial_cases():
    p = random_problem(3, alpha=0.3)
    g = TimeGrid(p.horizon_T, 8)
    assert estimate_lipschitz(p.replace(mat_N=np.zeros((4, 2))), g) == pytest.approx(0.3, rel=1e-12)
    zero = np.zeros((4, 4))
    assert estimate_lipschitz(p.replace(mat_B=zero, mat_D=zero), g) == pytest.approx(0.3, rel=1e-12)


def test_lipschitz_matches_dense_hessian():
    p = random_problem(11, alpha=0.2)
    g = TimeGrid(p.horizon_T, 6)
    res = build_resolvent(p, g)
    size = 6 * 2
    H = np.stack(
        [hessian_apply(p, g, res, e.reshape(6, 2)).ravel() for e in np.eye(size)], axis=1
    )
    # the Hessian is symmetric in the plain Euclidean inner product (h factors cancel)
    np.testing.assert_allclose(H, H.T, atol=1e-13)
    top = np.linalg.eigvalsh(H)[-1]
    assert estimate_lipschitz(p, g, res, max_iter=500, rtol=1e-14) == pytest.approx(top, rel=1e-8)
    assert np.linalg.eigvalsh(H)[0] >= p.alpha - 1e-12


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_lipschitz_below_closed_bound(seed):
    p = make_paper_example(seed)
    g = TimeGrid(p.horizon_T, 20)
    assert estimate_lipschitz(p, g) <= lipschitz_bound(p, g)


def test_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(n_iters=0)
    with pytest.raises(ValueError):
        SolverConfig(kappa=0.0)
    with pytest.raises(ValueError):
        SolverConfig(stop_tol=-1.0)
    with pytest.raises(ValueError):
        SolverConfig(initial_control=(3.0,)).start_control(make_paper_example(1))


def test_step_size_warning(quiet):
    p = random_problem(0)
    k = estimate_lipschitz(p, TimeGrid(p.horizon_T, 5))
    with pytest.warns(StepSizeWarning):
        r = solve(p, SolverConfig(n_steps=5, n_iters=1, kappa=0.5 * k, n_paths=3))
    assert r.warnings
    r = solve(p, SolverConfig(n_steps=5, n_iters=1, kappa=1.5 * k, n_paths=3))
    assert not r.warnings


def test_records_layout():
    p = random_problem(0, bound=0.2)
    r = solve(p, SolverConfig(n_steps=5, n_iters=4, kappa=2.0, n_paths=7))
    assert [rec.iteration for rec in r.records] == [0, 1, 2, 3, 4]
    assert np.isnan(r.records[0].control_change)
    assert all(np.isfinite(rec.cost) and rec.cost >= 0 for rec in r.records)
    assert r.controls.shape == (7, 5, 2) and r.states.shape == (7, 6, 4)
    np.testing.assert_allclose(r.records[-1].cost, cost(p, r.grid, r.states, r.controls), rtol=1e-14)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_monotone_descent_with_safe_step(seed):
    p = random_problem(seed, bound=0.3)
    g = TimeGrid(p.horizon_T, 8)
    k = estimate_lipschitz(p, g)
    r = solve(p, SolverConfig(n_steps=8, n_iters=15, kappa=k, n_paths=300, seed=seed))
    c = r.costs
    assert np.all(np.diff(c) <= 1e-12)


def test_tiny_free_residual_after_200_iterations():
    p = scalar_problem(sigma=1.0)
    g = TimeGrid(1.0, 2)
    k = estimate_lipschitz(p, g)
    r = solve(p, SolverConfig(n_steps=2, n_iters=200, kappa=1.2 * k, n_paths=64))
    res = [rec.optimality_residual for rec in r.records]
    assert res[-1] < 1e-8
    assert all(b <= a + 1e-15 for a, b in zip(res, res[1:]))


def test_controls_are_feasible_every_iteration(quiet):
    p = make_paper_example(4)
    r = solve(p, SolverConfig(n_paths=40, n_iters=6), keep_history=True)
    assert r.control_history.shape == (7, 40, 20, 4)
    assert np.all(np.abs(r.control_history) <= 2.0)
    assert np.any(np.abs(r.control_history) == 2.0)


def test_thread_count_does_not_change_results(monkeypatch):
    p = random_problem(2, bound=0.5)
    cfg = SolverConfig(n_steps=6, n_iters=3, kappa=2.0, n_paths=50, seed=4)
    whole = solve(p, cfg)
    monkeypatch.setattr(optimizer, "CHUNK_BUDGET", 700)
    assert optimizer.chunk_size(p, 6) < 50
    serial = solve(p, cfg, workers=1)
    threaded = solve(p, cfg, workers=3)
    np.testing.assert_array_equal(threaded.controls, serial.controls)
    assert [r.cost for r in threaded.records] == [r.cost for r in serial.records]
    # chunking only regroups path-local work; matrix blocking may differ by rounding
    np.testing.assert_allclose(serial.controls, whole.controls, rtol=0, atol=1e-13)


def test_early_stop():
    p = scalar_problem(sigma=0.5)
    g = TimeGrid(1.0, 3)
    k = estimate_lipschitz(p, g)
    cfg = SolverConfig(n_steps=3, n_iters=100, kappa=1.2 * k, n_paths=8, stop_tol=1e-6)
    r = solve(p, cfg)
    assert len(r.records) < 101
    assert r.records[-1].control_change < 1e-6
    assert all(rec.control_change >= 1e-6 for rec in r.records[1:-1])
    full = solve(p, dataclasses.replace(cfg, n_iters=r.records[-1].iteration, stop_tol=0.0))
    np.testing.assert_array_equal(full.controls, r.controls)


def test_contraction_small_instance():
    p = random_problem(21, alpha=0.5)
    g = TimeGrid(p.horizon_T, 6)
    kappa = 1.2 * estimate_lipschitz(p, g)
    cfg = SolverConfig(n_steps=6, n_iters=10, kappa=kappa, n_paths=60, seed=2)
    star = solve(p, dataclasses.replace(cfg, n_iters=100)).controls
    hist = solve(p, cfg, keep_history=True).control_history
    err = np.mean(np.sum((hist - star) ** 2, axis=(2, 3)), axis=1)
    ratio = err / err[0]
    bound = (1 - p.alpha / kappa) ** np.arange(11) * 1.05
    assert np.all(ratio <= bound)
