import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slqpgd.forward import build_resolvent, solve_homogeneous
from slqpgd.model import NoiseSchedule
from slqpgd.optimizer import project_box
from slqpgd.oracle import (
    TreeModel,
    check_case,
    default_battery,
    format_reports,
    nodes_to_paths,
    recursion_history,
    tree_backward_exact,
    tree_conditional_control,
    tree_forward,
    tree_pgd,
)
from slqpgd.paths import TimeGrid

from builders import random_problem, scalar_problem


@pytest.mark.parametrize("k", [1, 2, 3])
def test_tree_moments(k):
    tree = TreeModel(TimeGrid(1.0, 4), k)
    w = tree.patterns
    np.testing.assert_allclose(w.mean(axis=0), 0.0, atol=1e-15)
    np.testing.assert_allclose(w.T @ w / len(w), 0.25 * np.eye(k), atol=1e-15)


def test_tree_size_guard():
    with pytest.raises(ValueError):
        TreeModel(TimeGrid(1.0, 13), 1)
    with pytest.raises(ValueError):
        TreeModel(TimeGrid(1.0, 9), 3)
    assert TreeModel(TimeGrid(1.0, 12), 2).n_nodes(12) == 2**24


def test_tree_ensemble_indexing():
    tree = TreeModel(TimeGrid(1.0, 3), 2)
    ens = tree.as_ensemble()
    assert ens.n_paths == 64
    # leaf 37 = digits (2, 1, 1) in base 4
    np.testing.assert_array_equal(ens.increments[37], tree.patterns[[2, 1, 1]])
    assert tree.node_of(37, 1) == 2 and tree.node_of(37, 2) == 9 and tree.node_of(37, 0) == 0


def test_zero_problem_zero_states():
    p = scalar_problem(x0=0.0)
    tree = TreeModel(TimeGrid(1.0, 3), 1)
    states = tree_forward(p, tree, [np.zeros((2**n, 1)) for n in range(3)])
    assert all(np.all(s == 0.0) for s in states)


def test_single_step_two_leaves():
    p = scalar_problem(sigma=1.0, x0=0.3, T=0.5)
    tree = TreeModel(TimeGrid(0.5, 1), 1)
    # sigma(0) = sin(0) = 0, so use a constant table instead
    p = p.replace(noise=NoiseSchedule.from_table([[[1.0]]]))
    x = tree_forward(p, tree, [np.zeros((1, 1))])
    np.testing.assert_allclose(sorted(x[1][:, 0]), [0.3 - np.sqrt(0.5), 0.3 + np.sqrt(0.5)], rtol=1e-15)
    adj = tree_backward_exact(p, tree, x)
    np.testing.assert_allclose(adj[0], [[-0.3]], rtol=1e-15)


def test_two_leaf_adjoint_with_control():
    p = scalar_problem(N=2.0, sigma=1.0, x0=0.3, T=0.5)
    tree = TreeModel(TimeGrid(0.5, 1), 1)
    x = tree_forward(p, tree, [np.array([[0.4]])])
    adj = tree_backward_exact(p, tree, x)
    np.testing.assert_allclose(adj[0], [[-(0.3 + 0.5 * 2.0 * 0.4)]], rtol=1e-15)


def test_tree_mean_matches_deterministic_recursion():
    p = random_problem(4, d=2, m=2, k=2)
    g = TimeGrid(p.horizon_T, 4)
    tree = TreeModel(g, 2)
    u = np.random.default_rng(0).standard_normal((4, 2))
    x = tree_forward(p, tree, [np.tile(u[n], (tree.n_nodes(n), 1)) for n in range(4)])
    res = build_resolvent(p, g)
    free = np.stack([res.powers[n] @ p.x0 for n in range(5)])
    expect = solve_homogeneous(p, g, u) + free
    for n in range(5):
        np.testing.assert_allclose(x[n].mean(axis=0), expect[n], rtol=1e-13, atol=1e-14)


def test_zero_weights_zero_adjoint():
    p = random_problem(1, d=2, m=1, k=1).replace(mat_B=np.zeros((2, 2)), mat_D=np.zeros((2, 2)))
    tree = TreeModel(TimeGrid(p.horizon_T, 3), 1)
    x = tree_forward(p, tree, [np.ones((2**n, 1)) for n in range(3)])
    assert all(np.all(v == 0.0) for v in tree_backward_exact(p, tree, x))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_backward_one_step_residual(seed):
    rng = np.random.default_rng(seed)
    p = random_problem(seed, d=2, m=2, k=2).replace(mat_M=rng.standard_normal((2, 2)), mat_M1=None)
    g = TimeGrid(p.horizon_T, 4)
    tree = TreeModel(g, 2)
    ctrl = [rng.standard_normal((tree.n_nodes(n), 2)) for n in range(4)]
    x = tree_forward(p, tree, ctrl)
    adj = tree_backward_exact(p, tree, x)
    lhs_mat = np.eye(2) - g.step_h * p.mat_M.T
    for n in range(4):
        lhs = adj[n] @ lhs_mat.T
        rhs = tree.average_children(adj[n + 1] - g.step_h * x[n + 1] @ p.mat_B.T)
        assert np.max(np.abs(lhs - rhs)) <= 1e-12 * max(1.0, np.max(np.abs(rhs)))


def test_conditional_control_of_constant():
    tree = TreeModel(TimeGrid(1.0, 3), 1)
    ctrl = [np.full((2**n, 2), 0.25) for n in range(3)]
    for key, vals in tree_conditional_control(tree, ctrl).items():
        assert np.all(vals == 0.25)


def test_conditional_control_averages():
    tree = TreeModel(TimeGrid(1.0, 2), 1)
    ctrl = [np.array([[5.0]]), np.array([[1.0], [3.0]])]
    out = tree_conditional_control(tree, ctrl)
    assert out[(0, 1)][0, 0] == 2.0 and out[(1, 1)][1, 0] == 3.0 and out[(0, 0)][0, 0] == 5.0


@pytest.mark.parametrize("case", default_battery(8, seed=77), ids=lambda c: c.label)
def test_free_control_exactness(case):
    report = check_case(case)
    assert report.adjoint_error <= 1e-10
    assert report.table_error <= 1e-10


def test_first_constrained_table_is_projection_of_exact_mean():
    # the l = 1 entry is P_ad of the exact conditional mean of the unprojected
    # gradient step; its gap to E[P_ad(step) | F_n] is a Jensen-type gap that
    # vanishes once the projection is inactive or the step is F_n-measurable
    for case in default_battery(12, seed=5):
        p = case.problem.with_box(-0.1, 0.1)
        g = TimeGrid(p.horizon_T, case.n_steps)
        tree = TreeModel(g, p.dim_k)
        _, _, t_p = tree_pgd(p, tree, case.initial_control, case.kappa, 1)
        _, tables = recursion_history(p, tree, case.kappa, 1, case.initial_control)
        step = [
            (1 - p.alpha / case.kappa) * case.initial_control + t_p[0][n] @ p.mat_N / case.kappa
            for n in range(case.n_steps)
        ]
        exact_step = tree_conditional_control(tree, step)
        leaves = np.arange(tree.n_nodes(case.n_steps))
        for (n, r), vals in exact_step.items():
            expect = project_box(vals, p.bounds_lo, p.bounds_hi)[tree.node_of(leaves, n)]
            np.testing.assert_allclose(tables[1][:, n, r], expect, rtol=0, atol=1e-12)


def test_constrained_gap_is_zero_without_noise():
    for case in default_battery(10, seed=9):
        p = case.problem.replace(noise=NoiseSchedule.zero(case.problem.dim_d, case.problem.dim_k))
        report = check_case(type(case)(case.label, p, case.n_steps, case.kappa, case.initial_control))
        assert max(report.gaps) <= 1e-12


def test_nodes_to_paths_layout():
    tree = TreeModel(TimeGrid(1.0, 2), 1)
    vals = [np.array([[1.0]]), np.array([[2.0], [3.0]]), np.array([[4.0], [5.0], [6.0], [7.0]])]
    out = nodes_to_paths(tree, vals)
    np.testing.assert_array_equal(out[:, :, 0], [[1, 2, 4], [1, 2, 5], [1, 3, 6], [1, 3, 7]])


def test_report_table_lists_dimensions():
    reports = [check_case(c) for c in default_battery(3)]
    text = format_reports(reports)
    for r in reports:
        p = r.case.problem
        assert f"d={p.dim_d} m={p.dim_m} k={p.dim_k} N={r.case.n_steps}" in text
