import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import converged_points, random_case, trees
from oracles import two_bus_lambda_star, two_bus_state
from radialvsi import (
    BaseInfeasible,
    DegenerateDirection,
    DimensionMismatch,
    LoadScenario,
    NotConverged,
    OperatingPoint,
    bfm_residual,
    find_loadability_limit,
    gen_feeder,
    reverse_edges_check,
    solve_power_flow,
    two_bus,
    uniform_ray,
    vsi,
)
from radialvsi.powerflow import DEFAULT_TOL, dumps


def test_flat_residual_zero(flat3):
    tree, scen = flat3
    res = bfm_residual(tree, scen, OperatingPoint.flat(3))
    assert res.shape == (4 * 3 + 2,)
    assert np.all(res == 0.0)


def test_two_bus_closed_form_residual():
    t = two_bus(0.1, 0.1)
    scen = LoadScenario([0.1], [0.0])
    op = two_bus_state(0.1, 0.1, 0.1, 0.0)
    assert np.max(np.abs(bfm_residual(t, scen, op))) <= 1e-12


def test_voltage_perturbation_is_affine(loaded_feeder):
    tree, scen, op = loaded_feeder
    n = tree.n
    base = bfm_residual(tree, scen, op)
    v = op.v.copy()
    v[1] += 0.01
    bumped = OperatingPoint(op.pbar, op.qbar, op.ell, v, op.p0, op.q0)
    diff = bfm_residual(tree, scen, bumped) - base
    drop = diff[2 * n + 2 : 3 * n + 2]
    # bus 1 is the receiving end of line 1 and the sending end of its children
    assert drop[0] == pytest.approx(-0.01, abs=1e-14)
    for c in tree.children[1]:
        assert drop[c - 1] == pytest.approx(0.01, abs=1e-14)
    others = [k for k in range(n) if k != 0 and k + 1 not in tree.children[1]]
    assert np.all(np.abs(drop[others]) <= 1e-14)


def test_residual_dimension_check(loaded_feeder):
    tree, scen, _ = loaded_feeder
    with pytest.raises(DimensionMismatch):
        bfm_residual(tree, scen, OperatingPoint.flat(tree.n + 1))


def test_zero_loads_flat_in_one_iteration(flat3):
    tree, scen = flat3
    rep = solve_power_flow(tree, scen)
    assert rep.converged and rep.iterations == 1
    np.testing.assert_array_equal(rep.op.v, 1.0)
    np.testing.assert_array_equal(rep.op.ell, 0.0)


def test_two_bus_matches_closed_form():
    t = two_bus(0.1, 0.1)
    op = solve_power_flow(t, LoadScenario([0.1], [0.1])).op
    ref = two_bus_state(0.1, 0.1, 0.1, 0.1)
    for name in ("pbar", "qbar", "ell", "v"):
        np.testing.assert_allclose(getattr(op, name), getattr(ref, name), atol=1e-10)
    assert op.p0 == pytest.approx(ref.p0, abs=1e-10)


def test_two_bus_infeasible():
    with pytest.raises(NotConverged):
        solve_power_flow(two_bus(0.1, 0.1), LoadScenario([10.0], [10.0]))


def test_two_bus_loadability_limit():
    t = two_bus(0.1, 0.1)
    trace = find_loadability_limit(t, LoadScenario.zeros(1), [1.0], [1.0], tol_lambda=1e-7)
    exact = two_bus_lambda_star(0.1, 0.1, 1.0, 1.0)
    assert exact == pytest.approx(1.25, rel=1e-15)
    assert abs(trace.lambda_star - exact) <= 1e-6
    assert trace.lam_lo <= exact <= trace.lam_hi


def test_degenerate_direction():
    with pytest.raises(DegenerateDirection):
        find_loadability_limit(two_bus(), LoadScenario.zeros(1), [0.0], [0.0])


def test_base_infeasible():
    with pytest.raises(BaseInfeasible):
        find_loadability_limit(two_bus(0.1, 0.1), LoadScenario([10.0], [10.0]), [1.0], [0.0])


def test_trace_structure():
    tree, scen = gen_feeder(15, seed=3)
    base, dp, dq = uniform_ray(scen)
    trace = find_loadability_limit(tree, base, dp, dq, tol_lambda=1e-6, grid=5)
    lams = trace.lambdas
    assert np.all(np.diff(lams) > 0)
    assert lams[-1] < trace.lambda_star <= min(trace.failures)
    assert trace.lam_hi - trace.lam_lo <= 1e-6
    # two-sided bracket
    solve_power_flow(tree, base.along(dp, dq, trace.lambda_star - 1e-6))
    with pytest.raises(NotConverged):
        solve_power_flow(tree, base.along(dp, dq, trace.lambda_star + 1e-6))


def test_vsi_steepens_near_limit():
    tree, scen = gen_feeder(20, seed=5)
    base, dp, dq = uniform_ray(scen)
    trace = find_loadability_limit(tree, base, dp, dq, tol_lambda=1e-7)
    lo, eps = trace.lam_lo, 1e-3

    def slope(lam):
        a, b = base.along(dp, dq, lam), base.along(dp, dq, lam + eps * lo)
        va = vsi(tree, a, solve_power_flow(tree, a).op)
        vb = vsi(tree, b, solve_power_flow(tree, b).op)
        return (vb - va) / (eps * lo)

    assert slope(lo * (1 - 2 * eps)) < 10 * slope(0.0) < 0


@pytest.mark.parametrize("seed", range(6))
def test_solution_properties(seed):
    tree, scen = random_case(seed, 2, 30)
    for s, op in converged_points(tree, scen):
        rep = solve_power_flow(tree, s)
        assert rep.converged and rep.residual_norm <= 10 * DEFAULT_TOL
        assert np.max(np.abs(bfm_residual(tree, s, op))) <= 10 * DEFAULT_TOL
        par = tree.parent[1:]
        cur = op.v[par] * op.ell - op.pbar**2 - op.qbar**2
        assert np.max(np.abs(cur)) <= 10 * DEFAULT_TOL
        assert np.all(op.ell >= 0) and np.all(op.v > 0)
        # losses close the balance at the slack bus
        assert op.p0 == pytest.approx(s.p.sum() + np.dot(tree.r, op.ell), abs=1e-9)
        assert op.q0 == pytest.approx(s.q.sum() + np.dot(tree.x, op.ell), abs=1e-9)
        if reverse_edges_check(tree, op).holds:
            assert np.all(op.v[1:] <= op.v[par] + 1e-12)


@given(trees(max_n=12), st.floats(0.0, 2.0))
def test_small_loads_converge(tree, scale):
    scen = LoadScenario(np.full(tree.n, 0.01 * scale), np.full(tree.n, 0.005 * scale))
    rep = solve_power_flow(tree, scen)
    assert rep.converged
    assert np.max(np.abs(bfm_residual(tree, scen, rep.op))) <= 10 * DEFAULT_TOL


def test_high_voltage_branch_selected():
    # the low-voltage root of the two-bus quadratic is also a residual zero; the solver must not return it
    r = x = 0.1
    p = q = 1.0
    op = solve_power_flow(two_bus(r, x), LoadScenario([p], [q])).op
    ref = two_bus_state(r, x, p, q)
    assert op.v[1] == pytest.approx(ref.v[1], abs=1e-10)
    assert op.v[1] > 0.5


def test_state_round_trip(loaded_feeder):
    tree, scen, op = loaded_feeder
    u = op.to_state()
    assert u.shape == (4 * tree.n + 2,)
    assert u[-2] == -op.p0 and u[-1] == -op.q0
    back = OperatingPoint.from_state(u, scen.v0)
    np.testing.assert_array_equal(back.v, op.v)
    assert back.p0 == op.p0
    with pytest.raises(DimensionMismatch):
        OperatingPoint.from_state(u[:-1], 1.0)


def test_report_json_full_precision(loaded_feeder):
    tree, scen, _ = loaded_feeder
    rep = solve_power_flow(tree, scen)
    obj = json.loads(rep.to_json())
    assert obj["converged"] is True
    assert obj["op"]["v"][3] == rep.op.v[3]
    assert json.loads(dumps({"a": float("nan")})) == {"a": None}
