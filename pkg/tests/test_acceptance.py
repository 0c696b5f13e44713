"""Acceptance suite: one PASS/FAIL line per criterion, printed to the terminal."""

import math
import os
import time

import numpy as np
import pytest

from conftest import converged_points, random_case
from oracles import fd_jacobian, two_bus_lambda_star, walk_path_network_det
from radialvsi import (
    CommGraph,
    LoadScenario,
    OperatingPoint,
    avsi,
    avsi_terms,
    build_full_jacobian,
    build_reduced_jacobian,
    bundled_feeder,
    find_loadability_limit,
    gen_feeder,
    hierarchical_aggregate,
    index_report,
    log_det,
    parse_case,
    from_matpower,
    path_impedances,
    path_network,
    random_partition,
    run_consensus,
    solve_power_flow,
    spectral_radius,
    star_network,
    two_bus,
    uniform_ray,
    vsi,
)
from radialvsi.experiments import ScenarioSpec, run_random_ensemble, run_uncertainty, timing_study

IEEE123_ENV = "RADIALVSI_IEEE123"


@pytest.fixture
def verdict(capsys):
    def emit(name, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        assert ok, detail

    return emit


def test_determinant_equality(verdict):
    t0 = time.perf_counter()
    worst, signs_ok, points = 0.0, True, 0
    for seed in range(50):
        tree, scen = random_case(10_000 + seed, 2, 20)
        for s, op in converged_points(tree, scen, fractions=(0.5, 0.99)):
            full = log_det(build_full_jacobian(tree, s, op))
            red = log_det(build_reduced_jacobian(tree, s, op))
            signs_ok &= full.sign == red.sign
            worst = max(worst, abs(full.log_abs - red.log_abs) / max(abs(red.log_abs), 1e-300))
            points += 1
    dt = time.perf_counter() - t0
    verdict(
        "determinant equality",
        signs_ok and worst <= 1e-8 and dt < 10,
        f"{points} points, signs agree={signs_ok}, max rel log-det gap {worst:.2e}, {dt:.2f}s",
    )


def test_full_jacobian_against_finite_differences(verdict):
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(10):
        tree, scen = random_case(20_000 + seed, 2, 20)
        for s, op in converged_points(tree, scen, fractions=(0.3, 0.95)):
            J = build_full_jacobian(tree, s, op)
            F = fd_jacobian(tree, s, op)
            scale = np.maximum(np.abs(F).max(axis=0), 1.0)
            worst = max(worst, float(np.max(np.abs(J - F).max(axis=0) / scale)))
    dt = time.perf_counter() - t0
    verdict(
        "jacobian vs finite differences",
        worst <= 1e-5 and dt < 30,
        f"max column-relative gap {worst:.2e}, {dt:.2f}s",
    )


def test_two_bus_exactness(verdict):
    r, x, dp, dq = 0.1, 0.1, 1.0, 1.0
    t = two_bus(r, x)
    trace = find_loadability_limit(t, LoadScenario.zeros(1), [dp], [dq], tol_lambda=1e-8, grid=40)
    gap = 0.0
    for step in trace.steps:
        op = step.report.op
        gap = max(gap, abs(avsi(t, op) - vsi(t, LoadScenario([dp * step.lam], [dq * step.lam]), op)))
    lam_err = abs(trace.lambda_star - two_bus_lambda_star(r, x, dp, dq))
    verdict(
        "two-bus exactness",
        gap <= 1e-12 and lam_err <= 1e-6,
        f"{len(trace.steps)} sweep points, max |AVSI-VSI| {gap:.2e}, lambda* error {lam_err:.2e}",
    )


def test_linear_feeder_determinant(verdict):
    r, x = 0.02, 0.03
    worst = 0.0
    for n in (2, 5, 10):
        p, q = np.zeros(n), np.zeros(n)
        p[0], q[0] = 0.4, 0.2
        scen = LoadScenario(p, q)
        tree = path_network(n, r, x)
        op = solve_power_flow(tree, scen).op
        ld = log_det(build_reduced_jacobian(tree, scen, op))
        ref = walk_path_network_det(op, r, x, scen.v0)
        worst = max(worst, abs(ld.sign * math.exp(ld.log_abs) - ref) / abs(ref))
    verdict("linear feeder determinant", worst <= 1e-10, f"max rel error {worst:.2e} over n=2,5,10")


def test_sandwich_bounds(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(30_000)
    checked, bad, rho_max = 0, [], 0.0
    for seed in range(20):
        n = int(rng.integers(5, 61))
        tree, scen = gen_feeder(n, seed=30_000 + seed)
        base, dp, dq = uniform_ray(scen)
        paths = path_impedances(tree)
        trace = find_loadability_limit(
            tree, base, dp, dq, grid=20, index_fn=lambda t, s, op: index_report(t, s, op, paths=paths)
        )
        for step in trace.steps:
            rep = step.index
            if not rep.assumption1_holds:
                continue
            checked += 1
            rho_max = max(rho_max, rep.rho)
            upper = rep.vsi - rep.rho * math.log1p(-rep.rho) if rep.rho < 1 else math.inf
            ok = (
                rep.rho < 1
                and rep.vsi <= rep.avsi + 1e-12
                and rep.avsi <= upper + 1e-12
            )
            if not ok:
                bad.append((seed, step.lam))
    dt = time.perf_counter() - t0
    verdict(
        "sandwich bounds",
        checked > 0 and not bad and dt < 120,
        f"{checked} points, {len(bad)} violations, max rho {rho_max:.6f}, {dt:.2f}s",
    )


def _test_networks():
    nets = [two_bus(), path_network(10), star_network(7), bundled_feeder()[0]]
    nets += [gen_feeder(n, seed=s)[0] for s, n in enumerate((3, 12, 25, 60))]
    nets += [random_case(40_000 + s, 2, 20)[0] for s in range(10)]
    return nets


def test_flat_identities(verdict):
    worst = 0.0
    nets = _test_networks()
    for tree in nets:
        scen = LoadScenario.zeros(tree.n)
        for op in (OperatingPoint.flat(tree.n), solve_power_flow(tree, scen).op):
            J = build_reduced_jacobian(tree, scen, op)
            vals = (
                abs(vsi(tree, scen, op)),
                abs(avsi(tree, op)),
                spectral_radius(J),
                float(np.max(np.abs(J - np.eye(tree.n)))),
            )
            worst = max(worst, *vals)
    verdict("flat-solution identities", worst <= 1e-12, f"{len(nets)} networks, max deviation {worst:.2e}")


def _consensus_graphs():
    rng = np.random.default_rng(50_000)
    graphs = []
    for k in range(15):
        size = int(rng.integers(2, 101))
        graphs.append(CommGraph.random_connected(size, int(rng.integers(0, 2 * size)), 50_000 + k))
    for k in range(5):
        graphs.append(CommGraph.from_tree(gen_feeder(int(rng.integers(10, 101)), seed=50_100 + k)[0]))
    return graphs


def test_consensus_correctness(verdict):
    rounds, mean_drift, spread_gap, all_conv = 0, 0.0, 0.0, True
    for k, g in enumerate(_consensus_graphs()):
        x0 = np.random.default_rng(k).normal(size=g.size)
        tr = run_consensus(g, x0, tol=1e-9, max_rounds=100_000, keep_states=True)
        all_conv &= tr.converged
        rounds = max(rounds, tr.converged_round or 100_000)
        mean_drift = max(mean_drift, float(np.max(np.abs(tr.states.mean(axis=1) - x0.mean()))))
        spread_gap = max(spread_gap, float(np.max(np.abs(tr.final - x0.mean()))))
    verdict(
        "consensus correctness",
        all_conv and spread_gap <= 1e-9 and mean_drift <= 1e-12,
        f"20 graphs, max rounds {rounds}, max |x-mean| {spread_gap:.2e}, mean drift {mean_drift:.2e}",
    )


def test_hierarchy_exactness(verdict):
    worst, cases = 0.0, 0
    for s, n in enumerate((5, 20, 60, 100)):
        tree, scen = gen_feeder(n, seed=60_000 + s)
        a, h = avsi_terms(tree, solve_power_flow(tree, scen).op)
        for k in range(10):
            worst = max(worst, abs(hierarchical_aggregate(random_partition(range(1, n + 1), k), h)[2] - a))
            cases += 1
    verdict("hierarchy exactness", worst <= 1e-13, f"{cases} partitions, max gap {worst:.2e}")


def test_complexity_scaling(verdict):
    table = timing_study(sizes=(100, 200, 400, 800), repeats=5)
    sa, sv = table.summary["avsi_slope"], table.summary["vsi_slope"]
    verdict(
        "complexity scaling",
        0.7 <= sa <= 1.3 and 2.5 <= sv <= 3.5,
        f"AVSI slope {sa:.3f} (want 0.7..1.3), VSI slope {sv:.3f} (want 2.5..3.5)",
    )


def _reference_feeder():
    path = os.environ.get(IEEE123_ENV)
    if not path:
        return None
    text = open(path).read()
    return from_matpower(text) if path.endswith(".m") else parse_case(text)


def test_reference_feeder_ensemble(verdict):
    ref = _reference_feeder()
    if ref is not None:
        tree, scen = ref
        summ = run_random_ensemble(tree, scen, ScenarioSpec(network="ref", mode="random", count=1000)).summary
        v, e = summ["vsi"]["avg"], summ["error_pct"]["avg"]
        verdict(
            "reference 123-bus ensemble",
            abs(v - (-1.106)) <= 0.05 and abs(abs(e) - 3.64) <= 1.5,
            f"avg VSI {v:.4f}, avg pct error {e:.3f}% over {summ['scenarios']} scenarios",
        )
        return
    tree, scen = bundled_feeder()
    base, dp, dq = uniform_ray(scen)
    trace = find_loadability_limit(tree, base, dp, dq)
    last = trace.last
    rep = index_report(tree, base.along(dp, dq, last.lam), last.report.op)
    verdict(
        "bundled feeder AVSI at the limit",
        rep.assumption1_holds and -1.4 <= rep.avsi <= -0.8,
        f"n={tree.n}, lambda*={trace.lambda_star:.4f}, AVSI {rep.avsi:.4f}, VSI {rep.vsi:.4f}, "
        f"assumption holds={rep.assumption1_holds}",
    )


def test_uncertainty_robustness(verdict):
    tree, scen = bundled_feeder()
    assert tree.n >= 50
    table, _ = run_uncertainty(tree, scen, ScenarioSpec(network="bundled", mode="uncertainty", uncertainty_pct=0.25))
    ev, ea = table.summary["limit_vsi_pct_err"], table.summary["limit_avsi_pct_err"]
    verdict(
        "uncertainty robustness",
        ea < ev,
        f"at the limit: AVSI pct error {ea:.3f}%, VSI pct error {ev}%"
        f" (perturbed VSI valid={table.summary['limit_perturbed_vsi_valid']})",
    )
