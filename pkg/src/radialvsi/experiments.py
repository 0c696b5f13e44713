"""Experiment protocols: sweeps to collapse, random ensembles, DG penetration,
parameter uncertainty and a timing harness.

Every protocol returns plain rows (lists of floats) plus a header so results
can be written with :func:`write_csv`; the ScenarioSpec that produced them is written
next to the CSV as a JSON sidecar.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import timeit
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import InfeasibleError, InputError
from .index import diag_terms_local, index_report
from .jacobian import build_reduced_jacobian, log_det
from .network import LoadScenario, path_impedances
from .powerflow import DEFAULT_TOL_LAMBDA, find_loadability_limit, solve_power_flow, uniform_ray

log = logging.getLogger(__name__)

MODES = ("sweep", "random_ensemble", "dg_penetration", "uncertainty")
DEFAULT_LEVELS = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)
TIMING_SIZES = (100, 200, 400, 800)


@dataclass
class ScenarioSpec:
    network: str = None
    mode: str = "sweep"
    count: int = 1000
    seed: int = 0
    power_factor: float = 0.9
    dg_fraction: float = 0.2
    penetration_levels: tuple = DEFAULT_LEVELS
    uncertainty_pct: float = 0.25
    dg_count: int = 100
    points: int = 20
    tol_lambda: float = DEFAULT_TOL_LAMBDA
    load_spread: tuple = (0.5, 1.5)

    def __post_init__(self):
        if self.mode not in MODES:
            raise InputError(f"mode must be one of {MODES}")
        if int(self.count) < 1 or int(self.dg_count) < 1:
            raise InputError("count must be >= 1")
        self.penetration_levels = tuple(float(v) for v in self.penetration_levels)
        if any(not 0.0 <= v <= 1.0 for v in self.penetration_levels):
            raise InputError("penetration levels must lie in [0, 1]")
        if not 0.0 <= self.uncertainty_pct < 1.0:
            raise InputError("uncertainty_pct must lie in [0, 1)")
        if not 0.0 < self.power_factor <= 1.0:
            raise InputError("power_factor must lie in (0, 1]")
        if not 0.0 <= self.dg_fraction <= 1.0:
            raise InputError("dg_fraction must lie in [0, 1]")
        if not self.tol_lambda > 0:
            raise InputError("tol_lambda must be positive")
        lo, hi = self.load_spread
        if not 0 <= lo <= hi:
            raise InputError("load_spread must be an ordered nonnegative pair")
        self.load_spread = (float(lo), float(hi))

    def to_dict(self):
        d = asdict(self)
        d["penetration_levels"] = list(self.penetration_levels)
        d["load_spread"] = list(self.load_spread)
        return d


@dataclass
class Table:
    header: tuple
    rows: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def column(self, name):
        k = self.header.index(name)
        return np.array([row[k] for row in self.rows], dtype=float)

    def to_csv(self):
        return format_csv(self.header, self.rows)


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if v is None:
        return ""
    return repr(float(v))


def format_csv(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def write_csv(path, table, spec=None):
    """Write ``table`` to ``path`` and, when ``spec`` is given, ``path + '.json'``."""
    with open(path, "w", newline="") as fh:
        fh.write(table.to_csv())
    if spec is not None:
        side = {"spec": spec.to_dict(), "summary": table.summary}
        with open(str(path) + ".json", "w") as fh:
            json.dump(_clean(side), fh, indent=1, sort_keys=True)


def _clean(obj):
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        return float(obj) if math.isfinite(obj) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


# --------------------------------------------------------------------------
# sweep

SWEEP_HEADER = (
    "lambda", "vsi", "avsi", "error", "rho", "n_rho", "bound_lower", "bound_upper",
    "bound_conjecture", "lower_ok", "upper_ok", "assumption1",
)


def _report_row(lam, rep):
    return [
        lam, rep.vsi, rep.avsi, rep.error, rep.rho, rep.n_rho, rep.bound_lower,
        rep.bound_upper, rep.bound_conjecture,
        "" if rep.lower_ok is None else int(rep.lower_ok),
        "" if rep.upper_ok is None else int(rep.upper_ok),
        int(rep.assumption1_holds),
    ]


def run_sweep(tree, scenario, spec=None, direction=None):
    """Continuation to the loadability limit with an index report per converged step.

    Without ``direction`` the loads of ``scenario`` are scaled from zero
    (the uniform ray); otherwise ``direction=(dp, dq)`` is added to
    ``scenario`` as base.
    """
    spec = spec or ScenarioSpec()
    if direction is None:
        base, dp, dq = uniform_ray(scenario)
    else:
        base, (dp, dq) = scenario, direction
    paths = path_impedances(tree)
    trace = find_loadability_limit(
        tree, base, dp, dq, tol_lambda=spec.tol_lambda, grid=spec.points,
        index_fn=lambda t, s, op: index_report(t, s, op, paths=paths),
    )
    table = Table(SWEEP_HEADER)
    for step in trace.steps:
        table.rows.append(_report_row(step.lam, step.index))
    table.summary = {
        "lambda_star": trace.lambda_star, "lambda_lo": trace.lam_lo, "lambda_hi": trace.lam_hi,
        "steps": len(trace.steps), "failed_attempts": len(trace.failures),
    }
    return table, trace


# --------------------------------------------------------------------------
# random ensemble and DG penetration

ENSEMBLE_HEADER = (
    "scenario", "lambda_star", "vsi", "avsi", "error", "error_pct", "rho", "assumption1",
    "lower_ok", "upper_ok",
)
SUMMARY_COLUMNS = ("vsi", "avsi", "error", "error_pct")


def _multipliers(spec, n):
    seqs = np.random.SeedSequence(spec.seed).spawn(spec.count)
    lo, hi = spec.load_spread
    for seq in seqs:
        yield np.random.default_rng(seq).uniform(lo, hi, size=n)


def _limit_report(tree, base, dp, dq, spec, paths):
    trace = find_loadability_limit(tree, base, dp, dq, tol_lambda=spec.tol_lambda)
    last = trace.last
    scen = base.along(dp, dq, last.lam)
    return trace, index_report(tree, scen, last.report.op, paths=paths)


def _ensemble(tree, directions, spec, paths):
    table = Table(ENSEMBLE_HEADER)
    failures = []
    for k, (dp, dq) in enumerate(directions):
        base = LoadScenario.zeros(tree.n, directions.v0)
        try:
            trace, rep = _limit_report(tree, base, dp, dq, spec, paths)
        except InfeasibleError as exc:
            log.warning("scenario %d failed: %s", k, exc)
            failures.append(k)
            continue
        if not (rep.vsi_valid and rep.avsi_valid):
            log.warning("scenario %d: index invalid at the last converged point", k)
            failures.append(k)
            continue
        table.rows.append([
            k, trace.lambda_star, rep.vsi, rep.avsi, rep.error, rep.error_pct, rep.rho,
            int(rep.assumption1_holds),
            "" if rep.lower_ok is None else int(rep.lower_ok),
            "" if rep.upper_ok is None else int(rep.upper_ok),
        ])
    table.summary = summarize(table)
    table.summary["failures"] = len(failures)
    table.summary["failed_scenarios"] = failures
    return table


def summarize(table, columns=SUMMARY_COLUMNS):
    out = {"scenarios": len(table.rows)}
    for name in columns:
        col = table.column(name) if table.rows else np.zeros(0)
        out[name] = (
            {"min": float(col.min()), "avg": float(col.mean()), "max": float(col.max())}
            if col.size else {"min": math.nan, "avg": math.nan, "max": math.nan}
        )
    return out


class _Directions:
    """Lazily generated load directions for an ensemble (net demand per bus)."""

    def __init__(self, scenario, spec, dg=None):
        self.scenario, self.spec, self.dg = scenario, spec, dg
        self.v0 = scenario.v0

    def __iter__(self):
        p0, q0 = self.scenario.p, self.scenario.q
        for m in _multipliers(self.spec, p0.shape[0]):
            p, q = m * p0, m * q0
            if self.dg is not None:
                gp, gq = self.dg(p, q)
                p, q = p - gp, q - gq
            yield p, q


def run_random_ensemble(tree, scenario, spec=None):
    """Indices at the loadability limit for ``spec.count`` random loadings.

    Scenario ``k`` multiplies every bus demand by its own factor drawn
    uniformly from ``spec.load_spread`` and scales the result from zero to
    collapse. Failed scenarios are logged and counted, not raised.
    """
    spec = spec or ScenarioSpec(mode="random_ensemble")
    scenario.check(tree)
    return _ensemble(tree, _Directions(scenario, spec), spec, path_impedances(tree))


def dg_buses(n, spec):
    """Seeded uniform choice of ``ceil(dg_fraction * n)`` generator buses (ids ``1..n``)."""
    m = math.ceil(spec.dg_fraction * n - 1e-12)
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0xD6]))
    return np.sort(rng.choice(np.arange(1, n + 1), size=min(m, n), replace=False))


def dg_injection(buses, n, level, pf):
    """Callable mapping loads ``(p, q)`` to DG injections for a penetration ``level``.

    Total DG apparent power is ``level`` times the total load apparent power,
    split equally among ``buses``, each producing at power factor ``pf``.
    """
    sin = math.sqrt(max(0.0, 1.0 - pf * pf))

    def inject(p, q):
        gp, gq = np.zeros(n), np.zeros(n)
        if level == 0 or len(buses) == 0:
            return gp, gq
        s_each = level * float(np.sum(np.hypot(p, q))) / len(buses)
        gp[buses - 1] = s_each * pf
        gq[buses - 1] = s_each * sin
        return gp, gq

    return inject


DG_HEADER = (
    "penetration", "vsi_avg", "avsi_avg", "eps_avg", "eps_max", "eps_pct_avg", "eps_pct_max",
    "scenarios", "failures", "assumption1_share",
)


def run_dg_penetration(tree, scenario, spec=None):
    """Random-ensemble protocol with distributed generation at each penetration level.

    Level 0 injects nothing and reproduces :func:`run_random_ensemble` with
    ``count = dg_count``. The scaled quantity is the net demand.
    """
    spec = spec or ScenarioSpec(mode="dg_penetration")
    scenario.check(tree)
    sub = ScenarioSpec(**{**spec.to_dict(), "count": spec.dg_count, "mode": "random_ensemble"})
    buses = dg_buses(tree.n, spec)
    paths = path_impedances(tree)
    out = Table(DG_HEADER)
    per_level = {}
    for level in spec.penetration_levels:
        inj = dg_injection(buses, tree.n, level, spec.power_factor)
        t = _ensemble(tree, _Directions(scenario, sub, None if level == 0 else inj), sub, paths)
        per_level[level] = t
        if t.rows:
            err = t.column("error")
            pct = t.column("error_pct")
            a1 = t.column("assumption1")
            row = [
                level, t.column("vsi").mean(), t.column("avsi").mean(), err.mean(), err.max(),
                pct.mean(), pct.max(), len(t.rows), t.summary["failures"], a1.mean(),
            ]
        else:
            row = [level] + [math.nan] * 6 + [0, t.summary["failures"], math.nan]
        out.rows.append(row)
    out.summary = {"dg_buses": buses.tolist()}
    return out, per_level


# --------------------------------------------------------------------------
# parameter uncertainty

UNCERTAINTY_HEADER = (
    "lambda", "vsi_exact", "avsi_exact", "vsi_perturbed", "avsi_perturbed",
    "vsi_perturbed_pct_err", "avsi_perturbed_pct_err", "avsi_self_pct_err",
)


def _pct(a, b):
    if not math.isfinite(a):
        return math.inf
    if b == 0:
        return 0.0 if a == 0 else math.inf
    return 100.0 * abs(a - b) / abs(b)


def perturbed_indices(tree, scenario, op, pct, paths_exact=None):
    """Exact and perturbed ``(vsi, avsi)`` pairs at the true state ``op``.

    The perturbed model scales every impedance by ``1 + pct``; the state
    (voltages, currents, flows) is the one of the exact model, as a monitor
    with wrong line data would measure it. A perturbed determinant that is
    not positive gives ``nan``.
    """
    pert = tree.scaled_impedances(1.0 + pct)
    rows = []
    for t, paths in ((tree, paths_exact), (pert, None)):
        paths = path_impedances(t) if paths is None else paths
        ld = log_det(build_reduced_jacobian(t, scenario, op))
        v = ld.log_abs / t.n if ld.sign == 1 else math.nan
        terms = diag_terms_local(t, op.v[1:], op.ell, paths)
        a = float(np.mean(np.log(terms))) if np.all(terms > 0) else -math.inf
        rows.append((v, a))
    return rows[0], rows[1]


def _uncertainty_row(lam, exact, pert):
    (ve, ae), (vp, ap) = exact, pert
    return [lam, ve, ae, vp, ap, _pct(vp, ve), _pct(ap, ve), _pct(ap, ae)]


def run_uncertainty(tree, scenario, spec=None):
    """Percentage errors of both indices under over-estimated impedances along a sweep.

    ``vsi_perturbed_pct_err`` and ``avsi_perturbed_pct_err`` both compare
    with the exact-parameter VSI; ``avsi_self_pct_err`` compares the
    perturbed AVSI with the exact AVSI.
    """
    spec = spec or ScenarioSpec(mode="uncertainty")
    base, dp, dq = uniform_ray(scenario)
    trace = find_loadability_limit(tree, base, dp, dq, tol_lambda=spec.tol_lambda, grid=spec.points)
    paths = path_impedances(tree)
    table = Table(UNCERTAINTY_HEADER)
    for step in trace.steps:
        scen = base.along(dp, dq, step.lam)
        ex, pe = perturbed_indices(tree, scen, step.report.op, spec.uncertainty_pct, paths)
        table.rows.append(_uncertainty_row(step.lam, ex, pe))
    last = table.rows[-1]
    table.summary = {
        "lambda_star": trace.lambda_star,
        "limit_vsi_pct_err": last[5], "limit_avsi_pct_err": last[6],
        "limit_perturbed_vsi_valid": bool(math.isfinite(last[3])),
    }
    return table, trace


UNCERTAINTY_ENSEMBLE_HEADER = ("scenario", "lambda_star",) + UNCERTAINTY_HEADER[1:]


def run_uncertainty_ensemble(tree, scenario, spec=None):
    """Random-loading variant: perturbed-parameter errors at each scenario's limit."""
    spec = spec or ScenarioSpec(mode="uncertainty")
    paths = path_impedances(tree)
    table = Table(UNCERTAINTY_ENSEMBLE_HEADER)
    failures = []
    for k, (dp, dq) in enumerate(_Directions(scenario, spec)):
        base = LoadScenario.zeros(tree.n, scenario.v0)
        try:
            trace = find_loadability_limit(tree, base, dp, dq, tol_lambda=spec.tol_lambda)
        except InfeasibleError as exc:
            log.warning("scenario %d failed: %s", k, exc)
            failures.append(k)
            continue
        last = trace.last
        scen = base.along(dp, dq, last.lam)
        ex, pe = perturbed_indices(tree, scen, last.report.op, spec.uncertainty_pct, paths)
        table.rows.append([k, trace.lambda_star] + _uncertainty_row(last.lam, ex, pe)[1:])
    summ = {"scenarios": len(table.rows), "failures": len(failures)}
    for name in ("vsi_perturbed_pct_err", "avsi_perturbed_pct_err", "avsi_self_pct_err"):
        col = table.column(name) if table.rows else np.zeros(0)
        fin = col[np.isfinite(col)]
        summ[name] = {
            "avg": float(fin.mean()) if fin.size else math.nan,
            "max": float(fin.max()) if fin.size else math.nan,
            "non_finite": int(col.size - fin.size),
        }
    table.summary = summ
    return table


# --------------------------------------------------------------------------
# timing

TIMING_HEADER = ("n", "vsi_seconds", "avsi_seconds")


def loglog_slope(ns, ts):
    return float(np.polyfit(np.log(ns), np.log(ts), 1)[0])


def timing_study(sizes=TIMING_SIZES, repeats=5, load=1e-2, r=1e-4, x=1e-4):
    """Wall time of the exact and approximate index on straight feeders.

    Each feeder of ``n`` buses carries a total demand ``load`` spread evenly.
    The AVSI timing includes computing the path impedances; the VSI timing
    includes building the reduced Jacobian. Batches are sized to run for at
    least 0.2 s and are taken round-robin over all sizes, so drifting machine
    load hits every size alike; the best of ``repeats`` rounds is reported.
    """
    from .feeders import path_network
    from .index import avsi
    from .jacobian import vsi

    timers = []
    for n in sizes:
        tree = path_network(n, r, x)
        scen = LoadScenario(np.full(n, load / n), np.full(n, 0.5 * load / n))
        op = solve_power_flow(tree, scen).op
        for fn in (lambda t=tree, s=scen, o=op: vsi(t, s, o), lambda t=tree, o=op: avsi(t, o)):
            timer = timeit.Timer(fn)
            timers.append((timer, timer.autorange()[0]))
    best = [math.inf] * len(timers)
    for _ in range(repeats):
        for k, (timer, number) in enumerate(timers):
            best[k] = min(best[k], timer.timeit(number) / number)

    table = Table(TIMING_HEADER)
    for k, n in enumerate(sizes):
        table.rows.append([n, best[2 * k], best[2 * k + 1]])
    ns = table.column("n")
    table.summary = {
        "vsi_slope": loglog_slope(ns, table.column("vsi_seconds")),
        "avsi_slope": loglog_slope(ns, table.column("avsi_seconds")),
    }
    return table
