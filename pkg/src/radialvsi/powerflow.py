"""Branch-flow (DistFlow) equations, a sweep solver and load continuation."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import BaseInfeasible, DegenerateDirection, DimensionMismatch, NotConverged
from .network import LoadScenario, path_sum, subtree_sum

DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITER = 200
DEFAULT_TOL_LAMBDA = 1e-6
REFINE_TOL = 1e-15
STALL_STEPS = 6


@dataclass(frozen=True, eq=False)
class OperatingPoint:
    """Power-flow state.

    ``pbar``, ``qbar``, ``ell`` are per line (position ``j - 1`` is the line
    feeding bus ``j``); ``v`` holds squared voltage magnitudes of buses
    ``0..n``; ``p0``, ``q0`` are the power injected at the slack bus.
    """

    pbar: np.ndarray
    qbar: np.ndarray
    ell: np.ndarray
    v: np.ndarray
    p0: float
    q0: float

    def __post_init__(self):
        for name in ("pbar", "qbar", "ell", "v"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).reshape(-1))
        object.__setattr__(self, "p0", float(self.p0))
        object.__setattr__(self, "q0", float(self.q0))

    @property
    def n(self):
        return self.pbar.shape[0]

    def to_state(self):
        """State vector ``(pbar, qbar, ell, v_1..v_n, p_0, q_0)``.

        The last two entries are the slack bus *net demand* (minus the
        injection), matching the sign of the demand vector in the nodal
        balance equations.
        """
        return np.concatenate([self.pbar, self.qbar, self.ell, self.v[1:], [-self.p0, -self.q0]])

    @classmethod
    def from_state(cls, u, v0):
        u = np.asarray(u, dtype=float)
        n = (u.shape[0] - 2) // 4
        if u.shape != (4 * n + 2,):
            raise DimensionMismatch(f"state vector of length {u.shape[0]} is not 4n+2")
        return cls(
            pbar=u[:n].copy(),
            qbar=u[n : 2 * n].copy(),
            ell=u[2 * n : 3 * n].copy(),
            v=np.concatenate([[v0], u[3 * n : 4 * n]]),
            p0=float(-u[4 * n]),
            q0=float(-u[4 * n + 1]),
        )

    @classmethod
    def flat(cls, n, v0=1.0):
        z = np.zeros(n)
        return cls(z, z.copy(), z.copy(), np.full(n + 1, float(v0)), 0.0, 0.0)

    def check(self, tree):
        n = tree.n
        if (
            self.pbar.shape != (n,)
            or self.qbar.shape != (n,)
            or self.ell.shape != (n,)
            or self.v.shape != (n + 1,)
        ):
            raise DimensionMismatch(f"operating point does not match a network with {n} lines")
        return self

    def to_dict(self):
        return {
            "pbar": self.pbar.tolist(),
            "qbar": self.qbar.tolist(),
            "ell": self.ell.tolist(),
            "v": self.v.tolist(),
            "p0": self.p0,
            "q0": self.q0,
        }


@dataclass(frozen=True, eq=False)
class SolveReport:
    op: OperatingPoint
    iterations: int
    residual_norm: float
    converged: bool
    newton_steps: int = 0

    def to_dict(self):
        return {
            "converged": self.converged,
            "iterations": self.iterations,
            "newton_steps": self.newton_steps,
            "residual_norm": self.residual_norm,
            "op": self.op.to_dict(),
        }

    def to_json(self, **kw):
        return dumps(self.to_dict(), **kw)


@dataclass(frozen=True, eq=False)
class ContinuationStep:
    lam: float
    report: SolveReport
    index: object = None


@dataclass(eq=False)
class ContinuationTrace:
    steps: list = field(default_factory=list)
    lambda_star: float = math.nan
    lam_lo: float = math.nan
    lam_hi: float = math.nan
    failures: list = field(default_factory=list)

    @property
    def lambdas(self):
        return np.array([s.lam for s in self.steps])

    @property
    def last(self):
        return self.steps[-1]


def dumps(obj, **kw):
    """JSON with floats written as 17 significant digits."""
    return json.dumps(_round17(obj), **kw)


def _round17(obj):
    if isinstance(obj, float):
        if not math.isfinite(obj):
            return None
        return float(f"{obj:.17g}")
    if isinstance(obj, dict):
        return {k: _round17(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round17(v) for v in obj]
    if isinstance(obj, np.floating):
        return _round17(float(obj))
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


# --------------------------------------------------------------------------
# residual


def bfm_residual(tree, scenario, op):
    """Residual of the branch-flow equations, length ``4n + 2``.

    Blocks, in order: active balance at buses ``0..n``, reactive balance at
    buses ``0..n``, voltage drop per line, current definition per line.
    Rows 0 and ``n + 1`` are the slack injection identities.
    """
    scenario.check(tree)
    op.check(tree)
    n = tree.n
    r, x = tree.r, tree.x
    par = tree.parent[1:]
    pbar, qbar, ell, v = op.pbar, op.qbar, op.ell, op.v
    vs = np.array(v, dtype=float)
    vs[0] = scenario.v0
    v_send = vs[par]

    out_p = np.bincount(par, weights=pbar, minlength=n + 1)
    out_q = np.bincount(par, weights=qbar, minlength=n + 1)
    res = np.empty(4 * n + 2)
    res[0] = -out_p[0] + op.p0
    res[1 : n + 1] = pbar - r * ell - out_p[1:] - scenario.p
    res[n + 1] = -out_q[0] + op.q0
    res[n + 2 : 2 * n + 2] = qbar - x * ell - out_q[1:] - scenario.q
    res[2 * n + 2 : 3 * n + 2] = (
        v_send - vs[1:] - 2.0 * (r * pbar + x * qbar) + (r * r + x * x) * ell
    )
    res[3 * n + 2 :] = pbar * pbar + qbar * qbar - v_send * ell
    return res


def residual_from_state(tree, scenario, u):
    return bfm_residual(tree, scenario, OperatingPoint.from_state(u, scenario.v0))


@lru_cache(maxsize=64)
def _jacobian_pattern(tree):
    # CSC structure of the full Jacobian with its state-independent entries;
    # the four state-dependent blocks are refilled through ``slots``
    n = tree.n
    r, x = tree.r, tree.x
    par = tree.parent[1:]
    e = np.arange(n)
    nz = par != 0
    # row offsets of the four equation blocks and column offsets of the state blocks
    R1, R2, R3, R4 = 0, n + 1, 2 * n + 2, 3 * n + 2
    CP, CQ, CL, CV, C0 = 0, n, 2 * n, 3 * n, 4 * n
    rows, cols, vals = [], [], []

    def add(rr, cc, vv):
        rows.append(np.asarray(rr))
        cols.append(np.asarray(cc))
        vals.append(np.broadcast_to(np.asarray(vv, dtype=float), np.shape(rr)))
        return sum(len(rw) for rw in rows[:-1])

    # -A = Pi - Delta for both balance blocks
    for R, C in ((R1, CP), (R2, CQ)):
        add(R + e + 1, C + e, 1.0)
        add(R + par, C + e, -1.0)
    add(R1 + e + 1, CL + e, -r)
    add(R2 + e + 1, CL + e, -x)
    add([R1], [C0], -1.0)
    add([R2], [C0 + 1], -1.0)
    # voltage drop: -2[r], -2[x], [r]^2+[x]^2, A2^T
    add(R3 + e, CP + e, -2.0 * r)
    add(R3 + e, CQ + e, -2.0 * x)
    add(R3 + e, CL + e, r * r + x * x)
    add(R3 + e, CV + e, -1.0)
    add(R3 + e[nz], CV + par[nz] - 1, 1.0)
    # current definition: 2[pbar], 2[qbar], -[Delta^T v], -[ell] Delta2^T
    starts = [
        add(R4 + e, CP + e, 0.0),
        add(R4 + e, CQ + e, 0.0),
        add(R4 + e, CL + e, 0.0),
        add(R4 + e[nz], CV + par[nz] - 1, 0.0),
    ]
    sizes = (n, n, n, int(nz.sum()))

    m = 4 * n + 2
    nnz = sum(len(rw) for rw in rows)
    ids = sp.csc_matrix(
        (np.arange(1, nnz + 1, dtype=float), (np.concatenate(rows), np.concatenate(cols))), shape=(m, m)
    )
    order = ids.data.astype(np.int64) - 1
    where = np.empty(nnz, dtype=np.int64)
    where[order] = np.arange(nnz)
    data = np.concatenate(vals)[order]
    slots = tuple(where[k : k + size] for k, size in zip(starts, sizes))
    return ids.indices, ids.indptr, data, slots, nz


def full_jacobian_sparse(tree, scenario, op):
    """Sparse (CSC) form of the full power-flow Jacobian; see ``jacobian.build_full_jacobian``."""
    indices, indptr, const, (sp_p, sp_q, sp_l, sp_v), nz = _jacobian_pattern(tree)
    v = np.array(op.v, dtype=float)
    v[0] = scenario.v0
    data = const.copy()
    data[sp_p] = 2.0 * np.asarray(op.pbar, dtype=float)
    data[sp_q] = 2.0 * np.asarray(op.qbar, dtype=float)
    data[sp_l] = -v[tree.parent[1:]]
    data[sp_v] = -np.asarray(op.ell, dtype=float)[nz]
    m = 4 * tree.n + 2
    return sp.csc_matrix((data, indices.copy(), indptr.copy()), shape=(m, m))


# --------------------------------------------------------------------------
# solver


def _finish_op(tree, scenario, pbar, qbar, ell, v):
    out_p = np.bincount(tree.parent[1:], weights=pbar, minlength=tree.n + 1)
    out_q = np.bincount(tree.parent[1:], weights=qbar, minlength=tree.n + 1)
    v = np.array(v, dtype=float)
    v[0] = scenario.v0
    return OperatingPoint(pbar, qbar, ell, v, float(out_p[0]), float(out_q[0]))


def _sweep(tree, scenario, ell, damping_ref=None, damping=1.0):
    r, x = tree.r, tree.x
    pbar = subtree_sum(tree, scenario.p + r * ell)
    qbar = subtree_sum(tree, scenario.q + x * ell)
    drop = 2.0 * (r * pbar + x * qbar) - (r * r + x * x) * ell
    v = np.empty(tree.n + 1)
    v[0] = scenario.v0
    v[1:] = scenario.v0 - path_sum(tree, drop)
    if damping_ref is not None and damping != 1.0:
        v[1:] = damping_ref[1:] + damping * (v[1:] - damping_ref[1:])
    return pbar, qbar, v


def _newton(tree, scenario, op, tol, max_steps=40):
    u = op.to_state()
    res = residual_from_state(tree, scenario, u)
    norm = float(np.max(np.abs(res)))
    steps = 0
    # give up after STALL_STEPS steps without a 10% drop in the residual
    best, stalled = norm, 0
    while norm > tol and steps < max_steps and stalled < STALL_STEPS:
        J = full_jacobian_sparse(tree, scenario, OperatingPoint.from_state(u, scenario.v0))
        try:
            with np.errstate(all="ignore"):
                du = spla.spsolve(J, -res)
        except RuntimeError:
            return None, steps, norm
        if not np.all(np.isfinite(du)):
            return None, steps, norm
        u = u + du
        steps += 1
        res = residual_from_state(tree, scenario, u)
        norm = float(np.max(np.abs(res)))
        if not math.isfinite(norm) or norm > 1e6:
            return None, steps, norm
        if norm < 0.9 * best:
            best, stalled = norm, 0
        else:
            stalled += 1
    if norm > tol:
        return None, steps, norm
    return OperatingPoint.from_state(u, scenario.v0), steps, norm


def _refine(tree, scenario, op, norm, steps=3):
    # extra Newton steps toward machine precision; kept only while they help
    u = op.to_state()
    best_u, best = u, norm
    for _ in range(steps):
        if best <= REFINE_TOL:
            break
        J = full_jacobian_sparse(tree, scenario, OperatingPoint.from_state(best_u, scenario.v0))
        with np.errstate(all="ignore"):
            try:
                du = spla.spsolve(J, -residual_from_state(tree, scenario, best_u))
            except RuntimeError:
                break
        cand = best_u + du
        cnorm = float(np.max(np.abs(residual_from_state(tree, scenario, cand))))
        if not cnorm < best:
            break
        best_u, best = cand, cnorm
    if best_u is u:
        return op, norm, 0
    return OperatingPoint.from_state(best_u, scenario.v0), best, 1


def solve_power_flow(
    tree, scenario, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER, polish=True, ell0=None
):
    """Backward/forward sweep power flow.

    Each iteration accumulates line flows leaf-to-root from the current
    current estimates, updates squared voltages root-to-leaf, and then
    recomputes ``ell = (pbar^2 + qbar^2) / v_sender``. Iteration stops when
    the largest voltage change is at most ``tol``. An oscillating sweep
    switches to half-step damping.

    Plain sweeps contract arbitrarily slowly near the loadability limit, so
    when ``polish`` is set the sweep iterate is refined by Newton steps on
    the full branch-flow system whenever it has not reached a residual of
    ``tol``; a sweep contracting by less than 5% per iteration hands over
    to Newton early. A polished solution then gets up to three more Newton
    steps toward machine precision. ``ell0`` warm-starts the sweep (e.g. from a lighter
    load on the same ray). Failure of both raises :class:`NotConverged`.
    """
    scenario.check(tree)
    n = tree.n
    ell = np.zeros(n) if ell0 is None else np.array(ell0, dtype=float)
    v_prev = np.full(n + 1, scenario.v0)
    damping = 1.0
    growth = 0
    last_delta = math.inf
    converged = False
    it = 0
    pbar = qbar = None
    v = v_prev
    par = tree.parent[1:]
    for it in range(1, max_iter + 1):
        pbar, qbar, v = _sweep(tree, scenario, ell, v_prev, damping)
        if not np.all(np.isfinite(v)) or np.any(v[1:] <= 0):
            raise NotConverged(
                f"voltage became nonpositive after {it} sweeps (outside the solvable region)",
                iterations=it,
            )
        ell = (pbar * pbar + qbar * qbar) / v[par]
        delta = float(np.max(np.abs(v - v_prev)))
        v_prev = v
        if delta <= tol:
            converged = True
            break
        growth = growth + 1 if delta > last_delta else 0
        if growth >= 3 and damping == 1.0:
            damping = 0.5
        if polish and it >= 30 and delta > 0.95 * last_delta:
            break
        last_delta = delta

    # re-run the balance with the final ell so flows and currents agree
    pbar = subtree_sum(tree, scenario.p + tree.r * ell)
    qbar = subtree_sum(tree, scenario.q + tree.x * ell)
    op = _finish_op(tree, scenario, pbar, qbar, ell, v)
    norm = float(np.max(np.abs(bfm_residual(tree, scenario, op))))
    newton_steps = 0
    if norm > tol:
        if not polish:
            if converged and norm <= 10 * tol:
                return SolveReport(op, it, norm, True)
            raise NotConverged(
                f"sweep did not converge in {max_iter} iterations (residual {norm:.3e})",
                iterations=it,
                residual_norm=norm,
            )
        refined, newton_steps, nnorm = _newton(tree, scenario, op, tol)
        if refined is None or np.any(refined.v[1:] <= 0) or np.any(refined.ell < -tol):
            raise NotConverged(
                f"no power-flow solution found (sweep iterations {it}, "
                f"Newton residual {nnorm:.3e})",
                iterations=it,
                residual_norm=nnorm,
            )
        op, norm = refined, nnorm
    if polish and norm > REFINE_TOL:
        op, norm, extra = _refine(tree, scenario, op, norm)
        newton_steps += extra
    return SolveReport(op, it, norm, True, newton_steps)


# --------------------------------------------------------------------------
# continuation


def find_loadability_limit(
    tree,
    base,
    dp,
    dq,
    tol_lambda=DEFAULT_TOL_LAMBDA,
    lambda0=1.0,
    tol=DEFAULT_TOL,
    max_iter=DEFAULT_MAX_ITER,
    index_fn=None,
    grid=0,
    max_doublings=200,
):
    """Scale loads along ``base + lam * (dp, dq)`` until the power flow fails.

    ``lam`` starts at ``lambda0`` and doubles until the solver fails; the
    bracket is then bisected to width ``tol_lambda``. ``index_fn(tree,
    scenario, op)``, when given, is evaluated at every converged step.
    ``grid > 0`` adds that many evenly spaced samples on ``(0, lam_lo)``.
    """
    base.check(tree)
    dp = np.broadcast_to(np.asarray(dp, dtype=float), (tree.n,))
    dq = np.broadcast_to(np.asarray(dq, dtype=float), (tree.n,))
    if not (np.any(dp != 0) or np.any(dq != 0)):
        raise DegenerateDirection("load direction is identically zero")

    trace = ContinuationTrace()
    solved = {}

    def attempt(lam):
        scen = base.along(dp, dq, lam)
        below = [k for k in solved if k < lam]
        ell0 = solved[max(below)].report.op.ell if below else None
        try:
            rep = solve_power_flow(tree, scen, tol=tol, max_iter=max_iter, ell0=ell0)
        except NotConverged:
            trace.failures.append(lam)
            return False
        idx = index_fn(tree, scen, rep.op) if index_fn is not None else None
        solved[lam] = ContinuationStep(lam, rep, idx)
        return True

    if not attempt(0.0):
        raise BaseInfeasible("power flow has no solution at the base scenario")

    lo, hi = 0.0, None
    lam = float(lambda0)
    for _ in range(max_doublings):
        if attempt(lam):
            lo = lam
            lam *= 2.0
        else:
            hi = lam
            break
    if hi is None:
        raise NotConverged(f"no loadability limit found up to lambda = {lam:g}")
    while hi - lo > tol_lambda:
        mid = 0.5 * (lo + hi)
        if attempt(mid):
            lo = mid
        else:
            hi = mid

    for k in range(1, grid + 1):
        lam_k = lo * k / (grid + 1)
        if lam_k not in solved:
            attempt(lam_k)

    trace.steps = [solved[k] for k in sorted(solved)]
    trace.lam_lo, trace.lam_hi = lo, hi
    trace.lambda_star = 0.5 * (lo + hi)
    return trace


def uniform_ray(scenario):
    """Base (zero load, same ``v0``) and direction for a uniform scaling of ``scenario``."""
    return LoadScenario.zeros(scenario.n, scenario.v0), scenario.p, scenario.q
