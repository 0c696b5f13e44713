"""Approximate stability index, spectral radius and error bounds."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DimensionMismatch, NegativeDeterminant, NonpositiveDiagTerm, RhoOutOfRange
from .jacobian import build_reduced_jacobian, vsi_from_matrix
from .network import path_impedances, reverse_edges_check

BOUND_SLACK = 1e-12
NRHO_FRACTION = 0.95


def diag_term_global(tree, op, j, paths=None, v0=None):
    """Diagonal entry of the reduced Jacobian for the line feeding bus ``j``.

    Uses the sending-end voltage and flows of that line and the path
    impedance of its sending bus.
    """
    paths = path_impedances(tree) if paths is None else paths
    i = int(tree.parent[j])
    k = j - 1
    r, x = tree.r[k], tree.x[k]
    v_i = (op.v[0] if v0 is None else v0) if i == 0 else op.v[i]
    rb = paths.rbar[i - 1] if i else 0.0
    xb = paths.xbar[i - 1] if i else 0.0
    return v_i - 2 * op.pbar[k] * r - 2 * op.qbar[k] * x - 2 * op.ell[k] * (r * rb + x * xb)


def diag_terms_global(tree, op, paths=None, v0=None):
    paths = path_impedances(tree) if paths is None else paths
    rb, xb = paths.parent_values(tree)
    v = np.array(op.v, dtype=float)
    if v0 is not None:
        v[0] = v0
    r, x = tree.r, tree.x
    return v[tree.parent[1:]] - 2 * op.pbar * r - 2 * op.qbar * x - 2 * op.ell * (r * rb + x * xb)


def diag_term_local(tree, v_j, ell_j, j, paths=None):
    """Diagonal term from the receiving-bus voltage and the line current only."""
    paths = path_impedances(tree) if paths is None else paths
    k = j - 1
    r, x = tree.r[k], tree.x[k]
    return v_j - ell_j * (r * (2 * paths.rbar[k] - r) + x * (2 * paths.xbar[k] - x))


def diag_terms_local(tree, v, ell, paths=None):
    """Vectorised :func:`diag_term_local`; ``v`` and ``ell`` are per bus ``1..n``."""
    paths = path_impedances(tree) if paths is None else paths
    r, x = tree.r, tree.x
    v = np.asarray(v, dtype=float)
    ell = np.asarray(ell, dtype=float)
    if v.shape[-1] != tree.n or ell.shape[-1] != tree.n:
        raise DimensionMismatch(f"expected {tree.n} measurements per quantity")
    return v - ell * (r * (2 * paths.rbar - r) + x * (2 * paths.xbar - x))


def avsi_terms(tree, op=None, measurements=None, paths=None):
    """Return ``(avsi, h)``.

    Either an operating point or a ``(v, ell)`` pair of per-bus arrays
    (``v`` for buses ``1..n``) must be given. Raises
    :class:`NonpositiveDiagTerm` listing the buses whose term is <= 0.
    """
    if measurements is None:
        if op is None:
            raise TypeError("need an operating point or measurements")
        v_j, ell = op.v[1:], op.ell
    else:
        v_j, ell = measurements
    terms = diag_terms_local(tree, v_j, ell, paths)
    bad = np.flatnonzero(~(terms > 0))
    if bad.size:
        raise NonpositiveDiagTerm(bad + 1)
    h = np.log(terms)
    return float(np.mean(h)), h


def avsi(tree, op=None, measurements=None, paths=None):
    return avsi_terms(tree, op, measurements, paths)[0]


def spectral_radius(reduced, count=False, tol=1e-13, max_iter=10000, fraction=NRHO_FRACTION):
    """Spectral radius of ``diag^{-1} off`` for a reduced Jacobian.

    When ``-diag^{-1} off`` is entrywise nonnegative its Perron root is the
    spectral radius and is found by power iteration, stopped once the
    relative change of the estimate is at most ``tol``. Other sign patterns,
    or an iteration that has not settled after ``max_iter`` steps, fall back
    to a dense eigen-decomposition. With ``count`` set, also returns the
    number of eigenvalues of magnitude >= ``fraction * rho``.
    """
    a = np.asarray(reduced, dtype=float)
    d = np.diag(a)
    bad = np.flatnonzero(~(d > 0))
    if bad.size:
        raise NonpositiveDiagTerm(bad + 1)
    B = -(a - np.diag(d)) / d[:, None]
    rho = None
    if np.all(B >= 0):
        rho = _perron_root(B, tol, max_iter)
    eig = None
    if rho is None or count:
        eig = np.abs(np.linalg.eigvals(B)) if B.size else np.zeros(0)
        if rho is None:
            rho = float(eig.max()) if eig.size else 0.0
    if not count:
        return rho
    n_rho = int(np.count_nonzero(eig >= fraction * rho)) if rho > 0 else 0
    return rho, n_rho


def _perron_root(B, tol, max_iter):
    n = B.shape[0]
    z = np.full(n, 1.0 / math.sqrt(n))
    mu_prev = -1.0
    for _ in range(max_iter):
        w = B @ z
        mu = float(np.linalg.norm(w))
        if mu == 0.0:
            return 0.0
        if abs(mu - mu_prev) <= tol * mu:
            return mu
        mu_prev = mu
        z = w / mu
    return None


def error_bounds(vsi, avsi, rho, n, n_rho=1, slack=BOUND_SLACK):
    """Check ``vsi <= avsi <= vsi - rho ln(1 - rho)``.

    Returns ``(lower_ok, upper_ok, conjecture)`` where ``conjecture`` is the
    tighter bound ``vsi - (n_rho / n) rho ln(1 - rho)``.
    """
    if not rho < 1:
        raise RhoOutOfRange(f"spectral radius {rho} >= 1: outside the voltage stability region")
    pen = -rho * math.log1p(-rho) if rho > 0 else 0.0
    lower_ok = vsi <= avsi + slack
    upper_ok = avsi <= vsi + pen + slack
    return bool(lower_ok), bool(upper_ok), vsi + pen * max(n_rho, 1) / n


@dataclass
class IndexReport:
    vsi: float
    avsi: float
    h: np.ndarray
    rho: float
    n_rho: int
    bound_lower: float
    bound_upper: float
    bound_conjecture: float
    assumption1_holds: bool
    vsi_valid: bool = True
    avsi_valid: bool = True
    lower_ok: bool = None
    upper_ok: bool = None
    weak_buses: list = field(default_factory=list)

    @property
    def error(self):
        return self.avsi - self.vsi

    @property
    def error_pct(self):
        if not self.vsi:
            return 0.0 if self.avsi == self.vsi else math.inf
        return 100.0 * (self.avsi - self.vsi) / abs(self.vsi)

    @property
    def bounds_applicable(self):
        return self.assumption1_holds and self.vsi_valid and self.avsi_valid and self.rho < 1

    def to_dict(self):
        d = asdict(self)
        d["h"] = np.asarray(self.h).tolist()
        d["error"] = self.error
        d["error_pct"] = self.error_pct
        return d

    CSV_FIELDS = (
        "vsi", "avsi", "error", "rho", "bound_upper", "bound_conjecture", "assumption1",
    )

    def csv_values(self):
        return [
            self.vsi, self.avsi, self.error, self.rho,
            self.bound_upper, self.bound_conjecture, int(self.assumption1_holds),
        ]


def index_report(tree, scenario, op, paths=None, fraction=NRHO_FRACTION):
    """Exact and approximate indices, spectral radius and bound checks at ``op``."""
    paths = path_impedances(tree) if paths is None else paths
    n = tree.n
    J = build_reduced_jacobian(tree, scenario, op)
    try:
        v_exact, vsi_ok = vsi_from_matrix(J), True
    except NegativeDeterminant:
        v_exact, vsi_ok = math.nan, False

    terms = diag_terms_local(tree, op.v[1:], op.ell, paths)
    weak = [int(j) + 1 for j in np.flatnonzero(~(terms > 0))]
    if weak:
        h = np.where(terms > 0, np.log(np.maximum(terms, 1e-320)), -np.inf)
        a, avsi_ok = -math.inf, False
        rho, n_rho = math.nan, 0
    else:
        h = np.log(terms)
        a, avsi_ok = float(np.mean(h)), True
        rho, n_rho = spectral_radius(J, count=True, fraction=fraction)

    mono = reverse_edges_check(tree, op).holds
    rep = IndexReport(
        vsi=v_exact, avsi=a, h=h, rho=rho, n_rho=n_rho,
        bound_lower=v_exact, bound_upper=math.nan, bound_conjecture=math.nan,
        assumption1_holds=mono, vsi_valid=vsi_ok, avsi_valid=avsi_ok, weak_buses=weak,
    )
    if vsi_ok and avsi_ok and rho < 1:
        lo_ok, up_ok, conj = error_bounds(v_exact, a, rho, n)
        rep.bound_upper = v_exact - rho * math.log1p(-rho) if rho > 0 else v_exact
        rep.bound_conjecture = conj
        if mono:
            rep.lower_ok, rep.upper_ok = lo_ok, up_ok
    return rep
