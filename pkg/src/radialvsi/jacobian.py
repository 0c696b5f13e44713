"""Full and reduced power-flow Jacobians, log-determinants and the exact index."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
from scipy.linalg.blas import dger

from .errors import DimensionMismatch, NegativeDeterminant
from .network import path_sum, subtree_sum
from .powerflow import full_jacobian_sparse

TINY_PIVOT = 1e-300


@dataclass(frozen=True, eq=False)
class JacobianBundle:
    reduced: np.ndarray
    full: np.ndarray = None

    @property
    def diag(self):
        return np.diag(self.reduced).copy()

    @property
    def off(self):
        return self.reduced - np.diag(np.diag(self.reduced))


@dataclass(frozen=True)
class LogDet:
    sign: int
    log_abs: float

    @property
    def value(self):
        return self.sign * np.exp(self.log_abs) if self.sign else 0.0


def build_full_jacobian(tree, scenario, op):
    """Dense ``(4n + 2) x (4n + 2)`` Jacobian of :func:`~radialvsi.powerflow.bfm_residual`.

    Row blocks: active balance, reactive balance, voltage drop, current
    definition. Column blocks: ``pbar, qbar, ell, v_1..v_n, p_0, q_0``.
    """
    scenario.check(tree)
    op.check(tree)
    return full_jacobian_sparse(tree, scenario, op).toarray()


def _a2inv_diag(tree, w):
    # A2^{-1} [w]: entry (j, m) = -w_m if bus m lies in the subtree of j
    return -subtree_sum(tree, np.diag(w))


def build_reduced_jacobian(tree, scenario, op):
    """The ``n x n`` reduced Jacobian, which has the same determinant as the full one.

    ``A2^{-1}`` and ``A2^{-T}`` are applied through subtree and path
    recursions over the tree, never by forming an inverse.
    """
    scenario.check(tree)
    op.check(tree)
    n = tree.n
    r, x = tree.r, tree.x
    par = tree.parent[1:]
    v = np.array(op.v, dtype=float)
    v[0] = scenario.v0

    inv_r = _a2inv_diag(tree, r)
    inv_x = _a2inv_diag(tree, x)
    K = np.diag(r * r + x * x) + 2.0 * r[:, None] * inv_r + 2.0 * x[:, None] * inv_x
    # Y = A2^{-T} K, rows indexed by bus
    Y = -path_sum(tree, K)
    # Delta2^T Y: row j takes the row of its sending bus (zero for the root)
    L = np.zeros((n, n))
    nz = par != 0
    L[nz] = Y[par[nz] - 1]

    J = 2.0 * op.pbar[:, None] * inv_r + 2.0 * op.qbar[:, None] * inv_x - op.ell[:, None] * L
    J[np.arange(n), np.arange(n)] += v[par]
    return J


def jacobian_bundle(tree, scenario, op, full=False):
    red = build_reduced_jacobian(tree, scenario, op)
    return JacobianBundle(red, build_full_jacobian(tree, scenario, op) if full else None)


def log_det(matrix, method="lu"):
    """Sign and log-magnitude of a determinant via LU with partial pivoting.

    ``method="lu"`` runs an in-place right-looking elimination (one rank-1
    update per column); ``method="lapack"`` delegates the factorisation to
    LAPACK ``getrf``. A pivot below ``1e-300`` in magnitude is reported as a
    singular matrix (sign 0).
    """
    a = np.asarray(matrix, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionMismatch("log_det needs a square matrix")
    if a.shape[0] == 0:
        return LogDet(1, 0.0)
    if method == "lapack":
        lu, piv = sla.lu_factor(a, check_finite=False)
        d = np.diag(lu)
        swaps = int(np.count_nonzero(piv != np.arange(a.shape[0])))
    elif method == "lu":
        d, swaps = _lu_pivots(a)
    else:
        raise ValueError(f"unknown method {method!r}")
    if d is None or np.any(~np.isfinite(d)) or np.any(np.abs(d) < TINY_PIVOT):
        return LogDet(0, -np.inf)
    sign = (-1) ** swaps * int(np.prod(np.sign(d)))
    return LogDet(sign, float(np.sum(np.log(np.abs(d)))))


def _lu_pivots(matrix):
    a = np.array(matrix, dtype=float, order="F")
    n = a.shape[0]
    swaps = 0
    for k in range(n - 1):
        p = k + int(np.argmax(np.abs(a[k:, k])))
        if p != k:
            row = a[k, k:].copy()
            a[k, k:] = a[p, k:]
            a[p, k:] = row
            swaps += 1
        piv = a[k, k]
        if abs(piv) < TINY_PIVOT:
            return None, swaps
        mult = a[k + 1 :, k] / piv
        a[k + 1 :, k + 1 :] = dger(-1.0, mult, a[k, k + 1 :], a=a[k + 1 :, k + 1 :], overwrite_a=1)
    return np.diag(a).copy(), swaps


def vsi_from_matrix(reduced):
    n = reduced.shape[0]
    ld = log_det(reduced)
    if ld.sign != 1:
        raise NegativeDeterminant(
            "reduced Jacobian determinant is not positive: outside the voltage stability region",
            sign=ld.sign,
            log_abs=ld.log_abs,
        )
    return ld.log_abs / n


def vsi(tree, scenario, op):
    """Exact index ``ln(det(reduced Jacobian)) / n``.

    Raises :class:`NegativeDeterminant` when the determinant is not positive.
    """
    return vsi_from_matrix(build_reduced_jacobian(tree, scenario, op))
