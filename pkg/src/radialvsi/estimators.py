"""scikit-learn style wrappers around the functional core.

``LocalAVSI`` turns rows of bus measurements into the approximate index;
``StabilityIndices`` turns rows of bus demands into exact and approximate
indices by solving the power flow for each row.
"""

from __future__ import annotations

import math

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .errors import InfeasibleError, InputError, NonpositiveDiagTerm
from .index import diag_terms_local, index_report
from .network import LoadScenario, NetworkTree, path_impedances
from .powerflow import DEFAULT_MAX_ITER, DEFAULT_TOL, solve_power_flow


def _check_network(network):
    if not isinstance(network, NetworkTree):
        raise InputError("network must be a NetworkTree")
    return network


class LocalAVSI(TransformerMixin, BaseEstimator):
    """Approximate index from measured ``(v_j, ell_j)`` per bus.

    Input rows are ``[v_1 .. v_n, ell_1 .. ell_n]``. With ``output="avsi"``
    the result has one column; with ``output="terms"`` it has the ``n``
    log-terms. ``on_invalid="raise"`` propagates a non-positive term as an
    error, ``"inf"`` maps it to ``-inf``.
    """

    def __init__(self, network=None, output="avsi", on_invalid="raise"):
        self.network = network
        self.output = output
        self.on_invalid = on_invalid

    def fit(self, X=None, y=None):
        tree = _check_network(self.network)
        if self.output not in ("avsi", "terms"):
            raise InputError("output must be 'avsi' or 'terms'")
        if self.on_invalid not in ("raise", "inf"):
            raise InputError("on_invalid must be 'raise' or 'inf'")
        if X is not None:
            check_array(X, ensure_min_samples=1)
        self.paths_ = path_impedances(tree)
        self.rbar_ = self.paths_.rbar
        self.xbar_ = self.paths_.xbar
        self.n_buses_ = tree.n
        self.n_features_in_ = 2 * tree.n
        return self

    def _terms(self, X):
        check_is_fitted(self, "paths_")
        X = check_array(X, dtype=float)
        n = self.n_buses_
        if X.shape[1] != 2 * n:
            raise InputError(f"expected {2 * n} columns, got {X.shape[1]}")
        return diag_terms_local(self.network, X[:, :n], X[:, n:], self.paths_)

    def transform(self, X):
        terms = self._terms(X)
        bad = ~(terms > 0)
        if bad.any() and self.on_invalid == "raise":
            raise NonpositiveDiagTerm(sorted(set((np.nonzero(bad)[1] + 1).tolist())))
        with np.errstate(divide="ignore", invalid="ignore"):
            h = np.where(bad, -np.inf, np.log(np.where(bad, 1.0, terms)))
        if self.output == "terms":
            return h
        return h.mean(axis=1, keepdims=True)


class StabilityIndices(TransformerMixin, BaseEstimator):
    """Exact/approximate indices for demand rows ``[p_1 .. p_n, q_1 .. q_n]``.

    Output columns are ``vsi, avsi, rho, assumption1``. Rows whose power
    flow fails, or whose index is undefined, yield ``nan``.
    """

    columns = ("vsi", "avsi", "rho", "assumption1")

    def __init__(self, network=None, v0=1.0, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER):
        self.network = network
        self.v0 = v0
        self.tol = tol
        self.max_iter = max_iter

    def fit(self, X=None, y=None):
        tree = _check_network(self.network)
        if not self.v0 > 0:
            raise InputError("v0 must be positive")
        if X is not None:
            check_array(X, ensure_min_samples=1)
        self.paths_ = path_impedances(tree)
        self.n_buses_ = tree.n
        self.n_features_in_ = 2 * tree.n
        return self

    def transform(self, X):
        check_is_fitted(self, "paths_")
        X = check_array(X, dtype=float)
        n = self.n_buses_
        if X.shape[1] != 2 * n:
            raise InputError(f"expected {2 * n} columns, got {X.shape[1]}")
        out = np.full((X.shape[0], 4), math.nan)
        for k, row in enumerate(X):
            scen = LoadScenario(row[:n], row[n:], self.v0)
            try:
                op = solve_power_flow(self.network, scen, tol=self.tol, max_iter=self.max_iter).op
            except InfeasibleError:
                continue
            rep = index_report(self.network, scen, op, paths=self.paths_)
            out[k] = [rep.vsi, rep.avsi, rep.rho, float(rep.assumption1_holds)]
        return out
