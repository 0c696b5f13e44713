import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.pipeline import make_pipeline

from radialvsi import InputError, LoadScenario, NonpositiveDiagTerm, avsi_terms, gen_feeder, solve_power_flow
from radialvsi.estimators import LocalAVSI, StabilityIndices


@pytest.fixture(scope="module")
def case():
    tree, scen = gen_feeder(10, seed=8)
    ops = [solve_power_flow(tree, LoadScenario(k * scen.p, k * scen.q)).op for k in (0.0, 1.0, 5.0)]
    X = np.array([np.concatenate([op.v[1:], op.ell]) for op in ops])
    return tree, scen, ops, X


def test_local_avsi_matches_function(case):
    tree, _, ops, X = case
    est = LocalAVSI(network=tree).fit(X)
    out = est.transform(X)
    assert out.shape == (3, 1)
    for k, op in enumerate(ops):
        a, h = avsi_terms(tree, op)
        assert out[k, 0] == pytest.approx(a, abs=1e-15)
    terms = LocalAVSI(network=tree, output="terms").fit_transform(X)
    np.testing.assert_allclose(terms[1], avsi_terms(tree, ops[1])[1], atol=1e-15)
    assert out[0, 0] == 0.0
    np.testing.assert_array_equal(est.rbar_, est.paths_.rbar)
    assert est.n_features_in_ == 20


def test_params_and_clone(case):
    tree = case[0]
    est = LocalAVSI(network=tree, output="terms")
    assert est.get_params() == {"network": tree, "output": "terms", "on_invalid": "raise"}
    c = clone(est).set_params(output="avsi")
    assert c.output == "avsi" and est.output == "terms"


def test_validation(case):
    tree, _, _, X = case
    with pytest.raises(NotFittedError):
        LocalAVSI(network=tree).transform(X)
    with pytest.raises(InputError):
        LocalAVSI(network=None).fit(X)
    with pytest.raises(InputError):
        LocalAVSI(network=tree, output="x").fit(X)
    est = LocalAVSI(network=tree).fit(X)
    with pytest.raises(InputError):
        est.transform(X[:, :5])
    with pytest.raises(ValueError):
        est.transform(np.full_like(X, np.nan))


def test_invalid_terms(case):
    tree, _, _, X = case
    bad = X.copy()
    bad[0, 10 + 3] = 1e6
    with pytest.raises(NonpositiveDiagTerm) as info:
        LocalAVSI(network=tree).fit(X).transform(bad)
    assert info.value.buses == [4]
    out = LocalAVSI(network=tree, on_invalid="inf").fit(X).transform(bad)
    assert out[0, 0] == -np.inf and np.isfinite(out[1, 0])


def test_stability_indices(case):
    tree, scen, _, _ = case
    rows = np.array([
        np.zeros(2 * tree.n),
        np.concatenate([scen.p, scen.q]),
        np.concatenate([1e3 * scen.p, 1e3 * scen.q]),
    ])
    out = make_pipeline(StabilityIndices(network=tree)).fit(rows).transform(rows)
    assert out.shape == (3, 4)
    np.testing.assert_array_equal(out[0], [0.0, 0.0, 0.0, 1.0])
    assert out[1, 0] <= out[1, 1]
    assert np.all(np.isnan(out[2]))
