import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from radialvsi import (
    Line,
    LoadScenario,
    NetworkTree,
    find_loadability_limit,
    gen_feeder,
    solve_power_flow,
    uniform_ray,
)

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@st.composite
def trees(draw, max_n=15, min_n=1):
    n = draw(st.integers(min_n, max_n))
    imp = st.floats(1e-4, 0.05, allow_nan=False)
    lines = []
    for j in range(1, n + 1):
        parent = draw(st.integers(0, j - 1))
        lines.append(Line(parent, j, draw(imp), draw(imp)))
    return NetworkTree.from_lines(lines)


def converged_points(tree, scenario, fractions=(0.0, 0.25, 0.5, 0.75, 0.95, 0.999), tol_lambda=1e-5):
    """``(scenario_lam, op)`` pairs at fractions of the loadability limit along the uniform ray."""
    base, dp, dq = uniform_ray(scenario)
    trace = find_loadability_limit(tree, base, dp, dq, tol_lambda=tol_lambda)
    out = []
    for f in fractions:
        scen = base.along(dp, dq, f * trace.lam_lo)
        out.append((scen, solve_power_flow(tree, scen).op))
    return out


def random_case(seed, n_lo=2, n_hi=20):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(n_lo, n_hi + 1))
    return gen_feeder(n, seed=seed)


@pytest.fixture
def loaded_feeder():
    tree, scen = gen_feeder(12, seed=4)
    return tree, scen, solve_power_flow(tree, scen).op


@pytest.fixture
def flat3():
    tree = NetworkTree.from_lines([Line(0, 1, 0.01, 0.02), Line(1, 2, 0.01, 0.01), Line(1, 3, 0.02, 0.01)])
    return tree, LoadScenario.zeros(3)
