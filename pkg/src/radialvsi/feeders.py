"""Synthetic radial feeders and small reference networks."""

from __future__ import annotations

import math
from importlib import resources

import numpy as np

from .network import Line, LoadScenario, NetworkTree, parse_case

BUNDLED_FEEDER = "feeder100.json"


def power_factor_q(p, pf=0.9):
    """Reactive demand for active demand ``p`` at lagging power factor ``pf``."""
    return np.asarray(p) * math.tan(math.acos(pf))


def gen_feeder(
    n_buses,
    seed=0,
    chain_prob=0.75,
    r_range=(0.002, 0.012),
    xr_range=(0.5, 2.0),
    load_range=(0.0, 2.0),
    load_scale=0.01,
    pf=0.9,
):
    """Random radial feeder with ``n_buses`` PQ buses.

    Bus ``j`` continues the branch of bus ``j - 1`` with probability
    ``chain_prob`` and otherwise taps a uniformly chosen earlier bus, which
    yields a long trunk with laterals. Line resistance is uniform in
    ``r_range`` and reactance is ``r`` times a ratio uniform in ``xr_range``.
    Active demands are ``load_scale`` times a uniform draw from
    ``load_range``; reactive demands follow the power factor ``pf``.
    """
    if n_buses < 1:
        raise ValueError("need at least one PQ bus")
    rng = np.random.default_rng(seed)
    lines = []
    for j in range(1, n_buses + 1):
        if j == 1 or rng.random() < chain_prob:
            parent = j - 1
        else:
            parent = int(rng.integers(0, j - 1))
        r = float(rng.uniform(*r_range))
        x = float(r * rng.uniform(*xr_range))
        lines.append(Line(parent, j, r, x))
    p = load_scale * rng.uniform(*load_range, size=n_buses)
    return NetworkTree.from_lines(lines), LoadScenario(p, power_factor_q(p, pf), 1.0)


def path_network(n, r=0.01, x=0.01):
    """Straight feeder ``0 -> 1 -> ... -> n`` with identical lines."""
    return NetworkTree.from_lines(Line(j - 1, j, r, x) for j in range(1, n + 1))


def star_network(n, r=0.01, x=0.01):
    return NetworkTree.from_lines(Line(0, j, r, x) for j in range(1, n + 1))


def two_bus(r=0.1, x=0.1):
    return NetworkTree.from_lines([Line(0, 1, r, x)])


def bundled_feeder():
    """The packaged ~100-bus synthetic test feeder as ``(tree, scenario)``."""
    text = resources.files("radialvsi").joinpath("data").joinpath(BUNDLED_FEEDER).read_text()
    return parse_case(text)
