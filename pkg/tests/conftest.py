import json
import math
from importlib import resources

import numpy as np
import pytest

from cema.world import AgentMeta, JointTrace, load_scenario


def scenario_text(name: str) -> str:
    return resources.files("cema.scenarios").joinpath(f"{name}.json").read_text()


@pytest.fixture(scope="session")
def s1():
    return load_scenario(scenario_text("s1"))


@pytest.fixture(scope="session")
def s1_extended():
    return load_scenario(scenario_text("s1_extended"))


@pytest.fixture(scope="session")
def straight():
    return load_scenario(scenario_text("straight"))


@pytest.fixture(scope="session")
def s1_engine(s1):
    from cema.engine import Engine

    return Engine(s1, seed=21)


def make_trace(labels_by_agent, start=0, ego=0, speeds=None, xs=None):
    """Label-only JointTrace for query/grouping tests.

    ``labels_by_agent``: {agent: [(maneuver, macro), ...]}; geometry is a
    straight line so only the labels carry information.
    """
    agents = [AgentMeta(a, a == ego) for a in sorted(labels_by_agent)]
    n = len(next(iter(labels_by_agent.values())))
    out_x, out_y, hs, vs, ac, lanes, mans, macs = {}, {}, {}, {}, {}, {}, {}, {}
    for a, pairs in labels_by_agent.items():
        assert len(pairs) == n
        out_x[a] = np.asarray(xs[a], float) if xs else np.arange(n, dtype=float)
        out_y[a] = np.zeros(n) + 3.5 * a
        hs[a] = np.zeros(n)
        vs[a] = np.asarray(speeds[a], float) if speeds else np.full(n, 10.0)
        ac[a] = np.zeros(n)
        lanes[a] = ["main"] * n
        mans[a] = [p[0] for p in pairs]
        macs[a] = [p[1] for p in pairs]
    return JointTrace(agents, start, out_x, out_y, hs, vs, ac, lanes, mans, macs)


def runs_to_labels(runs, total):
    """[(man, mac, start, end)] -> per-step label pairs of length ``total``."""
    pairs = [("lane-follow", "Continue")] * total
    for man, mac, a, b in runs:
        for t in range(a, b + 1):
            pairs[t] = (man, mac)
    return pairs
