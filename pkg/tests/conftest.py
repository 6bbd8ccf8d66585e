import numpy as np
import pytest

from linepack.dynamics import Inputs, LoadRamp
from linepack.network import build_network, discretize, simple_network
from linepack.scenario import SCHEMA, _load_network_ref
from linepack.steady import solve_steady


@pytest.fixture(scope="session")
def belgium_spec():
    return _load_network_ref("builtin:belgium")


@pytest.fixture(scope="session")
def belgium(belgium_spec):
    return discretize(build_network(belgium_spec))


def path_network(n_nodes=3, length=10000.0, diameter=0.6, injections=None, **kw):
    """Discretized path graph with uniform pipes."""
    spec = simple_network(n_nodes, length=length, diameter=diameter, injections=injections, **kw)
    return discretize(build_network(spec))


def ramp_inputs(dnet, node, delta, t_start, t_end):
    """Inputs whose injection at ``node`` changes by ``delta`` kg/s over the window."""
    ramp = LoadRamp(node, delta / (t_end - t_start), t_start, t_end)
    return Inputs(d0=dnet.injection.copy(), alpha0=dnet.alpha.copy(), ramps=(ramp,))


def equilibrium(dnet, anchor=0, density=50.0, d=None):
    return solve_steady(dnet, d=d, anchor_node=anchor, anchor_density=density)


def scenario_doc(**kw):
    """Three-node step scenario; keywords replace top-level keys."""
    doc = {
        "schema": SCHEMA,
        "name": "small-step",
        "t_end_s": 3600.0,
        "steady": {"anchor_node": "1", "anchor_density": 50.0},
        "techniques": {"slack": {"node": "1"}, "balancing": {"node": "1"},
                       "sigmoid": {"node": "1", "headroom_kg_s": 20.0, "gamma": 0.01}},
        "events": [{"kind": "load_ramp", "node": "3", "rate_kg_s2": -0.01, "t_start_s": 0.0,
                    "t_end_s": 500.0}],
        "integrator": {"dt_out_s": 60.0, "max_step_s": 600.0},
    }
    doc.update(kw)
    return doc


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
