import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import brentq

from linepack.dynamics import rhs_G
from linepack.network import NetworkSpec, NodeSpec, PipeSpec, build_matrices, build_network, discretize, random_tree
from linepack.steady import SteadyStateError, segment_fluxes, solve_steady

from conftest import path_network

A_, L_, LAM, D_ = 350.0, 5000.0, 0.01, 0.6


def single_pipe(phi=100.0):
    area = math.pi * D_**2 / 4
    spec = NetworkSpec(nodes=(NodeSpec("0", injection=phi * area), NodeSpec("l", injection=-phi * area)),
                       pipes=(PipeSpec("0", "l", L_, D_, LAM, A_),))
    return discretize(build_network(spec))


def momentum_residual(rho_l, rho0=60.0, phi=100.0):
    # time-derivative-free segment momentum balance
    return A_**2 * (rho_l - rho0) + L_ * LAM / (4 * D_) * (2 * phi) ** 2 / (rho_l + rho0)


class TestSinglePipe:
    def test_outlet_density_matches_bisection(self):
        oracle = brentq(momentum_residual, 1.0, 60.0, xtol=1e-14, rtol=1e-15)
        x = solve_steady(single_pipe(), anchor_node=0, anchor_density=60.0)
        assert x[1] == pytest.approx(oracle, rel=1e-12)
        assert x[1] == pytest.approx(59.9433, abs=5e-5)

    def test_closed_form(self):
        closed = math.sqrt(60.0**2 - L_ * LAM / (A_**2 * D_) * 100.0**2)
        x = solve_steady(single_pipe(), anchor_node=0, anchor_density=60.0)
        assert x[1] == pytest.approx(closed, rel=1e-13)

    def test_anchor_at_outlet(self):
        x = solve_steady(single_pipe(), anchor_node=0, anchor_density=60.0)
        y = solve_steady(single_pipe(), anchor_node=1, anchor_density=x[1])
        np.testing.assert_allclose(y, x, rtol=1e-12)


def test_zero_injection_is_uniform_times_compressors():
    spec = NetworkSpec(
        nodes=(NodeSpec("a"), NodeSpec("b", alpha=1.3028), NodeSpec("c")),
        pipes=(PipeSpec("a", "b", 10000.0, 0.6, 0.01, 350.0), PipeSpec("b", "c", 10000.0, 0.6, 0.01, 350.0)))
    d = discretize(build_network(spec))
    x = solve_steady(d, anchor_node=0, anchor_density=50.0)
    n = d.n
    np.testing.assert_array_equal(x[n:], 0.0)
    rho = dict(zip(d.node_ids, x[:n]))
    assert rho["a"] == rho["b"] == 50.0
    assert rho["c"] == pytest.approx(50.0 * 1.3028, rel=1e-14)


def test_compressor_scales_downstream_start(belgium):
    x = solve_steady(belgium, anchor_node=belgium.node_index("8"), anchor_density=59.0)
    k = belgium.node_index("17")
    assert belgium.alpha[k] == 1.3028
    ms = build_matrices(belgium)
    leaving = [j for j in belgium.attached_segments(k) if belgium.E[j, k] == 1]
    for j in leaving:
        assert (ms.Gamma5 @ x[:belgium.n])[j] == pytest.approx(1.3028 * x[k] + x[belgium.segment_end()[j]])


class TestErrors:
    def test_unbalanced(self):
        with pytest.raises(SteadyStateError, match="unbalanced"):
            solve_steady(path_network(3, injections=[10.0, 0.0, -5.0]))

    def test_negative_density(self):
        d = path_network(2, length=100000.0, diameter=0.2, injections=[40.0, -40.0])
        with pytest.raises(SteadyStateError, match="vanishes"):
            solve_steady(d, anchor_density=5.0)

    def test_non_tree(self):
        spec = NetworkSpec(nodes=tuple(NodeSpec(c) for c in "abc"),
                           pipes=tuple(PipeSpec(a, b, 5000.0, 0.6, 0.01, 350.0) for a, b in ("ab", "bc", "ca")))
        with pytest.raises(SteadyStateError, match="tree"):
            solve_steady(discretize(build_network(spec)))

    def test_bad_anchor_density(self):
        with pytest.raises(SteadyStateError):
            solve_steady(path_network(2), anchor_density=0.0)


def balanced_injections(rng, n):
    d = rng.uniform(-20.0, 20.0, n)
    d[0] -= d.sum()
    return d


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 20))
def test_random_tree_equilibria(seed, n):
    rng = np.random.default_rng(seed)
    d = discretize(build_network(random_tree(rng, n, 4)))
    inj = np.zeros(d.n)
    inj[: d.n_physical] = balanced_injections(rng, d.n_physical)
    anchor = int(rng.integers(0, d.n_physical))
    x = solve_steady(d, d=inj, anchor_node=anchor, anchor_density=70.0)
    ms = build_matrices(d)
    G = rhs_G(ms, x)
    assert np.max(np.abs(G)) <= 1e-9 * np.max(np.abs(ms.Gamma3) @ x[: d.n])
    np.testing.assert_allclose(ms.K0 @ x[d.n:d.n + d.m] + ms.Kl @ x[d.n + d.m:], inj, atol=1e-9 * 20 * d.n)

    # densities fall along positive flow inside compressor-free segments
    flux = x[d.n:d.n + d.m]
    s, e = d.segment_start(), d.segment_end()
    plain = (d.alpha[s] == 1.0) & (flux > 1e-9)
    assert np.all(x[e[plain]] < x[s[plain]])

    # same equilibrium when anchored elsewhere at the density found there
    other = int(rng.integers(0, d.n))
    y = solve_steady(d, d=inj, anchor_node=other, anchor_density=x[other])
    np.testing.assert_allclose(y, x, rtol=1e-9)


def test_segment_fluxes_reject_infeasible():
    d = path_network(3)
    with pytest.raises(SteadyStateError):
        segment_fluxes(d, np.array([1.0, 0.0, 0.0] + [0.0] * (d.n - 3)))
