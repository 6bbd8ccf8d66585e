import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from linepack.dynamics import Inputs, LoadRamp, rhs_G
from linepack.integrator import IntegratorConfig, simulate
from linepack.scenario import ScenarioError, TechniqueConfig, scenario_from_dict
from linepack.sigmoid import SigmoidSource, SigmoidSystem, init_z, nominal_density_for
from linepack.slack import SlackSystem

from conftest import equilibrium, path_network, ramp_inputs

SRC = SigmoidSource(node=0, phi_max=40.0, phi_half=30.0, gamma=0.2, rho_nominal=80.0, r=10.0)


class TestShapeFunctions:
    def test_midpoints(self):
        assert SRC.S1(0.0) == 0.5
        assert SRC.h1(0.0) == SRC.phi_max / 4
        assert SRC.S2(SRC.phi_half) == 0.5
        assert SRC.density(SRC.phi_half) == 40.0

    def test_h1_is_derivative_of_injection(self):
        z = np.linspace(-8.0, 8.0, 100)
        eps = 1e-6
        fd = (SRC.injection(z + eps) - SRC.injection(z - eps)) / (2 * eps)
        np.testing.assert_allclose(SRC.h1(z), fd, atol=1e-6)

    def test_h2_is_derivative_of_density(self):
        phi = np.linspace(0.0, 60.0, 100)
        eps = 1e-6
        fd = (SRC.density(phi + eps) - SRC.density(phi - eps)) / (2 * eps)
        np.testing.assert_allclose(SRC.h2(phi), fd, atol=1e-6)

    def test_zeta(self):
        assert SRC.zeta(SRC.r) == 2.0
        assert SRC.zeta(-SRC.r) == 2.0
        z = np.linspace(-50, 50, 1001)
        assert np.all(SRC.zeta(z) >= 1.0)
        assert SRC.zeta(0.0) == pytest.approx(1.0, abs=1e-40)

    @pytest.mark.parametrize("z", [-745.0, -60.0, 0.0, 12.0, 60.0, 745.0])
    def test_log_h1_zeta_finite(self, z):
        v = SRC.log_h1_zeta(z)
        assert np.isfinite(v)
        if abs(z) < 20:
            assert v == pytest.approx(math.log(SRC.h1(z) * SRC.zeta(z)), rel=1e-12)

    def test_nominal_density(self):
        rho_n = nominal_density_for(60.0, 10.0, 30.0, 0.2)
        src = SigmoidSource(0, 40.0, 30.0, 0.2, rho_n)
        assert src.density(10.0) == pytest.approx(60.0, rel=1e-14)

    def test_rejects_nonpositive_parameters(self):
        with pytest.raises(ValueError):
            SigmoidSource(0, -1.0, 1.0, 0.1, 50.0)
        with pytest.raises(ValueError):
            SigmoidSource(0, 1.0, 1.0, 0.1, 50.0, r=0.0)


class TestInitZ:
    def test_values(self):
        assert init_z(20.0, 40.0) == 0.0
        assert init_z(36.0, 40.0) == pytest.approx(math.log(9.0), rel=1e-15)

    @given(st.floats(1e-3, 1 - 1e-3))
    def test_round_trip(self, frac):
        phi = 40.0 * frac
        assert SRC.injection(init_z(phi, 40.0)) == pytest.approx(phi, rel=1e-12)

    @pytest.mark.parametrize("phi", [0.0, -1.0, 40.0, 41.0])
    def test_out_of_range(self, phi):
        with pytest.raises(ValueError):
            init_z(phi, 40.0)


@settings(max_examples=200)
@given(z=st.floats(-30, 30), phi=st.floats(-50, 150))
def test_bounds_and_signs(z, phi):
    inj = SRC.injection(z)
    assert 0.0 < inj < SRC.phi_max
    assert SRC.h1(z) > 0.0
    assert SRC.h2(phi) < 0.0
    assert 0.0 < SRC.density(phi) < SRC.rho_nominal


def _system(dnet, inputs, x0, phi_max_factor=2.0, gamma=0.2, r=10.0):
    seg = dnet.attached_segments(0)[0]
    phi0 = float(x0[dnet.n + seg])
    phi_max = phi_max_factor * phi0
    rho_n = nominal_density_for(float(x0[0]), phi0, phi_max, gamma)
    return SigmoidSystem(dnet, inputs, SigmoidSource(0, phi_max, phi_max, gamma, rho_n, r))


class TestLinearAlgebra:
    @pytest.fixture
    def setup(self):
        d = path_network(4, injections=[15.0, -5.0, 0.0, -10.0])
        x0 = equilibrium(d)
        s = _system(d, Inputs.constant(d), x0)
        return d, x0, s

    def test_dimension(self, setup):
        d, x0, s = setup
        assert s.size == d.n + 2 * d.m
        y = s.reduce(x0)
        assert y[-1] == pytest.approx(0.0, abs=1e-12)  # phi0 = phi_max / 2
        np.testing.assert_allclose(s.expand(0.0, y), x0, rtol=1e-12)

    def test_steady_state_fixed_point(self, setup):
        d, x0, s = setup
        assert np.max(np.abs(s.rhs(0.0, s.reduce(x0)))) < 1e-8

    def test_block_inverse(self, setup):
        d, x0, s = setup
        y = s.reduce(x0)
        y[-1] = 10.5  # inside the limiter band
        Ms = s.bordered_matrix(0.0, y)
        assert np.max(np.abs(Ms @ s.bordered_inverse(0.0, y) - np.eye(s.size))) < 1e-10
        assert np.linalg.matrix_rank(Ms) == s.size

    def test_sherman_morrison_matches_direct_solve(self, setup, rng):
        d, x0, s = setup
        y = s.reduce(x0) * (1 + 0.01 * rng.standard_normal(s.size))
        y[-1] = 0.3
        ms = s.matrices(0.0)
        G = rhs_G(ms, s.expand(0.0, y))[s.rows]
        direct = np.linalg.solve(s.mx5(0.0, y), G)
        np.testing.assert_allclose(s.rhs(0.0, y)[:-1], direct, rtol=1e-9, atol=1e-12)

    def test_limiter_reduces_z_rate(self, setup):
        d, x0, s = setup
        y = s.reduce(x0) * 1.001
        y[-1] = 10.5
        f = s.rhs(0.0, y)
        free = f[s.k] / s.source.h1(y[-1])
        assert abs(f[-1]) < abs(free)
        assert f[-1] == pytest.approx(free / s.source.zeta(y[-1]), rel=1e-10)


def test_non_leaf_source_rejected():
    d = path_network(3, injections=[-5.0, 10.0, -5.0])
    with pytest.raises(ValueError, match="exactly one attached line"):
        SigmoidSystem(d, Inputs.constant(d), SigmoidSource(1, 10.0, 10.0, 0.1, 50.0))


def test_multiple_sources_rejected():
    sc = scenario_from_dict({"schema": "linepack-scn/1", "t_end_s": 10.0,
                             "techniques": {"sigmoid": {"node": ["1", "3"], "headroom_kg_s": 5}}})
    with pytest.raises(ScenarioError, match="exactly one sigmoid source"):
        TechniqueConfig.from_scenario(sc, "sigmoid")


def test_matches_slack_far_from_saturation():
    d = path_network(3, length=20000.0, injections=[20.0, 0.0, -20.0])
    x0 = equilibrium(d)
    inp = ramp_inputs(d, 2, -5.0, 0.0, 600.0)
    cfg = IntegratorConfig(rel_tol=1e-6, abs_tol=1e-9, dt_out=60.0)
    sig = simulate(_system(d, inp, x0, phi_max_factor=10.0, gamma=1e-6), x0, 3 * 3600.0, cfg)
    sl = simulate(SlackSystem(d, inp, 0, 50.0), x0, 3 * 3600.0, cfg)
    err = np.max(np.abs(sig.states - sl.states) / np.max(np.abs(sl.states), axis=0))
    assert err < 1e-3


@pytest.mark.slow
def test_saturated_source_drains_linepack_at_unmet_rate():
    # 10 kg/s of headroom against a 40 kg/s load increase: 30 kg/s stays unmet
    d = path_network(3, length=40000.0, diameter=1.0, injections=[20.0, 0.0, -20.0])
    inp = Inputs(d0=d.injection.copy(), alpha0=d.alpha.copy(), ramps=(LoadRamp(2, -40.0 / 600, 0.0, 600.0),))
    x0 = equilibrium(d, density=60.0)
    seg = d.attached_segments(0)[0]
    phi0 = float(x0[d.n + seg])
    phi_max = phi0 + 10.0 / d.area[seg]
    gamma, r = 5.0, 10.0
    src = SigmoidSource(0, phi_max, phi_max + 0.2, gamma,
                        nominal_density_for(60.0, phi0, phi_max + 0.2, gamma), r)
    zs = []
    traj = simulate(SigmoidSystem(d, inp, src), x0, 16 * 3600.0,
                    IntegratorConfig(dt_out=60.0, max_step=600.0),
                    on_step=lambda t, y: zs.append((t, y[-1])))
    zs = np.array(zs)
    assert traj.termination.cause == "t_end"
    hit = np.flatnonzero(zs[:, 1] > r)
    assert hit.size, "constraint band never reached"
    # zeta keeps z near the band edge
    assert zs[:, 1].max() < r + 1.0
    sel = traj.times > zs[hit[0], 0] + 600.0
    slope = np.polyfit(traj.times[sel], traj.linepack[sel], 1)[0]
    assert slope == pytest.approx(-30.0, rel=0.02)
