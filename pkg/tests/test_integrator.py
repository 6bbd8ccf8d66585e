import math

import numpy as np
import pytest

from linepack.integrator import (
    Event,
    IntegratorConfig,
    Termination,
    Trajectory,
    hermite,
    integrate,
    survival_time,
)


def decay(t, y):
    return -y


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(rel_tol=0.0), dict(abs_tol=-1.0), dict(dt_out=0.0),
                                    dict(method="rk4")])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            IntegratorConfig(**kw)

    def test_defaults(self):
        cfg = IntegratorConfig()
        assert (cfg.rel_tol, cfg.abs_tol, cfg.dt_out) == (1e-3, 1e-6, 0.5)
        assert cfg.method == "adaptive_implicit"


def test_hermite_is_exact_for_cubics():
    def p(t):
        return 2 * t**3 - t**2 + 4 * t - 1

    def dp(t):
        return 6 * t**2 - 2 * t + 4

    for t in np.linspace(1.0, 3.0, 7):
        assert hermite(1.0, p(1.0), dp(1.0), 3.0, p(3.0), dp(3.0), t) == pytest.approx(p(t), rel=1e-13)


class TestAccuracy:
    def test_exponential_decay(self):
        sol = integrate(decay, (0.0, 1.0), np.array([1.0]), IntegratorConfig(rel_tol=1e-8, abs_tol=1e-12))
        assert sol.status == "t_end"
        assert sol.t[-1] == 1.0
        # local error control: global error is roughly steps x tolerance
        assert sol.y[-1, 0] == pytest.approx(math.exp(-1.0), rel=5e-6)

    def test_error_shrinks_with_tolerance(self):
        errs = []
        for tol in (1e-4, 1e-6, 1e-8):
            sol = integrate(decay, (0.0, 5.0), np.array([1.0]), IntegratorConfig(rel_tol=tol, abs_tol=tol * 1e-3))
            errs.append(abs(sol.y[-1, 0] - math.exp(-5.0)))
        assert errs[0] > errs[1] > errs[2]
        assert errs[2] < 1e-7

    def test_backward_euler_is_first_order(self):
        errs = []
        for h in (0.02, 0.01):
            cfg = IntegratorConfig(method="backward_euler_fixed", fixed_step=h)
            sol = integrate(decay, (0.0, 1.0), np.array([1.0]), cfg)
            errs.append(abs(sol.y[-1, 0] - math.exp(-1.0)))
        assert errs[0] / errs[1] == pytest.approx(2.0, rel=0.05)

    def test_stiff_problem_takes_large_steps(self):
        def f(t, y):
            return np.array([-1e4 * (y[0] - math.cos(t))])

        sol = integrate(f, (0.0, 10.0), np.array([1.0]), IntegratorConfig(rel_tol=1e-4, abs_tol=1e-8))
        assert sol.status == "t_end"
        assert sol.y[-1, 0] == pytest.approx(math.cos(10.0), abs=1e-3)
        assert sol.nsteps < 500


def test_output_grid():
    sol = integrate(decay, (0.0, 10.25), np.array([1.0]), IntegratorConfig(dt_out=2.0, rel_tol=1e-6, abs_tol=1e-10))
    np.testing.assert_allclose(sol.t, [0, 2, 4, 6, 8, 10, 10.25])
    np.testing.assert_allclose(sol.y[:, 0], np.exp(-sol.t), rtol=1e-3)


def test_breakpoints_are_landed_on():
    def f(t, y):
        # right-continuous switch, like the scheduled inputs
        return np.array([0.0 if t < 5.0 else 1.0])

    steps = []
    sol = integrate(f, (0.0, 10.0), np.array([0.0]), IntegratorConfig(max_step=3.0),
                    breakpoints=[5.0], on_step=lambda t, y: steps.append(t))
    assert 5.0 in steps
    assert sol.y[-1, 0] == pytest.approx(5.0, rel=1e-10)
    assert np.all(np.diff(steps) > 0)


class TestEvents:
    @staticmethod
    def fall(t, y):
        return np.array([-1.0])

    @pytest.mark.parametrize("dt_out", [0.5, 5.0])
    def test_terminal_event_time(self, dt_out):
        ev = Event("low", lambda t, y: y[0] - 3.3)
        sol = integrate(self.fall, (0.0, 20.0), np.array([10.0]), IntegratorConfig(dt_out=dt_out), [ev])
        assert sol.status == "event"
        assert sol.event == "low"
        assert abs(sol.event_time - 6.7) <= 1.0
        assert sol.t[-1] == sol.event_time

    def test_bisection_width(self):
        ev = Event("low", lambda t, y: y[0] - 3.3)
        cfg = IntegratorConfig(event_tol=1e-3, max_step=100.0)
        sol = integrate(self.fall, (0.0, 20.0), np.array([10.0]), cfg, [ev])
        assert sol.event_time == pytest.approx(6.7, abs=1e-3)

    def test_non_terminal_event_is_recorded(self):
        ev = Event("half", lambda t, y: y[0] - 5.0, terminal=False)
        sol = integrate(self.fall, (0.0, 8.0), np.array([10.0]), IntegratorConfig(event_tol=0.01), [ev])
        assert sol.status == "t_end"
        assert sol.first_crossings["half"] == pytest.approx(5.0, abs=0.01)

    def test_already_crossed_at_start(self):
        ev = Event("low", lambda t, y: y[0] - 20.0, terminal=False)
        sol = integrate(self.fall, (0.0, 1.0), np.array([10.0]), events=[ev])
        assert sol.first_crossings["low"] == 0.0


def test_failure_is_reported_not_raised():
    def f(t, y):
        if y[0] < 0.5:
            raise ArithmeticError("state left the admissible region")
        return -y

    sol = integrate(f, (0.0, 5.0), np.array([1.0]), IntegratorConfig(max_step=0.2))
    assert sol.status == "failure"
    assert isinstance(sol.failure_cause, ArithmeticError)
    assert "underflow" in sol.message
    assert sol.y[-1, 0] >= 0.5


def test_deterministic():
    def f(t, y):
        return np.array([y[1], -np.sin(y[0]) - 0.1 * y[1]])

    cfg = IntegratorConfig(dt_out=0.1)
    a = integrate(f, (0.0, 20.0), np.array([1.0, 0.0]), cfg)
    b = integrate(f, (0.0, 20.0), np.array([1.0, 0.0]), cfg)
    assert np.array_equal(a.t, b.t)
    assert np.array_equal(a.y, b.y)


def _traj(times, dens, cause="t_end"):
    times = np.asarray(times, float)
    states = np.column_stack([dens, np.full(len(times), 60.0)])
    return Trajectory(times=times, states=states, linepack=np.zeros(len(times)),
                      injection_total=np.zeros(len(times)),
                      termination=Termination(cause, float(times[-1])), node_ids=["a", "b"])


class TestSurvivalTime:
    def test_interpolates_crossing(self):
        traj = _traj([0, 10, 20], [50.0, 30.0, 10.0])
        assert survival_time(traj, 20.0) == pytest.approx(15.0)

    def test_none_without_crossing(self):
        assert survival_time(_traj([0, 10], [50.0, 40.0])) is None

    def test_depletion_counts(self):
        assert survival_time(_traj([0, 10], [50.0, 40.0], cause="depletion")) == 10.0

    def test_already_below(self):
        assert survival_time(_traj([3, 10], [10.0, 5.0]), 20.0) == 3.0
