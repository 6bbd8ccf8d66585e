"""Stiff time integration of the reduced explicit-form systems.

The adaptive method is the one-step TR-BDF2 composite (trapezoidal stage to
``t + gamma h`` followed by a BDF2 stage to ``t + h``, ``gamma = 2 - sqrt 2``),
which is L-stable and second order, with the usual filtered local error
estimate. Backward Euler at a fixed step is kept as a reference oracle.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.linalg

from .dynamics import DepletionError, linepack_series

log = logging.getLogger(__name__)

GAMMA = 2.0 - math.sqrt(2.0)
D = GAMMA / 2.0
_W1 = 1.0 / (GAMMA * (2.0 - GAMMA))
_W0 = (1.0 - GAMMA) ** 2 / (GAMMA * (2.0 - GAMMA))
_KERR = (-3.0 * GAMMA**2 + 4.0 * GAMMA - 2.0) / (12.0 * (2.0 - GAMMA))

# RHS failures that signal "step too large or state infeasible", not bugs
RECOVERABLE = (ArithmeticError, np.linalg.LinAlgError, ValueError)

METHODS = ("adaptive_implicit", "backward_euler_fixed")


@dataclass
class IntegratorConfig:
    rel_tol: float = 1e-3
    abs_tol: float = 1e-6
    dt_out: float = 0.5
    max_step: float = math.inf
    first_step: float | None = None
    min_step: float = 1e-6
    method: str = "adaptive_implicit"
    fixed_step: float = 0.05
    event_tol: float = 1.0  # s, bisection width for event times
    max_steps: int = 1_000_000

    def __post_init__(self):
        if self.rel_tol <= 0 or self.abs_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.dt_out <= 0:
            raise ValueError("output stride must be positive")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")


@dataclass
class Event:
    """Zero crossing of ``fun(t, y)`` from positive to non-positive."""

    name: str
    fun: Callable[[float, np.ndarray], float]
    terminal: bool = True


class StepFailure(RuntimeError):
    def __init__(self, message: str, t: float, cause: BaseException | None = None):
        super().__init__(message)
        self.t = t
        self.cause = cause


@dataclass
class OdeSolution:
    t: np.ndarray
    y: np.ndarray  # (len(t), size)
    status: str  # "t_end" | "event" | "failure"
    message: str = ""
    event: str | None = None
    event_time: float | None = None
    first_crossings: dict[str, float] = field(default_factory=dict)
    failure_cause: BaseException | None = None
    nsteps: int = 0
    nrejected: int = 0
    nfev: int = 0
    njev: int = 0


def _rms(v: np.ndarray) -> float:
    return float(np.sqrt(np.mean(v * v)))


def hermite(t0, y0, f0, t1, y1, f1, t):
    h = t1 - t0
    s = (t - t0) / h
    h00 = (1 + 2 * s) * (1 - s) ** 2
    h10 = s * (1 - s) ** 2
    h01 = s * s * (3 - 2 * s)
    h11 = s * s * (s - 1)
    return h00 * y0 + h10 * h * f0 + h01 * y1 + h11 * h * f1


class _Counter:
    def __init__(self, fun):
        self.fun = fun
        self.nfev = 0
        self.njev = 0

    def __call__(self, t, y):
        self.nfev += 1
        out = self.fun(t, y)
        if not np.all(np.isfinite(out)):
            raise FloatingPointError("non-finite derivative")
        return out

    def jacobian(self, t, y, f0):
        """Forward differences with per-column scaled increments."""
        self.njev += 1
        n = y.size
        J = np.empty((n, n))
        delta = math.sqrt(np.finfo(float).eps) * np.maximum(np.abs(y), 1.0)
        for i in range(n):
            yp = y.copy()
            yp[i] += delta[i]
            J[:, i] = (self(t, yp) - f0) / delta[i]
        return J


class _Recorder:
    """Collects output samples on the ``dt_out`` grid and watches events."""

    def __init__(self, t0, y0, t_end, dt_out, events, event_tol):
        self.t_end = t_end
        self.dt_out = dt_out
        self.t0 = t0
        self.k = 1
        self.ts = [t0]
        self.ys = [y0.copy()]
        self.events = list(events)
        self.event_tol = event_tol
        self.g_prev = [ev.fun(t0, y0) for ev in self.events]
        self.first: dict[str, float] = {}
        for ev, g in zip(self.events, self.g_prev):
            if g <= 0:
                self.first[ev.name] = t0

    def _next_out(self):
        return self.t0 + self.k * self.dt_out

    def add_step(self, t0, y0, f0, t1, y1, f1):
        """Returns (name, time, state) of a terminal event inside the step, if any."""
        hit = None
        for idx, ev in enumerate(self.events):
            g1 = ev.fun(t1, y1)
            if self.g_prev[idx] > 0 >= g1:
                lo, hi = t0, t1
                while hi - lo > self.event_tol:
                    mid = 0.5 * (lo + hi)
                    if ev.fun(mid, hermite(t0, y0, f0, t1, y1, f1, mid)) > 0:
                        lo = mid
                    else:
                        hi = mid
                self.first.setdefault(ev.name, hi)
                if ev.terminal and (hit is None or hi < hit[1]):
                    hit = (ev.name, hi, hermite(t0, y0, f0, t1, y1, f1, hi))
            self.g_prev[idx] = g1
        stop = t1 if hit is None else hit[1]
        while self._next_out() <= stop + 1e-9 * max(1.0, abs(stop)):
            tk = min(self._next_out(), t1)
            self.ts.append(tk)
            self.ys.append(y1.copy() if tk == t1 else hermite(t0, y0, f0, t1, y1, f1, tk))
            self.k += 1
        if hit is not None:
            if self.ts[-1] < hit[1]:
                self.ts.append(hit[1])
                self.ys.append(hit[2])
        elif t1 >= self.t_end and self.ts[-1] < t1:
            self.ts.append(t1)
            self.ys.append(y1.copy())
        return hit


def integrate(
    fun: Callable[[float, np.ndarray], np.ndarray],
    t_span: tuple[float, float],
    y0: np.ndarray,
    config: IntegratorConfig | None = None,
    events: Sequence[Event] = (),
    breakpoints: Sequence[float] = (),
    on_step: Callable[[float, np.ndarray], None] | None = None,
) -> OdeSolution:
    config = config or IntegratorConfig()
    if config.method == "backward_euler_fixed":
        return _backward_euler(fun, t_span, y0, config, events, breakpoints, on_step)
    return _trbdf2(fun, t_span, y0, config, events, breakpoints, on_step)


def _solution(rec, status, counter, **kw):
    return OdeSolution(t=np.asarray(rec.ts), y=np.asarray(rec.ys), status=status,
                       first_crossings=dict(rec.first), nfev=counter.nfev, njev=counter.njev, **kw)


def _stops(t0, t_end, breakpoints):
    return sorted({b for b in breakpoints if t0 < b < t_end} | {t_end})


def _initial_step(f, t, y, f0, rtol, atol, h_max, order=2):
    """Starting step from the scaled sizes of y, f and a difference
    estimate of the second derivative (Hairer, Norsett and Wanner)."""
    scale = atol + rtol * np.abs(y)
    d0, d1 = _rms(y / scale), _rms(f0 / scale)
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    h0 = min(h0, h_max)
    try:
        d2 = _rms((f(t + h0, y + h0 * f0) - f0) / scale) / h0
    except RECOVERABLE:
        return h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, 1e-3 * h0)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1.0 / (order + 1))
    return min(100.0 * h0, h1, h_max)


def _trbdf2(fun, t_span, y0, cfg, events, breakpoints, on_step):
    f = _Counter(fun)
    t, t_end = float(t_span[0]), float(t_span[1])
    y = np.array(y0, dtype=float)
    rec = _Recorder(t, y, t_end, cfg.dt_out, events, cfg.event_tol)
    stops = _stops(t, t_end, breakpoints)
    rtol, atol = cfg.rel_tol, cfg.abs_tol
    f0 = f(t, y)
    J = f.jacobian(t, y, f0)
    J_fresh = True
    h = cfg.first_step or _initial_step(f, t, y, f0, rtol, atol, min(cfg.max_step, t_end - t))
    h = min(h, cfg.max_step, t_end - t)
    nsteps = nrej = 0
    lu_h = None
    lu = None
    last_err: BaseException | None = None
    # step size at which Newton last failed with a fresh Jacobian; growth
    # beyond it is allowed only gradually so the solver does not keep
    # climbing back into the same failure
    h_cap = math.inf
    rejected = False

    while t < t_end:
        if nsteps >= cfg.max_steps:
            return _solution(rec, "failure", f, message="maximum number of steps reached",
                             nsteps=nsteps, nrejected=nrej)
        stop = next(s for s in stops if s > t)
        land = False
        if t + h >= stop - 1e-12 * max(1.0, abs(stop)):
            h = stop - t
            land = True
        elif t + 1.5 * h > stop:
            h = 0.5 * (stop - t)
        if h < cfg.min_step:
            return _solution(rec, "failure", f, message=f"step size underflow at t={t:.6g}",
                             failure_cause=last_err,
                             nsteps=nsteps, nrejected=nrej)
        if lu is None or lu_h != h:
            try:
                lu = scipy.linalg.lu_factor(np.eye(y.size) - D * h * J, check_finite=False)
            except (ValueError, np.linalg.LinAlgError) as exc:
                last_err = exc
                h *= 0.5
                lu = None
                continue
            lu_h = h
        t1 = stop if land else t + h
        # evaluate the landing point as a left limit so a breakpoint's new
        # input regime does not leak into the step that ends on it
        t1_eval = np.nextafter(t1, t) if land and t1 != t_end else t1
        scale = atol + rtol * np.abs(y)
        try:
            tg = t + GAMMA * h
            rhs1 = y + D * h * f0
            z1, fg = _newton(f, tg, y.copy(), rhs1, D * h, lu, scale)
            rhs2 = _W1 * z1 - _W0 * y
            y_pred = y + (z1 - y) / GAMMA
            y1, f1 = _newton(f, t1_eval, y_pred, rhs2, D * h, lu, scale)
        except _NewtonFailure as exc:
            last_err = exc.cause or exc
            nrej += 1
            if not J_fresh:
                try:
                    J = f.jacobian(t, y, f0)
                    J_fresh = True
                    lu = None
                    continue
                except RECOVERABLE as jexc:
                    last_err = jexc
            h *= 0.5
            h_cap = h
            rejected = True
            continue
        est = 2.0 * _KERR * h * (f0 / GAMMA - fg / (GAMMA * (1.0 - GAMMA)) + f1 / (1.0 - GAMMA))
        err = scipy.linalg.lu_solve(lu, est, check_finite=False)
        err_norm = _rms(err / (atol + rtol * np.maximum(np.abs(y), np.abs(y1))))
        if not np.isfinite(err_norm) or err_norm > 1.0:
            nrej += 1
            fac = 0.2 if not np.isfinite(err_norm) else max(0.2, 0.9 * err_norm ** (-1.0 / 3.0))
            h *= fac
            rejected = True
            continue
        nsteps += 1
        hit = rec.add_step(t, y, f0, t1, y1, f1)
        if hit is not None:
            name, te, ye = hit
            if on_step is not None:
                on_step(te, ye)
            return _solution(rec, "event", f, event=name, event_time=te,
                             message=f"event {name} at t={te:.6g}", nsteps=nsteps, nrejected=nrej)
        t, y = t1, y1
        if on_step is not None:
            on_step(t, y)
        fac = 5.0 if err_norm == 0 else min(5.0, max(0.2, 0.9 * err_norm ** (-1.0 / 3.0)))
        if rejected:
            fac = min(fac, 1.0)
            rejected = False
        h_new = min(h * fac, cfg.max_step, h_cap)
        h_cap *= 1.1
        if land:
            try:
                f0 = f(t, y)
            except RECOVERABLE as exc:
                return _solution(rec, "failure", f, message=f"restart failed at t={t:.6g}: {exc}",
                                 failure_cause=exc, nsteps=nsteps, nrejected=nrej)
            J = f.jacobian(t, y, f0)
            J_fresh = True
            h_new = min(h_new, h) if cfg.first_step is None else h_new
        else:
            f0 = f1
            J_fresh = False
        # keep the factorization when the step would change only slightly
        h = h if (not land and 1.0 <= h_new / h <= 1.2) else h_new
    return _solution(rec, "t_end", f, nsteps=nsteps, nrejected=nrej)


class _NewtonFailure(Exception):
    def __init__(self, message, cause=None):
        super().__init__(message)
        self.cause = cause


def _newton(f, t, y_guess, rhs, dh, lu, scale, max_iter=8, kappa=0.05):
    """Solve ``Y - dh f(t, Y) = rhs`` by simplified Newton."""
    Y = y_guess.copy()
    prev = None
    for _ in range(max_iter):
        try:
            FY = f(t, Y)
        except RECOVERABLE as exc:
            raise _NewtonFailure("rhs evaluation failed", exc) from exc
        resid = Y - dh * FY - rhs
        dY = scipy.linalg.lu_solve(lu, -resid, check_finite=False)
        Y = Y + dY
        nrm = _rms(dY / scale)
        if not np.isfinite(nrm):
            raise _NewtonFailure("non-finite Newton increment")
        # increments this small are rounding noise; the rate test would
        # misread their fluctuation as divergence
        if nrm <= 1e-3 * kappa:
            break
        if prev is not None:
            rate = nrm / prev
            # stiff modes can make one correction undo the previous one, so
            # only a clearly growing increment counts as divergence
            if rate >= 2.0:
                raise _NewtonFailure("Newton iteration diverging")
            if rate < 1.0 and rate / (1.0 - rate) * nrm <= kappa:
                break
        prev = nrm
    else:
        raise _NewtonFailure("Newton iteration did not converge")
    try:
        FY = f(t, Y)
    except RECOVERABLE as exc:
        raise _NewtonFailure("rhs evaluation failed", exc) from exc
    return Y, FY


def _backward_euler(fun, t_span, y0, cfg, events, breakpoints, on_step):
    """Fixed-step backward Euler, Newton solved to 1e-8 of the tolerance scale.

    The iteration matrix is kept while Newton contracts quickly and rebuilt
    when it slows down; the converged states do not depend on that choice.
    """
    f = _Counter(fun)
    t, t_end = float(t_span[0]), float(t_span[1])
    y = np.array(y0, dtype=float)
    rec = _Recorder(t, y, t_end, cfg.dt_out, events, cfg.event_tol)
    stops = _stops(t, t_end, breakpoints)
    f0 = f(t, y)
    nsteps = 0
    lu, lu_h = None, None
    while t < t_end - 1e-12 * max(1.0, abs(t_end)):
        stop = next(s for s in stops if s > t + 1e-12 * max(1.0, abs(t)))
        h = min(cfg.fixed_step, stop - t)
        land = stop - (t + h) <= 1e-9 * max(1.0, abs(stop))
        t1 = stop if land else t + h
        t1_eval = np.nextafter(t1, t) if land and t1 != t_end else t1
        scale = cfg.abs_tol + cfg.rel_tol * np.abs(y)
        try:
            for fresh in (False, True):
                if lu is None or fresh or lu_h != h:
                    J = f.jacobian(t, y, f0)
                    lu, lu_h = scipy.linalg.lu_factor(np.eye(y.size) - h * J, check_finite=False), h
                Y = y + h * f0
                for _ in range(10 if fresh else 4):
                    resid = Y - h * f(t1_eval, Y) - y
                    dY = scipy.linalg.lu_solve(lu, -resid, check_finite=False)
                    Y = Y + dY
                    if _rms(dY / scale) < 1e-8:
                        break
                else:
                    continue
                break
            else:
                raise StepFailure(f"backward Euler Newton failed at t={t1:.6g}", t1)
            f1 = f(t1_eval, Y)
        except RECOVERABLE as exc:
            return _solution(rec, "failure", f, message=str(exc), failure_cause=exc, nsteps=nsteps)
        except StepFailure as exc:
            return _solution(rec, "failure", f, message=str(exc), nsteps=nsteps)
        nsteps += 1
        hit = rec.add_step(t, y, f0, t1, Y, f1)
        if hit is not None:
            return _solution(rec, "event", f, event=hit[0], event_time=hit[1], nsteps=nsteps)
        t, y = t1, Y
        if on_step is not None:
            on_step(t, y)
        f0 = f(t, y) if land else f1
    return _solution(rec, "t_end", f, nsteps=nsteps)


# -- trajectories ---------------------------------------------------------------

DEPLETION_FLOOR = 1.0
"""Density (kg/m3) treated as depleted: about atmospheric pressure at
a = 350 m/s, where no deliverable gas remains in the line."""

CAUSES = ("t_end", "depletion", "rho_min_violation", "infeasible", "numerical_failure")


@dataclass
class Termination:
    cause: str
    time: float
    node: str | None = None
    message: str = ""


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray  # full [rho; phi0; phil] samples, one row per time
    linepack: np.ndarray
    injection_total: np.ndarray  # sum of nodal injections, kg/s
    termination: Termination
    node_ids: list[str]  # physical nodes, in state order
    first_crossings: dict[str, float] = field(default_factory=dict)
    nsteps: int = 0
    nrejected: int = 0
    step_times: np.ndarray | None = None

    def __post_init__(self):
        if len(self.times) != len(self.states):
            raise ValueError("times and states differ in length")

    @property
    def densities(self) -> np.ndarray:
        return self.states[:, : len(self.node_ids)]

    def min_density(self) -> dict[str, float]:
        low = self.densities.min(axis=0)
        return {nid: float(v) for nid, v in zip(self.node_ids, low)}

    def final_state(self) -> np.ndarray:
        return self.states[-1]


def _density_event(system, name, floor, terminal):
    npys = system.dnet.n_physical

    def g(t, y):
        try:
            return float(np.min(system.expand(t, y)[:npys])) - floor
        except RECOVERABLE:
            return -1.0
    return Event(name, g, terminal)


def simulate(
    system,
    x0: np.ndarray,
    t_end: float,
    config: IntegratorConfig | None = None,
    events: Sequence[Event] = (),
    t0: float = 0.0,
    rho_min: float | None = None,
    stop_on_rho_min: bool = False,
    depletion_floor: float = DEPLETION_FLOOR,
    on_step: Callable[[float, np.ndarray], None] | None = None,
) -> Trajectory:
    """Integrate a technique system from the full consistent state ``x0``.

    Terminates on ``t_end``, on the first physical density at or below
    ``depletion_floor``, on a ``rho_min`` crossing when ``stop_on_rho_min``
    is set, or when the step size collapses (labelled by its cause).
    """
    config = config or IntegratorConfig()
    dnet = system.dnet
    y0 = system.initial_state(np.asarray(x0, dtype=float))
    evs = [_density_event(system, "depletion", depletion_floor, True)]
    if rho_min is not None:
        evs.append(_density_event(system, "rho_min_violation", rho_min, stop_on_rho_min))
    evs.extend(events)
    accept = getattr(system, "accept", None)
    step_times: list[float] = []

    def after_step(t, y):
        step_times.append(t)
        if accept is not None:
            accept(t, y)
        if on_step is not None:
            on_step(t, y)

    sol = integrate(system.rhs, (t0, t_end), y0, config, evs,
                    system.inputs.breakpoints(), after_step)
    states = np.array([system.expand(t, y) for t, y in zip(sol.t, sol.y)])
    alphas = np.array([system.inputs.alpha(t) for t in sol.t])
    lp = linepack_series(states, dnet, alphas)
    inj = np.array([float(np.sum(system.injections(t, y))) for t, y in zip(sol.t, sol.y)])

    npys = dnet.n_physical

    def lowest(row):
        return dnet.node_ids[int(np.argmin(row[:npys]))]

    t_last = float(sol.t[-1])
    if sol.status == "t_end":
        term = Termination("t_end", t_last)
    elif sol.status == "event":
        term = Termination(sol.event, float(sol.event_time), lowest(states[-1]), sol.message)
    else:
        cause = sol.failure_cause
        from .balancing import InfeasibleError  # local: balancing imports this module's siblings
        if isinstance(cause, InfeasibleError):
            label = "infeasible"
        elif isinstance(cause, DepletionError):
            label = "depletion"
        else:
            label = "numerical_failure"
        term = Termination(label, t_last, lowest(states[-1]), f"{sol.message}: {cause}" if cause else sol.message)
        log.info("integration stopped at t=%.1f s (%s)", t_last, term.message)
    return Trajectory(
        times=sol.t, states=states, linepack=lp, injection_total=inj, termination=term,
        node_ids=list(dnet.node_ids[:npys]), first_crossings=sol.first_crossings,
        nsteps=sol.nsteps, nrejected=sol.nrejected, step_times=np.asarray(step_times),
    )


def survival_time(traj: Trajectory, rho_floor: float = 0.0) -> float | None:
    """First time any physical-node density is at or below ``rho_floor``.

    A run that ended in depletion (or an infeasible balancing density) counts
    as reaching every floor by its termination time.
    """
    dens_min = traj.densities.min(axis=1)
    below = np.flatnonzero(dens_min <= rho_floor)
    if below.size:
        k = int(below[0])
        if k == 0:
            return float(traj.times[0])
        # linear interpolation between the bracketing samples
        t0, t1 = traj.times[k - 1], traj.times[k]
        g0, g1 = dens_min[k - 1] - rho_floor, dens_min[k] - rho_floor
        return float(t0 + (t1 - t0) * g0 / (g0 - g1))
    if traj.termination.cause in ("depletion", "infeasible"):
        return float(traj.termination.time)
    return None
