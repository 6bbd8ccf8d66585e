"""Constant-flux sources with a balancing node.

Every injection is specified. The balancing node's density is algebraic: it
solves the momentum balance of one attached line, whose flux-rate sum is
obtained from the conservation equations and the remaining momentum
equations without reference to that density (for a leaf node).
"""
from __future__ import annotations

import math

import numpy as np
import scipy.linalg

from .dynamics import DepletionError, Inputs, RegularityError, rhs_G
from .network import DiscretizedNetwork
from .slack import ReducedSystem


class InfeasibleError(DepletionError):
    """The balancing-node momentum balance has no admissible density."""


class DoubleRootError(ArithmeticError):
    """dQ/drho vanishes at the accepted root; the step must be rejected."""


def quadratic_roots(a: float, b: float, c: float) -> list[float]:
    """Real roots of a x**2 + b x + c = 0 (cancellation-free form)."""
    disc = b * b - 4.0 * a * c
    if disc < 0:
        # a tangent root may round to a slightly negative discriminant
        if -disc > 8.0 * np.finfo(float).eps * max(b * b, abs(4.0 * a * c)):
            return []
        disc = 0.0
    sq = math.sqrt(disc)
    q = -0.5 * (b + math.copysign(sq, b))
    if q == 0.0:
        return [0.0, 0.0]
    return [q / a, c / q]


def solve_rho0(
    phi0: float,
    phil: float,
    rho_far: float,
    rate_sum: float,
    wave_speed: float,
    length: float,
    friction: float,
    diameter: float,
    at_start: bool = True,
    previous: float | None = None,
) -> float:
    """Density at the balancing end of a segment from its momentum balance.

    ``rate_sum`` is ``dphi0/dt + dphil/dt``. With ``at_start`` the unknown is
    the segment-start (outflow side) density and ``rho_far`` the end density;
    otherwise the roles swap. Among positive roots, the one nearest
    ``previous`` is returned (the larger one if there is no previous value).
    """
    a2 = wave_speed**2
    half = length / 2.0
    c = length * friction / (4.0 * diameter)
    F = (phi0 + phil) * abs(phi0 + phil)
    lin = half * rate_sum
    if at_start:
        roots = quadratic_roots(-a2, lin, lin * rho_far + a2 * rho_far**2 + c * F)
    else:
        roots = quadratic_roots(a2, lin, lin * rho_far - a2 * rho_far**2 + c * F)
    positive = [r for r in roots if r > 0]
    if not positive:
        raise InfeasibleError("momentum balance has no positive density root")
    if previous is None:
        return max(positive)
    return min(positive, key=lambda r: abs(r - previous))


def momentum_rows(ms, x: np.ndarray) -> np.ndarray:
    return rhs_G(ms, x)[ms.n + ms.m:]


def momentum_vjp(ms, x: np.ndarray, wm: np.ndarray) -> np.ndarray:
    """``wm @ d(momentum rows)/dx`` without forming the Jacobian."""
    n, m = ms.n, ms.m
    rho, phi0, phil = x[:n], x[n:n + m], x[n + m:]
    dens = ms.Gamma5 @ rho
    s = phi0 + phil
    c = np.diag(ms.Gamma4)
    out = np.empty(n + 2 * m)
    out[:n] = wm @ ms.Gamma3 + (wm * c * s * np.abs(s) / dens**2) @ ms.Gamma5
    dflux = wm * (-2.0 * c * np.abs(s) / dens)
    out[n:n + m] = dflux
    out[n + m:] = dflux
    return out


class BalancingSystem(ReducedSystem):
    """``dx~/dt = M_x4r^{-1} (G~r - M_x3r drho_b/dt)``, ``rho_b = g(x~)``."""

    technique = "balancing"

    def __init__(self, dnet: DiscretizedNetwork, inputs: Inputs, balancing_node: int,
                 segment: int | None = None, rho_guess: float | None = None):
        if not dnet.is_tree:
            raise ValueError("the balancing technique requires a tree network")
        attached = dnet.attached_segments(balancing_node)
        if segment is None:
            segment = min(attached)
        elif segment not in attached:
            raise ValueError(f"segment {segment} is not attached to node {dnet.node_ids[balancing_node]}")
        n, m = dnet.n, dnet.m
        self.segment = segment
        self.at_start = dnet.E[segment, balancing_node] == 1
        self.start = dnet.segment_start()
        self.end = dnet.segment_end()
        self.leaf = len(attached) == 1
        size = n + 2 * m
        super().__init__(dnet, inputs, balancing_node,
                         rows=np.delete(np.arange(size), n + m + segment),
                         cols=np.delete(np.arange(size), balancing_node))
        ms = self.matrices(0.0)
        B = np.zeros((n + m - 1, 2 * m))
        B[:n, :m] = ms.K0
        B[:n, m:] = ms.Kl
        keep = np.delete(np.arange(m), segment)
        B[n:, :m] = ms.Gamma2[keep]
        B[n:, m:] = ms.Gamma2[keep]
        self._keep = keep
        self._B_lu = scipy.linalg.lu_factor(B)
        if np.min(np.abs(np.diag(self._B_lu[0]))) <= B.shape[0] * np.finfo(float).eps * np.max(np.abs(B)):
            raise RegularityError("flux-derivative system is singular")
        sel = np.zeros(2 * m)
        sel[segment] = sel[m + segment] = 1.0
        w = scipy.linalg.lu_solve(self._B_lu, sel, trans=1)
        self._w_cons = w[:n]
        self._w_mom = np.zeros(m)
        self._w_mom[keep] = w[n:]
        self._a2 = dnet.wave_speed**2
        self._c = dnet.length * dnet.friction / (4.0 * dnet.diameter)
        self._prev = rho_guess

    # -- flux derivatives -------------------------------------------------
    def flux_derivatives(self, t: float, x: np.ndarray) -> np.ndarray:
        """All ``[dphi0/dt; dphil/dt]`` from conservation and the kept
        momentum equations."""
        ms = self.matrices(t)
        r = np.concatenate([self.inputs.d_dot(t), momentum_rows(ms, x)[self._keep]])
        return scipy.linalg.lu_solve(self._B_lu, r, check_finite=False)

    def _rate_sum(self, t, x, ms):
        R = momentum_rows(ms, x)
        return float(self._w_cons @ self.inputs.d_dot(t) + self._w_mom @ R)

    # -- algebraic density --------------------------------------------------
    def _Q(self, t, x, ms):
        j, n, m = self.segment, self.n, self.m
        rho_s = ms.alpha[self.start[j]] * x[self.start[j]]
        rho_e = x[self.end[j]]
        S = self._rate_sum(t, x, ms)
        s = x[n + j] + x[n + m + j]
        Q = self.dnet.length[j] / 2.0 * S * (rho_s + rho_e) + self._a2[j] * (rho_e**2 - rho_s**2) + self._c[j] * s * abs(s)
        return Q, S, rho_s, rho_e

    def grad_Q(self, t: float, x: np.ndarray):
        """Analytic ``(dQ/dx, dQ/dt)`` over the full state, holding the
        scheduled inputs piecewise constant."""
        ms = self.matrices(t)
        j, n, m = self.segment, self.n, self.m
        Q, S, rho_s, rho_e = self._Q(t, x, ms)
        half = self.dnet.length[j] / 2.0
        P = rho_s + rho_e
        st, en = self.start[j], self.end[j]
        g = half * P * momentum_vjp(ms, x, self._w_mom)
        dQ_drs = half * S - 2.0 * self._a2[j] * rho_s
        g[st] += ms.alpha[st] * dQ_drs
        g[en] += half * S + 2.0 * self._a2[j] * rho_e
        s = x[n + j] + x[n + m + j]
        g[n + j] += 2.0 * self._c[j] * abs(s)
        g[n + m + j] += 2.0 * self._c[j] * abs(s)
        adot = self.inputs.alpha_dot(t)
        Qt = 0.0
        if np.any(adot):
            Qt += dQ_drs * adot[st] * x[st]
            dens = ms.Gamma5 @ x[:n]
            ss = x[n:n + m] + x[n + m:]
            rate = adot[self.start] * x[self.start]
            Qt += half * P * float(np.sum(self._w_mom * rate * (self._a2 + self._c * ss * np.abs(ss) / dens**2)))
        return g, Qt

    def node_density(self, t, y):
        ms = self.matrices(t)
        x = np.empty(self.n + 2 * self.m)
        x[self.cols] = y
        j, n, m = self.segment, self.n, self.m
        b = self.node
        alpha_b = ms.alpha[b] if self.at_start else 1.0
        if self.leaf:
            x[b] = 1.0  # placeholder; the rate sum does not depend on it
            S = self._rate_sum(t, x, ms)
            far = x[self.end[j]] if self.at_start else ms.alpha[self.start[j]] * x[self.start[j]]
            prev = None if self._prev is None else self._prev * alpha_b
            side = solve_rho0(x[n + j], x[n + m + j], far, S, self.dnet.wave_speed[j],
                              self.dnet.length[j], self.dnet.friction[j], self.dnet.diameter[j],
                              at_start=self.at_start, previous=prev)
            return side / alpha_b
        return self._newton_density(t, x, ms)

    def _newton_density(self, t, x, ms):
        b = self.node
        rho = self._prev if self._prev is not None else float(np.mean(x[self.cols[self.cols < self.n]]))
        for _ in range(50):
            x[b] = rho
            Q, *_ = self._Q(t, x, ms)
            g, _ = self.grad_Q(t, x)
            if g[b] == 0.0:
                raise DoubleRootError("dQ/drho vanished at the balancing node")
            step = Q / g[b]
            rho_new = rho - step
            while rho_new <= 0:
                step *= 0.5
                rho_new = rho - step
                if abs(step) < 1e-14 * rho:
                    raise InfeasibleError("no positive balancing density")
            if abs(rho_new - rho) <= 1e-13 * rho:
                return rho_new
            rho = rho_new
        raise InfeasibleError("balancing density iteration did not converge")

    def accept(self, t: float, y: np.ndarray) -> None:
        """Record the accepted balancing density (warm start for root choice)."""
        self._prev = self.node_density(t, y)

    # -- dynamics -------------------------------------------------------------
    def rho_rate(self, t: float, x: np.ndarray, u: np.ndarray, v: np.ndarray) -> float:
        g, Qt = self.grad_Q(t, x)
        gt = g[self.cols]
        denom = g[self.node] - gt @ v
        if denom == 0.0:
            raise DoubleRootError("implicit density derivative is undefined (double root)")
        return -(gt @ u + Qt) / denom

    def _rates(self, t, y):
        part = self._partition(t)
        x = self.expand(t, y)
        G = rhs_G(part.ms, x, self.inputs.d_dot(t), self.inputs.alpha_dot(t))[self.rows]
        u = self.solve(part, G)
        return u, part.v, self.rho_rate(t, x, u, part.v)

    def density_rate(self, t: float, y: np.ndarray) -> float:
        """Time derivative of the balancing-node density."""
        return self._rates(t, y)[2]

    def rhs(self, t: float, y: np.ndarray) -> np.ndarray:
        u, v, rate = self._rates(t, y)
        return u - v * rate

    def rho_derivatives_augmented(self, t: float, y: np.ndarray) -> np.ndarray:
        """All density rates from the augmented continuity system
        ``[Gamma1; v] rho_dot = [phi0 - phil; b]``."""
        ms = self.matrices(t)
        x = self.expand(t, y)
        n, m = self.n, self.m
        fdot = self.flux_derivatives(t, x)
        g, Qt = self.grad_Q(t, x)
        cont = rhs_G(ms, x, self.inputs.d_dot(t), self.inputs.alpha_dot(t))[n:n + m]
        Gamma1a = np.vstack([ms.Gamma1, g[:n]])
        rhs = np.append(cont, -(g[n:] @ fdot) - Qt)
        return np.linalg.solve(Gamma1a, rhs)

    def augmented_gamma1(self, t: float, y: np.ndarray) -> np.ndarray:
        ms = self.matrices(t)
        g, _ = self.grad_Q(t, self.expand(t, y))
        return np.vstack([ms.Gamma1, g[: self.n]])

    def algebraic_residual(self, t: float, y: np.ndarray) -> float:
        """Momentum residual of the balancing line relative to a**2 rho**2."""
        ms = self.matrices(t)
        x = self.expand(t, y)
        Q, _, rho_s, rho_e = self._Q(t, x, ms)
        side = rho_s if self.at_start else rho_e
        return abs(Q) / (self._a2[self.segment] * side**2)

    def initial_state(self, x0):
        self._prev = float(x0[self.node])
        return self.reduce(x0)


def build_balancing_system(dnet: DiscretizedNetwork, inputs: Inputs, balancing_node: int,
                           rho_guess: float | None = None) -> BalancingSystem:
    return BalancingSystem(dnet, inputs, balancing_node, rho_guess=rho_guess)
