"""Finite flux reservoir: a slack source whose injection saturates along a
sigmoid and whose density droops as the injection approaches its limit.

The source node's conservation row is replaced by ``dphi0/dt = h1(z) dz/dt``
(with the growth limiter ``zeta``) and its density becomes the algebraic
``rho = rho_n * S2(phi0)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .dynamics import Inputs, full_mass_matrix, rhs_G
from .network import DiscretizedNetwork
from .slack import ReducedSystem


@dataclass(frozen=True)
class SigmoidSource:
    node: int
    phi_max: float  # flux ceiling
    phi_half: float  # flux at which the density halves
    gamma: float  # droop steepness, m2 s / kg
    rho_nominal: float
    r: float = 10.0

    def __post_init__(self):
        if self.phi_max <= 0 or self.gamma <= 0 or self.r <= 0 or self.rho_nominal <= 0:
            raise ValueError("phi_max, gamma, r and rho_nominal must be positive")

    def S1(self, z):
        return expit(z)

    def S2(self, phi0):
        return expit(self.gamma * (self.phi_half - phi0))

    def h1(self, z):
        return self.phi_max * expit(z) * expit(-z)

    def h2(self, phi0):
        u = self.gamma * (self.phi_half - phi0)
        return -self.rho_nominal * self.gamma * expit(u) * expit(-u)

    def zeta(self, z):
        with np.errstate(over="ignore"):
            return 1.0 + np.exp(np.square(z) - self.r**2)

    def log_h1_zeta(self, z) -> float:
        """log(h1(z) * zeta(z)) without overflow."""
        z = float(z)
        log_s1 = -np.logaddexp(0.0, -z)
        log_1ms1 = -np.logaddexp(0.0, z)
        return math.log(self.phi_max) + log_s1 + log_1ms1 + float(np.logaddexp(0.0, z * z - self.r**2))

    def injection(self, z):
        return self.phi_max * self.S1(z)

    def density(self, phi0):
        return self.rho_nominal * self.S2(phi0)


def init_z(phi0: float, phi_max: float) -> float:
    """Sigmoid state reproducing the injection flux ``phi0``."""
    if not 0.0 < phi0 < phi_max:
        raise ValueError(f"initial injection {phi0} outside (0, {phi_max})")
    return math.log(phi0 / (phi_max - phi0))


def nominal_density_for(rho_initial: float, phi0: float, phi_half: float, gamma: float) -> float:
    """``rho_n`` such that ``rho_n * S2(phi0)`` equals the initial density."""
    return rho_initial / float(expit(gamma * (phi_half - phi0)))


class SigmoidSystem(ReducedSystem):
    """State ``[x~; z]``; the source density is algebraic."""

    technique = "sigmoid"

    def __init__(self, dnet: DiscretizedNetwork, inputs: Inputs, source: SigmoidSource):
        node = source.node
        segs = dnet.attached_segments(node)
        if len(segs) != 1 or dnet.E[segs[0], node] != 1:
            raise ValueError(
                f"sigmoid source {dnet.node_ids[node]!r} must have exactly one attached line leaving it")
        self.source = source
        self.segment = segs[0]
        size = dnet.n + 2 * dnet.m
        super().__init__(dnet, inputs, node,
                         rows=np.delete(np.arange(size), node),
                         cols=np.delete(np.arange(size), node))
        # position of the source flux inside x~
        self.k = int(np.flatnonzero(self.cols == dnet.n + self.segment)[0])

    @property
    def size(self) -> int:
        return len(self.cols) + 1

    def node_density(self, t, y):
        return float(self.source.density(y[self.k]))

    def reduce(self, x):
        x = np.asarray(x, dtype=float)
        z = init_z(x[self.dnet.n + self.segment], self.source.phi_max)
        return np.append(x[self.cols], z)

    def _bordered_parts(self, t, y):
        part = self._partition(t)
        h2 = float(self.source.h2(y[self.k]))
        return part, h2

    def rhs(self, t: float, y: np.ndarray) -> np.ndarray:
        part, h2 = self._bordered_parts(t, y)
        x = self.expand(t, y)
        G = rhs_G(part.ms, x, self.inputs.d_dot(t), self.inputs.alpha_dot(t))[self.rows]
        # M_x5 = M_x4 + h2 * M_x3 e_k^T, inverted by Sherman-Morrison
        u = self.solve(part, G)
        w = part.v
        xdot = u - w * (h2 * u[self.k] / (1.0 + h2 * w[self.k]))
        zdot = xdot[self.k] * math.exp(-self.source.log_h1_zeta(y[-1]))
        return np.append(xdot, zdot)

    def mx5(self, t: float, y: np.ndarray) -> np.ndarray:
        part, h2 = self._bordered_parts(t, y)
        M = full_mass_matrix(part.ms)[np.ix_(self.rows, self.cols)]
        M[:, self.k] += h2 * part.M3
        return M

    def bordered_matrix(self, t: float, y: np.ndarray) -> np.ndarray:
        """M_s = [[M_x5, 0], [-e_k, h1(z) zeta(z)]]."""
        M5 = self.mx5(t, y)
        N = M5.shape[0]
        Ms = np.zeros((N + 1, N + 1))
        Ms[:N, :N] = M5
        Ms[N, self.k] = -1.0
        Ms[N, N] = math.exp(self.source.log_h1_zeta(y[-1]))
        return Ms

    def bordered_inverse(self, t: float, y: np.ndarray) -> np.ndarray:
        """Block inverse of M_s with h1 replaced by h1 * zeta."""
        M5inv = np.linalg.inv(self.mx5(t, y))
        N = M5inv.shape[0]
        hz = math.exp(self.source.log_h1_zeta(y[-1]))
        inv = np.zeros((N + 1, N + 1))
        inv[:N, :N] = M5inv
        inv[N, :N] = M5inv[self.k] / hz
        inv[N, N] = 1.0 / hz
        return inv

    def source_flux(self, y: np.ndarray) -> float:
        return float(y[self.k])

    def injections(self, t, y):
        d = self.inputs.d(t)
        d[self.node] = self.dnet.area[self.segment] * y[self.k]
        return d


def build_sigmoid_system(dnet: DiscretizedNetwork, inputs: Inputs, source: SigmoidSource) -> SigmoidSystem:
    return SigmoidSystem(dnet, inputs, source)
