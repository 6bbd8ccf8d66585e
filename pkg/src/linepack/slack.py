"""Infinite flux reservoir: one node's density is a prescribed input and its
conservation equation is dropped."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.linalg

from .dynamics import (
    Inputs,
    MatrixCache,
    full_mass_matrix,
    lu_factor_checked,
    nodal_injection,
    rhs_G,
)
from .network import DiscretizedNetwork

DensityProfile = Callable[[float], tuple[float, float]]


def constant_profile(value: float) -> DensityProfile:
    def profile(t: float) -> tuple[float, float]:
        return value, 0.0

    profile.constant = True  # type: ignore[attr-defined]
    return profile


@dataclass
class _Partition:
    ms: object
    M3: np.ndarray
    lu: tuple
    v: np.ndarray  # M_x4^{-1} M_x3, fixed for a given compressor state


class ReducedSystem:
    """Common plumbing for the three techniques.

    Subclasses fix ``self.rows`` (kept equations) and ``self.cols`` (kept
    state entries, i.e. the reduced state ``x_tilde``) and set
    ``self.node`` to the node whose density leaves the state.
    """

    technique = "base"

    def __init__(self, dnet: DiscretizedNetwork, inputs: Inputs, node: int,
                 rows: np.ndarray, cols: np.ndarray):
        self.dnet = dnet
        self.inputs = inputs
        self.node = node
        self.rows = rows
        self.cols = cols
        self.n, self.m = dnet.n, dnet.m
        self._cache = MatrixCache(dnet)
        self._partition(0.0)  # factorize now so singular systems fail early

    def _partition(self, t: float) -> _Partition:
        def build(ms):
            M = full_mass_matrix(ms)
            M4 = M[np.ix_(self.rows, self.cols)]
            M3 = M[self.rows, self.node]
            lu = lu_factor_checked(M4, f"{self.technique} mass matrix")
            return _Partition(ms, M3, lu, scipy.linalg.lu_solve(lu, M3, check_finite=False))

        return self._cache.get(self.inputs.alpha(t), build)

    def matrices(self, t: float = 0.0):
        return self._partition(t).ms

    def solve(self, part: _Partition, b: np.ndarray) -> np.ndarray:
        return scipy.linalg.lu_solve(part.lu, b, check_finite=False)

    @property
    def size(self) -> int:
        return len(self.cols)

    def reduce(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=float)[self.cols].copy()

    def node_density(self, t: float, y: np.ndarray) -> float:
        raise NotImplementedError

    def expand(self, t: float, y: np.ndarray) -> np.ndarray:
        x = np.empty(self.n + 2 * self.m)
        x[self.cols] = y[: len(self.cols)]
        x[self.node] = self.node_density(t, y)
        return x

    def injections(self, t: float, y: np.ndarray) -> np.ndarray:
        """Nodal injections (kg/s) implied by the state; equals the scheduled
        injections except where the technique leaves one free."""
        return self.inputs.d(t)

    def physical_densities(self, t: float, y: np.ndarray) -> np.ndarray:
        return self.expand(t, y)[: self.dnet.n_physical]

    def initial_state(self, x0: np.ndarray) -> np.ndarray:
        return self.reduce(x0)


class SlackSystem(ReducedSystem):
    """``dx~/dt = M_x4^{-1} (G~(rho1, x~) - M_x3 drho1/dt)``."""

    technique = "slack"

    def __init__(self, dnet: DiscretizedNetwork, inputs: Inputs, slack_node: int,
                 rho_profile: DensityProfile | float):
        if not 0 <= slack_node < dnet.n:
            raise IndexError(f"slack node index {slack_node} out of range")
        if not callable(rho_profile):
            rho_profile = constant_profile(float(rho_profile))
        self.rho_profile = rho_profile
        size = dnet.n + 2 * dnet.m
        super().__init__(dnet, inputs, slack_node,
                         rows=np.delete(np.arange(size), slack_node),
                         cols=np.delete(np.arange(size), slack_node))

    @property
    def constant_density(self) -> bool:
        return bool(getattr(self.rho_profile, "constant", False))

    def node_density(self, t, y):
        return self.rho_profile(t)[0]

    def rhs(self, t: float, y: np.ndarray) -> np.ndarray:
        part = self._partition(t)
        rho1, rho1_dot = self.rho_profile(t)
        x = np.empty(self.n + 2 * self.m)
        x[self.cols] = y
        x[self.node] = rho1
        G = rhs_G(part.ms, x, self.inputs.d_dot(t), self.inputs.alpha_dot(t))[self.rows]
        if rho1_dot:
            G = G - part.M3 * rho1_dot
        return self.solve(part, G)

    def slack_flux(self, t: float, y: np.ndarray) -> float:
        """Mass flow (kg/s) the slack node must inject to close its balance."""
        ms = self._partition(t).ms
        return float(nodal_injection(ms, self.expand(t, y))[self.node])

    def injections(self, t, y):
        d = self.inputs.d(t)
        d[self.node] = self.slack_flux(t, y)
        return d


def build_slack_system(dnet: DiscretizedNetwork, inputs: Inputs, slack_node: int,
                       rho_profile: DensityProfile | float) -> SlackSystem:
    return SlackSystem(dnet, inputs, slack_node, rho_profile)
