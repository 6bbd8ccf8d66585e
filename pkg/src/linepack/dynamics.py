"""Right-hand side, mass matrices, linepack and rank diagnostics.

State layout: ``x = [rho (n), phi0 (m), phil (m)]``. Equation rows of ``G``
are ordered the same way: nodal conservation, segment continuity,
segment momentum.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg

from .network import DiscretizedNetwork, MatrixSet, build_matrices

DENSITY_EPS = 1e-6  # kg/m3, depletion sentinel on segment density sums


class DepletionError(ArithmeticError):
    """A density reached the depletion sentinel during RHS evaluation."""

    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


class RegularityError(np.linalg.LinAlgError):
    """A mass matrix that should be invertible is numerically singular."""


@dataclass
class StateVector:
    rho: np.ndarray
    phi0: np.ndarray
    phil: np.ndarray

    @classmethod
    def from_array(cls, x: np.ndarray, n: int, m: int) -> "StateVector":
        x = np.asarray(x, dtype=float)
        if x.shape != (n + 2 * m,):
            raise ValueError(f"state has shape {x.shape}, expected ({n + 2 * m},)")
        return cls(x[:n].copy(), x[n:n + m].copy(), x[n + m:].copy())

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.rho, self.phi0, self.phil])


def hadamard_f(x: np.ndarray, y: np.ndarray, z: np.ndarray) -> np.ndarray:
    """(x + y) * |x + y| / z, elementwise."""
    x, y, z = np.asarray(x, float), np.asarray(y, float), np.asarray(z, float)
    if np.any(z == 0.0):
        raise DepletionError("zero density sum in friction term", int(np.flatnonzero(z == 0.0)[0]))
    s = x + y
    return s * np.abs(s) / z


def rhs_G(
    ms: MatrixSet,
    x: np.ndarray,
    d_dot: np.ndarray | None = None,
    alpha_dot: np.ndarray | None = None,
) -> np.ndarray:
    """Evaluate G(x).

    ``alpha_dot`` adds the outflow-side density rate ``rho * d(alpha)/dt`` to
    the continuity rows when a compressor ratio changes in time; it is zero
    for fixed compressors.
    """
    n, m = ms.n, ms.m
    rho, phi0, phil = x[:n], x[n:n + m], x[n + m:]
    dens = ms.Gamma5 @ rho
    low = np.flatnonzero(dens <= DENSITY_EPS)
    if low.size:
        raise DepletionError(f"segment density sum {dens[low[0]]:.3g} at segment {low[0]}", int(low[0]))
    out = np.empty(n + 2 * m)
    out[:n] = 0.0 if d_dot is None else d_dot
    cont = phi0 - phil
    if alpha_dot is not None and np.any(alpha_dot):
        cont = cont - np.diag(ms.Gamma2) * (ms.K0bar.T @ (alpha_dot * rho))
    out[n:n + m] = cont
    out[n + m:] = ms.Gamma3 @ rho - np.diag(ms.Gamma4) * hadamard_f(phil, phi0, dens)
    return out


def momentum_jacobian(ms: MatrixSet, x: np.ndarray) -> np.ndarray:
    """d(momentum rows of G)/dx, shape m x (n + 2m)."""
    n, m = ms.n, ms.m
    rho, phi0, phil = x[:n], x[n:n + m], x[n + m:]
    dens = ms.Gamma5 @ rho
    s = phi0 + phil
    c = np.diag(ms.Gamma4)
    F = s * np.abs(s)
    J = np.empty((m, n + 2 * m))
    J[:, :n] = ms.Gamma3 + (c * F / dens**2)[:, None] * ms.Gamma5
    dflux = np.diag(-2.0 * c * np.abs(s) / dens)
    J[:, n:n + m] = dflux
    J[:, n + m:] = dflux
    return J


def full_mass_matrix(ms: MatrixSet) -> np.ndarray:
    n, m = ms.n, ms.m
    M = np.zeros((n + 2 * m, n + 2 * m))
    M[:n, n:n + m] = ms.K0
    M[:n, n + m:] = ms.Kl
    M[n:n + m, :n] = ms.Gamma1
    M[n + m:, n:n + m] = ms.Gamma2
    M[n + m:, n + m:] = ms.Gamma2
    return M


MASS_MATRIX_KINDS = ("full_Mx", "slack_Mx2", "balancing_Mx3", "sigmoid_Ms")


@dataclass
class MassMatrixVariant:
    kind: str
    matrix: np.ndarray
    rows: np.ndarray  # kept row indices of the full matrix
    cols: np.ndarray  # kept column indices of the full matrix
    deleted_node: int | None = None
    deleted_segment: int | None = None


def mass_matrix(
    ms: MatrixSet,
    kind: str = "full_Mx",
    node: int | None = None,
    segment: int | None = None,
) -> MassMatrixVariant:
    """Full mass matrix or one of its reduced variants.

    ``slack_Mx2`` drops the density column and conservation row of ``node``;
    ``balancing_Mx3`` drops the density column of ``node`` and the momentum
    row of ``segment``. The bordered sigmoid matrix depends on the sigmoid
    state and is built by :mod:`linepack.sigmoid`.
    """
    n, m = ms.n, ms.m
    M = full_mass_matrix(ms)
    size = n + 2 * m
    rows = np.arange(size)
    cols = np.arange(size)
    if kind == "full_Mx":
        return MassMatrixVariant(kind, M, rows, cols)
    if kind not in ("slack_Mx2", "balancing_Mx3"):
        raise ValueError(f"unknown mass-matrix variant {kind!r}")
    if node is None or not 0 <= node < n:
        raise IndexError(f"invalid node index {node!r} for deletion")
    cols = np.delete(cols, node)
    if kind == "slack_Mx2":
        rows = np.delete(rows, node)
        segment = None
    else:
        if segment is None or not 0 <= segment < m:
            raise IndexError(f"invalid segment index {segment!r} for deletion")
        rows = np.delete(rows, n + m + segment)
    return MassMatrixVariant(kind, M[np.ix_(rows, cols)], rows, cols, node, segment)


@dataclass(frozen=True)
class RankReport:
    dim: int
    numerical_rank: int
    deficiency: int
    tolerance: float

    def __str__(self) -> str:
        return f"dim={self.dim} rank={self.numerical_rank} deficiency={self.deficiency} tol={self.tolerance:.3g}"


def rank_report(M: np.ndarray) -> RankReport:
    M = np.asarray(M, dtype=float)
    if not np.all(np.isfinite(M)):
        raise ValueError("matrix has non-finite entries")
    sv = scipy.linalg.svdvals(M)
    dim = min(M.shape)
    tol = max(M.shape) * np.finfo(float).eps * (sv[0] if sv.size else 0.0)
    rank = int(np.sum(sv > tol))
    return RankReport(dim=dim, numerical_rank=rank, deficiency=dim - rank, tolerance=float(tol))


def linepack(x: np.ndarray, dnet: DiscretizedNetwork, alpha: np.ndarray | None = None) -> float:
    """Stored gas mass (kg): trapezoid of segment end densities times volume."""
    alpha = dnet.alpha if alpha is None else alpha
    rho = np.asarray(x)[: dnet.n]
    start, end = dnet.segment_start(), dnet.segment_end()
    seg = alpha[start] * rho[start] + rho[end]
    return float(np.sum(dnet.area * dnet.length / 2.0 * seg))


def linepack_series(states: np.ndarray, dnet: DiscretizedNetwork, alphas: np.ndarray) -> np.ndarray:
    start, end = dnet.segment_start(), dnet.segment_end()
    rho = states[:, : dnet.n]
    seg = alphas[:, start] * rho[:, start] + rho[:, end]
    return seg @ (dnet.area * dnet.length / 2.0)


def nodal_injection(ms: MatrixSet, x: np.ndarray) -> np.ndarray:
    """Mass flow (kg/s) leaving each node into the pipes, K0 phi0 + Kl phil."""
    n, m = ms.n, ms.m
    return ms.K0 @ x[n:n + m] + ms.Kl @ x[n + m:]


def _smooth_fraction(tau: np.ndarray | float, steepness: float = 10.0):
    """Logistic ramp rescaled to run exactly from 0 at tau=0 to 1 at tau=1."""
    lo = 1.0 / (1.0 + math.exp(steepness / 2))
    hi = 1.0 - lo
    tau = np.clip(tau, 0.0, 1.0)
    s = 1.0 / (1.0 + np.exp(-steepness * (tau - 0.5)))
    ds = steepness * s * (1.0 - s)
    # pin the endpoints so the ratio lands exactly on its target values
    frac = np.where(tau >= 1.0, 1.0, np.where(tau <= 0.0, 0.0, (s - lo) / (hi - lo)))
    if frac.ndim == 0:
        frac = float(frac)
    return frac, ds / (hi - lo)


@dataclass(frozen=True)
class LoadRamp:
    node: int
    rate: float  # kg/s^2
    t_start: float
    t_end: float


@dataclass(frozen=True)
class CompressorTransition:
    node: int
    alpha_start: float
    alpha_end: float
    t_start: float
    t_end: float
    steepness: float = 10.0


@dataclass
class Inputs:
    """Time-dependent exogenous inputs: injections and compressor ratios."""

    d0: np.ndarray
    alpha0: np.ndarray
    ramps: Sequence[LoadRamp] = field(default_factory=tuple)
    transitions: Sequence[CompressorTransition] = field(default_factory=tuple)

    @classmethod
    def constant(cls, dnet: DiscretizedNetwork, d0: np.ndarray | None = None) -> "Inputs":
        return cls(d0=np.array(dnet.injection if d0 is None else d0, dtype=float),
                   alpha0=dnet.alpha.copy())

    def d(self, t: float) -> np.ndarray:
        d = self.d0.copy()
        for r in self.ramps:
            d[r.node] += r.rate * (min(max(t, r.t_start), r.t_end) - r.t_start)
        return d

    def d_dot(self, t: float) -> np.ndarray:
        dd = np.zeros_like(self.d0)
        for r in self.ramps:
            if r.t_start <= t < r.t_end:
                dd[r.node] += r.rate
        return dd

    def alpha(self, t: float) -> np.ndarray:
        a = self.alpha0.copy()
        for c in self.transitions:
            frac, _ = _smooth_fraction((t - c.t_start) / (c.t_end - c.t_start), c.steepness)
            a[c.node] = c.alpha_start + (c.alpha_end - c.alpha_start) * frac
        return a

    def alpha_dot(self, t: float) -> np.ndarray:
        ad = np.zeros_like(self.alpha0)
        for c in self.transitions:
            if c.t_start <= t < c.t_end:
                span = c.t_end - c.t_start
                _, dfrac = _smooth_fraction((t - c.t_start) / span, c.steepness)
                ad[c.node] += (c.alpha_end - c.alpha_start) * dfrac / span
        return ad

    def breakpoints(self) -> list[float]:
        pts = set()
        for r in self.ramps:
            pts.update((r.t_start, r.t_end))
        for c in self.transitions:
            pts.update((c.t_start, c.t_end))
        return sorted(pts)

    def alpha_varies(self) -> bool:
        return bool(self.transitions)


class MatrixCache:
    """Matrix sets keyed by compressor-ratio vector; a single constant entry
    when ratios never change."""

    def __init__(self, dnet: DiscretizedNetwork, size: int = 4):
        self.dnet = dnet
        self.size = size
        self._store: dict[bytes, object] = {}

    def get(self, alpha: np.ndarray, build):
        key = np.asarray(alpha, dtype=float).tobytes()
        hit = self._store.get(key)
        if hit is None:
            hit = build(build_matrices(self.dnet, alpha))
            if len(self._store) >= self.size:
                self._store.pop(next(iter(self._store)))
            self._store[key] = hit
        return hit


def lu_factor_checked(M: np.ndarray, what: str):
    """LU factorization that raises RegularityError on a numerically zero pivot."""
    with warnings.catch_warnings():
        # singularity is reported below as RegularityError
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        lu, piv = scipy.linalg.lu_factor(M, check_finite=False)
    pivots = np.abs(np.diag(lu))
    if not np.all(np.isfinite(pivots)) or pivots.min() <= M.shape[0] * np.finfo(float).eps * pivots.max():
        raise RegularityError(f"{what} is numerically singular")
    return lu, piv
