"""Consistent initial equilibria: G(x*) = 0 for given injections."""
from __future__ import annotations

import logging
from collections import deque

import numpy as np

from .dynamics import momentum_jacobian, rhs_G
from .network import DiscretizedNetwork, build_matrices

log = logging.getLogger(__name__)


class SteadyStateError(ValueError):
    """Unbalanced injections or an infeasible (non-positive density) operating point."""


def segment_fluxes(dnet: DiscretizedNetwork, d: np.ndarray) -> np.ndarray:
    """Steady segment fluxes (kg/m2/s) from nodal conservation on a tree."""
    A = dnet.E.T * dnet.area  # n x m, (K0 + Kl) for equal end fluxes
    flux, *_ = np.linalg.lstsq(A, d, rcond=None)
    if np.max(np.abs(A @ flux - d)) > 1e-9 * max(1.0, np.max(np.abs(d))):
        raise SteadyStateError("injections cannot be met by any flux pattern (sum(d) != 0?)")
    return flux


def steady_tolerance(ms, x: np.ndarray, ulps: float = 64.0) -> float:
    """Smallest momentum residual resolvable in float64 at state ``x``."""
    return ulps * np.finfo(float).eps * float(np.max(np.abs(ms.Gamma3) @ np.abs(x[: ms.n])))


def _propagate(dnet, flux, alpha, anchor, anchor_density):
    start, end = dnet.segment_start(), dnet.segment_end()
    drop = dnet.length * dnet.friction / (dnet.wave_speed**2 * dnet.diameter) * flux * np.abs(flux)
    rho = np.full(dnet.n, np.nan)
    rho[anchor] = anchor_density
    queue = deque([anchor])
    while queue:
        i = queue.popleft()
        for j in dnet.attached_segments(i):
            s, e = start[j], end[j]
            if i == s and np.isnan(rho[e]):
                sq = (alpha[s] * rho[s]) ** 2 - drop[j]
                if sq <= 0:
                    raise SteadyStateError(f"density vanishes at node {dnet.node_ids[e]}")
                rho[e] = np.sqrt(sq)
                queue.append(e)
            elif i == e and np.isnan(rho[s]):
                rho[s] = np.sqrt(rho[e] ** 2 + drop[j]) / alpha[s]
                queue.append(s)
    return rho


def solve_steady(
    dnet: DiscretizedNetwork,
    d: np.ndarray | None = None,
    alpha: np.ndarray | None = None,
    anchor_node: int = 0,
    anchor_density: float = 50.0,
    tol: float = 1e-9,
    max_iter: int = 50,
) -> np.ndarray:
    """Equilibrium state ``[rho; phi0; phil]`` with ``rho[anchor_node]`` fixed.

    Fluxes follow from conservation; densities are propagated segment by
    segment from the anchor and then polished with a damped Newton iteration
    on the momentum residual.
    """
    if not dnet.is_tree:
        raise SteadyStateError("steady-state initialization requires a tree network")
    d = np.asarray(dnet.injection if d is None else d, dtype=float)
    alpha = np.asarray(dnet.alpha if alpha is None else alpha, dtype=float)
    scale = max(1.0, np.max(np.abs(d)))
    if abs(d.sum()) > 1e-9 * scale:
        raise SteadyStateError(f"injections are unbalanced: sum(d) = {d.sum():.6g} kg/s")
    if anchor_density <= 0:
        raise SteadyStateError("anchor density must be positive")
    n, m = dnet.n, dnet.m
    flux = segment_fluxes(dnet, d)
    rho = _propagate(dnet, flux, alpha, anchor_node, anchor_density)

    ms = build_matrices(dnet, alpha)
    x = np.concatenate([rho, flux, flux])
    free = np.delete(np.arange(n), anchor_node)

    def residual(x):
        return rhs_G(ms, x)[n + m:]

    r = residual(x)
    # a**2 * rho is ~1e7 in SI, so float64 rounding alone leaves ~1e-9
    tol = max(tol, steady_tolerance(ms, x))
    for _ in range(max_iter):
        norm = np.max(np.abs(r))
        if norm < tol:
            break
        J = momentum_jacobian(ms, x)[:, free]
        step = np.linalg.solve(J, -r)
        lam = 1.0
        while lam > 1e-6:
            trial = x.copy()
            trial[free] += lam * step
            if np.all(trial[:n] > 0):
                r_trial = residual(trial)
                if np.max(np.abs(r_trial)) < norm:
                    x, r = trial, r_trial
                    break
            lam *= 0.5
        else:
            break
    if np.max(np.abs(r)) >= tol:
        log.warning("steady-state residual %.3g above tolerance", np.max(np.abs(r)))
    if np.any(x[:n] <= 0):
        raise SteadyStateError("steady state has non-positive densities")
    return x
