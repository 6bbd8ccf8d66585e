"""Network description, pipe discretization and incidence-derived matrices.

Sign convention: ``E[j, i] = +1`` when segment ``j`` leaves node ``i`` and
``-1`` when it enters. Segments are directed the way flow is normally
positive.
"""
from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

SCHEMA = "linepack-net/1"
NODE_KINDS = ("source", "load", "junction")


class NetworkError(ValueError):
    """Raised for malformed or inconsistent network descriptions."""


@dataclass(frozen=True)
class NodeSpec:
    id: str
    alpha: float = 1.0
    injection: float = 0.0  # kg/s, positive = supply
    kind: str = "junction"


@dataclass(frozen=True)
class PipeSpec:
    from_node: str
    to_node: str
    length: float
    diameter: float
    friction: float
    wave_speed: float
    area: float | None = None  # override for combined parallel lines

    @property
    def cross_section(self) -> float:
        if self.area is not None:
            return self.area
        return math.pi * self.diameter**2 / 4.0


@dataclass(frozen=True)
class NetworkSpec:
    nodes: tuple[NodeSpec, ...]
    pipes: tuple[PipeSpec, ...]
    name: str = ""


@dataclass(frozen=True)
class Network:
    """A validated network. ``is_tree`` marks the connected-tree case."""

    spec: NetworkSpec
    index: dict[str, int]
    is_tree: bool

    @property
    def nodes(self) -> tuple[NodeSpec, ...]:
        return self.spec.nodes

    @property
    def pipes(self) -> tuple[PipeSpec, ...]:
        return self.spec.pipes


def wave_speed_from_gas(Z: float, R: float, T: float, molar_mass: float) -> float:
    """Isothermal wave speed from a**2 = Z R T / M (SI units, M in kg/mol)."""
    return math.sqrt(Z * R * T / molar_mass)


def _check_positive(value, what):
    if not (isinstance(value, (int, float)) and math.isfinite(value) and value > 0):
        raise NetworkError(f"{what} must be positive, got {value!r}")


def build_network(spec: NetworkSpec) -> Network:
    index: dict[str, int] = {}
    for k, node in enumerate(spec.nodes):
        if node.id in index:
            raise NetworkError(f"duplicate node id {node.id!r}")
        _check_positive(node.alpha, f"alpha of node {node.id!r}")
        if node.kind not in NODE_KINDS:
            raise NetworkError(f"unknown node kind {node.kind!r}")
        index[node.id] = k
    if not spec.pipes:
        raise NetworkError("network has no pipes")
    for pipe in spec.pipes:
        for end in (pipe.from_node, pipe.to_node):
            if end not in index:
                raise NetworkError(f"pipe endpoint {end!r} is not a node")
        if pipe.from_node == pipe.to_node:
            raise NetworkError(f"pipe {pipe.from_node!r}->{pipe.to_node!r} is a self-loop")
        what = f"pipe {pipe.from_node}->{pipe.to_node}"
        _check_positive(pipe.length, f"length of {what}")
        _check_positive(pipe.diameter, f"diameter of {what}")
        _check_positive(pipe.friction, f"friction of {what}")
        _check_positive(pipe.wave_speed, f"wave speed of {what}")
        if pipe.area is not None:
            _check_positive(pipe.area, f"area of {what}")

    adjacency: list[list[int]] = [[] for _ in spec.nodes]
    for pipe in spec.pipes:
        i, j = index[pipe.from_node], index[pipe.to_node]
        adjacency[i].append(j)
        adjacency[j].append(i)
    seen = {0}
    queue = deque([0])
    while queue:
        for nb in adjacency[queue.popleft()]:
            if nb not in seen:
                seen.add(nb)
                queue.append(nb)
    if len(seen) != len(spec.nodes):
        missing = sorted(spec.nodes[k].id for k in range(len(spec.nodes)) if k not in seen)
        raise NetworkError(f"network is disconnected; unreachable nodes: {missing}")
    is_tree = len(spec.nodes) == len(spec.pipes) + 1
    return Network(spec=spec, index=index, is_tree=is_tree)


@dataclass(frozen=True)
class DiscretizedNetwork:
    """Refined graph: physical nodes first (same order as the spec), then
    intermediate nodes pipe by pipe."""

    network: Network
    node_ids: tuple[str, ...]
    node_origin: tuple[int | None, ...]  # physical index, None for intermediate
    E: np.ndarray  # m x n
    length: np.ndarray
    diameter: np.ndarray
    friction: np.ndarray
    wave_speed: np.ndarray
    area: np.ndarray
    alpha: np.ndarray
    injection: np.ndarray
    segment_pipe: np.ndarray  # parent pipe index of each segment
    pipe_segments: tuple[tuple[int, ...], ...]
    target_length: float = field(default=5000.0)

    @property
    def n(self) -> int:
        return self.E.shape[1]

    @property
    def m(self) -> int:
        return self.E.shape[0]

    @property
    def n_physical(self) -> int:
        return len(self.network.nodes)

    @property
    def state_size(self) -> int:
        return self.n + 2 * self.m

    @property
    def is_tree(self) -> bool:
        return self.network.is_tree

    def node_index(self, node_id: str) -> int:
        try:
            return self.network.index[str(node_id)]
        except KeyError:
            raise NetworkError(f"unknown node {node_id!r}") from None

    def segment_start(self) -> np.ndarray:
        return np.argmax(self.E == 1, axis=1)

    def segment_end(self) -> np.ndarray:
        return np.argmax(self.E == -1, axis=1)

    def attached_segments(self, node: int) -> list[int]:
        return [int(j) for j in np.flatnonzero(self.E[:, node])]


def discretize(net: Network, target_length: float = 5000.0) -> DiscretizedNetwork:
    """Split every pipe into ``ceil(L / target_length)`` equal segments."""
    _check_positive(target_length, "target segment length")
    n_phys = len(net.nodes)
    node_ids = [node.id for node in net.nodes]
    origin: list[int | None] = list(range(n_phys))
    alpha = [node.alpha for node in net.nodes]
    injection = [node.injection for node in net.nodes]
    edges: list[tuple[int, int]] = []
    seg_pipe: list[int] = []
    pipe_segments: list[tuple[int, ...]] = []
    for p, pipe in enumerate(net.pipes):
        count = max(1, math.ceil(pipe.length / target_length - 1e-12))
        chain = [net.index[pipe.from_node]]
        for k in range(1, count):
            node_ids.append(f"{pipe.from_node}-{pipe.to_node}#{k}")
            origin.append(None)
            alpha.append(1.0)
            injection.append(0.0)
            chain.append(len(node_ids) - 1)
        chain.append(net.index[pipe.to_node])
        first = len(edges)
        for a, b in zip(chain[:-1], chain[1:]):
            edges.append((a, b))
            seg_pipe.append(p)
        pipe_segments.append(tuple(range(first, len(edges))))

    n, m = len(node_ids), len(edges)
    E = np.zeros((m, n))
    for j, (a, b) in enumerate(edges):
        E[j, a] = 1.0
        E[j, b] = -1.0
    seg_pipe_arr = np.asarray(seg_pipe, dtype=int)
    counts = np.array([len(s) for s in pipe_segments], dtype=float)

    def per_segment(values: Sequence[float]) -> np.ndarray:
        return np.asarray(values, dtype=float)[seg_pipe_arr]

    return DiscretizedNetwork(
        network=net,
        node_ids=tuple(node_ids),
        node_origin=tuple(origin),
        E=E,
        length=per_segment([p.length for p in net.pipes]) / counts[seg_pipe_arr],
        diameter=per_segment([p.diameter for p in net.pipes]),
        friction=per_segment([p.friction for p in net.pipes]),
        wave_speed=per_segment([p.wave_speed for p in net.pipes]),
        area=per_segment([p.cross_section for p in net.pipes]),
        alpha=np.asarray(alpha, dtype=float),
        injection=np.asarray(injection, dtype=float),
        segment_pipe=seg_pipe_arr,
        pipe_segments=tuple(pipe_segments),
        target_length=float(target_length),
    )


@dataclass(frozen=True)
class MatrixSet:
    K0: np.ndarray
    Kl: np.ndarray
    K0bar: np.ndarray
    Klbar: np.ndarray
    Gamma1: np.ndarray
    Gamma2: np.ndarray
    Gamma3: np.ndarray
    Gamma4: np.ndarray
    Gamma5: np.ndarray
    alpha: np.ndarray

    @property
    def n(self) -> int:
        return self.K0.shape[0]

    @property
    def m(self) -> int:
        return self.K0.shape[1]


def build_matrices(dnet: DiscretizedNetwork, alpha: np.ndarray | None = None) -> MatrixSet:
    """Assemble K, K-bar and the Gamma matrices for compressor ratios ``alpha``
    (defaults to the network's nominal ratios)."""
    alpha = dnet.alpha if alpha is None else np.asarray(alpha, dtype=float)
    E = dnet.E
    absE = np.abs(E)
    K0bar = 0.5 * (absE.T + E.T)
    Klbar = 0.5 * (E.T - absE.T)
    K0 = K0bar * dnet.area
    Kl = Klbar * dnet.area
    out_side = K0bar.T * alpha  # K0bar^T diag(alpha)
    Gamma5 = out_side - Klbar.T
    half = dnet.length / 2.0
    return MatrixSet(
        K0=K0,
        Kl=Kl,
        K0bar=K0bar,
        Klbar=Klbar,
        Gamma1=half[:, None] * Gamma5,
        Gamma2=np.diag(half),
        Gamma3=(dnet.wave_speed**2)[:, None] * (Klbar.T + out_side),
        Gamma4=np.diag(dnet.length * dnet.friction / dnet.diameter / 4.0),
        Gamma5=Gamma5,
        alpha=alpha.copy(),
    )


def load_network(path: str | Path) -> NetworkSpec:
    data = json.loads(Path(path).read_text())
    return network_from_dict(data)


def network_from_dict(data: dict) -> NetworkSpec:
    if data.get("schema") != SCHEMA:
        raise NetworkError(f"expected schema {SCHEMA!r}, got {data.get('schema')!r}")
    try:
        nodes = tuple(
            NodeSpec(
                id=str(item["id"]),
                alpha=float(item.get("alpha", 1.0)),
                injection=float(item.get("injection_kg_s", 0.0)),
                kind=item.get("kind", "junction"),
            )
            for item in data["nodes"]
        )
        pipes = tuple(
            PipeSpec(
                from_node=str(item["from"]),
                to_node=str(item["to"]),
                length=float(item["length_m"]),
                diameter=float(item["diameter_m"]),
                friction=float(item["lambda"]),
                wave_speed=float(item["wave_speed_m_s"]),
                area=None if item.get("area_m2") is None else float(item["area_m2"]),
            )
            for item in data["pipes"]
        )
    except (KeyError, TypeError) as exc:
        raise NetworkError(f"malformed network document: {exc}") from exc
    return NetworkSpec(nodes=nodes, pipes=pipes, name=str(data.get("name", "")))


def network_to_dict(spec: NetworkSpec) -> dict:
    pipes = []
    for p in spec.pipes:
        item = {
            "from": p.from_node,
            "to": p.to_node,
            "length_m": p.length,
            "diameter_m": p.diameter,
            "lambda": p.friction,
            "wave_speed_m_s": p.wave_speed,
        }
        if p.area is not None:
            item["area_m2"] = p.area
        pipes.append(item)
    return {
        "schema": SCHEMA,
        "name": spec.name,
        "nodes": [
            {"id": n.id, "alpha": n.alpha, "injection_kg_s": n.injection, "kind": n.kind}
            for n in spec.nodes
        ],
        "pipes": pipes,
    }


def simple_network(
    n_nodes: int,
    length: float = 5000.0,
    diameter: float = 0.6,
    friction: float = 0.01,
    wave_speed: float = 350.0,
    injections: Sequence[float] | None = None,
    alphas: Sequence[float] | None = None,
) -> NetworkSpec:
    """A path graph ``1 -> 2 -> ... -> n_nodes`` with uniform pipes."""
    injections = [0.0] * n_nodes if injections is None else list(injections)
    alphas = [1.0] * n_nodes if alphas is None else list(alphas)
    nodes = tuple(
        NodeSpec(str(k + 1), alpha=alphas[k], injection=injections[k],
                 kind="source" if injections[k] > 0 else "load" if injections[k] < 0 else "junction")
        for k in range(n_nodes)
    )
    pipes = tuple(
        PipeSpec(str(k + 1), str(k + 2), length, diameter, friction, wave_speed)
        for k in range(n_nodes - 1)
    )
    return NetworkSpec(nodes=nodes, pipes=pipes)


def random_tree(rng: np.random.Generator, n_nodes: int, max_segments: int = 8,
                target_length: float = 5000.0) -> NetworkSpec:
    """Random tree with random physical parameters; pipe lengths are chosen
    so each pipe splits into 1..max_segments segments at ``target_length``."""
    nodes = []
    for k in range(n_nodes):
        alpha = float(rng.uniform(1.05, 1.5)) if rng.random() < 0.2 else 1.0
        nodes.append(NodeSpec(str(k + 1), alpha=alpha))
    pipes = []
    for k in range(1, n_nodes):
        parent = int(rng.integers(0, k))
        segs = int(rng.integers(1, max_segments + 1))
        pipes.append(PipeSpec(
            str(parent + 1), str(k + 1),
            length=target_length * float(rng.uniform(segs - 0.95, segs)),
            diameter=float(rng.uniform(0.3, 1.0)),
            friction=float(rng.uniform(0.005, 0.02)),
            wave_speed=float(rng.uniform(300.0, 400.0)),
        ))
    return NetworkSpec(nodes=tuple(nodes), pipes=tuple(pipes))
