"""Scenario files, event scheduling, single runs, batches and reports."""
from __future__ import annotations

import csv
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np

from .balancing import BalancingSystem
from .dynamics import CompressorTransition, Inputs, LoadRamp
from .integrator import IntegratorConfig, Trajectory, simulate, survival_time
from .network import DiscretizedNetwork, NetworkError, NetworkSpec, build_network, discretize, load_network
from .sigmoid import SigmoidSource, SigmoidSystem, nominal_density_for
from .slack import SlackSystem
from .steady import solve_steady

log = logging.getLogger(__name__)

SCHEMA = "linepack-scn/1"
TECHNIQUES = ("slack", "sigmoid", "balancing")
EXIT_OK, EXIT_DEPLETION, EXIT_RHO_MIN, EXIT_INPUT, EXIT_NUMERICAL = 0, 2, 3, 4, 5


class ScenarioError(ValueError):
    """Malformed scenario, manifest or technique configuration."""


# -- events -------------------------------------------------------------------

@dataclass(frozen=True)
class LoadRampEvent:
    node: str
    rate: float  # kg/s^2, added to the node's injection rate
    t_start: float
    t_end: float


@dataclass(frozen=True)
class CompressorEvent:
    node: str
    alpha_start: float
    alpha_end: float
    t_start: float
    t_end: float
    steepness: float = 10.0


@dataclass(frozen=True)
class ReassignEvent:
    node: str
    t: float


@dataclass
class Scenario:
    name: str
    t_end: float
    events: list = field(default_factory=list)
    rho_min: float | None = None
    stop_on_rho_min: bool = False
    anchor_node: str | None = None
    anchor_density: float = 50.0
    techniques: dict[str, dict] = field(default_factory=dict)
    integrator: IntegratorConfig = field(default_factory=IntegratorConfig)
    convergence_fraction: float = 0.01

    @property
    def ramps(self) -> list[LoadRampEvent]:
        return [e for e in self.events if isinstance(e, LoadRampEvent)]

    @property
    def transitions(self) -> list[CompressorEvent]:
        return [e for e in self.events if isinstance(e, CompressorEvent)]

    @property
    def reassignments(self) -> list[ReassignEvent]:
        return sorted((e for e in self.events if isinstance(e, ReassignEvent)), key=lambda e: e.t)

    def disturbance(self) -> float:
        """Total scheduled change of the nodal injections (kg/s)."""
        return float(sum(abs(r.rate) * (r.t_end - r.t_start) for r in self.ramps))


def _event_from_dict(item: dict):
    kind = item.get("kind")
    try:
        if kind == "load_ramp":
            ev = LoadRampEvent(str(item["node"]), float(item["rate_kg_s2"]),
                               float(item["t_start_s"]), float(item["t_end_s"]))
        elif kind == "compressor_transition":
            ev = CompressorEvent(str(item["node"]), float(item["alpha_start"]), float(item["alpha_end"]),
                                 float(item["t_start_s"]), float(item["t_end_s"]),
                                 float(item.get("steepness", 10.0)))
        elif kind == "reassign_balancing_node":
            return ReassignEvent(str(item["node"]), float(item["t_s"]))
        else:
            raise ScenarioError(f"unknown event kind {kind!r}")
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ScenarioError):
            raise
        raise ScenarioError(f"malformed {kind} event: {exc}") from exc
    if not ev.t_start < ev.t_end:
        raise ScenarioError(f"{kind} event on node {ev.node} needs t_start < t_end")
    return ev


def scenario_from_dict(data: dict) -> Scenario:
    if data.get("schema") != SCHEMA:
        raise ScenarioError(f"expected schema {SCHEMA!r}, got {data.get('schema')!r}")
    try:
        integ = dict(data.get("integrator", {}))
        config = IntegratorConfig(
            rel_tol=float(integ.get("rel_tol", 1e-3)),
            abs_tol=float(integ.get("abs_tol", 1e-6)),
            dt_out=float(integ.get("dt_out_s", 0.5)),
            max_step=float(integ.get("max_step_s", np.inf)),
            method=str(integ.get("method", "adaptive_implicit")),
            fixed_step=float(integ.get("fixed_step_s", 0.05)),
        )
        steady = data.get("steady", {})
        sc = Scenario(
            name=str(data.get("name", "")),
            t_end=float(data["t_end_s"]),
            events=[_event_from_dict(e) for e in data.get("events", [])],
            rho_min=None if data.get("rho_min") is None else float(data["rho_min"]),
            stop_on_rho_min=bool(data.get("stop_on_rho_min", False)),
            anchor_node=None if steady.get("anchor_node") is None else str(steady["anchor_node"]),
            anchor_density=float(steady.get("anchor_density", 50.0)),
            techniques={str(k): dict(v) for k, v in data.get("techniques", {}).items()},
            integrator=config,
            convergence_fraction=float(data.get("convergence_fraction", 0.01)),
        )
    except (KeyError, TypeError) as exc:
        raise ScenarioError(f"malformed scenario document: {exc}") from exc
    except ValueError as exc:
        if isinstance(exc, ScenarioError):
            raise
        raise ScenarioError(str(exc)) from exc
    if sc.t_end <= 0:
        raise ScenarioError("t_end_s must be positive")
    unknown = set(sc.techniques) - set(TECHNIQUES)
    if unknown:
        raise ScenarioError(f"unknown technique sections: {sorted(unknown)}")
    return sc


def load_scenario(path: str | Path) -> Scenario:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ScenarioError(f"cannot read scenario {path}: {exc}") from exc
    return scenario_from_dict(data)


def builtin_path(name: str) -> Path:
    """Path of a shipped data file, e.g. ``belgium.json`` or ``scenarios/test1.json``."""
    path = Path(str(resources.files("linepack") / "data" / name))
    if not path.exists():
        raise FileNotFoundError(f"no built-in data file {name!r}")
    return path


def resolve_path(ref: str | Path) -> Path:
    """File path, or ``builtin:<name>`` for shipped data."""
    ref = str(ref)
    if ref.startswith("builtin:"):
        name = ref[len("builtin:"):]
        if not name.endswith(".json"):
            name += ".json"
        return builtin_path(name)
    return Path(ref)


# -- technique configuration --------------------------------------------------

@dataclass
class TechniqueConfig:
    technique: str
    node: str | None = None
    slack_density: float | None = None
    headroom: float | None = None  # kg/s of extra capacity at the sigmoid source
    phi_max: float | None = None
    phi_half: float | None = None
    gamma: float = 0.1
    r: float = 10.0
    rho_nominal: float | None = None

    def __post_init__(self):
        if self.technique not in TECHNIQUES:
            raise ScenarioError(f"unknown technique {self.technique!r}; choose from {TECHNIQUES}")

    @classmethod
    def from_scenario(cls, scenario: Scenario, technique: str, **overrides) -> "TechniqueConfig":
        section = dict(scenario.techniques.get(technique, {}))
        if isinstance(section.get("node"), list):
            if technique == "sigmoid" and len(section["node"]) > 1:
                raise ScenarioError("exactly one sigmoid source per run is supported")
            section["node"] = section["node"][0] if section["node"] else None
        keys = {"node": "node", "slack_density": "density", "headroom": "headroom_kg_s",
                "phi_max": "phi_max", "phi_half": "phi_half", "gamma": "gamma", "r": "r",
                "rho_nominal": "rho_nominal"}
        kwargs: dict[str, Any] = {}
        for attr, key in keys.items():
            if section.get(key) is not None:
                kwargs[attr] = str(section[key]) if attr == "node" else float(section[key])
        kwargs.update({k: v for k, v in overrides.items() if v is not None})
        return cls(technique=technique, **kwargs)


def build_inputs(dnet: DiscretizedNetwork, scenario: Scenario) -> Inputs:
    idx = _indexer(dnet)
    ramps = tuple(LoadRamp(idx(r.node), r.rate, r.t_start, r.t_end) for r in scenario.ramps)
    transitions = tuple(
        CompressorTransition(idx(c.node), c.alpha_start, c.alpha_end, c.t_start, c.t_end, c.steepness)
        for c in scenario.transitions
    )
    return Inputs(d0=dnet.injection.copy(), alpha0=dnet.alpha.copy(), ramps=ramps, transitions=transitions)


def _indexer(dnet: DiscretizedNetwork):
    def idx(node_id: str) -> int:
        try:
            return dnet.node_index(node_id)
        except NetworkError as exc:
            raise ScenarioError(f"scenario references unknown node {node_id!r}") from exc
    return idx


def initial_state(dnet: DiscretizedNetwork, inputs: Inputs, scenario: Scenario, tech: TechniqueConfig) -> np.ndarray:
    """Equilibrium at t = 0 with the scenario's (or technique's) anchor node."""
    node = scenario.anchor_node or tech.node
    anchor = 0 if node is None else _indexer(dnet)(node)
    return solve_steady(dnet, d=inputs.d(0.0), alpha=inputs.alpha(0.0),
                        anchor_node=anchor, anchor_density=scenario.anchor_density)


def build_system(dnet: DiscretizedNetwork, inputs: Inputs, x0: np.ndarray, tech: TechniqueConfig,
                 node: str | None = None):
    node = node or tech.node
    if node is None:
        raise ScenarioError(f"technique {tech.technique} needs a node")
    b = _indexer(dnet)(node)
    if tech.technique == "slack":
        rho = float(x0[b]) if tech.slack_density is None else tech.slack_density
        return SlackSystem(dnet, inputs, b, rho)
    if tech.technique == "balancing":
        return BalancingSystem(dnet, inputs, b, rho_guess=float(x0[b]))
    segs = dnet.attached_segments(b)
    if len(segs) != 1:
        raise ScenarioError(f"sigmoid source {node!r} must be a leaf node")
    seg = segs[0]
    phi0 = float(x0[dnet.n + seg])
    phi_max = tech.phi_max
    if phi_max is None:
        if tech.headroom is None:
            raise ScenarioError("sigmoid source needs phi_max or headroom_kg_s")
        phi_max = phi0 + tech.headroom / dnet.area[seg]
    phi_half = phi_max if tech.phi_half is None else tech.phi_half
    if not 0.0 < phi0 < phi_max:
        raise ScenarioError(f"initial source flux {phi0:.6g} outside (0, phi_max={phi_max:.6g})")
    rho_n = tech.rho_nominal
    if rho_n is None:
        rho_n = nominal_density_for(float(x0[b]), phi0, phi_half, tech.gamma)
    return SigmoidSystem(dnet, inputs, SigmoidSource(b, phi_max, phi_half, tech.gamma, rho_n, tech.r))


# -- reports -------------------------------------------------------------------

@dataclass
class RunReport:
    scenario: str
    technique: str
    termination: str
    termination_time_s: float
    termination_node: str | None
    survival_time_s: float | None
    rho_min_violation_s: float | None
    rho_min_violation_node: str | None
    converged_at_s: float | None
    min_density: dict[str, float]
    initial_linepack_kg: float
    final_linepack_kg: float
    wall_clock_s: float
    steps: int
    message: str = ""

    @property
    def exit_code(self) -> int:
        if self.termination in ("depletion", "infeasible"):
            return EXIT_DEPLETION
        if self.termination == "numerical_failure":
            return EXIT_NUMERICAL
        if self.rho_min_violation_s is not None:
            return EXIT_RHO_MIN
        return EXIT_OK

    def to_dict(self) -> dict:
        return asdict(self)

    def summary_line(self) -> str:
        def hours(v):
            return "none" if v is None else f"{v / 3600:.2f} h"
        return (f"{self.scenario} [{self.technique}] {self.termination} at {hours(self.termination_time_s)}; "
                f"survival {hours(self.survival_time_s)}; rho_min violation {hours(self.rho_min_violation_s)}; "
                f"converged {hours(self.converged_at_s)}; min density {min(self.min_density.values()):.3f}; "
                f"wall {self.wall_clock_s:.1f} s")


def convergence_time(traj: Trajectory, disturbance: float, fraction: float = 0.01) -> float | None:
    """Time after which the net injection imbalance stays within
    ``fraction * disturbance`` until the end of the run."""
    if traj.termination.cause != "t_end" or disturbance <= 0:
        return None
    bad = np.flatnonzero(np.abs(traj.injection_total) > fraction * disturbance)
    if bad.size == 0:
        return float(traj.times[0])
    k = int(bad[-1]) + 1
    return None if k >= len(traj.times) else float(traj.times[k])


def rho_min_violation(traj: Trajectory, rho_min: float | None) -> tuple[float | None, str | None]:
    if rho_min is None:
        return None, None
    t = traj.first_crossings.get("rho_min_violation")
    if t is None:
        return None, None
    k = min(int(np.searchsorted(traj.times, t)), len(traj.times) - 1)
    node = traj.node_ids[int(np.argmin(traj.densities[k]))]
    return float(t), node


def csv_header(dnet: DiscretizedNetwork) -> list[str]:
    cols = ["time_s"] + [f"rho_{nid}" for nid in dnet.node_ids[: dnet.n_physical]]
    for segs in dnet.pipe_segments:
        name = _pipe_name(dnet, segs)
        cols += [f"phi0_{name}", f"phil_{name}"]
    return cols + ["linepack_kg"]


def _pipe_name(dnet, segs) -> str:
    start = dnet.node_ids[int(dnet.segment_start()[segs[0]])]
    end = dnet.node_ids[int(dnet.segment_end()[segs[-1]])]
    return f"{start}-{end}"


def write_csv(path: str | Path, traj: Trajectory, dnet: DiscretizedNetwork) -> None:
    n, m, npys = dnet.n, dnet.m, dnet.n_physical
    first = [segs[0] for segs in dnet.pipe_segments]
    last = [segs[-1] for segs in dnet.pipe_segments]
    S = traj.states
    cols = [traj.times[:, None], S[:, :npys]]
    pipe_cols = np.empty((len(S), 2 * len(first)))
    pipe_cols[:, 0::2] = S[:, n + np.asarray(first)]
    pipe_cols[:, 1::2] = S[:, n + m + np.asarray(last)]
    cols += [pipe_cols, traj.linepack[:, None]]
    table = np.hstack(cols)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(csv_header(dnet))
        for row in table:
            w.writerow([repr(float(v)) for v in row])


# -- running -------------------------------------------------------------------

def _load_network_ref(network) -> NetworkSpec:
    if isinstance(network, NetworkSpec):
        return network
    try:
        return load_network(resolve_path(network))
    except (OSError, json.JSONDecodeError) as exc:
        raise NetworkError(f"cannot read network {network}: {exc}") from exc


def _load_scenario_ref(scenario) -> Scenario:
    if isinstance(scenario, Scenario):
        return scenario
    if isinstance(scenario, dict):
        return scenario_from_dict(scenario)
    return load_scenario(resolve_path(scenario))


def run_scenario(
    network,
    scenario,
    technique: str | TechniqueConfig,
    csv_path: str | Path | None = None,
    integrator: IntegratorConfig | None = None,
    target_length: float = 5000.0,
) -> tuple[RunReport, Trajectory]:
    """Steady initialization, event-scheduled simulation, report (and CSV)."""
    spec = _load_network_ref(network)
    sc = _load_scenario_ref(scenario)
    tech = technique if isinstance(technique, TechniqueConfig) else TechniqueConfig.from_scenario(sc, technique)
    config = integrator or sc.integrator
    if sc.reassignments and tech.technique != "balancing":
        raise ScenarioError("reassign_balancing_node events need the balancing technique")

    dnet = discretize(build_network(spec), target_length)
    inputs = build_inputs(dnet, sc)
    t_wall = time.perf_counter()
    x0 = initial_state(dnet, inputs, sc, tech)
    system = build_system(dnet, inputs, x0, tech)

    # balancing-node reassignments split the run into phases
    phases = [(ev.t, ev.node) for ev in sc.reassignments if 0.0 < ev.t < sc.t_end]
    pieces: list[Trajectory] = []
    t0, x_start = 0.0, x0
    for t_switch, new_node in phases + [(sc.t_end, None)]:
        traj = simulate(system, x_start, t_switch, config, t0=t0, rho_min=sc.rho_min,
                        stop_on_rho_min=sc.stop_on_rho_min)
        pieces.append(traj)
        if traj.termination.cause != "t_end" or new_node is None:
            break
        log.info("reassigning balancing node to %s at t=%.1f s", new_node, t_switch)
        t0, x_start = t_switch, traj.final_state()
        system = build_system(dnet, inputs, x_start, tech, node=new_node)
    traj = _concat(pieces)
    wall = time.perf_counter() - t_wall

    surv = survival_time(traj, 0.0)
    t_viol, n_viol = rho_min_violation(traj, sc.rho_min)
    report = RunReport(
        scenario=sc.name,
        technique=tech.technique,
        termination=traj.termination.cause,
        termination_time_s=float(traj.termination.time),
        termination_node=traj.termination.node,
        survival_time_s=surv,
        rho_min_violation_s=t_viol,
        rho_min_violation_node=n_viol,
        converged_at_s=convergence_time(traj, sc.disturbance(), sc.convergence_fraction),
        min_density=traj.min_density(),
        initial_linepack_kg=float(traj.linepack[0]),
        final_linepack_kg=float(traj.linepack[-1]),
        wall_clock_s=wall,
        steps=traj.nsteps,
        message=traj.termination.message,
    )
    if csv_path is not None:
        write_csv(csv_path, traj, dnet)
    return report, traj


def _concat(pieces: list[Trajectory]) -> Trajectory:
    if len(pieces) == 1:
        return pieces[0]
    times = [pieces[0].times]
    states = [pieces[0].states]
    lp = [pieces[0].linepack]
    inj = [pieces[0].injection_total]
    crossings = dict(pieces[0].first_crossings)
    for p in pieces[1:]:
        # the first sample repeats the previous phase's last one
        times.append(p.times[1:])
        states.append(p.states[1:])
        lp.append(p.linepack[1:])
        inj.append(p.injection_total[1:])
        for k, v in p.first_crossings.items():
            crossings.setdefault(k, v)
    return replace(
        pieces[-1],
        times=np.concatenate(times), states=np.vstack(states), linepack=np.concatenate(lp),
        injection_total=np.concatenate(inj), first_crossings=crossings,
        nsteps=sum(p.nsteps for p in pieces), nrejected=sum(p.nrejected for p in pieces),
        step_times=np.concatenate([p.step_times for p in pieces if p.step_times is not None]),
    )


# -- batches -------------------------------------------------------------------

@dataclass(frozen=True)
class BatchEntry:
    network: str
    scenario: str
    technique: str
    csv: str | None = None
    options: dict = field(default_factory=dict)


def load_manifest(path: str | Path) -> list[BatchEntry]:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ScenarioError(f"cannot read manifest {path}: {exc}") from exc
    runs = data.get("runs", []) if isinstance(data, dict) else data
    if not isinstance(runs, list):
        raise ScenarioError("manifest must be a list of runs or {'runs': [...]}")
    base = path.parent

    def rel(ref):
        if ref is None or str(ref).startswith("builtin:") or Path(ref).is_absolute():
            return ref
        return str(base / ref)

    entries = []
    for item in runs:
        try:
            entries.append(BatchEntry(network=rel(item["network"]), scenario=rel(item["scenario"]),
                                      technique=str(item["technique"]), csv=rel(item.get("csv")),
                                      options=dict(item.get("options", {}))))
        except (KeyError, TypeError) as exc:
            raise ScenarioError(f"malformed manifest entry {item!r}: {exc}") from exc
    return entries


def _run_entry(entry: BatchEntry) -> dict:
    """Worker body; never raises so one bad run cannot stop the batch."""
    row = {"network": entry.network, "scenario": entry.scenario, "technique": entry.technique}
    try:
        sc = _load_scenario_ref(entry.scenario)
        tech = TechniqueConfig.from_scenario(sc, entry.technique, **entry.options)
        report, _ = run_scenario(entry.network, sc, tech, csv_path=entry.csv)
    except Exception as exc:  # noqa: BLE001 - isolate any per-run failure
        row.update(status="error", error=f"{type(exc).__name__}: {exc}")
        return row
    row.update(status="ok", name=report.scenario, exit_code=report.exit_code, report=report.to_dict())
    return row


def batch_workers(n_runs: int, threads: int | None = None) -> int:
    if threads is None:
        env = os.environ.get("LINEPACK_SIM_THREADS")
        threads = int(env) if env else (os.cpu_count() or 1)
    return max(1, min(threads, n_runs))


def run_batch(entries: list[BatchEntry], threads: int | None = None) -> list[dict]:
    """Run every entry (in parallel processes when more than one worker is
    allowed); results come back in manifest order."""
    if not entries:
        return []
    workers = batch_workers(len(entries), threads)
    if workers == 1:
        return [_run_entry(e) for e in entries]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_entry, entries))


def summary_table(rows: list[dict]) -> list[dict]:
    """Scenario x technique x survival time."""
    table = []
    for row in rows:
        rep = row.get("report") or {}
        surv = rep.get("survival_time_s")
        table.append({
            "scenario": row.get("name", row["scenario"]),
            "technique": row["technique"],
            "status": row["status"],
            "termination": rep.get("termination"),
            "survival_h": None if surv is None else surv / 3600.0,
            "converged_h": None if rep.get("converged_at_s") is None else rep["converged_at_s"] / 3600.0,
            "min_density": None if not rep else min(rep["min_density"].values()),
            "error": row.get("error"),
        })
    return table
