"""Command line entry point: ``linepack-sim simulate|rank|steady|batch``."""
from __future__ import annotations

import json
import logging
import sys
from dataclasses import replace

import click
import numpy as np

from .dynamics import RegularityError, mass_matrix, rank_report
from .network import NetworkError, build_matrices, build_network, discretize
from .scenario import (
    EXIT_INPUT,
    EXIT_NUMERICAL,
    TECHNIQUES,
    ScenarioError,
    TechniqueConfig,
    load_manifest,
    load_scenario,
    resolve_path,
    run_batch,
    run_scenario,
    summary_table,
    _load_network_ref,
)
from .steady import SteadyStateError, solve_steady

INPUT_ERRORS = (ScenarioError, NetworkError, SteadyStateError, FileNotFoundError, ValueError)


def _fail(message: str, code: int):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


@click.group()
@click.option("-v", "--verbose", count=True, help="More logging (repeatable).")
def main(verbose: int):
    """Linepack depletion simulation for tree-structured gas networks."""
    level = logging.WARNING - 10 * verbose
    logging.basicConfig(level=max(level, logging.DEBUG), format="%(levelname)s %(name)s: %(message)s")


@main.command()
@click.option("--network", required=True, help="Network JSON file or builtin:<name>.")
@click.option("--scenario", required=True, help="Scenario JSON file or builtin:scenarios/<name>.")
@click.option("--technique", type=click.Choice(TECHNIQUES), required=True)
@click.option("--node", help="Slack / balancing node id (overrides the scenario).")
@click.option("--source-node", help="Sigmoid source node id (overrides the scenario).")
@click.option("--phi-max", type=float, help="Sigmoid flux ceiling, kg/m2/s.")
@click.option("--phi-half", type=float, help="Flux at which the source density halves, kg/m2/s.")
@click.option("--headroom", type=float, help="Sigmoid extra capacity over the initial injection, kg/s.")
@click.option("--gamma", type=float, help="Sigmoid droop steepness.")
@click.option("--r", "r", type=float, help="Sigmoid constraint radius.")
@click.option("--slack-density", type=float, help="Constant slack density, kg/m3.")
@click.option("--rel-tol", type=float)
@click.option("--abs-tol", type=float)
@click.option("--dt-out", type=float, help="Output stride, s.")
@click.option("--max-step", type=float, help="Largest integration step, s.")
@click.option("--method", type=click.Choice(["adaptive_implicit", "backward_euler_fixed"]))
@click.option("--csv", "csv_path", type=click.Path(dir_okay=False), help="Write the trajectory here.")
@click.option("--report", "report_path", type=click.Path(dir_okay=False), help="Write the JSON report here.")
def simulate(network, scenario, technique, node, source_node, phi_max, phi_half, headroom, gamma, r,
             slack_density, rel_tol, abs_tol, dt_out, max_step, method, csv_path, report_path):
    """Run one scenario with one technique."""
    try:
        sc = load_scenario(resolve_path(scenario))
        tech = TechniqueConfig.from_scenario(
            sc, technique, node=source_node if technique == "sigmoid" and source_node else node,
            phi_max=phi_max, phi_half=phi_half, headroom=headroom, gamma=gamma, r=r,
            slack_density=slack_density)
        overrides = {k: v for k, v in dict(rel_tol=rel_tol, abs_tol=abs_tol, dt_out=dt_out,
                                           max_step=max_step, method=method).items() if v is not None}
        config = replace(sc.integrator, **overrides)
        report, _ = run_scenario(network, sc, tech, csv_path=csv_path, integrator=config)
    except (RegularityError, np.linalg.LinAlgError) as exc:
        _fail(str(exc), EXIT_NUMERICAL)
    except INPUT_ERRORS as exc:
        _fail(str(exc), EXIT_INPUT)
    click.echo(report.summary_line())
    text = json.dumps(report.to_dict(), indent=2)
    if report_path:
        with open(report_path, "w") as fh:
            fh.write(text + "\n")
    else:
        click.echo(text)
    sys.exit(report.exit_code)


def _default_node(spec) -> str:
    for node in spec.nodes:
        if node.kind == "source":
            return node.id
    return spec.nodes[0].id


@main.command()
@click.option("--network", required=True, help="Network JSON file or builtin:<name>.")
@click.option("--node", help="Node whose density column is deleted (default: first source).")
@click.option("--target-length", type=float, default=5000.0, show_default=True, help="Segment length, m.")
def rank(network, node, target_length):
    """Numerical rank of the full and reduced mass matrices."""
    try:
        spec = _load_network_ref(network)
        dnet = discretize(build_network(spec), target_length)
        node = node or _default_node(spec)
        b = dnet.node_index(node)
    except INPUT_ERRORS as exc:
        _fail(str(exc), EXIT_INPUT)
    if not dnet.is_tree:
        click.echo("warning: non-tree network, the tree rank results do not apply", err=True)
    ms = build_matrices(dnet)
    segment = dnet.attached_segments(b)[0]
    click.echo(f"network {spec.name or network}: n={dnet.n} nodes, m={dnet.m} segments, deletion node {node}")
    for kind in ("full_Mx", "slack_Mx2", "balancing_Mx3"):
        variant = mass_matrix(ms, kind, node=b, segment=segment)
        click.echo(f"{kind:14s} {rank_report(variant.matrix)}")


@main.command()
@click.option("--network", required=True, help="Network JSON file or builtin:<name>.")
@click.option("--scenario", help="Take the anchor from this scenario.")
@click.option("--anchor-node", help="Node with the prescribed density.")
@click.option("--anchor-density", type=float, help="Prescribed density, kg/m3.")
@click.option("--target-length", type=float, default=5000.0, show_default=True)
def steady(network, scenario, anchor_node, anchor_density, target_length):
    """Print the steady-state equilibrium as JSON."""
    try:
        spec = _load_network_ref(network)
        dnet = discretize(build_network(spec), target_length)
        if scenario:
            sc = load_scenario(resolve_path(scenario))
            anchor_node = anchor_node or sc.anchor_node
            anchor_density = anchor_density if anchor_density is not None else sc.anchor_density
        anchor_node = anchor_node or _default_node(spec)
        anchor_density = 50.0 if anchor_density is None else anchor_density
        x = solve_steady(dnet, anchor_node=dnet.node_index(anchor_node), anchor_density=anchor_density)
    except INPUT_ERRORS as exc:
        _fail(str(exc), EXIT_INPUT)
    n, m = dnet.n, dnet.m
    start, end = dnet.segment_start(), dnet.segment_end()
    out = {
        "anchor_node": anchor_node,
        "anchor_density": anchor_density,
        "rho": {nid: float(v) for nid, v in zip(dnet.node_ids, x[:n])},
        "segments": [
            {"from": dnet.node_ids[start[j]], "to": dnet.node_ids[end[j]],
             "phi0": float(x[n + j]), "phil": float(x[n + m + j])}
            for j in range(m)
        ],
    }
    click.echo(json.dumps(out, indent=2))


@main.command()
@click.argument("manifest", type=click.Path(exists=True, dir_okay=False))
@click.option("--threads", type=int, help="Parallel runs (default: LINEPACK_SIM_THREADS or CPU count).")
@click.option("--summary", "summary_path", type=click.Path(dir_okay=False), help="Write the summary JSON here.")
def batch(manifest, threads, summary_path):
    """Run every (network, scenario, technique) entry of a manifest."""
    try:
        entries = load_manifest(manifest)
    except INPUT_ERRORS as exc:
        _fail(str(exc), EXIT_INPUT)
    rows = run_batch(entries, threads)
    table = summary_table(rows)
    for row in table:
        surv = "none" if row["survival_h"] is None else f"{row['survival_h']:.2f} h"
        tail = row["error"] if row["status"] == "error" else f"{row['termination']}, survival {surv}"
        click.echo(f"{row['scenario']:32s} {row['technique']:10s} {row['status']:6s} {tail}")
    if summary_path:
        with open(summary_path, "w") as fh:
            json.dump({"runs": rows, "summary": table}, fh, indent=2)
            fh.write("\n")
    click.echo(f"{len(rows)} runs, {sum(r['status'] == 'error' for r in rows)} failed")


if __name__ == "__main__":
    main()
