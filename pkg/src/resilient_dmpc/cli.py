"""Command line entry point and log writers.

Output files (``--format csv``; ``jsonl`` writes the same columns as one JSON
object per line, with a ``.jsonl`` suffix):

``states.csv``      t, agent, x0 .. x{n-1}
``inputs.csv``      t, agent, u0 .. u{m-1}, qp_status, qp_iterations, qp_cost
``detections.csv``  t, broadcaster, receiver, max_deviation, verdict
``metrics.csv``     t, disagreement, graph_digest, gain_digest
``summary.json``    run summary, digest and diagnostics

Floats are written with 17 significant digits so that they parse back to the
same doubles.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys

import numpy as np

from .engine import INFEASIBLE, run, validate_theorem1
from .graph import AttackPartition, CapacityError, check_f_local, is_r_robust
from .scenario import Scenario, ScenarioError, bundled_scenario_path, load_scenario

__all__ = ["OUT_ENV", "Scenario", "load_scenario", "main", "write_logs"]

OUT_ENV = "RESILIENT_DMPC_OUT"

STATE_FILE = "states"
INPUT_FILE = "inputs"
DETECTION_FILE = "detections"
METRICS_FILE = "metrics"
SUMMARY_FILE = "summary.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    parser = _Parser(prog="resilient-dmpc", description="Resilient DMPC consensus simulator")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    p = sub.add_parser("run", help="run or validate a scenario")
    p.add_argument("scenario", help="scenario JSON file, or the name of a bundled scenario")
    p.add_argument("--seed", type=int)
    p.add_argument("--detection", choices=("on", "off"))
    p.add_argument("--out", help=f"output directory (default: ${OUT_ENV} or ./runs/<name>)")
    p.add_argument("--format", choices=("csv", "jsonl"), default="csv")
    p.add_argument("--validate-only", action="store_true")
    p.add_argument("--parallel", action="store_true", help="solve agents in a thread pool")
    return parser


def _f(x):
    return format(float(x), ".17g")


def _gain_digest(k):
    return hashlib.sha256(np.ascontiguousarray(k, dtype=float).tobytes()).hexdigest()[:16]


def _tables(result):
    n = result.rounds[0].states.shape[1]
    m = result.rounds[0].inputs.shape[1]
    states = [["t", "agent"] + [f"x{k}" for k in range(n)]]
    inputs = [["t", "agent"] + [f"u{k}" for k in range(m)] + ["qp_status", "qp_iterations", "qp_cost"]]
    dets = [["t", "broadcaster", "receiver", "max_deviation", "verdict"]]
    metrics = [["t", "disagreement", "graph_digest", "gain_digest"]]
    for r in result.rounds:
        for a, label in enumerate(result.agents):
            states.append([r.t, label] + [_f(v) for v in r.states[a]])
            inputs.append(
                [r.t, label] + [_f(v) for v in r.inputs[a]]
                + [r.qp_status[a], r.qp_iterations[a], _f(r.qp_cost[a])]
            )
        for v in r.detections:
            dets.append([r.t, v.broadcaster, v.receiver, _f(v.max_deviation), v.verdict])
        metrics.append([r.t, _f(r.disagreement), r.graph_digest, _gain_digest(r.gain)])
    return {STATE_FILE: states, INPUT_FILE: inputs, DETECTION_FILE: dets, METRICS_FILE: metrics}


def write_logs(result, out_dir, fmt="csv"):
    """Write the log files for ``result`` into ``out_dir``; return their paths."""
    if fmt not in ("csv", "jsonl"):
        raise ValueError(f"unknown format {fmt!r}")
    paths = []
    try:
        os.makedirs(out_dir, exist_ok=True)
        for name, rows in _tables(result).items():
            path = os.path.join(out_dir, f"{name}.{fmt}")
            with open(path, "w", newline="", encoding="utf-8") as fh:
                if fmt == "csv":
                    csv.writer(fh, lineterminator="\n").writerows(rows)
                else:
                    header = rows[0]
                    for row in rows[1:]:
                        fh.write(json.dumps(dict(zip(header, row))) + "\n")
            paths.append(path)
        path = os.path.join(out_dir, SUMMARY_FILE)
        doc = {
            "scenario": result.scenario_name,
            "agents": list(result.agents),
            "normal_agents": list(result.normal),
            "terminated_reason": result.terminated_reason,
            "digest": result.digest(),
            "summary": result.summary,
            "diagnostics": result.diagnostics,
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")
        paths.append(path)
    except OSError as exc:
        raise OSError(f"cannot write logs to {exc.filename or out_dir}: {exc.strerror}") from None
    return paths


def _resolve(path):
    if os.path.exists(path):
        return path
    bundled = bundled_scenario_path(path)
    if os.path.exists(bundled):
        return bundled
    return path


def validation_report(sc):
    """Theorem-1 report plus graph checks; never solves a QP."""
    graph = sc.initial_graph()
    r = sc.f + 1
    try:
        robust = is_r_robust(graph, 0, r) if r < sc.n_agents else None
    except CapacityError:
        robust = None
    idx = {a: i for i, a in enumerate(sc.agents)}
    part = AttackPartition.from_adversaries(
        sc.n_agents,
        [idx[s.target] for s in sc.attacks if s.is_agent_attack],
        [tuple(idx[x] for x in s.target) for s in sc.attacks if s.kind == "link"],
    )
    return {
        "scenario": sc.name,
        "F": sc.f,
        "robustness": {"r": r, "robust": robust},
        "f_local_all_attacks": check_f_local(graph, 0, part, sc.f),
        "theorem1": validate_theorem1(sc),
    }


def _print_validation(rep, out):
    r = rep["robustness"]
    verdict = "unknown" if r["robust"] is None else str(r["robust"]).lower()
    print(f"{r['r']}-robust: {verdict}", file=out)
    print(f"F-local (F={rep['F']}): {str(rep['f_local_all_attacks']).lower()}", file=out)
    th = rep["theorem1"]
    print(f"recursive feasibility conditions: {'pass' if th['passes'] else 'FAIL'}", file=out)
    for c in th["configurations"]:
        fe, co = c["feasibility"], c["consensus"]
        radii = ", ".join(f"{x:.4f}" for x in co["radii"])
        print(
            f"  {c['configuration']}: K={np.round(c['gain'], 4).tolist()} "
            f"rho(sum)={fe['rho_power_sum']:.4f} rho(A_K)={fe['rho_A_K']:.4f} "
            f"consensus radii=[{radii}]",
            file=out,
        )


def main(args=None):
    """Run the CLI; returns the process exit code."""
    parser = build_parser()
    try:
        ns = parser.parse_args(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(
        level=logging.WARNING - 10 * min(ns.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        sc = load_scenario(_resolve(ns.scenario))
    except ScenarioError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    if ns.seed is not None:
        sc = sc.with_overrides(seed=ns.seed)
    if ns.detection is not None:
        sc = sc.with_overrides(detection=ns.detection == "on")

    if ns.validate_only:
        _print_validation(validation_report(sc), sys.stdout)
        return 0

    result = run(sc, parallel=ns.parallel)
    out_dir = ns.out or os.environ.get(OUT_ENV) or os.path.join("runs", sc.name)
    try:
        write_logs(result, out_dir, ns.format)
    except OSError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    s = result.summary
    print(
        f"{sc.name}: {result.terminated_reason} at t={s['final_time']}, "
        f"disagreement {s['final_disagreement']:.3e}, "
        f"adversarial verdicts {s['adversarial_verdicts']} "
        f"(false positives {s['false_positives']}), logs in {out_dir}"
    )
    if result.terminated_reason == INFEASIBLE:
        print(json.dumps(result.diagnostics, indent=2), file=sys.stderr)
        return 2
    return 0


def entry():
    sys.exit(main())
