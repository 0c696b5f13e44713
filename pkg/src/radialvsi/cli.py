"""Command-line interface (``radialvsi``).

Exit status: 0 on success, 1 for input errors, 2 when the power flow or an
index is infeasible.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from .consensus import CommGraph, PartitionNode, hierarchical_aggregate, partition_from_tree, run_consensus
from .errors import InfeasibleError, InputError, MalformedFile
from .experiments import (
    ScenarioSpec,
    format_csv,
    run_dg_penetration,
    run_random_ensemble,
    run_sweep,
    run_uncertainty,
    run_uncertainty_ensemble,
    timing_study,
    write_csv,
)
from .feeders import gen_feeder
from .index import avsi_terms, index_report
from .jacobian import build_full_jacobian, build_reduced_jacobian
from .network import emit_network, from_matpower, parse_loads, read_case
from .powerflow import dumps, solve_power_flow

log = logging.getLogger("radialvsi")


def _load(args):
    tree, scen = read_case(args.network)
    if getattr(args, "loads", None):
        with open(args.loads) as fh:
            scen = parse_loads(fh.read(), tree)
    return tree, scen


def _read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise MalformedFile(f"{path}: {exc}") from exc


def _emit_table(table, args, spec=None):
    if args.out:
        write_csv(args.out, table, spec)
        print(dumps(table.summary, indent=1))
    else:
        sys.stdout.write(table.to_csv())


def parse_levels(text):
    """``"0,0.5,1"`` or ``"a..b"`` (step 0.1) or ``"a..b:step"``."""
    try:
        if ".." in text:
            rng, _, step = text.partition(":")
            a, b = (float(v) for v in rng.split(".."))
            step = float(step) if step else 0.1
            if step <= 0:
                raise ValueError
            k = int(round((b - a) / step))
            return tuple(float(round(a + i * step, 12)) for i in range(k + 1))
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise InputError(f"cannot parse levels {text!r}") from exc


def _spec(args, mode, **kw):
    return ScenarioSpec(network=args.network, mode=mode, **kw)


# --------------------------------------------------------------------------
# subcommands


def cmd_solve(args):
    tree, scen = _load(args)
    rep = solve_power_flow(tree, scen, tol=args.tol, max_iter=args.max_iter)
    print(rep.to_json(indent=1))


def cmd_vsi(args):
    tree, scen = _load(args)
    op = solve_power_flow(tree, scen, tol=args.tol, max_iter=args.max_iter).op
    rep = index_report(tree, scen, op)
    if args.dump_matrices:
        os.makedirs(args.dump_matrices, exist_ok=True)
        np.savetxt(os.path.join(args.dump_matrices, "reduced.csv"),
                   build_reduced_jacobian(tree, scen, op), fmt="%.17g", delimiter=",")
        np.savetxt(os.path.join(args.dump_matrices, "full.csv"),
                   build_full_jacobian(tree, scen, op), fmt="%.17g", delimiter=",")
    print(dumps(rep.to_dict(), indent=1))
    if not rep.vsi_valid:
        return 2
    return 0


def cmd_sweep(args):
    tree, scen = _load(args)
    spec = _spec(args, "sweep", points=args.points, tol_lambda=args.tol_lambda)
    direction = None
    if args.ray == "file":
        if not args.direction:
            raise InputError("--ray file needs --direction")
        with open(args.direction) as fh:
            d = parse_loads(fh.read(), tree)
        direction = (d.p, d.q)
    table, _ = run_sweep(tree, scen, spec, direction=direction)
    _emit_table(table, args, spec)


def cmd_ensemble(args):
    tree, scen = _load(args)
    spec = _spec(args, "random_ensemble", count=args.count, seed=args.seed, tol_lambda=args.tol_lambda)
    _emit_table(run_random_ensemble(tree, scen, spec), args, spec)


def cmd_dg(args):
    tree, scen = _load(args)
    spec = _spec(
        args, "dg_penetration", dg_count=args.count, seed=args.seed,
        penetration_levels=parse_levels(args.levels), dg_fraction=args.dg_fraction,
        power_factor=args.power_factor, tol_lambda=args.tol_lambda,
    )
    table, _ = run_dg_penetration(tree, scen, spec)
    _emit_table(table, args, spec)


def cmd_uncertainty(args):
    tree, scen = _load(args)
    spec = _spec(args, "uncertainty", uncertainty_pct=args.pct, count=max(1, args.random),
                 seed=args.seed, points=args.points, tol_lambda=args.tol_lambda)
    if args.random:
        table = run_uncertainty_ensemble(tree, scen, spec)
    else:
        table, _ = run_uncertainty(tree, scen, spec)
    _emit_table(table, args, spec)


def _graph_from_obj(obj, nodes):
    if isinstance(obj, dict):
        obj = obj.get("edges")
    if not isinstance(obj, list):
        raise MalformedFile("a graph is a list of [a, b] edges or {\"edges\": [...]}")
    try:
        return CommGraph(nodes, tuple((int(a), int(b)) for a, b in obj))
    except (TypeError, ValueError) as exc:
        raise MalformedFile(f"bad communication graph: {exc}") from exc


def cmd_consensus(args):
    tree, scen = _load(args)
    op = solve_power_flow(tree, scen).op
    _, h = avsi_terms(tree, op)
    nodes = tuple(range(1, tree.n + 1))
    if args.topology == "tree":
        graph = CommGraph.from_tree(tree)
    elif args.topology == "complete":
        graph = CommGraph.complete(nodes)
    elif args.topology == "ring":
        graph = CommGraph.ring(nodes)
    else:
        if not args.graph:
            raise InputError("--topology file needs --graph")
        graph = _graph_from_obj(_read_json(args.graph), nodes)
    schedule = None
    if args.schedule:
        sched = _read_json(args.schedule)
        if not isinstance(sched, list) or not sched:
            raise MalformedFile("a schedule is a non-empty list of edge lists")
        schedule = [_graph_from_obj(g, nodes) for g in sched]
    trace = run_consensus(graph, h, tol=args.tol, max_rounds=args.max_rounds, schedule=schedule)
    if args.out:
        rows = [
            [k, node, float(val)]
            for k, state in enumerate(trace.states)
            for node, val in zip(trace.nodes, state)
        ]
        with open(args.out, "w") as fh:
            fh.write(format_csv(("round", "node", "value"), rows))
    summary = {
        "converged": trace.converged,
        "converged_round": trace.converged_round,
        "rounds_run": len(trace.spread) - 1,
        "connected": trace.connected,
        "final_spread": float(trace.spread[-1]),
        "consensus_value": trace.value,
        "centralized_avsi": float(np.mean(h)),
    }
    print(dumps(summary, indent=1))
    return 0 if trace.converged else 2


def cmd_hierarchy(args):
    tree, scen = _load(args)
    op = solve_power_flow(tree, scen).op
    _, h = avsi_terms(tree, op)
    if args.partition:
        root = PartitionNode.from_obj(_read_json(args.partition))
    else:
        root = partition_from_tree(tree, levels=args.levels)
    H, n, value = hierarchical_aggregate(root, h)
    areas = []
    for child in root.children or (root,):
        leaves = child.leaves()
        areas.append({"buses": len(leaves), "H": float(np.sum(h[np.array(leaves) - 1]))})
    print(dumps({"H": H, "n": n, "avsi": value, "centralized_avsi": float(np.mean(h)),
                 "areas": areas}, indent=1))


def cmd_gen_feeder(args):
    tree, scen = gen_feeder(args.buses, seed=args.seed, pf=args.power_factor)
    text = emit_network(tree, scen, indent=1) + "\n"
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def cmd_convert(args):
    with open(args.case) as fh:
        tree, scen = from_matpower(fh.read())
    text = emit_network(tree, scen, indent=1) + "\n"
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def cmd_timing(args):
    sizes = tuple(int(v) for v in args.sizes.split(","))
    table = timing_study(sizes, repeats=args.repeats)
    _emit_table(table, args)
    if not args.out:
        print(dumps(table.summary, indent=1))


# --------------------------------------------------------------------------
# parser


def build_parser():
    p = argparse.ArgumentParser(prog="radialvsi", description="Voltage stability indices for radial feeders.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def net(sp, loads=True):
        sp.add_argument("network", help="network JSON (or MATPOWER .m) file")
        if loads:
            sp.add_argument("--loads", help="JSON file with bus demands overriding the network's")

    def solver(sp):
        sp.add_argument("--tol", type=float, default=1e-10)
        sp.add_argument("--max-iter", type=int, default=200)

    def out(sp):
        sp.add_argument("--out", help="CSV output path (a .json sidecar is written next to it)")

    def lam(sp):
        sp.add_argument("--tol-lambda", type=float, default=1e-6)

    sp = sub.add_parser("solve", help="solve the power flow")
    net(sp); solver(sp)
    sp.set_defaults(func=cmd_solve)

    sp = sub.add_parser("vsi", help="exact and approximate index at the demand in the file")
    net(sp); solver(sp)
    sp.add_argument("--dump-matrices", metavar="DIR", help="write reduced.csv and full.csv Jacobians")
    sp.set_defaults(func=cmd_vsi)

    sp = sub.add_parser("sweep", help="continuation to the loadability limit")
    net(sp); out(sp); lam(sp)
    sp.add_argument("--ray", choices=("uniform", "file"), default="uniform")
    sp.add_argument("--direction", help="load-direction JSON for --ray file")
    sp.add_argument("--points", type=int, default=20, help="extra evenly spaced samples")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("ensemble", help="random loading ensemble at the loadability limit")
    net(sp); out(sp); lam(sp)
    sp.add_argument("--count", type=int, default=1000)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_ensemble)

    sp = sub.add_parser("dg", help="distributed generation penetration study")
    net(sp); out(sp); lam(sp)
    sp.add_argument("--levels", default="0..1.0:0.2")
    sp.add_argument("--count", type=int, default=100, help="scenarios per level")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--dg-fraction", type=float, default=0.2)
    sp.add_argument("--power-factor", type=float, default=0.9)
    sp.set_defaults(func=cmd_dg)

    sp = sub.add_parser("uncertainty", help="indices with over-estimated line impedances")
    net(sp); out(sp); lam(sp)
    sp.add_argument("--pct", type=float, default=0.25)
    sp.add_argument("--random", type=int, default=0, metavar="N", help="use N random scenarios instead of a sweep")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--points", type=int, default=20)
    sp.set_defaults(func=cmd_uncertainty)

    sp = sub.add_parser("consensus", help="simulate distributed averaging of the local terms")
    net(sp)
    sp.add_argument("--topology", choices=("tree", "complete", "ring", "file"), default="tree")
    sp.add_argument("--graph", help="edge list JSON for --topology file")
    sp.add_argument("--schedule", help="JSON list of per-round edge lists")
    sp.add_argument("--tol", type=float, default=1e-9)
    sp.add_argument("--max-rounds", type=int, default=100_000)
    sp.add_argument("--out", help="CSV trace (round, node, value)")
    sp.set_defaults(func=cmd_consensus)

    sp = sub.add_parser("hierarchy", help="aggregate the local terms over a partition")
    net(sp)
    sp.add_argument("--partition", help="nested-list partition JSON")
    sp.add_argument("--levels", type=int, default=2, help="depth of the feeder-derived partition")
    sp.set_defaults(func=cmd_hierarchy)

    sp = sub.add_parser("gen-feeder", help="write a random radial feeder")
    sp.add_argument("--buses", type=int, required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--power-factor", type=float, default=0.9)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_gen_feeder)

    sp = sub.add_parser("convert", help="MATPOWER case to network JSON")
    sp.add_argument("case")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_convert)

    sp = sub.add_parser("timing", help="time both indices on straight feeders")
    sp.add_argument("--sizes", default="100,200,400,800")
    sp.add_argument("--repeats", type=int, default=5)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_timing)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        rc = args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except InfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return 2
    return rc or 0


if __name__ == "__main__":
    sys.exit(main())
