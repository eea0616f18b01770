"""Command-line entry point."""
from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from .config import SimConfig, load_config, replace_section, seed_for
from .consensus import Topology, mixing_matrix
from .errors import SimError
from .graphdata import PartitionSpec, build_subgraphs, dirichlet_partition, generate_sbm, label_skew


def _topology(name: str, m: int) -> Topology:
    name = name.strip().lower()
    if name == "ring":
        return Topology.ring(m)
    if name == "complete":
        return Topology.complete(m)
    if name.startswith("kreg:"):
        return Topology.kregular(m, int(name.split(":", 1)[1]))
    raise SimError(f"unknown topology {name!r}; use ring, complete or kreg:K")


def cmd_run(args: argparse.Namespace) -> int:
    cfg = load_config(args.config) if args.config else SimConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.policy is not None:
        overrides["policy"] = args.policy
    if args.rounds is not None:
        overrides["rounds"] = args.rounds
    if overrides:
        cfg = replace_section(cfg, **overrides)
    from .orchestrator import run

    out = args.out or cfg.out_dir or "runs/latest"
    result = run(cfg, out_dir=out)
    print(json.dumps(result.summary, indent=2, sort_keys=True))
    print(f"outputs written to {out}")
    return 0


def cmd_spectrum(args: argparse.Namespace) -> int:
    mix = mixing_matrix(_topology(args.topology, args.m))
    print(f"alpha_mix = {mix.alpha!r}")
    print("laplacian eigenvalues: " + " ".join(f"{e + 0.0:.6g}" for e in mix.eigenvalues))
    return 0


def cmd_partition_stats(args: argparse.Namespace) -> int:
    g = SimConfig().graph
    graph = generate_sbm(args.nodes, args.classes, g.p_intra, g.p_inter, g.d0, seed_for(args.seed, "graph"))
    owner = dirichlet_partition(graph, PartitionSpec(args.m, args.alpha, seed_for(args.seed, "partition")))
    subs = build_subgraphs(graph, owner)
    tv, mean = label_skew(subs, graph)
    cls = " ".join(f"c{c:<3d}" for c in range(graph.num_classes))
    print(f"{'worker':>6} {'nodes':>6} {'ext':>5} {'tv':>7}  {cls}")
    for sg, d in zip(subs, tv):
        hist = np.bincount(graph.labels[sg.local_nodes], minlength=graph.num_classes)
        print(f"{sg.worker_id:>6} {len(sg.local_nodes):>6} {len(sg.external_stubs):>5} {d:>7.4f}  "
              + " ".join(f"{h:<4d}" for h in hist))
    print(f"mean TV distance: {mean:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dfglsim", description="Decentralized federated graph learning simulator")
    p.add_argument("-v", "--verbose", action="store_true", help="log every round")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one experiment")
    r.add_argument("--config", help="YAML or JSON config file (defaults apply when omitted)")
    r.add_argument("--seed", type=int)
    r.add_argument("--policy", help="ddpg, dar, complete[:r=R], ring[:r=R], kreg:K[:r=R], random:p=P[:r=R]")
    r.add_argument("--rounds", type=int)
    r.add_argument("--out", help="output directory")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("spectrum", help="mixing weight and Laplacian eigenvalues of a topology")
    s.add_argument("--topology", required=True, help="ring, complete or kreg:K")
    s.add_argument("--m", type=int, required=True)
    s.set_defaults(func=cmd_spectrum)

    ps = sub.add_parser("partition-stats", help="label skew of a Dirichlet partition of the default SBM graph")
    ps.add_argument("--alpha", type=float, required=True)
    ps.add_argument("--m", type=int, required=True)
    ps.add_argument("--nodes", type=int, default=400)
    ps.add_argument("--classes", type=int, default=4)
    ps.add_argument("--seed", type=int, default=0)
    ps.set_defaults(func=cmd_partition_stats)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except SimError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
