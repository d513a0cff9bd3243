"""Command-line entry point: ``python -m p2pgrid {run,verify,dump-sensitivity}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .coordination import check_propositions, random_instance
from .exceptions import ConfigError, P2PGridError
from .grid import load_network
from .market import load_peers
from .powerflow import CostSchedule
from .scenario import fmt, load_config, run_scenarios, shipped_config, summary_rows
from .sensitivity import compute_sensitivities, dump_sensitivity

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


def _config_path(args):
    if args.config:
        return Path(args.config)
    return shipped_config(args.scenario)


def _policies(text):
    return tuple(p.strip() for p in text.split(",") if p.strip()) if text is not None else None


def _print_table(header, rows, out=None):
    out = out or sys.stdout
    cells = [header] + [[fmt(v) for v in r] for r in rows]
    widths = [max(len(str(c[i])) for c in cells) for i in range(len(header))]
    for c in cells:
        print("  ".join(str(v).ljust(w) for v, w in zip(c, widths)).rstrip(), file=out)


def cmd_run(args):
    cfg = load_config(_config_path(args), output=args.output, seed=args.seed,
                      policies=_policies(args.policies), trace=args.trace,
                      propositions=False if args.no_propositions else None)
    bundle = run_scenarios(cfg, workers=args.workers)
    print(f"scenario {cfg.scenario_id} ({cfg.name or cfg.network.stem}) -> {cfg.output}")
    _print_table(*summary_rows(bundle))
    if bundle.propositions is not None:
        print()
        for line in bundle.propositions.lines():
            print(line)
    if not bundle.converged:
        print("warning: some runs did not converge; see manifest.json", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_verify(args):
    """Equilibrium checks on the configured case plus random feeders."""
    ok = True
    if not args.random_only:
        cfg = load_config(_config_path(args))
        net, peers = load_network(cfg.network), load_peers(cfg.peers)
        rep = check_propositions(net, peers, CostSchedule(c_loss=cfg.costs.c_loss),
                                 cfg.negotiation, colocation=True)
        print(f"[{cfg.network.name}]")
        for line in rep.lines():
            print("  " + line)
        ok &= rep.converged and rep.universal_bounded and rep.causal_gap <= args.gap_tol
    rng = np.random.default_rng(args.seed)
    for i in range(args.instances):
        net, peers, sched, _ = random_instance(rng, max_loss_rate=args.max_loss_rate)
        n = net.n_nodes
        rep = check_propositions(net, peers, sched, colocation=False)
        good = rep.converged and rep.universal_bounded and rep.causal_gap <= args.gap_tol \
            and rep.causal_residual <= args.residual_tol
        ok &= good
        print(f"random #{i} ({n} nodes): causal gap {rep.causal_gap:.2e}, residual "
              f"{rep.causal_residual:.2e}, universal gap {rep.universal_gap:.2e} "
              f"[{'ok' if good else 'FAIL'}]")
    print("all checks passed" if ok else "some checks FAILED")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_dump(args):
    if args.network:
        net = load_network(args.network)
        peers = load_peers(args.peers) if args.peers else None
    else:
        cfg = load_config(_config_path(args))
        net = load_network(cfg.network)
        peers = load_peers(cfg.peers) if not args.by_node else None
    table = compute_sensitivities(net)
    if peers is not None:
        peers.check_nodes(net.n_nodes)
        dump_sensitivity(table, args.output, labels=peers.ids, columns=peers.nodes - 1)
    else:
        dump_sensitivity(table, args.output)
    undefined = table.undefined_lines
    print(f"wrote {args.output}" + (f" (flow sensitivity undefined on zero-flow lines "
                                     f"{list(undefined)})" if len(undefined) else ""))
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="p2pgrid", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def source(sp):
        g = sp.add_mutually_exclusive_group()
        g.add_argument("-c", "--config", help="scenario INI file")
        g.add_argument("-s", "--scenario", type=int, choices=(1, 2), default=1,
                       help="use the shipped IEEE-33 scenario (default 1)")

    r = sub.add_parser("run", help="run the policy matrix and write tables")
    source(r)
    r.add_argument("-o", "--output", help="output directory (overrides the config)")
    r.add_argument("--seed", type=int)
    r.add_argument("--policies", help="comma-separated subset of base,universal,causal")
    t = r.add_mutually_exclusive_group()
    t.add_argument("--trace", dest="trace", action="store_true", default=None,
                   help="write per-iteration trace files")
    t.add_argument("--no-trace", dest="trace", action="store_false")
    r.add_argument("--no-propositions", action="store_true", help="skip the equilibrium checks")
    r.add_argument("-j", "--workers", type=int, default=1, help="parallel policy runs")
    r.set_defaults(func=cmd_run)

    v = sub.add_parser("verify", help="check equilibrium claims on the case and random feeders")
    source(v)
    v.add_argument("-n", "--instances", type=int, default=5, help="random instances")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--random-only", action="store_true")
    v.add_argument("--max-loss-rate", type=float, default=15.0,
                   help="largest loss charge on random instances, $/MWh")
    v.add_argument("--gap-tol", type=float, default=5e-3)
    v.add_argument("--residual-tol", type=float, default=1e-4)
    v.set_defaults(func=cmd_verify)

    d = sub.add_parser("dump-sensitivity", help="write the sensitivity table at the no-trade point")
    source(d)
    d.add_argument("--network", help="network file (instead of a config)")
    d.add_argument("--peers", help="peer roster; rows become peers instead of nodes")
    d.add_argument("--by-node", action="store_true", help="one row per node even with a config")
    d.add_argument("-o", "--output", default="sensitivity.csv")
    d.set_defaults(func=cmd_dump)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (P2PGridError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
