"""Both shipped IEEE-33 studies: loss pricing only, then loss plus voltage and congestion.

Writes the full table set under ./demo_out and prints the summaries.
"""

from pathlib import Path

from p2pgrid.scenario import load_config, run_scenarios, shipped_config

for sid in (1, 2):
    cfg = load_config(shipped_config(sid), output=Path("demo_out") / f"scenario{sid}",
                      propositions=False)
    bundle = run_scenarios(cfg)
    print(f"\nscenario {sid}: {cfg.name}  (c_loss={cfg.costs.c_loss}, "
          f"c_voltage={cfg.costs.c_voltage}, c_congestion={cfg.costs.c_congestion})")
    print(f"{'policy':10s} {'rounds':>6s} {'volume':>8s} {'welfare':>9s} {'loss':>8s}  violations")
    for pol, r in bundle.results.items():
        viol = f"nodes {r.violated_nodes} lines {r.violated_lines}" if r.violated_nodes \
            or r.violated_lines else "none"
        print(f"{pol:10s} {r.state.tau:6d} {r.state.total_volume:8.3f} {r.welfare:9.2f} "
              f"{r.loss_mwh:8.4f}  {viol}")

    # causal unit charges: who pays for what
    if "causal" in bundle.results:
        s = bundle.results["causal"].state
        worst = sorted(range(len(bundle.peers)), key=lambda k: -(s.vc[k] + s.fc[k] + s.lc[k]))[:3]
        for k in worst:
            print(f"  {bundle.peers.ids[k]:4s} pays {s.lc[k]:6.2f} loss + {s.vc[k]:6.2f} voltage + "
                  f"{s.fc[k]:6.2f} congestion $/MWh")
    print(f"  tables in {cfg.output}")
