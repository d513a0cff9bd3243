"""Equilibrium checks on a handful of random feeders.

With each peer charged its own marginal loss cost, the negotiated outcome
coincides with the welfare optimum. Charging everyone the same average rate
does not, unless every seller and every buyer sees the same loss factor.
"""

import numpy as np

from p2pgrid.coordination import check_propositions, colocation_gap, random_instance

rng = np.random.default_rng(1)
print(f"{'nodes':>5s} {'peers':>5s} {'causal gap':>11s} {'universal gap':>14s} {'residual':>9s}")
for _ in range(5):
    net, peers, sched, table = random_instance(rng)
    rep = check_propositions(net, peers, sched, colocation=False)
    print(f"{net.n_nodes:5d} {len(peers):5d} {rep.causal_gap:11.2e} {rep.universal_gap:14.2e} "
          f"{rep.causal_residual:9.1e}")

print(f"\nall sellers on one node, all buyers on another: universal gap {colocation_gap():.1e}")
