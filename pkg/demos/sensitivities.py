"""Where on the IEEE-33 feeder does an extra MW cost the most loss?

Computes the analytic injection sensitivities at the no-trade point, checks a
few of them against a finite-difference re-solve, and prints the loss factor
per node.
"""

import numpy as np

from p2pgrid import compute_sensitivities, ieee33
from p2pgrid.powerflow import injections_with_trades
from p2pgrid.sensitivity import finite_difference_sensitivities

net = ieee33()
tab = compute_sensitivities(net)
print(f"base loss {tab.state.loss * net.base_power * 1e3:.1f} kW, "
      f"lowest voltage {tab.state.vmag.min():.4f} p.u. at node {tab.state.vmag.argmin()}")

cols = [1, 16, 31]  # nodes 2, 17, 32
fd = finite_difference_sensitivities(net, injections_with_trades(net), columns=cols)
print("\nnode  d|v_node|/dp (analytic, fd)     dloss/dp (analytic, fd)")
for j, c in enumerate(cols):
    n = c + 1
    print(f"{n:4d}  {tab.dvmag_dp[n, c]: .6e} {fd.dvmag[n, j]: .6e}   "
          f"{tab.dloss_dp[c]: .6e} {fd.dloss[j]: .6e}")

# withdrawing 1 MW at node n changes the loss by -dloss/dp_n MW
print("\nloss factor psi = 0.5 dloss/dp per node (negative: buying here adds loss)")
for n in range(1, net.n_nodes):
    bar = "#" * int(round(-tab.psi[n - 1] * 400))
    print(f"{n:3d} {tab.psi[n - 1]: .4f} {bar}")
