"""One seller, one buyer, no network charges: the negotiation meets the textbook answer.

Marginal cost 2 a_s p + b_s meets marginal utility b_b - 2 a_b p at
p = (b_b - b_s) / (2 (a_s + a_b)). The run starts from a zero price so the
price path is visible.
"""

from p2pgrid import (BuyingPeer, CostSchedule, NegotiationConfig, PeerSet, RadialNetwork,
                     SellingPeer, run_negotiation)

net = RadialNetwork(p_load=[0.0, 0.01], q_load=[0.0, 0.005], v_min=[0.9, 0.9], v_max=[1.1, 1.1],
                    from_node=[0], to_node=[1], r=[0.01], x=[0.01], s_max=[float("inf")],
                    s_min=[0.0])
a_s, b_s, a_b, b_b = 1.0, 10.0, 2.0, 40.0
peers = PeerSet([SellingPeer("seller", 1, a_s, b_s, 0.0, 0.0, 10.0)],
                [BuyingPeer("buyer", 1, a_b, b_b, 0.0, 10.0)])

state = run_negotiation(net, peers, CostSchedule(), "base", NegotiationConfig(initial_price=0.0))
for h in state.history[:: max(1, len(state.history) // 12)]:
    print(f"round {h.tau:5d}  price {h.prices[0]:8.4f}  seller {h.volumes[0]:.4f}  "
          f"buyer {h.volumes[1]:.4f}")

p = (b_b - b_s) / (2 * (a_s + a_b))
print(f"\nconverged={state.converged} after {state.tau} rounds")
print(f"volume {state.volumes[0]:.6f} (closed form {p:.6f}), "
      f"price {state.trade.prices[0]:.6f} (closed form {2 * a_s * p + b_s:.6f})")
