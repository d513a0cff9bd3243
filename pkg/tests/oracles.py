"""Independent reference computations used as test oracles.

Nothing here imports the Newton solver or the sensitivity code.
"""

import numpy as np


def sweep_power_flow(net, injections, tol=1e-12, max_iter=200):
    """Backward/forward sweep on a radial feeder.

    Returns (voltages, loss) with loss = sum over lines of r |I|^2, all in p.u.
    """
    s = np.asarray(injections, dtype=complex)
    n = net.n_nodes
    z = net.r + 1j * net.x
    v = np.full(n, net.slack_voltage, dtype=complex)
    # children before parents for the backward pass
    order = list(net.order)
    for _ in range(max_iter):
        i_node = np.conj(s / v)  # injected current
        i_node[0] = 0.0
        i_line = np.zeros(net.n_lines, dtype=complex)
        acc = -i_node.copy()  # current drawn by each node's subtree
        for node in reversed(order):
            if node == 0:
                continue
            l = net.line_to_child[node]
            i_line[l] = acc[node]
            acc[net.parent[node]] += acc[node]
        v_new = v.copy()
        for node in order:
            if node == 0:
                continue
            l = net.line_to_child[node]
            v_new[node] = v_new[net.parent[node]] - z[l] * i_line[l]
        if np.max(np.abs(v_new - v)) < tol:
            v = v_new
            break
        v = v_new
    else:
        raise RuntimeError("sweep did not converge")
    loss = float(np.sum(net.r * np.abs(i_line) ** 2))
    return v, loss


def two_node_closed_form(r, x, p_load, q_load, v0=1.0):
    """|v1| and loss for a slack feeding one load through z = r + jx.

    |v1|^4 + (2(rP + xQ) - v0^2)|v1|^2 + |z|^2 |S|^2 = 0, high-voltage root.
    """
    b = v0 ** 2 - 2.0 * (r * p_load + x * q_load)
    s2 = p_load ** 2 + q_load ** 2
    z2 = r ** 2 + x ** 2
    v1sq = 0.5 * (b + np.sqrt(b ** 2 - 4.0 * z2 * s2))
    return np.sqrt(v1sq), r * s2 / v1sq


def two_quadratic_equilibrium(seller_alpha, seller_beta, buyer_alpha, buyer_beta):
    """Volume and price where 2 a_s p + b_s = b_b - 2 a_b p."""
    p = (buyer_beta - seller_beta) / (2.0 * (seller_alpha + buyer_alpha))
    return p, 2.0 * seller_alpha * p + seller_beta
