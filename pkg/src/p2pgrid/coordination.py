"""Iterative peer negotiation with the grid operator in the loop.

Each round peers best-respond to seller prices and their current network
charges, sellers' prices move with their supply-demand gap, the operator
re-solves the power flow at the new trades and updates the charges:

* ``base``: no network charges;
* ``universal``: one $/MWh rate for everybody, total network cost divided
  by total traded volume;
* ``causal``: per-peer rates from the sensitivity table. The loss rate is
  the linearized marginal loss cost; voltage/congestion rates climb while a
  limit is violated and stay put once it is cleared.

:func:`social_optimum` maximizes the same welfare directly by projected
gradient ascent, which is what the equilibrium claims are checked against.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .exceptions import NegotiationDivergence, OptimizationError
from .grid import RadialNetwork
from .market import (BuyingPeer, CausalRates, PeerSet, SellingPeer, TradeState, exact_network_cost,
                     gross_surplus, loss_rates, peer_market_welfare, universal_rate,
                     violation_rates)
from .powerflow import (HOURS, CostSchedule, GridState, activation, solve_power_flow,
                        violation_direction, injections_with_trades)
from .sensitivity import SensitivityTable, compute_sensitivities

log = logging.getLogger(__name__)

POLICIES = ("base", "universal", "causal")


@dataclass(frozen=True)
class NegotiationConfig:
    """Tuning of the negotiation loop.

    epsilon : price step ($/MWh per MWh of supply-demand gap)
    eta : step factor applied to voltage/congestion rate increments
    ledger_mode : ``"rate"`` keeps $/MWh rates; ``"literal"`` accumulates
        dollar ledgers round after round and divides by the current volume
    cost_model : how the universal policy prices the network, ``"exact"``
        (two power-flow solves) or ``"linear"`` (sensitivity table)
    relinearize : recompute sensitivities at every round's operating point
    """

    epsilon: float = 0.05
    eta: float = 0.5
    tol_p: float = 1e-5
    tol_lambda: float = 1e-5
    max_iter: int = 5000
    initial_price: float | None = None
    ledger_mode: str = "rate"
    cost_model: str = "exact"
    relinearize: bool = False
    flow_form: str = "branch"
    oscillation_window: int = 50
    oscillation_threshold: float = 1e-4
    max_halvings: int = 3
    volume_guard: float = 1e6

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if not 0 < self.eta <= 1:
            raise ValueError("eta must lie in (0, 1]")
        if self.ledger_mode not in ("rate", "literal"):
            raise ValueError("ledger_mode must be 'rate' or 'literal'")
        if self.cost_model not in ("exact", "linear"):
            raise ValueError("cost_model must be 'exact' or 'linear'")


# --- best responses ----------------------------------------------------------

def seller_best_response(peer: SellingPeer, price, rate=0.0):
    """argmax over [p_min, p_max] of price*p - c(p) - rate*p."""
    p = (price - peer.beta - rate) / (2.0 * peer.alpha)
    return float(min(max(p, peer.p_min), peer.p_max))


def _purchases(peer, q, mu):
    # optimal purchase from each seller when the effective unit price is q + mu
    eff = q + mu
    cap = peer.p_max if np.isfinite(peer.p_max) else peer.knee
    return np.where(eff > 0, np.maximum(peer.beta - eff, 0.0) / (2.0 * peer.alpha), cap)


def buyer_best_response(peer: BuyingPeer, prices, rate=0.0):
    """Purchases from each seller maximizing sum_i h(x_i) - (price_i + rate) x_i.

    The total is kept within [p_min, p_max] by shifting every effective price
    by a common multiplier found by bisection.
    """
    q = np.asarray(prices, dtype=float) + rate
    x = _purchases(peer, q, 0.0)
    total = x.sum()
    if peer.p_min - 1e-15 <= total <= peer.p_max + 1e-15:
        return x
    target = peer.p_max if total > peer.p_max else peer.p_min
    if np.all(q > 0) and total > peer.p_max:
        mu = _water_level(peer, q, target)
        if mu is not None:
            return _purchases(peer, q, mu)
    if total > peer.p_max:
        lo, hi = 0.0, max(peer.beta - q.min(), 0.0) + 1.0
    else:
        lo, hi = -(peer.beta + np.abs(q).max() + 1.0), 0.0
        if _purchases(peer, q, lo).sum() < target:
            return _fill(peer, q, lo, target)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if _purchases(peer, q, mid).sum() > target:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-14 * max(1.0, abs(hi)):
            break
    x = _purchases(peer, q, hi)
    return _fill(peer, q, hi, target) if x.sum() < target - 1e-12 else x


def _water_level(peer, q, target):
    # piecewise-linear total purchase: with the m cheapest sellers active,
    # sum_i (beta - q_i - mu) / (2 alpha) = target gives mu in closed form
    qs = np.sort(q)
    acc = np.cumsum(peer.beta - qs)
    for m in range(1, qs.size + 1):
        mu = (acc[m - 1] - 2.0 * peer.alpha * target) / m
        nxt = qs[m] if m < qs.size else np.inf
        if mu >= 0 and peer.beta - qs[m - 1] - mu > 0 and peer.beta - nxt - mu <= 0:
            return mu
    return None


def _fill(peer, q, mu, target):
    # the utility is flat past the knee; top up evenly from the cheapest sellers
    x = _purchases(peer, q, mu)
    gap = target - x.sum()
    if gap > 0:
        cheapest = np.flatnonzero(q == q.min())
        x[cheapest] += gap / cheapest.size
    return x


def best_response(peer, prices, rate=0.0):
    """Volume that maximizes the peer's welfare net of a $/MWh network rate.

    Sellers take their own price (a scalar); buyers take the vector of seller
    prices and the result is their total purchase.
    """
    if isinstance(peer, SellingPeer):
        return seller_best_response(peer, float(np.asarray(prices).ravel()[0]), rate)
    return float(buyer_best_response(peer, np.atleast_1d(prices), rate).sum())


def price_update(prices, demand, supply, epsilon):
    """[lambda + epsilon (demand - supply)]^+ per seller."""
    return np.maximum(np.asarray(prices) + epsilon * (np.asarray(demand) - np.asarray(supply)), 0.0)


def ledger_update(ledger, increment, eta=1.0):
    """[ledger + eta * increment]^+."""
    return np.maximum(np.asarray(ledger) + eta * np.asarray(increment), 0.0)


# --- negotiation -------------------------------------------------------------

@dataclass(frozen=True)
class IterationRecord:
    tau: int
    volumes: np.ndarray
    prices: np.ndarray
    vc: np.ndarray
    fc: np.ndarray
    lc: np.ndarray
    welfare: float
    violations: int
    total_volume: float
    epsilon: float


@dataclass(eq=False)
class NegotiationState:
    """Outcome of :func:`run_negotiation`.

    ``vc``, ``fc`` and ``lc`` are $/MWh rates per peer; the dollar charges are
    ``rate * volume`` (see :attr:`charges`).
    """

    policy: str
    tau: int
    trade: TradeState
    vc: np.ndarray
    fc: np.ndarray
    lc: np.ndarray
    epsilon: float
    step_damping: float
    converged: bool
    grid_state: GridState
    base_state: GridState
    table: SensitivityTable
    history: list = field(default_factory=list)
    vc_ledger: np.ndarray | None = None
    fc_ledger: np.ndarray | None = None
    lc_ledger: np.ndarray | None = None

    @property
    def volumes(self):
        return self.trade.net

    @property
    def rates(self):
        return CausalRates(self.vc, self.fc, self.lc)

    @property
    def charges(self):
        """Dollar (VC, FC, LC) per peer at the final volumes."""
        p = self.trade.net
        return self.vc * p, self.fc * p, self.lc * p

    @property
    def total_volume(self):
        return self.trade.total_volume


def delivered_volumes(bilateral, offers):
    """Per-peer volumes that can actually flow this round.

    Each buyer request ``bilateral[i, j]`` is honored pro rata up to seller
    i's offer, so injections always balance. Once the market clears this is
    just the peers' own volumes.
    """
    b = np.asarray(bilateral, dtype=float)
    req = b.sum(axis=1)
    offers = np.asarray(offers, dtype=float)
    scale = np.ones_like(req)
    short = req > offers
    scale[short] = offers[short] / req[short]
    d = b * scale[:, None]
    return np.concatenate([d.sum(axis=1), d.sum(axis=0)])


def default_initial_price(peers: PeerSet):
    """Single price at which total supply meets total demand, ignoring the network.

    Found by bisection; a good warm start for the per-seller prices.
    """
    S = peers.n_sellers

    def excess(lam):
        prices = np.full(S, lam)
        demand = sum(buyer_best_response(b, prices).sum() for b in peers.buyers)
        supply = sum(seller_best_response(s, lam) for s in peers.sellers)
        return demand - supply

    lo = 0.0
    hi = max(max(b.beta for b in peers.buyers), max(s.marginal_cost(min(s.p_max, 1e6))
                                                    for s in peers.sellers))
    if excess(lo) <= 0:
        return lo
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if excess(mid) > 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _oscillating(y, threshold):
    """True when ``y`` swings back and forth with variance above ``threshold``.

    A monotone drift, however steep, has few sign changes in its increments
    and is not treated as oscillation.
    """
    if np.var(y) <= threshold:
        return False
    d = np.diff(y)
    d = d[np.abs(d) > 1e-12]
    if d.size < 2:
        return False
    flips = np.count_nonzero(np.sign(d[1:]) != np.sign(d[:-1]))
    return flips >= 0.5 * (d.size - 1)


class _Operator:
    """Grid-side bookkeeping: power flow, violation checks and charges."""

    def __init__(self, net, peers, sched, config, table=None):
        self.net, self.peers, self.sched, self.config = net, peers, sched, config
        self.base_state = solve_power_flow(net, injections_with_trades(net))
        self.table = table if table is not None else compute_sensitivities(
            net, self.base_state, config.flow_form)
        self.state = self.base_state

    def solve(self, volumes):
        dp = self.peers.injections(volumes, self.net.n_nodes, self.net.base_power)
        self.state = solve_power_flow(self.net, injections_with_trades(self.net, dp),
                                      v0=self.state.voltages)
        return self.state

    def violation_increments(self, table):
        if self.sched.c_voltage == 0 and self.sched.c_congestion == 0:
            return np.zeros(len(self.peers)), np.zeros(len(self.peers))
        v_act, s_act = activation(self.state, self.net, self.sched)
        vdir, sdir = violation_direction(self.state, self.net)
        return violation_rates(self.peers, table, self.net, v_act, s_act, vdir, sdir)

    def violation_count(self):
        vdir, sdir = violation_direction(self.state, self.net)
        return int(np.count_nonzero(vdir) + np.count_nonzero(sdir))

    def loss_cost(self):
        dloss = (self.state.loss - self.base_state.loss) * self.net.base_power * HOURS
        return self.sched.c_loss * dloss


def run_negotiation(net: RadialNetwork, peers: PeerSet, sched: CostSchedule, policy="causal",
                    config: NegotiationConfig | None = None, table: SensitivityTable | None = None):
    """Iterate best responses, price updates and network charging to a fixed point.

    Stops when no volume moves by more than ``tol_p`` and no price by more
    than ``tol_lambda``; otherwise returns after ``max_iter`` rounds with
    ``converged=False``.

    Raises
    ------
    NegotiationDivergence
        Volumes keep oscillating after ``max_halvings`` step-size halvings,
        or grow past ``volume_guard``.
    """
    if policy not in POLICIES:
        raise ValueError(f"policy must be one of {POLICIES}, got {policy!r}")
    config = config or NegotiationConfig()
    peers.check_nodes(net.n_nodes)
    op = _Operator(net, peers, sched, config, table)
    table = op.table
    K, S = len(peers), peers.n_sellers

    prices = np.full(S, config.initial_price if config.initial_price is not None
                     else default_initial_price(peers), dtype=float)
    volumes = np.zeros(K)
    bilateral = np.zeros((S, peers.n_buyers))
    vc = np.zeros(K)
    fc = np.zeros(K)
    lc = loss_rates(peers, table, sched) if policy == "causal" else np.zeros(K)
    ledgers = [np.zeros(K), np.zeros(K), np.zeros(K)]
    epsilon = config.epsilon
    halvings = 0
    history = []
    converged = False

    tau = 0
    while tau < config.max_iter:
        tau += 1
        rate = vc + fc + lc
        new_volumes = np.empty(K)
        for i, s in enumerate(peers.sellers):
            new_volumes[i] = seller_best_response(s, prices[i], rate[i])
        for j, b in enumerate(peers.buyers):
            bilateral[:, j] = buyer_best_response(b, prices, rate[S + j])
            new_volumes[S + j] = bilateral[:, j].sum()
        if not np.all(np.isfinite(new_volumes)) or np.abs(new_volumes).max() > config.volume_guard:
            raise NegotiationDivergence("trading volumes left the guard band", history)
        used_prices = prices
        new_prices = price_update(prices, bilateral.sum(axis=1), new_volumes[:S], epsilon)

        phys = delivered_volumes(bilateral, new_volumes[:S])
        op.solve(phys)
        if policy == "causal":
            tbl = compute_sensitivities(net, op.state, config.flow_form) \
                if config.relinearize else table
            dvc, dfc = op.violation_increments(tbl)
            if config.relinearize:
                lc = loss_rates(peers, tbl, sched)
            if config.ledger_mode == "rate":
                vc = ledger_update(vc, dvc, config.eta)
                fc = ledger_update(fc, dfc, config.eta)
            else:
                ledgers[0] = ledger_update(ledgers[0], dvc * new_volumes)
                ledgers[1] = ledger_update(ledgers[1], dfc * new_volumes)
                ledgers[2] = ledger_update(ledgers[2], loss_rates(peers, tbl, sched) * new_volumes)
                denom = np.maximum(new_volumes, 1e-9)
                vc, fc, lc = (ledgers[0] / denom, ledgers[1] / denom, ledgers[2] / denom)
        elif policy == "universal":
            vc, fc, lc = _universal_update(op, table, phys, vc, float(lc[0]) if K else 0.0, config)

        welfare = _realized_welfare(peers, bilateral, new_volumes, used_prices, op)
        history.append(IterationRecord(tau=tau, volumes=new_volumes.copy(), prices=new_prices.copy(),
                                       vc=vc.copy(), fc=fc.copy(), lc=lc.copy(), welfare=welfare,
                                       violations=op.violation_count(),
                                       total_volume=float(new_volumes[:S].sum()), epsilon=epsilon))

        dp = np.max(np.abs(new_volumes - volumes))
        dl = np.max(np.abs(new_prices - prices)) if S else 0.0
        volumes, prices = new_volumes, new_prices
        # cleared: no seller gap, except an excess supply at a zero price
        gap = bilateral.sum(axis=1) - new_volumes[:S]
        cleared = np.all((np.abs(gap) <= config.tol_p) | ((gap < 0) & (new_prices == 0)))
        if tau > 1 and dp <= config.tol_p and dl <= config.tol_lambda and cleared:
            converged = True
            break

        w = config.oscillation_window
        if w and tau % w == 0 and tau >= w:
            y = np.array([h.total_volume for h in history[-w:]])
            if _oscillating(y, config.oscillation_threshold):
                if halvings >= config.max_halvings:
                    raise NegotiationDivergence(
                        f"{policy} negotiation still oscillating after {halvings} step halvings "
                        f"(volume variance {np.var(y):.3e})", history)
                halvings += 1
                epsilon *= 0.5
                log.info("oscillation detected at round %d; epsilon -> %g", tau, epsilon)

    if not converged:
        log.warning("%s negotiation hit max_iter=%d without converging", policy, config.max_iter)
    trade = TradeState(bilateral.copy(), volumes.copy(), prices.copy())
    return NegotiationState(policy=policy, tau=tau, trade=trade, vc=vc, fc=fc, lc=lc,
                            epsilon=epsilon, step_damping=config.eta, converged=converged,
                            grid_state=op.state, base_state=op.base_state, table=table,
                            history=history,
                            vc_ledger=ledgers[0] if config.ledger_mode == "literal" else None,
                            fc_ledger=ledgers[1] if config.ledger_mode == "literal" else None,
                            lc_ledger=ledgers[2] if config.ledger_mode == "literal" else None)


def _universal_update(op, table, volumes, vc, lc_prev, config):
    K = len(volumes)
    total = volumes.sum()
    if config.cost_model == "exact":
        cost = exact_network_cost(op.net, op.base_state, op.state, op.sched)
        loss_total, viol_total = cost.loss, cost.voltage + cost.congestion
    else:
        loss_total = float(loss_rates(op.peers, table, op.sched) @ volumes)
        dvc, dfc = op.violation_increments(table)
        viol_total = float((dvc + dfc) @ volumes)
    # move the loss rate part of the way to the current average, like the ledgers
    target = universal_rate(volumes, loss_total)
    lc = np.full(K, (1.0 - config.eta) * lc_prev + config.eta * target)
    # violation rate climbs while violations persist, like the causal ledgers
    step = viol_total / total if total > 0 else 0.0
    uniform = ledger_update(vc[:1] if K else vc, step, config.eta)
    return np.full(K, float(uniform[0]) if K else 0.0), np.zeros(K), lc


def _realized_welfare(peers, bilateral, volumes, prices, op):
    # sum of peer welfare: payments cancel except on unmatched seller volume
    S = peers.n_sellers
    unmatched = volumes[:S] - bilateral.sum(axis=1)
    return gross_surplus(bilateral, peers, volumes[:S]) + float(prices @ unmatched) - op.loss_cost()


def realized_welfare(state: NegotiationState, peers: PeerSet, sched: CostSchedule, net: RadialNetwork):
    """Sum of peer market welfare minus the exact incremental loss cost."""
    dloss = (state.grid_state.loss - state.base_state.loss) * net.base_power * HOURS
    return float(peer_market_welfare(state.trade, peers).sum()) - sched.c_loss * dloss


# --- social optimum ----------------------------------------------------------

@dataclass(frozen=True)
class SocialOptimum:
    bilateral: np.ndarray
    volumes: np.ndarray
    welfare: float
    iterations: int
    gradient_norms: np.ndarray


def linear_rates(peers: PeerSet, table: SensitivityTable, sched: CostSchedule):
    """$/MWh marginal network cost of each peer, linearized at ``table.state``."""
    return loss_rates(peers, table, sched)


def linear_welfare(bilateral, peers: PeerSet, rates, seller_volumes=None):
    """Gross surplus minus the linearized network charges sum_k rate_k p_k."""
    b = np.asarray(bilateral, dtype=float)
    sv = b.sum(axis=1) if seller_volumes is None else np.asarray(seller_volumes, dtype=float)
    volumes = np.concatenate([sv, b.sum(axis=0)])
    return gross_surplus(b, peers, sv) - float(np.asarray(rates) @ volumes)


def _project_sum_box(X, lo, hi):
    """Row-wise Euclidean projection onto {x >= 0, lo <= sum(x) <= hi}."""
    out = np.maximum(X, 0.0)
    s = out.sum(axis=1)
    for i in np.flatnonzero((s > hi) | (s < lo)):
        out[i] = _project_simplex(X[i], hi[i] if s[i] > hi[i] else lo[i])
    return out


def _project_simplex(v, total):
    if total <= 0:
        return np.zeros_like(v)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - total
    idx = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / idx > 0)[0][-1]
    theta = css[rho] / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


def project_feasible(X, seller_bounds, buyer_bounds, tol=1e-13, max_iter=20000):
    """Projection onto bilateral matrices with bounded row and column sums (Dykstra)."""
    (slo, shi), (blo, bhi) = seller_bounds, buyer_bounds
    x = np.array(X, dtype=float)
    p = np.zeros_like(x)
    q = np.zeros_like(x)
    for _ in range(max_iter):
        y = _project_sum_box(x + p, slo, shi)
        p = x + p - y
        x_new = _project_sum_box((y + q).T, blo, bhi).T
        q = y + q - x_new
        done = np.max(np.abs(x_new - x)) <= tol and np.max(np.abs(x_new - y)) <= tol
        x = x_new
        if done:
            break
    return x


def _welfare_gradient(X, peers, rates):
    S = peers.n_sellers
    sa = np.array([s.alpha for s in peers.sellers])
    sb = np.array([s.beta for s in peers.sellers])
    ba = np.array([b.alpha for b in peers.buyers])
    bb = np.array([b.beta for b in peers.buyers])
    mu = np.maximum(bb[None, :] - 2.0 * ba[None, :] * X, 0.0)
    mc = 2.0 * sa * X.sum(axis=1) + sb
    return mu - mc[:, None] - rates[:S][:, None] - rates[S:][None, :]


def social_optimum(net: RadialNetwork, peers: PeerSet, sched: CostSchedule,
                   table: SensitivityTable | None = None, rates=None, tol=1e-6, max_iter=200000,
                   x0=None):
    """Welfare-maximizing bilateral trades under linearized network costs.

    Accelerated projected-gradient ascent on gross surplus minus
    ``sum_k rates_k p_k``; the rates default to the marginal loss costs at
    the no-trade state. Stops when the projected-gradient norm drops to
    ``tol``.
    """
    if rates is None:
        if table is None:
            table = compute_sensitivities(net)
        rates = linear_rates(peers, table, sched)
    rates = np.asarray(rates, dtype=float)
    S, B = peers.n_sellers, peers.n_buyers
    lo, hi = peers.bounds()
    sb = (lo[:S], hi[:S])
    bb = (lo[S:], hi[S:])
    L = 2.0 * max(b.alpha for b in peers.buyers) + 2.0 * B * max(s.alpha for s in peers.sellers)
    step = 1.0 / L

    x = project_feasible(np.zeros((S, B)) if x0 is None else x0, sb, bb)
    y = x.copy()
    t = 1.0
    norms = []
    for it in range(1, max_iter + 1):
        g = _welfare_gradient(x, peers, rates)
        gmap = (project_feasible(x + step * g, sb, bb) - x) / step
        norms.append(float(np.linalg.norm(gmap)))
        if norms[-1] <= tol:
            break
        gy = _welfare_gradient(y, peers, rates)
        x_new = project_feasible(y + step * gy, sb, bb)
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        if np.sum((y - x_new) * (x_new - x)) > 0:  # adaptive restart
            t_new = 1.0
            y = x_new.copy()
        else:
            y = x_new + ((t - 1.0) / t_new) * (x_new - x)
        x, t = x_new, t_new
    else:
        raise OptimizationError("social optimum did not reach stationarity", norms)
    volumes = np.concatenate([x.sum(axis=1), x.sum(axis=0)])
    return SocialOptimum(bilateral=x, volumes=volumes, welfare=linear_welfare(x, peers, rates),
                         iterations=it, gradient_norms=np.array(norms))


# --- equilibrium claims ------------------------------------------------------

@dataclass(frozen=True)
class PropositionReport:
    welfare_optimum: float
    welfare_universal: float
    welfare_causal: float
    universal_bounded: bool
    causal_gap: float
    universal_gap: float
    universal_residual: np.ndarray
    causal_residual: float
    colocation_gap: float | None
    converged: bool

    @property
    def max_universal_residual(self):
        return float(np.max(np.abs(self.universal_residual))) if self.universal_residual.size else 0.0

    def lines(self):
        out = [
            f"W_opt={self.welfare_optimum:.6f}  W_universal={self.welfare_universal:.6f}  "
            f"W_causal={self.welfare_causal:.6f}",
            f"universal <= optimum: {self.universal_bounded}  (relative gap {self.universal_gap:.3e})",
            f"causal vs optimum relative gap: {self.causal_gap:.3e}",
            f"universal first-order residual (marginal - average), max |.|: "
            f"{self.max_universal_residual:.4e} $/MWh",
            f"causal first-order residual, max over interior peers: {self.causal_residual:.3e} $/MWh",
        ]
        if self.colocation_gap is not None:
            out.append(f"co-location universal relative gap: {self.colocation_gap:.3e}")
        return out


def first_order_residual(state: NegotiationState, peers: PeerSet, rates, atol=1e-9):
    """Largest |marginal welfare - marginal network charge| over interior trades.

    Sellers: price - marginal cost - rate. Buyers, per purchase with positive
    volume: marginal utility - seller price - rate.
    """
    S = peers.n_sellers
    lo, hi = peers.bounds()
    p = state.trade.net
    lam = state.trade.prices
    res = []
    for i, s in enumerate(peers.sellers):
        if lo[i] + atol < p[i] < hi[i] - atol:
            res.append(lam[i] - s.marginal_cost(p[i]) - rates[i])
    for j, b in enumerate(peers.buyers):
        k = S + j
        if lo[k] + atol < p[k] < hi[k] - atol:
            x = state.trade.bilateral[:, j]
            for i in np.flatnonzero(x > atol):
                res.append(float(b.marginal_utility(x[i])) - lam[i] - rates[k])
    return float(np.max(np.abs(res))) if res else 0.0


def _bound_slack(bilateral, peers):
    # welfare a trade matrix can gain by overshooting peer bounds (by up to tol_p)
    lo, hi = peers.bounds()
    sums = np.concatenate([bilateral.sum(axis=1), bilateral.sum(axis=0)])
    excess = np.sum(np.maximum(sums - hi, 0.0) + np.maximum(lo - sums, 0.0))
    top = max(max(b.beta for b in peers.buyers), 1.0)
    return top * excess


def verify_propositions(universal: NegotiationState, causal: NegotiationState,
                        optimum: SocialOptimum, peers: PeerSet, rates, colocation_gap=None):
    """Compare both policies' equilibria with the social optimum.

    Everything is evaluated with the same linearized network costs ``rates``.
    ``universal_residual`` is, per peer, the marginal network charge minus the
    uniform average rate; it vanishes only when the two coincide.
    """
    w_opt = optimum.welfare
    # evaluated at the cleared bilateral trades, a feasible point of the optimum
    w_u = linear_welfare(universal.trade.bilateral, peers, rates)
    w_c = linear_welfare(causal.trade.bilateral, peers, rates)
    scale = max(abs(w_opt), 1e-12)
    avg = universal.lc + universal.vc + universal.fc
    return PropositionReport(
        welfare_optimum=w_opt, welfare_universal=w_u, welfare_causal=w_c,
        universal_bounded=bool(w_u <= w_opt + _bound_slack(universal.trade.bilateral, peers)
                               + 1e-9 * scale),
        causal_gap=abs(w_c - w_opt) / scale, universal_gap=(w_opt - w_u) / scale,
        universal_residual=np.asarray(rates) - avg,
        causal_residual=first_order_residual(causal, peers, rates),
        colocation_gap=colocation_gap,
        converged=bool(universal.converged and causal.converged))


def check_propositions(net, peers, sched, config: NegotiationConfig | None = None,
                       colocation=True):
    """Run universal and causal negotiations plus the optimum with linearized loss costs."""
    config = replace(config or NegotiationConfig(), cost_model="linear")
    table = compute_sensitivities(net)
    rates = linear_rates(peers, table, sched)
    uni = run_negotiation(net, peers, sched, "universal", config, table)
    cau = run_negotiation(net, peers, sched, "causal", config, table)
    opt = social_optimum(net, peers, sched, rates=rates)
    gap = colocation_gap(config) if colocation else None
    return verify_propositions(uni, cau, opt, peers, rates, gap)


def colocation_instance():
    """Three-node feeder with every seller at node 1 and every buyer at node 2."""
    net = RadialNetwork(p_load=[0.0, 0.02, 0.03], q_load=[0.0, 0.01, 0.015],
                        v_min=[0.9] * 3, v_max=[1.1] * 3, from_node=[0, 1], to_node=[1, 2],
                        r=[0.01, 0.02], x=[0.01, 0.015], s_max=[np.inf] * 2, s_min=[0.0] * 2,
                        name="colocation")
    sellers = [SellingPeer("s1", 1, 4.0, 20.0, 0.0, 0.0, 10.0),
               SellingPeer("s2", 1, 6.0, 25.0, 0.0, 0.0, 10.0)]
    buyers = [BuyingPeer("b1", 2, 8.0, 80.0, 0.0, 10.0),
              BuyingPeer("b2", 2, 10.0, 90.0, 0.0, 10.0),
              BuyingPeer("b3", 2, 12.0, 70.0, 0.0, 10.0)]
    return net, PeerSet(sellers, buyers), CostSchedule(c_loss=300.0)


def colocation_gap(config: NegotiationConfig | None = None):
    """Relative welfare gap of the universal policy on :func:`colocation_instance`."""
    config = replace(config or NegotiationConfig(), cost_model="linear")
    net, peers, sched = colocation_instance()
    table = compute_sensitivities(net)
    rates = linear_rates(peers, table, sched)
    uni = run_negotiation(net, peers, sched, "universal", config, table)
    opt = social_optimum(net, peers, sched, rates=rates)
    w_u = linear_welfare(uni.trade.bilateral, peers, rates)
    return (opt.welfare - w_u) / max(abs(opt.welfare), 1e-12)


def random_instance(rng=None, n_range=(4, 15), max_loss_rate=15.0):
    """Random feeder, roster and loss price for equilibrium checks.

    The loss price is scaled so the largest peer loss charge is
    ``max_loss_rate`` $/MWh, which keeps equilibria interior while making
    the network matter.
    """
    from .grid import random_radial_network
    from .market import random_peers
    rng = np.random.default_rng(rng)
    n = int(rng.integers(n_range[0], n_range[1] + 1))
    net = random_radial_network(n, rng)
    peers = random_peers(net, rng)
    table = compute_sensitivities(net)
    psi = np.abs(table.psi[table.columns(peers.nodes)]).max()
    sched = CostSchedule(c_loss=max_loss_rate / (2.0 * psi) if psi > 0 else 0.0)
    return net, peers, sched, table
