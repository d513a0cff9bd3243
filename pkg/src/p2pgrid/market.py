"""Peers, their welfare, and the two network-cost allocation rules.

Volumes are in MWh over a one-hour interval (numerically equal to MW). A
seller's volume enters the grid as a positive active injection at its node,
a buyer's as a negative one.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import AllocationError, DomainError, NetworkFileError
from .powerflow import CostSchedule, GridState, HOURS, activation, violation_direction

DOMAIN_TOL = 1e-9


@dataclass(frozen=True)
class SellingPeer:
    peer_id: str
    node: int
    alpha: float
    beta: float
    gamma: float = 0.0
    p_min: float = 0.0
    p_max: float = np.inf

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"seller {self.peer_id}: alpha must be > 0 for a strictly convex cost")
        if self.p_min < 0 or self.p_min > self.p_max:
            raise ValueError(f"seller {self.peer_id}: need 0 <= p_min <= p_max")

    def cost(self, p):
        return seller_cost(self, p)

    def marginal_cost(self, p):
        return 2.0 * self.alpha * p + self.beta


@dataclass(frozen=True)
class BuyingPeer:
    peer_id: str
    node: int
    alpha: float
    beta: float
    p_min: float = 0.0
    p_max: float = np.inf

    def __post_init__(self):
        if not self.alpha > 0 or not self.beta > 0:
            raise ValueError(f"buyer {self.peer_id}: alpha and beta must be > 0")
        if self.p_min < 0 or self.p_min > self.p_max:
            raise ValueError(f"buyer {self.peer_id}: need 0 <= p_min <= p_max")

    @property
    def knee(self):
        """Volume beyond which utility saturates at beta^2 / (4 alpha)."""
        return self.beta / (2.0 * self.alpha)

    def utility(self, p):
        return buyer_utility(self, p)

    def marginal_utility(self, p):
        return np.maximum(self.beta - 2.0 * self.alpha * np.asarray(p, dtype=float), 0.0)


def _check_domain(peer, p):
    p = np.asarray(p, dtype=float)
    tol = DOMAIN_TOL * max(1.0, peer.p_max if np.isfinite(peer.p_max) else 1.0)
    if np.any(p < peer.p_min - tol) or np.any(p > peer.p_max + tol):
        raise DomainError(f"peer {peer.peer_id}: volume {p} outside [{peer.p_min}, {peer.p_max}]")
    return p


def seller_cost(peer: SellingPeer, p):
    """alpha p^2 + beta p + gamma, for p within the seller's bounds."""
    p = _check_domain(peer, p)
    return peer.alpha * p ** 2 + peer.beta * p + peer.gamma


def _utility(alpha, beta, p):
    knee = beta / (2.0 * alpha)
    return np.where(p <= knee, beta * p - alpha * p ** 2, beta ** 2 / (4.0 * alpha))


def buyer_utility(peer: BuyingPeer, p):
    """Quadratic up to the knee beta/(2 alpha), flat at beta^2/(4 alpha) beyond it."""
    p = _check_domain(peer, p)
    u = _utility(peer.alpha, peer.beta, p)
    return float(u) if u.ndim == 0 else u


class PeerSet:
    """Sellers followed by buyers; peer ``k`` indexes that concatenation."""

    def __init__(self, sellers, buyers):
        self.sellers = tuple(sellers)
        self.buyers = tuple(buyers)
        ids = [p.peer_id for p in self.peers]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate peer ids")
        if any(p.node < 1 for p in self.peers):
            raise ValueError("peers cannot sit at the slack node")

    @property
    def peers(self):
        return self.sellers + self.buyers

    @property
    def n_sellers(self):
        return len(self.sellers)

    @property
    def n_buyers(self):
        return len(self.buyers)

    def __len__(self):
        return len(self.sellers) + len(self.buyers)

    @property
    def ids(self):
        return [p.peer_id for p in self.peers]

    @property
    def nodes(self):
        return np.array([p.node for p in self.peers], dtype=int)

    @property
    def sign(self):
        """+1 for sellers (injection), -1 for buyers (withdrawal)."""
        return np.concatenate([np.ones(self.n_sellers), -np.ones(self.n_buyers)])

    @property
    def is_seller(self):
        return np.arange(len(self)) < self.n_sellers

    def bounds(self):
        lo = np.array([p.p_min for p in self.peers], dtype=float)
        hi = np.array([p.p_max for p in self.peers], dtype=float)
        return lo, hi

    def check_nodes(self, n_nodes):
        bad = [p.peer_id for p in self.peers if not 1 <= p.node < n_nodes]
        if bad:
            raise ValueError(f"peers {bad} sit at nodes outside the network")

    def injections(self, volumes, n_nodes, base_power):
        """Per-node active injection increment (p.u.) produced by peer volumes (MWh)."""
        dp = np.zeros(n_nodes)
        np.add.at(dp, self.nodes, self.sign * np.asarray(volumes, dtype=float) / (base_power * HOURS))
        return dp


def load_peers(path) -> PeerSet:
    """Read a peer roster: ``peer_id, role, node, alpha, beta, gamma, p_min, p_max``.

    ``role`` is ``sell`` or ``buy``; ``gamma`` is ignored for buyers. Lines
    starting with ``#`` are comments.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise NetworkFileError(str(exc), path) from exc
    sellers, buyers = [], []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.split("#", 1)[0].strip()
        if not stripped:
            continue
        row = [c.strip() for c in next(csv.reader([stripped]))]
        if row[0].lower() == "peer_id":
            continue
        if len(row) != 8:
            raise NetworkFileError("roster rows need 8 fields", path, lineno)
        pid, role = row[0], row[1].lower()
        try:
            node = int(row[2])
            alpha, beta = float(row[3]), float(row[4])
            gamma = float(row[5] or 0.0)
            lo = float(row[6] or 0.0)
            hi = float(row[7]) if row[7] else np.inf
        except ValueError as exc:
            raise NetworkFileError(f"bad number: {exc}", path, lineno) from None
        try:
            if role == "sell":
                sellers.append(SellingPeer(pid, node, alpha, beta, gamma, lo, hi))
            elif role == "buy":
                buyers.append(BuyingPeer(pid, node, alpha, beta, lo, hi))
            else:
                raise NetworkFileError(f"role must be 'sell' or 'buy', got {role!r}", path, lineno)
        except ValueError as exc:
            raise NetworkFileError(str(exc), path, lineno) from None
    if not sellers or not buyers:
        raise NetworkFileError("roster needs at least one seller and one buyer", path)
    return PeerSet(sellers, buyers)


@dataclass(frozen=True, eq=False)
class TradeState:
    """Bilateral volumes, per-peer volumes and seller prices.

    ``bilateral[i, j]`` is what buyer j buys from seller i. ``net`` holds each
    peer's own volume decision (sellers first). When the market has cleared
    these agree with the bilateral row/column sums; :attr:`imbalance` shows
    any remaining seller-side gap.
    """

    bilateral: np.ndarray
    net: np.ndarray
    prices: np.ndarray

    def __post_init__(self):
        b = np.array(self.bilateral, dtype=float)
        if np.any(b < 0):
            raise ValueError("bilateral volumes must be non-negative")
        object.__setattr__(self, "bilateral", b)
        object.__setattr__(self, "net", np.array(self.net, dtype=float))
        object.__setattr__(self, "prices", np.array(self.prices, dtype=float))
        S, B = b.shape
        if self.net.shape != (S + B,) or self.prices.shape != (S,):
            raise ValueError("inconsistent trade-state shapes")

    @classmethod
    def from_bilateral(cls, bilateral, prices):
        """Trade state whose per-peer volumes are exactly the bilateral sums."""
        b = np.asarray(bilateral, dtype=float)
        return cls(b, np.concatenate([b.sum(axis=1), b.sum(axis=0)]), prices)

    @property
    def n_sellers(self):
        return self.bilateral.shape[0]

    @property
    def imbalance(self):
        """Seller volume minus what buyers take from that seller."""
        return self.net[:self.n_sellers] - self.bilateral.sum(axis=1)

    @property
    def total_volume(self):
        """Total energy sold (MWh)."""
        return float(self.net[:self.n_sellers].sum())

    def check(self, peers: PeerSet, atol=1e-9):
        """Raise ``ValueError`` unless the state is consistent within ``atol``."""
        S = self.n_sellers
        if not np.allclose(self.net[S:], self.bilateral.sum(axis=0), atol=atol, rtol=0):
            raise ValueError("buyer volumes disagree with bilateral column sums")
        if np.max(np.abs(self.imbalance), initial=0.0) > atol:
            raise ValueError("seller volumes disagree with bilateral row sums")
        lo, hi = peers.bounds()
        if np.any(self.net < lo - atol) or np.any(self.net > hi + atol):
            raise ValueError("volumes outside peer bounds")


def peer_market_welfare(trade: TradeState, peers: PeerSet) -> np.ndarray:
    """Per-peer market welfare u_k (before network charges).

    Sellers: price times volume minus cost. Buyers: utility of every bilateral
    purchase minus what they pay for it.
    """
    S = peers.n_sellers
    u = np.empty(len(peers))
    for i, s in enumerate(peers.sellers):
        u[i] = trade.prices[i] * trade.net[i] - seller_cost(s, trade.net[i])
    for j, b in enumerate(peers.buyers):
        _check_domain(b, trade.net[S + j])
        x = trade.bilateral[:, j]
        u[S + j] = float(np.sum(_utility(b.alpha, b.beta, x))) - float(trade.prices @ x)
    return u


def gross_surplus(bilateral, peers: PeerSet, seller_volumes=None):
    """Sum of buyer utilities minus seller costs; prices cancel out.

    Seller volumes default to the bilateral row sums.
    """
    b = np.asarray(bilateral, dtype=float)
    sv = b.sum(axis=1) if seller_volumes is None else np.asarray(seller_volumes)
    util = sum(float(np.sum(_utility(p.alpha, p.beta, b[:, j]))) for j, p in enumerate(peers.buyers))
    cost = sum(p.alpha * v ** 2 + p.beta * v + p.gamma for p, v in zip(peers.sellers, sv))
    return util - cost


# --- network cost ----------------------------------------------------------

@dataclass(frozen=True)
class NetworkCost:
    """Dollar network cost of moving from the no-trade state to a trade state."""

    voltage: float
    congestion: float
    loss: float

    @property
    def total(self):
        return self.voltage + self.congestion + self.loss


def exact_network_cost(net, base_state: GridState, state: GridState, sched: CostSchedule):
    """Network cost from two nonlinear power-flow solutions.

    Voltage and congestion terms count, for each node/line outside its band
    at ``state``, the magnitude change since ``base_state`` in the direction
    of the violation; the loss term is the loss increment.
    """
    vdir, sdir = violation_direction(state, net)
    dv = (state.vmag - base_state.vmag) * vdir
    ds = (state.flow_mag - base_state.flow_mag) * sdir * net.base_power
    dloss = (state.loss - base_state.loss) * net.base_power * HOURS
    return NetworkCost(voltage=sched.c_voltage * float(dv.sum()),
                       congestion=sched.c_congestion * float(ds.sum()),
                       loss=sched.c_loss * dloss)


def allocate_universal(volumes, total_cost) -> np.ndarray:
    """Charge every peer the same rate: total_cost * p_k / sum(p).

    A negative total is not passed on (the uniform policy never credits), and
    zero total volume means zero charges.
    """
    volumes = np.asarray(volumes, dtype=float)
    if isinstance(total_cost, NetworkCost):
        total_cost = total_cost.total
    total_volume = volumes.sum()
    if total_volume <= 0:
        return np.zeros_like(volumes)
    return max(float(total_cost), 0.0) * volumes / total_volume


def universal_rate(volumes, total_cost):
    """Uniform $/MWh rate implied by :func:`allocate_universal`."""
    total_volume = float(np.sum(volumes))
    if isinstance(total_cost, NetworkCost):
        total_cost = total_cost.total
    return max(float(total_cost), 0.0) / total_volume if total_volume > 0 else 0.0


@dataclass(frozen=True)
class CausalRates:
    """Per-peer $/MWh charges: voltage, congestion and loss components."""

    voltage: np.ndarray
    congestion: np.ndarray
    loss: np.ndarray

    @property
    def total(self):
        return self.voltage + self.congestion + self.loss


def loss_rates(peers: PeerSet, table, sched: CostSchedule):
    """$/MWh loss charge of each peer: 2 c_o psi_k, signed by trade direction."""
    cols = table.columns(peers.nodes)
    return 2.0 * sched.c_loss * table.psi[cols] * peers.sign


def violation_rates(peers: PeerSet, table, net, v_active, s_active, vdir, sdir):
    """$/MWh voltage and congestion charge increments at the active limits.

    ``v_active``/``s_active`` are the unit costs from
    :func:`p2pgrid.powerflow.activation`; ``vdir``/``sdir`` the violation
    directions. A peer is charged when its trade pushes a violated quantity
    further out of band and credited when it pushes it back.
    """
    cols = table.columns(peers.nodes)
    wv = np.asarray(v_active) * np.asarray(vdir)
    ws = np.asarray(s_active) * np.asarray(sdir)
    on = np.flatnonzero(ws != 0)
    chi = table.chi[on][:, cols]
    if np.isnan(chi).any():
        bad = on[np.isnan(chi).any(axis=1)].tolist()
        raise AllocationError(f"flow sensitivity undefined on violated line(s) {bad}")
    volt = (wv @ table.phi[:, cols]) * peers.sign / (net.base_power * HOURS)
    cong = (ws[on] @ chi) * peers.sign if on.size else np.zeros(len(peers))
    return volt, cong


def allocate_causal(volumes, peers: PeerSet, table, net, sched: CostSchedule, state: GridState):
    """Per-peer (VC, FC, LC) dollar charges linearized at ``table.state``.

    Violations are read from ``state`` (the post-trade operating point).
    Charges can be negative for peers whose trades relieve the network.
    """
    v_act, s_act = activation(state, net, sched)
    vdir, sdir = violation_direction(state, net)
    volt, cong = violation_rates(peers, table, net, v_act, s_act, vdir, sdir)
    p = np.asarray(volumes, dtype=float)
    return volt * p, cong * p, loss_rates(peers, table, sched) * p


def random_peers(net, rng=None, n_sellers=None, n_buyers=None, *, cap=10.0):
    """Random roster on ``net`` whose equilibria are interior for moderate loss prices.

    Sellers and buyers sit at distinct random non-slack nodes when there are
    enough of them (otherwise nodes repeat). Costs and utilities are drawn so
    supply and demand cross well inside ``[0, cap]``.
    """
    rng = np.random.default_rng(rng)
    n = net.n_nodes - 1
    if n < 1:
        raise ValueError("network has no non-slack node")
    if n_sellers is None:
        n_sellers = max(1, min(3, n // 2))
    if n_buyers is None:
        n_buyers = max(1, min(5, n - n_sellers))
    k = n_sellers + n_buyers
    nodes = rng.permutation(np.arange(1, n + 1))[:k] if k <= n else rng.integers(1, n + 1, size=k)
    sellers = [SellingPeer(f"S{i + 1}", int(nodes[i]), float(rng.uniform(1.0, 3.0)),
                           float(rng.uniform(20.0, 35.0)), 0.0, 0.0, cap)
               for i in range(n_sellers)]
    buyers = [BuyingPeer(f"B{j + 1}", int(nodes[n_sellers + j]),
                         float(rng.uniform(4.0, 10.0) * n_sellers), float(rng.uniform(60.0, 80.0)),
                         0.0, cap)
              for j in range(n_buyers)]
    return PeerSet(sellers, buyers)
