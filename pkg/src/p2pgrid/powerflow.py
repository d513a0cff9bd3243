"""AC power flow on a radial feeder: Newton-Raphson in rectangular coordinates.

The solver works on the conjugated balance equation

    conj(s_n) = conj(v_n) * sum_m Y[n, m] v_m,   n = 1..N

with the slack voltage fixed. Its real Jacobian with respect to
(Re v_1..N, Im v_1..N) is the same matrix that maps active-injection
perturbations to voltage perturbations, so :func:`rectangular_jacobian`
is shared with :mod:`p2pgrid.sensitivity`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import NumericalError, PowerFlowDivergence
from .grid import RadialNetwork, base_injection

TOL = 1e-10
MAX_ITER = 50
HOURS = 1.0  # trading interval


@dataclass(frozen=True, eq=False)
class GridState:
    """Solved operating point.

    ``injections[0]`` is the slack injection that balances the feeder;
    ``line_flows`` are sending-end flows (parent end) in p.u.
    """

    voltages: np.ndarray
    injections: np.ndarray
    line_flows: np.ndarray
    loss: float
    converged: bool
    iterations: int
    mismatch: float

    @property
    def vmag(self):
        return np.abs(self.voltages)

    @property
    def flow_mag(self):
        return np.abs(self.line_flows)


@dataclass(frozen=True)
class CostSchedule:
    """Unit network costs.

    c_loss : $/MWh of incremental system loss
    c_voltage : $ per p.u. of voltage-magnitude change at a violated node (per hour)
    c_congestion : $ per MVA of flow-magnitude change on a violated line (per hour)
    """

    c_loss: float = 0.0
    c_voltage: float = 0.0
    c_congestion: float = 0.0

    def __post_init__(self):
        if min(self.c_loss, self.c_voltage, self.c_congestion) < 0:
            raise ValueError("unit network costs must be non-negative")


def rectangular_jacobian(Y, v):
    """Real 2N x 2N Jacobian of conj(v_n) (Y v)_n, n >= 1, w.r.t. (Re v, Im v).

    Rows are [real parts; imaginary parts], columns [d Re v_1..N, d Im v_1..N].
    """
    current = Y @ v
    vc = np.conj(v[1:])
    Yr = Y[1:, 1:]
    d_re = vc[:, None] * Yr + np.diag(current[1:])
    d_im = 1j * (vc[:, None] * Yr) - 1j * np.diag(current[1:])
    return np.block([[d_re.real, d_im.real], [d_re.imag, d_im.imag]])


def _balance_residual(Y, v, s):
    return np.conj(s[1:]) - np.conj(v[1:]) * (Y[1:] @ v)


def solve_power_flow(net: RadialNetwork, injections, v0=None, tol=TOL, max_iter=MAX_ITER) -> GridState:
    """Solve for nodal voltages given complex injections at non-slack nodes.

    Parameters
    ----------
    injections : (N+1,) complex array
        Net injection (generation minus load) in p.u.; entry 0 is ignored.
    v0 : (N+1,) complex array, optional
        Warm start; flat start (slack voltage everywhere) when omitted.

    Raises
    ------
    PowerFlowDivergence
        No convergence within ``max_iter`` iterations.
    NumericalError
        Singular Jacobian.
    """
    Y = net.admittance
    s = np.asarray(injections, dtype=complex).copy()
    if s.shape != (net.n_nodes,):
        raise ValueError(f"expected {net.n_nodes} injections, got shape {s.shape}")
    s[0] = 0.0
    v = np.full(net.n_nodes, net.slack_voltage, dtype=complex) if v0 is None \
        else np.array(v0, dtype=complex)
    v[0] = net.slack_voltage
    N = net.n_nodes - 1

    mismatch = np.inf
    it = 0
    while True:
        res = _balance_residual(Y, v, s)
        mismatch = float(np.max(np.abs(res))) if N else 0.0
        if mismatch <= tol:
            break
        if it >= max_iter or not np.isfinite(mismatch):
            raise PowerFlowDivergence("power flow did not converge", mismatch, it)
        J = rectangular_jacobian(Y, v)
        try:
            dx = np.linalg.solve(J, np.concatenate([res.real, res.imag]))
        except np.linalg.LinAlgError:
            raise NumericalError("singular power-flow Jacobian", np.linalg.cond(J)) from None
        v[1:] += dx[:N] + 1j * dx[N:]
        it += 1

    s_all = s.copy()
    s_all[0] = v[0] * np.conj(Y[0] @ v)
    flows = branch_flows(net, v)
    return GridState(voltages=_ro(v), injections=_ro(s_all), line_flows=_ro(flows),
                     loss=float(network_loss(net, v)), converged=True, iterations=it,
                     mismatch=mismatch)


def _ro(a):
    a.setflags(write=False)
    return a


def injections_with_trades(net: RadialNetwork, delta_p=None):
    """Base-case injections plus an active-power increment per node (p.u.)."""
    s = base_injection(net).s.copy()
    if delta_p is not None:
        s = s + np.asarray(delta_p, dtype=float)
        s[0] = 0.0
    return s


def solve_with_trades(net, delta_p=None, **kwargs) -> GridState:
    return solve_power_flow(net, injections_with_trades(net, delta_p), **kwargs)


def branch_flows(net: RadialNetwork, v, form="branch"):
    """Sending-end complex flow of every line.

    ``form="branch"`` is the physical flow v_n conj((v_n - v_m) y_l).
    ``form="single_voltage"`` uses the sending voltage only,
    v_n conj(v_n) conj(Y_nm); kept for comparison.
    """
    f, t = net.from_node, net.to_node
    if form == "branch":
        y = net.series_admittance
        return v[f] * np.conj((v[f] - v[t]) * y)
    if form == "single_voltage":
        return v[f] * np.conj(v[f]) * np.conj(net.admittance[f, t])
    raise ValueError(f"unknown flow form {form!r}")


def line_flow(state: GridState, net: RadialNetwork, l, form="branch"):
    """Sending-end flow on line ``l``."""
    if not 0 <= l < net.n_lines:
        raise IndexError(f"line index {l} out of range")
    if form == "branch":
        return complex(state.line_flows[l])
    return complex(branch_flows(net, state.voltages, form)[l])


def network_loss(net, v):
    """Active loss conj(v) G v, summed branch by branch so it is exactly >= 0."""
    dv = v[net.from_node] - v[net.to_node]
    return float(np.sum(net.series_admittance.real * np.abs(dv) ** 2))


def system_loss(state: GridState, net: RadialNetwork) -> float:
    """Total active loss in p.u. (conductance form)."""
    return network_loss(net, state.voltages)


def to_mwh(net, pu_power):
    return pu_power * net.base_power * HOURS


def violation_direction(state: GridState, net: RadialNetwork):
    """Signed violation flags: -1 below the band, +1 above it, 0 inside.

    Returns (per-node array, per-line array).
    """
    vm = state.vmag
    vdir = np.where(vm < net.v_min, -1, np.where(vm > net.v_max, 1, 0))
    vdir[0] = 0
    sm = state.flow_mag
    sdir = np.where(sm < net.s_min, -1, np.where(sm > net.s_max, 1, 0))
    return vdir, sdir


def activation(state: GridState, net: RadialNetwork, sched: CostSchedule):
    """Unit voltage and congestion costs in force at ``state``.

    A node's voltage cost is ``sched.c_voltage`` when its magnitude lies
    outside [v_min, v_max] and 0 otherwise; likewise per line for flows.
    """
    vdir, sdir = violation_direction(state, net)
    return (np.where(vdir != 0, sched.c_voltage, 0.0),
            np.where(sdir != 0, sched.c_congestion, 0.0))
