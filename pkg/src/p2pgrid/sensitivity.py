"""Analytic sensitivities of voltages, flows and loss to nodal active injections.

Differentiating the balance equation conj(s_n) = conj(v_n) (Y v)_n with respect
to the active injection p_k at node k gives, for every non-slack n,

    1{n=k} = conj(dv_n) (Y v)_n + conj(v_n) sum_{m>=1} Y_nm dv_m,     dv_0 = 0

which is linear in the real and imaginary parts of dv. All K right-hand sides
share one LU factorization of the power-flow Jacobian.

Tables are indexed ``[row, column]`` where rows are nodes (or lines) and
column ``j`` is the injection at node ``j + 1``.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg

from .exceptions import DegenerateVoltageError, NumericalError
from .grid import RadialNetwork
from .powerflow import (GridState, branch_flows, rectangular_jacobian,
                        solve_power_flow, solve_with_trades)

log = logging.getLogger(__name__)

MIN_VOLTAGE = 1e-6
MIN_FLOW = 1e-9


def solve_voltage_sensitivity(net: RadialNetwork, state: GridState) -> np.ndarray:
    """Complex dv_n/dp_k for all nodes n (rows) and non-slack injections k (columns)."""
    N = net.n_nodes - 1
    J = rectangular_jacobian(net.admittance, state.voltages)
    cond = np.linalg.cond(J)
    log.debug("sensitivity system condition number %.3e", cond)
    if not np.isfinite(cond) or cond > 1e14:
        raise NumericalError("voltage-sensitivity system is singular", cond)
    lu = scipy.linalg.lu_factor(J, check_finite=False)
    rhs = np.vstack([np.eye(N), np.zeros((N, N))])
    x = scipy.linalg.lu_solve(lu, rhs, check_finite=False)
    dv = np.zeros((N + 1, N), dtype=complex)
    dv[1:] = x[:N] + 1j * x[N:]
    return dv


def voltage_magnitude_sensitivity(dv_dp, state: GridState) -> np.ndarray:
    """d|v_n|/dp_k = Re(conj(v_n) dv_n/dp_k) / |v_n|."""
    v = state.voltages
    vm = np.abs(v)
    if np.any(vm < MIN_VOLTAGE):
        raise DegenerateVoltageError(f"voltage magnitude below {MIN_VOLTAGE} p.u. at node(s) "
                                     f"{np.flatnonzero(vm < MIN_VOLTAGE).tolist()}")
    return np.real(np.conj(v)[:, None] * dv_dp) / vm[:, None]


def flow_sensitivity(net, state, dv_dp, form="branch"):
    """Complex d s^f_l / dp_k for every line (rows) and injection (columns)."""
    v = state.voltages
    f, t = net.from_node, net.to_node
    if form == "branch":
        y = net.series_admittance
        vf, dvf, dvt = v[f][:, None], dv_dp[f], dv_dp[t]
        return dvf * np.conj((v[f] - v[t]) * y)[:, None] + vf * np.conj((dvf - dvt) * y[:, None])
    if form == "single_voltage":
        Yc = np.conj(net.admittance[f, t])
        return 2.0 * Yc[:, None] * np.real(np.conj(v[f])[:, None] * dv_dp[f])
    raise ValueError(f"unknown flow form {form!r}")


def flow_magnitude_sensitivity(net, state, dv_dp, form="branch") -> np.ndarray:
    """d|s^f_l|/dp_k = Re(conj(s) ds/dp_k) / |s|.

    Entries for lines whose flow magnitude is below ``MIN_FLOW`` are NaN: the
    magnitude is not differentiable at zero and callers must not treat it as 0.
    """
    s = state.line_flows if form == "branch" else branch_flows(net, state.voltages, form)
    ds = flow_sensitivity(net, state, dv_dp, form)
    sm = np.abs(s)
    out = np.full(ds.shape, np.nan)
    ok = sm >= MIN_FLOW
    out[ok] = np.real(np.conj(s[ok])[:, None] * ds[ok]) / sm[ok][:, None]
    return out


def loss_sensitivity(net, state, dv_dp) -> np.ndarray:
    """do/dp_k = 2 Re(sum_n conj(dv_n/dp_k) (G v)_n)."""
    gv = net.admittance.real @ state.voltages
    return 2.0 * np.real(np.conj(dv_dp).T @ gv)


@dataclass(frozen=True, eq=False)
class SensitivityTable:
    """Sensitivities at one linearization state.

    ``phi``, ``chi`` and ``psi`` are the voltage, flow and loss causal
    factors; ``2 * c_loss * psi[k] * p_k`` is the loss charge of a trade of
    size p_k at column k.
    """

    dv_dp: np.ndarray
    dvmag_dp: np.ndarray
    dflowmag_dp: np.ndarray
    dloss_dp: np.ndarray
    phi: np.ndarray
    chi: np.ndarray
    psi: np.ndarray
    state: GridState
    flow_form: str = "branch"

    @property
    def undefined_lines(self):
        """Lines whose flow-magnitude sensitivity is undefined (zero flow)."""
        return np.flatnonzero(np.isnan(self.dflowmag_dp).any(axis=1))

    def columns(self, nodes):
        """Table column index of each (non-slack) node."""
        nodes = np.asarray(nodes, dtype=int)
        if np.any(nodes < 1):
            raise ValueError("peers cannot sit at the slack node")
        return nodes - 1

    def predict_vmag(self, delta_p):
        """First-order |v| after adding active injections ``delta_p`` (per node, p.u.)."""
        return self.state.vmag + self.dvmag_dp @ np.asarray(delta_p)[1:]

    def predict_flow_mag(self, delta_p):
        return self.state.flow_mag + self.dflowmag_dp @ np.asarray(delta_p)[1:]

    def predict_loss(self, delta_p):
        return self.state.loss + self.dloss_dp @ np.asarray(delta_p)[1:]


def causal_factors(net: RadialNetwork, dv_dp, state: GridState, form="branch"):
    """Voltage, flow and loss causal factors (phi, chi, psi) at ``state``."""
    phi = voltage_magnitude_sensitivity(dv_dp, state)
    chi = flow_magnitude_sensitivity(net, state, dv_dp, form)
    gv = net.admittance.real @ state.voltages
    psi = np.real(np.sum(np.conj(dv_dp) * gv[:, None], axis=0))
    return phi, chi, psi


def compute_sensitivities(net: RadialNetwork, state: GridState | None = None,
                          flow_form="branch") -> SensitivityTable:
    """Build the full table, linearized at ``state`` (the base case by default)."""
    if state is None:
        state = solve_with_trades(net)
    dv = solve_voltage_sensitivity(net, state)
    dvmag = voltage_magnitude_sensitivity(dv, state)
    dflow = flow_magnitude_sensitivity(net, state, dv, flow_form)
    dloss = loss_sensitivity(net, state, dv)
    phi, chi, psi = causal_factors(net, dv, state, flow_form)
    for a in (dv, dvmag, dflow, dloss, phi, chi, psi):
        a.setflags(write=False)
    return SensitivityTable(dv_dp=dv, dvmag_dp=dvmag, dflowmag_dp=dflow, dloss_dp=dloss,
                            phi=phi, chi=chi, psi=psi, state=state, flow_form=flow_form)


@dataclass(frozen=True)
class FiniteDifference:
    """Central-difference estimates at step ``eps`` and a ``2 * eps`` cross-check."""

    dv: np.ndarray
    dvmag: np.ndarray
    dflowmag: np.ndarray
    dloss: np.ndarray
    spread: dict
    eps: float


def _refine(net, s, state, steps=3):
    # Newton steps with long-double residuals; the float64 Jacobian only steers
    Y = net.admittance.astype(np.clongdouble)
    s = np.asarray(s).astype(np.clongdouble)
    v = state.voltages.astype(np.clongdouble)
    N = net.n_nodes - 1
    for _ in range(steps):
        res = np.conj(s[1:]) - np.conj(v[1:]) * (Y[1:] @ v)
        J = rectangular_jacobian(net.admittance, v.astype(complex))
        dx = np.linalg.solve(J, np.concatenate([res.real, res.imag]).astype(float))
        v[1:] += dx[:N] + 1j * dx[N:]
    return v


def finite_difference_sensitivities(net: RadialNetwork, injections, eps=1e-6, columns=None,
                                    tol=1e-12, flow_form="branch") -> FiniteDifference:
    """Re-solve the nonlinear power flow at +/- eps around ``injections``.

    Independent of the analytic path: each perturbed point comes from
    :func:`solve_power_flow` followed by a long-double refinement, so roundoff
    stays well below the derivative tolerance even at eps = 1e-6.
    ``spread`` holds the largest difference between the estimates at ``eps``
    and ``2 * eps`` per quantity, which exposes step-size artifacts.
    """
    s0 = np.asarray(injections, dtype=complex)
    base = solve_power_flow(net, s0, tol=tol)
    cols = np.arange(net.n_nodes - 1) if columns is None else np.asarray(columns)

    def quantities(v):
        dv = v[net.from_node] - v[net.to_node]
        loss = np.sum(net.series_admittance.real * (dv.real ** 2 + dv.imag ** 2))
        return v, np.abs(v), np.abs(branch_flows(net, v, flow_form)), loss

    def central(h):
        out = None
        for j, c in enumerate(cols):
            hi = s0.copy()
            lo = s0.copy()
            hi[c + 1] += h
            lo[c + 1] -= h
            qh = quantities(_refine(net, hi, solve_power_flow(net, hi, v0=base.voltages, tol=tol)))
            ql = quantities(_refine(net, lo, solve_power_flow(net, lo, v0=base.voltages, tol=tol)))
            d = [((a - b) / (2 * h)).astype(complex if j == 0 else float)
                 for j, (a, b) in enumerate(zip(qh, ql))]
            if out is None:
                out = [np.zeros((np.size(d[0]), len(cols)), dtype=np.result_type(d[0])),
                       np.zeros((np.size(d[1]), len(cols))),
                       np.zeros((np.size(d[2]), len(cols))),
                       np.zeros(len(cols))]
            for arr, val in zip(out[:3], d[:3]):
                arr[:, j] = val
            out[3][j] = d[3]
        return out

    d1 = central(eps)
    d2 = central(2 * eps)
    names = ("dv", "dvmag", "dflowmag", "dloss")
    spread = {n: float(np.max(np.abs(a - b))) if a.size else 0.0 for n, a, b in zip(names, d1, d2)}
    return FiniteDifference(dv=d1[0], dvmag=d1[1], dflowmag=d1[2], dloss=d1[3], spread=spread,
                            eps=eps)


def dump_sensitivity(table: SensitivityTable, path, labels=None, columns=None):
    """Write the table to CSV: one row per injection column (or peer).

    Column groups are ``dvmag_<node>``, ``dflowmag_<line>`` and ``dloss``.
    """
    n_cols = table.dvmag_dp.shape[1]
    columns = np.arange(n_cols) if columns is None else np.asarray(columns)
    labels = [f"node{c + 1}" for c in columns] if labels is None else list(labels)
    n_nodes = table.dvmag_dp.shape[0]
    n_lines = table.dflowmag_dp.shape[0]
    header = (["injection"] + [f"dvmag_{n}" for n in range(n_nodes)]
              + [f"dflowmag_{l}" for l in range(n_lines)] + ["dloss", "psi"])
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for lab, c in zip(labels, columns):
            row = [lab] + [repr(float(x)) for x in table.dvmag_dp[:, c]]
            row += ["nan" if np.isnan(x) else repr(float(x)) for x in table.dflowmag_dp[:, c]]
            row += [repr(float(table.dloss_dp[c])), repr(float(table.psi[c]))]
            w.writerow(row)
    return path
