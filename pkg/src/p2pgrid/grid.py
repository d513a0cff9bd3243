"""Radial distribution network model, file ingestion and nodal admittance.

Quantities inside :class:`RadialNetwork` are per-unit on the network's own
power/voltage bases. Node 0 is always the slack bus.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .exceptions import LimitError, NetworkFileError, SingularBranchError, TopologyError

DEFAULT_BASE_POWER = 10.0  # MVA
DEFAULT_BASE_VOLTAGE = 12.66  # kV
DEFAULT_V_MIN = 0.95
DEFAULT_V_MAX = 1.05


@dataclass(frozen=True)
class PerUnit:
    """Per-unit bases for a single-voltage-level feeder."""

    base_power: float = DEFAULT_BASE_POWER
    base_voltage: float = DEFAULT_BASE_VOLTAGE

    @property
    def base_impedance(self):
        return self.base_voltage ** 2 / self.base_power

    def power_to_pu(self, mw):
        return mw / self.base_power

    def power_from_pu(self, pu):
        return pu * self.base_power

    def impedance_to_pu(self, ohm):
        return ohm / self.base_impedance

    def impedance_from_pu(self, pu):
        return pu * self.base_impedance

    def voltage_to_pu(self, kv):
        return kv / self.base_voltage

    def voltage_from_pu(self, pu):
        return pu * self.base_voltage


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class RadialNetwork:
    """Immutable radial feeder.

    Lines are stored oriented from parent to child, so ``from_node[l]`` is
    always the end closer to the slack and ``to_node[l]`` the downstream end.

    Attributes
    ----------
    p_load, q_load : (N+1,) arrays
        Base-case nodal demand in p.u. (slack entry is ignored).
    v_min, v_max : (N+1,) arrays
        Voltage dead band per node in p.u.
    from_node, to_node : (L,) int arrays
    r, x : (L,) arrays
        Series impedance in p.u.
    s_max, s_min : (L,) arrays
        Apparent-flow dead band in p.u. (``inf`` when unrated).
    """

    p_load: np.ndarray
    q_load: np.ndarray
    v_min: np.ndarray
    v_max: np.ndarray
    from_node: np.ndarray
    to_node: np.ndarray
    r: np.ndarray
    x: np.ndarray
    s_max: np.ndarray
    s_min: np.ndarray
    base_power: float = DEFAULT_BASE_POWER
    base_voltage: float = DEFAULT_BASE_VOLTAGE
    slack_voltage: complex = 1.0 + 0.0j
    name: str = ""
    parent: np.ndarray = field(init=False, repr=False)
    line_to_child: np.ndarray = field(init=False, repr=False)
    order: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        for name in ("p_load", "q_load", "v_min", "v_max", "r", "x", "s_max", "s_min"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        for name in ("from_node", "to_node"):
            object.__setattr__(self, name, _frozen(getattr(self, name), dtype=int))
        object.__setattr__(self, "slack_voltage", complex(self.slack_voltage))

        n_nodes = self.p_load.shape[0]
        for name in ("q_load", "v_min", "v_max"):
            if getattr(self, name).shape != (n_nodes,):
                raise ValueError(f"{name} must have one entry per node")
        n_lines = self.from_node.shape[0]
        for name in ("to_node", "r", "x", "s_max", "s_min"):
            if getattr(self, name).shape != (n_lines,):
                raise ValueError(f"{name} must have one entry per line")

        parent, line_to_child, order, flipped = _tree_structure(n_nodes, self.from_node, self.to_node)
        if flipped.any():
            f = np.where(flipped, self.to_node, self.from_node)
            t = np.where(flipped, self.from_node, self.to_node)
            object.__setattr__(self, "from_node", _frozen(f, dtype=int))
            object.__setattr__(self, "to_node", _frozen(t, dtype=int))
        object.__setattr__(self, "parent", _frozen(parent, dtype=int))
        object.__setattr__(self, "line_to_child", _frozen(line_to_child, dtype=int))
        object.__setattr__(self, "order", _frozen(order, dtype=int))
        _check_limits(self)

    @property
    def n_nodes(self):
        """Number of nodes including the slack (N+1)."""
        return self.p_load.shape[0]

    @property
    def n_lines(self):
        return self.from_node.shape[0]

    @property
    def per_unit(self):
        return PerUnit(self.base_power, self.base_voltage)

    @property
    def series_admittance(self):
        """Per-line series admittance y_l = 1/(r + jx)."""
        z = self.r + 1j * self.x
        if np.any(z == 0):
            bad = np.flatnonzero(z == 0).tolist()
            raise SingularBranchError(f"zero-impedance line(s) {bad}")
        return 1.0 / z

    @property
    def admittance(self):
        Y = getattr(self, "_Y", None)
        if Y is None:
            Y = build_admittance(self)
            Y.setflags(write=False)
            object.__setattr__(self, "_Y", Y)
        return Y

    def path_to_slack(self, node):
        """Line indices on the unique path from ``node`` up to the slack."""
        lines = []
        while node != 0:
            lines.append(int(self.line_to_child[node]))
            node = int(self.parent[node])
        return lines

    def downstream_nodes(self, line):
        """Nodes fed through ``line`` (its child end and everything below)."""
        child = int(self.to_node[line])
        below = {child}
        for n in self.order:
            if n != 0 and int(self.parent[n]) in below:
                below.add(int(n))
        return sorted(below)


@dataclass(frozen=True, eq=False)
class BaseInjection:
    """Nodal complex injection at the no-trade operating point, in p.u."""

    s: np.ndarray

    def __post_init__(self):
        s = np.array(self.s, dtype=complex)
        if not np.all(np.isfinite(s[1:])):
            raise ValueError("non-slack base injections must be finite")
        s.setflags(write=False)
        object.__setattr__(self, "s", s)

    @property
    def p(self):
        return self.s.real

    @property
    def q(self):
        return self.s.imag


def base_injection(net: RadialNetwork) -> BaseInjection:
    s = -(net.p_load + 1j * net.q_load)
    s[0] = 0.0
    return BaseInjection(s)


def _tree_structure(n_nodes, from_node, to_node):
    n_lines = from_node.shape[0]
    if n_nodes < 2:
        raise TopologyError("a network needs the slack node and at least one more node")
    for arr in (from_node, to_node):
        if arr.size and (arr.min() < 0 or arr.max() >= n_nodes):
            raise TopologyError("line refers to an unknown node")
    if np.any(from_node == to_node):
        raise TopologyError("self-loop line")

    # union-find catches loops independently of the line count
    root = list(range(n_nodes))

    def find(a):
        while root[a] != a:
            root[a] = root[root[a]]
            a = root[a]
        return a

    for l in range(n_lines):
        a, b = find(int(from_node[l])), find(int(to_node[l]))
        if a == b:
            raise TopologyError(
                f"line {l} ({from_node[l]}-{to_node[l]}) closes a loop; the network must be radial")
        root[a] = b
    if n_lines != n_nodes - 1:
        raise TopologyError(f"{n_nodes} nodes need exactly {n_nodes - 1} lines, got {n_lines}")

    adj = [[] for _ in range(n_nodes)]
    for l in range(n_lines):
        adj[from_node[l]].append((int(to_node[l]), l))
        adj[to_node[l]].append((int(from_node[l]), l))
    parent = np.full(n_nodes, -1, dtype=int)
    line_to_child = np.full(n_nodes, -1, dtype=int)
    flipped = np.zeros(n_lines, dtype=bool)
    order = [0]
    seen = np.zeros(n_nodes, dtype=bool)
    seen[0] = True
    head = 0
    while head < len(order):
        n = order[head]
        head += 1
        for m, l in adj[n]:
            if not seen[m]:
                seen[m] = True
                parent[m] = n
                line_to_child[m] = l
                flipped[l] = from_node[l] != n
                order.append(m)
    if not seen.all():
        missing = np.flatnonzero(~seen).tolist()
        raise TopologyError(f"nodes {missing} are not reachable from the slack")
    return parent, line_to_child, np.array(order), flipped


def _check_limits(net):
    bad = np.flatnonzero(~(net.v_min < net.v_max))
    if bad.size:
        raise LimitError(f"voltage band inverted or empty at node(s) {bad.tolist()}")
    if np.any(net.v_min <= 0):
        raise LimitError("lower voltage limits must be positive")
    bad = np.flatnonzero(~(net.s_min < net.s_max))
    if bad.size:
        raise LimitError(f"flow band inverted or empty on line(s) {bad.tolist()}")
    if np.any(net.s_min < 0):
        raise LimitError("flow limits are magnitudes and cannot be negative")


def build_admittance(net: RadialNetwork) -> np.ndarray:
    """Dense nodal admittance matrix from series branches (no shunts).

    ``Y[n, m] = -1/(r + jx)`` for each line (n, m) and the diagonal is the
    negated sum of the off-diagonals of its row.
    """
    y = net.series_admittance
    Y = np.zeros((net.n_nodes, net.n_nodes), dtype=complex)
    f, t = net.from_node, net.to_node
    np.add.at(Y, (f, t), -y)
    np.add.at(Y, (t, f), -y)
    np.add.at(Y, (f, f), y)
    np.add.at(Y, (t, t), y)
    return Y


# --- file ingestion -------------------------------------------------------

_SECTIONS = ("header", "nodes", "lines")


def _blank(s):
    return s is None or s.strip() == ""


def _parse_float(s, path, lineno, what, default=None):
    if _blank(s):
        if default is None:
            raise NetworkFileError(f"missing {what}", path, lineno)
        return default
    try:
        return float(s)
    except ValueError:
        raise NetworkFileError(f"cannot parse {what} {s!r}", path, lineno) from None


def _parse_int(s, path, lineno, what):
    try:
        return int(s)
    except (TypeError, ValueError):
        raise NetworkFileError(f"cannot parse {what} {s!r}", path, lineno) from None


def parse_network(text, path="<string>", name=""):
    """Parse network-file text; see :func:`load_network` for the format."""
    section = None
    header = {}
    node_rows = []
    line_rows = []
    for lineno, raw in enumerate(io.StringIO(text), start=1):
        stripped = raw.split("#", 1)[0].strip()
        if not stripped:
            continue
        if stripped.startswith("[") and stripped.endswith("]"):
            section = stripped[1:-1].strip().lower()
            if section not in _SECTIONS:
                raise NetworkFileError(f"unknown section [{section}]", path, lineno)
            continue
        if section is None:
            raise NetworkFileError("data before the first section header", path, lineno)
        row = [c.strip() for c in next(csv.reader([stripped]))]
        if section == "header":
            if len(row) != 2:
                raise NetworkFileError("header rows are 'key, value'", path, lineno)
            header[row[0].lower()] = row[1]
        elif section == "nodes":
            if row[0].lower() == "index":
                continue
            if len(row) not in (3, 5):
                raise NetworkFileError(
                    "node rows are 'index, p_load, q_load[, v_min, v_max]'", path, lineno)
            node_rows.append((lineno, row + [""] * (5 - len(row))))
        else:
            if row[0].lower() == "index":
                continue
            if len(row) not in (5, 6, 7):
                raise NetworkFileError(
                    "line rows are 'index, from, to, r, x[, s_max[, s_min]]'", path, lineno)
            line_rows.append((lineno, row + [""] * (7 - len(row))))

    if not node_rows:
        raise NetworkFileError("no [nodes] rows", path)
    base_power = _parse_float(header.get("base_power"), path, None, "base_power", DEFAULT_BASE_POWER)
    base_voltage = _parse_float(header.get("base_voltage"), path, None, "base_voltage",
                                DEFAULT_BASE_VOLTAGE)
    if base_power <= 0 or base_voltage <= 0:
        raise NetworkFileError("bases must be positive", path)
    unit = header.get("impedance_unit", "ohm").lower()
    if unit not in ("ohm", "pu"):
        raise NetworkFileError(f"impedance_unit must be 'ohm' or 'pu', got {unit!r}", path)
    v_slack = _parse_float(header.get("slack_voltage"), path, None, "slack_voltage", 1.0)
    pu = PerUnit(base_power, base_voltage)

    n_nodes = len(node_rows)
    p = np.zeros(n_nodes)
    q = np.zeros(n_nodes)
    vmin = np.full(n_nodes, DEFAULT_V_MIN)
    vmax = np.full(n_nodes, DEFAULT_V_MAX)
    seen = set()
    for lineno, (idx, pl, ql, lo, hi) in node_rows:
        n = _parse_int(idx, path, lineno, "node index")
        if not 0 <= n < n_nodes or n in seen:
            raise NetworkFileError(f"node index {n} out of range or duplicated", path, lineno)
        seen.add(n)
        p[n] = pu.power_to_pu(_parse_float(pl, path, lineno, "p_load"))
        q[n] = pu.power_to_pu(_parse_float(ql, path, lineno, "q_load"))
        vmin[n] = _parse_float(lo, path, lineno, "v_min", DEFAULT_V_MIN)
        vmax[n] = _parse_float(hi, path, lineno, "v_max", DEFAULT_V_MAX)

    n_lines = len(line_rows)
    f = np.zeros(n_lines, dtype=int)
    t = np.zeros(n_lines, dtype=int)
    r = np.zeros(n_lines)
    x = np.zeros(n_lines)
    smax = np.full(n_lines, np.inf)
    smin = np.zeros(n_lines)
    seen = set()
    for lineno, (idx, a, b, rr, xx, hi, lo) in line_rows:
        l = _parse_int(idx, path, lineno, "line index")
        if not 0 <= l < n_lines or l in seen:
            raise NetworkFileError(f"line index {l} out of range or duplicated", path, lineno)
        seen.add(l)
        f[l] = _parse_int(a, path, lineno, "from node")
        t[l] = _parse_int(b, path, lineno, "to node")
        r[l] = _parse_float(rr, path, lineno, "r")
        x[l] = _parse_float(xx, path, lineno, "x")
        if unit == "ohm":
            r[l] = pu.impedance_to_pu(r[l])
            x[l] = pu.impedance_to_pu(x[l])
        smax[l] = pu.power_to_pu(_parse_float(hi, path, lineno, "s_max", np.inf))
        smin[l] = pu.power_to_pu(_parse_float(lo, path, lineno, "s_min", 0.0))

    net = RadialNetwork(p_load=p, q_load=q, v_min=vmin, v_max=vmax, from_node=f, to_node=t,
                        r=r, x=x, s_max=smax, s_min=smin, base_power=base_power,
                        base_voltage=base_voltage, slack_voltage=v_slack, name=name)
    net.series_admittance  # fail early on r = x = 0
    return net


def load_network(path) -> RadialNetwork:
    """Read a network file.

    The file has three ``[section]`` blocks of comma-separated rows; text
    after ``#`` is a comment::

        [header]
        base_power, 10          # MVA
        base_voltage, 12.66     # kV
        impedance_unit, ohm     # or pu
        [nodes]
        index, p_load, q_load, v_min, v_max     # MW, MVAr, p.u., p.u.
        0, 0, 0, ,
        1, 0.1, 0.06, 0.95, 1.05
        [lines]
        index, from, to, r, x, s_max, s_min     # ohm (or p.u.), MVA, MVA
        0, 0, 1, 0.0922, 0.0470, 6.0, 0

    Blank voltage limits default to [0.95, 1.05] p.u.; a blank ``s_max``
    means unrated.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise NetworkFileError(str(exc), path) from exc
    return parse_network(text, path=str(path), name=path.stem)


def ieee33() -> RadialNetwork:
    """The 33-node Baran & Wu feeder shipped with the package."""
    text = resources.files("p2pgrid.data").joinpath("ieee33.net").read_text()
    return parse_network(text, path="ieee33.net", name="ieee33")


def format_network(net: RadialNetwork) -> str:
    """Serialize ``net`` in the network-file format (impedances in p.u.)."""
    pu = net.per_unit

    def num(x):
        return repr(float(x))

    out = ["[header]",
           f"base_power, {num(net.base_power)}",
           f"base_voltage, {num(net.base_voltage)}",
           "impedance_unit, pu",
           f"slack_voltage, {num(abs(net.slack_voltage))}",
           "[nodes]",
           "index, p_load, q_load, v_min, v_max"]
    for n in range(net.n_nodes):
        out.append(f"{n}, {num(pu.power_from_pu(net.p_load[n]))}, {num(pu.power_from_pu(net.q_load[n]))}, "
                   f"{num(net.v_min[n])}, {num(net.v_max[n])}")
    out += ["[lines]", "index, from, to, r, x, s_max, s_min"]
    for l in range(net.n_lines):
        smax = "" if np.isinf(net.s_max[l]) else num(pu.power_from_pu(net.s_max[l]))
        out.append(f"{l}, {int(net.from_node[l])}, {int(net.to_node[l])}, {num(net.r[l])}, "
                   f"{num(net.x[l])}, {smax}, {num(pu.power_from_pu(net.s_min[l]))}")
    return "\n".join(out) + "\n"


def random_radial_network(n_nodes, rng=None, *, r_range=(0.002, 0.02), xr_range=(0.5, 2.0),
                          load_range=(0.002, 0.02), pf_range=(0.85, 0.98),
                          v_band=(DEFAULT_V_MIN, DEFAULT_V_MAX), s_max=np.inf,
                          base_power=DEFAULT_BASE_POWER, base_voltage=DEFAULT_BASE_VOLTAGE):
    """Random feeder whose node ``i`` hangs off a uniformly chosen earlier node.

    Impedances and loads are drawn in p.u.; the defaults keep voltages within
    a few percent of nominal for up to ~40 nodes.
    """
    rng = np.random.default_rng(rng)
    if n_nodes < 2:
        raise TopologyError("a network needs the slack node and at least one more node")
    parents = np.array([rng.integers(0, i) for i in range(1, n_nodes)], dtype=int)
    children = np.arange(1, n_nodes)
    r = rng.uniform(*r_range, size=n_nodes - 1)
    x = r * rng.uniform(*xr_range, size=n_nodes - 1)
    p = np.concatenate([[0.0], rng.uniform(*load_range, size=n_nodes - 1)])
    pf = rng.uniform(*pf_range, size=n_nodes)
    q = p * np.tan(np.arccos(pf))
    q[0] = 0.0
    return RadialNetwork(p_load=p, q_load=q, v_min=np.full(n_nodes, v_band[0]),
                         v_max=np.full(n_nodes, v_band[1]), from_node=parents, to_node=children,
                         r=r, x=x, s_max=np.full(n_nodes - 1, s_max), s_min=np.zeros(n_nodes - 1),
                         base_power=base_power, base_voltage=base_voltage, name=f"random{n_nodes}")
