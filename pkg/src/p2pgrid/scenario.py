"""Scenario runner: load a feeder and a peer roster, run the policy matrix, write tables.

A scenario is described by an INI file::

    [scenario]
    id = 1                      # 1: loss cost only, 2: loss + voltage + congestion
    name = ieee33-loss
    network = ieee33_p2p.net    # relative to the config file
    peers = ieee33_peers.csv
    policies = base, universal, causal
    seed = 0
    output = out/scenario1      # relative to the working directory
    trace = false
    propositions = true

    [costs]
    c_loss = 150                # $/MWh
    c_voltage = 0
    c_congestion = 0

    [bands]                     # optional, overrides the network file
    v_min = 0.95
    v_max = 1.05

    [negotiation]               # optional, any NegotiationConfig field
    epsilon = 0.05
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import hashlib
import io
import json
import logging
import platform
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .coordination import (POLICIES, NegotiationConfig, NegotiationState, PropositionReport,
                           check_propositions, realized_welfare, run_negotiation)
from .exceptions import ConfigError, P2PGridError
from .grid import RadialNetwork, load_network
from .market import PeerSet, load_peers
from .powerflow import HOURS, CostSchedule, GridState, violation_direction

log = logging.getLogger(__name__)

SIG_DIGITS = 4


@dataclass(frozen=True)
class ScenarioConfig:
    scenario_id: int
    network: Path
    peers: Path
    costs: CostSchedule
    negotiation: NegotiationConfig = NegotiationConfig()
    policies: tuple = POLICIES
    output: Path = Path("out")
    seed: int = 0
    name: str = ""
    v_band: tuple | None = None
    trace: bool = False
    propositions: bool = True
    source: str = ""  # canonical text the config hash is taken over

    def __post_init__(self):
        if self.scenario_id not in (1, 2):
            raise ConfigError(f"scenario id must be 1 or 2, got {self.scenario_id}")
        if not self.policies:
            raise ConfigError("policy list is empty")
        bad = [p for p in self.policies if p not in POLICIES]
        if bad:
            raise ConfigError(f"unknown policies {bad}; choose from {list(POLICIES)}")
        if len(set(self.policies)) != len(self.policies):
            raise ConfigError("policy list has duplicates")
        for what in ("network", "peers"):
            if not Path(getattr(self, what)).is_file():
                raise ConfigError(f"{what} file not found: {getattr(self, what)}")
        if self.scenario_id == 1 and (self.costs.c_voltage or self.costs.c_congestion):
            # loss-only study: network limits are not priced
            object.__setattr__(self, "costs", CostSchedule(c_loss=self.costs.c_loss))

    @property
    def config_hash(self):
        return hashlib.sha256(self.source.encode()).hexdigest()


def _number(section, key, kind=float, default=None):
    raw = section.get(key)
    if raw is None or raw.strip() == "":
        if default is None:
            raise ConfigError(f"[{section.name}] needs '{key}'")
        return default
    try:
        return kind(raw)
    except ValueError:
        raise ConfigError(f"[{section.name}] {key} = {raw!r} is not a valid {kind.__name__}") from None


def _negotiation(section):
    if section is None:
        return NegotiationConfig()
    kinds = {f.name: f.type for f in dataclasses.fields(NegotiationConfig)}
    kw = {}
    for key, raw in section.items():
        if key not in kinds:
            raise ConfigError(f"[negotiation] unknown key '{key}'")
        t = kinds[key]
        try:
            if "bool" in t:
                kw[key] = section.getboolean(key)
            elif "int" in t:
                kw[key] = int(raw)
            elif "str" in t:
                kw[key] = raw.strip()
            else:
                kw[key] = None if raw.strip().lower() in ("", "none") else float(raw)
        except ValueError:
            raise ConfigError(f"[negotiation] {key} = {raw!r} is not valid") from None
    try:
        return NegotiationConfig(**kw)
    except ValueError as exc:
        raise ConfigError(f"[negotiation] {exc}") from None


def parse_config(text, base_dir=".", **overrides) -> ScenarioConfig:
    """Build a :class:`ScenarioConfig` from INI text.

    File paths are resolved against ``base_dir``; a bare name that does not
    exist there is looked up among the packaged data files. ``overrides``
    replaces fields after parsing (``output``, ``seed``, ``policies``,
    ``trace``).
    """
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unreadable config: {exc}") from None
    for sec in ("scenario", "costs"):
        if not cp.has_section(sec):
            raise ConfigError(f"config needs a [{sec}] section")
    sc, costs = cp["scenario"], cp["costs"]
    base_dir = Path(base_dir)

    def path(key):
        raw = sc.get(key)
        if not raw:
            raise ConfigError(f"[scenario] needs '{key}'")
        p = base_dir / raw
        if not p.exists() and Path(raw).name == raw:
            packaged = resources.files("p2pgrid.data").joinpath(raw)
            if packaged.is_file():
                return Path(str(packaged))
        return p

    policies = tuple(p.strip() for p in sc.get("policies", ",".join(POLICIES)).split(",") if p.strip())
    try:
        sched = CostSchedule(c_loss=_number(costs, "c_loss"),
                             c_voltage=_number(costs, "c_voltage", default=0.0),
                             c_congestion=_number(costs, "c_congestion", default=0.0))
    except ValueError as exc:
        raise ConfigError(f"[costs] {exc}") from None
    band = None
    if cp.has_section("bands"):
        band = (_number(cp["bands"], "v_min"), _number(cp["bands"], "v_max"))
        if not 0 < band[0] < band[1]:
            raise ConfigError(f"[bands] need 0 < v_min < v_max, got {band}")
    try:
        trace = sc.getboolean("trace", fallback=False)
        props = sc.getboolean("propositions", fallback=True)
    except ValueError as exc:
        raise ConfigError(f"[scenario] {exc}") from None
    kw = dict(scenario_id=_number(sc, "id", int), name=sc.get("name", ""),
              network=path("network"), peers=path("peers"), costs=sched,
              negotiation=_negotiation(cp["negotiation"] if cp.has_section("negotiation") else None),
              policies=policies, output=Path(sc.get("output", "out")),
              seed=_number(sc, "seed", int, default=0), v_band=band, trace=trace,
              propositions=props)
    kw.update({k: v for k, v in overrides.items() if v is not None})
    if "policies" in overrides and overrides["policies"] is not None:
        kw["policies"] = tuple(overrides["policies"])
    kw["output"] = Path(kw["output"])
    # hash what determines the numbers, not where they are written
    canon = {k: (str(v) if isinstance(v, Path) else v) for k, v in kw.items() if k != "output"}
    canon["network"] = hashlib.sha256(Path(kw["network"]).read_bytes()).hexdigest() \
        if Path(kw["network"]).is_file() else str(kw["network"])
    canon["peers"] = hashlib.sha256(Path(kw["peers"]).read_bytes()).hexdigest() \
        if Path(kw["peers"]).is_file() else str(kw["peers"])
    kw["source"] = repr(sorted((k, repr(v)) for k, v in canon.items()))
    return ScenarioConfig(**kw)


def load_config(path, **overrides) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, base_dir=path.parent, **overrides)


def shipped_config(scenario_id) -> Path:
    """Path of the packaged IEEE-33 configuration for scenario 1 or 2."""
    if scenario_id not in (1, 2):
        raise ConfigError(f"no shipped config for scenario {scenario_id}")
    return Path(str(resources.files("p2pgrid.data").joinpath(f"scenario{scenario_id}.ini")))


# --- results -----------------------------------------------------------------

@dataclass(eq=False)
class PolicyResult:
    policy: str
    state: NegotiationState
    welfare: float
    loss_mwh: float           # total feeder loss over the interval
    trade_loss_mwh: float     # loss caused by the trades
    voltage_margin: float
    line_margin: float
    violated_nodes: list
    violated_lines: list

    @property
    def converged(self):
        return self.state.converged


@dataclass(eq=False)
class ScenarioResult:
    config: ScenarioConfig
    net: RadialNetwork
    peers: PeerSet
    results: dict
    propositions: PropositionReport | None = None
    files: list = field(default_factory=list)

    @property
    def converged(self):
        return all(r.converged for r in self.results.values())


def voltage_margin(state: GridState, net: RadialNetwork):
    """Mean over non-slack nodes of the distance to the nearer voltage limit (negative outside)."""
    vm = state.vmag[1:]
    return float(np.mean(np.minimum(vm - net.v_min[1:], net.v_max[1:] - vm)))


def line_margin(state: GridState, net: RadialNetwork):
    """Mean over lines of (1 - |s|/s_max) in percent; unrated lines count as 100."""
    rated = np.isfinite(net.s_max)
    m = np.full(net.n_lines, 100.0)
    m[rated] = (1.0 - state.flow_mag[rated] / net.s_max[rated]) * 100.0
    return float(np.mean(m))


def _with_band(net: RadialNetwork, band):
    if band is None:
        return net
    return RadialNetwork(p_load=net.p_load, q_load=net.q_load,
                         v_min=np.full(net.n_nodes, band[0]), v_max=np.full(net.n_nodes, band[1]),
                         from_node=net.from_node, to_node=net.to_node, r=net.r, x=net.x,
                         s_max=net.s_max, s_min=net.s_min, base_power=net.base_power,
                         base_voltage=net.base_voltage, slack_voltage=net.slack_voltage,
                         name=net.name)


def _run_policy(args):
    net, peers, sched, policy, negotiation = args
    return run_negotiation(net, peers, sched, policy, negotiation)


def _summarize(policy, state, net, peers, sched):
    vdir, sdir = violation_direction(state.grid_state, net)
    scale = net.base_power * HOURS
    return PolicyResult(
        policy=policy, state=state, welfare=realized_welfare(state, peers, sched, net),
        loss_mwh=state.grid_state.loss * scale,
        trade_loss_mwh=(state.grid_state.loss - state.base_state.loss) * scale,
        voltage_margin=voltage_margin(state.grid_state, net),
        line_margin=line_margin(state.grid_state, net),
        violated_nodes=np.flatnonzero(vdir).tolist(), violated_lines=np.flatnonzero(sdir).tolist())


def run_scenarios(config: ScenarioConfig, workers=1, write=True) -> ScenarioResult:
    """Run every configured policy and (optionally) write the output tables.

    ``workers > 1`` runs the policies in separate processes; results do not
    depend on it. Runs that hit ``max_iter`` are kept but flagged in every
    table and in the manifest.
    """
    try:
        net = _with_band(load_network(config.network), config.v_band)
        peers = load_peers(config.peers)
        peers.check_nodes(net.n_nodes)
    except (P2PGridError, ValueError) as exc:
        raise ConfigError(f"scenario {config.scenario_id}: {exc}") from exc
    sched = config.costs
    jobs = [(net, peers, sched, p, config.negotiation) for p in config.policies]
    try:
        if workers > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
                states = list(pool.map(_run_policy, jobs))
        else:
            states = [_run_policy(j) for j in jobs]
    except P2PGridError as exc:
        raise exc.__class__(*_error_args(exc, f"scenario {config.scenario_id}")) from exc
    results = {p: _summarize(p, s, net, peers, sched) for p, s in zip(config.policies, states)}
    for r in results.values():
        if not r.converged:
            log.warning("scenario %d: %s did not converge in %d rounds", config.scenario_id,
                        r.policy, r.state.tau)

    report = None
    if config.propositions and {"universal", "causal"} <= set(config.policies):
        # the equilibrium claims are about loss pricing with linearized costs
        report = check_propositions(net, peers, CostSchedule(c_loss=sched.c_loss),
                                    config.negotiation, colocation=True)
    out = ScenarioResult(config, net, peers, results, report)
    if write:
        write_outputs(out)
    return out


def _error_args(exc, context):
    # keep the structured payload of errors that carry one
    msg = f"{context}: {exc}"
    if hasattr(exc, "history"):
        return msg, exc.history
    if hasattr(exc, "gradient_norms"):
        return msg, exc.gradient_norms
    if hasattr(exc, "mismatch"):
        return msg, exc.mismatch, exc.iterations
    return (msg,)


# --- tables ------------------------------------------------------------------

def fmt(x, digits=SIG_DIGITS):
    """Number with ``digits`` significant digits; other values as text."""
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if np.isnan(x):
            return "nan"
        if x == 0:
            return "0"
        return f"{x:.{digits}g}"
    return str(x)


def export_table(header, rows, path, delimiter=","):
    """Write one delimited table with a fixed header; numbers get 4 significant digits."""
    path = Path(path)
    buf = io.StringIO()
    w = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        if len(row) != len(header):
            raise ValueError(f"row has {len(row)} fields, header has {len(header)}")
        w.writerow([fmt(v) for v in row])
    try:
        path.write_text(buf.getvalue())
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write table: {exc.strerror}", str(path)) from None
    return path


def summary_rows(bundle: ScenarioResult):
    header = ["policy", "converged", "iterations", "total_volume_mwh", "social_welfare_usd",
              "system_loss_mwh", "trade_loss_mwh", "voltage_margin_pu", "line_margin_pct",
              "violated_nodes", "violated_lines"]
    rows = []
    for p, r in bundle.results.items():
        rows.append([p, r.converged, r.state.tau, r.state.total_volume, r.welfare, r.loss_mwh,
                     r.trade_loss_mwh, r.voltage_margin, r.line_margin,
                     " ".join(map(str, r.violated_nodes)), " ".join(map(str, r.violated_lines))])
    return header, rows


def _peer_cols(bundle):
    peers = bundle.peers
    roles = ["sell"] * peers.n_sellers + ["buy"] * peers.n_buyers
    return peers.ids, roles, peers.nodes.tolist()


def volume_difference_rows(bundle: ScenarioResult):
    ids, roles, nodes = _peer_cols(bundle)
    pols = list(bundle.results)
    base = bundle.results.get("base")
    header = ["peer_id", "role", "node"] + [f"volume_{p}" for p in pols]
    if base is not None:
        header += [f"diff_{p}" for p in pols if p != "base"]
    rows = []
    for k in range(len(ids)):
        row = [ids[k], roles[k], nodes[k]] + [bundle.results[p].state.volumes[k] for p in pols]
        if base is not None:
            row += [bundle.results[p].state.volumes[k] - base.state.volumes[k]
                    for p in pols if p != "base"]
        rows.append(row)
    return header, rows


def unit_cost_rows(bundle: ScenarioResult):
    ids, roles, nodes = _peer_cols(bundle)
    pols = list(bundle.results)
    header = ["peer_id", "role", "node"]
    for p in pols:
        header += [f"{p}_voltage", f"{p}_congestion", f"{p}_loss", f"{p}_total"]
    rows = []
    for k in range(len(ids)):
        row = [ids[k], roles[k], nodes[k]]
        for p in pols:
            s = bundle.results[p].state
            row += [s.vc[k], s.fc[k], s.lc[k], s.vc[k] + s.fc[k] + s.lc[k]]
        rows.append(row)
    return header, rows


def voltage_rows(bundle: ScenarioResult):
    net, pols = bundle.net, list(bundle.results)
    first = next(iter(bundle.results.values())).state
    header = ["node", "v_min", "v_max", "no_trade"] + pols
    rows = [[n, net.v_min[n], net.v_max[n], first.base_state.vmag[n]]
            + [bundle.results[p].state.grid_state.vmag[n] for p in pols]
            for n in range(net.n_nodes)]
    return header, rows


def line_rows(bundle: ScenarioResult):
    net, pols = bundle.net, list(bundle.results)
    first = next(iter(bundle.results.values())).state
    mva = net.base_power
    header = ["line", "from", "to", "s_max_mva", "no_trade_mva"]
    header += [f"{p}_mva" for p in pols] + [f"{p}_loading_pct" for p in pols]
    rows = []
    for l in range(net.n_lines):
        smax = net.s_max[l] * mva
        row = [l, net.from_node[l], net.to_node[l], smax if np.isfinite(smax) else "unrated",
               first.base_state.flow_mag[l] * mva]
        flows = [bundle.results[p].state.grid_state.flow_mag[l] * mva for p in pols]
        row += flows
        row += [f / smax * 100.0 if np.isfinite(smax) else "unrated" for f in flows]
        rows.append(row)
    return header, rows


def trace_rows(state: NegotiationState, peers: PeerSet):
    ids = peers.ids
    sellers = [p.peer_id for p in peers.sellers]
    header = (["iteration", "epsilon", "welfare", "violations", "total_volume"]
              + [f"p_{i}" for i in ids] + [f"price_{i}" for i in sellers]
              + [f"vc_{i}" for i in ids] + [f"fc_{i}" for i in ids] + [f"lc_{i}" for i in ids])
    rows = []
    for h in state.history:
        rows.append([h.tau, h.epsilon, h.welfare, h.violations, h.total_volume]
                    + list(h.volumes) + list(h.prices) + list(h.vc) + list(h.fc) + list(h.lc))
    return header, rows


def _write_trace(state, peers, path):
    # full precision: the trace is the record the tables are checked against
    header, rows = trace_rows(state, peers)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return Path(path)


def _sha(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_outputs(bundle: ScenarioResult):
    """Write every table plus ``manifest.json`` into the configured output directory."""
    cfg = bundle.config
    out = Path(cfg.output)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(exc.errno, f"cannot create output directory: {exc.strerror}", str(out)) from None
    files = []
    for name, builder in (("summary.csv", summary_rows),
                          ("volume_difference.csv", volume_difference_rows),
                          ("unit_costs.csv", unit_cost_rows),
                          ("voltage_profile.csv", voltage_rows),
                          ("line_loading.csv", line_rows)):
        header, rows = builder(bundle)
        files.append(export_table(header, rows, out / name))
    if bundle.propositions is not None:
        p = out / "propositions.txt"
        p.write_text("\n".join(bundle.propositions.lines()) + "\n")
        files.append(p)
    if cfg.trace:
        for pol, r in bundle.results.items():
            files.append(_write_trace(r.state, bundle.peers, out / f"trace_{pol}.csv"))

    manifest = {
        "scenario": cfg.scenario_id,
        "name": cfg.name,
        "config_hash": cfg.config_hash,
        "seed": cfg.seed,
        "policies": list(cfg.policies),
        "costs": dataclasses.asdict(cfg.costs),
        "negotiation": dataclasses.asdict(cfg.negotiation),
        "converged": {p: r.converged for p, r in bundle.results.items()},
        "iterations": {p: r.state.tau for p, r in bundle.results.items()},
        "all_converged": bundle.converged,
        "versions": {"p2pgrid": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
        "files": {f.name: _sha(f) for f in files},
    }
    m = out / "manifest.json"
    m.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    bundle.files = files + [m]
    return bundle.files
