import csv
import json

import numpy as np
import pytest

from p2pgrid.exceptions import ConfigError
from p2pgrid.grid import format_network, random_radial_network
from p2pgrid.scenario import (export_table, fmt, line_margin, load_config, parse_config,
                              run_scenarios, shipped_config, voltage_margin)

ROSTER = """peer_id, role, node, alpha, beta, gamma, p_min, p_max
S1, sell, 3, 2.0, 25, 0, 0, 5
S2, sell, 5, 1.5, 30, 0, 0, 5
B1, buy, 2, 20.0, 70, , 0, 3
B2, buy, 4, 25.0, 75, , 0, 3
B3, buy, 6, 30.0, 65, , 0, 3
"""

CONFIG = """[scenario]
id = {sid}
name = small
network = small.net
peers = small.csv
policies = {policies}
output = {out}
propositions = {props}
trace = true

[costs]
c_loss = 20
c_voltage = 1
c_congestion = 1
"""


@pytest.fixture
def small(tmp_path):
    (tmp_path / "small.net").write_text(format_network(random_radial_network(7, 42)))
    (tmp_path / "small.csv").write_text(ROSTER)

    def make(sid=2, policies="base, universal, causal", out="out", props="false"):
        f = tmp_path / f"s{sid}.ini"
        f.write_text(CONFIG.format(sid=sid, policies=policies, out=tmp_path / out, props=props))
        return f
    return make


def test_fmt():
    assert fmt(3.14159265) == "3.142"
    assert fmt(0.0) == "0"
    assert fmt(True) == "true"
    assert fmt(np.int64(7)) == "7"
    assert fmt(12345.678) == "1.235e+04"
    assert fmt("x") == "x"


def test_export_table_rows(tmp_path):
    p = export_table(["policy", "welfare"], [["base", 1.0], ["universal", 2.0], ["causal", 3.0]],
                     tmp_path / "t.csv")
    rows = list(csv.reader(p.open()))
    assert rows[0] == ["policy", "welfare"] and len(rows) == 4
    with pytest.raises(ValueError):
        export_table(["a", "b"], [[1]], tmp_path / "u.csv")


def test_export_table_parent_is_a_file(tmp_path):
    (tmp_path / "f").write_text("")
    with pytest.raises(OSError, match="f"):
        export_table(["a"], [[1]], tmp_path / "f" / "t.csv")


def test_export_table_missing_directory(tmp_path):
    with pytest.raises(OSError, match="cannot write table"):
        export_table(["a"], [[1]], tmp_path / "nope" / "t.csv")


def test_config_errors(small, tmp_path):
    for bad in ("policies = \n", "policies = base, greedy\n", "policies = base, base\n"):
        text = small().read_text().replace("policies = base, universal, causal\n", bad)
        with pytest.raises(ConfigError):
            parse_config(text, tmp_path)
    text = small().read_text()
    with pytest.raises(ConfigError):
        parse_config(text.replace("id = 2", "id = 3"), tmp_path)
    with pytest.raises(ConfigError):
        parse_config(text.replace("small.net", "missing.net"), tmp_path)
    with pytest.raises(ConfigError):
        parse_config(text.replace("c_loss = 20", "c_loss = abc"), tmp_path)
    with pytest.raises(ConfigError):
        parse_config(text.replace("[costs]", "[nothing]"), tmp_path)
    with pytest.raises(ConfigError):
        parse_config(text + "[negotiation]\nbogus = 1\n", tmp_path)
    with pytest.raises(ConfigError):
        parse_config(text + "[negotiation]\neta = 2\n", tmp_path)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nothing.ini")


def test_scenario_one_ignores_limits(small):
    cfg = load_config(small(sid=1))
    assert cfg.costs.c_voltage == 0 and cfg.costs.c_congestion == 0 and cfg.costs.c_loss == 20


def test_config_hash_ignores_output(small):
    a = load_config(small(out="a"))
    b = load_config(small(out="b"))
    c = load_config(small(), seed=3)
    assert a.config_hash == b.config_hash != c.config_hash


def test_negotiation_section(small, tmp_path):
    text = small().read_text() + "[negotiation]\nepsilon = 0.1\nmax_iter = 20\nrelinearize = yes\n"
    cfg = parse_config(text, tmp_path)
    assert cfg.negotiation.epsilon == 0.1 and cfg.negotiation.max_iter == 20
    assert cfg.negotiation.relinearize is True


def test_shipped_configs_resolve():
    for sid in (1, 2):
        cfg = load_config(shipped_config(sid))
        assert cfg.scenario_id == sid and cfg.network.is_file() and cfg.peers.is_file()
    with pytest.raises(ConfigError):
        shipped_config(3)


def test_end_to_end_and_byte_identical(small, tmp_path):
    first = run_scenarios(load_config(small(out="r1")))
    second = run_scenarios(load_config(small(out="r2")))
    assert first.converged
    names = sorted(f.name for f in first.files)
    assert names == sorted(["summary.csv", "volume_difference.csv", "unit_costs.csv",
                            "voltage_profile.csv", "line_loading.csv", "trace_base.csv",
                            "trace_universal.csv", "trace_causal.csv", "manifest.json"])
    for name in names:
        assert (tmp_path / "r1" / name).read_bytes() == (tmp_path / "r2" / name).read_bytes(), name
    rows = list(csv.reader((tmp_path / "r1" / "summary.csv").open()))
    assert [r[0] for r in rows[1:]] == ["base", "universal", "causal"]
    peers = list(csv.reader((tmp_path / "r1" / "volume_difference.csv").open()))
    assert [r[0] for r in peers[1:]] == ["S1", "S2", "B1", "B2", "B3"]
    man = json.loads((tmp_path / "r1" / "manifest.json").read_text())
    assert man["all_converged"] and set(man["files"]) == set(names) - {"manifest.json"}


def test_summary_traces_to_history(small, tmp_path):
    bundle = run_scenarios(load_config(small(out="t")))
    for pol, r in bundle.results.items():
        last = r.state.history[-1]
        assert last.total_volume == r.state.total_volume
        trace = list(csv.reader((tmp_path / "t" / f"trace_{pol}.csv").open()))
        assert float(trace[-1][4]) == r.state.total_volume
        assert int(trace[-1][0]) == r.state.tau


def test_parallel_workers_same_numbers(small, tmp_path):
    a = run_scenarios(load_config(small(out="w1")), workers=1)
    b = run_scenarios(load_config(small(out="w2")), workers=3)
    assert (tmp_path / "w1" / "summary.csv").read_bytes() == (tmp_path / "w2" / "summary.csv").read_bytes()
    assert a.results["causal"].welfare == b.results["causal"].welfare


def test_non_converged_runs_are_flagged(small, tmp_path):
    text = small(out="nc").read_text() + "[negotiation]\nmax_iter = 2\ninitial_price = 0\n"
    cfg = parse_config(text, tmp_path)
    bundle = run_scenarios(cfg)
    assert not bundle.converged
    man = json.loads((tmp_path / "nc" / "manifest.json").read_text())
    assert man["all_converged"] is False
    rows = list(csv.reader((tmp_path / "nc" / "summary.csv").open()))
    assert "false" in [r[1] for r in rows[1:]]


def test_propositions_report_written(small, tmp_path):
    bundle = run_scenarios(load_config(small(out="p", props="true")))
    assert bundle.propositions is not None and bundle.propositions.universal_bounded
    assert (tmp_path / "p" / "propositions.txt").read_text().startswith("W_opt=")


def test_margins_sign(small):
    bundle = run_scenarios(load_config(small(out="m")), write=False)
    r = bundle.results["base"]
    state, net = r.state.grid_state, bundle.net
    assert r.voltage_margin == voltage_margin(state, net)
    assert r.line_margin == line_margin(state, net) == 100.0  # random feeders are unrated
