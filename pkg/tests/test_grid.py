import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from p2pgrid.exceptions import LimitError, NetworkFileError, SingularBranchError, TopologyError
from p2pgrid.grid import (PerUnit, RadialNetwork, base_injection, build_admittance, format_network,
                          load_network, parse_network, random_radial_network)

from conftest import two_node

TWO_NODE = """
[header]
base_power, 10
base_voltage, 12.66
impedance_unit, pu
[nodes]
index, p_load, q_load, v_min, v_max
0, 0, 0, ,
1, 1.0, 0.5, 0.95, 1.05
[lines]
index, from, to, r, x, s_max, s_min
0, 0, 1, 0.1, 0.1, , 0
"""


def test_ieee33_shape(net33):
    assert net33.n_nodes == 33
    assert net33.n_lines == 32
    # every node reaches the slack
    for n in range(1, 33):
        assert net33.from_node[net33.path_to_slack(n)[-1]] == 0
    assert net33.base_power == 10.0 and net33.base_voltage == 12.66


def test_ieee33_base_loads(net33):
    # 3.715 MW and 2.3 MVAr in total
    assert np.isclose(net33.p_load.sum() * 10, 3.715)
    assert np.isclose(net33.q_load.sum() * 10, 2.3)


def test_two_node_file():
    net = parse_network(TWO_NODE)
    assert net.n_nodes == 2 and net.n_lines == 1
    assert np.isclose(net.p_load[1], 0.1)  # 1 MW on a 10 MVA base
    assert np.isinf(net.s_max[0])
    # blank band on the slack row falls back to the default
    assert net.v_min[0] == 0.95 and net.v_max[0] == 1.05


def test_loop_is_topology_error():
    text = TWO_NODE.replace("0, 0, 1, 0.1, 0.1, , 0", "0, 0, 1, 0.1, 0.1, , 0\n1, 0, 1, 0.1, 0.1, , 0")
    with pytest.raises(TopologyError):
        parse_network(text)


def test_disconnected_node_is_topology_error():
    with pytest.raises(TopologyError):
        RadialNetwork(p_load=[0, 0, 0], q_load=[0, 0, 0], v_min=[0.9] * 3, v_max=[1.1] * 3,
                      from_node=[1, 0], to_node=[2, 0], r=[0.1, 0.1], x=[0.1, 0.1],
                      s_max=[np.inf] * 2, s_min=[0, 0])


def test_malformed_row_reports_line():
    text = TWO_NODE.replace("1, 1.0, 0.5, 0.95, 1.05", "1, one, 0.5, 0.95, 1.05")
    with pytest.raises(NetworkFileError) as err:
        parse_network(text)
    assert err.value.line is not None


def test_inverted_band_is_limit_error():
    with pytest.raises(LimitError):
        parse_network(TWO_NODE.replace("0.95, 1.05", "1.05, 0.95"))


def test_missing_file(tmp_path):
    with pytest.raises(NetworkFileError):
        load_network(tmp_path / "nope.net")


def test_single_line_admittance():
    Y = build_admittance(two_node(0.1, 0.1))
    assert np.isclose(Y[0, 1], -(5 - 5j))
    assert np.isclose(Y[1, 1], 5 - 5j)


def test_zero_impedance_line():
    with pytest.raises(SingularBranchError):
        build_admittance(two_node(0.0, 0.0))


def test_ieee33_admittance_structure(net33):
    Y = net33.admittance
    assert np.allclose(Y, Y.T, atol=0, rtol=0)
    assert np.max(np.abs(Y.sum(axis=1))) < 1e-12
    off = np.count_nonzero(np.triu(Y, 1))
    assert off == 32


def test_base_injection_signs(net33):
    s = base_injection(net33).s
    assert s[0] == 0
    assert np.all(s.real[1:] <= 0)


def test_format_round_trip(net33):
    again = parse_network(format_network(net33))
    for name in ("p_load", "q_load", "v_min", "v_max", "r", "x", "s_max", "s_min",
                 "from_node", "to_node"):
        assert np.allclose(getattr(again, name), getattr(net33, name), rtol=1e-14, atol=0)


def test_ohm_and_pu_files_agree(net33):
    pu = net33.per_unit
    z_ohm = pu.impedance_from_pu(net33.r[0])
    assert np.isclose(z_ohm, 0.0922, atol=1e-12)


@given(st.floats(0.1, 1000), st.floats(0.1, 500), st.floats(-1e3, 1e3))
def test_per_unit_round_trip(base_power, base_voltage, value):
    pu = PerUnit(base_power, base_voltage)
    assert np.isclose(pu.power_to_pu(pu.power_from_pu(value)), value, rtol=1e-12, atol=1e-12)
    assert np.isclose(pu.impedance_to_pu(pu.impedance_from_pu(value)), value, rtol=1e-12, atol=1e-12)
    assert np.isclose(pu.voltage_to_pu(pu.voltage_from_pu(value)), value, rtol=1e-12, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 40), st.integers(0, 2 ** 32 - 1))
def test_random_networks_are_radial(n, seed):
    net = random_radial_network(n, seed)
    assert net.n_lines == net.n_nodes - 1
    # parent pointers always lead to the slack
    for node in range(1, n):
        assert len(net.path_to_slack(node)) >= 1
    assert np.max(np.abs(net.admittance.sum(axis=1))) < 1e-9


def test_single_node_network_rejected():
    with pytest.raises(TopologyError):
        random_radial_network(1)
