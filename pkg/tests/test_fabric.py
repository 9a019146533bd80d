import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from dlcpsim.engine import Simulator
from dlcpsim.fabric import (FlowKey, LbPolicy, Network, TopologyError, build_leaf_spine,
                            delay_for_base_rtt, ecmp_hash, mix64, path_index, select_path)
from dlcpsim.packet import MIN_PACKET_BYTES, Channel, Packet, Proto

G = 10 ** 9


def test_splitmix64_reference_vector():
    # first output of the published SplitMix64 generator seeded with 0
    assert mix64(0) == 0xE220A8397B1DCDAF


def test_ecmp_hash_frozen():
    assert ecmp_hash(0, 1, 2, 3) == 1470200354583225620


def test_144_host_fabric_base_rtt():
    d = delay_for_base_rtt(85_200, 100 * G, 100 * G)
    topo = build_leaf_spine(4, 9, 16, 100 * G, 100 * G, d)
    assert len(topo.hosts) == 144
    rtt = topo.path_rtt(0, 16)
    assert abs(rtt - 85_200) < 8  # integer division of the delay across 8 links
    assert len(topo.equal_cost_paths(0, 16)) == 4


def test_rtt_is_eight_delays_plus_serialization():
    topo = build_leaf_spine(4, 2, 2, 10 * G, 40 * G, 1000)
    ser = 2 * (2 * -(-MIN_PACKET_BYTES * 8 // 10) + 2 * -(-MIN_PACKET_BYTES * 8 // 40))
    assert topo.path_rtt(0, 2) == 8 * 1000 + ser


def test_oversubscribed_fabric_shape():
    topo = build_leaf_spine(4, 8, 16, 40 * G, 40 * G, 1000)
    assert len(topo.core_switches) == 4 and len(topo.tor_switches) == 8
    # 16 host links of 40G under each ToR vs 4 core uplinks of 40G
    assert (16 * 40) / (4 * 40) == 4


def test_single_switch_single_path():
    topo = build_leaf_spine(1, 1, 2, 10 * G, 10 * G, 100)
    paths = topo.equal_cost_paths(0, 1)
    assert len(paths) == 1
    k = FlowKey(0, 1, 5)
    for pol in LbPolicy:
        assert select_path(k, 3, pol, topo) == paths[0]


def test_zero_counts_rejected():
    with pytest.raises(TopologyError):
        build_leaf_spine(0, 1, 1, G, G, 0)


def test_every_tor_reaches_every_core_and_links_symmetric():
    topo = build_leaf_spine(3, 4, 2, G, G, 5)
    ends = {(l.a, l.b) for l in topo.links}
    assert all((b, a) in ends for a, b in ends)
    for t in topo.tor_switches:
        for c in topo.core_switches:
            assert (t, c) in ends
    for h in topo.hosts:
        assert sum(1 for l in topo.links if l.a == h) == 1


def test_ecmp_constant_per_flow():
    topo = build_leaf_spine(4, 2, 2, G, G, 5)
    k = FlowKey(0, 2, 11)
    routes = {select_path(k, i, LbPolicy.PER_FLOW_ECMP, topo, seed=3) for i in range(1000)}
    assert len(routes) == 1


def test_round_robin_cycles():
    assert [path_index(FlowKey(0, 2, 1), i, LbPolicy.ROUND_ROBIN, 4) for i in range(8)] == \
        [0, 1, 2, 3, 0, 1, 2, 3]


def test_spray_is_uniform():
    k = FlowKey(0, 9, 4)
    n = 10 ** 5
    counts = np.bincount([path_index(k, i, LbPolicy.PER_PACKET_SPRAY, 4, 7) for i in range(n)],
                         minlength=4)
    assert np.all(np.abs(counts / n - 0.25) <= 0.01)
    assert stats.chisquare(counts).pvalue > 1e-3


@given(st.integers(0, 3), st.integers(0, 3))
def test_intra_rack_never_uses_core(a, b):
    topo = build_leaf_spine(4, 2, 4, G, G, 5)
    if a == b:
        return
    for path in topo.equal_cost_paths(a, b):
        for lid in path:
            link = topo.links[lid]
            assert link.a not in topo.core_switches and link.b not in topo.core_switches


@given(st.integers(1, 2000), st.integers(0, 2 ** 32))
def test_spray_counts_within_binomial_bounds(n, seed):
    k = FlowKey(1, 6, seed % 97)
    counts = np.bincount([path_index(k, i, LbPolicy.PER_PACKET_SPRAY, 4, seed) for i in range(n)],
                         minlength=4)
    sd = np.sqrt(n * 0.25 * 0.75)
    assert np.all(np.abs(counts - n / 4) <= 6 * sd + 1)


def test_network_delivers_along_chosen_path():
    sim = Simulator()
    topo = build_leaf_spine(2, 2, 1, 10 * G, 10 * G, 500)
    net = Network(sim, topo, policy=LbPolicy.ROUND_ROBIN)
    got = []
    net.hosts[1].bind(3, lambda p: got.append((sim.now, p.route)))
    for i in range(2):
        net.send(Packet(Proto.DLCP, Channel.DATA, 3, 0, 1, 1000, 1), packet_index=i)
    sim.run()
    assert len(got) == 2
    assert got[0][1] != got[1][1]
