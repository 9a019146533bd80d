import pytest
from hypothesis import given, settings, strategies as st

from dlcpsim.engine import NS_PER_MS, Simulator
from dlcpsim.fabric import Network, build_leaf_spine
from dlcpsim.metrics import FlowRecord
from dlcpsim.packet import TCP_OVERHEAD
from dlcpsim.transport.reliable import TcpConfig, TcpStack, dctcp_alpha

G = 10 ** 9


class DropNet(Network):
    def __init__(self, *a, drop=None, **kw):
        super().__init__(*a, **kw)
        self.drop = drop or (lambda p, n: False)
        self.tx = {}

    def send(self, pkt, packet_index=0, policy=None):
        if pkt.stats is not None:  # data segment
            n = self.tx[pkt.seq] = self.tx.get(pkt.seq, 0) + 1
            if self.drop(pkt, n):
                pkt.stats.drops_buffer += 1
                return
        super().send(pkt, packet_index, policy)


def transfer(nbytes, drop=None, cfg=None, until=None):
    sim = Simulator()
    topo = build_leaf_spine(1, 1, 2, 10 * G, 10 * G, 1000)
    net = DropNet(sim, topo, drop=drop)
    cfg = cfg or TcpConfig()
    stacks = [TcpStack(sim, net, net.hosts[h], cfg) for h in topo.hosts]
    rec = FlowRecord(1, "reliable", 0, 1, nbytes, 0)
    sender = stacks[0].open_and_send(1, 1, nbytes, rec)
    sim.run(until=until)
    return rec, sender, topo


def test_empty_path_reaches_line_rate():
    nbytes = 20_000_000
    rec, sender, topo = transfer(nbytes)
    assert rec.done and rec.timeouts == 0
    segs = sender.n_segments
    wire = nbytes + segs * TCP_OVERHEAD
    rtt = topo.path_rtt(0, 1)
    # closed-form ramp: slow start doubles from 10 segments each RTT until the pipe is full
    bdp_segs = 10 * G * rtt / 1e9 / (8 * (1460 + TCP_OVERHEAD))
    rounds = 0
    w = 10
    while w < bdp_segs:
        w *= 2
        rounds += 1
    ideal = wire * 8 / (10 * G) * 1e9 + (rounds + 1) * rtt
    assert rec.fct <= ideal / 0.9
    assert wire * 8 / (rec.fct * 1e-9) >= 0.9 * 10 * G


def test_tail_loss_recovered_only_by_timeout():
    nbytes = 100 * 1460
    rec, sender, _ = transfer(nbytes, drop=lambda p, n: p.seq == 99 and n == 1)
    assert rec.done and rec.timeouts == 1
    assert rec.fct >= 10 * NS_PER_MS


def test_middle_loss_fast_retransmit():
    rec, sender, _ = transfer(200 * 1460, drop=lambda p, n: p.seq == 50 and n == 1)
    assert rec.done and rec.timeouts == 0
    assert rec.fct < NS_PER_MS


def test_rto_min_governs_timeout():
    rec, sender, _ = transfer(10 * 1460, cfg=TcpConfig(rto_min=3 * NS_PER_MS),
                              drop=lambda p, n: p.seq == 9 and n == 1)
    assert 3 * NS_PER_MS <= rec.fct < 4 * NS_PER_MS


def test_dctcp_alpha_fixed_point():
    a = 1.0
    for _ in range(400):
        a = dctcp_alpha(a, 0.1, 1 / 16)
    assert a == pytest.approx(0.1, abs=1e-6)
    # closed form after k steps: F + (a0 - F)(1-g)^k
    assert dctcp_alpha(dctcp_alpha(1.0, 0.1, 0.5), 0.1, 0.5) == pytest.approx(0.1 + 0.9 * 0.25)


@given(st.floats(0, 1), st.lists(st.floats(0, 1), max_size=50), st.floats(1e-3, 1))
def test_dctcp_alpha_stays_in_unit_interval(a, fractions, g):
    for f in fractions:
        a = dctcp_alpha(a, f, g)
        assert 0 <= a <= 1


def test_bad_config_rejected():
    with pytest.raises(ValueError):
        TcpConfig(init_cwnd=0)


@settings(max_examples=30)
@given(st.sets(st.tuples(st.integers(0, 79), st.integers(1, 3)), max_size=25))
def test_exactly_once_in_order_delivery(losses):
    nbytes = 80 * 1460 - 17
    rec, sender, _ = transfer(nbytes, drop=lambda p, n: (p.seq, n) in losses)
    assert rec.done
    assert rec.bytes_delivered == rec.bytes_offered == nbytes
    assert sender.cwnd >= 1
    terms = rec.pkts_delivered + rec.drops_buffer + rec.drops_selective
    assert rec.pkts_sent == terms + rec.in_flight
