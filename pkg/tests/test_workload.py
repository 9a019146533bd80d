import numpy as np
import pytest
from hypothesis import given, strategies as st

from dlcpsim.codec import BYTES_PER_GRADIENT
from dlcpsim.config import ConfigError, from_dict
from dlcpsim.engine import Simulator
from dlcpsim.scenario import simulate
from dlcpsim.workload import (BackgroundTraffic, LayerSpec, ModelProfile, SyncMode, SyncScheme,
                              SyntheticGradients, TaggingPolicy, TagMode, bundled_cdf,
                              bundled_profile, bundled_profiles, even_shares, format_profile,
                              importance_threshold, layer_priority, parse_profile, ps_pieces, tag,
                              tag_tensor)


def small_cfg(**workload):
    base = {"topology": {"n_core": 1, "n_tor": 1, "hosts_per_tor": 6},
            "workload": {"n_workers": 4, "iterations": 1, "compute_jitter": 0.0, **workload}}
    return from_dict(base)


# ------------------------------------------------------------------- profiles
def test_parse_and_format_round_trip():
    text = "# name: toy\n# loss_bound: 0.05\nlayer_index tensor_bytes bp_ns fp_ns\n0 400 10 5\n1 800 20 5\n"
    prof = parse_profile(text)
    assert prof.name == "toy" and prof.loss_tolerance_bound == 0.05
    assert prof.total_bytes == 1200 and prof.compute_ns == 40
    assert parse_profile(format_profile(prof)).layers == prof.layers


@pytest.mark.parametrize("text", [
    "0 400 10 5\n",
    "layer_index tensor_bytes bp_ns fp_ns\n",
    "layer_index tensor_bytes bp_ns fp_ns\n1 400 10 5\n",
    "layer_index tensor_bytes bp_ns fp_ns\n0 0 10 5\n",
    "layer_index tensor_bytes bp_ns fp_ns\n0 400 10\n",
])
def test_bad_profiles_rejected(text):
    with pytest.raises(ValueError):
        parse_profile(text)


def test_bundled_profiles_load():
    assert {"googlenet", "resnet50", "inceptionv3", "desk-incast"} <= set(bundled_profiles())
    for name in bundled_profiles():
        assert bundled_profile(name).n_layers >= 1


def test_googlenet_parameter_count():
    prof = bundled_profile("googlenet")
    params = prof.total_bytes / BYTES_PER_GRADIENT
    assert params == pytest.approx(6.8e6, rel=0.01)


def test_volume_scaling_keeps_compute():
    prof = bundled_profile("googlenet")
    half = prof.scaled(0.5)
    assert half.compute_ns == prof.compute_ns
    assert half.total_bytes == pytest.approx(prof.total_bytes / 2, rel=1e-3)


# -------------------------------------------------------------------- tagging
def test_layer_priority_examples():
    assert layer_priority(0, 50, 7) == 0
    assert layer_priority(49, 50, 7) == 6


@given(st.integers(1, 200), st.integers(1, 16), st.data())
def test_layer_priority_in_range_and_monotone(n_layers, p_data, data):
    a = data.draw(st.integers(0, n_layers - 1))
    b = data.draw(st.integers(a, n_layers - 1))
    pa, pb = layer_priority(a, n_layers, p_data), layer_priority(b, n_layers, p_data)
    assert 0 <= pa <= pb <= p_data - 1
    assert pa == min(p_data - 1, a * p_data // n_layers)


def test_zero_payload_is_droppable():
    prio, ecn = tag(np.zeros(350, np.float32), 3, 10, 0.5, TaggingPolicy())
    assert ecn is False and prio == layer_priority(3, 10, 7)


@pytest.mark.parametrize("seed", range(3))
def test_tag_tensor_about_half_important(seed):
    rng = np.random.default_rng(seed)
    n = 350 * 4000
    vals = SyntheticGradients().draw(n, rng)
    prios, ecn = tag_tensor(vals, n, 0, 1, TaggingPolicy(), 1400, rng)
    assert len(ecn) == 4000 and set(prios) == {1}
    assert np.mean(ecn) == pytest.approx(0.5, abs=0.05)


def test_iid_magnitudes_make_every_packet_important():
    # packet means of iid heavy-tailed magnitudes sit above the element median
    rng = np.random.default_rng(0)
    n = 350 * 1000
    vals = SyntheticGradients(correlation=0.0).draw(n, rng)
    _, ecn = tag_tensor(vals, n, 0, 1, TaggingPolicy(), 1400, rng)
    assert np.mean(ecn) > 0.95


def test_tag_tensor_flags_match_threshold():
    rng = np.random.default_rng(5)
    n = 350 * 50 + 17
    vals = SyntheticGradients().draw(n, rng)
    policy = TaggingPolicy(sample_fraction=0.1)
    _, ecn = tag_tensor(vals, n, 2, 4, policy, 1400, np.random.default_rng(9))
    thr = importance_threshold(vals, 0.1, np.random.default_rng(9))
    expect = [float(np.mean(np.abs(vals[i:i + 350]))) > thr for i in range(0, n, 350)]
    assert ecn == expect


def test_untagged_and_layer_modes():
    prios, ecn = tag_tensor(None, 700, 5, 10, TaggingPolicy(TagMode.NONE), 1400, np.random.default_rng())
    assert prios == [1, 1] and ecn == [False, False]
    prios, ecn = tag_tensor(None, 700, 9, 10, TaggingPolicy(TagMode.LAYER), 1400, np.random.default_rng())
    assert prios == [1 + layer_priority(9, 10, 7)] * 2 and not any(ecn)


# ---------------------------------------------------------------- sync scheme
def test_ring_with_servers_rejected():
    with pytest.raises(ValueError):
        SyncScheme(SyncMode.RING, 4, 2)
    with pytest.raises(ConfigError):
        from_dict({"workload": {"mode": "ring-allreduce", "n_servers": 2, "n_workers": 4}})


@given(st.integers(1, 10**7), st.integers(1, 16))
def test_ps_split_shares_within_one_gradient(grads, servers):
    pieces = ps_pieces(grads * BYTES_PER_GRADIENT, servers, 1, 0)
    sizes = [b // BYTES_PER_GRADIENT for _, b in pieces]
    assert sum(sizes) == grads
    if servers > 1:
        assert max(sizes) - min(sizes) <= 1


def test_small_tensor_goes_to_home_server():
    assert ps_pieces(1000, 4, 4 * 1024 * 1024, 2) == [(2, 1000)]


def test_even_shares():
    assert even_shares(10, 4) == [3, 3, 2, 2]


# --------------------------------------------------------------------- jobs
def test_single_worker_ps_has_no_network_traffic():
    cfg = small_cfg(n_workers=1, n_servers=1, placement="colocated", iterations=2)
    res = simulate(cfg, 1)
    assert res.training == []
    prof = bundled_profile(cfg.workload.profile)
    assert [i.end - i.start for i in res.iterations] == [prof.compute_ns] * 2


def test_ring_chunk_arithmetic():
    # one 4 MB tensor over 4 workers: each worker sends 6 chunks of 1 MB
    prof = ModelProfile("one", [LayerSpec(0, 4 * 1024 * 1024, 1000, 0)])
    from dlcpsim.fabric import Network, build_leaf_spine
    from dlcpsim.workload import RingJob, TransferService, TransportKind
    sim = Simulator(seed=1)
    topo = build_leaf_spine(1, 1, 4, 10e9, 10e9, 1000)
    net = Network(sim, topo)
    svc = TransferService(sim, net, TransportKind.DLCP)
    job = RingJob(sim, svc, prof, SyncScheme(SyncMode.RING, 4), topo.hosts)
    sim.run()
    assert job.finished
    for w in topo.hosts:
        sent = [r.bytes_offered for r in svc.records if r.src == w]
        assert sent == [1024 * 1024] * 6
    assert all(r.done for r in svc.records)


def test_traffic_volume_identical_across_transports():
    vols = {}
    for t in ("dlcp", "reliable"):
        cfg = small_cfg(n_workers=3, n_servers=1)
        cfg.run.transport = t
        res = simulate(cfg, 2)
        vols[t] = sorted((r.src, r.dst, r.bytes_offered) for r in res.training)
    assert vols["dlcp"] == vols["reliable"]


def test_layers_pushed_back_to_front():
    res = simulate(small_cfg(n_workers=2, n_servers=1), 1)
    first = {}
    for r in res.training:
        if r.stage == "push":
            layer = r.tensor_id // 1024
            first[layer] = min(first.get(layer, r.start), r.start)
    order = sorted(first, key=first.get)
    assert order == sorted(first, reverse=True)


# ---------------------------------------------------------------- background
class _NullService:
    def __init__(self):
        self.flows = []

    def transfer(self, src, dst, size, on_done, **kw):
        self.flows.append((src, dst, size))


def background(load, seed, seconds=20.0, capacity=40e9):
    sim = Simulator(seed=seed)
    svc = _NullService()
    bg = BackgroundTraffic(sim, svc, [[0, 1], [2, 3]], load, capacity, bundled_cdf(),
                           round(seconds * 1e9))
    sim.run()
    return bg, svc


def test_zero_load_no_flows():
    bg, svc = background(0.0, 1, seconds=1)
    assert svc.flows == [] and bg.offered_bytes == 0


def test_half_load_on_40g_link_calibrated():
    bg, svc = background(0.5, 7)
    rate = bg.offered_bytes * 8 / 20.0
    assert rate == pytest.approx(20e9, rel=0.05)
    assert all((s < 2) != (d < 2) for s, d, _ in svc.flows)


def test_seeds_give_different_arrivals():
    a, _ = background(0.3, 1, seconds=0.05)
    b, _ = background(0.3, 2, seconds=0.05)
    assert a.arrivals and a.arrivals != b.arrivals


def test_background_needs_two_racks():
    with pytest.raises(ValueError):
        BackgroundTraffic(Simulator(), _NullService(), [[0, 1]], 0.5, 1e9, bundled_cdf(), 10)
