from pathlib import Path

import pytest
from hypothesis import given, strategies as st

from dlcpsim.config import from_dict
from dlcpsim.engine import NS_PER_MS
from dlcpsim.metrics import (COUNTER_COLUMNS, FLOW_COLUMNS, ITERATION_COLUMNS, FlowRecord,
                             IterationRecord, estimate_jct, fct_stats, nearest_rank, read_csv)
from dlcpsim.scenario import simulate, write_run


def test_nearest_rank_p99_of_one_to_hundred():
    st_ = fct_stats(list(range(1, 101)))
    assert st_["p99"] == 99 and st_["p50"] == 50 and st_["max"] == 100
    assert st_["mean"] == pytest.approx(50.5)


def test_single_record_statistics_coincide():
    r = FlowRecord(1, "dlcp", 0, 1, 100, 5, end=17)
    st_ = fct_stats([r])
    assert {st_["mean"], st_["p50"], st_["p95"], st_["p99"], st_["max"]} == {12}


def test_empty_and_bad_percentiles_rejected():
    with pytest.raises(ValueError):
        fct_stats([])
    with pytest.raises(ValueError):
        nearest_rank([1, 2], 0)


@given(st.lists(st.integers(0, 10**9), min_size=1, max_size=300), st.floats(0.1, 100))
def test_nearest_rank_is_an_order_statistic(values, pct):
    xs = sorted(values)
    v = nearest_rank(xs, pct)
    below = sum(1 for x in xs if x <= v)
    assert v in xs and below >= pct / 100 * len(xs) - 1e-9


def test_unfinished_flow_has_no_fct():
    with pytest.raises(ValueError):
        FlowRecord(1, "dlcp", 0, 1, 100, 5).fct


def test_jct_examples():
    assert estimate_jct(1, 10 * NS_PER_MS, 0) == 10 * NS_PER_MS
    assert estimate_jct(100, 10 * NS_PER_MS, 5 * NS_PER_MS) == 2_000 * NS_PER_MS


@given(st.integers(1, 500), st.floats(0, 0.5), st.integers(1, 10**8), st.integers(1, 10**8))
def test_jct_speedup_matches_explicit_multiplication(epochs, inflation, compute, network):
    slow = estimate_jct(epochs, compute, network)
    fast = estimate_jct(epochs * (1 + inflation), compute, network / 2)
    explicit = (epochs * (1 + inflation) * (compute + network)) / (epochs * (compute + 2 * network))
    assert fast / slow == pytest.approx(explicit, rel=1e-9)


def test_jct_rejects_bad_inputs():
    with pytest.raises(ValueError):
        estimate_jct(0, 1, 1)


def _incast(transport):
    cfg = from_dict({"run": {"transport": transport},
                     "topology": {"n_core": 1, "hosts_per_tor": 9},
                     "switch": {"buffer_bytes": 64 * 1024},
                     "workload": {"n_workers": 8, "iterations": 2}})
    return simulate(cfg, 1)


@pytest.fixture(scope="module")
def runs():
    return {t: _incast(t) for t in ("dlcp", "reliable")}


def test_counter_conservation(runs):
    for res in runs.values():
        for r in res.training:
            assert r.in_flight >= 0
            assert r.pkts_sent == (r.pkts_delivered + r.drops_selective + r.drops_buffer
                                   + r.drops_early + r.in_flight)


def test_delivery_invariants(runs):
    for r in runs["reliable"].training:
        assert r.done and r.end >= r.start and r.bytes_delivered == r.bytes_offered
    for r in runs["dlcp"].training:
        assert r.done and r.end >= r.start and r.timeouts == 0
        assert r.bytes_delivered >= (1 - r.loss_bound) * r.bytes_offered - 1e-9


def test_incast_actually_drops(runs):
    assert sum(r.drops_buffer for r in runs["dlcp"].training) > 0


def test_iteration_covers_its_slowest_flow(runs):
    for res in runs.values():
        assert len(res.iterations) == 2
        for it in res.iterations:
            flows = [r for r in res.training if r.iteration == it.iteration]
            assert it.comm_time >= max(r.fct for r in flows)
            assert it.end >= it.start


def test_csv_schemas(runs, tmp_path):
    out = write_run(runs["dlcp"], tmp_path)
    out = Path(out)
    heads = {}
    for name in ("flows.csv", "iterations.csv", "counters.csv"):
        heads[name] = (out / name).read_text().splitlines()[0].split(",")
    assert heads["flows.csv"] == list(FLOW_COLUMNS)
    assert heads["iterations.csv"] == list(ITERATION_COLUMNS)
    assert heads["counters.csv"] == list(COUNTER_COLUMNS)
    rows = read_csv(out / "flows.csv")
    assert len(rows) == len(runs["dlcp"].training)


def test_iteration_record_row():
    it = IterationRecord(0, 100, 900, 500, 300)
    assert it.comm_time == 600 and it.row()["comm_ns"] == 600
