"""Build a simulation from a :class:`RunConfig`, run it, and write result files."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

from .config import WIRE_MTU, RunConfig
from .engine import NS_PER_MS, NS_PER_US, Simulator
from .fabric import FlowKey, LbPolicy, Network, PortSettings, Topology, build_leaf_spine, path_index
from .metrics import (FlowRecord, IterationRecord, fct_stats, write_counters, write_flows,
                      write_iterations)
from .switch import SwitchPort, ThresholdLadder
from .transport.dlcp import DlcpConfig
from .transport.reliable import TcpConfig
from .workload import (BackgroundTraffic, PsJob, RingJob, SyncScheme, SyntheticGradients,
                       TaggingPolicy, TransferService, bundled_cdf, resolve_profile)

SUMMARY_COLUMNS = (
    "variant", "seed", "transport", "flows", "completed", "mean_ns", "p50_ns", "p95_ns",
    "p99_ns", "max_ns", "timeout_flows", "timeouts", "retransmit_rounds", "drops_selective",
    "drops_buffer", "drops_early", "comm_ns_mean", "compute_ns_mean", "iterations",
)


@dataclass
class RunResult:
    config: RunConfig
    seed: int
    records: list[FlowRecord]
    iterations: list[IterationRecord]
    ports: list[SwitchPort]
    topology: Topology
    sim_time: int
    events: int
    background_offered: int = 0
    variant: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def training(self) -> list[FlowRecord]:
        return [r for r in self.records if r.category == "training"]

    @property
    def background(self) -> list[FlowRecord]:
        return [r for r in self.records if r.category == "background"]

    def summary(self) -> dict:
        flows = self.training
        done = [r for r in flows if r.done]
        row = {"variant": self.variant or self.config.run.name, "seed": self.seed,
               "transport": self.config.run.transport, "flows": len(flows), "completed": len(done)}
        if done:
            st = fct_stats(done)
            row.update(mean_ns=round(st["mean"]), p50_ns=st["p50"], p95_ns=st["p95"],
                       p99_ns=st["p99"], max_ns=st["max"])
        else:
            row.update(mean_ns="", p50_ns="", p95_ns="", p99_ns="", max_ns="")
        row["timeout_flows"] = sum(1 for r in flows if r.timeouts)
        for key in ("timeouts", "retransmit_rounds", "drops_selective", "drops_buffer", "drops_early"):
            row[key] = sum(getattr(r, key) for r in flows)
        its = self.iterations
        row["comm_ns_mean"] = round(sum(i.comm_time for i in its) / len(its)) if its else ""
        row["compute_ns_mean"] = round(sum(i.compute_time for i in its) / len(its)) if its else ""
        row["iterations"] = len(its)
        return row


def read_threshold_file(path: str | Path, n_queues: int) -> tuple[list, list]:
    """Per-queue (thresholds, capacities) in bytes from an optimizer CSV.

    Optimizer queue ``i`` (1-based) maps to switch data queue ``i``; S and L
    are in packets and are converted with the wire MTU.
    """
    thresholds: list = [None] * n_queues
    capacities: list = [None] * n_queues
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            q = int(row["queue"])
            if not 1 <= q < n_queues:
                raise ValueError(f"{path}: queue {q} outside data queues 1..{n_queues - 1}")
            thresholds[q] = int(row["S"]) * WIRE_MTU
            capacities[q] = int(row["L"]) * WIRE_MTU
    return thresholds, capacities


def port_settings(cfg: RunConfig) -> PortSettings:
    sw = cfg.switch
    thresholds = capacities = None
    if sw.thresholds == "uniform":
        thresholds = [sw.buffer_bytes] + [sw.threshold_packets * WIRE_MTU] * (sw.n_queues - 1)
    elif sw.thresholds == "ladder":
        thresholds = ThresholdLadder(sw.ladder_base_bytes, sw.ladder_step, sw.n_queues).thresholds(
            sw.shared_pool_bytes or sw.buffer_bytes)
    elif sw.thresholds == "file":
        thresholds, capacities = read_threshold_file(sw.thresholds_file, sw.n_queues)
    return PortSettings(n_queues=sw.n_queues, buffer_bytes=sw.buffer_bytes, thresholds=thresholds,
                        capacities=capacities, shared_pool_bytes=sw.shared_pool_bytes)


def build_topology(cfg: RunConfig) -> Topology:
    t = cfg.topology
    return build_leaf_spine(t.n_core, t.n_tor, t.hosts_per_tor, round(t.host_link_gbps * 1e9),
                            round(t.core_link_gbps * 1e9), t.link_delay_ns)


def base_rtt(topo: Topology) -> int:
    a = topo.hosts[0]
    far = [h for h in topo.hosts if topo.host_tor[h] != topo.host_tor[a]]
    return topo.path_rtt(a, far[0] if far else topo.hosts[1])


def dlcp_config(cfg: RunConfig) -> DlcpConfig:
    t = cfg.transport
    return DlcpConfig(loss_bound=t.loss_bound, pull_factor=t.pull_factor, delta=t.delta,
                      period_ns=round(t.period_us * NS_PER_US), ai_fraction=t.ai_fraction,
                      signal_timeout_mult=t.signal_timeout_mult, mtu_payload=t.mtu_payload)


def tcp_config(cfg: RunConfig) -> TcpConfig:
    b = cfg.baseline
    return TcpConfig(mss=b.mss, init_cwnd=b.init_window, rto_min=round(b.rto_min_ms * NS_PER_MS),
                     dupack_threshold=b.dupack_threshold, ecn=b.ecn_mode != "off",
                     dctcp=b.ecn_mode == "dctcp", dctcp_g=b.dctcp_g)


def place(cfg: RunConfig, topo: Topology) -> tuple[list[int], list[int]]:
    """Worker and server hosts. Servers are dedicated hosts after the workers,
    or share every ``n_workers / n_servers``-th worker host when colocated."""
    w = cfg.workload
    workers = topo.hosts[: w.n_workers]
    if w.mode == "ring-allreduce":
        return workers, []
    n_servers = w.n_servers or 1
    if w.placement == "colocated":
        stride = max(1, w.n_workers // n_servers)
        return workers, [workers[(i * stride) % len(workers)] for i in range(n_servers)]
    return workers, topo.hosts[w.n_workers: w.n_workers + n_servers]


def bulk_pairs(cfg: RunConfig, topo: Topology) -> list[tuple[int, int]]:
    """Host ``i`` of rack 0 sends to host ``i`` of rack 1."""
    k = cfg.topology.hosts_per_tor
    return [(topo.hosts[i], topo.hosts[k + i]) for i in range(cfg.workload.n_workers)]


class BulkJob:
    """Simultaneous inter-rack bulk flows, one per pair, all started at t=0."""

    def __init__(self, sim: Simulator, service: TransferService, pairs, n_bytes: int, on_finish):
        self.records: list[IterationRecord] = []
        self._left = len(pairs)
        self._on_finish = on_finish
        for src, dst in pairs:
            service.transfer(src, dst, n_bytes, self._done, category="training")

    def _done(self, _rec) -> None:
        self._left -= 1
        if self._left == 0:
            self._on_finish(self)


def colliding_hash_seed(cfg: RunConfig, first_flow_id: int = 1, limit: int = 10_000) -> int:
    """Smallest ECMP hash seed under which two bulk flows share a core path."""
    topo = build_topology(cfg)
    pairs = bulk_pairs(cfg, topo)
    n_paths = len(topo.equal_cost_paths(*pairs[0]))
    for seed in range(limit):
        idx = [path_index(FlowKey(s, d, first_flow_id + i), 0, LbPolicy.PER_FLOW_ECMP, n_paths, seed)
               for i, (s, d) in enumerate(pairs)]
        if len(set(idx)) < len(idx):
            return seed
    raise ValueError(f"no colliding hash seed below {limit}")


def simulate(cfg: RunConfig, seed: int, variant: str = "") -> RunResult:
    sim = Simulator(seed)
    topo = build_topology(cfg)
    net = Network(sim, topo, port_settings(cfg), LbPolicy(cfg.switch.lb_policy), cfg.switch.hash_seed)
    w = cfg.workload
    service = TransferService(
        sim, net, cfg.run.transport, dlcp=dlcp_config(cfg), tcp=tcp_config(cfg),
        tagging=TaggingPolicy(w.tagging, cfg.switch.n_queues, w.sample_fraction),
        gradients=SyntheticGradients(w.magnitude_sigma, w.magnitude_correlation),
        base_rtt=base_rtt(topo))
    profile = resolve_profile(w.profile)
    if w.volume_scale != 1:
        profile = profile.scaled(w.volume_scale)
    stop = lambda _job: sim.stop()
    if w.mode == "bulk":
        job = BulkJob(sim, service, bulk_pairs(cfg, topo), w.bulk_bytes, stop)
    else:
        workers, servers = place(cfg, topo)
        scheme = SyncScheme(w.mode, w.n_workers, w.n_servers if w.mode == "ps" else None,
                            w.split_threshold_bytes)
        job_cls = PsJob if w.mode == "ps" else RingJob
        peers = (servers,) if w.mode == "ps" else ()
        job = job_cls(sim, service, profile, scheme, workers, *peers, w.iterations,
                      w.compute_jitter, on_finish=stop)
    stop_at = round(cfg.run.stop_ms * NS_PER_MS) if cfg.run.stop_ms else None
    bg = None
    if cfg.background.load > 0:
        racks: dict[int, list[int]] = {}
        for h in topo.hosts:
            racks.setdefault(topo.host_tor[h], []).append(h)
        t = cfg.topology
        capacity = t.n_tor * t.n_core * t.core_link_gbps * 1e9
        bg = BackgroundTraffic(sim, service, list(racks.values()), cfg.background.load, capacity,
                               bundled_cdf(cfg.background.distribution),
                               stop_at if stop_at is not None else 10**15, cfg.background.transport)
    st = sim.run(until=stop_at)
    return RunResult(cfg, seed, service.records, job.records, net.switch_ports(), topo, st.clock,
                     st.processed, bg.offered_bytes if bg else 0, variant)


def write_summary(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(SUMMARY_COLUMNS), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r)


def write_run(result: RunResult, out: Path) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    cfg = result.config.model_copy(deep=True)
    cfg.run.seeds = [result.seed]
    (out / "config.toml").write_text(cfg.to_toml())
    write_flows(out / "flows.csv", result.records)
    write_iterations(out / "iterations.csv", result.iterations)
    write_counters(out / "counters.csv", result.ports)
    write_summary(out / "summary.csv", [result.summary()])
    return out


def run_and_write(cfg: RunConfig, seed: int, out: Path, variant: str = "") -> dict:
    """Simulate one seed and write its directory; returns the summary row."""
    result = simulate(cfg, seed, variant)
    write_run(result, out)
    return result.summary()
