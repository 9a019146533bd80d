"""Training traffic: model profiles, tagging, PS and ring jobs, background load."""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.signal import lfilter

from .codec import BYTES_PER_GRADIENT, TensorSpec, gradients_per_packet
from .engine import Simulator
from .fabric import Network
from .metrics import FlowRecord, IterationRecord
from .transport.dlcp import DlcpConfig, DlcpStack, Stage, effective_bound
from .transport.reliable import TcpConfig, TcpStack

PROFILE_HEADER = "layer_index tensor_bytes bp_ns fp_ns"
DEFAULT_SPLIT_THRESHOLD = 4 * 1024 * 1024


# --------------------------------------------------------------------- profiles
@dataclass(frozen=True)
class LayerSpec:
    index: int
    tensor_bytes: int
    bp_ns: int
    fp_ns: int


@dataclass
class ModelProfile:
    name: str
    layers: list[LayerSpec]
    loss_tolerance_bound: float = 0.10

    def __post_init__(self):
        if not self.layers:
            raise ValueError(f"profile {self.name!r} has no layers")
        for i, layer in enumerate(self.layers):
            if layer.index != i:
                raise ValueError(f"profile {self.name!r}: layer {i} has index {layer.index}")
            if layer.tensor_bytes <= 0 or layer.bp_ns < 0 or layer.fp_ns < 0:
                raise ValueError(f"profile {self.name!r}: bad values in layer {i}")

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def total_bytes(self) -> int:
        return sum(l.tensor_bytes for l in self.layers)

    @property
    def compute_ns(self) -> int:
        return sum(l.bp_ns + l.fp_ns for l in self.layers)

    def scaled(self, factor: float) -> "ModelProfile":
        """Scale tensor volume (compression analog); compute times are kept."""
        if factor <= 0:
            raise ValueError("volume factor must be positive")
        layers = []
        for l in self.layers:
            grads = max(1, round(l.tensor_bytes * factor / BYTES_PER_GRADIENT))
            layers.append(replace(l, tensor_bytes=grads * BYTES_PER_GRADIENT))
        return ModelProfile(f"{self.name}x{factor:g}", layers, self.loss_tolerance_bound)


def parse_profile(text: str, name: str = "profile") -> ModelProfile:
    """Parse the line-oriented profile format.

    Blank lines and ``#`` comments are ignored. ``# loss_bound: 0.1`` sets the
    documented tolerance. The first non-comment line must be the header
    ``layer_index tensor_bytes bp_ns fp_ns``.
    """
    bound = 0.10
    layers = []
    header_seen = False
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if body.startswith("loss_bound:"):
                bound = float(body.split(":", 1)[1])
            elif body.startswith("name:"):
                name = body.split(":", 1)[1].strip()
            continue
        if not header_seen:
            if line.split() != PROFILE_HEADER.split():
                raise ValueError(f"{name}:{lineno}: expected header {PROFILE_HEADER!r}")
            header_seen = True
            continue
        parts = line.split()
        if len(parts) != 4:
            raise ValueError(f"{name}:{lineno}: expected 4 fields, got {len(parts)}")
        try:
            layers.append(LayerSpec(*(int(p) for p in parts)))
        except ValueError:
            raise ValueError(f"{name}:{lineno}: non-integer field") from None
    return ModelProfile(name, layers, bound)


def load_profile(path: str | Path) -> ModelProfile:
    path = Path(path)
    return parse_profile(path.read_text(), path.stem)


def bundled_profiles() -> list[str]:
    root = resources.files("dlcpsim") / "profiles"
    return sorted(p.name[:-4] for p in root.iterdir() if p.name.endswith(".txt"))


def bundled_profile(name: str) -> ModelProfile:
    res = resources.files("dlcpsim") / "profiles" / f"{name}.txt"
    if not res.is_file():
        raise ValueError(f"unknown bundled profile {name!r}; have {bundled_profiles()}")
    return parse_profile(res.read_text(), name)


def resolve_profile(name_or_path: str) -> ModelProfile:
    if Path(name_or_path).suffix == ".txt" and Path(name_or_path).exists():
        return load_profile(name_or_path)
    return bundled_profile(name_or_path)


def format_profile(profile: ModelProfile) -> str:
    lines = [f"# name: {profile.name}", f"# loss_bound: {profile.loss_tolerance_bound:g}",
             PROFILE_HEADER]
    lines += [f"{l.index} {l.tensor_bytes} {l.bp_ns} {l.fp_ns}" for l in profile.layers]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------- tagging
class TagMode(str, Enum):
    NONE = "none"
    LAYER = "layer"
    LAYER_MAGNITUDE = "layer+magnitude"


@dataclass
class TaggingPolicy:
    mode: TagMode = TagMode.LAYER_MAGNITUDE
    n_priorities: int = 8
    sample_fraction: float = 0.001

    def __post_init__(self):
        self.mode = TagMode(self.mode)
        if self.n_priorities < 2:
            raise ValueError("need at least one data queue besides the signal queue")
        if not 0 < self.sample_fraction <= 1:
            raise ValueError("sample fraction must be in (0, 1]")

    @property
    def data_queues(self) -> int:
        return self.n_priorities - 1


def layer_priority(layer: int, n_layers: int, p_data: int) -> int:
    """Data priority ``floor(layer * P / L)`` clamped to ``[0, P-1]`` (0 = front layer)."""
    return min(p_data - 1, max(0, (layer * p_data) // n_layers))


def importance_threshold(values: np.ndarray, sample_fraction: float, rng: np.random.Generator) -> float:
    n = len(values)
    k = min(n, max(1, round(n * sample_fraction)))
    idx = rng.choice(n, size=k, replace=False)
    return float(np.median(np.abs(values[idx])))


def tag(payload: np.ndarray, layer: int, n_layers: int, threshold: float,
        policy: TaggingPolicy) -> tuple[int, bool]:
    """Data priority and ECN-capable (important) flag for one packet payload."""
    prio = layer_priority(layer, n_layers, policy.data_queues)
    important = bool(payload.size) and float(np.mean(np.abs(payload))) > threshold
    return prio, important


def tag_tensor(values: Optional[np.ndarray], n_gradients: int, layer: int, n_layers: int,
               policy: TaggingPolicy, mtu_payload: int, rng: np.random.Generator,
               ) -> tuple[list[int], list[bool]]:
    """Header priorities (queue index, signal queue excluded) and ECN flags per packet."""
    per = gradients_per_packet(mtu_payload)
    n_pkts = -(-n_gradients // per)
    if policy.mode is TagMode.NONE:
        return [1] * n_pkts, [False] * n_pkts
    prio = 1 + layer_priority(layer, n_layers, policy.data_queues)
    if policy.mode is TagMode.LAYER or values is None:
        return [prio] * n_pkts, [False] * n_pkts
    thr = importance_threshold(values, policy.sample_fraction, rng)
    starts = np.arange(0, n_gradients, per)
    sums = np.add.reduceat(np.abs(values), starts)
    counts = np.diff(np.append(starts, n_gradients))
    important = (sums / counts) > thr
    return [prio] * n_pkts, important.tolist()


@dataclass
class SyntheticGradients:
    """Spatially correlated log-normal magnitudes with random signs."""

    sigma: float = 1.0
    correlation: float = 0.999

    def __post_init__(self):
        if self.sigma < 0 or not 0 <= self.correlation < 1:
            raise ValueError("sigma >= 0 and correlation in [0, 1) required")

    def draw(self, n: int, rng: np.random.Generator) -> np.ndarray:
        rho = self.correlation
        z = lfilter([math.sqrt(1 - rho * rho)], [1.0, -rho], rng.standard_normal(n))
        mags = np.exp(self.sigma * z).astype(np.float32)
        signs = np.where(rng.random(n) < 0.5, -1.0, 1.0).astype(np.float32)
        return mags * signs


# -------------------------------------------------------------------- transfers
class TransportKind(str, Enum):
    DLCP = "dlcp"
    RELIABLE = "reliable"


class TransferService:
    """Opens flows on either transport and records them.

    Flow ids are allocated here, so one service must be shared by every
    traffic source in a run.
    """

    def __init__(self, sim: Simulator, net: Network, kind: TransportKind, *,
                 dlcp: Optional[DlcpConfig] = None, tcp: Optional[TcpConfig] = None,
                 tagging: Optional[TaggingPolicy] = None,
                 gradients: Optional[SyntheticGradients] = None,
                 base_rtt: Optional[int] = None):
        self.sim = sim
        self.net = net
        self.kind = TransportKind(kind)
        self.dlcp_cfg = dlcp or DlcpConfig()
        self.tcp_cfg = tcp or TcpConfig()
        self.tagging = tagging or TaggingPolicy(TagMode.NONE)
        self.gradients = gradients or SyntheticGradients()
        self.rng = sim.rng.stream("tagging")
        self.grad_rng = sim.rng.stream("gradients")
        self.records: list[FlowRecord] = []
        self._next_flow = 1
        line_rate = {h: net.port(h, net.topo.host_tor[h]).bandwidth for h in net.topo.hosts}
        if base_rtt is None:
            hosts = net.topo.hosts
            base_rtt = max(net.topo.path_rtt(hosts[0], h) for h in hosts[1:]) if len(hosts) > 1 else 1
        self.dlcp = {h: DlcpStack(sim, net, host, self.dlcp_cfg, line_rate[h], base_rtt)
                     for h, host in net.hosts.items()}
        self.tcp = {h: TcpStack(sim, net, host, self.tcp_cfg) for h, host in net.hosts.items()}

    def transfer(self, src: int, dst: int, n_bytes: int, on_done: Callable, *,
                 stage: Stage = Stage.PUSH, layer: int = 0, n_layers: int = 1,
                 iteration: int = -1, category: str = "training",
                 kind: Optional[TransportKind] = None, tensor_id: int = 0) -> Optional[FlowRecord]:
        """Send ``n_bytes`` from ``src`` to ``dst``; ``on_done(record)`` fires at completion.

        Loopback transfers complete immediately and are not recorded.
        """
        if src == dst:
            self.sim.schedule_in(0, on_done, None)
            return None
        kind = TransportKind(kind or self.kind)
        flow_id = self._next_flow
        self._next_flow += 1
        stage = Stage(stage)
        if kind is TransportKind.DLCP:
            cfg = self.dlcp_cfg
            p = effective_bound(stage, cfg.loss_bound, cfg.pull_factor)
            n_grad = max(1, -(-n_bytes // BYTES_PER_GRADIENT))
            rec = FlowRecord(flow_id, kind.value, src, dst, n_grad * BYTES_PER_GRADIENT, self.sim.now,
                             category, iteration, tensor_id, stage.value, p)
            values = None
            if self.tagging.mode is TagMode.LAYER_MAGNITUDE:
                values = self.gradients.draw(n_grad, self.grad_rng)
            prios, ecn = tag_tensor(values, n_grad, layer, n_layers, self.tagging,
                                    cfg.mtu_payload, self.rng)
            self.records.append(rec)
            self.dlcp[src].open_and_send(flow_id, dst, TensorSpec(tensor_id, n_grad, layer),
                                         p, rec, prios, ecn, on_done)
        else:
            rec = FlowRecord(flow_id, kind.value, src, dst, n_bytes, self.sim.now,
                             category, iteration, tensor_id, stage.value, 0.0)
            self.records.append(rec)
            self.tcp[src].open_and_send(flow_id, dst, n_bytes, rec, on_done)
        return rec


# ------------------------------------------------------------------------- jobs
class SyncMode(str, Enum):
    PS = "ps"
    RING = "ring-allreduce"


@dataclass
class SyncScheme:
    mode: SyncMode
    n_workers: int
    n_servers: Optional[int] = None
    split_threshold: int = DEFAULT_SPLIT_THRESHOLD

    def __post_init__(self):
        self.mode = SyncMode(self.mode)
        if self.n_workers < 1:
            raise ValueError("need at least one worker")
        if self.mode is SyncMode.RING:
            if self.n_servers:
                raise ValueError("ring-allreduce takes no parameter servers")
        else:
            if self.n_servers is None:
                self.n_servers = 1
            if self.n_servers < 1:
                raise ValueError("parameter-server mode needs at least one server")
        if self.split_threshold <= 0:
            raise ValueError("split threshold must be positive")


def even_shares(total: int, parts: int) -> list[int]:
    base, extra = divmod(total, parts)
    return [base + (1 if i < extra else 0) for i in range(parts)]


def ps_pieces(tensor_bytes: int, n_servers: int, split_threshold: int,
              home: int) -> list[tuple[int, int]]:
    """(server index, bytes) pieces for one tensor; large tensors go to every server."""
    if tensor_bytes > split_threshold and n_servers > 1:
        grads = even_shares(tensor_bytes // BYTES_PER_GRADIENT, n_servers)
        return [(s, g * BYTES_PER_GRADIENT) for s, g in enumerate(grads) if g]
    return [(home, tensor_bytes)]


class _JobBase:
    def __init__(self, sim: Simulator, service: TransferService, profile: ModelProfile,
                 workers: Sequence[int], iterations: int, compute_jitter: float,
                 on_finish: Optional[Callable] = None, start_at: int = 0):
        if iterations < 1:
            raise ValueError("need at least one iteration")
        if not 0 <= compute_jitter < 1:
            raise ValueError("compute jitter must be in [0, 1)")
        self.sim = sim
        self.service = service
        self.profile = profile
        self.workers = list(workers)
        self.iterations = iterations
        self.jitter = compute_jitter
        self.rng = sim.rng.stream("workload")
        self.on_finish = on_finish
        self.records: list[IterationRecord] = []
        self.iteration = -1
        self.finished = False
        self._iter_start = 0
        self._first_flow: Optional[int] = None
        self._compute = 0
        sim.schedule(start_at, self._next_iteration)

    def _scales(self) -> list[float]:
        if self.jitter == 0:
            return [1.0] * len(self.workers)
        return list(self.rng.uniform(1 - self.jitter, 1 + self.jitter, len(self.workers)))

    def _next_iteration(self) -> None:
        self.iteration += 1
        if self.iteration >= self.iterations:
            self.finished = True
            if self.on_finish is not None:
                self.on_finish(self)
            return
        self._iter_start = self.sim.now
        self._first_flow = None
        self._begin()
        scales = self._scales()
        self._compute = round(max(scales) * self.profile.compute_ns)
        fp = sum(l.fp_ns for l in self.profile.layers)
        for w, s in enumerate(scales):
            self.sim.schedule_in(round(fp * s), self._bp_step, w, self.profile.n_layers - 1, s)

    def _bp_step(self, w: int, layer: int, scale: float) -> None:
        bp = round(self.profile.layers[layer].bp_ns * scale)
        self.sim.schedule_in(bp, self._layer_ready, w, layer, scale)

    def _layer_ready(self, w: int, layer: int, scale: float) -> None:
        self._emit_layer(w, layer)
        if layer > 0:
            self._bp_step(w, layer - 1, scale)

    def _send(self, src: int, dst: int, n_bytes: int, on_done: Callable, stage: Stage,
              layer: int, tensor_id: int) -> None:
        if self._first_flow is None:
            self._first_flow = self.sim.now
        self.service.transfer(src, dst, n_bytes, on_done, stage=stage, layer=layer,
                              n_layers=self.profile.n_layers, iteration=self.iteration,
                              tensor_id=tensor_id)

    def _barrier(self) -> None:
        first = self._first_flow if self._first_flow is not None else self.sim.now
        self.records.append(IterationRecord(self.iteration, self._iter_start, self.sim.now,
                                            self._compute, first))
        self.sim.schedule_in(0, self._next_iteration)

    def _begin(self) -> None:
        raise NotImplementedError

    def _emit_layer(self, w: int, layer: int) -> None:
        raise NotImplementedError


class PsJob(_JobBase):
    """BSP training with parameter servers: per-layer push, aggregate, pull."""

    def __init__(self, sim: Simulator, service: TransferService, profile: ModelProfile,
                 scheme: SyncScheme, workers: Sequence[int], servers: Sequence[int],
                 iterations: int = 1, compute_jitter: float = 0.0, **kw):
        if scheme.mode is not SyncMode.PS:
            raise ValueError("PsJob needs a parameter-server scheme")
        if len(workers) != scheme.n_workers or len(servers) != scheme.n_servers:
            raise ValueError("worker/server host lists do not match the scheme")
        self.scheme = scheme
        self.servers = list(servers)
        super().__init__(sim, service, profile, workers, iterations, compute_jitter, **kw)
        homes = self.rng.integers(0, len(self.servers), profile.n_layers)
        self.pieces = [ps_pieces(l.tensor_bytes, len(self.servers), scheme.split_threshold, int(h))
                       for l, h in zip(profile.layers, homes)]

    def _begin(self) -> None:
        self._pushes = {}
        self._pulls_left = sum(len(p) for p in self.pieces) * len(self.workers)

    def _tid(self, layer: int, piece: int) -> int:
        return layer * 1024 + piece

    def _emit_layer(self, w: int, layer: int) -> None:
        src = self.workers[w]
        for k, (s, nbytes) in enumerate(self.pieces[layer]):
            self._send(src, self.servers[s], nbytes, self._pushed(layer, k), Stage.PUSH,
                       layer, self._tid(layer, k))

    def _pushed(self, layer: int, k: int) -> Callable:
        def done(_rec) -> None:
            key = (layer, k)
            self._pushes[key] = self._pushes.get(key, 0) + 1
            if self._pushes[key] == len(self.workers):
                s, nbytes = self.pieces[layer][k]
                for dst in self.workers:
                    self._send(self.servers[s], dst, nbytes, self._pulled, Stage.PULL,
                               layer, self._tid(layer, k))
        return done

    def _pulled(self, _rec) -> None:
        self._pulls_left -= 1
        if self._pulls_left == 0:
            self._barrier()


class RingJob(_JobBase):
    """BSP training with ring all-reduce: 2(n-1) chunk steps per tensor."""

    def __init__(self, sim: Simulator, service: TransferService, profile: ModelProfile,
                 scheme: SyncScheme, workers: Sequence[int], iterations: int = 1,
                 compute_jitter: float = 0.0, **kw):
        if scheme.mode is not SyncMode.RING:
            raise ValueError("RingJob needs a ring-allreduce scheme")
        if len(workers) != scheme.n_workers:
            raise ValueError("worker host list does not match the scheme")
        self.scheme = scheme
        super().__init__(sim, service, profile, workers, iterations, compute_jitter, **kw)
        n = len(self.workers)
        self.chunks = [[g * BYTES_PER_GRADIENT for g in even_shares(l.tensor_bytes // BYTES_PER_GRADIENT, n)]
                       for l in profile.layers]

    @property
    def steps(self) -> int:
        return 2 * (len(self.workers) - 1)

    def _begin(self) -> None:
        n, L = len(self.workers), self.profile.n_layers
        self._ready = [[False] * L for _ in range(n)]
        self._got = [[0] * L for _ in range(n)]
        self._sent = [[0] * L for _ in range(n)]
        self._left = n * L * self.steps
        if self._left == 0:
            self._pending_barrier = L * n
        else:
            self._pending_barrier = -1

    def _emit_layer(self, w: int, layer: int) -> None:
        if self.steps == 0:
            self._pending_barrier -= 1
            if self._pending_barrier == 0:
                self._barrier()
            return
        self._ready[w][layer] = True
        self._try_send(w, layer)

    def _try_send(self, w: int, layer: int) -> None:
        # step s may go once own gradients exist and step s-1 arrived from the left
        while (self._ready[w][layer] and self._sent[w][layer] < self.steps
               and self._sent[w][layer] <= self._got[w][layer]):
            s = self._sent[w][layer]
            self._sent[w][layer] += 1
            n = len(self.workers)
            chunk = (w - s) % n
            nbytes = max(BYTES_PER_GRADIENT, self.chunks[layer][chunk])
            stage = Stage.PUSH if s < n - 1 else Stage.PULL
            dst_w = (w + 1) % n
            self._send(self.workers[w], self.workers[dst_w], nbytes,
                       self._received(dst_w, layer), stage, layer, layer * 1024 + s)

    def _received(self, w: int, layer: int) -> Callable:
        def done(_rec) -> None:
            self._got[w][layer] += 1
            self._left -= 1
            self._try_send(w, layer)
            if self._left == 0:
                self._barrier()
        return done


# ------------------------------------------------------------------- background
@dataclass
class EmpiricalCdf:
    sizes: list[float]
    probs: list[float]

    def __post_init__(self):
        if len(self.sizes) != len(self.probs) or len(self.sizes) < 2:
            raise ValueError("CDF needs matching size/probability columns")
        if any(b < a for a, b in zip(self.sizes, self.sizes[1:])) or \
                any(b < a for a, b in zip(self.probs, self.probs[1:])):
            raise ValueError("CDF must be non-decreasing")
        if self.probs[0] != 0 or self.probs[-1] != 1:
            raise ValueError("CDF must start at 0 and end at 1")

    @property
    def mean(self) -> float:
        return sum((p1 - p0) * (s0 + s1) / 2 for s0, s1, p0, p1 in
                   zip(self.sizes, self.sizes[1:], self.probs, self.probs[1:]))

    def sample(self, rng: np.random.Generator) -> int:
        u = rng.random()
        i = bisect.bisect_left(self.probs, u)
        i = min(max(i, 1), len(self.probs) - 1)
        p0, p1 = self.probs[i - 1], self.probs[i]
        s0, s1 = self.sizes[i - 1], self.sizes[i]
        frac = 0.0 if p1 == p0 else (u - p0) / (p1 - p0)
        return max(1, round(s0 + frac * (s1 - s0)))


def parse_cdf(text: str) -> EmpiricalCdf:
    sizes, probs = [], []
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            s, p = line.split()
            sizes.append(float(s))
            probs.append(float(p))
    return EmpiricalCdf(sizes, probs)


def bundled_cdf(name: str = "websearch") -> EmpiricalCdf:
    res = resources.files("dlcpsim") / "profiles" / f"{name}.cdf"
    if not res.is_file():
        raise ValueError(f"unknown flow-size distribution {name!r}")
    return parse_cdf(res.read_text())


@dataclass
class BackgroundTraffic:
    """Poisson flow arrivals between random inter-rack host pairs.

    ``capacity_bps`` is the aggregate capacity being loaded (total uplink
    capacity for a leaf-spine fabric); the mean offered rate is
    ``load * capacity_bps``.
    """

    sim: Simulator
    service: TransferService
    hosts_by_rack: list[list[int]]
    load: float
    capacity_bps: float
    cdf: EmpiricalCdf
    stop_at: int
    kind: TransportKind = TransportKind.RELIABLE
    offered_bytes: int = 0
    arrivals: list = field(default_factory=list)

    def __post_init__(self):
        if not 0 <= self.load < 1:
            raise ValueError("background load must be in [0, 1)")
        self.rng = self.sim.rng.stream("background")
        if self.load > 0:
            if len(self.hosts_by_rack) < 2:
                raise ValueError("background traffic needs at least two racks")
            self.rate_per_ns = self.load * self.capacity_bps / 8 / self.cdf.mean / 1e9
            self._schedule_next()

    def _schedule_next(self) -> None:
        gap = max(1, round(self.rng.exponential(1 / self.rate_per_ns)))
        if self.sim.now + gap < self.stop_at:
            self.sim.schedule_in(gap, self._arrive)

    def _arrive(self) -> None:
        racks = self.rng.choice(len(self.hosts_by_rack), 2, replace=False)
        src = self.hosts_by_rack[racks[0]][self.rng.integers(len(self.hosts_by_rack[racks[0]]))]
        dst = self.hosts_by_rack[racks[1]][self.rng.integers(len(self.hosts_by_rack[racks[1]]))]
        size = self.cdf.sample(self.rng)
        self.offered_bytes += size
        self.arrivals.append((self.sim.now, int(src), int(dst), size))
        self.service.transfer(int(src), int(dst), size, _ignore, category="background",
                              kind=self.kind)
        self._schedule_next()


def _ignore(_rec) -> None:
    pass
