"""Output-queued switch port with strict priority and selective dropping.

Each egress port holds ``P`` FIFO queues. Queue 0 is reserved for signal
traffic; data packets go to the queue named by their DSCP-mapped priority.
When a queue's occupancy (measured before insertion) is above its
threshold, ECN-capable packets are admitted with a congestion mark and
non-ECN-capable packets are dropped. Packets that do not fit in the buffer
(per port, or a switch-wide shared pool) are dropped regardless of flags.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from enum import IntEnum
from typing import Callable, Optional, Sequence

from .engine import EventKind, Simulator, transmission_time
from .packet import Packet

DEFAULT_QUEUES = 8


class EnqueueOutcome(IntEnum):
    ACCEPTED = 0
    SELECTIVE_DROP = 1
    BUFFER_DROP = 2


# counter columns per (queue, ecn_capable) cell
ACCEPTED, MARKED, SELECTIVE, BUFFER = range(4)
COUNTER_NAMES = ("accepted", "marked", "selective_drops", "buffer_drops")


@dataclass(frozen=True)
class ThresholdLadder:
    """Arithmetic per-queue thresholds ``T * (1, 1+d, ..., 1+(P-2)d)``.

    The highest-priority data queue (queue 1) gets the lowest threshold so
    front-layer packets are shed first; queue 0 (signals) is bounded only by
    the buffer.
    """

    base: int
    step: float
    n_queues: int = DEFAULT_QUEUES

    def __post_init__(self):
        if self.base <= 0 or self.step < 0 or self.n_queues < 2:
            raise ValueError("ladder needs base > 0, step >= 0 and at least two queues")

    def data_thresholds(self) -> list[int]:
        return [round(self.base * (1 + k * self.step)) for k in range(self.n_queues - 1)]

    def thresholds(self, buffer_bytes: int) -> list[int]:
        data = self.data_thresholds()
        if max(data) > buffer_bytes:
            raise ValueError(f"ladder top {max(data)} B exceeds buffer budget {buffer_bytes} B")
        return [buffer_bytes] + data


def classify(pkt: Packet, n_queues: int = DEFAULT_QUEUES) -> int:
    """Queue index for ``pkt``: its DSCP-mapped priority (signals carry 0)."""
    if not 0 <= pkt.priority < n_queues:
        raise ValueError(f"priority {pkt.priority} outside 0..{n_queues - 1}")
    return pkt.priority


class SharedBuffer:
    """Byte pool shared by all ports of one switch."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.used = 0


class SwitchPort:
    """Egress port: P strict-priority queues feeding one full-duplex link direction."""

    def __init__(self, sim: Simulator, name: str, bandwidth: int, delay: int,
                 deliver: Callable[[Packet], None], *, n_queues: int = DEFAULT_QUEUES,
                 buffer_bytes: int = 512 * 1024,
                 thresholds: Optional[Sequence[Optional[int]]] = None,
                 capacities: Optional[Sequence[Optional[int]]] = None,
                 pool: Optional[SharedBuffer] = None):
        self.sim = sim
        self.name = name
        self.bandwidth = bandwidth
        self.delay = delay
        self.deliver = deliver
        self.n_queues = n_queues
        self.buffer_bytes = buffer_bytes
        self.pool = pool
        self.queues: list[deque] = [deque() for _ in range(n_queues)]
        self.occupancy = [0] * n_queues
        self.total = 0
        self.thresholds = self._per_queue(thresholds)
        self.capacities = self._per_queue(capacities)
        self.busy = False
        self.tx_bytes = 0
        self.tx_packets = 0
        self.counters = [[[0, 0, 0, 0], [0, 0, 0, 0]] for _ in range(n_queues)]
        self._ser: dict[int, int] = {}

    def _per_queue(self, values):
        if values is None:
            return [None] * self.n_queues
        if len(values) != self.n_queues:
            raise ValueError(f"{self.name}: expected {self.n_queues} per-queue values, got {len(values)}")
        return list(values)

    def configure(self, thresholds=None, capacities=None) -> None:
        self.thresholds = self._per_queue(thresholds)
        self.capacities = self._per_queue(capacities)

    def serialization(self, size: int) -> int:
        t = self._ser.get(size)
        if t is None:
            t = self._ser[size] = transmission_time(size, self.bandwidth)
        return t

    def enqueue(self, pkt: Packet) -> EnqueueOutcome:
        q = pkt.priority
        size = pkt.size
        occ = self.occupancy[q]
        cell = self.counters[q][1 if pkt.ecn_capable else 0]
        pool = self.pool
        cap = self.capacities[q]
        if ((pool.used + size > pool.capacity) if pool is not None
                else (self.total + size > self.buffer_bytes)) or \
                (cap is not None and occ + size > cap):
            cell[BUFFER] += 1
            st = pkt.stats
            if st is not None:
                st.drops_buffer += 1
            return EnqueueOutcome.BUFFER_DROP
        thr = self.thresholds[q]
        if thr is not None and occ > thr:
            if pkt.ecn_capable:
                pkt.ce = True
                cell[MARKED] += 1
            else:
                cell[SELECTIVE] += 1
                st = pkt.stats
                if st is not None:
                    st.drops_selective += 1
                return EnqueueOutcome.SELECTIVE_DROP
        cell[ACCEPTED] += 1
        self.queues[q].append(pkt)
        self.occupancy[q] = occ + size
        self.total += size
        if pool is not None:
            pool.used += size
        if not self.busy:
            self._transmit()
        return EnqueueOutcome.ACCEPTED

    def dequeue(self) -> Optional[Packet]:
        """Remove and return the head of the lowest-numbered non-empty queue."""
        for q, fifo in enumerate(self.queues):
            if fifo:
                pkt = fifo.popleft()
                self.occupancy[q] -= pkt.size
                self.total -= pkt.size
                if self.pool is not None:
                    self.pool.used -= pkt.size
                return pkt
        return None

    def _transmit(self) -> None:
        pkt = self.dequeue()
        if pkt is None:
            self.busy = False
            return
        self.busy = True
        sim = self.sim
        ser = self.serialization(pkt.size)
        self.tx_bytes += pkt.size
        self.tx_packets += 1
        sim.schedule(sim.now + ser, self._transmit, kind=EventKind.PACKET_DEQUEUE)
        sim.schedule(sim.now + ser + self.delay, self.deliver, pkt, kind=EventKind.PACKET_ARRIVAL)

    def resident_bytes(self) -> int:
        return sum(p.size for fifo in self.queues for p in fifo)

    def counter_rows(self):
        for q in range(self.n_queues):
            for ecn in (0, 1):
                yield q, bool(ecn), tuple(self.counters[q][ecn])
