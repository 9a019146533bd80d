"""Deterministic discrete-event engine.

The clock is an integer count of nanoseconds. Events firing at the same
instant run in the order they were scheduled. Every stochastic subsystem
draws from its own named RNG stream so that switching one subsystem on or
off never perturbs another's draws.
"""

from __future__ import annotations

import hashlib
import heapq
import itertools
import math
from dataclasses import dataclass
from enum import Enum
from typing import Any, Callable, Optional

import numpy as np

NS_PER_US = 1_000
NS_PER_MS = 1_000_000
NS_PER_S = 1_000_000_000


class SchedulingError(RuntimeError):
    """Raised when an event is scheduled before the current clock."""


class EventKind(Enum):
    PACKET_ARRIVAL = "packet-arrival"
    PACKET_DEQUEUE = "packet-dequeue"
    TIMER = "timer-expiry"
    APP_EMIT = "app-emit"


class Event:
    """A scheduled callback. Doubles as the cancellation handle."""

    __slots__ = ("fire_at", "sequence", "kind", "callback", "args", "cancelled")

    def __init__(self, fire_at: int, sequence: int, kind: EventKind,
                 callback: Callable[..., Any], args: tuple):
        self.fire_at = fire_at
        self.sequence = sequence
        self.kind = kind
        self.callback = callback
        self.args = args
        self.cancelled = False

    def __repr__(self) -> str:
        return f"Event(t={self.fire_at}, seq={self.sequence}, kind={self.kind.value})"


@dataclass(frozen=True)
class SimStats:
    clock: int
    processed: int
    cancelled: int
    pending: int
    scheduled: int


def transmission_time(size_bytes: int, bandwidth_bps: int) -> int:
    """Serialization time in ns, rounded toward +inf so it is never zero."""
    return max(1, -(-size_bytes * 8 * NS_PER_S // bandwidth_bps))


def stable_label_hash(label: str) -> int:
    return int.from_bytes(hashlib.blake2b(label.encode(), digest_size=8).digest(), "little")


class RngStreams:
    """Independent, reproducible numpy generators keyed by (seed, label)."""

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFF_FFFF_FFFF_FFFF
        self._streams: dict[str, np.random.Generator] = {}

    def stream(self, label: str) -> np.random.Generator:
        gen = self._streams.get(label)
        if gen is None:
            ss = np.random.SeedSequence([self.seed, stable_label_hash(label)])
            gen = np.random.Generator(np.random.PCG64(ss))
            self._streams[label] = gen
        return gen


class Simulator:
    """Single-threaded event loop over an integer nanosecond clock."""

    def __init__(self, seed: int = 0):
        self.now = 0
        self.rng = RngStreams(seed)
        self._heap: list[tuple[int, int, Event]] = []
        self._counter = itertools.count()
        self._stopped = False
        self.scheduled = 0
        self.processed = 0
        self.cancelled = 0

    def schedule(self, fire_at: int, callback: Callable[..., Any], *args: Any,
                 kind: EventKind = EventKind.TIMER) -> Event:
        if fire_at < self.now:
            raise SchedulingError(f"cannot schedule at t={fire_at} before now={self.now}")
        ev = Event(fire_at, next(self._counter), kind, callback, args)
        heapq.heappush(self._heap, (fire_at, ev.sequence, ev))
        self.scheduled += 1
        return ev

    def schedule_in(self, delay: int, callback: Callable[..., Any], *args: Any,
                    kind: EventKind = EventKind.TIMER) -> Event:
        return self.schedule(self.now + delay, callback, *args, kind=kind)

    def cancel(self, event: Optional[Event]) -> None:
        if event is not None and not event.cancelled:
            event.cancelled = True
            self.cancelled += 1

    def stop(self) -> None:
        """Halt the loop after the current handler returns."""
        self._stopped = True

    @property
    def pending(self) -> int:
        return self.scheduled - self.processed - self.cancelled

    def stats(self) -> SimStats:
        return SimStats(self.now, self.processed, self.cancelled, self.pending, self.scheduled)

    def run(self, until: Optional[int] = None) -> SimStats:
        """Process events up to and including ``until`` (or until quiescence).

        When events remain beyond ``until`` the clock is advanced to ``until``.
        """
        heap = self._heap
        pop = heapq.heappop
        self._stopped = False
        limit = math.inf if until is None else until
        while heap and not self._stopped:
            fire_at, _, ev = heap[0]
            if fire_at > limit:
                break
            pop(heap)
            if ev.cancelled:
                continue
            self.now = fire_at
            self.processed += 1
            ev.callback(*ev.args)
        if until is not None and not self._stopped and heap and self.now < until:
            self.now = until
        return self.stats()
