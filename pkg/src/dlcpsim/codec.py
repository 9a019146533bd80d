"""Order-independent tensor packetization.

A tensor is cut into consecutive gradient ranges such that no gradient is
split across packets. Each packet carries ``(start, count)`` as its range
key so the receiver can place it without regard to arrival order. The
receiver tracks delivered gradients in a :class:`RangeBitmap` and can report
the exact missing runs at any point.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

BYTES_PER_GRADIENT = 4

# tensor_id (8) | start (4) | count (4) | seq (4) | priority (1) | flags (1)
HEADER_FORMAT = "<QIIIBB"
HEADER_SIZE = struct.calcsize(HEADER_FORMAT)
FLAG_ECN_CAPABLE = 0x01
FLAG_SIGNAL = 0x02


@dataclass(frozen=True, order=True)
class GradientRange:
    start: int
    count: int

    def __post_init__(self):
        if self.count < 1 or self.start < 0:
            raise ValueError(f"invalid range {self.start}+{self.count}")

    @property
    def end(self) -> int:
        return self.start + self.count


@dataclass
class TensorSpec:
    tensor_id: int
    n_gradients: int
    layer_index: int = 0
    bytes_per_gradient: int = BYTES_PER_GRADIENT
    values: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.n_gradients < 1:
            raise ValueError("a tensor needs at least one gradient")
        if self.values is not None and len(self.values) != self.n_gradients:
            raise ValueError("values length does not match n_gradients")

    @property
    def total_bytes(self) -> int:
        return self.n_gradients * self.bytes_per_gradient


def gradients_per_packet(mtu_payload: int, bytes_per_gradient: int = BYTES_PER_GRADIENT) -> int:
    if mtu_payload < bytes_per_gradient:
        raise ValueError(f"payload of {mtu_payload} B cannot hold one {bytes_per_gradient}-byte gradient")
    return mtu_payload // bytes_per_gradient


def partition(tensor: TensorSpec, mtu_payload: int) -> list[GradientRange]:
    """Split a tensor into consecutive ranges that each fit one packet payload."""
    per = gradients_per_packet(mtu_payload, tensor.bytes_per_gradient)
    n = tensor.n_gradients
    return [GradientRange(s, min(per, n - s)) for s in range(0, n, per)]


def coalesce(ranges: Iterable[GradientRange]) -> list[GradientRange]:
    """Merge overlapping or touching ranges into maximal runs."""
    out: list[GradientRange] = []
    for r in sorted(ranges):
        if out and r.start <= out[-1].end:
            last = out[-1]
            if r.end > last.end:
                out[-1] = GradientRange(last.start, r.end - last.start)
        else:
            out.append(r)
    return out


class RangeBitmap:
    """Per-gradient delivery tracking for one tensor."""

    def __init__(self, n_gradients: int):
        if n_gradients < 1:
            raise ValueError("bitmap needs at least one gradient")
        self.n_gradients = n_gradients
        self._bits = np.zeros(n_gradients, dtype=bool)
        self.received = 0

    def merge(self, start: int, count: int) -> int:
        """Mark ``[start, start+count)`` received; return the number of new gradients."""
        if count < 1 or start < 0 or start + count > self.n_gradients:
            raise ValueError(f"range {start}+{count} outside tensor of {self.n_gradients}")
        view = self._bits[start:start + count]
        new = count - int(np.count_nonzero(view))
        if new:
            view[:] = True
            self.received += new
        return new

    def merge_bitmap(self, other: "RangeBitmap") -> None:
        if other.n_gradients != self.n_gradients:
            raise ValueError("bitmap sizes differ")
        np.logical_or(self._bits, other._bits, out=self._bits)
        self.received = int(np.count_nonzero(self._bits))

    @property
    def received_fraction(self) -> float:
        return self.received / self.n_gradients

    def as_array(self) -> np.ndarray:
        return self._bits.copy()

    def runs(self, value: bool) -> list[GradientRange]:
        bits = self._bits if value else ~self._bits
        padded = np.concatenate(([False], bits, [False])).astype(np.int8)
        edges = np.flatnonzero(np.diff(padded))
        return [GradientRange(int(s), int(e - s)) for s, e in zip(edges[::2], edges[1::2])]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, RangeBitmap):
            return NotImplemented
        return self.n_gradients == other.n_gradients and bool(np.array_equal(self._bits, other._bits))


def reconstruct(bitmap: RangeBitmap) -> tuple[list[GradientRange], list[GradientRange]]:
    """Return ``(received_runs, missing_runs)`` as maximal runs."""
    return bitmap.runs(True), bitmap.runs(False)


def pack_header(tensor_id: int, rng: GradientRange, seq: int, priority: int,
                ecn_capable: bool = False, signal: bool = False) -> bytes:
    flags = (FLAG_ECN_CAPABLE if ecn_capable else 0) | (FLAG_SIGNAL if signal else 0)
    return struct.pack(HEADER_FORMAT, tensor_id, rng.start, rng.count, seq, priority, flags)


def unpack_header(raw: bytes) -> dict:
    tensor_id, start, count, seq, priority, flags = struct.unpack(HEADER_FORMAT, raw[:HEADER_SIZE])
    return {
        "tensor_id": tensor_id,
        "range": GradientRange(start, count),
        "seq": seq,
        "priority": priority,
        "ecn_capable": bool(flags & FLAG_ECN_CAPABLE),
        "signal": bool(flags & FLAG_SIGNAL),
    }
