"""The simulated packet and wire-size constants."""

from __future__ import annotations

from enum import IntEnum
from typing import Any, Optional

from .codec import HEADER_SIZE

ETH_BYTES = 18  # header + FCS
IP_BYTES = 20
UDP_BYTES = 8
TCP_BYTES = 20

DLCP_OVERHEAD = ETH_BYTES + IP_BYTES + UDP_BYTES + HEADER_SIZE
TCP_OVERHEAD = ETH_BYTES + IP_BYTES + TCP_BYTES
SIGNAL_BASE_BYTES = ETH_BYTES + IP_BYTES + TCP_BYTES + 16
MIN_PACKET_BYTES = 64

SIGNAL_PRIORITY = 0


class Channel(IntEnum):
    DATA = 0
    SIGNAL = 1


class Proto(IntEnum):
    DLCP = 0
    TCP = 1


class Packet:
    """One packet in flight. ``route`` holds the egress ports still to traverse."""

    __slots__ = (
        "uid", "proto", "channel", "flow_id", "src", "dst", "size",
        "priority", "ecn_capable", "ce", "tensor_id", "range_start",
        "range_count", "seq", "ack", "ece", "payload", "route", "hop",
        "stats", "sent_at",
    )

    def __init__(self, proto: Proto, channel: Channel, flow_id: int, src: int, dst: int,
                 size: int, priority: int, ecn_capable: bool = False, seq: int = 0,
                 tensor_id: int = 0, range_start: int = 0, range_count: int = 0,
                 payload: Any = None, stats: Optional[Any] = None):
        self.uid = 0
        self.proto = proto
        self.channel = channel
        self.flow_id = flow_id
        self.src = src
        self.dst = dst
        self.size = size
        self.priority = priority
        self.ecn_capable = ecn_capable
        self.ce = False
        self.tensor_id = tensor_id
        self.range_start = range_start
        self.range_count = range_count
        self.seq = seq
        self.ack = -1
        self.ece = False
        self.payload = payload
        self.route: tuple = ()
        self.hop = 0
        self.stats = stats
        self.sent_at = 0

    def __repr__(self) -> str:
        return (f"Packet(flow={self.flow_id}, {self.channel.name}, seq={self.seq}, "
                f"prio={self.priority}, size={self.size})")
