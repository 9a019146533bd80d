"""Bounded-loss-tolerant transport.

Data travels on an unreliable channel; control messages travel on a small
reliable channel at the reserved signal priority. A flow is complete as soon
as the receiver holds at least ``1 - p`` of the tensor's gradients. There are
no retransmission timers on the data path: the sender makes one pass, emits
flow-stop, and the receiver either declares completion or asks for the
missing ranges, which starts another pass at line rate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Any, Callable, Optional, Sequence

from ..codec import GradientRange, RangeBitmap, TensorSpec, gradients_per_packet, partition
from ..engine import NS_PER_S, Simulator
from ..fabric import Host, Network
from ..metrics import FlowRecord
from ..packet import DLCP_OVERHEAD, SIGNAL_BASE_BYTES, SIGNAL_PRIORITY, Channel, Packet, Proto

RANGE_KEY_BYTES = 8


class RcState(str, Enum):
    LINE_RATE_START = "line-rate-start"
    CONGESTION_AVOIDANCE = "congestion-avoidance"


class Phase(str, Enum):
    LINE_RATE_START = "line-rate-start"
    CONGESTION_AVOIDANCE = "congestion-avoidance"
    RETRANSMITTING = "retransmitting"
    WAITING = "waiting"
    FINISHING = "finishing"
    DONE = "done"


class Stage(str, Enum):
    PUSH = "push"
    PULL = "pull"


@dataclass
class DlcpConfig:
    loss_bound: float = 0.10
    pull_factor: float = 0.5
    delta: float = 2.0
    period_ns: int = 200_000
    ai_fraction: float = 0.05
    signal_timeout_mult: float = 4.0
    mtu_payload: int = 1400

    def __post_init__(self):
        if not 0 <= self.loss_bound < 1:
            raise ValueError("loss bound must be in [0, 1)")
        if not 0 <= self.pull_factor <= 1:
            raise ValueError("pull factor must be in [0, 1]")
        if self.delta <= 1:
            raise ValueError("delta must exceed 1")


def effective_bound(stage: Stage | str, p: float, pull_factor: float) -> float:
    if pull_factor > 1:
        raise ValueError("pull factor must not exceed 1")
    return p if Stage(stage) is Stage.PUSH else p * pull_factor


def required_gradients(n_gradients: int, p: float) -> int:
    """Smallest gradient count meeting ``received >= (1 - p) * n`` exactly."""
    return math.ceil((1 - Fraction(str(p))) * n_gradients)


@dataclass
class RateControl:
    line_rate: float
    delta: float = 2.0
    period: int = 200_000
    ai_fraction: float = 0.05
    mtu_bytes: int = 1500
    rate: float = 0.0
    state: RcState = RcState.LINE_RATE_START
    measured_recv_rate: float = 0.0

    def __post_init__(self):
        if self.delta <= 1:
            raise ValueError("delta must exceed 1")
        if not self.rate:
            self.rate = self.line_rate

    @property
    def ai_step(self) -> float:
        return self.ai_fraction * self.line_rate

    @property
    def min_rate(self) -> float:
        return self.mtu_bytes * 8 * NS_PER_S / self.period

    def reset(self) -> None:
        self.state = RcState.LINE_RATE_START
        self.rate = self.line_rate


def rate_tick(rc: RateControl) -> float:
    """Apply one control period using ``rc.measured_recv_rate``; return the new rate."""
    if rc.state is RcState.LINE_RATE_START:
        rc.rate = rc.line_rate
        if rc.rate > rc.delta * rc.measured_recv_rate:
            rc.state = RcState.CONGESTION_AVOIDANCE
            rc.rate = max(rc.rate / 2, rc.min_rate)
    elif rc.rate > rc.delta * rc.measured_recv_rate:
        rc.rate = max(rc.rate / 2, rc.min_rate)
    else:
        rc.rate = min(rc.rate + rc.ai_step, rc.line_rate)
    return rc.rate


class SignalKind(str, Enum):
    FLOW_START = "flow-start"
    RATE_REPORT = "rate-report"
    FLOW_STOP = "flow-stop"
    RETRANSMIT_REQUEST = "retransmit-request"
    FLOW_FINISH = "flow-finish"
    FINISH_CONFIRM = "finish-confirm"
    ACK = "ack"


@dataclass
class SignalMessage:
    kind: SignalKind
    tensor_id: int = 0
    n_gradients: int = 0
    loss_bound: float = 0.0
    recv_rate: float = 0.0
    window_start: int = 0
    missing: tuple[GradientRange, ...] = ()
    ack_seq: int = -1
    # simulator bookkeeping carried with the rendezvous, not wire content
    record: Any = field(default=None, repr=False)
    on_complete: Any = field(default=None, repr=False)

    def wire_size(self) -> int:
        return SIGNAL_BASE_BYTES + RANGE_KEY_BYTES * len(self.missing)


class SignalChannel:
    """Per-flow reliable, in-order message channel (ack + fixed timer per message)."""

    def __init__(self, endpoint: "_Endpoint", peer: int, timeout: int):
        self.ep = endpoint
        self.peer = peer
        self.timeout = timeout
        self.next_seq = 0
        self.expected = 0
        self.unacked: dict[int, list] = {}
        self.reorder: dict[int, SignalMessage] = {}
        self.delivered = 0

    def send(self, msg: SignalMessage, priority: int = SIGNAL_PRIORITY,
             packet_index: Optional[int] = None) -> None:
        """Queue ``msg`` reliably.

        ``priority`` and ``packet_index`` let a message travel in-band with
        the data it follows (same queue, same path) instead of at the
        reserved signal priority.
        """
        seq = self.next_seq
        self.next_seq += 1
        self.unacked[seq] = [msg, None, priority, seq if packet_index is None else packet_index]
        self._transmit(seq)

    def _packet(self, seq: int, msg: SignalMessage, priority: int = SIGNAL_PRIORITY) -> Packet:
        ep = self.ep
        return Packet(Proto.DLCP, Channel.SIGNAL, ep.flow_id, ep.host.node, self.peer,
                      msg.wire_size(), priority, ecn_capable=priority != SIGNAL_PRIORITY,
                      seq=seq, payload=msg)

    def _transmit(self, seq: int) -> None:
        entry = self.unacked[seq]
        self.ep.net.send(self._packet(seq, entry[0], entry[2]), packet_index=entry[3])
        entry[1] = self.ep.sim.schedule_in(self.timeout, self._expire, seq)

    def _expire(self, seq: int) -> None:
        if seq in self.unacked:
            rec = self.ep.record
            if rec is not None:
                rec.signal_timeouts += 1
            self._transmit(seq)

    def on_packet(self, pkt: Packet) -> None:
        msg: SignalMessage = pkt.payload
        if msg.kind is SignalKind.ACK:
            entry = self.unacked.pop(msg.ack_seq, None)
            if entry is not None:
                self.ep.sim.cancel(entry[1])
            return
        ack = SignalMessage(SignalKind.ACK, ack_seq=pkt.seq)
        self.ep.net.send(self._packet(pkt.seq, ack), packet_index=pkt.seq)
        if pkt.seq < self.expected or pkt.seq in self.reorder:
            return
        self.reorder[pkt.seq] = msg
        while self.expected in self.reorder:
            m = self.reorder.pop(self.expected)
            self.expected += 1
            self.delivered += 1
            self.ep.on_signal(m)

    def close(self) -> None:
        for entry in self.unacked.values():
            self.ep.sim.cancel(entry[1])
        self.unacked.clear()


class _Endpoint:
    def __init__(self, stack: "DlcpStack", flow_id: int, peer: int):
        self.stack = stack
        self.sim: Simulator = stack.sim
        self.net: Network = stack.net
        self.host: Host = stack.host
        self.flow_id = flow_id
        self.record: Optional[FlowRecord] = None
        self.signals = SignalChannel(self, peer, stack.signal_timeout)

    def on_packet(self, pkt: Packet) -> None:
        if pkt.channel == Channel.SIGNAL:
            self.signals.on_packet(pkt)
        else:
            self.on_data(pkt)

    def on_signal(self, msg: SignalMessage) -> None:
        raise NotImplementedError

    def on_data(self, pkt: Packet) -> None:
        raise NotImplementedError


class DlcpSender(_Endpoint):
    def __init__(self, stack: "DlcpStack", flow_id: int, dst: int, tensor: TensorSpec,
                 loss_bound: float, record: FlowRecord, priorities: Sequence[int],
                 ecn_flags: Sequence[bool], on_complete: Optional[Callable] = None):
        super().__init__(stack, flow_id, dst)
        cfg = stack.config
        self.dst = dst
        self.tensor = tensor
        self.loss_bound = loss_bound
        self.record = record
        self.ranges = partition(tensor, cfg.mtu_payload)
        if len(priorities) != len(self.ranges) or len(ecn_flags) != len(self.ranges):
            raise ValueError("one priority and one ECN flag per packet are required")
        self.priorities = list(priorities)
        self.ecn_flags = list(ecn_flags)
        self.per_packet = gradients_per_packet(cfg.mtu_payload, tensor.bytes_per_gradient)
        self.rc = RateControl(stack.line_rate, cfg.delta, cfg.period_ns, cfg.ai_fraction,
                              mtu_bytes=DLCP_OVERHEAD + cfg.mtu_payload)
        self.on_complete = on_complete
        self.one_way = stack.base_rtt // 2
        self.pass_no = -1
        self.pass_start = 0
        self.queue: list[int] = []
        self.cursor = 0
        self.seq = 0
        self._pace = None
        self.sending = False
        self.finished = False
        self.done = False

    @property
    def phase(self) -> Phase:
        if self.done:
            return Phase.DONE
        if self.finished:
            return Phase.FINISHING
        if not self.sending:
            return Phase.WAITING
        if self.pass_no > 0:
            return Phase.RETRANSMITTING
        return Phase(self.rc.state.value)

    def start(self) -> None:
        msg = SignalMessage(SignalKind.FLOW_START, self.tensor.tensor_id, self.tensor.n_gradients,
                            self.loss_bound, record=self.record, on_complete=self.on_complete)
        self.signals.send(msg)
        self._start_pass(list(range(len(self.ranges))))

    def _start_pass(self, indices: list[int]) -> None:
        self.pass_no += 1
        self.pass_start = self.sim.now
        self.queue = indices
        self.cursor = 0
        self.sending = True
        self._send_next()

    def _send_next(self) -> None:
        self._pace = None
        if self.finished or not self.sending:
            return
        idx = self.queue[self.cursor]
        self.cursor += 1
        r = self.ranges[idx]
        size = DLCP_OVERHEAD + r.count * self.tensor.bytes_per_gradient
        pkt = Packet(Proto.DLCP, Channel.DATA, self.flow_id, self.host.node, self.dst, size,
                     self.priorities[idx], self.ecn_flags[idx], seq=self.seq,
                     tensor_id=self.tensor.tensor_id, range_start=r.start, range_count=r.count,
                     stats=self.record)
        self.seq += 1
        self.record.pkts_sent += 1
        self.net.send(pkt, packet_index=pkt.seq)
        if self.cursor >= len(self.queue):
            self.sending = False
            # in-band: queued behind this pass's data so the receiver judges a drained pass
            self.signals.send(SignalMessage(SignalKind.FLOW_STOP), priority=pkt.priority,
                              packet_index=pkt.seq)
            return
        gap = max(1, math.ceil(size * 8 * NS_PER_S / self.rc.rate))
        self._pace = self.sim.schedule_in(gap, self._send_next)

    def on_data(self, pkt: Packet) -> None:
        pass

    def on_signal(self, msg: SignalMessage) -> None:
        kind = msg.kind
        if kind is SignalKind.RATE_REPORT:
            if self.sending and msg.window_start >= self.pass_start + self.one_way:
                self.rc.measured_recv_rate = msg.recv_rate
                rate_tick(self.rc)
        elif kind is SignalKind.RETRANSMIT_REQUEST:
            if self.finished:
                return
            self.record.retransmit_rounds += 1
            self.rc.reset()
            per = self.per_packet
            indices: list[int] = []
            for r in msg.missing:
                indices.extend(range(r.start // per, (r.end + per - 1) // per))
            self.sim.cancel(self._pace)
            self._start_pass(indices)
        elif kind is SignalKind.FLOW_FINISH:
            if self.finished:
                return
            self.finished = True
            self.sending = False
            self.sim.cancel(self._pace)
            self._pace = None
            self.signals.send(SignalMessage(SignalKind.FINISH_CONFIRM))
            self.done = True


class DlcpReceiver(_Endpoint):
    def __init__(self, stack: "DlcpStack", flow_id: int, src: int):
        super().__init__(stack, flow_id, src)
        self.src = src
        self.bitmap: Optional[RangeBitmap] = None
        self.tensor_id = 0
        self.required = 0
        self.loss_bound = 0.0
        self.on_complete: Optional[Callable] = None
        self.finished = False
        self.confirmed = False
        self.window_bytes = 0
        self._report = None

    @property
    def established(self) -> bool:
        return self.bitmap is not None

    def on_signal(self, msg: SignalMessage) -> None:
        kind = msg.kind
        if kind is SignalKind.FLOW_START:
            if self.bitmap is not None:
                return
            self.tensor_id = msg.tensor_id
            self.bitmap = RangeBitmap(msg.n_gradients)
            self.loss_bound = msg.loss_bound
            self.required = required_gradients(msg.n_gradients, msg.loss_bound)
            self.record = msg.record
            self.on_complete = msg.on_complete
            self._report = self.sim.schedule_in(self.stack.config.period_ns, self._send_report)
        elif kind is SignalKind.FLOW_STOP:
            if self.finished or self.bitmap is None:
                return
            if self.bitmap.received >= self.required:
                self._finish()
                return
            missing = self.bitmap.runs(False)[: self.stack.max_runs]
            self.signals.send(SignalMessage(SignalKind.RETRANSMIT_REQUEST, missing=tuple(missing)))
        elif kind is SignalKind.FINISH_CONFIRM:
            self.confirmed = True
            self.sim.cancel(self._report)
            self._report = None

    def _send_report(self) -> None:
        self._report = None
        if self.confirmed:
            return
        period = self.stack.config.period_ns
        rate = self.window_bytes * 8 * NS_PER_S / period
        self.window_bytes = 0
        self.signals.send(SignalMessage(SignalKind.RATE_REPORT, recv_rate=rate,
                                        window_start=self.sim.now - period))
        self._report = self.sim.schedule_in(period, self._send_report)

    def on_data(self, pkt: Packet) -> None:
        rec = pkt.stats
        if self.bitmap is None:
            if rec is not None:
                rec.drops_early += 1
            return
        rec.pkts_delivered += 1
        self.window_bytes += pkt.size
        new = self.bitmap.merge(pkt.range_start, pkt.range_count)
        if new == 0:
            rec.duplicates += 1
            return
        rec.bytes_delivered += new * 4
        if not self.finished and self.bitmap.received >= self.required:
            self._finish()

    def _finish(self) -> None:
        self.finished = True
        rec = self.record
        rec.end = self.sim.now
        self.signals.send(SignalMessage(SignalKind.FLOW_FINISH))
        if self.on_complete is not None:
            self.on_complete(rec)


class DlcpStack:
    """Per-host protocol instance: owns sender and receiver endpoints."""

    def __init__(self, sim: Simulator, net: Network, host: Host, config: DlcpConfig,
                 line_rate: int, base_rtt: int):
        self.sim = sim
        self.net = net
        self.host = host
        self.config = config
        self.line_rate = line_rate
        if base_rtt <= 0:
            raise ValueError("base RTT must be positive (it sets the signal timer)")
        self.base_rtt = base_rtt
        self.signal_timeout = max(1, int(config.signal_timeout_mult * base_rtt))
        self.max_runs = max(1, config.mtu_payload // RANGE_KEY_BYTES)
        self.endpoints: dict[int, _Endpoint] = {}
        self._opened: set[tuple[int, int]] = set()
        host.fallback = self._unknown
        host.services["dlcp"] = self

    def open_and_send(self, flow_id: int, dst: int, tensor: TensorSpec, loss_bound: float,
                      record: FlowRecord, priorities: Sequence[int], ecn_flags: Sequence[bool],
                      on_complete: Optional[Callable] = None) -> DlcpSender:
        if not 0 <= loss_bound < 1:
            raise ValueError("loss bound must be in [0, 1)")
        key = (flow_id, tensor.tensor_id)
        if key in self._opened or flow_id in self.endpoints:
            raise ValueError(f"flow {flow_id} / tensor {tensor.tensor_id} already open")
        self._opened.add(key)
        sender = DlcpSender(self, flow_id, dst, tensor, loss_bound, record,
                            priorities, ecn_flags, on_complete)
        self.endpoints[flow_id] = sender
        self.host.bind(flow_id, sender.on_packet)
        sender.start()
        return sender

    def _unknown(self, pkt: Packet) -> None:
        if pkt.proto != Proto.DLCP:
            return
        if pkt.channel == Channel.SIGNAL:
            receiver = DlcpReceiver(self, pkt.flow_id, pkt.src)
            self.endpoints[pkt.flow_id] = receiver
            self.host.bind(pkt.flow_id, receiver.on_packet)
            receiver.on_packet(pkt)
        elif pkt.stats is not None:
            pkt.stats.drops_early += 1
