"""Reliable byte-stream baseline: NewReno loss recovery with optional DCTCP.

Connections are treated as pre-established, so there is no handshake. The
receiver acks every segment cumulatively and echoes the CE bit. Congestion
state is kept in segments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Optional

from ..engine import NS_PER_MS, Simulator
from ..fabric import Host, Network
from ..metrics import FlowRecord
from ..packet import MIN_PACKET_BYTES, TCP_OVERHEAD, Channel, Packet, Proto


@dataclass
class TcpConfig:
    mss: int = 1460
    init_cwnd: int = 10
    rto_min: int = 10 * NS_PER_MS
    rto_max: int = 2000 * NS_PER_MS
    dupack_threshold: int = 3
    ecn: bool = True
    dctcp: bool = False
    dctcp_g: float = 1 / 16
    priority: int = 1

    def __post_init__(self):
        if self.mss <= 0 or self.init_cwnd < 1 or self.rto_min <= 0:
            raise ValueError("mss, initial window and RTOmin must be positive")
        if not 0 < self.dctcp_g <= 1:
            raise ValueError("DCTCP gain must be in (0, 1]")


def dctcp_alpha(alpha: float, marked_fraction: float, g: float) -> float:
    return (1 - g) * alpha + g * marked_fraction


class TcpSender:
    def __init__(self, stack: "TcpStack", flow_id: int, dst: int, nbytes: int,
                 record: FlowRecord, cfg: TcpConfig):
        self.stack = stack
        self.sim: Simulator = stack.sim
        self.net: Network = stack.net
        self.src = stack.host.node
        self.flow_id = flow_id
        self.dst = dst
        self.nbytes = nbytes
        self.record = record
        self.cfg = cfg
        self.n_segments = max(1, math.ceil(nbytes / cfg.mss))
        self.snd_una = 0
        self.snd_nxt = 0
        self.high_tx = 0
        self.cwnd = float(cfg.init_cwnd)
        self.ssthresh = float("inf")
        self.dupacks = 0
        self.in_recovery = False
        self.recover = -1
        self.srtt: Optional[float] = None
        self.rttvar = 0.0
        self.rto = cfg.rto_min
        self.backoff = 0
        self._timed: Optional[tuple[int, int]] = None
        self._deadline: Optional[int] = None
        self._timer = None
        self.alpha = 1.0 if cfg.dctcp else 0.0
        self._win_end = 0
        self._win_acks = 0
        self._win_marked = 0
        self._cut_end = -1
        self.done = False
        self.tx_count = 0

    # --- transmission -------------------------------------------------
    def _segment_bytes(self, seg: int) -> int:
        if seg == self.n_segments - 1:
            return self.nbytes - seg * self.cfg.mss
        return self.cfg.mss

    def _emit(self, seg: int) -> None:
        size = TCP_OVERHEAD + self._segment_bytes(seg)
        pkt = Packet(Proto.TCP, Channel.DATA, self.flow_id, self.src, self.dst, size,
                     self.cfg.priority, ecn_capable=self.cfg.ecn, seq=seg, stats=self.record)
        self.record.pkts_sent += 1
        self.tx_count += 1
        self.net.send(pkt, packet_index=self.tx_count)

    def start(self) -> None:
        self._send_more()

    def _send_more(self) -> None:
        window = max(1, int(self.cwnd))
        while self.snd_nxt < self.n_segments and self.snd_nxt - self.snd_una < window:
            seg = self.snd_nxt
            if seg >= self.high_tx:
                self.high_tx = seg + 1
                if self._timed is None:
                    self._timed = (seg, self.sim.now)
            elif self._timed is not None and self._timed[0] == seg:
                self._timed = None
            self._emit(seg)
            self.snd_nxt += 1
        if self.snd_una < self.snd_nxt:
            self._arm_timer()

    def _retransmit(self, seg: int) -> None:
        if self._timed is not None and self._timed[0] == seg:
            self._timed = None
        self._emit(seg)

    # --- RTO (lazy: one pending event, deadline re-checked on fire) ----
    def _arm_timer(self, restart: bool = False) -> None:
        if self._deadline is not None and not restart:
            return
        self._deadline = self.sim.now + self.rto
        if self._timer is not None and self._timer.fire_at > self._deadline:
            self.sim.cancel(self._timer)
            self._timer = None
        if self._timer is None:
            self._timer = self.sim.schedule(self._deadline, self._on_timer)

    def _cancel_timer(self) -> None:
        self._deadline = None

    def _on_timer(self) -> None:
        self._timer = None
        if self._deadline is None or self.done:
            return
        if self.sim.now < self._deadline:
            self._timer = self.sim.schedule(self._deadline, self._on_timer)
            return
        self._deadline = None
        self._timeout()

    def _timeout(self) -> None:
        self.record.timeouts += 1
        flight = self.snd_nxt - self.snd_una
        self.ssthresh = max(flight / 2, 2.0)
        self.cwnd = 1.0
        self.recover = self.snd_nxt - 1
        self.in_recovery = False
        self.dupacks = 0
        self._timed = None
        self.backoff += 1
        self.rto = min(self.rto * 2, self.cfg.rto_max)
        self.snd_nxt = self.snd_una
        self._send_more()

    def _rtt_sample(self, sample: int) -> None:
        if self.srtt is None:
            self.srtt = float(sample)
            self.rttvar = sample / 2
        else:
            self.rttvar = 0.75 * self.rttvar + 0.25 * abs(self.srtt - sample)
            self.srtt = 0.875 * self.srtt + 0.125 * sample
        self.rto = min(self.cfg.rto_max, max(self.cfg.rto_min, int(self.srtt + 4 * self.rttvar)))

    # --- ack processing -----------------------------------------------
    def on_packet(self, pkt: Packet) -> None:
        if self.done:
            return
        ack, ece = pkt.ack, pkt.ece
        cfg = self.cfg
        if cfg.ecn:
            self._ecn_feedback(ack, ece)
        if ack > self.snd_una:
            newly = ack - self.snd_una
            self.snd_una = ack
            if self.snd_nxt < ack:
                self.snd_nxt = ack
            if self._timed is not None and self._timed[0] < ack:
                self._rtt_sample(self.sim.now - self._timed[1])
                self._timed = None
            self.backoff = 0
            if self.in_recovery:
                if ack > self.recover:
                    self.in_recovery = False
                    self.cwnd = min(self.ssthresh, max(1.0, self.snd_nxt - self.snd_una + 1.0))
                    self.dupacks = 0
                else:
                    self._retransmit(self.snd_una)
                    self.cwnd = max(self.cwnd - newly + 1, 1.0)
            else:
                self.dupacks = 0
                if self.cwnd < self.ssthresh:
                    self.cwnd += newly
                else:
                    self.cwnd += newly / self.cwnd
            if self.snd_una >= self.n_segments:
                self.done = True
                self._cancel_timer()
                return
            self._arm_timer(restart=True)
        elif ack == self.snd_una and self.snd_una < self.snd_nxt:
            self.dupacks += 1
            if self.in_recovery:
                self.cwnd += 1
            elif self.dupacks == cfg.dupack_threshold and ack - 1 >= self.recover:
                flight = self.snd_nxt - self.snd_una
                self.ssthresh = max(flight / 2, 2.0)
                self.cwnd = self.ssthresh + cfg.dupack_threshold
                self.recover = self.snd_nxt - 1
                self.in_recovery = True
                self._retransmit(self.snd_una)
                self._arm_timer(restart=True)
        self._send_more()

    def _ecn_feedback(self, ack: int, ece: bool) -> None:
        cfg = self.cfg
        if cfg.dctcp:
            self._win_acks += 1
            self._win_marked += int(ece)
            if ack >= self._win_end:
                self.alpha = dctcp_alpha(self.alpha, self._win_marked / self._win_acks, cfg.dctcp_g)
                self._win_acks = self._win_marked = 0
                self._win_end = self.snd_nxt
        if ece and ack > self._cut_end and not self.in_recovery:
            if cfg.dctcp:
                self.cwnd = max(self.cwnd * (1 - self.alpha / 2), 1.0)
            else:
                self.cwnd = max(self.cwnd / 2, 1.0)
            self.ssthresh = max(self.cwnd, 2.0)
            self._cut_end = self.snd_nxt


class TcpReceiver:
    def __init__(self, stack: "TcpStack", flow_id: int, src: int, n_segments: int,
                 record: FlowRecord, on_complete: Optional[Callable] = None):
        self.stack = stack
        self.flow_id = flow_id
        self.src = src
        self.n_segments = n_segments
        self.record = record
        self.on_complete = on_complete
        self.rcv_nxt = 0
        self.ooo: set[int] = set()

    def on_packet(self, pkt: Packet) -> None:
        rec = self.record
        rec.pkts_delivered += 1
        seg = pkt.seq
        if seg < self.rcv_nxt or seg in self.ooo:
            rec.duplicates += 1
        elif seg == self.rcv_nxt:
            rec.bytes_delivered += pkt.size - TCP_OVERHEAD
            self.rcv_nxt += 1
            while self.rcv_nxt in self.ooo:
                self.ooo.discard(self.rcv_nxt)
                self.rcv_nxt += 1
        else:
            rec.bytes_delivered += pkt.size - TCP_OVERHEAD
            self.ooo.add(seg)
        ack = Packet(Proto.TCP, Channel.DATA, self.flow_id, pkt.dst, pkt.src, MIN_PACKET_BYTES,
                     pkt.priority, ecn_capable=False)
        ack.ack = self.rcv_nxt
        ack.ece = pkt.ce
        self.stack.net.send(ack, packet_index=seg)
        if self.rcv_nxt >= self.n_segments and rec.end is None:
            rec.end = self.stack.sim.now
            if self.on_complete is not None:
                self.on_complete(rec)


class TcpStack:
    def __init__(self, sim: Simulator, net: Network, host: Host, config: TcpConfig):
        self.sim = sim
        self.net = net
        self.host = host
        self.config = config
        host.services["tcp"] = self

    def open_and_send(self, flow_id: int, dst: int, nbytes: int, record: FlowRecord,
                      on_complete: Optional[Callable] = None,
                      priority: Optional[int] = None) -> TcpSender:
        if nbytes <= 0:
            raise ValueError("flow size must be positive")
        if flow_id in self.host.handlers:
            raise ValueError(f"flow {flow_id} already open")
        cfg = self.config
        if priority is not None and priority != cfg.priority:
            cfg = replace(cfg, priority=priority)
        sender = TcpSender(self, flow_id, dst, nbytes, record, cfg)
        peer: TcpStack = self.net.hosts[dst].services["tcp"]
        receiver = TcpReceiver(peer, flow_id, self.host.node, sender.n_segments, record, on_complete)
        self.host.bind(flow_id, sender.on_packet)
        peer.host.bind(flow_id, receiver.on_packet)
        sender.start()
        return sender
