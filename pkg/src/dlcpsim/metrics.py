"""Flow, iteration and switch-counter measurement plus CSV output."""

from __future__ import annotations

import csv
import math
from fractions import Fraction
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

FLOW_COLUMNS = (
    "flow_id", "transport", "category", "iteration", "src", "dst", "tensor_id", "stage",
    "loss_bound", "bytes_offered", "bytes_delivered", "start_ns", "end_ns", "fct_ns",
    "retransmit_rounds", "timeouts", "signal_timeouts", "pkts_sent", "pkts_delivered",
    "drops_selective", "drops_buffer", "drops_early", "duplicates",
)
ITERATION_COLUMNS = ("iteration", "start_ns", "end_ns", "compute_ns", "comm_ns")
COUNTER_COLUMNS = ("port", "queue", "ecn_capable", "accepted", "marked",
                   "selective_drops", "buffer_drops")


@dataclass(eq=False)
class FlowRecord:
    flow_id: int
    transport: str
    src: int
    dst: int
    bytes_offered: int
    start: int
    category: str = "flow"
    iteration: int = -1
    tensor_id: int = 0
    stage: str = "push"
    loss_bound: float = 0.0
    end: Optional[int] = None
    bytes_delivered: int = 0
    retransmit_rounds: int = 0
    timeouts: int = 0
    signal_timeouts: int = 0
    pkts_sent: int = 0
    pkts_delivered: int = 0
    drops_selective: int = 0
    drops_buffer: int = 0
    drops_early: int = 0
    duplicates: int = 0

    @property
    def done(self) -> bool:
        return self.end is not None

    @property
    def fct(self) -> int:
        if self.end is None:
            raise ValueError(f"flow {self.flow_id} has not completed")
        return self.end - self.start

    @property
    def in_flight(self) -> int:
        return (self.pkts_sent - self.pkts_delivered - self.drops_selective
                - self.drops_buffer - self.drops_early)

    def row(self) -> dict:
        return {
            "flow_id": self.flow_id, "transport": self.transport, "category": self.category,
            "iteration": self.iteration, "src": self.src, "dst": self.dst,
            "tensor_id": self.tensor_id, "stage": self.stage, "loss_bound": f"{self.loss_bound:.6g}",
            "bytes_offered": self.bytes_offered, "bytes_delivered": self.bytes_delivered,
            "start_ns": self.start, "end_ns": "" if self.end is None else self.end,
            "fct_ns": "" if self.end is None else self.end - self.start,
            "retransmit_rounds": self.retransmit_rounds, "timeouts": self.timeouts,
            "signal_timeouts": self.signal_timeouts, "pkts_sent": self.pkts_sent,
            "pkts_delivered": self.pkts_delivered, "drops_selective": self.drops_selective,
            "drops_buffer": self.drops_buffer, "drops_early": self.drops_early,
            "duplicates": self.duplicates,
        }


@dataclass
class IterationRecord:
    iteration: int
    start: int
    end: int
    compute_time: int
    first_flow_start: int

    @property
    def comm_time(self) -> int:
        """Network time from the first flow of the iteration to the barrier."""
        return self.end - self.first_flow_start

    def row(self) -> dict:
        return {"iteration": self.iteration, "start_ns": self.start, "end_ns": self.end,
                "compute_ns": self.compute_time, "comm_ns": self.comm_time}


def nearest_rank(sorted_values: Sequence[float], pct: float) -> float:
    if not sorted_values:
        raise ValueError("no values")
    if not 0 < pct <= 100:
        raise ValueError("percentile must be in (0, 100]")
    rank = max(1, math.ceil(Fraction(str(pct)) * len(sorted_values) / 100))
    return sorted_values[rank - 1]


def fct_stats(values: Iterable[float], percentiles: Sequence[float] = (50, 95, 99)) -> dict:
    """Mean, nearest-rank percentiles and max of a set of completion times.

    ``values`` may be FlowRecords or plain numbers.
    """
    xs = sorted(v.fct if isinstance(v, FlowRecord) else v for v in values)
    if not xs:
        raise ValueError("fct_stats needs at least one record")
    out = {"count": len(xs), "mean": sum(xs) / len(xs)}
    for p in percentiles:
        out[f"p{p:g}"] = nearest_rank(xs, p)
    out["max"] = xs[-1]
    return out


def estimate_jct(n_epochs: float, compute_time: float, network_time: float) -> float:
    """Job completion time as epochs x (compute + 2 x network)."""
    if n_epochs <= 0 or compute_time < 0 or network_time < 0:
        raise ValueError("epochs must be positive and times non-negative")
    return n_epochs * (compute_time + 2 * network_time)


def _write(path: Path, columns: Sequence[str], rows: Iterable[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r)


def write_flows(path: Path, records: Iterable[FlowRecord]) -> None:
    _write(path, FLOW_COLUMNS, (r.row() for r in records))


def write_iterations(path: Path, records: Iterable[IterationRecord]) -> None:
    _write(path, ITERATION_COLUMNS, (r.row() for r in records))


def write_counters(path: Path, ports) -> None:
    rows = []
    for port in ports:
        for q, ecn, vals in port.counter_rows():
            if any(vals):
                rows.append(dict(zip(COUNTER_COLUMNS, (port.name, q, int(ecn), *vals))))
    _write(path, COUNTER_COLUMNS, rows)


def read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
