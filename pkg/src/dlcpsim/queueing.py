"""Analytic drop-threshold model for strict-priority gradient queues.

Each switch queue is split into a small-gradient and a large-gradient
virtual queue, each treated as an M/M/1/m system. Service rates cascade down
the priority order: a queue is served only while every higher-priority queue
is idle. The optimizer picks integer thresholds that minimize the predicted
extra convergence rounds under a total buffer budget.
"""

from __future__ import annotations

import bisect
import csv
import itertools
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .workload import layer_priority


class InfeasibleError(ValueError):
    """The priority cascade leaves some queue without positive service."""

    def __init__(self, message: str, report: Optional[list[dict]] = None):
        super().__init__(message)
        self.report = report or []


def mm1m_loss(rho: float, m: float) -> float:
    """Blocking probability of an M/M/1/m queue: (rho^m - rho^(m+1)) / (1 - rho^(m+1)).

    ``m`` may be fractional (virtual-queue capacities are scaled by theta).
    At ``rho == 1`` the continuity limit ``1 / (m + 1)`` is returned.
    """
    if rho < 0 or m < 0 or math.isnan(rho) or math.isnan(m):
        raise ValueError("rho and m must be non-negative")
    if rho == 0:
        return 0.0 if m > 0 else 1.0
    if rho == 1:
        return 1.0 / (m + 1)
    if rho > 1:
        # divide through by rho^(m+1) to stay finite for large m
        inv = 1.0 / rho
        return (1.0 - inv) / (1.0 - inv ** (m + 1))
    return (rho ** m - rho ** (m + 1)) / (1.0 - rho ** (m + 1))


def printed_small_loss(rho: float, theta: float, s: float) -> float:
    """Alternative small-gradient loss with theta inside a base and an exponent.

    Kept only for comparison (``search.formula = "printed"``); the optimizer
    uses the standard blocking formula on the virtual capacity by default.
    """
    if rho == 1:
        rho = 1 - 1e-12
    return (rho ** (theta * s) - (theta * rho) ** (s + 1)) / (1 - rho ** (theta * s + 1))


@dataclass
class QueueingModel:
    n_queues: int
    buffer: int
    arrival_rate: float
    service_rate: float
    theta: float
    layer_sizes: list[float]

    def __post_init__(self):
        if self.n_queues < 1 or self.buffer < self.n_queues:
            raise ValueError("need N >= 1 queues and a buffer of at least one packet per queue")
        if self.arrival_rate < 0 or self.service_rate <= 0:
            raise ValueError("arrival rate must be >= 0 and service rate > 0")
        if not 0 <= self.theta <= 1:
            raise ValueError("theta must be in [0, 1]")
        if not self.layer_sizes or any(s < 0 for s in self.layer_sizes) or sum(self.layer_sizes) <= 0:
            raise ValueError("layer sizes must be non-negative with a positive total")

    def queue_shares(self) -> list[float]:
        """Fraction of model volume mapped to each queue."""
        m = len(self.layer_sizes)
        total = float(sum(self.layer_sizes))
        shares = [0.0] * self.n_queues
        for layer, size in enumerate(self.layer_sizes):
            shares[layer_priority(layer, m, self.n_queues)] += size
        return [s / total for s in shares]

    def arrivals(self) -> list[float]:
        return [self.arrival_rate * s for s in self.queue_shares()]


@dataclass(frozen=True)
class QueueRates:
    queue: int
    arrival: float
    service: float
    rho: float


def cascade(model: QueueingModel, check: bool = True) -> list[QueueRates]:
    """Per-queue (lambda_i, mu_i, rho_i) with mu_i = mu * prod_{k<i} (1 - rho_k)."""
    out = []
    mu_i = model.service_rate
    for i, lam in enumerate(model.arrivals()):
        rho = lam / mu_i if mu_i > 0 else math.inf
        out.append(QueueRates(i + 1, lam, mu_i, rho))
        mu_i = mu_i * (1 - rho) if math.isfinite(rho) else -math.inf
    if check:
        bad = [r for r in out if r.service <= 0 or r.rho >= 1]
        if bad:
            report = [{"queue": r.queue, "lambda": r.arrival, "mu": r.service, "rho": r.rho} for r in out]
            raise InfeasibleError(
                f"priority cascade infeasible at queue {bad[0].queue}: rho={bad[0].rho:.4g}, "
                f"mu={bad[0].service:.4g} (total lambda must be below mu)", report)
    return out


# ------------------------------------------------------------------ cost model
@dataclass
class PiecewiseLinear:
    xs: list[float]
    ys: list[float]

    def __post_init__(self):
        if len(self.xs) != len(self.ys) or len(self.xs) < 2:
            raise ValueError("need at least two knots")
        if self.xs[0] != 0 or self.ys[0] != 0:
            raise ValueError("cost curve must start at f(0) = 0")
        if any(b <= a for a, b in zip(self.xs, self.xs[1:])):
            raise ValueError("knots must be strictly increasing in x")
        if any(b < a for a, b in zip(self.ys, self.ys[1:])):
            raise ValueError("cost curve must be non-decreasing")

    def __call__(self, x: float) -> float:
        xs, ys = self.xs, self.ys
        if x >= xs[-1]:
            # extend the last segment
            slope = (ys[-1] - ys[-2]) / (xs[-1] - xs[-2])
            return ys[-1] + slope * (x - xs[-1])
        if x <= 0:
            return 0.0
        k = bisect.bisect_right(xs, x)
        x0, x1, y0, y1 = xs[k - 1], xs[k], ys[k - 1], ys[k]
        return y0 + (y1 - y0) * (x - x0) / (x1 - x0)

    @classmethod
    def knee(cls, knee: float, slope: float) -> "PiecewiseLinear":
        """Zero up to ``knee``, then rising linearly with ``slope`` up to x = 1."""
        if not 0 <= knee < 1 or slope < 0:
            raise ValueError("knee must be in [0, 1) and slope >= 0")
        if knee == 0:
            return cls([0.0, 1.0], [0.0, slope])
        return cls([0.0, knee, 1.0], [0.0, 0.0, slope * (1 - knee)])

    @classmethod
    def zero(cls) -> "PiecewiseLinear":
        return cls([0.0, 1.0], [0.0, 0.0])


# tolerance anchors: small vs large gradients, front vs back layers
SMALL_KNEE = 0.016
LARGE_KNEE = 0.001
FRONT_TOLERANCE = 0.011
BACK_TOLERANCE = 0.004


@dataclass
class CostModel:
    small: list[PiecewiseLinear]
    large: list[PiecewiseLinear]

    def __post_init__(self):
        if len(self.small) != len(self.large) or not self.small:
            raise ValueError("need one small and one large curve per queue")

    @property
    def n_queues(self) -> int:
        return len(self.small)

    @classmethod
    def from_anchors(cls, n_queues: int, slope: float = 100.0, small_knee: float = SMALL_KNEE,
                     large_knee: float = LARGE_KNEE, front: float = FRONT_TOLERANCE,
                     back: float = BACK_TOLERANCE) -> "CostModel":
        """Knee curves scaled per queue from the front-layer to the back-layer tolerance."""
        factors = np.linspace(1.0, back / front, n_queues) if n_queues > 1 else np.array([1.0])
        return cls([PiecewiseLinear.knee(small_knee * f, slope) for f in factors],
                   [PiecewiseLinear.knee(large_knee * f, slope) for f in factors])

    @classmethod
    def flat(cls, n_queues: int) -> "CostModel":
        return cls([PiecewiseLinear.zero() for _ in range(n_queues)],
                   [PiecewiseLinear.zero() for _ in range(n_queues)])

    @classmethod
    def uniform(cls, n_queues: int, small: PiecewiseLinear, large: PiecewiseLinear) -> "CostModel":
        return cls([small] * n_queues, [large] * n_queues)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["queue", "kind", "x", "f"])
            for i, (s, l) in enumerate(zip(self.small, self.large), 1):
                for kind, curve in (("small", s), ("large", l)):
                    for x, y in zip(curve.xs, curve.ys):
                        w.writerow([i, kind, repr(float(x)), repr(float(y))])

    @classmethod
    def read_csv(cls, path: str | Path, n_queues: Optional[int] = None) -> "CostModel":
        """Read curves; a file with a single queue 0 entry is broadcast to ``n_queues``."""
        knots: dict[tuple[int, str], list[tuple[float, float]]] = {}
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                knots.setdefault((int(row["queue"]), row["kind"]), []).append(
                    (float(row["x"]), float(row["f"])))
        queues = sorted({q for q, _ in knots})

        def curve(q: int, kind: str) -> PiecewiseLinear:
            pts = sorted(knots[(q, kind)])
            return PiecewiseLinear([p[0] for p in pts], [p[1] for p in pts])

        if queues == [0]:
            if n_queues is None:
                raise ValueError("broadcast cost file needs n_queues")
            return cls.uniform(n_queues, curve(0, "small"), curve(0, "large"))
        if queues != list(range(1, len(queues) + 1)):
            raise ValueError(f"{path}: queues must be numbered 1..N")
        return cls([curve(q, "small") for q in queues], [curve(q, "large") for q in queues])


# ------------------------------------------------------------------ optimizer
@dataclass
class Thresholds:
    S: list[int]
    L: list[int]
    theta: float
    objective: float
    rates: list[QueueRates]
    loss_small: list[float]
    loss_large: list[float]
    method: str = ""
    evaluated: int = 0

    @property
    def S_virtual(self) -> list[float]:
        return [self.theta * s for s in self.S]

    @property
    def L_virtual(self) -> list[float]:
        return [l - self.theta * s for s, l in zip(self.S, self.L)]

    def rows(self) -> list[dict]:
        return [{"queue": r.queue, "S": s, "L": l, "S_virtual": f"{sv:.6g}", "L_virtual": f"{lv:.6g}",
                 "lambda": f"{r.arrival:.6g}", "mu": f"{r.service:.6g}", "rho": f"{r.rho:.6g}",
                 "loss_small": f"{ls:.6g}", "loss_large": f"{ll:.6g}"}
                for r, s, l, sv, lv, ls, ll in zip(self.rates, self.S, self.L, self.S_virtual,
                                                   self.L_virtual, self.loss_small, self.loss_large)]

    def write_csv(self, path: str | Path) -> None:
        rows = self.rows()
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(rows)


def virtual_losses(rho: float, theta: float, s: int, l: int, formula: str = "standard") -> tuple[float, float]:
    """(r^S, r^L) for one queue with thresholds S and L."""
    small_cap = theta * s
    large_cap = l - theta * s
    if formula == "printed":
        rs = printed_small_loss(rho, theta, s)
    elif formula == "standard":
        rs = mm1m_loss(rho, small_cap)
    else:
        raise ValueError(f"unknown loss formula {formula!r}")
    return rs, mm1m_loss(rho, large_cap)


def queue_cost(cost: CostModel, i: int, rho: float, theta: float, s: int, l: int,
               formula: str = "standard") -> float:
    rs, rl = virtual_losses(rho, theta, s, l, formula)
    return cost.small[i](rs) + cost.large[i](rl)


def _best_small(cost: CostModel, i: int, rho: float, theta: float, l: int,
                formula: str) -> tuple[float, int]:
    """min over 1 <= S <= L of the queue cost; ties go to the largest S."""
    best, best_s = math.inf, 1
    for s in range(1, l + 1):
        c = queue_cost(cost, i, rho, theta, s, l, formula)
        if c <= best:
            best, best_s = c, s
    return best, best_s


def _compositions(total: int, parts: int):
    """All tuples of ``parts`` positive integers with sum <= total."""
    if parts == 1:
        for a in range(1, total + 1):
            yield (a,)
        return
    for a in range(1, total - parts + 2):
        for rest in _compositions(total - a, parts - 1):
            yield (a,) + rest


def _objective(table: list[list[float]], alloc: Sequence[int]) -> float:
    total = 0.0
    for i, l in enumerate(alloc):
        total += table[i][l]
    return total


def optimize_thresholds(model: QueueingModel, cost: CostModel, buffer: Optional[int] = None, *,
                        formula: str = "standard", restarts: int = 8, seed: int = 0,
                        grid_limit: int = 10 ** 6) -> Thresholds:
    """Integer thresholds minimizing sum_i f^S(i, r^S_i) + f^L(i, r^L_i) with sum L_i <= B.

    The per-queue subproblem (best S for each L) is solved exactly. The
    buffer allocation is enumerated when there are at most ``grid_limit``
    allocations; otherwise coordinate descent (pairwise transfers) from the
    uniform split plus seeded random restarts is used.
    """
    B = model.buffer if buffer is None else buffer
    N = model.n_queues
    if cost.n_queues != N:
        raise ValueError(f"cost model has {cost.n_queues} queues, model has {N}")
    if B < N:
        raise ValueError("buffer must hold at least one packet per queue")
    rates = cascade(model)
    table: list[list[float]] = []
    best_s: list[list[int]] = []
    max_l = B - (N - 1)
    for i, r in enumerate(rates):
        row, srow = [math.inf], [0]
        for l in range(1, max_l + 1):
            c, s = _best_small(cost, i, r.rho, model.theta, l, formula)
            row.append(c)
            srow.append(s)
        table.append(row)
        best_s.append(srow)

    base, extra = divmod(B, N)
    uniform = tuple(base + (1 if i < extra else 0) for i in range(N))
    best_alloc, best_obj = uniform, _objective(table, uniform)
    evaluated = 1
    n_allocs = math.comb(B, N)
    if n_allocs <= grid_limit:
        method = "exhaustive"
        for alloc in _compositions(B, N):
            evaluated += 1
            obj = _objective(table, alloc)
            if obj < best_obj:
                best_alloc, best_obj = alloc, obj
    else:
        method = "coordinate-descent"
        rng = np.random.default_rng(seed)
        starts = [uniform]
        for _ in range(restarts):
            cuts = np.sort(rng.choice(np.arange(1, B), N - 1, replace=False))
            starts.append(tuple(int(x) for x in np.diff(np.concatenate(([0], cuts, [B])))))
        for start in starts:
            alloc, obj, n = _descend(table, list(start), max_l)
            evaluated += n
            if obj < best_obj:
                best_alloc, best_obj = tuple(alloc), obj

    S = [best_s[i][l] for i, l in enumerate(best_alloc)]
    losses = [virtual_losses(r.rho, model.theta, s, l, formula)
              for r, s, l in zip(rates, S, best_alloc)]
    return Thresholds(S, list(best_alloc), model.theta, best_obj, rates,
                      [x[0] for x in losses], [x[1] for x in losses], method, evaluated)


def _descend(table: list[list[float]], alloc: list[int], max_l: int) -> tuple[list[int], float, int]:
    n = len(alloc)
    obj = _objective(table, alloc)
    evaluated = 1
    improved = True
    while improved:
        improved = False
        for i, j in itertools.permutations(range(n), 2):
            # move k packets from queue j to queue i, best k
            best_k, best_delta = 0, 0.0
            for k in range(1, alloc[j]):
                if alloc[i] + k > max_l:
                    break
                delta = (table[i][alloc[i] + k] - table[i][alloc[i]]
                         + table[j][alloc[j] - k] - table[j][alloc[j]])
                evaluated += 1
                if delta < best_delta:
                    best_k, best_delta = k, delta
            if best_k:
                alloc[i] += best_k
                alloc[j] -= best_k
                obj = _objective(table, alloc)
                improved = True
    return alloc, obj, evaluated
