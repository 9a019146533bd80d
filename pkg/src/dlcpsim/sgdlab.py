"""Drop-tolerance lab: data-parallel SGD on tiny numpy models with gradient loss.

Each step every simulated worker computes a float32 gradient on its own
minibatch. A drop policy removes elements (or contiguous packet-sized
blocks) per worker; the server averages the values it received for each
element and leaves an element untouched when no worker delivered it.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import isotonic_regression

from .queueing import CostModel, PiecewiseLinear


class TaskKind(str, Enum):
    LINEAR = "linear-regression"
    MLP2 = "two-layer-mlp"
    MLP_CLS = "small-mlp-classification"


# Accuracy for classification, mean squared error for the regression tasks.
DEFAULT_TARGETS = {
    TaskKind.LINEAR: 0.01,
    TaskKind.MLP2: 0.08,
    TaskKind.MLP_CLS: 0.9,
}


@dataclass
class ToyTask:
    kind: TaskKind = TaskKind.MLP_CLS
    n_samples: int = 2048
    input_dim: int = 16
    hidden: int = 24
    n_classes: int = 4
    depth: int = 5
    batch_size: int = 32
    learning_rate: float = 0.2
    target: Optional[float] = None
    max_epochs: int = 80
    noise: float = 0.1

    def __post_init__(self):
        self.kind = TaskKind(self.kind)
        if self.target is None:
            self.target = DEFAULT_TARGETS[self.kind]
        if self.n_samples < self.batch_size or self.batch_size < 1:
            raise ValueError("need n_samples >= batch_size >= 1")
        if self.learning_rate <= 0 or self.max_epochs < 1:
            raise ValueError("learning rate and max epochs must be positive")
        if self.kind is TaskKind.MLP_CLS and self.depth < 2:
            raise ValueError("classification MLP needs at least two layers")

    @property
    def higher_is_better(self) -> bool:
        return self.kind is TaskKind.MLP_CLS


class _Model:
    """Dense layers with tanh activations; parameters live in one flat float64 vector."""

    def __init__(self, task: ToyTask, rng: np.random.Generator):
        self.task = task
        t = task
        if t.kind is TaskKind.LINEAR:
            dims = [t.input_dim, 1]
        elif t.kind is TaskKind.MLP2:
            dims = [t.input_dim, t.hidden, 1]
        else:
            dims = [t.input_dim] + [t.hidden] * (t.depth - 1) + [t.n_classes]
        self.dims = dims
        self.shapes = []
        self.layer_of = []
        sizes = []
        for k, (a, b) in enumerate(zip(dims, dims[1:])):
            self.shapes += [(a, b), (b,)]
            sizes += [a * b, b]
            self.layer_of += [k] * (a * b + b)
        self.n_layers = len(dims) - 1
        self.layer_of = np.asarray(self.layer_of)
        self.offsets = np.concatenate(([0], np.cumsum(sizes)))
        self.params = np.zeros(int(self.offsets[-1]))
        for i, (a, b) in enumerate(zip(dims, dims[1:])):
            w = rng.standard_normal((a, b)) * math.sqrt(1.0 / a)
            self._view(2 * i)[...] = w

    @property
    def size(self) -> int:
        return len(self.params)

    def _view(self, j: int, vec: Optional[np.ndarray] = None) -> np.ndarray:
        vec = self.params if vec is None else vec
        return vec[self.offsets[j]: self.offsets[j + 1]].reshape(self.shapes[j])

    def forward(self, x: np.ndarray) -> list[np.ndarray]:
        acts = [x]
        h = x
        for i in range(self.n_layers):
            h = h @ self._view(2 * i) + self._view(2 * i + 1)
            if i < self.n_layers - 1:
                h = np.tanh(h)
            acts.append(h)
        return acts

    def loss_grad(self, x: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
        acts = self.forward(x)
        out = acts[-1]
        n = len(x)
        if self.task.kind is TaskKind.MLP_CLS:
            z = out - out.max(axis=1, keepdims=True)
            p = np.exp(z)
            p /= p.sum(axis=1, keepdims=True)
            loss = float(-np.log(p[np.arange(n), y] + 1e-12).mean())
            delta = p
            delta[np.arange(n), y] -= 1
            delta /= n
        else:
            err = out[:, 0] - y
            loss = float(0.5 * np.mean(err ** 2))
            delta = (err / n)[:, None]
        grad = np.empty_like(self.params)
        for i in reversed(range(self.n_layers)):
            self._view(2 * i, grad)[...] = acts[i].T @ delta
            self._view(2 * i + 1, grad)[...] = delta.sum(axis=0)
            if i > 0:
                delta = (delta @ self._view(2 * i).T) * (1 - acts[i] ** 2)
        return loss, grad

    def metric(self, x: np.ndarray, y: np.ndarray) -> float:
        out = self.forward(x)[-1]
        if self.task.kind is TaskKind.MLP_CLS:
            return float(np.mean(out.argmax(axis=1) == y))
        return float(0.5 * np.mean((out[:, 0] - y) ** 2))


def make_data(task: ToyTask, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Synthetic data from a fixed random teacher network."""
    x = rng.standard_normal((task.n_samples, task.input_dim))
    if task.kind is TaskKind.LINEAR:
        w = rng.standard_normal(task.input_dim)
        return x, x @ w + task.noise * rng.standard_normal(task.n_samples)
    if task.kind is TaskKind.MLP2:
        w1 = rng.standard_normal((task.input_dim, task.hidden)) / math.sqrt(task.input_dim)
        w2 = rng.standard_normal(task.hidden)
        return x, np.tanh(x @ w1) @ w2 + task.noise * rng.standard_normal(task.n_samples)
    w1 = rng.standard_normal((task.input_dim, task.hidden)) / math.sqrt(task.input_dim)
    w2 = rng.standard_normal((task.hidden, task.n_classes)) * 2
    logits = np.tanh(2 * x @ w1) @ w2
    logits += task.noise * rng.standard_normal(logits.shape)
    return x, logits.argmax(axis=1)


class DropMode(str, Enum):
    UNIFORM = "uniform"
    LAYER_BAND = "layer-band"
    MAGNITUDE_BAND = "magnitude-band"


LAYER_BANDS = ("front-20", "middle-20", "back-20")
MAGNITUDE_BANDS = ("smallest-20", "medium-20", "largest-20")


@dataclass(frozen=True)
class DropPolicy:
    mode: DropMode = DropMode.UNIFORM
    p: float = 0.0
    band: Optional[str] = None
    block_size: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "mode", DropMode(self.mode))
        if not 0 <= self.p < 1:
            raise ValueError("drop probability must be in [0, 1)")
        if self.mode is DropMode.LAYER_BAND and self.band not in LAYER_BANDS:
            raise ValueError(f"layer band must be one of {LAYER_BANDS}")
        if self.mode is DropMode.MAGNITUDE_BAND and self.band not in MAGNITUDE_BANDS:
            raise ValueError(f"magnitude band must be one of {MAGNITUDE_BANDS}")
        if self.mode is DropMode.UNIFORM and self.band is not None:
            raise ValueError("uniform drops take no band")
        if self.block_size is not None and self.block_size < 1:
            raise ValueError("block size must be positive")

    @property
    def label(self) -> str:
        return self.mode.value if self.band is None else f"{self.mode.value}:{self.band}"


def _band_range(band: str, n: int) -> tuple[int, int]:
    """Index range [lo, hi) of a 20% band over ``n`` ranked items."""
    width = max(1, round(0.2 * n))
    if band.startswith(("front", "smallest")):
        return 0, width
    if band.startswith(("back", "largest")):
        return n - width, n
    lo = (n - width) // 2
    return lo, lo + width


def layer_band_mask(band: str, layer_of: np.ndarray, n_layers: int) -> np.ndarray:
    lo, hi = _band_range(band, n_layers)
    return (layer_of >= lo) & (layer_of < hi)


def drop_mask(grad: np.ndarray, policy: DropPolicy, eligible: Optional[np.ndarray],
              rng: np.random.Generator) -> np.ndarray:
    """Boolean mask of dropped elements for one worker's gradient."""
    n = grad.size
    if policy.p == 0:
        return np.zeros(n, dtype=bool)
    bs = policy.block_size or 1
    n_units = -(-n // bs)
    if policy.mode is DropMode.MAGNITUDE_BAND:
        mags = np.abs(grad)
        unit_mag = np.add.reduceat(mags, np.arange(0, n, bs)) / np.diff(np.append(np.arange(0, n, bs), n))
        order = np.argsort(unit_mag, kind="stable")
        lo, hi = _band_range(policy.band, n_units)
        unit_ok = np.zeros(n_units, dtype=bool)
        unit_ok[order[lo:hi]] = True
    elif eligible is not None:
        unit_ok = np.logical_or.reduceat(eligible, np.arange(0, n, bs)) if bs > 1 else eligible
    else:
        unit_ok = np.ones(n_units, dtype=bool)
    unit_drop = unit_ok & (rng.random(n_units) < policy.p)
    return np.repeat(unit_drop, bs)[:n] if bs > 1 else unit_drop


def aggregate(grads: np.ndarray, dropped: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean over received values per element; returns (update, received_any)."""
    received = ~dropped
    counts = received.sum(axis=0)
    sums = np.where(received, grads.astype(np.float64), 0.0).sum(axis=0)
    upd = np.zeros(grads.shape[1])
    ok = counts > 0
    upd[ok] = sums[ok] / counts[ok]
    return upd, ok


@dataclass
class DropOutcome:
    policy: str
    p: float
    seed: int
    epochs_to_target: Optional[int]
    steps_to_target: Optional[int]
    final_metric: float
    converged: bool
    dropped_fraction: float = 0.0
    block_size: int = 1

    def row(self) -> dict:
        return {"policy": self.policy, "p": f"{self.p:g}", "seed": self.seed,
                "epochs": "" if self.epochs_to_target is None else self.epochs_to_target,
                "steps": "" if self.steps_to_target is None else self.steps_to_target,
                "final_metric": f"{self.final_metric:.6g}", "converged": int(self.converged),
                "dropped_fraction": f"{self.dropped_fraction:.6g}", "block_size": self.block_size}


OUTCOME_COLUMNS = ("policy", "p", "seed", "epochs", "steps", "final_metric", "converged",
                   "dropped_fraction", "block_size")


def train_with_drops(task: ToyTask, policy: DropPolicy, n_workers: int = 4, seed: int = 0,
                     eval_every: int = 0) -> DropOutcome:
    """Train until the target metric is met; epochs count full passes over the data.

    The model and data depend only on ``seed``; drop decisions use their own
    stream, so a zero-drop policy reproduces the baseline bit for bit.
    ``eval_every`` (steps) refines ``steps_to_target``; 0 means once per epoch.
    """
    if n_workers < 1:
        raise ValueError("need at least one worker")
    out = _train(task, policy, n_workers, seed, eval_every)
    out.block_size = policy.block_size or 1
    return out


def _train(task: ToyTask, policy: DropPolicy, n_workers: int, seed: int,
           eval_every: int) -> DropOutcome:
    ss = np.random.SeedSequence(seed)
    data_rng, init_rng, order_rng, drop_rng = (np.random.default_rng(s) for s in ss.spawn(4))
    x, y = make_data(task, data_rng)
    model = _Model(task, init_rng)
    eligible = (layer_band_mask(policy.band, model.layer_of, model.n_layers)
                if policy.mode is DropMode.LAYER_BAND else None)
    per_step = n_workers * task.batch_size
    steps_per_epoch = max(1, task.n_samples // per_step)
    better = (lambda m: m >= task.target) if task.higher_is_better else (lambda m: m <= task.target)
    grads = np.empty((n_workers, model.size), dtype=np.float32)
    dropped_total = 0
    step = 0
    metric = model.metric(x, y)
    for epoch in range(1, task.max_epochs + 1):
        perm = order_rng.permutation(task.n_samples)
        for s in range(steps_per_epoch):
            batch = perm[s * per_step:(s + 1) * per_step]
            for w in range(n_workers):
                idx = batch[w * task.batch_size:(w + 1) * task.batch_size]
                _, g = model.loss_grad(x[idx], y[idx])
                grads[w] = g
            if not np.all(np.isfinite(grads)):
                return DropOutcome(policy.label, policy.p, seed, None, None, math.nan, False,
                                   dropped_total / max(1, step * n_workers * model.size))
            dropped = np.stack([drop_mask(grads[w], policy, eligible, drop_rng) for w in range(n_workers)])
            dropped_total += int(dropped.sum())
            upd, _ = aggregate(grads, dropped)
            model.params -= task.learning_rate * upd
            step += 1
            if eval_every and step % eval_every == 0 and better(model.metric(x, y)):
                return DropOutcome(policy.label, policy.p, seed, epoch, step, model.metric(x, y), True,
                                   dropped_total / (step * n_workers * model.size))
        metric = model.metric(x, y)
        if not math.isfinite(metric):
            break
        if better(metric):
            return DropOutcome(policy.label, policy.p, seed, epoch, step, metric, True,
                               dropped_total / (step * n_workers * model.size))
    return DropOutcome(policy.label, policy.p, seed, None, None, metric, False,
                       dropped_total / max(1, step * n_workers * model.size))


def validate_task(task: ToyTask, seed: int = 0, n_workers: int = 4) -> DropOutcome:
    out = train_with_drops(task, DropPolicy(), n_workers, seed)
    if not out.converged:
        raise ValueError(f"task {task.kind.value} does not reach target {task.target} "
                         f"within {task.max_epochs} epochs without drops (seed {seed})")
    return out


def epochs_or_cap(o: DropOutcome, cap: int) -> int:
    return o.epochs_to_target if o.converged else cap + 1


def sweep(task: ToyTask, policies: Sequence[DropPolicy], seeds: Sequence[int],
          n_workers: int = 4, eval_every: int = 0) -> list[DropOutcome]:
    return [train_with_drops(task, pol, n_workers, s, eval_every) for pol in policies for s in seeds]


def median_extra(outcomes: Sequence[DropOutcome], baseline: Sequence[DropOutcome], cap: int,
                 steps: bool = False) -> float:
    """Median over seeds of (epochs with drops - epochs without), paired by seed."""
    base = {o.seed: o for o in baseline}
    diffs = []
    for o in outcomes:
        b = base[o.seed]
        if steps:
            a_val = o.steps_to_target if o.converged else math.inf
            b_val = b.steps_to_target
        else:
            a_val, b_val = epochs_or_cap(o, cap), epochs_or_cap(b, cap)
        diffs.append(a_val - b_val)
    return float(np.median(diffs))


def calibrate_knee(task: ToyTask, grid: Sequence[float], seeds: Sequence[int],
                   n_workers: int = 4, block_size: Optional[int] = None,
                   tolerance: float = 0.0) -> tuple[float, dict]:
    """Largest uniform drop rate on ``grid`` whose median extra epochs stay within ``tolerance``.

    Rates are scanned in increasing order and the scan stops at the first
    rate over the tolerance.
    """
    base = sweep(task, [DropPolicy()], seeds, n_workers)
    knee = 0.0
    table = {}
    for p in sorted(grid):
        outs = sweep(task, [DropPolicy(DropMode.UNIFORM, p, block_size=block_size)], seeds, n_workers)
        extra = median_extra(outs, base, task.max_epochs)
        table[p] = extra
        if extra > tolerance:
            break
        knee = p
    return knee, table


def fit_cost_curve(points: dict[float, Sequence[float]], min_seeds: int = 3) -> PiecewiseLinear:
    """Monotone piecewise-linear (p -> extra epochs) from per-p samples of extra epochs.

    The per-p medians are fitted by isotonic regression; negative values are
    clipped to zero and f(0) = 0 is enforced.
    """
    if len(points) < 2:
        raise ValueError("need at least two drop rates to fit a cost curve")
    for p, vals in points.items():
        if len(vals) < min_seeds:
            raise ValueError(f"drop rate {p}: {len(vals)} seeds, need >= {min_seeds}")
    xs = sorted(points)
    med = np.array([max(0.0, float(np.median(points[p]))) for p in xs])
    fit = isotonic_regression(med, increasing=True).x
    if xs[0] != 0:
        xs = [0.0] + xs
        fit = np.concatenate(([0.0], fit))
    fit[0] = 0.0
    fit = np.maximum.accumulate(fit)
    return PiecewiseLinear([float(x) for x in xs], [float(v) for v in fit])


def fit_cost_curves(outcomes: Sequence[DropOutcome], baseline: Sequence[DropOutcome], cap: int,
                    n_queues: int, small_label: str = "magnitude-band:smallest-20",
                    large_label: str = "magnitude-band:largest-20") -> CostModel:
    """CostModel with the smallest-band curve as f^S and the largest-band curve as f^L."""
    base = {o.seed: epochs_or_cap(o, cap) for o in baseline}
    by: dict[str, dict[float, list[float]]] = {}
    for o in outcomes:
        by.setdefault(o.policy, {}).setdefault(o.p, []).append(epochs_or_cap(o, cap) - base[o.seed])
    for label in (small_label, large_label):
        if label not in by:
            raise ValueError(f"sweep has no outcomes for {label}")
        by[label].setdefault(0.0, [0.0] * len(base))
    return CostModel.uniform(n_queues, fit_cost_curve(by[small_label]), fit_cost_curve(by[large_label]))


def write_outcomes(path: str | Path, outcomes: Sequence[DropOutcome]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(OUTCOME_COLUMNS), lineterminator="\n")
        w.writeheader()
        for o in outcomes:
            w.writerow(o.row())
