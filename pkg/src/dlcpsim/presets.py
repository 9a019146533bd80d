"""Scenario presets: a base configuration, named variants and the properties each run set should show.

A preset run writes one directory per (variant, seed), a ``summary.csv``
over all runs and a ``manifest.json`` recording every property with the
observed values and whether it held. Checks read only the CSV files, so a
finished directory can be re-checked later.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .config import RunConfig, from_dict, load_config, override
from .metrics import estimate_jct, read_csv
from .packet import DLCP_OVERHEAD
from .scenario import colliding_hash_seed, run_and_write, write_summary
from .sgdlab import DropPolicy, ToyTask, sweep, write_outcomes
from .workload import resolve_profile

NS_PER_MS = 1_000_000


@dataclass
class Variant:
    label: str
    overrides: dict = field(default_factory=dict)


@dataclass
class Check:
    name: str
    description: str
    evaluate: Callable[["PresetResult"], tuple[bool, dict]]


@dataclass
class PresetResult:
    """Summary rows and run directories of a finished preset run."""

    out: Path
    rows: list[dict]

    def by_variant(self, label: str) -> list[dict]:
        return [r for r in self.rows if r["variant"] == label]

    def flows(self, label: str, seed: int) -> list[dict]:
        return read_csv(run_dir(self.out, label, seed) / "flows.csv")

    def config(self, label: str, seed: int) -> RunConfig:
        return load_config(run_dir(self.out, label, seed) / "config.toml")

    def mean_of(self, label: str, column: str) -> float:
        vals = [float(r[column]) for r in self.by_variant(label) if r[column] != ""]
        return float(np.mean(vals)) if vals else math.nan


@dataclass
class Preset:
    name: str
    description: str
    base: RunConfig
    variants: list[Variant]
    checks: list[Check]
    seeds: list[int] = field(default_factory=lambda: [1, 2, 3])
    # Extra work that needs no network simulation, run once per preset.
    extra: Optional[Callable[[Path, Sequence[int]], None]] = None

    def configs(self) -> list[tuple[str, RunConfig]]:
        out = []
        for v in self.variants:
            cfg = override(self.base, **v.overrides)
            cfg.run.name = f"{self.name}/{v.label}"
            out.append((v.label, cfg))
        return out

    def manifest(self) -> dict:
        return {"preset": self.name, "description": self.description,
                "variants": [v.label for v in self.variants],
                "properties": [{"name": c.name, "description": c.description} for c in self.checks]}


def run_dir(out: Path, label: str, seed: int) -> Path:
    return Path(out) / label / f"seed-{seed}"


def _run_one(args) -> dict:
    cfg, seed, path, label = args
    return run_and_write(cfg, seed, Path(path), label)


def run_preset(preset: Preset, out: Path, seeds: Optional[Sequence[int]] = None,
               jobs: int = 1) -> tuple[PresetResult, dict]:
    """Run every (variant, seed), write the summary and the evaluated manifest."""
    out = Path(out)
    seeds = list(seeds or preset.seeds)
    out.mkdir(parents=True, exist_ok=True)
    tasks = [(cfg, s, str(run_dir(out, label, s)), label)
             for label, cfg in preset.configs() for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            rows = list(pool.map(_run_one, tasks))
    else:
        rows = [_run_one(t) for t in tasks]
    write_summary(out / "summary.csv", rows)
    if preset.extra is not None:
        preset.extra(out, seeds)
    result = load_result(out)
    manifest = evaluate(preset, result, seeds)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return result, manifest


def load_result(out: Path) -> PresetResult:
    rows = read_csv(Path(out) / "summary.csv")
    for r in rows:
        r["seed"] = int(r["seed"])
    return PresetResult(Path(out), rows)


def evaluate(preset: Preset, result: PresetResult, seeds: Sequence[int]) -> dict:
    manifest = preset.manifest()
    manifest["seeds"] = list(seeds)
    props = []
    for c in preset.checks:
        holds, observed = c.evaluate(result)
        props.append({"name": c.name, "description": c.description, "holds": bool(holds),
                      "observed": _jsonable(observed)})
    manifest["properties"] = props
    return manifest


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        return None if not math.isfinite(x) else round(float(x), 6)
    if isinstance(x, np.integer):
        return int(x)
    return x


# ------------------------------------------------------------------ scenario bases
def incast_base(transport: str = "reliable") -> RunConfig:
    """16 workers incast to one PS behind a single ToR at 10 Gb/s."""
    return from_dict({"run": {"transport": transport}})


def _rto_ms(result: PresetResult, label: str) -> float:
    row = result.by_variant(label)[0]
    return result.config(label, row["seed"]).baseline.rto_min_ms


# --------------------------------------------------------------- motivation-tail
SCALES = (1, 0.5, 0.25, 0.125, 0.0625)


def _scale_label(s: float) -> str:
    return f"scale-{s:g}"


def _mean_falls(result: PresetResult) -> tuple[bool, dict]:
    means = {_scale_label(s): result.mean_of(_scale_label(s), "mean_ns") for s in SCALES}
    vals = list(means.values())
    strictly = all(a > b for a, b in zip(vals, vals[1:]))
    ratio = vals[0] / vals[-1] if vals[-1] > 0 else math.inf
    return strictly and ratio >= 3, {"mean_ns": means, "ratio_full_to_smallest": ratio}


def _p99_near_rto(result: PresetResult) -> tuple[bool, dict]:
    rto = _rto_ms(result, _scale_label(1)) * NS_PER_MS
    checked, bad = 0, []
    for r in result.rows:
        if int(r["timeouts"]) > 0:
            checked += 1
            p99 = float(r["p99_ns"])
            if not 0.8 * rto <= p99 <= 2 * rto:
                bad.append({"variant": r["variant"], "seed": r["seed"], "p99_ns": p99})
    p99s = {_scale_label(s): result.mean_of(_scale_label(s), "p99_ns") for s in SCALES}
    return checked > 0 and not bad, {"runs_with_timeouts": checked, "out_of_band": bad,
                                     "p99_ns": p99s}


def _timeouts_at_full(result: PresetResult) -> tuple[bool, dict]:
    rows = result.by_variant(_scale_label(1))
    n = [int(r["timeout_flows"]) for r in rows]
    return all(x > 0 for x in n), {"timeout_flows": n}


def motivation_tail() -> Preset:
    return Preset(
        "motivation-tail",
        "Reliable transport incast with tensor volume scaled down: the mean FCT falls, the tail stays at RTOmin.",
        incast_base("reliable"),
        [Variant(_scale_label(s), {"workload": {"volume_scale": s}}) for s in SCALES],
        [Check("mean-falls", "mean FCT strictly decreases with volume, at least 3x from 1 to 1/16",
               _mean_falls),
         Check("p99-near-rtomin", "p99 FCT within [0.8, 2] x RTOmin in every run with a timeout",
               _p99_near_rto),
         Check("timeouts-at-full-volume", "every full-volume run has at least one timed-out flow",
               _timeouts_at_full)],
        seeds=[1, 2, 3, 4, 5])


# -------------------------------------------------------------------- ps-incast
def _dlcp_no_timeouts(label: str):
    def check(result: PresetResult) -> tuple[bool, dict]:
        t = [int(r["timeouts"]) for r in result.by_variant(label)]
        return sum(t) == 0, {"timeouts": t}
    return check


def _dlcp_p99_small(label: str, ref: str):
    def check(result: PresetResult) -> tuple[bool, dict]:
        rto = _rto_ms(result, ref) * NS_PER_MS
        p99 = [float(r["p99_ns"]) for r in result.by_variant(label)]
        return max(p99) < 0.2 * rto, {"p99_ns": p99, "limit_ns": 0.2 * rto}
    return check


def _p99_reduction(label: str, ref: str, bound: float = 0.8):
    def check(result: PresetResult) -> tuple[bool, dict]:
        base = {r["seed"]: r for r in result.by_variant(ref)}
        red = {}
        for r in result.by_variant(label):
            b = base.get(r["seed"])
            if b is None or int(b["timeouts"]) == 0:
                continue
            red[r["seed"]] = 1 - float(r["p99_ns"]) / float(b["p99_ns"])
        return bool(red) and min(red.values()) >= bound, {"reduction": red, "bound": bound}
    return check


def ps_incast() -> Preset:
    return Preset(
        "ps-incast",
        "Parameter-server incast: bounded-loss transport against the reliable baseline.",
        incast_base("reliable"),
        [Variant("reliable", {}),
         Variant("dlcp", {"run": {"transport": "dlcp"}}),
         Variant("dlcp-tagged", {"run": {"transport": "dlcp"},
                                 "switch": {"thresholds": "ladder"},
                                 "workload": {"tagging": "layer+magnitude"}})],
        [Check("dlcp-no-timeouts", "no data-channel timeouts with bounded-loss transport",
               _dlcp_no_timeouts("dlcp")),
         Check("dlcp-p99-small", "bounded-loss p99 FCT below 0.2 x RTOmin",
               _dlcp_p99_small("dlcp", "reliable")),
         Check("p99-reduction", "p99 FCT at least 80% lower than the baseline where it timed out",
               _p99_reduction("dlcp", "reliable")),
         Check("tagged-no-timeouts", "no data-channel timeouts with tagging and the threshold ladder",
               _dlcp_no_timeouts("dlcp-tagged"))])


# ------------------------------------------------------------------------- ring
RING_OVERRIDES = {"topology": {"n_tor": 2, "hosts_per_tor": 4},
                  "workload": {"mode": "ring-allreduce", "n_workers": 8}}


def _ring_complete(result: PresetResult) -> tuple[bool, dict]:
    obs = {}
    ok = True
    for label in ("reliable", "dlcp"):
        for r in result.by_variant(label):
            cfg = result.config(label, r["seed"])
            n = cfg.workload.n_workers
            layers = resolve_profile(cfg.workload.profile).n_layers
            want = cfg.workload.iterations * layers * n * 2 * (n - 1)
            got = (int(r["flows"]), int(r["completed"]), int(r["iterations"]))
            obs[f"{label}/seed-{r['seed']}"] = {"flows": got[0], "completed": got[1],
                                                "iterations": got[2], "expected_flows": want}
            ok &= got == (want, want, cfg.workload.iterations)
    return ok, obs


def _ring_comm(result: PresetResult) -> tuple[bool, dict]:
    d, b = result.mean_of("dlcp", "comm_ns_mean"), result.mean_of("reliable", "comm_ns_mean")
    rel = abs(d - b) / b
    return rel < 0.10, {"dlcp_comm_ns": d, "reliable_comm_ns": b, "relative_difference": rel}


def ring() -> Preset:
    return Preset(
        "ring",
        "Ring all-reduce across two racks on both transports.",
        override(incast_base("reliable"), **RING_OVERRIDES),
        [Variant("reliable", {}), Variant("dlcp", {"run": {"transport": "dlcp"}})],
        [Check("ring-complete", "every chunk step of every iteration completes: 2(n-1) flows per worker per layer",
               _ring_complete),
         Check("dlcp-no-timeouts", "no data-channel timeouts with bounded-loss transport",
               _dlcp_no_timeouts("dlcp")),
         Check("comm-comparable", "without incast both transports give iteration communication times within 10%",
               _ring_comm)])


# ----------------------------------------------------------------- rtomin-sweep
RTOS = (1, 5, 10)


def _dlcp_flat(result: PresetResult) -> tuple[bool, dict]:
    p99 = {f"dlcp-rto{r}": result.mean_of(f"dlcp-rto{r}", "p99_ns") for r in RTOS}
    vals = list(p99.values())
    spread = (max(vals) - min(vals)) / min(vals)
    return spread < 0.05, {"p99_ns": p99, "relative_spread": spread}


def _baseline_moves(result: PresetResult) -> tuple[bool, dict]:
    p99 = {f"reliable-rto{r}": result.mean_of(f"reliable-rto{r}", "p99_ns") for r in RTOS}
    ratio = p99["reliable-rto10"] / p99["reliable-rto1"]
    return ratio >= 2, {"p99_ns": p99, "ratio_10_to_1": ratio}


def rtomin_sweep() -> Preset:
    variants = []
    for kind in ("reliable", "dlcp"):
        for r in RTOS:
            variants.append(Variant(f"{kind}-rto{r}", {"run": {"transport": kind},
                                                       "baseline": {"rto_min_ms": r}}))
    return Preset(
        "rtomin-sweep",
        "Incast under RTOmin of 1, 5 and 10 ms on both transports.",
        incast_base("reliable"), variants,
        [Check("dlcp-insensitive", "bounded-loss p99 FCT changes by less than 5% across RTOmin",
               _dlcp_flat),
         Check("baseline-sensitive", "baseline p99 FCT changes at least 2x between 1 and 10 ms",
               _baseline_moves)])


# ------------------------------------------------------------- loss-bound-sweep
BOUNDS = (0.01, 0.1)


def _bound_label(p: float) -> str:
    return f"dlcp-p{round(p * 100)}"


DROP_LAB_SEEDS = tuple(range(5))


def drop_lab_epochs(out: Path, seeds: Sequence[int]) -> None:
    """Epochs-to-target of the default toy task under uniform drops at each bound.

    The drop lab uses its own fixed seed set, independent of the network seeds.
    """
    policies = [DropPolicy()] + [DropPolicy("uniform", p) for p in BOUNDS]
    write_outcomes(Path(out) / "droplab.csv", sweep(ToyTask(), policies, DROP_LAB_SEEDS))


def _epochs_by_p(result: PresetResult) -> dict[float, float]:
    rows = read_csv(result.out / "droplab.csv")
    cap = 10 ** 9
    by: dict[str, dict[int, float]] = {}
    for r in rows:
        e = float(r["epochs"]) if r["converged"] == "1" else cap
        by.setdefault(r["policy"] + ":" + r["p"], {})[int(r["seed"])] = e
    base = by["uniform:0"]
    out = {0.0: float(np.median(list(base.values())))}
    for p in BOUNDS:
        got = by[f"uniform:{p:g}"]
        extra = float(np.median([got[s] - base[s] for s in base]))
        out[p] = out[0.0] + max(0.0, extra)
    return out


def jct_table(result: PresetResult) -> dict[str, float]:
    """Estimated job completion time per variant.

    Epochs come from the drop lab at the variant's loss bound (zero for the
    baseline). Network time per stage is half the measured barrier-to-barrier
    communication time of one iteration.
    """
    epochs = _epochs_by_p(result)
    out = {}
    for label, p in [("reliable", 0.0)] + [(_bound_label(b), b) for b in BOUNDS]:
        comp = result.mean_of(label, "compute_ns_mean")
        comm = result.mean_of(label, "comm_ns_mean")
        out[label] = estimate_jct(epochs[p], comp, comm / 2)
    return out


def _jct_close(result: PresetResult) -> tuple[bool, dict]:
    j = jct_table(result)
    a, b = j[_bound_label(0.01)], j[_bound_label(0.1)]
    diff = abs(a - b) / min(a, b)
    return diff < 0.10, {"jct_ns": j, "relative_difference": diff, "epochs": _epochs_by_p(result)}


def _jct_beats_baseline(result: PresetResult) -> tuple[bool, dict]:
    j = jct_table(result)
    ok = all(j[_bound_label(b)] < j["reliable"] for b in BOUNDS)
    return ok, {"jct_ns": j}


def loss_bound_sweep() -> Preset:
    variants = [Variant("reliable", {})]
    variants += [Variant(_bound_label(p), {"run": {"transport": "dlcp"},
                                           "transport": {"loss_bound": p}}) for p in BOUNDS]
    return Preset(
        "loss-bound-sweep",
        "Job completion time at loss bounds of 1% and 10% against the reliable baseline under incast.",
        incast_base("reliable"), variants,
        [Check("bounds-close", "estimated JCT at 1% and 10% bounds differs by less than 10%",
               _jct_close),
         Check("bounds-beat-baseline", "estimated JCT at both bounds is below the baseline",
               _jct_beats_baseline)],
        extra=drop_lab_epochs)


# ---------------------------------------------------------------- spray-vs-ecmp
SPRAY_BASE = {"run": {"transport": "dlcp"},
              "topology": {"n_tor": 2, "hosts_per_tor": 4, "n_core": 4},
              "workload": {"mode": "bulk", "n_workers": 4, "bulk_bytes": 4_000_000}}


def flow_share(result: PresetResult, label: str, seed: int) -> list[float]:
    """Per-flow wire throughput as a fraction of the fair share."""
    cfg = result.config(label, seed)
    t = cfg.topology
    n = cfg.workload.n_workers
    fair = min(t.host_link_gbps, t.n_core * t.core_link_gbps / n) * 1e9
    payload = cfg.transport.mtu_payload
    shares = []
    for f in result.flows(label, seed):
        if f["category"] != "training" or f["fct_ns"] == "":
            continue
        delivered = int(f["bytes_delivered"])
        wire = delivered + math.ceil(delivered / payload) * DLCP_OVERHEAD
        shares.append(wire * 8 / (int(f["fct_ns"]) * 1e-9) / fair)
    return shares


def _spray_fair(result: PresetResult) -> tuple[bool, dict]:
    shares = {r["seed"]: flow_share(result, "spray", r["seed"]) for r in result.by_variant("spray")}
    ok = all(s and min(s) >= 0.9 for s in shares.values())
    return ok, {"shares": shares}


def _ecmp_collides(result: PresetResult) -> tuple[bool, dict]:
    shares = {r["seed"]: flow_share(result, "ecmp", r["seed"]) for r in result.by_variant("ecmp")}
    ok = all(s and min(s) <= 0.6 for s in shares.values())
    return ok, {"shares": shares}


def spray_vs_ecmp() -> Preset:
    base = from_dict(SPRAY_BASE)
    seed = colliding_hash_seed(override(base, switch={"lb_policy": "per-flow-ecmp"}))
    return Preset(
        "spray-vs-ecmp",
        "Four simultaneous inter-rack bulk flows over four core paths.",
        base,
        [Variant("spray", {"switch": {"lb_policy": "per-packet-spray"}}),
         Variant("ecmp", {"switch": {"lb_policy": "per-flow-ecmp", "hash_seed": seed}})],
        [Check("spray-fair", "per-packet spraying gives every flow at least 90% of its fair share",
               _spray_fair),
         Check("ecmp-collision", "per-flow ECMP with a colliding hash seed leaves a flow at or below 60%",
               _ecmp_collides)])


PRESETS: dict[str, Callable[[], Preset]] = {
    "motivation-tail": motivation_tail,
    "ps-incast": ps_incast,
    "ring": ring,
    "rtomin-sweep": rtomin_sweep,
    "loss-bound-sweep": loss_bound_sweep,
    "spray-vs-ecmp": spray_vs_ecmp,
}


def get_preset(name: str) -> Preset:
    try:
        return PRESETS[name]()
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}") from None
