"""Cross-seed tables and plots for a result directory.

Every plot is written twice: as a CSV with the plotted points under
``curves/`` and as a PNG rendered from that CSV.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Optional

import numpy as np

from .metrics import read_csv

REPORT_COLUMNS = ("variant", "seeds", "flows", "completed", "mean_ns", "p50_ns", "p99_ns",
                  "p99_max_ns", "timeout_flows", "retransmit_rounds", "drops_selective",
                  "drops_buffer", "comm_ns_mean")


def _flows_path(out: Path, variant: str, seed: int) -> Path:
    nested = out / variant / f"seed-{seed}" / "flows.csv"
    return nested if nested.exists() else out / f"seed-{seed}" / "flows.csv"


def _num(rows: list[dict], col: str) -> list[float]:
    return [float(r[col]) for r in rows if r.get(col, "") != ""]


def _mean(vals: list[float]) -> Optional[float]:
    return float(np.mean(vals)) if vals else None


def summarize(out: str | Path) -> list[dict]:
    """One row per variant, averaging per-seed statistics (sums for counters)."""
    out = Path(out)
    rows = read_csv(out / "summary.csv")
    order: list[str] = []
    for r in rows:
        if r["variant"] not in order:
            order.append(r["variant"])
    table = []
    for v in order:
        rs = [r for r in rows if r["variant"] == v]
        p99 = _num(rs, "p99_ns")
        row = {"variant": v, "seeds": len(rs),
               "flows": int(sum(_num(rs, "flows"))), "completed": int(sum(_num(rs, "completed"))),
               "mean_ns": _mean(_num(rs, "mean_ns")), "p50_ns": _mean(_num(rs, "p50_ns")),
               "p99_ns": _mean(p99), "p99_max_ns": max(p99) if p99 else None,
               "comm_ns_mean": _mean(_num(rs, "comm_ns_mean"))}
        for c in ("timeout_flows", "retransmit_rounds", "drops_selective", "drops_buffer"):
            row[c] = int(sum(_num(rs, c)))
        table.append(row)
    return table


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.1f}"
    return str(v)


def write_table(path: Path, table: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(REPORT_COLUMNS), lineterminator="\n")
        w.writeheader()
        for r in table:
            w.writerow({k: _fmt(r[k]) for k in REPORT_COLUMNS})


def format_table(table: list[dict]) -> str:
    """Fixed-width text table with FCTs in milliseconds."""
    head = ("variant", "seeds", "flows", "mean ms", "p99 ms", "p99 max", "timeouts", "comm ms")
    lines = []
    data = []
    for r in table:
        ms = lambda x: "" if x is None else f"{x / 1e6:.3f}"
        data.append((r["variant"], str(r["seeds"]), f"{r['completed']}/{r['flows']}",
                     ms(r["mean_ns"]), ms(r["p99_ns"]), ms(r["p99_max_ns"]),
                     str(r["timeout_flows"]), ms(r["comm_ns_mean"])))
    widths = [max(len(h), *(len(d[i]) for d in data)) if data else len(h) for i, h in enumerate(head)]
    lines.append("  ".join(h.ljust(w) for h, w in zip(head, widths)))
    for d in data:
        lines.append("  ".join(x.ljust(w) for x, w in zip(d, widths)))
    return "\n".join(lines)


def fct_cdf(out: Path, variant: str, seeds: list[int]) -> tuple[np.ndarray, np.ndarray]:
    """Empirical CDF of completed training-flow FCTs pooled over seeds."""
    fcts = []
    for s in seeds:
        p = _flows_path(out, variant, s)
        if not p.exists():
            continue
        fcts += [int(r["fct_ns"]) for r in read_csv(p)
                 if r["category"] == "training" and r["fct_ns"] != ""]
    x = np.sort(np.asarray(fcts, dtype=np.int64))
    y = np.arange(1, len(x) + 1) / max(1, len(x))
    return x, y


def _safe(label: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in label)


def write_curves(out: str | Path, max_points: int = 2000) -> list[Path]:
    """CSV data for the FCT CDF per variant and the mean/p99 bar chart."""
    out = Path(out)
    curves = out / "curves"
    curves.mkdir(exist_ok=True)
    rows = read_csv(out / "summary.csv")
    table = summarize(out)
    written = []
    for t in table:
        seeds = sorted({int(r["seed"]) for r in rows if r["variant"] == t["variant"]})
        x, y = fct_cdf(out, t["variant"], seeds)
        if len(x) > max_points:
            idx = np.unique(np.linspace(0, len(x) - 1, max_points).round().astype(int))
            x, y = x[idx], y[idx]
        path = curves / f"fct_cdf-{_safe(t['variant'])}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["fct_ns", "cdf"])
            for a, b in zip(x, y):
                w.writerow([int(a), f"{b:.6f}"])
        written.append(path)
    path = curves / "bars.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "mean_ns", "p99_ns"])
        for t in table:
            w.writerow([t["variant"], _fmt(t["mean_ns"]), _fmt(t["p99_ns"])])
    written.append(path)
    return written


def render_plots(out: str | Path) -> list[Path]:
    """PNG renderings of the curve CSVs."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out)
    curves = out / "curves"
    table = summarize(out)
    images = []
    fig, ax = plt.subplots(figsize=(6, 4))
    for t in table:
        rows = read_csv(curves / f"fct_cdf-{_safe(t['variant'])}.csv")
        if rows:
            ax.step([int(r["fct_ns"]) / 1e6 for r in rows], [float(r["cdf"]) for r in rows],
                    where="post", label=t["variant"])
    ax.set_xscale("log")
    ax.set_xlabel("FCT (ms)")
    ax.set_ylabel("CDF")
    ax.legend(fontsize="small")
    fig.tight_layout()
    images.append(out / "fct_cdf.png")
    fig.savefig(images[-1], dpi=120, metadata={"Software": None})
    plt.close(fig)

    bars = read_csv(curves / "bars.csv")
    fig, ax = plt.subplots(figsize=(max(4, len(bars) * 1.2), 4))
    xs = np.arange(len(bars))
    val = lambda r, k: float(r[k]) / 1e6 if r[k] else 0.0
    ax.bar(xs - 0.2, [val(r, "mean_ns") for r in bars], 0.4, label="mean")
    ax.bar(xs + 0.2, [val(r, "p99_ns") for r in bars], 0.4, label="p99")
    ax.set_xticks(xs, [r["variant"] for r in bars], rotation=30, ha="right", fontsize="small")
    ax.set_ylabel("FCT (ms)")
    ax.legend()
    fig.tight_layout()
    images.append(out / "fct_bars.png")
    fig.savefig(images[-1], dpi=120, metadata={"Software": None})
    plt.close(fig)
    return images


def report(out: str | Path, plots: bool = True) -> str:
    """Write ``report.csv`` and curve data (plus images when ``plots``); return the text table."""
    out = Path(out)
    table = summarize(out)
    write_table(out / "report.csv", table)
    write_curves(out)
    if plots:
        render_plots(out)
    return format_table(table)
