"""Benchmark records, result tables, and SVG figures."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

COVERAGE_THRESHOLD = 0.02
METHOD_ORDER = ("icp", "icp_constant", "doicr", "scpo", "qd_soft")


@dataclass
class BenchmarkResult:
    dataset: str
    method: str
    confidence_level: float
    seed: int
    picp: float | None = None
    mpiw: float | None = None
    config: dict = field(default_factory=dict)
    flags: dict = field(default_factory=dict)
    status: str = "ok"
    error: str | None = None
    mpiw_raw: float | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "BenchmarkResult":
        return cls(**json.loads(line))


def coverage_deviates(confidence_level: float, picp: float, threshold: float = COVERAGE_THRESHOLD) -> bool:
    return (confidence_level - picp) > threshold + 1e-12


def make_flags(confidence_level, picp, unbounded, crossed, threshold=COVERAGE_THRESHOLD) -> dict:
    return {
        "coverage_deviation": coverage_deviates(confidence_level, picp, threshold),
        "unbounded_intervals": bool(unbounded),
        "crossed_bounds": bool(crossed),
    }


def config_fingerprint(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:12]


def read_results(path) -> list[BenchmarkResult]:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    return [BenchmarkResult.from_json(ln) for ln in lines]


def append_results(path, results) -> None:
    with Path(path).open("a") as fh:
        for r in results:
            fh.write(r.to_json() + "\n")


def write_summary_csv(path, results) -> None:
    cols = ["dataset", "method", "confidence_level", "seed", "picp", "mpiw", "status", "coverage_deviation"]
    out = [",".join(cols)]
    for r in results:
        out.append(
            ",".join(
                str(v)
                for v in (
                    r.dataset,
                    r.method,
                    r.confidence_level,
                    r.seed,
                    "" if r.picp is None else f"{r.picp:.6f}",
                    "" if r.mpiw is None else f"{r.mpiw:.6f}",
                    r.status,
                    r.flags.get("coverage_deviation", ""),
                )
            )
        )
    Path(path).write_text("\n".join(out) + "\n")


@dataclass
class TableRow:
    dataset: str
    confidence_level: float
    method: str
    picp: float
    mpiw: float
    runs: int
    flagged: bool
    best: bool = False
    seeds: tuple = ()


def _method_key(method: str):
    return (METHOD_ORDER.index(method) if method in METHOD_ORDER else len(METHOD_ORDER), method)


def summarize(results, threshold: float = COVERAGE_THRESHOLD) -> list[TableRow]:
    """Average over seeds per (dataset, CL, method) and mark the best width.

    The best mark goes to the narrowest mean width among rows whose mean
    coverage does not fall short of the CL by more than ``threshold``;
    equal widths share it.
    """
    groups: dict[tuple, list[BenchmarkResult]] = {}
    for r in results:
        if r.status != "ok" or r.picp is None:
            continue
        groups.setdefault((r.dataset, r.confidence_level, r.method), []).append(r)
    rows = []
    for (ds, cl, method), rs in groups.items():
        picp = float(np.mean([r.picp for r in rs]))
        mpiw = float(np.mean([r.mpiw for r in rs]))
        flagged = coverage_deviates(cl, picp, threshold) or any(
            r.flags.get("unbounded_intervals") or r.flags.get("crossed_bounds") for r in rs
        )
        rows.append(TableRow(ds, cl, method, picp, mpiw, len(rs), flagged, seeds=tuple(sorted(r.seed for r in rs))))
    rows.sort(key=lambda t: (t.dataset, t.confidence_level, _method_key(t.method)))
    for key in {(t.dataset, t.confidence_level) for t in rows}:
        valid = [t for t in rows if (t.dataset, t.confidence_level) == key and not t.flagged]
        if valid:
            best = min(t.mpiw for t in valid)
            for t in valid:
                t.best = t.mpiw == best
    return rows


def render_table(rows: list[TableRow], dataset: str) -> str:
    lines = [
        f"# {dataset}",
        "",
        "`*` best MPIW among rows meeting the CL; `!` coverage short of CL or invalid intervals",
        "",
        "| CL | Method | PICP | MPIW | runs |",
        "|---|---|---|---|---|",
    ]
    for t in rows:
        if t.dataset != dataset:
            continue
        name = f"**{t.method}** *" if t.best else t.method
        picp = f"{t.picp:.3f} !" if t.flagged else f"{t.picp:.3f}"
        lines.append(f"| {t.confidence_level:.2f} | {name} | {picp} | {t.mpiw:.3f} | {t.runs} |")
    return "\n".join(lines) + "\n"


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "doicr"
    plt.rcParams["svg.fonttype"] = "none"
    return plt


def _save_svg(fig, path, description: str) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None, "Description": description})


def scatter_figure(rows: list[TableRow], dataset: str, path, fingerprint: str) -> None:
    """PICP against MPIW, one point per (method, CL), dashed line per CL."""
    plt = _pyplot()
    mine = [t for t in rows if t.dataset == dataset]
    fig, ax = plt.subplots(figsize=(6, 4.5))
    for cl in sorted({t.confidence_level for t in mine}):
        ax.axhline(cl, linestyle="--", color="0.6", linewidth=0.8)
    markers = "osD^v<>p"
    methods = sorted({t.method for t in mine}, key=_method_key)
    for i, method in enumerate(methods):
        pts = [t for t in mine if t.method == method]
        ax.scatter(
            [t.mpiw for t in pts],
            [t.picp for t in pts],
            marker=markers[i % len(markers)],
            label=method,
            gid=f"points-{method}",
        )
        for t in pts:
            ax.plot([t.mpiw, t.mpiw], [t.confidence_level, t.picp], color="0.8", linewidth=0.6, zorder=0)
    ax.set_xlabel("MPIW")
    ax.set_ylabel("PICP")
    ax.set_title(dataset)
    ax.legend(loc="lower right", fontsize="small")
    seeds = sorted({s for t in mine for s in t.seeds})
    stamp = f"seeds={seeds} config={fingerprint}"
    fig.text(0.01, 0.01, stamp, fontsize=6, color="0.4")
    fig.tight_layout()
    _save_svg(fig, path, stamp)
    plt.close(fig)


def trace_figure(traces: dict[str, dict], cl: float, path, stamp: str) -> None:
    """Side-by-side PICP and MPIW per epoch for several runs."""
    plt = _pyplot()
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.6))
    for label, tr in traces.items():
        epochs = np.arange(1, len(tr["picp"]) + 1)
        ax1.plot(epochs, tr["picp"], label=label, linewidth=1)
        ax2.plot(epochs, tr["mpiw"], label=label, linewidth=1)
    ax1.axhline(cl, linestyle="--", color="0.5", linewidth=0.8)
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("training PICP")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("training MPIW")
    ax1.legend(fontsize="small")
    fig.text(0.01, 0.01, stamp, fontsize=6, color="0.4")
    fig.tight_layout()
    _save_svg(fig, path, stamp)
    plt.close(fig)


def report(results_file, out_dir, threshold: float = COVERAGE_THRESHOLD) -> list[Path]:
    """Write one markdown table and one scatter SVG per dataset."""
    results = read_results(results_file)
    if not results:
        raise ValueError(f"{results_file}: no results")
    rows = summarize(results, threshold)
    if not rows:
        raise ValueError(f"{results_file}: no successful runs to report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for ds in sorted({t.dataset for t in rows}):
        safe = "".join(c if c.isalnum() or c in "-_." else "_" for c in ds)
        table = out_dir / f"table_{safe}.md"
        table.write_text(render_table(rows, ds))
        configs = [r.config for r in results if r.dataset == ds]
        fig = out_dir / f"scatter_{safe}.svg"
        scatter_figure(rows, ds, fig, config_fingerprint({"configs": configs}))
        written += [table, fig]
    return written


def finite_or_none(x) -> float | None:
    return None if x is None or not math.isfinite(x) else float(x)
