"""Figures from exported trial CSVs: overhead paths and query-depth bars.

Reads the CSV schemas written by the experiment exporter and renders with
a headless Agg canvas (no pyplot global state). Overhead paths are colored
by outcome class: green for clean successes, blue for successes that dipped
below the constraint radius, red for everything that failed (collision,
timeout, plan failure). A malformed CSV raises ``ValueError`` naming the
file and row; empty CSVs (headers only) render empty axes rather than
crashing.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
from matplotlib.figure import Figure

from .harness import OUTCOMES, load_world_setup

_OUTCOME_COLORS = {
    "SuccessClean": "tab:green",
    "SuccessWithViolation": "tab:blue",
    "Collision": "tab:red",
    "Timeout": "tab:red",
    "PlanFailure": "tab:red",
}


def _parse_rows(path: Path, fields: dict[str, type]) -> list[dict]:
    """Read and type-check CSV rows; raise naming the offending row."""
    if not path.exists():
        raise ValueError(f"{path.name}: file not found at {path}")
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in fields if c not in header]
        if missing:
            raise ValueError(f"{path.name}: missing columns {missing}")
        for i, raw in enumerate(reader, start=2):  # row 1 is the header
            row = {}
            for name, cast in fields.items():
                value = raw.get(name)
                if value is None:
                    raise ValueError(f"{path.name} row {i}: missing {name!r}")
                try:
                    row[name] = cast(value)
                except (TypeError, ValueError):
                    raise ValueError(
                        f"{path.name} row {i}: cannot parse "
                        f"{name}={value!r} as {cast.__name__}") from None
            rows.append(row)
    return rows


def _check_outcome(path: Path, rows: list[dict]) -> None:
    for i, row in enumerate(rows, start=2):
        if row["outcome"] not in OUTCOMES:
            raise ValueError(f"{path.name} row {i}: unknown outcome "
                             f"{row['outcome']!r}")


def emit_figures(csv_dir, out_dir=None, world: str | None = None,
                 dpi: int = 130) -> dict:
    """Render overhead-path and query-depth figures from exported CSVs.

    Returns the written figure paths plus ``histogram_total``, the sum of
    the query-count column (the bar heights always add up to it).
    """
    csv_dir = Path(csv_dir)
    out_dir = Path(out_dir) if out_dir is not None else csv_dir
    out_dir.mkdir(parents=True, exist_ok=True)

    trials = _parse_rows(csv_dir / "trials.csv",
                         {"trial_index": int, "outcome": str,
                          "min_clearance": float, "duration": float,
                          "waypoints_hit": int})
    _check_outcome(csv_dir / "trials.csv", trials)
    paths = _parse_rows(csv_dir / "paths.csv",
                        {"trial_index": int, "t": float, "x": float,
                         "y": float, "z": float})
    queries = _parse_rows(csv_dir / "queries.csv",
                          {"trial_index": int, "replan_index": int,
                           "depth_index": int, "count": int})

    outcome_of = {r["trial_index"]: r["outcome"] for r in trials}

    # ---- overhead paths ------------------------------------------------
    fig = Figure(figsize=(8.0, 8.0))
    ax = fig.add_subplot(111)
    if world is not None:
        for box in load_world_setup(world).world.boxes:
            lo, hi = box.lo, box.hi
            ax.fill([lo[0], hi[0], hi[0], lo[0]],
                    [lo[1], lo[1], hi[1], hi[1]],
                    color="0.82", zorder=0)
    by_trial: dict[int, list] = {}
    for row in paths:
        by_trial.setdefault(row["trial_index"], []).append(
            (row["t"], row["x"], row["y"]))
    seen_colors = set()
    for idx in sorted(by_trial):
        pts = np.array(sorted(by_trial[idx]))
        color = _OUTCOME_COLORS.get(outcome_of.get(idx, ""), "tab:red")
        label = None
        if color not in seen_colors:
            seen_colors.add(color)
            label = {"tab:green": "clean success",
                     "tab:blue": "success w/ violation",
                     "tab:red": "failure"}[color]
        ax.plot(pts[:, 1], pts[:, 2], color=color, lw=1.0, alpha=0.8,
                label=label)
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_title("overhead trajectories")
    ax.set_aspect("equal")
    if seen_colors:
        ax.legend(loc="best", fontsize=9)
    overhead_path = out_dir / "overhead_paths.png"
    fig.savefig(overhead_path, dpi=dpi)

    # ---- query-depth histogram ----------------------------------------
    fig2 = Figure(figsize=(7.0, 4.5))
    ax2 = fig2.add_subplot(111)
    totals: dict[int, int] = {}
    for row in queries:
        totals[row["depth_index"]] = (totals.get(row["depth_index"], 0)
                                      + row["count"])
    histogram_total = sum(totals.values())
    if totals:
        depths = sorted(totals)
        ax2.bar(depths, [totals[d] for d in depths], width=0.9,
                color="tab:purple")
    ax2.set_xlabel("map history depth answering the query")
    ax2.set_ylabel("queries")
    ax2.set_title(f"query depth histogram (total {histogram_total})")
    hist_path = out_dir / "query_depths.png"
    fig2.savefig(hist_path, dpi=dpi)

    return {"overhead": overhead_path, "queries": hist_path,
            "histogram_total": histogram_total}
