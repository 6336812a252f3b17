"""Grouped per-AU F1 bar charts from a metrics report CSV.

The chart is a pure projection of the CSV: every bar height is a value read
from a row, never recomputed. One bar group per AU plus an ``avg`` group;
one bar per requested variant series.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

CSV_HEADER = "variant,order,fold,au,f1"
AVG = "avg"


class ChartError(ValueError):
    """The CSV or the chart request is invalid."""


@dataclass(frozen=True)
class ChartSpec:
    csv_path: str
    output_path: str
    variants: tuple[str, ...] = ()  # empty means every variant in the CSV
    title: str = "Per-AU F1 comparison"


@dataclass(frozen=True)
class Row:
    variant: str
    order: str
    fold: int
    au: str
    f1: float


@dataclass
class Series:
    """One bar series: a single (variant, order, fold) combination."""

    variant: str
    order: str
    fold: int
    values: dict[str, float] = field(default_factory=dict)  # au -> f1

    def label(self, split_needed: bool) -> str:
        if not split_needed:
            return self.variant
        return f"{self.variant} [{self.order} fold {self.fold}]"


def parse_report(path) -> list[Row]:
    lines = [line for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]
    if not lines or lines[0] != CSV_HEADER:
        raise ChartError(f"{path}: expected header {CSV_HEADER!r}")
    rows = []
    for line in lines[1:]:
        parts = line.split(",")
        if len(parts) != 5:
            raise ChartError(f"{path}: bad row {line!r}")
        rows.append(Row(parts[0], parts[1], int(parts[2]), parts[3], float(parts[4])))
    return rows


def chart_series(rows: list[Row], variants: tuple[str, ...]) -> tuple[list[str], list[Series]]:
    """Group labels (AU indices then avg) and one series per (variant, order,
    fold) present, restricted and ordered by the requested variants."""
    available = list(dict.fromkeys(r.variant for r in rows))
    wanted = list(variants) if variants else available
    for name in wanted:
        if name not in available:
            raise ChartError(f"variant {name!r} not present in the CSV (has: {', '.join(available)})")

    groups: dict[tuple[str, str, int], Series] = {}
    for r in rows:
        if r.variant not in wanted:
            continue
        key = (r.variant, r.order, r.fold)
        series = groups.setdefault(key, Series(r.variant, r.order, r.fold))
        series.values[r.au] = r.f1
    ordered = sorted(groups.values(), key=lambda s: (wanted.index(s.variant), s.order, s.fold))

    aus = sorted({au for s in ordered for au in s.values if au != AVG}, key=int)
    labels = [*aus, AVG]
    for s in ordered:
        missing = [au for au in labels if au not in s.values]
        if missing:
            raise ChartError(f"series {s.variant}/{s.order}/fold{s.fold} lacks rows for AU {missing[0]}")
    return labels, ordered


def build_figure(spec: ChartSpec):
    """The grouped bar figure for a spec; bar heights are CSV values verbatim."""
    rows = parse_report(spec.csv_path)
    labels, series = chart_series(rows, spec.variants)

    split = {s.variant: sum(1 for t in series if t.variant == s.variant) > 1 for s in series}
    n_groups, n_series = len(labels), len(series)
    width = 0.8 / n_series
    fig, ax = plt.subplots(figsize=(max(8.0, 0.75 * n_groups), 4.5))
    for i, s in enumerate(series):
        offsets = [g + (i - (n_series - 1) / 2) * width for g in range(n_groups)]
        ax.bar(offsets, [s.values[au] for au in labels], width=width, label=s.label(split[s.variant]))
    ax.set_xticks(range(n_groups))
    ax.set_xticklabels([f"AU{au}" if au != AVG else AVG for au in labels])
    ax.set_ylabel("F1")
    ax.set_ylim(0, 105)
    ax.set_title(spec.title)
    ax.legend()
    fig.tight_layout()
    return fig, ax


def render_comparison(spec: ChartSpec) -> None:
    """Write the grouped bar chart; identical inputs produce identical bytes."""
    fig, _ = build_figure(spec)
    out = Path(spec.output_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with plt.rc_context({"svg.hashsalt": "mft-charts"}):
        if out.suffix.lower() == ".svg":
            fig.savefig(out, format="svg", metadata={"Date": None})
        else:
            fig.savefig(out)
    plt.close(fig)
