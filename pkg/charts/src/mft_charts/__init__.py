"""Bar-chart rendering for mft metrics report CSVs."""

from .render import ChartError, ChartSpec, build_figure, chart_series, parse_report, render_comparison

__all__ = ["ChartError", "ChartSpec", "build_figure", "chart_series", "parse_report", "render_comparison"]
