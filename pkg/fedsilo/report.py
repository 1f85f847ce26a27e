"""
Plain-text run summaries and self-contained SVG charts
"""
import math
import logging
from typing import List, Optional, Sequence, Tuple
from xml.sax.saxutils import escape

import pandas as pd

from fedsilo.runs import RunDirectory
from fedsilo.utils import GLOBAL_SCOPE, format_metric

logger = logging.getLogger(__name__)

WIDTH, HEIGHT, MARGIN = 480, 360, 56


def _optional(value) -> Optional[float]:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return None
    return float(value)


def _silo_frame(run: RunDirectory) -> Optional[pd.DataFrame]:
    if not run.has("silo_metrics.csv"):
        return None
    frame = run.read_csv("silo_metrics.csv")
    frame["silo"] = frame["silo"].astype(str)
    return frame


def top_features(run: RunDirectory, k: int = 5) -> List[Tuple[str, float]]:
    """Players with the largest mean |value|, ties broken by name"""
    if not run.has("attribution_summary.csv"):
        return []
    frame = run.read_csv("attribution_summary.csv")
    frame = frame.sort_values(["mean_abs", "player"], ascending=[False, True], kind="mergesort")
    return [(str(r.player), float(r.mean_abs)) for r in frame.head(k).itertuples()]


def build_report(run: RunDirectory) -> str:
    """Human-readable summary of whatever artifacts the run holds."""
    lines = [f"Run directory: {run.path}", f"Seed: {run.manifest.seed}",
             f"Config hash: {run.manifest.config_hash}", ""]

    silos = _silo_frame(run)
    if silos is not None:
        overall = silos[silos["silo"] == GLOBAL_SCOPE]
        if not overall.empty:
            row = overall.iloc[0]
            lines.append("Final global metrics")
            for name in ("precision", "recall", "f1", "auc"):
                lines.append(f"  {name:<9} {format_metric(_optional(row[name]))}")
            lines.append("")
        per_silo = silos[silos["silo"] != GLOBAL_SCOPE]
        defined = per_silo[per_silo["f1"].notna()].sort_values(
            ["f1", "silo"], ascending=[False, True], kind="mergesort")
        if not defined.empty:
            lines.append("Best silos by F1")
            for r in defined.head(3).itertuples():
                lines.append(f"  silo {r.silo:<4} f1 {format_metric(r.f1)}  auc {format_metric(_optional(r.auc))}")
            lines.append("Worst silos by F1")
            for r in defined.tail(3).iloc[::-1].itertuples():
                lines.append(f"  silo {r.silo:<4} f1 {format_metric(r.f1)}  auc {format_metric(_optional(r.auc))}")
        undefined = per_silo[per_silo["f1"].isna()]["silo"].tolist()
        if undefined:
            lines.append(f"Silos with undefined F1 (n/a): {', '.join(undefined)}")
        lines.append("")

    if run.has("local_baselines.json"):
        baselines = run.read_json("local_baselines.json")
        lines.append("Local baselines (macro average)")
        for name, value in baselines["macro"].items():
            excluded = baselines["excluded"].get(name, [])
            lines.append(f"  {name:<9} {format_metric(value)}  excluded {excluded}")
        lines.append("")

    if run.has("ledger.json"):
        ledger = run.read_json("ledger.json")
        comparison = ledger["comparison"]
        lines.append("Communication cost")
        lines.append(f"  strategy        {ledger['strategy']}")
        lines.append(f"  model size      {ledger['model_kb']:.2f} KB")
        lines.append(f"  per round       {ledger['per_round_kb']:.0f} KB")
        lines.append(f"  total           {ledger['total_gb']:.4f} GB over {ledger['rounds']} rounds")
        lines.append(f"  selected-only   {comparison['selected-only']['gb']:.4f} GB")
        lines.append(f"  broadcast-all   {comparison['broadcast-all']['gb']:.4f} GB")
        lines.append(f"  reduction       {comparison['reduction']:.1%}")
        lines.append("")

    features = top_features(run)
    if features:
        lines.append("Top features by mean |value|")
        for rank, (player, value) in enumerate(features, start=1):
            lines.append(f"  {rank}. {player:<28} {value:.4f}")
        lines.append("")

    return "\n".join(lines).rstrip() + "\n"


def _axis_frame(title: str, x_label: str, y_label: str) -> List[str]:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<line x1="{MARGIN}" y1="{HEIGHT - MARGIN}" x2="{WIDTH - MARGIN / 2}" '
        f'y2="{HEIGHT - MARGIN}" stroke="black"/>',
        f'<line x1="{MARGIN}" y1="{HEIGHT - MARGIN}" x2="{MARGIN}" y2="{MARGIN / 2}" stroke="black"/>',
        f'<text x="{WIDTH / 2}" y="{HEIGHT - 16}" text-anchor="middle" font-size="12">{escape(x_label)}</text>',
        f'<text x="16" y="{HEIGHT / 2}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 16 {HEIGHT / 2})">{escape(y_label)}</text>',
    ]


def scatter_svg(points: Sequence[Tuple[str, float, float]], title: str,
                x_label: str, y_label: str) -> str:
    """Unit-square scatter; one <circle> per point."""
    span_x = WIDTH - 1.5 * MARGIN
    span_y = HEIGHT - 1.5 * MARGIN
    parts = _axis_frame(title, x_label, y_label)
    for tick in (0.0, 0.5, 1.0):
        parts.append(f'<text x="{MARGIN + tick * span_x:.1f}" y="{HEIGHT - MARGIN + 14}" '
                     f'text-anchor="middle" font-size="10">{tick:.1f}</text>')
        parts.append(f'<text x="{MARGIN - 6}" y="{HEIGHT - MARGIN - tick * span_y + 4:.1f}" '
                     f'text-anchor="end" font-size="10">{tick:.1f}</text>')
    for label, x, y in points:
        cx = MARGIN + x * span_x
        cy = HEIGHT - MARGIN - y * span_y
        parts.append(f'<circle cx="{cx:.2f}" cy="{cy:.2f}" r="4" fill="steelblue" '
                     f'fill-opacity="0.7"><title>{escape(label)}</title></circle>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def bar_svg(items: Sequence[Tuple[str, float]], title: str, value_label: str) -> str:
    """Horizontal bars, largest first."""
    height = max(HEIGHT, MARGIN * 2 + 22 * len(items))
    peak = max((v for _, v in items), default=0.0) or 1.0
    left = 180
    usable = WIDTH - left - MARGIN / 2
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" '
        f'viewBox="0 0 {WIDTH} {height}">',
        f'<rect width="{WIDTH}" height="{height}" fill="white"/>',
        f'<text x="{WIDTH / 2}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
    ]
    for i, (label, value) in enumerate(items):
        y = MARGIN + i * 22
        parts.append(f'<text x="{left - 6}" y="{y + 13}" text-anchor="end" font-size="11">{escape(label)}</text>')
        parts.append(f'<rect x="{left}" y="{y}" width="{usable * value / peak:.2f}" height="16" fill="darkorange"/>')
        parts.append(f'<text x="{left + usable * value / peak + 4:.2f}" y="{y + 13}" font-size="10">{value:.4f}</text>')
    parts.append(f'<text x="{WIDTH / 2}" y="{height - 16}" text-anchor="middle" font-size="12">'
                 f'{escape(value_label)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_charts(run: RunDirectory) -> List[str]:
    """Emit whichever charts the run's artifacts support"""
    written = []
    silos = _silo_frame(run)
    if silos is not None:
        per_silo = silos[silos["silo"] != GLOBAL_SCOPE]
        pr = per_silo[per_silo["precision"].notna() & per_silo["recall"].notna()]
        run.write_text("silo_precision_recall.svg", scatter_svg(
            [(f"silo {r.silo}", r.recall, r.precision) for r in pr.itertuples()],
            "Per-silo precision vs recall", "recall", "precision"))
        fa = per_silo[per_silo["f1"].notna() & per_silo["auc"].notna()]
        run.write_text("silo_f1_auc.svg", scatter_svg(
            [(f"silo {r.silo}", r.auc, r.f1) for r in fa.itertuples()],
            "Per-silo F1 vs AUC", "AUC", "F1"))
        written += ["silo_precision_recall.svg", "silo_f1_auc.svg"]
    if run.has("attribution_summary.csv"):
        run.write_text("feature_importance.svg", bar_svg(
            top_features(run, k=len(run.read_csv("attribution_summary.csv"))),
            "Feature importance", "mean |attribution|"))
        written.append("feature_importance.svg")
    if not written:
        logger.warning("No chartable artifacts in %s", run.path)
    return written
