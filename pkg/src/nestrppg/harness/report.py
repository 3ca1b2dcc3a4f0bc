"""Byte-deterministic export of a run report: JSON, CSV tables and SVG plots."""
from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path

from ..errors import DataError
from .train import CURVE_COLUMNS, HRV_FEATURES, RunReport

HR_COLUMNS = ("domain", "hr_source", "n", "sd", "mae", "rmse", "r")
HRV_COLUMNS = ("domain", "feature", "n", "sd", "mae", "rmse", "r")
FILES = ("report.json", "hr_metrics.csv", "hrv_metrics.csv", "loss_curves.csv", "loss_curves.svg")


def fmt(v) -> str:
    """CSV cell: 17 significant digits for floats, empty for an undefined value."""
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return "%.17g" % v
    return str(v)


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([fmt(r.get(k)) for k in header])
    return buf.getvalue()


def hr_table(report: RunReport) -> str:
    rows = []
    for dom, t in sorted(report.targets.items()):
        rows.append({"domain": dom, "hr_source": t.hr_source, **t.hr.to_dict()})
    return csv_text(HR_COLUMNS, rows)


def hrv_table(report: RunReport) -> str:
    rows = []
    for dom, t in sorted(report.targets.items()):
        for f in HRV_FEATURES:
            if f in t.hrv:
                rows.append({"domain": dom, "feature": f, **t.hrv[f].to_dict()})
    return csv_text(HRV_COLUMNS, rows)


def curve_table(report: RunReport) -> str:
    return csv_text(CURVE_COLUMNS, report.curves)


# --- SVG -------------------------------------------------------------------

def _num(v: float) -> str:
    return "%.2f" % v


def svg_panels(panels: list[tuple[str, list[float], list[float | None]]], width: int = 640,
               panel_height: int = 110) -> str:
    """Stacked line plots, one per (title, xs, ys); ``None`` values break the line."""
    pad_l, pad_r, pad_t, pad_b = 60, 12, 18, 14
    h = panel_height * len(panels)
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{h}" viewBox="0 0 {width} {h}" '
           'font-family="sans-serif" font-size="10">',
           f'<rect width="{width}" height="{h}" fill="white"/>']
    for k, (title, xs, ys) in enumerate(panels):
        top = k * panel_height
        x0, x1 = pad_l, width - pad_r
        y0, y1 = top + panel_height - pad_b, top + pad_t
        out.append(f'<text x="{pad_l}" y="{top + 12}">{title}</text>')
        out.append(f'<rect x="{x0}" y="{y1}" width="{x1 - x0}" height="{y0 - y1}" fill="none" stroke="#999"/>')
        vals = [y for y in ys if y is not None and math.isfinite(y)]
        if not xs or not vals:
            continue
        xmin, xmax = min(xs), max(xs)
        ymin, ymax = min(vals), max(vals)
        xspan = (xmax - xmin) or 1.0
        yspan = (ymax - ymin) or 1.0
        px = lambda x: x0 + (x - xmin) / xspan * (x1 - x0)
        py = lambda y: y0 - (y - ymin) / yspan * (y0 - y1)
        out.append(f'<text x="4" y="{_num(y1 + 8)}">{"%.4g" % ymax}</text>')
        out.append(f'<text x="4" y="{_num(y0)}">{"%.4g" % ymin}</text>')
        runs, cur = [], []
        for x, y in zip(xs, ys):
            if y is None or not math.isfinite(y):
                if cur:
                    runs.append(cur)
                cur = []
            else:
                cur.append(f"{_num(px(x))},{_num(py(y))}")
        if cur:
            runs.append(cur)
        for r in runs:
            if len(r) == 1:
                cx, cy = r[0].split(",")
                out.append(f'<circle cx="{cx}" cy="{cy}" r="2" fill="#1f5fa8"/>')
            else:
                out.append(f'<polyline fill="none" stroke="#1f5fa8" stroke-width="1" points="{" ".join(r)}"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def curves_svg(report: RunReport) -> str:
    xs = list(range(len(report.curves)))
    panels = [(name, xs, [r.get(name) for r in report.curves]) for name in ("total",) + CURVE_COLUMNS[4:]]
    return svg_panels(panels)


def label_curve_svg(curve: dict) -> str:
    offsets = [c - curve["anchor"] for c in curve["centers"]]
    return svg_panels([(f"NEST correlation vs HR offset from {curve['anchor']:g} bpm", offsets,
                        curve["correlation"])], panel_height=220)


def label_curve_csv(curve: dict) -> str:
    """One row per HR bin; an empty bin has an empty correlation cell."""
    return csv_text(("offset_bpm", "center_bpm", "pairs", "correlation"), [
        {"offset_bpm": c - curve["anchor"], "center_bpm": c, "pairs": p, "correlation": r}
        for c, p, r in zip(curve["centers"], curve["pairs"], curve["correlation"])])


def basis_gaps_csv(gaps: dict) -> str:
    return csv_text(("basis", "singular_value", "gap"), [
        {"basis": k, "singular_value": s, "gap": g}
        for k, (s, g) in enumerate(zip(gaps["singular_values"], gaps["gaps"]))])


def diagnostic_files(diagnostics: dict) -> dict[str, str]:
    files = {}
    if "basis_gaps" in diagnostics:
        files["basis_gaps.csv"] = basis_gaps_csv(diagnostics["basis_gaps"])
    if "label_curve" in diagnostics:
        files["label_curve.csv"] = label_curve_csv(diagnostics["label_curve"])
        files["label_curve.svg"] = label_curve_svg(diagnostics["label_curve"])
    return files


# --- export ----------------------------------------------------------------

def report_json(report: RunReport) -> str:
    return json.dumps(report.to_dict(), indent=1, sort_keys=True, allow_nan=True) + "\n"


def write_text(path: Path, text: str) -> None:
    try:
        path.write_text(text, encoding="utf-8")
    except OSError as e:
        raise DataError(f"cannot write {path}: {e.strerror or e}") from e


def export_report(report: RunReport, out_dir) -> list[Path]:
    """Write the report files into ``out_dir``; returns the paths written."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create {out}: {e.strerror or e}") from e
    files = {
        "report.json": report_json(report),
        "hr_metrics.csv": hr_table(report),
        "hrv_metrics.csv": hrv_table(report),
        "loss_curves.csv": curve_table(report),
        "loss_curves.svg": curves_svg(report),
    }
    files.update(diagnostic_files(report.diagnostics))
    paths = []
    for name, text in files.items():
        write_text(out / name, text)
        paths.append(out / name)
    return paths


def load_report(path) -> RunReport:
    p = Path(path)
    if p.is_dir():
        p = p / "report.json"
    try:
        return RunReport.from_dict(json.loads(p.read_text(encoding="utf-8")))
    except OSError as e:
        raise DataError(f"cannot read {p}: {e.strerror or e}") from e
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise DataError(f"{p}: not a run report ({e})") from e
