"""Deterministic writers for tables, JSON reports and SVG line charts.

Every file starts with the hash of the run configuration: a ``#`` comment
line for delimited text, a ``config_hash`` key for JSON and an XML comment
for SVG.
"""

from __future__ import annotations

import hashlib
import json
import math
from html import escape
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

__all__ = ["config_hash", "write_table", "read_table", "write_json", "write_svg_lines"]

FLOAT_FORMAT = "%.17g"


def config_hash(config: Mapping) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def write_table(frame: pd.DataFrame, path: "str | Path", chash: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    body = frame.to_csv(index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    path.write_text(f"# config-hash: {chash}\n{body}")
    return path


def read_table(path: "str | Path", **kwargs) -> pd.DataFrame:
    """Read a delimited file, skipping ``#`` header comments."""
    with open(path) as fh:
        skip = 0
        for line in fh:
            if not line.startswith("#"):
                break
            skip += 1
    return pd.read_csv(path, skiprows=skip, **kwargs)


def _clean(obj):
    if isinstance(obj, Mapping):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(payload: Mapping, path: "str | Path", chash: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = {"config_hash": chash, **_clean(payload)}
    path.write_text(json.dumps(data, indent=2, sort_keys=False) + "\n")
    return path


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f")


def write_svg_lines(
    path: "str | Path",
    chash: str,
    series: Mapping[str, tuple[Sequence[float], Sequence[float]]],
    *,
    title: str = "",
    ylabel: str = "",
    bands: Mapping[str, tuple[Sequence[float], Sequence[float], Sequence[float]]] | None = None,
    width: int = 640,
    height: int = 360,
) -> Path:
    """Static line chart. ``bands`` maps a series name to ``(x, lo, hi)`` shaded areas."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    bands = bands or {}
    xs, ys = [], []
    for x, y in series.values():
        xs += list(map(float, x))
        ys += list(map(float, y))
    for x, lo, hi in bands.values():
        xs += list(map(float, x))
        ys += list(map(float, lo)) + list(map(float, hi))
    finite = [v for v in ys if math.isfinite(v)]
    x0, x1 = (min(xs), max(xs)) if xs else (0.0, 1.0)
    y0, y1 = (min(finite), max(finite)) if finite else (0.0, 1.0)
    y0, y1 = min(y0, 0.0), max(y1, 0.0)
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 == y0:
        y0, y1 = y0 - 1.0, y1 + 1.0
    ml, mr, mt, mb = 60, 20, 30, 40
    pw, ph = width - ml - mr, height - mt - mb

    def px(v):
        return ml + (v - x0) / (x1 - x0) * pw

    def py(v):
        return mt + (y1 - v) / (y1 - y0) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f"<!-- config-hash: {chash} -->",
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
    ]
    if title:
        out.append(f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="14">{escape(title)}</text>')
    out.append(f'<line x1="{ml}" y1="{py(0.0):.2f}" x2="{ml + pw}" y2="{py(0.0):.2f}" stroke="#999" '
               f'stroke-dasharray="4 3"/>')
    out.append(f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="black"/>')
    for k in range(5):
        yv = y0 + (y1 - y0) * k / 4
        xv = x0 + (x1 - x0) * k / 4
        out.append(f'<text x="{ml - 6}" y="{py(yv) + 4:.2f}" text-anchor="end" font-size="10">{yv:.3g}</text>')
        out.append(f'<text x="{px(xv):.2f}" y="{mt + ph + 16}" text-anchor="middle" font-size="10">{xv:.6g}</text>')
    if ylabel:
        out.append(f'<text x="14" y="{mt + ph / 2:.1f}" font-size="11" transform="rotate(-90 14 {mt + ph / 2:.1f})" '
                   f'text-anchor="middle">{escape(ylabel)}</text>')
    names = list(series)
    for k, name in enumerate(names):
        color = _PALETTE[k % len(_PALETTE)]
        if name in bands:
            bx, lo, hi = bands[name]
            pts = [(px(float(a)), py(float(b))) for a, b in zip(bx, hi)]
            pts += [(px(float(a)), py(float(b))) for a, b in reversed(list(zip(bx, lo)))]
            if pts:
                poly = " ".join(f"{a:.2f},{b:.2f}" for a, b in pts)
                out.append(f'<polygon points="{poly}" fill="{color}" fill-opacity="0.15" stroke="none"/>')
        x, y = series[name]
        pts = [(px(float(a)), py(float(b))) for a, b in zip(x, y) if math.isfinite(float(b))]
        if pts:
            line = " ".join(f"{a:.2f},{b:.2f}" for a, b in pts)
            out.append(f'<polyline points="{line}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        out.append(f'<text x="{ml + 8}" y="{mt + 14 + 13 * k}" font-size="11" fill="{color}">{escape(name)}</text>')
    out.append("</svg>")
    path.write_text("\n".join(out) + "\n")
    return path
