"""Deterministic report files: JSON, CSV, and simple SVG charts.

Nothing here records wall-clock time or machine identity, so two runs
with the same configuration and seed produce byte-identical files. The
provenance block carries a sha256 of the canonicalised configuration
instead of a timestamp.
"""

from __future__ import annotations

import hashlib
import json

from .util import jsonable


def canonical_json(obj) -> str:
    """Serialise with sorted keys and no float noise for hashing."""
    return json.dumps(jsonable(obj), sort_keys=True, separators=(",", ":"))


def config_hash(config) -> str:
    return hashlib.sha256(canonical_json(config).encode("utf-8")).hexdigest()


def provenance(config, seed) -> dict:
    return {"config_sha256": config_hash(config), "seed": seed}


def write_report(path, payload: dict, config=None, seed=None):
    """Write a JSON report, with a provenance block when config given."""
    body = dict(jsonable(payload))
    if config is not None:
        body["provenance"] = provenance(config, seed)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(body, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_csv(path, header, rows):
    """Write rows of scalars with repr-stable float formatting."""

    def fmt(v):
        if isinstance(v, float):
            return format(v, ".12g")
        return str(v)

    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(str(h) for h in header) + "\n")
        for row in rows:
            fh.write(",".join(fmt(v) for v in row) + "\n")


def svg_line_chart(path, series, title="", x_label="", y_label="",
                   width=640, height=400):
    """Plot named (x, y) series as polylines in a standalone SVG.

    `series` maps a legend label to a pair of equal-length sequences.
    Layout is fixed-precision arithmetic only, so output is stable.
    """
    margin = 60
    palette = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
               "#8c564b", "#17becf", "#7f7f7f", "#bcbd22", "#e377c2")
    xs_all, ys_all = [], []
    for xs, ys in series.values():
        xs_all.extend(float(v) for v in xs)
        ys_all.extend(float(v) for v in ys)
    if not xs_all:
        raise ValueError("no data to plot")
    x_lo, x_hi = min(xs_all), max(xs_all)
    y_lo, y_hi = min(ys_all), max(ys_all)
    if x_hi - x_lo < 1e-12:
        x_hi = x_lo + 1.0
    if y_hi - y_lo < 1e-12:
        y_hi = y_lo + 1.0
    plot_w = width - 2 * margin
    plot_h = height - 2 * margin

    def px(x):
        return margin + plot_w * (x - x_lo) / (x_hi - x_lo)

    def py(y):
        return height - margin - plot_h * (y - y_lo) / (y_hi - y_lo)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
        f'y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" '
        f'y2="{height - margin}" stroke="black"/>',
    ]
    if title:
        parts.append(f'<text x="{width / 2:.1f}" y="24" font-size="16" '
                     f'text-anchor="middle">{title}</text>')
    if x_label:
        parts.append(f'<text x="{width / 2:.1f}" y="{height - 12}" '
                     f'font-size="12" text-anchor="middle">{x_label}</text>')
    if y_label:
        parts.append(f'<text x="16" y="{height / 2:.1f}" font-size="12" '
                     f'text-anchor="middle" transform="rotate(-90 16 '
                     f'{height / 2:.1f})">{y_label}</text>')
    for k in range(5):
        xv = x_lo + (x_hi - x_lo) * k / 4
        yv = y_lo + (y_hi - y_lo) * k / 4
        parts.append(f'<text x="{px(xv):.1f}" y="{height - margin + 16}" '
                     f'font-size="10" text-anchor="middle">{xv:.4g}</text>')
        parts.append(f'<text x="{margin - 6}" y="{py(yv) + 3:.1f}" '
                     f'font-size="10" text-anchor="end">{yv:.4g}</text>')
    for i, (label, (xs, ys)) in enumerate(series.items()):
        color = palette[i % len(palette)]
        points = " ".join(f"{px(float(x)):.2f},{py(float(y)):.2f}"
                          for x, y in zip(xs, ys))
        parts.append(f'<polyline points="{points}" fill="none" '
                     f'stroke="{color}" stroke-width="1.5"/>')
        ly = margin + 14 * (i + 1)
        parts.append(f'<line x1="{width - margin - 110}" y1="{ly - 4}" '
                     f'x2="{width - margin - 90}" y2="{ly - 4}" '
                     f'stroke="{color}" stroke-width="1.5"/>')
        parts.append(f'<text x="{width - margin - 84}" y="{ly}" '
                     f'font-size="11">{label}</text>')
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(parts) + "\n")
