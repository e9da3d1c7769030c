"""Self-contained SVG heatmaps for analysis outputs.

No plotting dependency and no timestamps: identical inputs produce
byte-identical files. Every cell carries a ``data-value`` attribute so the
rendered numbers can be recovered from the SVG itself.
"""
from __future__ import annotations

import math

# dark-blue -> teal -> yellow anchors
_STOPS = ((0.267, 0.005, 0.329), (0.128, 0.567, 0.551), (0.993, 0.906, 0.144))


def _color(value: float) -> str:
    v = min(max(value, 0.0), 1.0)
    if v < 0.5:
        a, b, t = _STOPS[0], _STOPS[1], v * 2.0
    else:
        a, b, t = _STOPS[1], _STOPS[2], (v - 0.5) * 2.0
    rgb = [round(255 * (x + (y - x) * t)) for x, y in zip(a, b)]
    return f"#{rgb[0]:02x}{rgb[1]:02x}{rgb[2]:02x}"


def heatmap_svg(rows, row_labels=None, col_labels=None, title: str = "",
                cell: int = 26, vmin: float | None = None, vmax: float | None = None) -> str:
    """Render a (possibly ragged) grid of numbers; None cells are blank."""
    n_rows = len(rows)
    n_cols = max((len(r) for r in rows), default=0)
    values = [v for r in rows for v in r if v is not None and math.isfinite(v)]
    lo = vmin if vmin is not None else (min(values) if values else 0.0)
    hi = vmax if vmax is not None else (max(values) if values else 1.0)
    span = hi - lo if hi > lo else 1.0

    margin_left, margin_top = 70, 40 if title else 24
    width = margin_left + n_cols * cell + 20
    height = margin_top + n_rows * cell + 30
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'font-family="monospace" font-size="10">'
    ]
    if title:
        parts.append(f'<text x="{margin_left}" y="16" font-size="12">{title}</text>')
    for i, row in enumerate(rows):
        y = margin_top + i * cell
        label = row_labels[i] if row_labels else str(i)
        parts.append(f'<text x="{margin_left - 6}" y="{y + cell * 0.65}" text-anchor="end">{label}</text>')
        for j, value in enumerate(row):
            if value is None:
                continue
            x = margin_left + j * cell
            norm = (value - lo) / span
            parts.append(
                f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" '
                f'fill="{_color(norm)}" data-row="{i}" data-col="{j}" '
                f'data-value="{value:.6g}"><title>{label}[{j}] = {value:.6g}</title></rect>')
    for j in range(n_cols):
        x = margin_left + j * cell
        label = col_labels[j] if col_labels else str(j)
        parts.append(f'<text x="{x + cell / 2}" y="{margin_top + n_rows * cell + 14}" '
                     f'text-anchor="middle">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts)
