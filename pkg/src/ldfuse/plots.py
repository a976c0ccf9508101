"""Deterministic SVG emission for training curves and metric tables.

Hand-rolled SVG strings rather than a plotting library: identical inputs
must yield byte-identical files, which rules out generators that embed
timestamps or per-process ids.
"""
from __future__ import annotations

from pathlib import Path

__all__ = ["line_svg", "bar_svg", "emit_plots"]

_W, _H = 640, 400
_MARGIN = 50


def _fmt(x):
    return f"{x:.3f}".rstrip("0").rstrip(".")


def _frame(title, body):
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}">\n'
        f'<rect width="{_W}" height="{_H}" fill="white"/>\n'
        f'<text x="{_W / 2}" y="24" text-anchor="middle" font-family="monospace" '
        f'font-size="14">{title}</text>\n'
        f"{body}\n</svg>\n"
    )


def _axis(lo, hi):
    if hi <= lo:
        hi = lo + 1.0
    return lo, hi


def line_svg(title, xs, ys) -> str:
    """Polyline plot of ys against xs."""
    if not xs:
        return _frame(title, "")
    x0, x1 = _axis(min(xs), max(xs))
    y0, y1 = _axis(min(ys), max(ys))
    span_x = _W - 2 * _MARGIN
    span_y = _H - 2 * _MARGIN

    def px(x):
        return _MARGIN + span_x * (x - x0) / (x1 - x0)

    def py(y):
        return _H - _MARGIN - span_y * (y - y0) / (y1 - y0)

    pts = " ".join(f"{_fmt(px(x))},{_fmt(py(y))}" for x, y in zip(xs, ys))
    body = (
        f'<polyline points="{pts}" fill="none" stroke="steelblue" stroke-width="1.5"/>\n'
        f'<line x1="{_MARGIN}" y1="{_H - _MARGIN}" x2="{_W - _MARGIN}" '
        f'y2="{_H - _MARGIN}" stroke="black"/>\n'
        f'<line x1="{_MARGIN}" y1="{_MARGIN}" x2="{_MARGIN}" y2="{_H - _MARGIN}" '
        f'stroke="black"/>\n'
        f'<text x="{_MARGIN}" y="{_H - _MARGIN + 20}" font-family="monospace" '
        f'font-size="11">{_fmt(x0)}</text>\n'
        f'<text x="{_W - _MARGIN}" y="{_H - _MARGIN + 20}" text-anchor="end" '
        f'font-family="monospace" font-size="11">{_fmt(x1)}</text>\n'
        f'<text x="{_MARGIN - 4}" y="{_H - _MARGIN}" text-anchor="end" '
        f'font-family="monospace" font-size="11">{_fmt(y0)}</text>\n'
        f'<text x="{_MARGIN - 4}" y="{_MARGIN + 4}" text-anchor="end" '
        f'font-family="monospace" font-size="11">{_fmt(y1)}</text>'
    )
    return _frame(title, body)


def bar_svg(title, labels, values) -> str:
    """Bar chart with one bar per labelled value."""
    if not labels:
        return _frame(title, "")
    vmax = max(max(values), 0.0)
    vmax = vmax if vmax > 0 else 1.0
    span_x = _W - 2 * _MARGIN
    span_y = _H - 2 * _MARGIN
    n = len(labels)
    slot = span_x / n
    bars = []
    for k, (label, val) in enumerate(zip(labels, values)):
        h = span_y * max(val, 0.0) / vmax
        x = _MARGIN + k * slot + 0.15 * slot
        y = _H - _MARGIN - h
        bars.append(
            f'<rect x="{_fmt(x)}" y="{_fmt(y)}" width="{_fmt(0.7 * slot)}" '
            f'height="{_fmt(h)}" fill="steelblue"/>\n'
            f'<text x="{_fmt(x + 0.35 * slot)}" y="{_H - _MARGIN + 16}" '
            f'text-anchor="middle" font-family="monospace" font-size="11">{label}</text>\n'
            f'<text x="{_fmt(x + 0.35 * slot)}" y="{_fmt(y - 4)}" text-anchor="middle" '
            f'font-family="monospace" font-size="10">{_fmt(val)}</text>'
        )
    body = "".join(bars) + (
        f'<line x1="{_MARGIN}" y1="{_H - _MARGIN}" x2="{_W - _MARGIN}" '
        f'y2="{_H - _MARGIN}" stroke="black"/>'
    )
    return _frame(title, body)


def emit_plots(train_log, out_dir) -> list:
    """Write one loss curve per component plus a final-value bar chart.

    Returns the list of written paths; an empty log writes nothing.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not train_log.records:
        return []
    steps = [rec["step"] for rec in train_log.records]
    written = []
    finals = []
    for name in train_log.component_names():
        ys = [rec["components"].get(name, 0.0) for rec in train_log.records]
        path = out / f"loss_{name}.svg"
        path.write_text(line_svg(f"{name} vs step", steps, ys))
        written.append(path)
        finals.append((name, ys[-1]))
    bar = out / "components_final.svg"
    bar.write_text(bar_svg("final loss components",
                           [n for n, _ in finals], [v for _, v in finals]))
    written.append(bar)
    return written
