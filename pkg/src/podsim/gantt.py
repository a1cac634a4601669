"""Per-rank Gantt charts as standalone SVG.

Each rank gets one horizontal lane.  Intervals are drawn with one of three
CSS classes: ``advection`` (A), ``comm-wait`` (C and W) and ``overhead``
(I, BO, EO).  The default colours are blue, white and pink; pass ``colors``
to override any of them.
"""

from __future__ import annotations

from xml.sax.saxutils import escape

from podsim.trace import RunTrace

CATEGORY_CLASS = {"A": "advection", "C": "comm-wait", "W": "comm-wait",
                  "I": "overhead", "BO": "overhead", "EO": "overhead"}
DEFAULT_COLORS = {"advection": "#2f6fd6", "comm-wait": "#ffffff", "overhead": "#f2a7c3"}

LEFT = 70.0
RIGHT = 20.0
TOP = 30.0
LANE = 18.0
GAP = 4.0
AXIS = 40.0


def _f(x: float) -> str:
    return f"{x:.4f}"


def render_svg(trace: RunTrace, width: float = 1000.0, colors: dict = None) -> str:
    palette = dict(DEFAULT_COLORS)
    for k, v in (colors or {}).items():
        if k not in palette:
            raise ValueError(f"unknown colour class {k!r} (have {', '.join(palette)})")
        palette[k] = v
    total = trace.total_time
    n = trace.num_ranks
    plot_w = width - LEFT - RIGHT
    height = TOP + n * (LANE + GAP) + AXIS
    scale = plot_w / float(total) if total else 0.0
    unit = trace.header.get("time_unit", "s")

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_f(width)}" height="{_f(height)}" '
        f'viewBox="0 0 {_f(width)} {_f(height)}">',
        f'<!-- config_hash: {escape(str(trace.header.get("config_hash", "")))} -->',
        "<style>",
        *(f".{cls} {{ fill: {col}; stroke: none; }}" for cls, col in palette.items()),
        ".lane { fill: none; stroke: #888888; stroke-width: 0.5; }",
        "text { font-family: sans-serif; font-size: 11px; }",
        "</style>",
        f'<text x="{_f(LEFT)}" y="{_f(TOP - 10)}">{escape(str(trace.header.get("name", "")))}</text>',
    ]
    for r in range(n):
        y = TOP + r * (LANE + GAP)
        out.append(f'<text x="{_f(LEFT - 8)}" y="{_f(y + LANE - 5)}" text-anchor="end">rank {r}</text>')
        for e in trace.rank_events(r):
            if e.t_end <= e.t_start:
                continue
            x0 = LEFT + e.t_start * scale
            w = (e.t_end - e.t_start) * scale
            out.append(f'<rect class="{CATEGORY_CLASS[e.category]}" data-rank="{r}" '
                       f'data-category="{e.category}" x="{_f(x0)}" y="{_f(y)}" '
                       f'width="{_f(w)}" height="{_f(LANE)}"/>')
        out.append(f'<rect class="lane" x="{_f(LEFT)}" y="{_f(y)}" width="{_f(plot_w)}" '
                   f'height="{_f(LANE)}"/>')
    y_axis = TOP + n * (LANE + GAP) + 4
    out.append(f'<line x1="{_f(LEFT)}" y1="{_f(y_axis)}" x2="{_f(LEFT + plot_w)}" '
               f'y2="{_f(y_axis)}" stroke="#000000" stroke-width="1"/>')
    for i in range(6):
        t = total * i / 5
        x = LEFT + plot_w * i / 5
        out.append(f'<line x1="{_f(x)}" y1="{_f(y_axis)}" x2="{_f(x)}" y2="{_f(y_axis + 4)}" '
                   f'stroke="#000000" stroke-width="1"/>')
        out.append(f'<text x="{_f(x)}" y="{_f(y_axis + 16)}" text-anchor="middle">{t:.6g}</text>')
    out.append(f'<text x="{_f(LEFT + plot_w / 2)}" y="{_f(y_axis + 32)}" '
               f'text-anchor="middle">time [{escape(unit)}]</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_gantt(trace: RunTrace, path, width: float = 1000.0, colors: dict = None):
    with open(path, "w") as fh:
        fh.write(render_svg(trace, width, colors))
    return path
