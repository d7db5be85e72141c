"""Tiny standalone SVG plotter for experiment CSVs.

Only two chart kinds are needed: stacked bars (latency parts per sample) and
line series (rates over a swept parameter or over time). The CSVs remain the
contract; these files are a convenience for eyeballing results.
"""

from __future__ import annotations

from xml.sax.saxutils import escape

W, H = 640, 360
LEFT, RIGHT, TOP, BOTTOM = 60, 130, 30, 40
COLORS = ("#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1", "#ff9da7")


def _frame(title: str, body: list[str], ymax: float, xlabels: list[tuple[float, str]]) -> str:
    pw, ph = W - LEFT - RIGHT, H - TOP - BOTTOM
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">',
           f'<text x="{W / 2}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
           f'<line x1="{LEFT}" y1="{TOP + ph}" x2="{LEFT + pw}" y2="{TOP + ph}" stroke="black"/>',
           f'<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{TOP + ph}" stroke="black"/>']
    for i in range(5):
        v = ymax * i / 4
        y = TOP + ph - ph * i / 4
        out.append(f'<text x="{LEFT - 6}" y="{y + 4:.1f}" text-anchor="end">{v:.4g}</text>')
        out.append(f'<line x1="{LEFT}" y1="{y:.1f}" x2="{LEFT + pw}" y2="{y:.1f}" stroke="#ddd"/>')
    for x, label in xlabels:
        out.append(f'<text x="{x:.1f}" y="{TOP + ph + 16}" text-anchor="middle">{escape(label)}</text>')
    out += body
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _legend(names) -> list[str]:
    out = []
    for i, name in enumerate(names):
        y = TOP + 14 * i
        c = COLORS[i % len(COLORS)]
        out.append(f'<rect x="{W - RIGHT + 12}" y="{y}" width="10" height="10" fill="{c}"/>')
        out.append(f'<text x="{W - RIGHT + 26}" y="{y + 9}">{escape(str(name))}</text>')
    return out


def stacked_bars(path: str, labels: list[str], series: dict[str, list[float]], title: str = "") -> None:
    pw, ph = W - LEFT - RIGHT, H - TOP - BOTTOM
    n = len(labels)
    totals = [sum(vals[i] for vals in series.values()) for i in range(n)]
    ymax = max(totals, default=1) or 1
    slot = pw / max(n, 1)
    body, xl = [], []
    for i in range(n):
        x = LEFT + slot * i + slot * 0.15
        y = TOP + ph
        for k, vals in enumerate(series.values()):
            h = ph * max(vals[i], 0) / ymax
            y -= h
            body.append(f'<rect x="{x:.1f}" y="{y:.1f}" width="{slot * 0.7:.1f}" height="{h:.1f}" '
                        f'fill="{COLORS[k % len(COLORS)]}"/>')
        xl.append((x + slot * 0.35, labels[i]))
    with open(path, "w") as fh:
        fh.write(_frame(title, body + _legend(series), ymax, xl))


def lines(path: str, series: dict[str, list[tuple[float, float]]], title: str = "") -> None:
    pw, ph = W - LEFT - RIGHT, H - TOP - BOTTOM
    pts = [p for s in series.values() for p in s]
    if not pts:
        pts = [(0.0, 0.0), (1.0, 1.0)]
    x0 = min(p[0] for p in pts)
    x1 = max(p[0] for p in pts)
    ymax = max(p[1] for p in pts) or 1
    span = (x1 - x0) or 1

    def sx(x):
        return LEFT + pw * (x - x0) / span

    def sy(y):
        return TOP + ph - ph * y / ymax

    body = []
    for k, s in enumerate(series.values()):
        if not s:
            continue
        d = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in s)
        body.append(f'<polyline fill="none" stroke="{COLORS[k % len(COLORS)]}" stroke-width="1.5" points="{d}"/>')
    xl = [(sx(x0 + span * i / 4), f"{x0 + span * i / 4:.4g}") for i in range(5)]
    with open(path, "w") as fh:
        fh.write(_frame(title, body + _legend(series), ymax, xl))
