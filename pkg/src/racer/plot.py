"""Static SVG figures for run logs: top-down trajectory and collective thrust.

The writer emits plain SVG text with fixed numeric formatting so identical
input always yields identical bytes.
"""

from __future__ import annotations

import math
from html import escape

import numpy as np

from .sim import RunLog
from .track import Track

WIDTH, HEIGHT = 640, 480
MARGIN = 56
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf")


def _fmt(v: float) -> str:
    s = f"{v:.2f}"
    return "0.00" if s == "-0.00" else s


def _nice_ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    span = hi - lo
    if span <= 0:
        return [lo]
    raw = span / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=10 * mag)
    start = math.ceil(lo / step - 1e-9) * step
    ticks = []
    v = start
    while v <= hi + 1e-9 * step:
        ticks.append(round(v, 10))
        v += step
    return ticks


class _Axes:
    """Linear data-to-pixel map for one plot panel."""

    def __init__(self, xlim, ylim, equal: bool = False):
        (x0, x1), (y0, y1) = self._pad(xlim), self._pad(ylim)
        w, h = WIDTH - 2 * MARGIN, HEIGHT - 2 * MARGIN
        if equal:
            scale = min(w / (x1 - x0), h / (y1 - y0))
            cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
            x0, x1 = cx - w / scale / 2, cx + w / scale / 2
            y0, y1 = cy - h / scale / 2, cy + h / scale / 2
        self.xlim, self.ylim = (x0, x1), (y0, y1)

    @staticmethod
    def _pad(lim):
        lo, hi = float(lim[0]), float(lim[1])
        if hi - lo < 1e-9:
            lo, hi = lo - 1.0, hi + 1.0
        pad = 0.05 * (hi - lo)
        return lo - pad, hi + pad

    def px(self, x, y):
        (x0, x1), (y0, y1) = self.xlim, self.ylim
        u = MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2 * MARGIN)
        v = HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2 * MARGIN)
        return u, v

    def frame(self, title: str, xlabel: str, ylabel: str) -> list[str]:
        out = [
            f'<rect x="{MARGIN}" y="{MARGIN}" width="{WIDTH - 2 * MARGIN}" height="{HEIGHT - 2 * MARGIN}" fill="none" stroke="#333"/>',
            f'<text x="{WIDTH / 2:.0f}" y="{MARGIN / 2:.0f}" text-anchor="middle" font-size="16">{escape(title)}</text>',
            f'<text x="{WIDTH / 2:.0f}" y="{HEIGHT - 12}" text-anchor="middle" font-size="13">{escape(xlabel)}</text>',
            f'<text x="16" y="{HEIGHT / 2:.0f}" text-anchor="middle" font-size="13" transform="rotate(-90 16 {HEIGHT / 2:.0f})">{escape(ylabel)}</text>',
        ]
        for t in _nice_ticks(*self.xlim):
            u, _ = self.px(t, self.ylim[0])
            out.append(f'<line x1="{_fmt(u)}" y1="{HEIGHT - MARGIN}" x2="{_fmt(u)}" y2="{HEIGHT - MARGIN + 5}" stroke="#333"/>')
            out.append(f'<text x="{_fmt(u)}" y="{HEIGHT - MARGIN + 18}" text-anchor="middle" font-size="11">{t:g}</text>')
        for t in _nice_ticks(*self.ylim):
            _, v = self.px(self.xlim[0], t)
            out.append(f'<line x1="{MARGIN - 5}" y1="{_fmt(v)}" x2="{MARGIN}" y2="{_fmt(v)}" stroke="#333"/>')
            out.append(f'<text x="{MARGIN - 8}" y="{_fmt(v + 4)}" text-anchor="end" font-size="11">{t:g}</text>')
        return out

    def polyline(self, xs, ys, color: str, width: float = 1.5, dash: str | None = None) -> str:
        pts = " ".join(f"{_fmt(u)},{_fmt(v)}" for u, v in (self.px(x, y) for x, y in zip(xs, ys)))
        extra = f' stroke-dasharray="{dash}"' if dash else ""
        return f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="{width}"{extra}/>'


def _legend(labels: list[str]) -> list[str]:
    out = []
    for i, name in enumerate(labels):
        y = MARGIN + 16 + 16 * i
        c = PALETTE[i % len(PALETTE)]
        out.append(f'<line x1="{WIDTH - MARGIN - 130}" y1="{y}" x2="{WIDTH - MARGIN - 110}" y2="{y}" stroke="{c}" stroke-width="2"/>')
        out.append(f'<text x="{WIDTH - MARGIN - 104}" y="{y + 4}" font-size="12">{escape(name)}</text>')
    return out


def _document(body: list[str]) -> str:
    head = (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif">'
    )
    return "\n".join([head, f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>', *body, "</svg>"]) + "\n"


def trajectory_svg(logs: list[RunLog], labels: list[str] | None = None, track: Track | None = None) -> str:
    """Top-down XY view of one or more runs with gate apertures drawn as bars."""
    labels = list(labels) if labels else [f"run {i}" for i in range(len(logs))]
    pts = [lg.positions[:, :2] for lg in logs if len(lg)]
    if track is not None:
        pts.append(np.array([g.center[:2] for g in track.gates]))
    allp = np.vstack(pts) if pts else np.zeros((1, 2))
    ax = _Axes((allp[:, 0].min(), allp[:, 0].max()), (allp[:, 1].min(), allp[:, 1].max()), equal=True)
    body = ax.frame("Trajectory (top view)", "x [m]", "y [m]")
    if track is not None:
        for i, g in enumerate(track.gates):
            side = np.array([-g.normal[1], g.normal[0]])
            nrm = np.linalg.norm(side)
            side = side / nrm if nrm > 1e-9 else np.array([0.0, 1.0])
            a = g.center[:2] - side * g.half_extent
            b = g.center[:2] + side * g.half_extent
            body.append(ax.polyline([a[0], b[0]], [a[1], b[1]], "#555", 4.0))
            u, v = ax.px(*g.center[:2])
            body.append(f'<text x="{_fmt(u + 6)}" y="{_fmt(v - 6)}" font-size="11" fill="#555">{i}</text>')
    for i, lg in enumerate(logs):
        c = PALETTE[i % len(PALETTE)]
        P = lg.positions
        if len(P) == 1 or np.ptp(P[:, :2], axis=0).max() < 1e-6:
            u, v = ax.px(P[0, 0], P[0, 1])
            body.append(f'<circle cx="{_fmt(u)}" cy="{_fmt(v)}" r="4" fill="{c}"/>')
        else:
            body.append(ax.polyline(P[:, 0], P[:, 1], c))
    body += _legend(labels)
    return _document(body)


def thrust_svg(logs: list[RunLog], labels: list[str] | None = None, thrust_limit: float | None = None) -> str:
    """Collective thrust against time, with the saturation bound as a dashed line."""
    labels = list(labels) if labels else [f"run {i}" for i in range(len(logs))]
    totals = [lg.states[:, 13:17].sum(axis=1) for lg in logs]
    t_hi = max((lg.times[-1] for lg in logs if len(lg)), default=1.0)
    f_hi = max([float(t.max()) for t in totals if len(t)] + ([thrust_limit] if thrust_limit else []))
    ax = _Axes((0.0, t_hi), (0.0, f_hi))
    body = ax.frame("Collective thrust", "time [s]", "thrust [N]")
    if thrust_limit:
        body.append(ax.polyline([0.0, t_hi], [thrust_limit, thrust_limit], "#000", 1.0, "6,4"))
    for i, (lg, tot) in enumerate(zip(logs, totals)):
        body.append(ax.polyline(lg.times, tot, PALETTE[i % len(PALETTE)]))
    body += _legend(labels)
    return _document(body)
