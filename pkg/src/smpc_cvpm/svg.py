"""Minimal SVG writer for top-down (s, d) trajectory plots."""
from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

EGO_COLOUR = "#1f5fbf"
OBSTACLE_COLOURS = ("#c0392b", "#d68910", "#7d3c98", "#117a65", "#566573")


class SvgCanvas:
    """World coordinates (s right, d up) mapped onto a fixed-size picture."""

    def __init__(self, s_range, d_range, width: int = 1200, pad: int = 30, d_scale: float = 4.0):
        self.s0, self.s1 = s_range
        self.d0, self.d1 = d_range
        self.pad = pad
        self.kx = (width - 2 * pad) / max(self.s1 - self.s0, 1e-9)
        # lateral axis is stretched so lane changes stay visible on long roads
        self.ky = self.kx * d_scale
        self.width = width
        self.height = int(2 * pad + (self.d1 - self.d0) * self.ky)
        self.items = []

    def x(self, s):
        return self.pad + (s - self.s0) * self.kx

    def y(self, d):
        return self.height - self.pad - (d - self.d0) * self.ky

    def line(self, s, d, colour="black", width=1.0, dash=None):
        pts = " ".join(f"{self.x(a):.2f},{self.y(b):.2f}" for a, b in zip(s, d))
        extra = f' stroke-dasharray="{dash}"' if dash else ""
        self.items.append(f'<polyline points="{pts}" fill="none" stroke="{colour}" '
                          f'stroke-width="{width}"{extra}/>')

    def rect(self, s, d, length, width, colour, opacity=0.35):
        x, y = self.x(s - 0.5 * length), self.y(d + 0.5 * width)
        self.items.append(f'<rect x="{x:.2f}" y="{y:.2f}" width="{length * self.kx:.2f}" '
                          f'height="{width * self.ky:.2f}" fill="{colour}" fill-opacity="{opacity}" '
                          f'stroke="{colour}" stroke-width="0.8"/>')

    def text(self, s, d, label, size=12, colour="black"):
        self.items.append(f'<text x="{self.x(s):.2f}" y="{self.y(d):.2f}" font-size="{size}" '
                          f'font-family="sans-serif" fill="{colour}">{escape(str(label))}</text>')

    def render(self) -> str:
        body = "\n  ".join(self.items)
        return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.width}" height="{self.height}" '
                f'viewBox="0 0 {self.width} {self.height}">\n'
                f'  <rect width="100%" height="100%" fill="white"/>\n  {body}\n</svg>\n')


def trajectory_svg(trace, road, geometry, footprint_every: int = 10) -> str:
    """Lanes, ego and obstacle paths, and footprints every ``footprint_every`` steps."""
    ego = trace.ego_states()
    obs_ids = [o.id for o in trace.final_world.obstacles]
    worlds = [r.world for r in trace.records] + [trace.final_world]
    obs = {oid: np.array([[w.obstacles[j].state.s_do, w.obstacles[j].state.d_do] for w in worlds])
           for j, oid in enumerate(obs_ids)}
    models = {o.id: o.model for o in trace.final_world.obstacles}
    s_all = np.concatenate([ego[:, 0]] + [v[:, 0] for v in obs.values()])
    lo, hi = road.edges
    canvas = SvgCanvas((float(s_all.min()) - 10.0, float(s_all.max()) + 10.0), (lo - 0.5, hi + 1.5))
    s_span = [canvas.s0, canvas.s1]
    canvas.line(s_span, [lo, lo], "black", 2.0)
    canvas.line(s_span, [hi, hi], "black", 2.0)
    for i in range(1, road.lanes):
        d = lo + i * road.lane_width
        canvas.line(s_span, [d, d], "#888888", 1.0, dash="8,6")
    idx = list(range(0, len(ego), max(footprint_every, 1)))
    for j, oid in enumerate(obs_ids):
        colour = OBSTACLE_COLOURS[j % len(OBSTACLE_COLOURS)]
        path = obs[oid]
        canvas.line(path[:, 0], path[:, 1], colour, 1.2)
        for k in idx:
            canvas.rect(path[k, 0], path[k, 1], models[oid].length, models[oid].width, colour, 0.15)
        canvas.text(path[0, 0], path[0, 1] + 1.2, oid, 11, colour)
    canvas.line(ego[:, 0], ego[:, 1], EGO_COLOUR, 2.0)
    for k in idx:
        canvas.rect(ego[k, 0], ego[k, 1], geometry.ego_length, geometry.ego_width, EGO_COLOUR, 0.25)
    title = f"{trace.scenario} / {trace.scheme} / seed {trace.seed}  J_sim={trace.J_sim:.4f}"
    if trace.collisions:
        title += f"  collisions={trace.collisions}"
    canvas.text(canvas.s0, hi + 1.2, title, 14)
    return canvas.render()


def write_svg(path, text: str) -> Path:
    path = Path(path)
    path.write_text(text)
    return path
