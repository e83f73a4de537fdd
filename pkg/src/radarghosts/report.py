"""Static bird's-eye-view snapshots as SVG."""

from __future__ import annotations

import math

import numpy as np

from . import geometry
from .core import Frame, Label, Sequence

_COLORS = {
    Label.REAL: "#1f77b4", Label.MP12: "#d62728", Label.MP22: "#ff7f0e", Label.MP23: "#9467bd",
    Label.OMP: "#8c564b", Label.INDISTINGUISHABLE: "#e377c2", Label.BACKGROUND: "#b0b0b0", Label.IGNORE: "#17becf",
}
_MARKERS = {Label.MP12: "#d62728", Label.MP22: "#ff7f0e", Label.MP23: "#9467bd"}


def predicted_ghosts(frame: Frame, walls) -> list[geometry.GhostPrediction]:
    """Ghost positions implied by each real instance's centroid and every wall.

    Velocity is unknown from a single frame, so Doppler values are not meaningful here.
    """
    out = []
    real = frame.label == Label.REAL
    for iid in np.unique(frame.instance_id[real]):
        m = real & (frame.instance_id == iid)
        obj = geometry.MovingPoint((float(frame.x[m].mean()), float(frame.y[m].mean())), (0.0, 0.0))
        for w in walls:
            try:
                out += [g for g in geometry.ghost_detections((0.0, 0.0), obj, w) if g.valid]
            except geometry.GeometryError:
                continue
    return out


def bev_svg(seq: Sequence, frame_pos: int, detections=(), size: int = 640, extent: float | None = None,
            title: str = "") -> str:
    """One frame with walls, labelled points, predicted ghost positions and optional detections.

    ``detections`` holds point index sets into the frame.
    """
    f = seq.frames[frame_pos]
    if extent is None:
        r = np.hypot(f.x, f.y)
        extent = float(max(10.0, np.percentile(r, 95) if len(r) else 10.0))
    scale = size / (2.0 * extent)

    # sensor at the bottom centre, +x up, +y left
    def px(x, y):
        return size / 2.0 - y * scale, size - x * scale

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
             f'viewBox="0 0 {size} {size}">',
             f'<rect width="{size}" height="{size}" fill="white"/>']
    fov = math.radians(seq.sensor.azimuth_fov)
    for sgn in (-1, 1):
        x1, y1 = px(0, 0)
        x2, y2 = px(2 * extent * math.cos(fov), sgn * 2 * extent * math.sin(fov))
        parts.append(f'<line x1="{x1:.1f}" y1="{y1:.1f}" x2="{x2:.1f}" y2="{y2:.1f}" stroke="#dddddd"/>')
    for w in seq.walls:
        x1, y1 = px(*w.a)
        x2, y2 = px(*w.b)
        parts.append(f'<line x1="{x1:.1f}" y1="{y1:.1f}" x2="{x2:.1f}" y2="{y2:.1f}" stroke="black" '
                     f'stroke-width="3"/>')
    for x, y, lab in zip(f.x, f.y, f.label):
        cx, cy = px(x, y)
        parts.append(f'<circle cx="{cx:.1f}" cy="{cy:.1f}" r="2.5" fill="{_COLORS[Label(lab)]}"/>')
    for g in predicted_ghosts(f, seq.walls):
        cx, cy = px(*g.pos)
        parts.append(f'<circle cx="{cx:.1f}" cy="{cy:.1f}" r="9" fill="none" stroke="{_MARKERS[g.kind]}" '
                     f'stroke-width="1.5" stroke-dasharray="3,2"><title>{g.kind.name}</title></circle>')
    for det in detections:
        idx = np.fromiter(det, dtype=np.int64)
        if not len(idx):
            continue
        xs, ys = zip(*(px(f.x[i], f.y[i]) for i in idx))
        parts.append(f'<rect x="{min(xs) - 4:.1f}" y="{min(ys) - 4:.1f}" width="{max(xs) - min(xs) + 8:.1f}" '
                     f'height="{max(ys) - min(ys) + 8:.1f}" fill="none" stroke="#2ca02c" stroke-width="1.5"/>')
    y = 16
    label = title or f"{seq.name} frame {f.cycle_index}"
    parts.append(f'<text x="8" y="{y}" font-family="monospace" font-size="12">{_escape(label)}</text>')
    for lab in (Label.REAL, Label.MP12, Label.MP22, Label.MP23, Label.OMP, Label.BACKGROUND):
        y += 14
        parts.append(f'<circle cx="14" cy="{y - 4}" r="4" fill="{_COLORS[lab]}"/>'
                     f'<text x="24" y="{y}" font-family="monospace" font-size="11">{lab.name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _escape(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
