"""JSON and SVG writers for reports and geometry."""

from __future__ import annotations

import json
import math
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .barrier import TrackingErrorBound

SVG_GROUPS = ("captivity-boundary", "nup", "barrier", "bnup", "junction", "switches")


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    return obj


def write_json(path, obj) -> None:
    """Deterministic JSON (sorted keys; floats in shortest round-trip form)."""
    Path(path).write_text(json.dumps(_plain(obj), indent=2, sort_keys=True) + "\n")


class _Canvas:
    def __init__(self, lo, hi, size=480.0, pad=20.0):
        self.lo = np.asarray(lo, dtype=float)
        span = float(np.max(np.asarray(hi) - self.lo)) or 1.0
        self.k = (size - 2 * pad) / span
        self.pad = pad
        self.size = size
        self.h = float(np.asarray(hi)[1] - self.lo[1]) * self.k + 2 * pad
        self.w = float(np.asarray(hi)[0] - self.lo[0]) * self.k + 2 * pad

    def xy(self, p):
        return (self.pad + (p[0] - self.lo[0]) * self.k, self.h - self.pad - (p[1] - self.lo[1]) * self.k)

    def path(self, pts, closed=False, max_pts=2000):
        pts = np.asarray(pts)
        if len(pts) > max_pts:
            idx = np.unique(np.r_[np.linspace(0, len(pts) - 1, max_pts).astype(int), len(pts) - 1])
            pts = pts[idx]
        coords = " ".join(f"{a:.3f},{b:.3f}" for a, b in (self.xy(p) for p in pts))
        return f"M {coords}{' Z' if closed else ''}"


def teb_svg(teb: TrackingErrorBound, extra: dict[str, list] | None = None) -> str:
    """Rendering with circle, NUP, barrier pieces, BNUP, junction and switch markers.

    ``extra`` maps additional group ids to lists of polylines.
    """
    beta = teb.beta
    lo = np.array([-1.1 * beta, -1.1 * beta])
    hi = np.array([1.1 * beta, 1.1 * beta])
    c = _Canvas(lo, hi)
    r = 3.0
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{c.w:.0f}" height="{c.h:.0f}" '
           f'viewBox="0 0 {c.w:.0f} {c.h:.0f}">']
    cx, cy = c.xy((0.0, 0.0))
    out.append(f'<g id="captivity-boundary"><circle cx="{cx:.3f}" cy="{cy:.3f}" r="{beta * c.k:.3f}" '
               'fill="none" stroke="black" stroke-width="1"/></g>')
    nup, bar = [], []
    for name, pl in teb.components():
        (nup if name == "nup" else bar).append((name, pl))
    out.append('<g id="nup" fill="none" stroke="green" stroke-width="2">')
    for _, pl in nup:
        out.append(f'<path d="{c.path(pl)}"/>')
    out.append("</g>")
    out.append('<g id="barrier" fill="none" stroke="blue" stroke-width="1.5">')
    for name, pl in bar:
        out.append(f'<path class="{escape(name)}" d="{c.path(pl)}"/>')
    out.append("</g>")
    out.append('<g id="bnup" fill="red">')
    for p in teb.anchors:
        x, y = c.xy(p)
        out.append(f'<circle cx="{x:.3f}" cy="{y:.3f}" r="{r}"/>')
    out.append("</g>")
    x, y = c.xy(teb.barrier.junction)
    out.append(f'<g id="junction" fill="green"><circle cx="{x:.3f}" cy="{y:.3f}" r="{r}"/></g>')
    out.append('<g id="switches" fill="gray">')
    for piece in teb.barrier.pieces:
        for p in piece.switch_states():
            x, y = c.xy(p)
            out.append(f'<circle cx="{x:.3f}" cy="{y:.3f}" r="{r}"/>')
    out.append("</g>")
    for gid, lines in (extra or {}).items():
        out.append(f'<g id="{escape(gid)}" fill="none" stroke="orange" stroke-width="0.5">')
        for pl in lines:
            out.append(f'<path d="{c.path(pl, max_pts=500)}"/>')
        out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_teb_svg(path, teb: TrackingErrorBound, extra=None) -> None:
    Path(path).write_text(teb_svg(teb, extra))
