"""Minimal SVG output: point layers and envelope bands, no plotting dependency."""
from __future__ import annotations

from typing import Dict, Iterable, Optional, Sequence, Tuple
from xml.sax.saxutils import escape

import numpy as np

from .geom2d import Rect


class Canvas:
    """Maps data coordinates in ``box`` onto a ``width`` x ``height`` pixel panel."""

    def __init__(self, box: Tuple[float, float, float, float], width=480, height=360, margin=40):
        self.box = box
        self.width, self.height, self.margin = width, height, margin
        self.items: list = []

    def _xy(self, x, y) -> Tuple[np.ndarray, np.ndarray]:
        x0, y0, x1, y1 = self.box
        m = self.margin
        px = m + (np.asarray(x) - x0) / (x1 - x0) * (self.width - 2 * m)
        py = self.height - m - (np.asarray(y) - y0) / (y1 - y0) * (self.height - 2 * m)
        return px, py

    def _coords(self, x, y) -> str:
        px, py = self._xy(x, y)
        return " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(px, py))

    def polyline(self, x, y, color="black", width=1.0, dash: Optional[str] = None):
        ok = np.isfinite(np.asarray(y, dtype=float))
        extra = f' stroke-dasharray="{dash}"' if dash else ""
        self.items.append(
            f'<polyline points="{self._coords(np.asarray(x)[ok], np.asarray(y)[ok])}" fill="none" '
            f'stroke="{color}" stroke-width="{width}"{extra}/>'
        )

    def band(self, x, lower, upper, color="grey", opacity=0.35):
        x = np.asarray(x)
        xs = np.concatenate([x, x[::-1]])
        ys = np.concatenate([lower, np.asarray(upper)[::-1]])
        self.items.append(f'<polygon points="{self._coords(xs, ys)}" fill="{color}" fill-opacity="{opacity}" stroke="none"/>')

    def rect(self, r: Rect, color="black", fill="none", opacity=1.0):
        px, py = self._xy([r.xmin, r.xmax], [r.ymin, r.ymax])
        self.items.append(
            f'<rect x="{px[0]:.2f}" y="{py[1]:.2f}" width="{px[1] - px[0]:.2f}" height="{py[0] - py[1]:.2f}" '
            f'fill="{fill}" fill-opacity="{opacity}" stroke="{color}"/>'
        )

    def points(self, pts: np.ndarray, color="black", radius=1.5):
        px, py = self._xy(pts[:, 0], pts[:, 1]) if len(pts) else ([], [])
        self.items.extend(f'<circle cx="{a:.2f}" cy="{b:.2f}" r="{radius}" fill="{color}"/>' for a, b in zip(px, py))

    def text(self, x, y, s: str, size=12, anchor="start"):
        px, py = self._xy([x], [y])
        self.items.append(
            f'<text x="{px[0]:.2f}" y="{py[0]:.2f}" font-size="{size}" text-anchor="{anchor}">{escape(s)}</text>'
        )

    def axes(self, xlabel="", ylabel=""):
        x0, y0, x1, y1 = self.box
        self.polyline([x0, x1], [y0, y0])
        self.polyline([x0, x0], [y0, y1])
        for v in np.linspace(x0, x1, 6):
            self.text(v, y0 - 0.06 * (y1 - y0), f"{v:.3g}", 10, "middle")
        for v in np.linspace(y0, y1, 5):
            self.text(x0 - 0.02 * (x1 - x0), v, f"{v:.3g}", 10, "end")
        self.text((x0 + x1) / 2, y0 - 0.11 * (y1 - y0), xlabel, 12, "middle")
        self.text(x0, y1 + 0.04 * (y1 - y0), ylabel, 12)

    def render(self) -> str:
        body = "\n".join(self.items)
        return (
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.width}" height="{self.height}">\n'
            f'<rect width="100%" height="100%" fill="white"/>\n{body}\n</svg>\n'
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.render())


def pattern_plot(path, S: Rect, hole: Rect, layers: Iterable[Tuple[np.ndarray, str]], pad: float = 0.1) -> None:
    """Layered point plot over S with the hole outlined."""
    c = Canvas((S.xmin - pad, S.ymin - pad, S.xmax + pad, S.ymax + pad), 480, 480, 20)
    c.rect(S)
    c.rect(hole, color="black", fill="grey", opacity=0.2)
    for pts, color in layers:
        c.points(pts, color, 1.2)
    c.save(path)


def envelope_plot(
    path,
    d: np.ndarray,
    bands: Dict[str, Tuple[np.ndarray, np.ndarray]],
    tau: Optional[Tuple[np.ndarray, np.ndarray]] = None,
    title: str = "",
) -> None:
    """Observed (red), simulated (blue) and theoretical (grey) bands; tau(d) on a 0-100 panel below."""
    colors = {"observed": "red", "simulated": "blue", "theoretical": "grey"}
    top = max(float(np.nanmax(u)) for _, u in bands.values()) or 1.0
    c = Canvas((float(d[0]), 0.0, float(d[-1]), top), 480, 320)
    for name, (lo, hi) in bands.items():
        c.band(d, lo, hi, colors.get(name, "black"))
    c.axes("d", title)
    parts = [c.render()]
    if tau is not None:
        t = Canvas((float(d[0]), 0.0, float(d[-1]), 100.0), 480, 200)
        t.polyline(d, tau[0], "black", 1.5)
        t.polyline(d, tau[1], "black", 1.5, dash="5,3")
        t.axes("d", "coverage (%)")
        parts.append(t.render())
    # stack the panels vertically
    inner = [p.split("\n", 1)[1].rsplit("</svg>", 1)[0] for p in parts]
    h = 320 + (200 if tau is not None else 0)
    body = inner[0] + "".join(f'<g transform="translate(0,320)">{p}</g>' for p in inner[1:])
    with open(path, "w") as fh:
        fh.write(f'<svg xmlns="http://www.w3.org/2000/svg" width="480" height="{h}">\n{body}</svg>\n')
