"""Vector drawings of jet fields: fields of curves, ellipse fields, fans, trajectories.

Geometry is computed first (plain arrays, easy to test) and rendered to SVG
text second.  Rendering is deterministic: fixed float formatting, no
timestamps, no random ids.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import UnsupportedPlot
from .jetcore import extract_ab
from .models import to_jet_field

DEFAULT_CURVE_EPS = 0.1
DEFAULT_ELLIPSE_EPS = 0.05


@dataclass
class PlotData:
    kind: str
    anchors: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    polylines: list[np.ndarray] = field(default_factory=list)
    markers: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    dots: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    labels: tuple[str, str] = ("x1", "x2")
    title: str = ""


def anchor_grid(bounds: Sequence[float], count: int) -> np.ndarray:
    """``count`` x ``count`` anchors on [x0, x1] x [y0, y1] (endpoints included)."""
    x0, x1, y0, y1 = map(float, bounds)
    if count < 1:
        raise ValueError("grid must contain at least one point")
    xs = np.linspace(x0, x1, count)
    ys = np.linspace(y0, y1, count)
    X, Y = np.meshgrid(xs, ys, indexing="xy")
    return np.stack([X.ravel(), Y.ravel()], axis=1)


def _require_planar(field_) -> None:
    if field_.n != 2:
        raise UnsupportedPlot(f"field plots need a 2-dimensional state, got {field_.n}")


def field_of_curves(model, anchors, eps: float = DEFAULT_CURVE_EPS, samples: int = 21) -> PlotData:
    """Quadratic representative s -> gamma_x(s e_alpha), |s| <= eps, at every anchor.

    Anchors whose jet has no first- or second-order part are drawn as dots only.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    f = to_jet_field(model)
    _require_planar(f)
    anchors = np.asarray(anchors, dtype=float)
    jet = f(anchors)
    s = np.linspace(-eps, eps, samples)
    lines = []
    dots = []
    for k in range(len(anchors)):
        flat = not np.any(jet.grad[k]) and not np.any(jet.hess[k])
        if flat:
            dots.append(jet.value[k])
            continue
        for alpha in range(f.d):
            u = np.zeros((samples, f.d))
            u[:, alpha] = s
            pts = np.stack([_quadratic(jet, k, uu) for uu in u])
            lines.append(pts)
    return PlotData(
        kind="field-of-curves",
        anchors=jet.value.copy(),
        polylines=lines,
        dots=np.array(dots).reshape(-1, 2),
        labels=tuple(f.states[:2]),
    )


def _quadratic(jet, k, u):
    H = jet.hess_matrix()[k]
    return jet.value[k] + jet.grad[k] @ u + 0.5 * np.einsum("iab,a,b->i", H, u, u)


def ellipse_field(model, anchors, eps: float = DEFAULT_ELLIPSE_EPS, samples: int = 64) -> PlotData:
    """Image of the eps-circle under the canonical representative; star at the drift point.

    The canonical curve x + b s + (a/d)|s|^2 maps the circle |s| = eps onto an
    ellipse centred at x + a eps^2 / d.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    f = to_jet_field(model)
    _require_planar(f)
    if f.d != 2:
        raise UnsupportedPlot(f"ellipse plots need two drivers, got {f.d}")
    anchors = np.asarray(anchors, dtype=float)
    jet = f(anchors)
    a, b = extract_ab(jet)
    theta = np.linspace(0.0, 2.0 * np.pi, samples + 1)
    circle = eps * np.stack([np.cos(theta), np.sin(theta)], axis=1)
    lines = []
    centers = jet.value + a * eps**2 / f.d
    for k in range(len(anchors)):
        lines.append(jet.value[k] + circle @ b[k].T + a[k] * eps**2 / f.d)
    return PlotData(
        kind="ellipse-field",
        anchors=jet.value.copy(),
        polylines=lines,
        markers=centers,
        labels=tuple(f.states[:2]),
    )


def fan_plot(rows, bands=None) -> PlotData:
    """Fan curves (alpha, t, value) as polylines in the (t, x) plane; optional MC band points."""
    by_alpha: dict[float, list[tuple[float, float]]] = {}
    for a, t, v in rows:
        by_alpha.setdefault(a, []).append((t, v))
    lines = [np.array(sorted(pts)) for _, pts in sorted(by_alpha.items())]
    dots = np.asarray(bands, dtype=float).reshape(-1, 2) if bands is not None else np.zeros((0, 2))
    return PlotData(kind="fan", polylines=lines, dots=dots, labels=("t", "x"))


def trajectory_plot(paths: np.ndarray, times: np.ndarray | None = None) -> PlotData:
    """Planar paths (P, K, 2), or scalar paths (P, K, 1) against time."""
    paths = np.asarray(paths, dtype=float)
    if paths.shape[-1] == 1:
        if times is None:
            raise UnsupportedPlot("scalar trajectories need a time axis")
        lines = [np.stack([times, p[:, 0]], axis=1) for p in paths]
        labels = ("t", "x")
    elif paths.shape[-1] == 2:
        lines = [p for p in paths]
        labels = ("x1", "x2")
    else:
        raise UnsupportedPlot(f"trajectory plots need 1 or 2 coordinates, got {paths.shape[-1]}")
    lines = [ln[np.isfinite(ln).all(axis=1)] for ln in lines]
    return PlotData(kind="trajectory", polylines=lines, labels=labels)


# SVG ------------------------------------------------------------------------------------


def _fmt(v: float) -> str:
    s = f"{v:.3f}"
    return "0.000" if s == "-0.000" else s


def _bounds(data: PlotData):
    pts = [data.anchors, data.markers, data.dots] + list(data.polylines)
    pts = [p for p in pts if p.size]
    if not pts:
        return -1.0, 1.0, -1.0, 1.0
    allp = np.vstack(pts)
    allp = allp[np.isfinite(allp).all(axis=1)]
    lo, hi = allp.min(axis=0), allp.max(axis=0)
    span = np.maximum(hi - lo, 1e-9)
    pad = 0.05 * span
    return lo[0] - pad[0], hi[0] + pad[0], lo[1] - pad[1], hi[1] + pad[1]


def render_svg(data: PlotData, width: int = 600, height: int = 600) -> str:
    x0, x1, y0, y1 = _bounds(data)
    sx = width / (x1 - x0)
    sy = height / (y1 - y0)

    def to_px(p):
        return (p[..., 0] - x0) * sx, height - (p[..., 1] - y0) * sy

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f"<title>{data.kind}{': ' + data.title if data.title else ''}</title>",
        f'<desc>x axis {data.labels[0]} in [{x0:.6g}, {x1:.6g}], '
        f"y axis {data.labels[1]} in [{y0:.6g}, {y1:.6g}]</desc>",
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        '<g fill="none" stroke="black" stroke-width="1">',
    ]
    for line in data.polylines:
        if len(line) < 2:
            continue
        px, py = to_px(line)
        pts = " ".join(f"{_fmt(a)},{_fmt(b)}" for a, b in zip(px, py))
        out.append(f'<polyline points="{pts}"/>')
    out.append("</g>")
    out.append('<g fill="black">')
    for p in data.dots:
        px, py = to_px(p)
        out.append(f'<circle cx="{_fmt(px)}" cy="{_fmt(py)}" r="1.5"/>')
    out.append("</g>")
    out.append('<g fill="red" stroke="none">')
    for p in data.markers:
        px, py = to_px(p)
        out.append(f'<path d="{_star(px, py, 4.0)}"/>')
    out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _star(cx: float, cy: float, r: float) -> str:
    pts = []
    for k in range(10):
        rad = r if k % 2 == 0 else 0.4 * r
        ang = -np.pi / 2 + k * np.pi / 5
        pts.append(f"{_fmt(cx + rad * np.cos(ang))},{_fmt(cy + rad * np.sin(ang))}")
    return "M" + " L".join(pts) + " Z"
