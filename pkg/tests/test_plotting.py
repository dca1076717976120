from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from jetsde.dsl import Expr, SymbolTable
from jetsde.errors import UnsupportedPlot
from jetsde.modelfile import load_model
from jetsde.models import PushforwardField, SdeModel, to_jet_field
from jetsde.plotting import (
    PlotData,
    anchor_grid,
    ellipse_field,
    fan_plot,
    field_of_curves,
    render_svg,
    trajectory_plot,
)
from jetsde.quantiles import fan_curves

MODELS = Path(__file__).resolve().parents[1] / "models"
PHI = ["atan(x2/x1)", "log(sqrt(x1^2 + x2^2))"]


def gamma_e():
    return load_model(MODELS / "gamma_e.json").model


def phi_exprs():
    sym = SymbolTable(("x1", "x2"))
    return [Expr(s, sym) for s in PHI]


def phi(p):
    return np.stack([np.arctan(p[..., 1] / p[..., 0]), np.log(np.hypot(p[..., 0], p[..., 1]))], -1)


def test_anchor_grid_includes_the_corners():
    g = anchor_grid([-2, 2, -2, 2], 8)
    assert g.shape == (64, 2)
    np.testing.assert_array_equal(g[0], [-2, -2])
    np.testing.assert_array_equal(g[-1], [2, 2])
    np.testing.assert_allclose(np.unique(g[:, 0]), np.linspace(-2, 2, 8))


def test_zero_field_draws_only_dots():
    zero = load_model(MODELS / "zero.json").model
    data = field_of_curves(zero, anchor_grid([-1, 1, -1, 1], 4))
    assert data.polylines == []
    assert data.dots.shape == (16, 2)


def test_gamma_e_draws_one_arc_per_anchor():
    anchors = anchor_grid([-2, 2, -2, 2], 8)
    data = field_of_curves(gamma_e(), anchors)
    assert len(data.polylines) == len(anchors)
    assert data.dots.shape == (0, 2)


def test_gamma_e_curves_are_quarter_turn_symmetric():
    anchors = anchor_grid([-2, 2, -2, 2], 8)
    data = field_of_curves(gamma_e(), anchors)
    R = np.array([[0.0, -1.0], [1.0, 0.0]])
    index = {tuple(np.round(p, 12)): k for k, p in enumerate(anchors)}
    for k, p in enumerate(anchors):
        j = index[tuple(np.round(R @ p, 12))]
        np.testing.assert_allclose(data.polylines[j], data.polylines[k] @ R.T, atol=1e-9)


def test_curves_pass_through_their_anchor():
    anchors = anchor_grid([-2, 2, -2, 2], 4)  # avoids the fixed point at the origin
    data = field_of_curves(gamma_e(), anchors, samples=21)
    assert len(data.polylines) == len(anchors)
    for line, p in zip(data.polylines, anchors):
        np.testing.assert_allclose(line[10], p)


def test_heston_ellipses_are_centred_at_the_drift_point():
    heston = load_model(MODELS / "heston.json").model
    anchors = anchor_grid([0.5, 1.5, 0.1, 1.0], 4)
    eps = 0.05
    data = ellipse_field(heston, anchors, eps=eps)
    a, _ = to_jet_field(heston).coefficients(anchors)
    np.testing.assert_allclose(data.markers, anchors + a * eps**2 / 2, atol=1e-15)
    for line, c in zip(data.polylines, data.markers):
        np.testing.assert_allclose(line[:-1].mean(axis=0), c, atol=1e-12)


def test_ellipse_axes_follow_the_diffusion():
    m = SdeModel.build("diag", "ito", ("x1", "x2"), ("u1", "u2"), [0, 0],
                       drift=["0", "0"], diffusion=[["2", "0"], ["0", "1"]])
    data = ellipse_field(m, np.zeros((1, 2)), eps=0.1)
    line = data.polylines[0]
    assert np.abs(line[:, 0]).max() == pytest.approx(0.2)
    assert np.abs(line[:, 1]).max() == pytest.approx(0.1, rel=1e-3)


def test_ellipses_need_two_drivers():
    with pytest.raises(UnsupportedPlot):
        ellipse_field(gamma_e(), np.zeros((1, 2)) + 1)


def test_field_plots_need_a_planar_state():
    m = SdeModel.build("s", "ito", ("x",), ("u1",), [0], drift=["0"], diffusion=[["1"]])
    with pytest.raises(UnsupportedPlot):
        field_of_curves(m, np.zeros((1, 1)))


def test_pushforward_plot_commutes_with_the_map():
    anchors = anchor_grid([0.5, 2.0, -1.0, 1.0], 4)
    base = field_of_curves(gamma_e(), anchors)
    moved = field_of_curves(PushforwardField(to_jet_field(gamma_e()), phi_exprs()), anchors)
    np.testing.assert_allclose(moved.anchors, phi(anchors), atol=1e-12)
    # the drawn curves agree with the mapped curves up to third order in s
    errs = []
    for eps in (0.1, 0.05):
        b = field_of_curves(gamma_e(), anchors, eps=eps)
        m = field_of_curves(PushforwardField(to_jet_field(gamma_e()), phi_exprs()), anchors, eps=eps)
        errs.append(max(np.abs(phi(lb) - lm).max() for lb, lm in zip(b.polylines, m.polylines)))
    assert 6.0 < errs[0] / errs[1] < 10.0
    assert len(base.polylines) == len(moved.polylines)


def test_fan_plot_groups_rows_by_alpha():
    m = SdeModel.build("gbm", "ito", ("S",), ("u1",), [1.0], drift=["0"], diffusion=[["0.2*S"]])
    rows = fan_curves(m, 1.0, [0.1, 0.5, 0.9], [0.0, 0.005, 0.01])
    data = fan_plot(rows)
    assert len(data.polylines) == 3
    np.testing.assert_allclose(data.polylines[1][:, 1], 1.0)


def test_trajectory_plot_drops_non_finite_points():
    paths = np.zeros((2, 4, 2))
    paths[1, 2:] = np.nan
    data = trajectory_plot(paths)
    assert [len(p) for p in data.polylines] == [4, 2]
    with pytest.raises(UnsupportedPlot):
        trajectory_plot(np.zeros((1, 3, 3)))
    with pytest.raises(UnsupportedPlot):
        trajectory_plot(np.zeros((1, 3, 1)))


def test_svg_is_deterministic_and_well_formed():
    import xml.etree.ElementTree as ET

    data = field_of_curves(gamma_e(), anchor_grid([-2, 2, -2, 2], 8))
    a = render_svg(data)
    b = render_svg(field_of_curves(gamma_e(), anchor_grid([-2, 2, -2, 2], 8)))
    assert a == b
    root = ET.fromstring(a)
    ns = "{http://www.w3.org/2000/svg}"
    assert len(root.findall(f".//{ns}polyline")) == 64
    assert "-0.000" not in a


def test_empty_plot_renders():
    svg = render_svg(PlotData(kind="empty"))
    assert svg.startswith("<svg") and svg.endswith("</svg>\n")


def test_star_markers_for_ellipses():
    heston = load_model(MODELS / "heston.json").model
    svg = render_svg(ellipse_field(heston, anchor_grid([0.5, 1.5, 0.1, 1.0], 3)))
    assert svg.count("<path ") == 9
