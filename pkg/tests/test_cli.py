from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np
import pytest

from jetsde.cli import main

MODELS = Path(__file__).resolve().parents[1] / "models"


def model(name: str) -> str:
    return str(MODELS / f"{name}.json")


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def table(text: str):
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    rows = list(csv.reader(lines))
    header = rows[0]
    return header, np.array([[float(v) for v in r] for r in rows[1:]])


def write_model(tmp_path, doc, name="m.json"):
    path = tmp_path / name
    path.write_text(json.dumps({"format_version": 1, "n": len(doc["states"]), **doc}))
    return str(path)


# exit codes ---------------------------------------------------------------------------


def test_success_writes_csv(capsys):
    code, out, _ = run(capsys, "simulate", model("additive"), "--steps", 8, "--paths", 2)
    assert code == 0
    assert out.startswith("# format_version=1")


@pytest.mark.parametrize(
    "argv",
    [
        ["simulate"],
        ["simulate", "x.json", "--scheme", "rk4"],
        ["simulate", "x.json", "--paths", "0"],
        ["simulate", "x.json", "--T", "-1"],
        ["plot", "x.json", "--bounds", "1", "0", "0", "1"],
        ["transform", "x.json"],
        ["frobnicate"],
    ],
)
def test_usage_errors_exit_1(capsys, argv):
    code, _, err = run(capsys, *argv)
    assert code == 1
    assert "error" in err


def test_missing_model_file_exits_2(capsys, tmp_path):
    code, _, err = run(capsys, "simulate", tmp_path / "absent.json")
    assert code == 2
    assert "cannot read" in err


def test_schema_violation_exits_2(capsys, tmp_path):
    path = write_model(tmp_path, {"name": "bad", "states": ["x"], "x0": [0.0], "form": "ito", "d": 1,
                                  "coefficients": {"a": ["0"]}})
    code, _, err = run(capsys, "simulate", path)
    assert code == 2
    assert "coefficients" in err


def test_expression_syntax_error_exits_2(capsys, tmp_path):
    path = write_model(tmp_path, {"name": "bad", "states": ["x"], "x0": [0.0], "form": "ito", "d": 1,
                                  "coefficients": {"a": ["x +"], "b": [["1"]]}})
    code, _, err = run(capsys, "simulate", path)
    assert code == 2
    assert "column" in err


def test_unknown_symbol_exits_2(capsys, tmp_path):
    path = write_model(tmp_path, {"name": "bad", "states": ["x"], "x0": [0.0], "form": "ito", "d": 1,
                                  "coefficients": {"a": ["y"], "b": [["1"]]}})
    code, _, err = run(capsys, "simulate", path)
    assert code == 2
    assert "'y'" in err


def test_invalid_json_exits_2(capsys, tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{ not json")
    assert run(capsys, "simulate", path)[0] == 2


def test_mass_divergence_exits_3(capsys, tmp_path):
    path = write_model(tmp_path, {"name": "blowup", "states": ["x"], "x0": [1.0], "form": "ito", "d": 1,
                                  "coefficients": {"a": ["x^2"], "b": [["0.01"]]}})
    code, _, err = run(capsys, "simulate", path, "--scheme", "euler", "--T", 20, "--steps", 20,
                       "--paths", 4, "--record", "final")
    assert code == 3
    assert "diverged" in err


def test_domain_error_outside_simulation_exits_3(capsys):
    code, _, err = run(capsys, "transform", model("additive"), "--pushforward", "log(x1); x2")
    assert code == 3
    assert "numerical failure" in err


def test_pushforward_fan_plot_is_unsupported(capsys):
    code, _, _ = run(capsys, "plot", model("gbm"), "--kind", "fan", "--pushforward", "log(S)")
    assert code == 1


# determinism --------------------------------------------------------------------------


def test_simulate_output_is_byte_identical(capsys, tmp_path):
    outs = []
    for k in range(2):
        out = tmp_path / f"run{k}.csv"
        assert run(capsys, "simulate", model("additive"), "--steps", 64, "--paths", 5, "--seed", 42,
                   "--out", out)[0] == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]
    other = tmp_path / "other.csv"
    run(capsys, "simulate", model("additive"), "--steps", 64, "--paths", 5, "--seed", 43, "--out", other)
    assert other.read_bytes() != outs[0]


def test_plot_output_is_byte_identical(capsys, tmp_path):
    a, b = tmp_path / "a.svg", tmp_path / "b.svg"
    for out in (a, b):
        assert run(capsys, "plot", model("gamma_e"), "--out", out)[0] == 0
    assert a.read_bytes() == b.read_bytes()


# transform ----------------------------------------------------------------------------


def test_gbm_to_stratonovich(capsys):
    code, out, _ = run(capsys, "transform", model("gbm"), "--to", "stratonovich", "--probes", 5)
    assert code == 0
    header, rows = table(out)
    assert header == ["S", "s1", "b1_1"]
    np.testing.assert_allclose(rows[:, 1], (0.05 - 0.02) * rows[:, 0], rtol=1e-12)
    np.testing.assert_allclose(rows[:, 2], 0.2 * rows[:, 0], rtol=1e-12)


def test_stratonovich_model_round_trip(capsys):
    _, out, _ = run(capsys, "transform", model("gbm_stratonovich"), "--to", "stratonovich", "--probes", 5)
    header, rows = table(out)
    np.testing.assert_allclose(rows[:, 1], 0.0, atol=1e-10)
    _, out, _ = run(capsys, "transform", model("gbm_stratonovich"), "--to", "ito", "--probes", 5)
    _, ito = table(out)
    sigma = 0.2
    np.testing.assert_allclose(ito[:, 1], 0.5 * sigma**2 * ito[:, 0], rtol=1e-12)


def test_gamma_e_polar_pushforward_table(capsys):
    code, out, _ = run(capsys, "transform", model("gamma_e"), "--pushforward",
                       "atan(x2/x1); log(sqrt(x1^2 + x2^2))", "--probes", 20, "--half-width", 0.5)
    assert code == 0
    header, rows = table(out)
    assert header == ["x1", "x2", "y1", "y2", "a1", "a2", "b1_1", "b2_1"]
    np.testing.assert_allclose(rows[:, 4:6], np.tile([0.0, 3.5], (20, 1)), atol=1e-12)
    np.testing.assert_allclose(rows[:, 6:8], np.tile([1.0, 0.0], (20, 1)), atol=1e-12)
    np.testing.assert_array_equal(rows[0, :2], [1.0, 0.0])


def test_identity_pushforward_leaves_coefficients_unchanged(capsys):
    _, out, _ = run(capsys, "transform", model("heston"), "--pushforward", "S; nu", "--probes", 6,
                    "--half-width", 0.3)
    _, push = table(out)
    _, out, _ = run(capsys, "transform", model("heston"), "--to", "ito", "--probes", 6, "--half-width", 0.3)
    _, ito = table(out)
    np.testing.assert_allclose(push[:, 2:4], push[:, :2])
    np.testing.assert_allclose(push[:, 4:], ito[:, 2:], atol=1e-14)


def test_vector_model_to_standard(capsys):
    code, out, _ = run(capsys, "transform", model("vector_pair"), "--to", "standard", "--probes", 4)
    assert code == 0
    _, rows = table(out)
    x1, x2 = rows[:, 0], rows[:, 1]
    # A + (dB) B / 2 with A = (x2/2, 0), B = (-x2, x1)
    np.testing.assert_allclose(rows[:, 2], 0.5 * x2 - 0.5 * x1, atol=1e-12)
    np.testing.assert_allclose(rows[:, 3], -0.5 * x2, atol=1e-12)
    np.testing.assert_allclose(rows[:, 4:], np.stack([-x2, x1], 1), atol=1e-12)


def test_standard_form_needs_a_vector_model(capsys):
    assert run(capsys, "transform", model("gbm"), "--to", "standard")[0] == 2


# simulation ---------------------------------------------------------------------------


def test_heston_thousand_paths_do_not_diverge(capsys):
    code, out, err = run(capsys, "simulate", model("heston"), "--T", 1, "--steps", 1000, "--paths", 1000,
                         "--record", "final")
    assert code == 0
    assert "diverged" not in err
    header, rows = table(out)
    final = rows[rows[:, 1] == 1000]
    assert len(final) == 1000
    assert np.isfinite(final[:, 3:5]).all()
    assert (final[:, 4] >= 0).all()


def test_converge_report(capsys):
    code, out, _ = run(capsys, "converge", model("gbm"), "--levels", "4:7", "--paths", 50)
    assert code == 0
    doc = json.loads(out)
    assert doc["format_version"] == 1
    assert doc["reference"].startswith("closed form")


def test_fan_curves_only(capsys):
    code, out, _ = run(capsys, "fan", model("gbm_driftless"), "--paths", 0)
    assert code == 0
    header, rows = table(out)
    assert header == ["alpha", "t", "value"]
    np.testing.assert_array_equal(rows[rows[:, 1] == 0.0][:, 2], 1.0)


def test_fan_monte_carlo(capsys, tmp_path):
    curves = tmp_path / "curves.csv"
    code, out, _ = run(capsys, "fan", model("gbm_driftless"), "--paths", 2000, "--times", "0.005,0.01",
                       "--curves", curves)
    assert code == 0
    doc = json.loads(out)
    assert doc["M"] == 2000 and len(doc["mc_quantile"]) == 2
    assert curves.read_text().startswith("# format_version=1")


def test_manifold_summary(capsys, tmp_path):
    summary = tmp_path / "s.json"
    code, out, _ = run(capsys, "manifold", model("genus2"), "--T", 0.01, "--steps", 50, "--paths", 2,
                       "--summary", summary)
    assert code == 0
    doc = json.loads(summary.read_text())
    assert set(doc) == {"format_version", "model", "paths", "steps", "T", "seed", "eps", "diverged_paths",
                        "max_abs_F"}
    assert doc["max_abs_F"] <= 1e-8 and doc["diverged_paths"] == 0


def test_metric_manifold_is_embedded(capsys, tmp_path):
    summary = tmp_path / "s.json"
    code, out, _ = run(capsys, "manifold", model("sphere_chart"), "--T", 0.1, "--steps", 16, "--paths", 3,
                       "--summary", summary)
    assert code == 0
    header, rows = table(out)
    assert header[3:6] == ["y1", "y2", "y3"]
    np.testing.assert_allclose(np.linalg.norm(rows[:, 3:6], axis=1), 1.0, atol=1e-12)
    assert json.loads(summary.read_text())["max_abs_F"] is None


def test_manifold_needs_a_manifold_block(capsys):
    assert run(capsys, "manifold", model("gbm"))[0] == 2


# plots --------------------------------------------------------------------------------


@pytest.mark.parametrize(
    "argv",
    [
        [model("gamma_e")],
        [model("gamma_e"), "--pushforward", "atan(x2/x1); log(sqrt(x1^2 + x2^2))", "--bounds", 0.5, 2, -1, 1],
        [model("heston"), "--kind", "ellipse-field", "--bounds", 0.5, 1.5, 0.1, 1.0],
        [model("gbm"), "--kind", "fan"],
    ],
)
def test_plot_kinds(capsys, argv):
    code, out, _ = run(capsys, "plot", *argv)
    assert code == 0
    assert out.startswith("<svg") and out.rstrip().endswith("</svg>")


def test_trajectory_plot_from_csv(capsys, tmp_path):
    traj = tmp_path / "t.csv"
    run(capsys, "simulate", model("gamma_e"), "--steps", 32, "--paths", 3, "--T", 0.5, "--out", traj)
    code, out, _ = run(capsys, "plot", traj, "--kind", "trajectory")
    assert code == 0
    assert out.count("<polyline") == 3


def test_scalar_trajectory_plot(capsys, tmp_path):
    traj = tmp_path / "t.csv"
    run(capsys, "simulate", model("gbm"), "--steps", 16, "--paths", 2, "--out", traj)
    code, out, _ = run(capsys, "plot", traj, "--kind", "trajectory")
    assert code == 0
    assert out.count("<polyline") == 2
    assert io.StringIO(out).readline().startswith("<svg")


def test_fine_steps_share_one_noise_path(capsys):
    finals = {}
    for steps in (32, 2048):
        _, out, _ = run(capsys, "simulate", model("gamma_e"), "--T", 0.2, "--steps", steps, "--fine-steps", 2048,
                        "--paths", 1, "--seed", 1, "--record", "final")
        finals[steps] = table(out)[1][-1, 3:5]
    _, out, _ = run(capsys, "simulate", model("gamma_e"), "--T", 0.2, "--steps", 2048, "--paths", 1, "--seed", 1,
                    "--record", "final")
    np.testing.assert_array_equal(finals[2048], table(out)[1][-1, 3:5])
    assert not np.array_equal(finals[32], finals[2048])
    assert np.linalg.norm(finals[32] - finals[2048]) < 2.0


def test_fine_steps_must_refine_dyadically(capsys):
    assert run(capsys, "simulate", model("gamma_e"), "--steps", 32, "--fine-steps", 48)[0] == 1
    assert run(capsys, "simulate", model("gamma_e"), "--steps", 32, "--fine-steps", 16)[0] == 1


def test_trajectory_projection(capsys, tmp_path):
    traj = tmp_path / "t.csv"
    run(capsys, "manifold", model("sphere"), "--steps", 8, "--paths", 2, "--T", 0.1, "--out", traj)
    assert run(capsys, "plot", traj, "--kind", "trajectory")[0] == 1
    code, out, _ = run(capsys, "plot", traj, "--kind", "trajectory", "--coords", "1,3")
    assert code == 0 and out.count("<polyline") == 2
    assert run(capsys, "plot", traj, "--kind", "trajectory", "--coords", "1,4")[0] == 1
