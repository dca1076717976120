"""Command-line front end.

Exit codes: 0 success, 1 usage error, 2 model or schema error, 3 numerical
failure (more than half of the paths diverged, or a domain error outside
path simulation).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .dsl import Expr, SymbolTable
from .errors import (
    ArityError,
    AtlasError,
    ConfigError,
    DomainError,
    ExprSyntaxError,
    MetricError,
    ModelError,
    ShapeError,
    UnknownSymbol,
    UnsupportedPlot,
)
from .manifolds import ChartedManifold, brownian_field, clamp_jet, simulate_manifold_bm
from .modelfile import FORMAT_VERSION, ModelFile, load_model
from .models import (
    PushforwardField,
    default_probes,
    ito_to_strat,
    stratonovich_coefficients,
    strat_to_ito,
    to_jet_field,
    vector_to_standard,
)
from .plotting import (
    DEFAULT_CURVE_EPS,
    DEFAULT_ELLIPSE_EPS,
    anchor_grid,
    ellipse_field,
    fan_plot,
    field_of_curves,
    render_svg,
    trajectory_plot,
)
from .quantiles import PercentileSpec, fan_csv, fan_curves, mc_percentiles
from .schemes import convergence_study, sample_grid, simulate_2jet, simulate_euler

EXIT_OK, EXIT_USAGE, EXIT_MODEL, EXIT_NUMERIC = 0, 1, 2, 3
MODEL_ERRORS = (ConfigError, ModelError, ExprSyntaxError, UnknownSymbol, ArityError, MetricError, ShapeError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _levels(text: str) -> list[int]:
    """'6:12' means 2^6 .. 2^12 steps; otherwise a comma-separated list of step counts."""
    try:
        if ":" in text:
            lo, hi = (int(v) for v in text.split(":"))
            return [2**k for k in range(lo, hi + 1)]
        return [int(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad level list {text!r}") from None


def _record(text: str):
    if text in ("all", "final"):
        return text
    try:
        return int(text)
    except ValueError:
        raise argparse.ArgumentTypeError("record must be 'all', 'final' or a stride") from None


def _write(text: str, out: str | None) -> None:
    if out is None or out == "-":
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _need_model(mf: ModelFile):
    if mf.model is None:
        raise ConfigError(f"{mf.name!r} has no SDE coefficients (manifold-only file); use 'manifold'")
    return mf.model


def _divergence_check(n_bad: int, total: int) -> int:
    if n_bad:
        print(f"warning: {n_bad} of {total} paths diverged", file=sys.stderr)
    return EXIT_NUMERIC if n_bad * 2 > total else EXIT_OK


# subcommands ------------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    mf = load_model(args.model)
    model = _need_model(mf)
    fine = args.fine_steps or args.steps
    if fine < args.steps or fine % args.steps or (fine // args.steps) & (fine // args.steps - 1):
        raise UsageError("--fine-steps must be a power-of-two multiple of --steps")
    grid = sample_grid(args.seed, model.d, args.T, fine, args.paths)
    sim = simulate_2jet if args.scheme == "2jet" else simulate_euler
    kwargs = {"dense": args.dense} if args.scheme == "2jet" else {}
    ts = sim(to_jet_field(model), grid, model.x0, args.steps, record=args.record, **kwargs)
    _write(ts.to_csv(), args.out)
    return _divergence_check(ts.n_diverged, args.paths)


def cmd_converge(args) -> int:
    mf = load_model(args.model)
    model = _need_model(mf)
    reference = args.reference or ("closed-form" if model.closed_form else "finest-2jet")
    rep = convergence_study(
        model, args.levels, args.paths, reference, seed=args.seed, T=args.T, scheme=args.scheme
    )
    _write(rep.to_json() + "\n", args.out)
    return _divergence_check(rep.diverged, args.paths)


def _table(header, rows) -> str:
    out = io.StringIO()
    out.write(f"# format_version={FORMAT_VERSION}\n")
    w = csv.writer(out, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(v)) for v in r])
    return out.getvalue()


def _coef_table(states, probes, a, b, prefix=("a", "b")) -> str:
    n, d = b.shape[-2], b.shape[-1]
    header = list(states) + [f"{prefix[0]}{i + 1}" for i in range(n)]
    header += [f"{prefix[1]}{i + 1}_{k + 1}" for i in range(n) for k in range(d)]
    rows = [list(p) + list(ai) + list(bi.ravel()) for p, ai, bi in zip(probes, a, b)]
    return _table(header, rows)


def cmd_transform(args) -> int:
    mf = load_model(args.model)
    model = _need_model(mf)
    probes = default_probes(model.x0, count=args.probes, half_width=args.half_width, seed=args.seed)
    if args.pushforward:
        sym = SymbolTable(model.states, (), model.symbols.time, model.symbols.constants)
        maps = [Expr(s.strip(), sym) for s in args.pushforward.split(";") if s.strip()]
        field = PushforwardField(to_jet_field(model), maps)
        jet = field(probes)
        from .jetcore import extract_ab

        a, b = extract_ab(jet)
        header = list(model.states) + [f"y{i + 1}" for i in range(len(maps))]
        header += [f"a{i + 1}" for i in range(len(maps))]
        header += [f"b{i + 1}_{k + 1}" for i in range(len(maps)) for k in range(model.d)]
        rows = [list(p) + list(v) + list(ai) + list(bi.ravel()) for p, v, ai, bi in zip(probes, jet.value, a, b)]
        _write(_table(header, rows), args.out)
        return EXIT_OK
    to = args.to
    if to == "ito":
        a, b = to_jet_field(model).coefficients(probes)
        text = _coef_table(model.states, probes, a, b)
    elif to == "stratonovich":
        if model.form == "stratonovich":
            # through the Ito form and back, so the table exercises both conversions
            back = ito_to_strat(strat_to_ito(model))
            env = back.env(probes, 0.0)
            a = np.stack([np.broadcast_to(np.asarray(c.eval_real(env), float), (len(probes),)) for c in back.drift], -1)
            _, b = to_jet_field(model).coefficients(probes)
        else:
            a, b = stratonovich_coefficients(model, probes)
        text = _coef_table(model.states, probes, a, b, ("s", "b"))
    else:
        if model.form != "vector":
            raise ConfigError("--to standard applies to vector-form models only")
        a, b = to_jet_field(vector_to_standard(model)).coefficients(probes)
        text = _coef_table(model.states, probes, a, b)
    _write(text, args.out)
    return EXIT_OK


def cmd_fan(args) -> int:
    mf = load_model(args.model)
    model = _need_model(mf)
    rows = fan_curves(model, model.x0, args.alphas, [0.0] + list(args.times))
    if args.curves:
        _write(fan_csv(rows), args.curves)
    if args.paths > 0:
        spec = PercentileSpec(model, args.alphas, args.times, M=args.paths, dt=args.dt, antithetic=args.antithetic)
        rep = mc_percentiles(spec, seed=args.seed)
        _write(rep.to_json() + "\n", args.out)
        return _divergence_check(rep.diverged, args.paths)
    if not args.curves:
        _write(fan_csv(rows), args.out)
    return EXIT_OK


def _manifold_summary(mf: ModelFile, ts, max_residual, eps) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "model": mf.name,
        "paths": int(ts.paths.shape[0]),
        "steps": int(ts.level),
        "T": float(ts.times[-1]),
        "seed": int(ts.seed),
        "eps": eps,
        "diverged_paths": ts.n_diverged,
        "max_abs_F": max_residual,
    }


def cmd_manifold(args) -> int:
    mf = load_model(args.model)
    if not mf.is_manifold:
        raise ConfigError(f"{mf.name!r} has no manifold block")
    eps = args.eps if args.eps is not None else mf.eps
    if mf.surface is not None:
        m = mf.surface.dim - 1
        grid = sample_grid(args.seed, m, args.T, args.steps, args.paths)
        ts = simulate_manifold_bm(ChartedManifold(mf.surface), mf.x0, grid, args.steps, eps=eps, record=args.record)
        vals = np.abs(mf.surface.value(ts.paths))
        finite = vals[np.isfinite(vals)]
        residual = float(finite.max()) if finite.size else None
    else:
        grid = sample_grid(args.seed, mf.metric.m, args.T, args.steps, args.paths)
        field = clamp_jet(brownian_field(mf.metric), eps)
        ts = simulate_2jet(field, grid, mf.x0, args.steps, record=args.record)
        residual = None
        if mf.embedding:
            env = {n: ts.paths[..., i] for i, n in enumerate(mf.metric.names)}
            env["t"] = 0.0
            amb = np.stack([np.broadcast_to(np.asarray(e.eval_real(env), float), ts.paths.shape[:-1]) for e in mf.embedding], -1)
            ts.paths = amb
            ts.states = tuple(f"y{i + 1}" for i in range(amb.shape[-1]))
    _write(ts.to_csv(), args.out)
    if args.summary:
        _write(_dumps(_manifold_summary(mf, ts, residual, eps)), args.summary)
    return _divergence_check(ts.n_diverged, args.paths)


def _read_trajectory_csv(path: str):
    rows = [r for r in csv.reader(l for l in Path(path).read_text().splitlines() if not l.startswith("#"))]
    header, body = rows[0], rows[1:]
    states = header[3:-1]
    data = {}
    times = {}
    for r in body:
        p, step = int(r[0]), float(r[1])
        data.setdefault(p, []).append([float(v) for v in r[3 : 3 + len(states)]])
        times[step] = float(r[2])
    paths = np.array([data[p] for p in sorted(data)])
    return paths, np.array([times[s] for s in sorted(times)])


def cmd_plot(args) -> int:
    kind = args.kind
    if kind == "trajectory":
        paths, times = _read_trajectory_csv(args.input)
        if args.coords:
            idx = [int(c) - 1 for c in args.coords]
            if any(not 0 <= i < paths.shape[-1] for i in idx):
                raise UsageError(f"--coords must lie in 1..{paths.shape[-1]}")
            paths = paths[..., idx]
        data = trajectory_plot(paths, times)
    else:
        mf = load_model(args.input)
        model = _need_model(mf)
        field = to_jet_field(model)
        if args.pushforward:
            sym = SymbolTable(model.states, (), model.symbols.time, model.symbols.constants)
            maps = [Expr(s.strip(), sym) for s in args.pushforward.split(";") if s.strip()]
            field = PushforwardField(field, maps)
        if kind == "fan":
            if args.pushforward:
                raise UnsupportedPlot("fan plots of pushforward fields are not supported")
            rows = fan_curves(model, model.x0, args.alphas, np.linspace(0.0, args.tmax, args.grid + 1))
            data = fan_plot(rows)
        else:
            anchors = anchor_grid(args.bounds, args.grid)
            if kind == "field-of-curves":
                data = field_of_curves(field, anchors, args.eps or DEFAULT_CURVE_EPS)
            else:
                data = ellipse_field(field, anchors, args.eps or DEFAULT_ELLIPSE_EPS)
        data.title = mf.name
    _write(render_svg(data, args.width, args.height), args.out)
    return EXIT_OK


# parser -----------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="jetsde", description="SDEs as fields of 2-jets.")
    p.add_argument("--version", action="version", version=f"jetsde {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="simulate paths (CSV)")
    s.add_argument("model")
    s.add_argument("--scheme", choices=["2jet", "euler"], default="2jet")
    s.add_argument("--T", type=float, default=1.0)
    s.add_argument("--steps", type=int, default=1024)
    s.add_argument("--paths", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--record", type=_record, default="all")
    s.add_argument("--dense", type=int, default=1, help="points per step (2-jet interpolation)")
    s.add_argument("--fine-steps", type=int, help="sample the noise on this finer grid and sum it down (same path for every --steps)")
    s.add_argument("--out")
    s.set_defaults(func=cmd_simulate)

    c = sub.add_parser("converge", help="strong convergence study (JSON)")
    c.add_argument("model")
    c.add_argument("--levels", type=_levels, default=_levels("6:12"))
    c.add_argument("--paths", type=int, default=1000)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--T", type=float, default=1.0)
    c.add_argument("--scheme", choices=["2jet", "euler"], default="2jet")
    c.add_argument("--reference", choices=["finest-2jet", "finest-euler", "closed-form"])
    c.add_argument("--out")
    c.set_defaults(func=cmd_converge)

    t = sub.add_parser("transform", help="coefficients after conversion or pushforward (CSV table)")
    t.add_argument("model")
    g = t.add_mutually_exclusive_group(required=True)
    g.add_argument("--to", choices=["ito", "stratonovich", "standard"])
    g.add_argument("--pushforward", help="map components separated by ';'")
    t.add_argument("--probes", type=int, default=20)
    t.add_argument("--half-width", type=float, default=1.0)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out")
    t.set_defaults(func=cmd_transform)

    f = sub.add_parser("fan", help="percentile fan: expansion, Monte Carlo and curves")
    f.add_argument("model")
    f.add_argument("--alphas", type=_floats, default=_floats("0.158655253931457,0.5,0.841344746068543"))
    f.add_argument("--times", type=_floats, default=_floats("0.0025,0.005,0.0075,0.01"))
    f.add_argument("--paths", type=int, default=100_000)
    f.add_argument("--dt", type=float, default=2.0**-14)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--antithetic", action="store_true")
    f.add_argument("--out", help="FanReport JSON (or curves CSV when --paths 0)")
    f.add_argument("--curves", help="fan-curve CSV")
    f.set_defaults(func=cmd_fan)

    m = sub.add_parser("manifold", help="Brownian motion on a charted manifold (CSV)")
    m.add_argument("model")
    m.add_argument("--T", type=float, default=1.0)
    m.add_argument("--steps", type=int, default=1000)
    m.add_argument("--paths", type=int, default=1)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--eps", type=float)
    m.add_argument("--record", type=_record, default="all")
    m.add_argument("--out")
    m.add_argument("--summary", help="summary JSON with the max |F| residual")
    m.set_defaults(func=cmd_manifold)

    pl = sub.add_parser("plot", help="SVG drawing of a model or trajectory CSV")
    pl.add_argument("input")
    pl.add_argument("--kind", choices=["field-of-curves", "ellipse-field", "fan", "trajectory"], default="field-of-curves")
    pl.add_argument("--bounds", type=float, nargs=4, default=[-2.0, 2.0, -2.0, 2.0], metavar=("X0", "X1", "Y0", "Y1"))
    pl.add_argument("--grid", type=int, default=8)
    pl.add_argument("--eps", type=float)
    pl.add_argument("--pushforward")
    pl.add_argument("--coords", type=lambda v: [int(c) for c in v.split(",")], help="trajectory columns to draw, e.g. 1,2")
    pl.add_argument("--alphas", type=_floats, default=_floats("0.158655253931457,0.5,0.841344746068543"))
    pl.add_argument("--tmax", type=float, default=0.01)
    pl.add_argument("--width", type=int, default=600)
    pl.add_argument("--height", type=int, default=600)
    pl.add_argument("--out")
    pl.set_defaults(func=cmd_plot)
    return p


def _validate(args) -> None:
    for name in ("paths", "steps", "probes", "grid"):
        v = getattr(args, name, None)
        if v is not None and v < (0 if name == "paths" and args.command == "fan" else 1):
            raise UsageError(f"--{name} must be positive")
    for name in ("T", "eps", "dt", "tmax"):
        v = getattr(args, name, None)
        if v is not None and not (v > 0 and math.isfinite(v)):
            raise UsageError(f"--{name} must be a positive number")
    bounds = getattr(args, "bounds", None)
    if bounds is not None and (len(bounds) != 4 or bounds[0] >= bounds[1] or bounds[2] >= bounds[3]):
        raise UsageError("--bounds needs x0,x1,y0,y1 with x0 < x1 and y0 < y1")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _validate(args)
        return args.func(args)
    except UsageError as exc:
        print(f"jetsde: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except UnsupportedPlot as exc:
        print(f"jetsde: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MODEL_ERRORS as exc:
        print(f"jetsde: model error: {exc}", file=sys.stderr)
        return EXIT_MODEL
    except (DomainError, AtlasError, FloatingPointError) as exc:
        print(f"jetsde: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
