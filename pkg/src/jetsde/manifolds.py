"""Brownian motion on Riemannian manifolds through charts.

In a chart with metric g the Brownian jet has first-order part b = chol(g^-1)
and drift a^i = (1 / (2 sqrt|g|)) d_j(sqrt|g| g^ij), spread evenly over the
Hessian diagonal.  Surfaces given implicitly by F(y) = 0 are covered by graph
charts: one ambient coordinate is solved for from the others, the metric is
the induced one and every simulated point is put back on the surface by a
1-D root find.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import brentq

from ._domain import is_lenient, lenient
from .dsl import Expr, SymbolTable, jet_of_map
from .errors import AtlasError, ConfigError, MetricError
from .jetcore import Jet2, JetPoint, canonical_jet, pack
from .models import JetField
from .schemes import PATH_CHUNK, BrownianGrid, TrajectorySet

SOLVE_TOL = 1e-12
ACCEPT_TOL = 1e-10


# metrics --------------------------------------------------------------------------


class MetricField:
    """x -> (g, dg) with g (..., m, m) and dg[..., k, i, j] = d_k g_ij."""

    def __init__(self, m: int, fn, names: Sequence[str] | None = None):
        self.m = m
        self._fn = fn
        self.names = tuple(names) if names else tuple(f"x{i + 1}" for i in range(m))

    @classmethod
    def from_exprs(cls, entries, names: Sequence[str], constants=None) -> "MetricField":
        m = len(names)
        if len(entries) != m or any(len(row) != m for row in entries):
            raise MetricError(f"metric must be a {m}x{m} matrix of expressions")
        symbols = SymbolTable(tuple(names), (), "t", dict(constants or {}))
        flat = [e if isinstance(e, Expr) else Expr(e, symbols) for row in entries for e in row]

        def fn(x):
            x = np.asarray(x, dtype=float)
            jp = jet_of_map(flat, names, x, {"t": 0.0})
            batch = x.shape[:-1]
            g = jp.value.reshape(batch + (m, m))
            dg = np.moveaxis(jp.grad.reshape(batch + (m, m, m)), -1, -3)
            return g, dg

        return cls(m, fn, names)

    def __call__(self, x):
        g, dg = self._fn(np.asarray(x, dtype=float))
        scale = np.maximum(1.0, np.abs(g).max(axis=(-2, -1)))
        asym = np.abs(g - np.swapaxes(g, -1, -2)).max(axis=(-2, -1))
        if np.any(asym > 1e-12 * scale):
            raise MetricError("metric is not symmetric")
        return g, dg


def _cholesky(ginv: np.ndarray, x: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(ginv)
    except np.linalg.LinAlgError:
        pass
    flat = ginv.reshape((-1,) + ginv.shape[-2:])
    xs = np.asarray(x).reshape((-1, x.shape[-1]))
    out = np.full_like(flat, np.nan)
    for i, mat in enumerate(flat):
        try:
            out[i] = np.linalg.cholesky(mat)
        except np.linalg.LinAlgError:
            if not is_lenient():
                raise MetricError(f"metric is not positive definite at x = {xs[i].tolist()}") from None
    return out.reshape(ginv.shape)


def brownian_coefficients(g: np.ndarray, dg: np.ndarray, x=None) -> tuple[np.ndarray, np.ndarray]:
    """(a, b) of Brownian motion for metric values g and derivatives dg.

    a^i = 1/2 sum_j [ 1/2 tr(g^-1 d_j g) g^ij - (g^-1 (d_j g) g^-1)^ij ],
    b b^T = g^-1 with b lower triangular.
    """
    g = np.asarray(g, dtype=float)
    x = np.zeros(g.shape[:-1]) if x is None else np.asarray(x)
    try:
        ginv = np.linalg.inv(g)
    except np.linalg.LinAlgError:
        if not is_lenient():
            raise MetricError("metric is singular") from None
        ginv = np.full_like(g, np.nan)
    ginv = 0.5 * (ginv + np.swapaxes(ginv, -1, -2))
    b = _cholesky(ginv, x)
    # m[..., j, :, :] = g^-1 d_j g
    m_ = np.einsum("...ik,...jkl->...jil", ginv, dg)
    half_logdet = 0.5 * np.trace(m_, axis1=-2, axis2=-1)  # d_j log sqrt|g|
    dginv = -np.einsum("...jik,...kl->...jil", m_, ginv)  # d_j g^-1
    a = 0.5 * (
        np.einsum("...j,...ij->...i", half_logdet, ginv)
        + np.einsum("...jij->...i", dginv)
    )
    return a, b


def brownian_jet(metric: MetricField, x) -> JetPoint:
    """Canonical 2-jet of Brownian motion for ``metric`` at chart point(s) ``x``."""
    x = np.asarray(x, dtype=float)
    g, dg = metric(x)
    a, b = brownian_coefficients(g, dg, x)
    return canonical_jet(a, b, x)


def brownian_field(metric: MetricField, name: str = "brownian motion") -> JetField:
    def ab_fn(x, t):
        g, dg = metric(x)
        return brownian_coefficients(g, dg, x)

    return JetField(metric.m, metric.m, ab_fn=ab_fn, states=metric.names, name=name)


# implicit surfaces and graph charts --------------------------------------------------


class ImplicitSurface:
    """Hypersurface F(y) = 0 in R^{m+1}."""

    def __init__(self, F: str | Expr, names: Sequence[str] | None = None, constants=None,
                 radius: float = 3.0, name: str = "surface"):
        if isinstance(F, Expr):
            self.F = F
            self.names = F.symbols.states
        else:
            names = tuple(names or ("y1", "y2", "y3"))
            self.F = Expr(F, SymbolTable(names, (), "t", dict(constants or {})))
            self.names = names
        self.dim = len(self.names)
        self.radius = radius
        self.name = name

    def value(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        env = {n: y[..., i] for i, n in enumerate(self.names)}
        env["t"] = 0.0
        return np.broadcast_to(np.asarray(self.F.eval_real(env), float), y.shape[:-1]).copy()

    def derivs(self, y):
        """(F, grad F, Hess F) at y; shapes batch, batch+(D,), batch+(D,D)."""
        jp = jet_of_map([self.F], self.names, np.asarray(y, dtype=float), {"t": 0.0})
        return jp.value[..., 0], jp.grad[..., 0, :], jp.hess_matrix()[..., 0, :, :]

    def axis_derivative(self, y, axis: int):
        """F and dF/dy_axis with a one-variable jet (cheap, for Newton)."""
        y = np.asarray(y, dtype=float)
        env = {}
        for i, n in enumerate(self.names):
            if i == axis:
                env[n] = Jet2.variable(y[..., i], 0, 1)
            else:
                env[n] = Jet2.constant(y[..., i], 1)
        env["t"] = 0.0
        j = self.F.eval_jet(env)
        return j.value, j.grad[..., 0]


@dataclass(frozen=True)
class Chart:
    """Graph chart solving ambient coordinate ``axis`` from the others.

    ``sign`` records the side of the coordinate plane the chart was selected
    on.  Several roots of F can lie on one side (the genus-2 surface has up to
    four along the first axis); the branch is fixed by continuation: solves
    start from a guess (the current point) and must keep the sign of
    dF/dy_axis, which is what separates neighbouring roots.
    """

    surface: ImplicitSurface
    axis: int
    sign: int

    @property
    def free(self) -> tuple[int, ...]:
        return tuple(i for i in range(self.surface.dim) if i != self.axis)

    @property
    def label(self) -> str:
        return f"{self.surface.names[self.axis]}{'+' if self.sign > 0 else '-'}"

    def _ambient(self, v, s):
        v = np.asarray(v, dtype=float)
        s = np.asarray(s, dtype=float)
        y = np.empty(v.shape[:-1] + (self.surface.dim,))
        y[..., list(self.free)] = v
        y[..., self.axis] = s
        return y

    def _initial_guess(self, v) -> np.ndarray:
        """Outermost root on this chart's side, found by scanning the half-line."""
        v = np.atleast_2d(np.asarray(v, dtype=float))
        grid = np.linspace(0.0, self.surface.radius, 2049) * self.sign
        out = np.full(len(v), np.nan)
        for p in range(len(v)):
            ys = self._ambient(np.broadcast_to(v[p], (grid.size, v.shape[1])), grid)
            with lenient():
                f = self.surface.value(ys)
            change = np.nonzero(np.sign(f[:-1]) * np.sign(f[1:]) <= 0)[0]
            if change.size:
                k = change[-1]
                out[p] = 0.5 * (grid[k] + grid[k + 1])
        return out

    def solve(self, v, guess=None, branch=None):
        """Ambient points over free coordinates ``v``; returns (y, ok).

        ``guess`` seeds the root search (continuation); ``branch`` is the
        required sign of dF/dy_axis at the root.  Without a guess the
        outermost root on the chart's side is used.
        """
        v = np.asarray(v, dtype=float)
        single = v.ndim == 1
        v = np.atleast_2d(v)
        if guess is None:
            s = self._initial_guess(v)
        else:
            s = np.broadcast_to(np.asarray(guess, dtype=float), (len(v),)).copy()
        with lenient():
            s, ok = self._newton(v, s, branch)
            for p in np.nonzero(~ok & np.isfinite(s))[0]:
                b = None if branch is None else np.broadcast_to(branch, (len(v),))[p]
                s[p], ok[p] = self._bracketed(v[p], s[p], b)
        y = self._ambient(v, s)
        y[~ok] = np.nan
        return (y[0], bool(ok[0])) if single else (y, ok)

    def _newton(self, v, s0, branch):
        surf = self.surface
        s = s0.copy()
        fs = np.full(s.shape, np.nan)
        dfs = np.full(s.shape, np.nan)
        stale = np.ones(s.shape, dtype=bool)  # s moved since fs/dfs were computed
        active = np.isfinite(s)
        for _ in range(40):
            if not active.any():
                break
            idx = np.nonzero(active)[0]
            f, df = surf.axis_derivative(self._ambient(v[idx], s[idx]), self.axis)
            fs[idx], dfs[idx], stale[idx] = f, df, False
            upd = np.abs(f) > SOLVE_TOL
            step = np.where(df != 0, f / np.where(df != 0, df, 1.0), np.nan)
            step = np.clip(step, -0.1, 0.1)
            s[idx[upd]] -= step[upd]
            stale[idx[upd]] = True
            still = upd & np.isfinite(step) & (np.abs(step) > 1e-16 * np.maximum(1.0, np.abs(s[idx])))
            active[idx] = still
        redo = np.nonzero(stale & np.isfinite(s))[0]
        if redo.size:
            fs[redo], dfs[redo] = surf.axis_derivative(self._ambient(v[redo], s[redo]), self.axis)
        ok = np.isfinite(fs) & (np.abs(fs) <= ACCEPT_TOL) & (dfs != 0)
        ok &= np.abs(s - s0) <= 0.5
        if branch is not None:
            ok &= np.sign(dfs) == np.sign(branch)
        return s, ok

    def _bracketed(self, v, s0, branch):
        """Expand a bracket around ``s0`` then bisect (Brent); the nearest sign change wins."""

        def f(s):
            return float(self.surface.value(self._ambient(v, s)))

        f0 = f(s0)
        if f0 == 0.0:
            return s0, True
        for k in range(14):
            h = 1e-4 * 2**k
            for cand in (s0 - h, s0 + h):
                fc = f(cand)
                if np.isfinite(fc) and np.sign(fc) != np.sign(f0):
                    lo, hi = sorted((s0, cand))
                    root = brentq(f, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps)
                    _, df = self.surface.axis_derivative(self._ambient(v, root), self.axis)
                    ok = abs(f(root)) <= ACCEPT_TOL and (branch is None or np.sign(df) == np.sign(branch))
                    return root, bool(ok)
        return s0, False

    def embedding_jet(self, y, derivs=None) -> JetPoint:
        """2-jet of the chart map v -> Y(v) (free coordinates to ambient) at ambient y."""
        y = np.asarray(y, dtype=float)
        _, grad, hess = self.surface.derivs(y) if derivs is None else derivs
        free = list(self.free)
        m = len(free)
        Fh = grad[..., self.axis]
        Fi = grad[..., free]
        h1 = -Fi / Fh[..., None]
        Hff = hess[..., free, :][..., :, free]
        Hfh = hess[..., free, self.axis]
        Hhh = hess[..., self.axis, self.axis]
        h2 = -(
            Hff
            + Hfh[..., :, None] * h1[..., None, :]
            + h1[..., :, None] * Hfh[..., None, :]
            + Hhh[..., None, None] * h1[..., :, None] * h1[..., None, :]
        ) / Fh[..., None, None]
        batch = y.shape[:-1]
        D = self.surface.dim
        grad_out = np.zeros(batch + (D, m))
        hess_out = np.zeros(batch + (D, m, m))
        for j, i in enumerate(free):
            grad_out[..., i, j] = 1.0
        grad_out[..., self.axis, :] = h1
        hess_out[..., self.axis, :, :] = h2
        return JetPoint(y.copy(), grad_out, pack(hess_out))

    def metric_at(self, y, emb: JetPoint | None = None):
        """Induced metric g = I + dh dh^T and its derivatives at ambient y."""
        emb = self.embedding_jet(y) if emb is None else emb
        h1 = emb.grad[..., self.axis, :]
        h2 = emb.hess_matrix()[..., self.axis, :, :]
        m = h1.shape[-1]
        g = np.eye(m) + h1[..., :, None] * h1[..., None, :]
        dg = h2[..., :, :, None] * h1[..., None, None, :] + h1[..., None, :, None] * h2[..., :, None, :]
        # dg[..., k, i, j] = h_ki h_j + h_i h_kj
        return g, dg

    def metric(self, guess_point=None) -> MetricField:
        """Induced metric as a MetricField over this chart's free coordinates."""

        def fn(v):
            v = np.asarray(v, dtype=float)
            guess = None if guess_point is None else np.asarray(guess_point)[self.axis]
            y, ok = self.solve(v.reshape(-1, v.shape[-1]), guess=guess)
            if not np.all(ok) and not is_lenient():
                raise AtlasError(f"chart {self.label} cannot solve at {v.tolist()}")
            g, dg = self.metric_at(y)
            return g.reshape(v.shape[:-1] + g.shape[-2:]), dg.reshape(v.shape[:-1] + dg.shape[-3:])

        names = [self.surface.names[i] for i in self.free]
        return MetricField(len(self.free), fn, names)

    def ambient_coefficients(self, y):
        """Ambient (a, b) of Brownian motion at on-surface points y via this chart."""
        from .jetcore import extract_ab, pushforward

        y = np.asarray(y, dtype=float)
        g, dg = self.metric_at(y)
        v = y[..., list(self.free)]
        a, b = brownian_coefficients(g, dg, v)
        return extract_ab(pushforward(canonical_jet(a, b, v), self.embedding_jet(y)))


def build_atlas(surface: ImplicitSurface) -> list[Chart]:
    """Graph charts over every axis, both sides: (y1+, y1-, y2+, ...)."""
    return [Chart(surface, axis, sign) for axis in range(surface.dim) for sign in (1, -1)]


def _ranked_axes(grad: np.ndarray) -> np.ndarray:
    """Axes by decreasing |normal component|; stable, so ties go to the lowest index."""
    return np.argsort(-np.abs(grad), axis=-1, kind="stable")


def select_chart(atlas: Sequence[Chart], y, tol: float = 1e-8) -> Chart:
    """Chart whose axis has the largest |normal component| at y (lowest index on ties)."""
    y = np.asarray(y, dtype=float)
    surface = atlas[0].surface
    F, grad, _ = surface.derivs(y)
    if not abs(float(F)) <= tol:
        raise AtlasError(f"point {y.tolist()} is not on the surface (F = {float(F):.3g})")
    for axis in _ranked_axes(grad):
        if grad[axis] == 0:
            break
        sign = 1 if y[axis] >= 0 else -1
        for chart in atlas:
            if chart.axis == axis and chart.sign == sign:
                return chart
    raise AtlasError(f"no chart of the atlas covers {y.tolist()}")


@dataclass
class ChartedManifold:
    surface: ImplicitSurface
    charts: list[Chart] = field(default_factory=list)

    def __post_init__(self):
        if not self.charts:
            self.charts = build_atlas(self.surface)

    def select(self, y) -> Chart:
        return select_chart(self.charts, y)

    def chart(self, axis: int, sign: int) -> Chart:
        for c in self.charts:
            if c.axis == axis and c.sign == sign:
                return c
        raise AtlasError(f"atlas has no chart for axis {axis + 1}, side {sign:+d}")


# clamping ----------------------------------------------------------------------------


def clamp_radius(r, eps: float):
    """rho(r): identity on [0, eps/2], C^2 smooth, increasing, bounded by 0.95 eps.

    rho' = 1 - S((r - eps/2) / L) with S the quintic smoothstep and L = 0.9 eps,
    so rho leaves the identity at eps/2 and is constant from 1.4 eps on.
    """
    if eps <= 0:
        raise ConfigError("clamp radius must be positive")
    r = np.asarray(r, dtype=float)
    L = 0.9 * eps
    tau = np.clip((r - 0.5 * eps) / L, 0.0, 1.0)
    integral = tau - (tau**6 - 3 * tau**5 + 2.5 * tau**4)
    return np.where(r <= 0.5 * eps, r, 0.5 * eps + L * integral)


def clamp_argument(u, eps: float) -> np.ndarray:
    """u * rho(|u|) / |u| (u unchanged for |u| <= eps/2)."""
    u = np.asarray(u, dtype=float)
    r = np.sqrt(np.sum(u * u, axis=-1))
    rho = clamp_radius(r, eps)
    factor = np.where(r > 0.5 * eps, rho / np.where(r > 0, r, 1.0), 1.0)
    return u * factor[..., None]


def clamp_jet(curve, eps: float):
    """gamma~(u) = gamma(u rho(|u|)/|u|) for a curve u -> gamma(u).

    Accepts a plain callable or a JetField (clamped at each base point).  The
    2-jet at u = 0 is unchanged because rho is the identity on [0, eps/2].
    """
    if isinstance(curve, JetField):
        base = curve

        def curve_fn(x, u, t):
            return base.curve(x, clamp_argument(u, eps), t)

        return JetField(
            base.n,
            base.d,
            ab_fn=base.coefficients,
            curve_fn=curve_fn,
            states=base.states,
            floors=base.floors,
            name=f"clamped {base.name}",
        )
    return lambda u: curve(clamp_argument(u, eps))


# simulation -----------------------------------------------------------------------------


def simulate_manifold_bm(
    manifold,
    x0,
    grid: BrownianGrid,
    level: int,
    eps: float = 0.1,
    record="all",
    on_surface_tol: float = 1e-8,
) -> TrajectorySet:
    """Brownian motion on an implicit surface (ambient output) or in a metric chart.

    Implicit case, per step: pick the chart at X_k, build the Brownian jet
    there, step along its clamped canonical curve by dW_k and solve back onto
    the surface.  If the best chart fails the next-ranked axes are tried; if
    all fail the path is flagged as diverged.
    """
    from .schemes import simulate_2jet

    if isinstance(manifold, MetricField):
        return simulate_2jet(clamp_jet(brownian_field(manifold), eps), grid, x0, level, record=record)
    if isinstance(manifold, ImplicitSurface):
        manifold = ChartedManifold(manifold)
    surface = manifold.surface
    m = surface.dim - 1
    if grid.d != m:
        raise ConfigError(f"a {m}-dimensional surface needs {m} drivers, grid has {grid.d}")
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (surface.dim,):
        raise ConfigError(f"x0 needs {surface.dim} ambient coordinates")
    if not abs(float(surface.value(x0))) <= on_surface_tol:
        raise ConfigError(f"x0 is not on the surface (F = {float(surface.value(x0)):.3g})")

    from .schemes import _record_plan

    N = level
    plan = _record_plan(N, record)
    want = np.zeros(N + 1, dtype=bool)
    want[plan] = True
    slot = {int(k): j for j, k in enumerate(plan)}
    M, D = grid.M, surface.dim
    out = np.empty((M, plan.size, D))
    diverged_step = np.full(M, -1, dtype=np.int64)

    for start in range(0, M, PATH_CHUNK):
        stop = min(start + PATH_CHUNK, M)
        y = np.tile(x0, (stop - start, 1))
        out[start:stop, 0] = y
        dead = np.zeros(stop - start, dtype=bool)
        k = 0
        with lenient():
            for blk in grid.iter_increments(start, stop, N):
                for j in range(blk.shape[1]):
                    u = clamp_argument(blk[:, j], eps)
                    y = _manifold_step(manifold, y, u, dead)
                    k += 1
                    bad = ~np.isfinite(y).all(axis=1) & ~dead
                    if bad.any():
                        diverged_step[start:stop][bad] = k
                        dead |= bad
                    y[dead] = np.nan
                    if want[k]:
                        out[start:stop, slot[k]] = y
    return TrajectorySet(
        paths=out,
        times=plan * grid.dt(N),
        steps=plan,
        diverged=diverged_step >= 0,
        diverged_step=diverged_step,
        scheme="2jet-charts",
        model=surface.name,
        seed=grid.seed,
        level=N,
        states=surface.names,
    )


def _manifold_step(manifold: ChartedManifold, y, u, dead):
    surface = manifold.surface
    m = surface.dim - 1
    new = np.full_like(y, np.nan)
    live = np.nonzero(~dead)[0]
    if live.size == 0:
        return new
    F, grad, hess = surface.derivs(y[live])
    ranked = _ranked_axes(grad)
    pending = np.ones(live.size, dtype=bool)
    for rank in range(surface.dim):
        for axis in range(surface.dim):
            sel = pending & (ranked[:, rank] == axis) & (grad[np.arange(live.size), axis] != 0)
            if not sel.any():
                continue
            idx = live[sel]
            yy = y[idx]
            for sign in (1, -1):
                side = (yy[:, axis] >= 0) if sign > 0 else (yy[:, axis] < 0)
                if not side.any():
                    continue
                chart = manifold.chart(axis, sign)
                ys = yy[side]
                free = list(chart.free)
                rows_ = np.nonzero(sel)[0][side]
                emb = chart.embedding_jet(ys, (F[rows_], grad[rows_], hess[rows_]))
                g, dg = chart.metric_at(ys, emb)
                v = ys[:, free]
                a, b = brownian_coefficients(g, dg, v)
                uu = u[idx[side]]
                v_new = v + np.einsum("pia,pa->pi", b, uu) + (a / m) * np.sum(uu * uu, axis=1)[:, None]
                branch = grad[sel][side][:, axis]
                # second-order prediction of the solved coordinate seeds Newton
                guess = emb.evaluate(v_new - v)[:, axis]
                guess = np.where(np.isfinite(guess), guess, ys[:, axis])
                y_new, ok = chart.solve(v_new, guess=guess, branch=branch)
                rows = idx[side][ok]
                new[rows] = y_new[ok]
                done_local = np.nonzero(sel)[0][side][ok]
                pending[done_local] = False
        if not pending.any():
            break
    return new
