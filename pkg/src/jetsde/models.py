"""SDE models in four representations and the conversions between them.

* ``ito``          dX = a dt + b dW
* ``stratonovich`` dX = a~ dt + b o dW
* ``jet``          X_{t+dt} = gamma_X(dW), gamma given as expressions in the
  states, the drivers ``u1..ud`` and time
* ``vector``       gamma_x(t) = Phi_A^{t^2}(Phi_B^t(x)), one driver only

Every representation can be turned into a :class:`JetField`, the callable
``(x, t) -> JetPoint`` that the simulators, the generator and the plotting
code consume.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.stats import qmc

from ._domain import lenient
from .dsl import Expr, SymbolTable, jet_of_map
from .errors import ModelError, ShapeError
from .jetcore import Jet2, JetPoint, canonical_jet, extract_ab, pushforward

FORMS = ("ito", "stratonovich", "jet", "vector")


class NumericCoef:
    """Coefficient computed by Python code rather than parsed text.

    Produced by the representation conversions; only real evaluation is
    available.
    """

    __slots__ = ("fn", "note")

    def __init__(self, fn: Callable[[Mapping[str, object]], object], note: str):
        self.fn = fn
        self.note = note

    def eval_real(self, bindings):
        return self.fn(bindings)

    def __str__(self) -> str:
        return f"<numeric: {self.note}>"

    __repr__ = __str__


def _as_expr(value, symbols: SymbolTable):
    if isinstance(value, (Expr, NumericCoef)):
        return value
    return Expr(value, symbols)


@dataclass(frozen=True)
class SdeModel:
    name: str
    form: str
    symbols: SymbolTable
    x0: np.ndarray
    drift: tuple = ()
    diffusion: tuple = ()
    gamma: tuple = ()
    A: tuple = ()
    B: tuple = ()
    floors: Mapping[str, float] = field(default_factory=dict)
    closed_form: Mapping[str, object] | None = None
    note: str = ""

    def __post_init__(self):
        set_ = lambda k, v: object.__setattr__(self, k, v)  # noqa: E731
        if self.form not in FORMS:
            raise ModelError(f"unknown form {self.form!r}; expected one of {FORMS}")
        if self.symbols.d < 1:
            raise ModelError("a model needs at least one driver")
        n, d = self.symbols.n, self.symbols.d
        x0 = np.asarray(self.x0, dtype=float).reshape(-1)
        if x0.shape != (n,):
            raise ModelError(f"x0 has {x0.size} entries, expected {n}")
        set_("x0", x0)
        wrap = lambda seq: tuple(_as_expr(v, self.symbols) for v in seq)  # noqa: E731
        set_("drift", wrap(self.drift))
        set_("diffusion", tuple(wrap(row) for row in self.diffusion))
        set_("gamma", wrap(self.gamma))
        set_("A", wrap(self.A))
        set_("B", wrap(self.B))
        set_("floors", dict(self.floors))
        for name in self.floors:
            if name not in self.symbols.states:
                raise ModelError(f"floor on unknown state {name!r}")
        present = {
            "drift": bool(self.drift),
            "diffusion": bool(self.diffusion),
            "gamma": bool(self.gamma),
            "A": bool(self.A),
            "B": bool(self.B),
        }
        needed = {
            "ito": {"drift", "diffusion"},
            "stratonovich": {"drift", "diffusion"},
            "jet": {"gamma"},
            "vector": {"A", "B"},
        }[self.form]
        extra = {k for k, v in present.items() if v} - needed
        missing = needed - {k for k, v in present.items() if v}
        if missing or extra:
            raise ModelError(
                f"form {self.form!r} needs exactly {sorted(needed)}; "
                f"missing {sorted(missing)}, unexpected {sorted(extra)}"
            )
        if self.form in ("ito", "stratonovich"):
            if len(self.drift) != n:
                raise ModelError(f"drift has {len(self.drift)} entries, expected {n}")
            if len(self.diffusion) != n or any(len(r) != d for r in self.diffusion):
                raise ModelError(f"diffusion must be a {n}x{d} matrix")
        elif self.form == "jet":
            if len(self.gamma) != n:
                raise ModelError(f"gamma has {len(self.gamma)} entries, expected {n}")
            self._check_base_point()
        else:
            if d != 1:
                raise ModelError("the vector representation needs exactly one driver")
            if len(self.A) != n or len(self.B) != n:
                raise ModelError(f"A and B need {n} entries each")

    # construction helpers -----------------------------------------------------
    @classmethod
    def build(
        cls,
        name: str,
        form: str,
        states: Sequence[str],
        drivers: Sequence[str],
        x0,
        constants: Mapping[str, float] | None = None,
        **coefficients,
    ) -> "SdeModel":
        symbols = SymbolTable(tuple(states), tuple(drivers), "t", dict(constants or {}))
        return cls(name=name, form=form, symbols=symbols, x0=x0, **coefficients)

    @property
    def n(self) -> int:
        return self.symbols.n

    @property
    def d(self) -> int:
        return self.symbols.d

    @property
    def states(self) -> tuple[str, ...]:
        return self.symbols.states

    def env(self, x, t=0.0) -> dict:
        x = np.asarray(x, dtype=float)
        env = {name: x[..., i] for i, name in enumerate(self.states)}
        if self.symbols.time is not None:
            env[self.symbols.time] = t
        return env

    def _check_base_point(self, probes: int = 20, tol: float = 1e-9) -> None:
        """gamma_x(0) = x at x0 (strictly) and at random probes (where defined)."""
        pts = default_probes(self.x0, count=probes + 1)
        env = self.env(pts, 0.0)
        for u in self.symbols.drivers:
            env[u] = np.zeros(len(pts))
        with lenient():
            vals = np.stack(
                [np.broadcast_to(np.asarray(g.eval_real(env), float), (len(pts),)) for g in self.gamma],
                axis=-1,
            )
        if not np.all(np.isfinite(vals[0])):
            raise ModelError(f"gamma is not defined at x0 = {self.x0.tolist()}")
        ok = np.isfinite(vals).all(axis=1)
        err = np.abs(vals[ok] - pts[ok]).max(axis=1)
        scale = np.maximum(1.0, np.abs(pts[ok]).max(axis=1))
        if np.any(err > tol * scale):
            i = int(np.argmax(err / scale))
            raise ModelError(
                f"gamma_x(0) != x at x = {pts[ok][i].tolist()} (error {err[i]:.3g})"
            )


def _eval_coef(coef, env, shape):
    return np.broadcast_to(np.asarray(coef.eval_real(env), dtype=float), shape)


def _batch_shape(x) -> tuple[int, ...]:
    return np.shape(x)[:-1]


def _drift_diffusion_values(model: SdeModel, x, t):
    """Raw (a, b) arrays of an ito/stratonovich model, no conversion."""
    env = model.env(x, t)
    shape = _batch_shape(x)
    a = np.stack([_eval_coef(c, env, shape) for c in model.drift], axis=-1)
    b = np.stack(
        [np.stack([_eval_coef(c, env, shape) for c in row], axis=-1) for row in model.diffusion],
        axis=-2,
    )
    return a, b


def _ito_correction(states, diffusion, x, t, time_name="t", constants=None) -> np.ndarray:
    """c_i = 1/2 sum_k sum_h (d b_ik / d x_h) b_hk at x, via jet evaluation."""
    x = np.asarray(x, dtype=float)
    seeds = JetPoint.identity(x)
    env = dict(zip(states, seeds.coords()))
    if time_name is not None:
        env[time_name] = t
    n = len(states)
    d = len(diffusion[0])
    vals = np.zeros(x.shape[:-1] + (n, d))
    grads = np.zeros(x.shape[:-1] + (n, d, n))
    for i in range(n):
        for k in range(d):
            jet = diffusion[i][k].eval_jet(env)
            vals[..., i, k] = jet.value
            grads[..., i, k, :] = jet.grad
    return 0.5 * np.einsum("...ikh,...hk->...i", grads, vals)


def _corrected(model: SdeModel, base, diffusion_rows, sign: float, label: str):
    states = model.states
    time_name = model.symbols.time

    def make(i, coef):
        def fn(env):
            x = np.stack(np.broadcast_arrays(*[np.asarray(env[s], float) for s in states]), axis=-1)
            t = env.get(time_name, 0.0)
            corr = _ito_correction(states, diffusion_rows, x, t, time_name)
            return np.asarray(coef.eval_real(env), float) + sign * corr[..., i]

        return NumericCoef(fn, f"{label} of {model.name}, component {i + 1}")

    return tuple(make(i, c) for i, c in enumerate(base))


def strat_to_ito(model: SdeModel) -> SdeModel:
    """Ito form with a_i = a~_i + 1/2 sum_k sum_h (d_h b_ik) b_hk."""
    if model.form != "stratonovich":
        raise ModelError(f"strat_to_ito needs a stratonovich model, got {model.form!r}")
    drift = _corrected(model, model.drift, model.diffusion, +1.0, "ito drift")
    return SdeModel(
        name=model.name,
        form="ito",
        symbols=model.symbols,
        x0=model.x0,
        drift=drift,
        diffusion=model.diffusion,
        floors=model.floors,
        closed_form=model.closed_form,
        note=f"converted from stratonovich form of {model.name}",
    )


def ito_to_strat(model: SdeModel) -> SdeModel:
    """Stratonovich form with a~_i = a_i - 1/2 sum_k sum_h (d_h b_ik) b_hk."""
    if model.form != "ito":
        raise ModelError(f"ito_to_strat needs an ito model, got {model.form!r}")
    drift = _corrected(model, model.drift, model.diffusion, -1.0, "stratonovich drift")
    return SdeModel(
        name=model.name,
        form="stratonovich",
        symbols=model.symbols,
        x0=model.x0,
        drift=drift,
        diffusion=model.diffusion,
        floors=model.floors,
        closed_form=model.closed_form,
        note=f"converted from ito form of {model.name}",
    )


def vector_to_standard(model: SdeModel) -> SdeModel:
    """Ito (standard) form of a vector-pair model: a = A + 1/2 (dB/dx) B, b = B."""
    if model.form != "vector":
        raise ModelError(f"vector_to_standard needs a vector model, got {model.form!r}")
    diffusion = tuple((b,) for b in model.B)
    drift = _corrected(model, model.A, diffusion, +1.0, "standard drift")
    return SdeModel(
        name=model.name,
        form="ito",
        symbols=model.symbols,
        x0=model.x0,
        drift=drift,
        diffusion=diffusion,
        floors=model.floors,
        closed_form=model.closed_form,
        note=f"converted from vector form of {model.name}",
    )


def to_ito(model: SdeModel) -> SdeModel:
    if model.form == "ito":
        return model
    if model.form == "stratonovich":
        return strat_to_ito(model)
    if model.form == "vector":
        return vector_to_standard(model)
    raise ModelError("a jet-form model has no expression-level Ito form; use to_jet_field")


# Jet fields -----------------------------------------------------------------------


class JetField:
    """Callable view ``(x, t) -> JetPoint``: the 2-jet of gamma_x at u = 0.

    ``x`` may carry batch dimensions (shape ``batch + (n,)``).  When the field
    comes from a full curve (jet-form model) :meth:`curve` evaluates that
    curve at finite ``u``; otherwise simulators use the canonical quadratic.
    """

    def __init__(
        self,
        n: int,
        d: int,
        *,
        jet_fn: Callable | None = None,
        ab_fn: Callable | None = None,
        curve_fn: Callable | None = None,
        states: Sequence[str] | None = None,
        floors: Mapping[int, float] | None = None,
        name: str = "",
        closed_form: Mapping[str, object] | None = None,
    ):
        if jet_fn is None and ab_fn is None:
            raise ValueError("a JetField needs jet_fn or ab_fn")
        self.n = n
        self.d = d
        self._jet_fn = jet_fn
        self._ab_fn = ab_fn
        self._curve_fn = curve_fn
        self.states = tuple(states) if states else tuple(f"x{i + 1}" for i in range(n))
        self.floors = dict(floors or {})
        self.name = name
        self.closed_form = closed_form

    def __call__(self, x, t=0.0) -> JetPoint:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.n:
            raise ShapeError(f"state has {x.shape[-1]} coordinates, field expects {self.n}")
        if self._jet_fn is not None:
            return self._jet_fn(x, t)
        a, b = self._ab_fn(x, t)
        return canonical_jet(a, b, x)

    def coefficients(self, x, t=0.0) -> tuple[np.ndarray, np.ndarray]:
        x = np.asarray(x, dtype=float)
        if self._ab_fn is not None:
            return self._ab_fn(x, t)
        return extract_ab(self(x, t))

    @property
    def has_curve(self) -> bool:
        return self._curve_fn is not None

    def curve(self, x, u, t=0.0) -> np.ndarray:
        """gamma_x(u): the full curve if known, otherwise the canonical quadratic."""
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        if self._curve_fn is not None:
            return self._curve_fn(x, u, t)
        a, b = self.coefficients(x, t)
        return x + np.einsum("...ia,...a->...i", b, u) + (a / self.d) * np.sum(u * u, axis=-1)[..., None]


def to_jet_field(model) -> JetField:
    """JetField of a model (a JetField is returned unchanged)."""
    if isinstance(model, JetField):
        return model
    floors = {model.states.index(k): v for k, v in model.floors.items()}
    common = dict(
        states=model.states, floors=floors, name=model.name, closed_form=model.closed_form
    )
    if model.form == "jet":
        return _jet_form_field(model, common)
    ito = to_ito(model)

    def ab_fn(x, t):
        return _drift_diffusion_values(ito, x, t)

    return JetField(model.n, model.d, ab_fn=ab_fn, **common)


def _jet_form_field(model: SdeModel, common) -> JetField:
    n, d = model.n, model.d
    drivers = model.symbols.drivers

    def jet_fn(x, t):
        batch = x.shape[:-1]
        env = {name: Jet2.constant(x[..., i], d) for i, name in enumerate(model.states)}
        for a, u in enumerate(drivers):
            env[u] = Jet2.variable(np.zeros(batch), a, d)
        if model.symbols.time is not None:
            env[model.symbols.time] = t
        return JetPoint.from_coords([g.eval_jet(env) for g in model.gamma])

    def curve_fn(x, u, t):
        batch = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
        env = model.env(x, t)
        for a, name in enumerate(drivers):
            env[name] = u[..., a]
        return np.stack([_eval_coef(g, env, batch) for g in model.gamma], axis=-1)

    return JetField(n, d, jet_fn=jet_fn, curve_fn=curve_fn, **common)


class PushforwardField(JetField):
    """The field x -> j2(f o gamma_x): Ito's lemma applied to a field.

    Points are still addressed by the original coordinates ``x``; the jets it
    returns sit at ``f(x)``.
    """

    def __init__(self, base: JetField, maps: Sequence[Expr], names: Sequence[str] | None = None):
        self.base = base
        self.maps = tuple(maps)
        m = len(self.maps)

        def jet_fn(x, t):
            extra = {"t": t}
            mj = jet_of_map(self.maps, base.states, x, extra)
            return pushforward(base(x, t), mj)

        super().__init__(
            m,
            base.d,
            jet_fn=jet_fn,
            states=names or tuple(f"y{i + 1}" for i in range(m)),
            name=f"pushforward of {base.name}",
        )


def backward_operator(field: JetField, f: Expr, x, t=0.0):
    """L f(x) = 1/2 Laplacian_u (f o gamma_x)(0)."""
    jet = field(x, t)
    env = dict(zip(field.states, jet.coords()))
    env["t"] = t
    g = f.eval_jet(env)
    diag = [i for i, (r, c) in enumerate(zip(*np.triu_indices(field.d))) if r == c]
    out = 0.5 * g.hess[..., diag].sum(axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def default_probes(x0, count: int = 20, half_width: float = 1.0, seed: int = 0) -> np.ndarray:
    """x0 followed by ``count - 1`` Latin-hypercube points in the box x0 +/- half_width."""
    x0 = np.asarray(x0, dtype=float)
    if count <= 1:
        return x0[None, :]
    sampler = qmc.LatinHypercube(d=x0.size, seed=seed)
    pts = qmc.scale(sampler.random(count - 1), x0 - half_width, x0 + half_width)
    return np.vstack([x0, pts])


def equivalence(field_a, field_b, probes, t=0.0, tol: float = 1e-9) -> str:
    """'strong', 'weak' or 'none' by comparing generators (and 1-jets) at probes."""
    field_a = to_jet_field(field_a)
    field_b = to_jet_field(field_b)
    if (field_a.n, field_a.d) != (field_b.n, field_b.d):
        raise ShapeError("fields have different state or driver dimensions")
    probes = np.atleast_2d(np.asarray(probes, dtype=float))
    a1, b1 = field_a.coefficients(probes, t)
    a2, b2 = field_b.coefficients(probes, t)
    close = lambda p, q: np.allclose(p, q, rtol=tol, atol=tol)  # noqa: E731
    cov1 = np.einsum("...ia,...ja->...ij", b1, b1)
    cov2 = np.einsum("...ia,...ja->...ij", b2, b2)
    if not (close(a1, a2) and close(cov1, cov2)):
        return "none"
    return "strong" if close(b1, b2) else "weak"


def canonicalized(field) -> JetField:
    """canonical_jet o extract_ab applied pointwise to a field."""
    field = to_jet_field(field)
    return JetField(
        field.n,
        field.d,
        ab_fn=field.coefficients,
        states=field.states,
        floors=field.floors,
        name=f"canonical {field.name}",
    )


def diffusion_jacobian(model: SdeModel, x, t=0.0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(a, b, db) at x with db[..., i, k, h] = d b_ik / d x_h (Ito drift a).

    Jet-form models are evaluated with one jet over (states, drivers) so the
    mixed second derivatives d^2 gamma_i / dx_h du_k give db directly.
    """
    x = np.asarray(x, dtype=float)
    n, d = model.n, model.d
    if model.form == "jet":
        D = n + d
        batch = x.shape[:-1]
        env = {name: Jet2.variable(x[..., i], i, D) for i, name in enumerate(model.states)}
        for k, u in enumerate(model.symbols.drivers):
            env[u] = Jet2.variable(np.zeros(batch), n + k, D)
        env[model.symbols.time] = t
        jets = [g.eval_jet(env) for g in model.gamma]
        H = np.stack([j.hess_matrix() for j in jets], axis=-3)  # (..., n, D, D)
        grad = np.stack([j.grad for j in jets], axis=-2)
        b = grad[..., :, n:]
        a = 0.5 * np.trace(H[..., n:, n:], axis1=-2, axis2=-1)
        db = H[..., :, n:, :n]  # (..., i, k, h)
        return a, b, db
    if model.form == "vector":
        diffusion = tuple((c,) for c in model.B)
    else:
        diffusion = model.diffusion
    seeds = JetPoint.identity(x)
    env = dict(zip(model.states, seeds.coords()))
    env[model.symbols.time] = t
    b = np.zeros(x.shape[:-1] + (n, d))
    db = np.zeros(x.shape[:-1] + (n, d, n))
    for i in range(n):
        for k in range(d):
            jet = diffusion[i][k].eval_jet(env)
            b[..., i, k] = jet.value
            db[..., i, k, :] = jet.grad
    a, _ = to_jet_field(model).coefficients(x, t)
    return a, b, db


def stratonovich_coefficients(model: SdeModel, x, t=0.0) -> tuple[np.ndarray, np.ndarray]:
    """(a~, b) with a~_i = a_i - 1/2 sum_k sum_h (d_h b_ik) b_hk, for any form."""
    a, b, db = diffusion_jacobian(model, x, t)
    return a - 0.5 * np.einsum("...ikh,...hk->...i", db, b), b
