"""Second-order jets (truncated Taylor expansions) and their composition.

A :class:`Jet2` is the 2-jet at ``u = 0`` of a scalar function of ``d``
variables: its value, gradient and Hessian.  Every field may carry leading
batch dimensions, so one ``Jet2`` can hold the jets of many sample points at
once (``value.shape == batch``, ``grad.shape == batch + (d,)``).

The Hessian is stored packed as the upper triangle in row-major order, so
symmetry holds by construction.

A :class:`JetPoint` stacks ``n`` such jets: the 2-jet of a map ``R^d -> R^n``.
Composing a JetPoint with the 2-jet of a map ``f`` (:func:`pushforward`) is
Ito's lemma; :func:`extract_ab` reads the Ito drift and diffusion off a jet.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from ._domain import require
from .errors import ShapeError

__all__ = [
    "Jet2",
    "JetPoint",
    "jet_apply",
    "jet_pow",
    "pushforward",
    "extract_ab",
    "canonical_jet",
    "packed_size",
    "pack",
    "unpack",
]


def packed_size(d: int) -> int:
    return d * (d + 1) // 2


@lru_cache(maxsize=None)
def _triu(d: int) -> tuple[np.ndarray, np.ndarray]:
    rows, cols = np.triu_indices(d)
    rows.setflags(write=False)
    cols.setflags(write=False)
    return rows, cols


@lru_cache(maxsize=None)
def _diag_positions(d: int) -> np.ndarray:
    rows, cols = _triu(d)
    pos = np.flatnonzero(rows == cols)
    pos.setflags(write=False)
    return pos


def unpack(packed: np.ndarray, d: int) -> np.ndarray:
    """Packed upper triangle (..., d(d+1)/2) -> full symmetric (..., d, d)."""
    packed = np.asarray(packed, dtype=float)
    rows, cols = _triu(d)
    full = np.zeros(packed.shape[:-1] + (d, d))
    full[..., rows, cols] = packed
    full[..., cols, rows] = packed
    return full


def pack(full: np.ndarray) -> np.ndarray:
    """Full (..., d, d) -> packed upper triangle. Only the upper triangle is read."""
    full = np.asarray(full, dtype=float)
    rows, cols = _triu(full.shape[-1])
    return full[..., rows, cols]


def _sym_outer(g: np.ndarray, h: np.ndarray, d: int) -> np.ndarray:
    # packed form of g h^T + h g^T
    rows, cols = _triu(d)
    return g[..., rows] * h[..., cols] + h[..., rows] * g[..., cols]


def _outer(g: np.ndarray, d: int) -> np.ndarray:
    rows, cols = _triu(d)
    return g[..., rows] * g[..., cols]


class Jet2:
    """2-jet of a scalar function of ``d`` variables, evaluated at 0."""

    __slots__ = ("value", "grad", "hess")
    # numpy arrays must defer to the reflected jet operators
    __array_ufunc__ = None

    def __init__(self, value, grad, hess):
        self.value = np.asarray(value, dtype=float)
        self.grad = np.asarray(grad, dtype=float)
        self.hess = np.asarray(hess, dtype=float)
        if self.grad.ndim == 0:
            raise ShapeError("gradient must have at least one dimension")
        d = self.grad.shape[-1]
        if d < 1:
            raise ShapeError("a jet needs d >= 1")
        if self.hess.shape[-1] != packed_size(d):
            raise ShapeError(
                f"packed Hessian of length {self.hess.shape[-1]} does not match d={d}"
            )

    # construction -----------------------------------------------------------
    @classmethod
    def constant(cls, value, d: int) -> "Jet2":
        value = np.asarray(value, dtype=float)
        return cls(value, np.zeros(value.shape + (d,)), np.zeros(value.shape + (packed_size(d),)))

    @classmethod
    def variable(cls, value, index: int, d: int) -> "Jet2":
        """The jet of ``u -> value + u[index]``."""
        if not 0 <= index < d:
            raise ShapeError(f"variable index {index} out of range for d={d}")
        value = np.asarray(value, dtype=float)
        grad = np.zeros(value.shape + (d,))
        grad[..., index] = 1.0
        return cls(value, grad, np.zeros(value.shape + (packed_size(d),)))

    # views ------------------------------------------------------------------
    @property
    def d(self) -> int:
        return self.grad.shape[-1]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def hess_matrix(self) -> np.ndarray:
        return unpack(self.hess, self.d)

    def __repr__(self) -> str:
        return f"Jet2(value={self.value!r}, grad={self.grad!r}, hess={self.hess_matrix()!r})"

    # arithmetic -------------------------------------------------------------
    def _lift(self, other) -> "Jet2":
        if isinstance(other, Jet2):
            if other.d != self.d:
                raise ShapeError(f"jets of different dimension: {self.d} vs {other.d}")
            return other
        return Jet2.constant(other, self.d)

    def __add__(self, other):
        o = self._lift(other)
        return Jet2(self.value + o.value, self.grad + o.grad, self.hess + o.hess)

    __radd__ = __add__

    def __sub__(self, other):
        o = self._lift(other)
        return Jet2(self.value - o.value, self.grad - o.grad, self.hess - o.hess)

    def __rsub__(self, other):
        return self._lift(other) - self

    def __neg__(self):
        return Jet2(-self.value, -self.grad, -self.hess)

    def __pos__(self):
        return self

    def __mul__(self, other):
        if not isinstance(other, Jet2):
            c = np.asarray(other, dtype=float)
            return Jet2(self.value * c, self.grad * c[..., None], self.hess * c[..., None])
        o = self._lift(other)
        a, b = self, o
        value = a.value * b.value
        grad = a.value[..., None] * b.grad + b.value[..., None] * a.grad
        hess = (
            a.value[..., None] * b.hess
            + b.value[..., None] * a.hess
            + _sym_outer(a.grad, b.grad, self.d)
        )
        return Jet2(value, grad, hess)

    __rmul__ = __mul__

    def reciprocal(self) -> "Jet2":
        v = self.value
        require(v != 0, "division by a jet with zero value", v)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / v
            return self._compose(inv, -inv * inv, 2.0 * inv * inv * inv)

    def __truediv__(self, other):
        if not isinstance(other, Jet2):
            c = np.asarray(other, dtype=float)
            require(c != 0, "division by zero", c)
            with np.errstate(divide="ignore", invalid="ignore"):
                return self * (1.0 / c)
        return self * self._lift(other).reciprocal()

    def __rtruediv__(self, other):
        return self._lift(other) * self.reciprocal()

    def __pow__(self, exponent):
        if isinstance(exponent, Jet2):
            return jet_apply("exp", exponent * jet_apply("log", self))
        return jet_pow(self, exponent)

    # chain rule -------------------------------------------------------------
    def _compose(self, f0, f1, f2) -> "Jet2":
        """Jet of ``phi(self)`` given phi, phi', phi'' evaluated at self.value."""
        f1 = np.asarray(f1, dtype=float)
        f2 = np.asarray(f2, dtype=float)
        grad = f1[..., None] * self.grad
        hess = f1[..., None] * self.hess + f2[..., None] * _outer(self.grad, self.d)
        return Jet2(f0, grad, hess)


# Elementary functions: name -> (f, f', f'', domain predicate or None, domain text).
def _tan_d1(v):
    c = np.cos(v)
    return 1.0 / (c * c)


def _tan_d2(v):
    c = np.cos(v)
    return 2.0 * np.tan(v) / (c * c)


def _tanh_d1(v):
    th = np.tanh(v)
    return 1.0 - th * th


def _tanh_d2(v):
    th = np.tanh(v)
    return -2.0 * th * (1.0 - th * th)


ELEMENTARY = {
    "sin": (np.sin, np.cos, lambda v: -np.sin(v), None, ""),
    "cos": (np.cos, lambda v: -np.sin(v), lambda v: -np.cos(v), None, ""),
    "tan": (np.tan, _tan_d1, _tan_d2, lambda v: np.cos(v) != 0, "tan needs cos(x) != 0"),
    "exp": (np.exp, np.exp, np.exp, None, ""),
    "log": (np.log, lambda v: 1.0 / v, lambda v: -1.0 / (v * v), lambda v: v > 0, "log needs x > 0"),
    "sqrt": (
        np.sqrt,
        lambda v: 0.5 / np.sqrt(v),
        lambda v: -0.25 / (v * np.sqrt(v)),
        lambda v: v > 0,
        "sqrt needs x > 0",
    ),
    "atan": (
        np.arctan,
        lambda v: 1.0 / (1.0 + v * v),
        lambda v: -2.0 * v / (1.0 + v * v) ** 2,
        None,
        "",
    ),
    "tanh": (np.tanh, _tanh_d1, _tanh_d2, None, ""),
}


def jet_apply(name: str, a: Jet2) -> Jet2:
    """Apply an elementary function to a jet (second-order chain rule)."""
    try:
        f0, f1, f2, domain, text = ELEMENTARY[name]
    except KeyError:
        raise ValueError(f"no jet rule for function {name!r}") from None
    v = a.value
    if domain is not None:
        require(domain(v), text, v)
    with np.errstate(all="ignore"):
        return a._compose(f0(v), f1(v), f2(v))


def jet_pow(a: Jet2, exponent: float) -> Jet2:
    """``a ** exponent`` for a constant exponent."""
    c = float(exponent)
    v = a.value
    if c == 0.0:
        return Jet2.constant(np.ones_like(v), a.d)
    if c == 1.0:
        return a
    if c.is_integer() and c >= 2:
        with np.errstate(all="ignore"):
            return a._compose(v**c, c * v ** (c - 1), c * (c - 1) * v ** (c - 2))
    if c.is_integer():
        require(v != 0, "negative integer power of zero", v)
    else:
        require(v > 0, "fractional power needs a positive base", v)
    with np.errstate(all="ignore"):
        return a._compose(v**c, c * v ** (c - 1), c * (c - 1) * v ** (c - 2))


@dataclass(frozen=True)
class JetPoint:
    """2-jet at ``u = 0`` of a map ``R^d -> R^n``, possibly batched.

    ``value`` has shape ``batch + (n,)``, ``grad`` ``batch + (n, d)`` and
    ``hess`` ``batch + (n, d(d+1)/2)``.
    """

    value: np.ndarray
    grad: np.ndarray
    hess: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "value", np.asarray(self.value, dtype=float))
        object.__setattr__(self, "grad", np.asarray(self.grad, dtype=float))
        object.__setattr__(self, "hess", np.asarray(self.hess, dtype=float))
        if self.grad.shape[:-1] != self.value.shape:
            raise ShapeError(f"grad shape {self.grad.shape} does not match value {self.value.shape}")
        if self.hess.shape[-1] != packed_size(self.grad.shape[-1]):
            raise ShapeError("packed Hessian length does not match d")

    @classmethod
    def from_coords(cls, coords) -> "JetPoint":
        coords = list(coords)
        if not coords:
            raise ShapeError("a JetPoint needs at least one coordinate")
        d = coords[0].d
        if any(c.d != d for c in coords):
            raise ShapeError("coordinate jets have different d")
        shape = np.broadcast_shapes(*(c.value.shape for c in coords))
        value = np.stack([np.broadcast_to(c.value, shape) for c in coords], axis=-1)
        grad = np.stack([np.broadcast_to(c.grad, shape + (d,)) for c in coords], axis=-2)
        hess = np.stack(
            [np.broadcast_to(c.hess, shape + (packed_size(d),)) for c in coords], axis=-2
        )
        return cls(value, grad, hess)

    @classmethod
    def identity(cls, x) -> "JetPoint":
        """Jet of ``u -> x + u`` (d = n): seeds for differentiating maps at x."""
        x = np.asarray(x, dtype=float)
        n = x.shape[-1]
        grad = np.broadcast_to(np.eye(n), x.shape + (n,)).copy()
        return cls(x, grad, np.zeros(x.shape + (packed_size(n),)))

    @property
    def n(self) -> int:
        return self.value.shape[-1]

    @property
    def d(self) -> int:
        return self.grad.shape[-1]

    @property
    def batch_shape(self) -> tuple[int, ...]:
        return self.value.shape[:-1]

    def coord(self, i: int) -> Jet2:
        return Jet2(self.value[..., i], self.grad[..., i, :], self.hess[..., i, :])

    def coords(self) -> list[Jet2]:
        return [self.coord(i) for i in range(self.n)]

    def hess_matrix(self) -> np.ndarray:
        return unpack(self.hess, self.d)

    def evaluate(self, u) -> np.ndarray:
        """Value of the quadratic Taylor polynomial at ``u`` (shape batch + (d,))."""
        u = np.asarray(u, dtype=float)
        lin = np.einsum("...ia,...a->...i", self.grad, u)
        quad = np.einsum("...iab,...a,...b->...i", self.hess_matrix(), u, u)
        return self.value + lin + 0.5 * quad


def pushforward(jet: JetPoint, map_jet: JetPoint) -> JetPoint:
    """2-jet of ``f o gamma`` from the 2-jet of gamma and the 2-jet of f.

    ``map_jet`` is the 2-jet of ``f: R^n -> R^m`` at ``gamma(0)`` with respect to
    the n state variables (so ``map_jet.d == jet.n``).  The result is the
    composed jet in the driver variables: gradient ``J_f G`` and Hessian
    ``G^T H_f G + J_f . H_gamma`` for each output.
    """
    if map_jet.d != jet.n:
        raise ShapeError(
            f"map differentiated in {map_jet.d} variables but the jet has {jet.n} coordinates"
        )
    d = jet.d
    jac = map_jet.grad  # (..., m, n)
    g = jet.grad  # (..., n, d)
    grad = np.einsum("...kn,...na->...ka", jac, g)
    hf = map_jet.hess_matrix()  # (..., m, n, n)
    hg = jet.hess_matrix()  # (..., n, d, d)
    hess = np.einsum("...kij,...ia,...jb->...kab", hf, g, g) + np.einsum(
        "...kn,...nab->...kab", jac, hg
    )
    return JetPoint(map_jet.value, grad, pack(hess))


def extract_ab(jet: JetPoint) -> tuple[np.ndarray, np.ndarray]:
    """Ito drift ``a = 1/2 trace(Hess)`` and diffusion ``b = grad`` of a jet."""
    diag = _diag_positions(jet.d)
    a = 0.5 * jet.hess[..., diag].sum(axis=-1)
    return a, jet.grad.copy()


def canonical_jet(a, b, x=None) -> JetPoint:
    """The quadratic representative ``x + b s + (1/d) a |s|^2``.

    Each coordinate's Hessian is ``(2 a_i / d) I`` so that
    ``extract_ab(canonical_jet(a, b)) == (a, b)``.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if b.ndim < 2 or b.shape[:-1] != a.shape:
        raise ShapeError(f"drift shape {a.shape} and diffusion shape {b.shape} disagree")
    d = b.shape[-1]
    hess = np.zeros(a.shape + (packed_size(d),))
    hess[..., _diag_positions(d)] = (2.0 * a / d)[..., None]
    value = np.zeros_like(a) if x is None else np.broadcast_to(np.asarray(x, float), a.shape)
    return JetPoint(value, b, hess)
