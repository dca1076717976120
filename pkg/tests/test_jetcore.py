from __future__ import annotations


import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from jetsde.dsl import Expr, SymbolTable, jet_of_map
from jetsde.errors import DomainError, ShapeError
from jetsde.jetcore import (
    Jet2,
    JetPoint,
    canonical_jet,
    extract_ab,
    jet_apply,
    pack,
    packed_size,
    pushforward,
    unpack,
)

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def var(index, d, value=0.0):
    return Jet2.variable(value, index, d)


def const(value, d):
    return Jet2.constant(value, d)


def gamma_e_jet(x, c=3.0):
    sym = SymbolTable(("x1", "x2"), ("u1",), "t", {"c": c})
    exprs = [Expr("x1 - x2*u1 + c*x1*u1^2", sym), Expr("x2 + x1*u1 + c*x2*u1^2", sym)]
    x = np.asarray(x, float)
    u = Jet2.variable(np.zeros(x.shape[:-1]), 0, 1)
    env = {"x1": x[..., 0], "x2": x[..., 1], "u1": u, "t": 0.0}
    return JetPoint.from_coords([e.eval_jet(env) for e in exprs])


PHI = ["atan(x2/x1)", "log(sqrt(x1^2 + x2^2))"]


def phi_jet(x):
    sym = SymbolTable(("x1", "x2"))
    return jet_of_map([Expr(s, sym) for s in PHI], ("x1", "x2"), x, {"t": 0.0})


# packing ---------------------------------------------------------------------------------


@pytest.mark.parametrize("d", [1, 2, 3, 5])
def test_pack_unpack_round_trip(d):
    rng = np.random.default_rng(d)
    A = rng.normal(size=(4, d, d))
    S = A + np.swapaxes(A, -1, -2)
    assert packed_size(d) == d * (d + 1) // 2
    np.testing.assert_array_equal(unpack(pack(S), d), S)


def test_unpacked_hessian_is_exactly_symmetric():
    rng = np.random.default_rng(0)
    H = unpack(rng.normal(size=(7, packed_size(4))), 4)
    np.testing.assert_array_equal(H, np.swapaxes(H, -1, -2))


# arithmetic ------------------------------------------------------------------------------


def test_product_of_constants():
    p = const(2.0, 2) * const(3.0, 2)
    assert p.value == 6.0
    assert not p.grad.any() and not p.hess.any()


def test_square_of_a_variable():
    p = var(0, 2) * var(0, 2)
    assert p.value == 0.0
    np.testing.assert_array_equal(p.grad, [0.0, 0.0])
    np.testing.assert_array_equal(p.hess_matrix(), [[2.0, 0.0], [0.0, 0.0]])


def test_quotient_by_constant():
    q = (var(0, 2) + const(1.0, 2)) / const(2.0, 2)
    assert q.value == 0.5
    np.testing.assert_allclose(q.grad, [0.5, 0.0])
    assert not q.hess.any()


def test_division_by_zero_value_is_a_domain_error():
    with pytest.raises(DomainError):
        var(0, 1) / var(0, 1)


def test_mismatched_d_is_a_shape_error():
    with pytest.raises(ShapeError):
        var(0, 1) + var(0, 2)


def test_numpy_scalars_defer_to_jet_operators():
    j = np.float64(2.0) * var(0, 1, 1.0)
    assert isinstance(j, Jet2)
    assert j.value == 2.0


@settings(max_examples=50, deadline=None)
@given(a=finite, b=finite, c=finite)
def test_product_rule(a, b, c):
    d = 2
    x = Jet2(a, [1.0, b], pack(np.array([[c, 0.5], [0.5, 1.0]])))
    y = Jet2(b, [c, -1.0], pack(np.array([[1.0, a], [a, -2.0]])))
    p = x * y
    expect = (
        x.value * y.hess_matrix()
        + y.value * x.hess_matrix()
        + np.outer(x.grad, y.grad)
        + np.outer(y.grad, x.grad)
    )
    np.testing.assert_allclose(p.hess_matrix(), expect, atol=1e-12)
    np.testing.assert_allclose(p.grad, x.value * y.grad + y.value * x.grad, atol=1e-12)
    assert p.d == d


# elementary functions --------------------------------------------------------------------


def test_exp_of_zero_jet():
    e = jet_apply("exp", const(0.0, 1))
    assert e.value == 1.0 and not e.grad.any() and not e.hess.any()


def test_log_one_plus_u():
    j = jet_apply("log", const(1.0, 1) + var(0, 1))
    assert j.value == 0.0
    np.testing.assert_allclose(j.grad, [1.0])
    np.testing.assert_allclose(j.hess_matrix(), [[-1.0]])


def test_sqrt_four_plus_u():
    j = jet_apply("sqrt", const(4.0, 1) + var(0, 1))
    assert j.value == 2.0
    np.testing.assert_allclose(j.grad, [0.25])
    # second derivative -(1/4) 4^(-3/2); half of it is the Taylor coefficient
    np.testing.assert_allclose(j.hess_matrix(), [[-0.03125]])


@pytest.mark.parametrize(
    "name, value",
    [("log", 0.0), ("log", -1.0), ("sqrt", -1.0), ("sqrt", 0.0)],
)
def test_domain_violations_carry_the_value(name, value):
    with pytest.raises(DomainError) as info:
        jet_apply(name, const(value, 1))
    assert info.value.value is not None


@pytest.mark.parametrize("name", ["sin", "cos", "tan", "exp", "log", "sqrt", "atan", "tanh"])
def test_elementary_against_central_differences(name):
    f = {
        "sin": np.sin, "cos": np.cos, "tan": np.tan, "exp": np.exp,
        "log": np.log, "sqrt": np.sqrt, "atan": np.arctan, "tanh": np.tanh,
    }[name]
    x0, h = 0.7, 1e-4
    j = jet_apply(name, const(x0, 1) + var(0, 1))
    d1 = (f(x0 + h) - f(x0 - h)) / (2 * h)
    d2 = (f(x0 + h) - 2 * f(x0) + f(x0 - h)) / h**2
    assert j.value == pytest.approx(f(x0), rel=1e-15)
    assert j.grad[0] == pytest.approx(d1, rel=1e-7)
    assert j.hess[0] == pytest.approx(d2, rel=1e-5)


def test_power_with_constant_exponent():
    j = (const(2.0, 1) + var(0, 1)) ** 3
    assert j.value == 8.0
    np.testing.assert_allclose(j.grad, [12.0])
    np.testing.assert_allclose(j.hess_matrix(), [[12.0]])


# pushforward and coefficient extraction ---------------------------------------------------


def test_identity_pushforward_returns_the_jet():
    jet = gamma_e_jet(np.array([0.3, -1.2]))
    out = pushforward(jet, JetPoint.identity(jet.value))
    np.testing.assert_array_equal(out.value, jet.value)
    np.testing.assert_allclose(out.grad, jet.grad, atol=0)
    np.testing.assert_allclose(out.hess, jet.hess, atol=0)


def test_gamma_e_coefficients_at_one_zero():
    a, b = extract_ab(gamma_e_jet(np.array([1.0, 0.0])))
    np.testing.assert_allclose(a, [3.0, 0.0])
    np.testing.assert_allclose(b[:, 0], [0.0, 1.0])


def test_gamma_e_coefficients_everywhere():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(20, 2))
    a, b = extract_ab(gamma_e_jet(x))
    np.testing.assert_allclose(a, 3 * x, rtol=1e-14)
    np.testing.assert_allclose(b[..., 0], np.stack([-x[:, 1], x[:, 0]], 1), rtol=1e-14)


def test_polar_pushforward_of_gamma_e():
    x = np.array([1.0, 0.0])
    out = pushforward(gamma_e_jet(x), phi_jet(x))
    a, b = extract_ab(out)
    np.testing.assert_allclose(a, [0.0, 3.5], atol=1e-14)
    np.testing.assert_allclose(b[:, 0], [1.0, 0.0], atol=1e-14)


def test_zero_jet_has_zero_coefficients():
    jet = JetPoint(np.ones(2), np.zeros((2, 3)), np.zeros((2, 6)))
    a, b = extract_ab(jet)
    assert not a.any() and not b.any()


def test_third_equivalent_jet_coefficients():
    sym = SymbolTable(("x", "y"))
    exprs = [Expr("x + x^2 + y^2", sym), Expr("2*y", sym)]
    jet = jet_of_map(exprs, ("x", "y"), np.zeros(2), {"t": 0.0})
    a, b = extract_ab(jet)
    np.testing.assert_allclose(a, [2.0, 0.0])
    np.testing.assert_allclose(b, [[1.0, 0.0], [0.0, 2.0]])
    canon = canonical_jet(a, b)
    np.testing.assert_allclose(canon.hess_matrix(), jet.hess_matrix())


def test_canonical_jet_of_pure_diffusion_is_linear():
    j = canonical_jet(np.zeros(3), np.eye(3))
    assert not j.hess.any()
    np.testing.assert_array_equal(j.grad, np.eye(3))


def test_canonical_jet_rejects_mismatched_shapes():
    with pytest.raises(ShapeError):
        canonical_jet(np.zeros(2), np.zeros((3, 2)))


@settings(max_examples=100, deadline=None)
@given(
    a=arrays(float, 3, elements=finite),
    b=arrays(float, (3, 2), elements=finite),
)
def test_canonical_round_trip(a, b):
    a2, b2 = extract_ab(canonical_jet(a, b))
    np.testing.assert_allclose(a2, a, rtol=1e-15, atol=1e-15)
    np.testing.assert_array_equal(b2, b)


def _poly_map(c, names):
    sym = SymbolTable(tuple(names))
    x1, x2 = names
    exprs = [
        Expr(f"{c[0]}*{x1} + {c[1]}*{x2}^2 + {c[2]}*{x1}*{x2}", sym),
        Expr(f"{c[3]}*{x2} + {c[4]}*{x1}^2 + {c[5]}*{x1}^3", sym),
    ]
    return exprs


@settings(max_examples=30, deadline=None)
@given(
    cf=st.lists(st.floats(-2, 2), min_size=6, max_size=6),
    cg=st.lists(st.floats(-2, 2), min_size=6, max_size=6),
    x=arrays(float, 2, elements=st.floats(-1, 1)),
)
def test_pushforward_chain_rule(cf, cg, x):
    """Pushing through f then g equals pushing through g o f."""
    f = _poly_map(cf, ("x1", "x2"))
    g = _poly_map(cg, ("y1", "y2"))
    jet = gamma_e_jet(x)
    fx = jet_of_map(f, ("x1", "x2"), jet.value, {"t": 0.0})
    step = pushforward(jet, fx)
    gy = jet_of_map(g, ("y1", "y2"), step.value, {"t": 0.0})
    twice = pushforward(step, gy)
    # g o f as one map: evaluate g on the jets of f
    seeds = JetPoint.identity(jet.value).coords()
    f_jets = [e.eval_jet({"x1": seeds[0], "x2": seeds[1], "t": 0.0}) for e in f]
    gf = JetPoint.from_coords([e.eval_jet({"y1": f_jets[0], "y2": f_jets[1], "t": 0.0}) for e in g])
    once = pushforward(jet, gf)
    np.testing.assert_allclose(twice.grad, once.grad, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(twice.hess, once.hess, rtol=1e-12, atol=1e-11)


@settings(max_examples=30, deadline=None)
@given(
    J=arrays(float, (2, 2), elements=st.floats(-3, 3)),
    x=arrays(float, 2, elements=st.floats(-2, 2)),
)
def test_linear_pushforward_has_no_correction(J, x):
    jet = gamma_e_jet(x)
    lin = JetPoint(J @ x, J, np.zeros((2, 3)))
    a, b = extract_ab(jet)
    a2, b2 = extract_ab(pushforward(jet, lin))
    np.testing.assert_allclose(a2, J @ a, atol=1e-12)
    np.testing.assert_allclose(b2, J @ b, atol=1e-12)


def test_pushforward_dimension_mismatch():
    jet = gamma_e_jet(np.array([1.0, 0.0]))
    with pytest.raises(ShapeError):
        pushforward(jet, JetPoint.identity(np.zeros(3)))


def test_evaluate_is_the_quadratic_taylor_polynomial():
    jet = gamma_e_jet(np.array([1.0, 2.0]))
    u = np.array([0.1])
    np.testing.assert_allclose(jet.evaluate(u), [1.0 - 0.2 + 0.03, 2.0 + 0.1 + 0.06])
