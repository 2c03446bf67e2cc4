import numpy as np
import pytest
from hypothesis import given, strategies as st

from fpkflow.expr import ExpressionError, parse
from fpkflow.functions import from_callable, from_id, ridge, standard_test_family

FAMILY_1D = standard_test_family(1)
FAMILY_2D = standard_test_family(2)


@given(st.sampled_from(FAMILY_1D), st.lists(st.floats(-50, 50), min_size=2, max_size=30))
def test_bound_and_lipschitz_on_samples(f, xs):
    x = np.asarray(xs)[:, None]
    v = f(x)
    assert np.all(np.abs(v) <= f.bound + 1e-15)
    dv = np.abs(v[:, None] - v[None, :])
    dx = np.abs(x[:, 0][:, None] - x[:, 0][None, :])
    assert np.all(dv <= f.lipschitz_bound * dx + 1e-12)


@pytest.mark.parametrize("f", FAMILY_1D + FAMILY_2D, ids=lambda f: f.id)
def test_analytic_derivatives_match_finite_differences(f):
    rng = np.random.default_rng(3)
    d = 1 if f in FAMILY_1D else 2
    x = rng.uniform(-3, 3, size=(25, d))
    fd = from_callable("fd", f, f.bound)
    assert np.allclose(f.grad(x), fd.grad(x), atol=1e-8)
    assert np.allclose(f.hess(x), fd.hess(x), atol=2e-4)
    assert np.all(np.linalg.norm(f.hess(x), ord=2, axis=(1, 2))
                  <= f.second_derivative_bound + 1e-12)


@pytest.mark.parametrize("fid", ["tanh[1;0]", "-tanh[4;0]", "tanh[0.5;1]", "gauss[1,0;0.5]",
                                 "-sin[0.7071,0.7071;0]"])
def test_id_round_trip(fid):
    assert from_id(fid).id == fid


def test_negation_flips_values_and_id():
    f = ridge("tanh", [2.0], -1.0)
    g = f.negated()
    x = np.linspace(-2, 2, 9)[:, None]
    assert g.id == "-" + f.id
    assert np.array_equal(g(x), -f(x))
    assert np.array_equal(g.grad(x), -f.grad(x))
    assert g.negated().id == f.id


def test_unknown_id_rejected():
    with pytest.raises(ValueError):
        from_id("erf[1;0]")


def test_expression_evaluates_on_points():
    e = parse("min(sqrt(max(x, 0)), 1) + 0*t", 1)
    x = np.array([[-1.0], [0.25], [9.0]])
    assert e(0.0, x).tolist() == [0.0, 0.5, 1.0]
    assert e.uses_time


def test_expression_matrix_shape():
    e = parse("[[1 + 0.5*tanh(x), 0], [0, 2]]", 2)
    assert e.shape == (2, 2)
    v = e(0.0, np.zeros((3, 2)))
    assert v.shape == (3, 2, 2)
    assert np.allclose(v[:, 1, 1], 2.0)


@pytest.mark.parametrize("text", ["__import__('os')", "x.real", "exp(x)", "lambda: 1", "x ** 2"])
def test_expression_rejects_unsafe_input(text):
    with pytest.raises(ExpressionError):
        parse(text, 1)


def test_expression_y_needs_two_dimensions():
    with pytest.raises(ExpressionError):
        parse("x + y", 1)
