import logging
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate as spi
from scipy import stats
from scipy.optimize import linprog

from fpkflow.functions import from_callable, from_id, ridge, standard_test_family
from fpkflow.measure import (EvaluationError, GridSpec, Measure, MeasureError, integrate,
                             measure_from_csv, measure_to_csv, normalize, to_grid,
                             wasserstein1)


def coupling_w1(x, wx, y, wy):
    """Optimal transport cost by linear programming over couplings."""
    n, m = len(x), len(y)
    cost = np.abs(np.subtract.outer(np.asarray(x), np.asarray(y))).ravel()
    A = np.zeros((n + m, n * m))
    for i in range(n):
        A[i, i * m:(i + 1) * m] = 1
    for j in range(m):
        A[n + j, j::m] = 1
    res = linprog(cost, A_eq=A, b_eq=np.concatenate([wx, wy]), bounds=(0, None),
                  method="highs")
    return res.fun


atoms_1d = st.lists(
    st.tuples(st.floats(-5, 5, allow_nan=False), st.floats(0.01, 1.0)),
    min_size=1, max_size=6,
).map(lambda xs: Measure.atoms([x for x, _ in xs], [w for _, w in xs]))


# -- integrate ---------------------------------------------------------------

def test_integrate_dirac_tanh_is_zero():
    assert integrate(Measure.dirac(0.0), from_id("tanh[1;0]")) == 0.0


def test_integrate_constant_one_on_uniform_weights():
    m = Measure.atoms([-3.0, 0.1, 2.0, 7.5])
    one = from_callable("one", lambda x: np.ones(len(x)), 1.0, 0.0, 0.0)
    assert integrate(m, one) == 1.0


def test_integrate_gaussian_grid_against_quadrature():
    grid = GridSpec.centered(-8.0, 8.0, 0.01)
    m = Measure.normal(grid, 0.0, 1.0)

    def f(x):
        x = x[:, 0]
        return np.where(np.abs(x) <= 8, x, 0.0)

    oracle, _ = spi.quad(lambda x: x * stats.norm.pdf(x), -8, 8)
    assert abs(integrate(m, f) - oracle) < 1e-3


def test_integrate_nonfinite_names_point():
    m = Measure.atoms([0.0, 1.0])
    bad = from_callable("inv", lambda x: 1.0 / x[:, 0], 1.0)
    with np.errstate(divide="ignore"):
        with pytest.raises(EvaluationError, match=r"\[0\.0\]"):
            integrate(m, bad)


@given(atoms_1d, st.sampled_from(standard_test_family(1)))
def test_integrate_bounded_by_sup_norm(m, f):
    assert abs(integrate(m, f)) <= f.bound + 1e-15


# -- wasserstein1 ------------------------------------------------------------

def test_w1_identity():
    m = Measure.atoms([0.0, 1.0, 2.5], [0.2, 0.3, 0.5])
    assert wasserstein1(m, m) == 0.0


@pytest.mark.parametrize("a,b", [(0.0, 1.0), (-2.5, 3.0), (0.25, 0.0625)])
def test_w1_diracs(a, b):
    assert wasserstein1(Measure.dirac(a), Measure.dirac(b)) == pytest.approx(abs(a - b), abs=1e-15)


def test_w1_two_point_vs_dirac_matches_brute_force_coupling():
    m = Measure.atoms([0.0, 1.0], [0.5, 0.5])
    oracle = coupling_w1([0.0, 1.0], [0.5, 0.5], [0.0], [1.0])
    assert oracle == pytest.approx(0.5)
    assert wasserstein1(m, Measure.dirac(0.0)) == pytest.approx(oracle, abs=1e-12)


@given(atoms_1d, atoms_1d)
def test_w1_matches_linear_programming_oracle(m1, m2):
    oracle = coupling_w1(m1.points[:, 0], m1.weights, m2.points[:, 0], m2.weights)
    assert wasserstein1(m1, m2) == pytest.approx(oracle, abs=1e-8)


@given(atoms_1d, atoms_1d)
def test_w1_matches_scipy(m1, m2):
    ref = stats.wasserstein_distance(m1.points[:, 0], m2.points[:, 0], m1.weights, m2.weights)
    assert wasserstein1(m1, m2) == pytest.approx(ref, abs=1e-12)


@given(atoms_1d, atoms_1d, atoms_1d)
def test_w1_metric_axioms(a, b, c):
    dab, dba = wasserstein1(a, b), wasserstein1(b, a)
    assert dab >= 0
    assert dab == pytest.approx(dba, abs=1e-12)
    assert wasserstein1(a, c) <= dab + wasserstein1(b, c) + 1e-12


@given(atoms_1d, atoms_1d, st.sampled_from(standard_test_family(1)))
def test_kantorovich_inequality(m1, m2, f):
    gap = abs(integrate(m1, f) - integrate(m2, f))
    assert gap <= f.lipschitz_bound * wasserstein1(m1, m2) + 1e-12


def test_w1_grid_fast_path_matches_atom_formula():
    grid = GridSpec.centered(-3.0, 3.0, 0.05)
    m1 = Measure.normal(grid, 0.0, 1.0)
    m2 = Measure.normal(grid, 0.4, 0.5)
    fast = wasserstein1(m1, m2)
    slow = wasserstein1(Measure.atoms(m1.points, m1.weights), Measure.atoms(m2.points, m2.weights))
    assert fast == pytest.approx(slow, abs=1e-12)


def test_w1_dimension_mismatch():
    with pytest.raises(MeasureError, match="dimension"):
        wasserstein1(Measure.dirac(0.0), Measure.dirac([0.0, 0.0]))


def test_sliced_w1_between_2d_diracs():
    # projections of x onto 64 equispaced directions on the half circle
    a, b = np.array([0.0, 0.0]), np.array([1.0, 0.0])
    theta = np.pi * np.arange(64) / 64
    oracle = np.mean(np.abs(np.cos(theta)))
    d = wasserstein1(Measure.dirac(a), Measure.dirac(b))
    assert d == pytest.approx(oracle, abs=1e-14)
    assert wasserstein1(Measure.dirac(b), Measure.dirac(a)) == d


# -- normalize and construction ------------------------------------------------

def test_normalize_examples():
    assert normalize(Measure("atoms", [[0.0], [1.0]], [0.5, 0.5])).weights.tolist() == [0.5, 0.5]
    assert Measure.atoms([0.0, 1.0], [2.0, 2.0]).weights.tolist() == [0.5, 0.5]
    assert Measure.atoms([3.0], [1.0]).weights.tolist() == [1.0]
    with pytest.raises(MeasureError):
        Measure.atoms([0.0, 1.0], [0.0, 0.0])


def test_unnormalized_measure_logs_warning(caplog):
    with caplog.at_level(logging.WARNING, logger="fpkflow.measure"):
        m = Measure.atoms([0.0, 1.0], [0.3, 0.3])
    assert math.fsum(m.weights) == pytest.approx(1.0, abs=1e-12)
    assert "normalizing" in caplog.text


@given(st.lists(st.floats(0.0, 10.0), min_size=1, max_size=20).filter(lambda w: sum(w) > 1e-6))
def test_weights_sum_to_one(w):
    m = Measure.atoms(np.arange(len(w), dtype=float), w)
    assert abs(math.fsum(m.weights) - 1.0) <= 1e-12
    assert np.all(m.weights >= 0)


def test_negative_weight_rejected():
    with pytest.raises(MeasureError, match="negative"):
        Measure.atoms([0.0, 1.0], [1.5, -0.5])


def test_atoms_outside_domain_rejected():
    with pytest.raises(MeasureError, match="domain"):
        Measure.atoms([0.0, 3.0], domain=((-1.0, 1.0),))


def test_measure_is_immutable():
    m = Measure.atoms([0.0, 1.0])
    with pytest.raises(ValueError):
        m.weights[0] = 0.9


def test_key_ignores_order_and_zero_weights():
    a = Measure.atoms([0.0, 1.0, 5.0], [0.25, 0.75, 0.0])
    b = Measure.atoms([1.0, 0.0], [0.75, 0.25])
    assert a.key() == b.key()
    assert a.key() != Measure.atoms([0.0, 1.0], [0.5, 0.5]).key()


# -- serialization --------------------------------------------------------------

@given(atoms_1d)
def test_atom_csv_round_trip_is_bit_exact(m):
    back = measure_from_csv(measure_to_csv(m))
    assert np.array_equal(back.points, m.points)
    assert np.array_equal(back.weights, m.weights)


def test_grid_csv_round_trip():
    grid = GridSpec.centered([-1.0, -1.0], [1.0, 1.0], 0.1)
    m = Measure.normal(grid, [0.1, -0.2], 0.3)
    back = measure_from_csv(measure_to_csv(m))
    assert back.grid == grid
    assert np.max(np.abs(back.weights - m.weights)) <= 1e-15


def test_to_grid_reports_move_cost():
    grid = GridSpec.centered(-1.0, 1.0, 0.1)
    g, cost = to_grid(Measure.dirac(0.0), grid)
    assert cost == pytest.approx(0.0, abs=1e-15)
    assert g.kind == "grid" and g.weights.max() == 1.0
    _, cost = to_grid(Measure.dirac(0.02), grid)
    assert cost == pytest.approx(0.02, abs=1e-12)


def test_ridge_lipschitz_bound_sampled():
    f = ridge("tanh", [2.0], 0.5)
    x = np.linspace(-4, 4, 2001)[:, None]
    v = f(x)
    slopes = np.abs(np.diff(v)) / np.diff(x[:, 0])
    assert slopes.max() <= f.lipschitz_bound + 1e-12
