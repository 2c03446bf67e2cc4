import math

import numpy as np
import pytest
from scipy import integrate as spi
from scipy import stats

from fpkflow.curve import CurveError, SolutionCurve, TimeGrid, constant_curve, load_curve, save_curve
from fpkflow.functions import from_id, standard_test_family
from fpkflow.measure import GridSpec, Measure, to_grid, wasserstein1
from fpkflow.problem import custom_problem, preset
from fpkflow.solver import (CFLError, bernoulli, default_grid, narrow_continuity_modulus,
                            rk4_path, solve_forward, stable_dt, weak_residual)

from conftest import x_tau

TANH = from_id("tanh[1;0]")


def test_bernoulli_identities():
    z = np.array([-30.0, -1.0, -1e-9, 0.0, 1e-9, 1.0, 30.0])
    assert bernoulli(np.array([0.0]))[0] == 1.0
    assert np.allclose(bernoulli(z) - bernoulli(-z), -z, atol=1e-12)
    assert np.all(bernoulli(z) > 0)


def test_zero_preset_grid_solve_is_stationary():
    p = preset("zero")
    grid = default_grid(p, 0.05)
    nu, _ = to_grid(Measure.dirac(0.5), grid)
    curve = solve_forward(p, 0.0, nu, 0.01, grid, TimeGrid.from_step(1.0, 0.01))
    assert max(wasserstein1(curve.marginal(k), nu) for k in range(curve.n_times)) == 0.0


def test_zero_preset_atoms_use_characteristics():
    p = preset("zero")
    curve = solve_forward(p, 0.0, Measure.dirac(0.5), 1e-3)
    assert curve.kind == "atoms"
    assert np.all(curve.points == 0.5)


def test_heat_second_moment_at_unit_time():
    p = preset("heat")
    grid = default_grid(p, 0.01)
    curve = solve_forward(p, 0.0, Measure.dirac(0.0), 1e-4, grid)
    m2 = curve.terminal.moment(2)
    assert 0.98 <= m2 <= 1.02
    assert np.allclose(curve.weights.sum(axis=1), 1.0, atol=1e-9)
    assert np.all(curve.weights >= 0)
    assert curve.certificate["boundary_mass"] < 1e-6


def test_ou_tanh_second_moment_decreases():
    # the quadrature oracle fixes the sign of d/dt m2 at t = 0
    rate, _ = spi.quad(lambda x: (1 - 2 * x * np.tanh(x)) * stats.norm.pdf(x), -12, 12)
    assert rate < 0
    p = preset("ou_tanh")
    grid = default_grid(p, 0.02)
    nu = Measure.normal(grid, 0.0, 1.0)
    curve = solve_forward(p, 0.0, nu, 1e-4, grid, TimeGrid.from_step(1.0, 0.05))
    m2 = np.array([curve.at(t).moment(2) for t in curve.times if t <= 0.5 + 1e-12])
    assert np.all(np.diff(m2) < 0)
    initial_slope = (m2[1] - m2[0]) / 0.05
    assert initial_slope == pytest.approx(rate, rel=0.1)


def test_cfl_violation_reports_stable_dt():
    p = preset("heat")
    grid = default_grid(p, 0.01)
    with pytest.raises(CFLError) as err:
        solve_forward(p, 0.0, Measure.dirac(0.0), 2e-4, grid, TimeGrid.from_step(1.0, 2e-4))
    assert err.value.stable == pytest.approx(stable_dt(p, grid))
    assert f"{err.value.stable:.6g}" in str(err.value)


def test_stable_dt_heat_is_dx_squared():
    p = preset("heat")
    assert stable_dt(p, default_grid(p, 0.01)) == pytest.approx(1e-4, rel=1e-12)


def test_restart_from_recorded_marginal_is_bit_identical():
    p = preset("ou_tanh")
    grid = default_grid(p, 0.05)
    tg = TimeGrid.from_step(1.0, 0.01)
    full = solve_forward(p, 0.0, Measure.dirac(1.0), 1e-3, grid, tg)
    tail = solve_forward(p, 0.5, full.at(0.5), 1e-3, grid, tg)
    assert np.array_equal(tail.weights, full.weights[full.index_of(0.5):])


# -- weak residual ----------------------------------------------------------------

def test_residual_of_constant_curve_under_zero_preset():
    curve = constant_curve(np.linspace(0, 1, 11), Measure.dirac(0.0))
    fs = standard_test_family(1)
    assert weak_residual(curve, preset("zero"), fs) <= 1e-12


def test_residual_of_sqrt_parabola_for_tanh():
    p = preset("sqrt_branch")
    t = np.linspace(0.0, 1.0, 10001)
    x = x_tau(t, 0.0)
    curve = SolutionCurve(t, "atoms", np.ones((t.size, 1)), x[:, None], provenance="analytic")
    # trapezoid oracle for d/dt tanh(x(t)) = b(x) tanh'(x)
    integrand = np.minimum(np.sqrt(x), 1) / np.cosh(x) ** 2
    oracle = np.tanh(x[-1]) - np.trapezoid(integrand, t)
    val = weak_residual(curve, p, [TANH], [(0.0, 1.0)])
    assert val <= 1e-5
    assert val == pytest.approx(abs(oracle), abs=1e-12)


def test_residual_of_frozen_heat_curve():
    p = preset("heat")
    grid = default_grid(p, 0.01)
    nu = Measure.normal(grid, 0.0, 0.1)
    curve = constant_curve(np.linspace(0, 1, 101), nu)
    expected, _ = spi.quad(lambda x: -0.5 * np.cos(x) * stats.norm.pdf(x, scale=math.sqrt(0.1)),
                           -6, 6)
    val = weak_residual(curve, p, [from_id("cos[1;0]")], [(0.0, 1.0)])
    assert val > 0.01
    assert val == pytest.approx(abs(expected), rel=1e-4)


def test_residual_pair_outside_interval_rejected():
    curve = constant_curve(np.linspace(0.5, 1, 6), Measure.dirac(0.0))
    with pytest.raises(CurveError):
        weak_residual(curve, preset("zero"), [TANH], [(0.25, 1.0)])


def test_residual_decreases_under_refinement():
    p = preset("heat")
    vals = []
    for dx, dt in ((0.08, 1e-4), (0.04, 2.5e-5)):
        grid = default_grid(p, dx)
        c = solve_forward(p, 0.0, Measure.dirac(0.0), dt, grid)
        vals.append(weak_residual(c, p))
    assert vals[0] / vals[1] >= 1.3


# -- narrow continuity ----------------------------------------------------------------

def test_continuity_modulus_of_constant_curve_is_zero():
    curve = constant_curve(np.linspace(0, 1, 5), Measure.atoms([0.0, 1.0]))
    assert narrow_continuity_modulus(curve, standard_test_family(1)) == 0.0


def test_continuity_modulus_heat_within_generator_bound():
    p = preset("heat")
    grid = default_grid(p, 0.02)
    curve = solve_forward(p, 0.0, Measure.dirac(0.0), 1e-4, grid, TimeGrid.from_step(1.0, 1e-3))
    x = np.linspace(-10, 10, 200001)[:, None]
    f2 = np.max(np.abs(TANH.hess(x)))
    f1 = np.max(np.abs(TANH.grad(x)))
    bound = 0.5 * f2 * 1e-3 + p.coefficients.sup_bound_b * f1 * 1e-3
    val = narrow_continuity_modulus(curve, [TANH])
    assert val <= 0.05
    assert val <= bound + 1e-12


def test_continuity_modulus_needs_two_times():
    curve = constant_curve(np.array([0.0]), Measure.dirac(0.0))
    with pytest.raises(CurveError):
        narrow_continuity_modulus(curve, [TANH])


def test_curve_continuity_constant_recorded():
    p = preset("heat")
    grid = default_grid(p, 0.05)
    curve = solve_forward(p, 0.0, Measure.dirac(0.0), 1e-3, grid, TimeGrid.from_step(1.0, 0.01))
    C = curve.continuity_constant
    w = np.array([wasserstein1(curve.marginal(k), curve.marginal(k + 1))
                  for k in range(curve.n_times - 1)])
    assert np.all(w <= C * np.sqrt(np.diff(curve.times)) + 1e-12)


# -- characteristics and 2D ----------------------------------------------------------

def test_rk4_against_closed_form():
    times = np.linspace(0.0, 1.0, 11)
    path = rk4_path(lambda t, x: -x, np.array([[1.0]]), times, nsub=10)
    assert np.allclose(path[:, 0, 0], np.exp(-times), atol=1e-9)


def test_sqrt_characteristic_from_positive_start():
    p = preset("sqrt_branch")
    t0 = 0.0625
    curve = solve_forward(p, 0.0, Measure.dirac(t0), 1e-4, times=TimeGrid.from_step(1.0, 1e-3))
    # x(t) = ((t + 0.5)/2)^2 from x(0) = 0.0625
    assert np.allclose(curve.points[:, 0, 0], ((curve.times + 0.5) / 2) ** 2, atol=1e-10)


def test_two_dimensional_heat_variance():
    p = custom_problem("[[1, 0], [0, 1]]", "[0, 0]", 2, 1.0, ((-4.0, 4.0), (-4.0, 4.0)))
    grid = GridSpec.centered([-4.0, -4.0], [4.0, 4.0], 0.1)
    nu, _ = to_grid(Measure.dirac([0.0, 0.0]), grid)
    curve = solve_forward(p, 0.0, nu, 2.5e-3, grid, TimeGrid.from_step(1.0, 0.05))
    m = curve.at(0.5)
    assert math.fsum(m.weights) == pytest.approx(1.0, abs=1e-9)
    assert m.moment(2, 0) == pytest.approx(0.5, rel=0.03)
    assert m.moment(2, 1) == pytest.approx(0.5, rel=0.03)


def test_curve_save_load_round_trip(tmp_path):
    p = preset("heat")
    grid = default_grid(p, 0.05)
    curve = solve_forward(p, 0.0, Measure.dirac(0.0), 1e-3, grid, TimeGrid.from_step(1.0, 0.25))
    save_curve(curve, tmp_path / "c")
    back = load_curve(tmp_path / "c")
    assert back.key() == curve.key()
    assert np.max(np.abs(back.weights - curve.weights)) <= 1e-15
