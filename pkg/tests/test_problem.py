import numpy as np
import pytest
from scipy.integrate import solve_ivp

from fpkflow.curve import SolutionCurve
from fpkflow.functions import from_id
from fpkflow.measure import Measure
from fpkflow.problem import (PRESETS, Coefficients, ProblemError, SampleSpec,
                             continuity_modulus, custom_problem, preset, sqrt_drift,
                             validate_coefficients)
from fpkflow.solver import weak_residual

from conftest import x_tau


@pytest.mark.parametrize("name", PRESETS)
def test_every_preset_validates_on_101_grid(name):
    p = preset(name)
    rep = validate_coefficients(p.coefficients, SampleSpec.grid(p.domain_box, p.T, 101))
    assert rep.passed, rep.to_dict()


def test_heat_checks_all_pass():
    p = preset("heat")
    rep = validate_coefficients(p.coefficients, SampleSpec.grid(p.domain_box, p.T, 11))
    assert [c.name for c in rep.checks] == ["finite", "symmetric", "nonneg_definite",
                                            "bounded_a", "bounded_b", "continuity_a",
                                            "continuity_b"]
    assert all(c.passed for c in rep.checks)


def test_negative_diffusion_fails_at_every_probe():
    def a(t, x):
        return -np.ones((len(np.atleast_2d(x)), 1, 1))

    def b(t, x):
        return np.zeros((len(np.atleast_2d(x)), 1))

    c = Coefficients(a, b, 1.0, 0.0, 1, 1.0)
    spec = SampleSpec.grid(((-1.0, 1.0),), 1.0, 11)
    rep = validate_coefficients(c, spec)
    assert not rep["nonneg_definite"].passed
    assert rep["nonneg_definite"].worst_value == 1.0
    # the smallest eigenvalue is -1 at every probe, not just the reported one
    A = a(0.0, spec.points)
    assert np.all(np.linalg.eigvalsh(A).min(axis=1) < 0)


def test_sqrt_modulus_at_zero_behaves_like_sqrt_h():
    mod = continuity_modulus(sqrt_drift, 0.0, [[0.0]], levels=20)[:, 0]
    h = 2.0 ** -np.arange(1, 21)
    assert np.allclose(mod, np.sqrt(h), rtol=0, atol=1e-15)
    # sqrt(h) modulus: not Lipschitz, the ratio grows like h^(-1/2)
    assert mod[-1] / h[-1] > 1000


def test_evaluator_failures_become_report_entries():
    def a(t, x):
        raise RuntimeError("boom")

    def b(t, x):
        return np.zeros((len(np.atleast_2d(x)), 1))

    rep = validate_coefficients(Coefficients(a, b, 1.0, 0.0, 1, 1.0),
                                SampleSpec.grid(((-1.0, 1.0),), 1.0, 5))
    assert not rep.passed
    assert "boom" in rep["finite"].detail


def test_nonfinite_coefficient_reported():
    def a(t, x):
        x = np.atleast_2d(x)
        return np.where(x[:, :1, None] > 0.5, np.nan, 1.0)

    def b(t, x):
        return np.zeros((len(np.atleast_2d(x)), 1))

    rep = validate_coefficients(Coefficients(a, b, 1.0, 0.0, 1, 1.0),
                                SampleSpec.grid(((-1.0, 1.0),), 1.0, 5))
    assert not rep["finite"].passed
    assert "non-finite" in rep["finite"].detail


def test_discontinuous_drift_fails_continuity():
    def a(t, x):
        return np.ones((len(np.atleast_2d(x)), 1, 1))

    def b(t, x):
        return np.sign(np.atleast_2d(x))

    rep = validate_coefficients(Coefficients(a, b, 1.0, 1.0, 1, 1.0),
                                SampleSpec(np.array([0.0]), np.array([[0.0], [0.3]])))
    assert rep["continuity_a"].passed
    assert not rep["continuity_b"].passed


def test_empty_sample_spec_rejected():
    p = preset("heat")
    with pytest.raises(ProblemError):
        validate_coefficients(p.coefficients, SampleSpec(np.array([]), np.zeros((0, 1))))


def test_zero_known_solution_is_constant():
    p = preset("zero")
    nu = Measure.dirac(0.0)
    for t in (0.0, 0.3, 1.0):
        m = p.known_solution(0.0, nu, t).to_measure()
        assert m.key() == nu.key()


def test_heat_known_variance_matches_moment_ode():
    # weak form with f = x^2: d/dt m2 = int L x^2 = int 1 = 1
    sol = solve_ivp(lambda t, m: [1.0], (0.0, 1.0), [0.0], rtol=1e-12, atol=1e-14)
    p = preset("heat")
    ana = p.known_solution(0.0, Measure.dirac(0.0), 1.0)
    assert ana.second_moment() == pytest.approx(sol.y[0, -1], abs=1e-10)
    assert ana.second_moment() == pytest.approx(1.0, abs=1e-12)


def test_sqrt_drift_value():
    p = preset("sqrt_branch")
    assert p.drift(0.0, np.array([[0.25]]))[0, 0] == 0.5
    assert p.drift(0.0, np.array([[-0.3], [4.0]]))[:, 0].tolist() == [0.0, 1.0]


def test_unknown_preset_lists_names():
    with pytest.raises(ProblemError) as err:
        preset("burgers")
    for name in PRESETS:
        assert name in str(err.value)


@pytest.mark.parametrize("tau", [0.0, 0.25, 0.5])
def test_sqrt_branches_are_weak_solutions(tau):
    p = preset("sqrt_branch")
    t = np.linspace(0.0, 1.0, 10001)
    curve = SolutionCurve(t, "atoms", np.ones((t.size, 1)), x_tau(t, tau)[:, None],
                          provenance="analytic")
    assert weak_residual(curve, p) <= 1e-6


def test_generator_heat_on_cos():
    p = preset("heat")
    f = from_id("cos[1;0]")
    x = np.linspace(-2, 2, 7)[:, None]
    assert np.allclose(p.apply_generator(f, 0.0, x), -0.5 * np.cos(x[:, 0]), atol=1e-15)


def test_custom_problem_from_expressions():
    p = custom_problem("1 + 0.5*tanh(x)", "-tanh(x)", 1, 1.0, ((-4.0, 4.0),))
    assert p.coefficients.sup_bound_a == pytest.approx(1 + 0.5 * np.tanh(4.0), abs=1e-12)
    assert p.coefficients.sup_bound_b == pytest.approx(np.tanh(4.0), abs=1e-12)
    rep = validate_coefficients(p.coefficients, SampleSpec.grid(p.domain_box, p.T, 21))
    assert rep.passed


def test_custom_problem_2d_shapes():
    p = custom_problem("[[1, 0], [0, 0.5]]", "[-tanh(x), -tanh(y)]", 2, 1.0)
    x = np.zeros((4, 2))
    assert p.diffusion(0.0, x).shape == (4, 2, 2)
    assert p.drift(0.0, x).shape == (4, 2)


def test_coefficients_extend_constantly_outside_the_box():
    p = preset("ou_tanh")
    inside = p.drift(0.0, np.array([[6.0]]))
    outside = p.drift(0.0, np.array([[60.0]]))
    assert np.array_equal(inside, outside)
