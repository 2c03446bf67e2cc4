import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fpkflow.curve import TimeGrid
from fpkflow.family import CandidateParams, generate_candidates
from fpkflow.measure import Measure
from fpkflow.problem import preset
from fpkflow.solver import default_grid

settings.register_profile("default", deadline=None, max_examples=100,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

SQRT_Q = (0.0, 0.25, 0.5, 0.75, 1.0)


def x_tau(t, tau):
    """Closed-form branch of x' = sqrt(x) leaving 0 at time tau."""
    return (np.maximum(np.asarray(t) - tau, 0.0) / 2.0) ** 2


@pytest.fixture(scope="session")
def sqrt_problem():
    return preset("sqrt_branch")


@pytest.fixture(scope="session")
def sqrt_params():
    return CandidateParams(TimeGrid.from_step(1.0, 1e-4), SQRT_Q, 1e-4,
                           branch_times=(0.0, 0.5))


@pytest.fixture(scope="session")
def sqrt_catalog(sqrt_problem, sqrt_params):
    """Three branches from delta_0: depart at 0, depart at 0.5, stay."""
    return generate_candidates(sqrt_problem, 0.0, Measure.dirac(0.0), "branching_catalog",
                               sqrt_params)


@pytest.fixture(scope="session")
def heat_problem():
    return preset("heat")


@pytest.fixture(scope="session")
def heat_params(heat_problem):
    return CandidateParams(TimeGrid.from_step(1.0, 1e-3), SQRT_Q, 1e-4,
                           grid=default_grid(heat_problem, 0.02))


def random_candidate_set(rng, max_size=6, n_functions=4, checkpoints=(0.0, 0.5, 1.0)):
    """Distinct atomic curves from delta_0 on a lattice, certified with residual 0.

    Atoms sit on multiples of 1/4 so integrals either tie exactly or differ by
    far more than any tie tolerance.
    """
    from fpkflow.curve import SolutionCurve
    from fpkflow.family import CandidateSet

    times = np.asarray(checkpoints)
    curves, keys = [], set()
    for _ in range(int(rng.integers(1, max_size + 1))):
        n_atoms = int(rng.integers(1, 3))
        pts = rng.integers(-4, 5, size=(times.size, n_atoms)) / 4.0
        pts[0] = 0.0
        w = np.full((times.size, n_atoms), 1.0 / n_atoms)
        c = SolutionCurve(times, "atoms", w, pts, provenance="analytic",
                          label=f"c{len(curves)}").with_certificate(residual=0.0)
        if c.key() not in keys:
            keys.add(c.key())
            curves.append(c)
    return CandidateSet(0.0, Measure.dirac(0.0), tuple(curves))


def random_enumeration(rng, n_functions=4, checkpoints=(0.0, 0.5, 1.0)):
    from fpkflow.selection import Enumeration

    pairs = [(i, q) for i in range(n_functions) for q in checkpoints]
    order = rng.permutation(len(pairs))
    return Enumeration(tuple(pairs[k] for k in order), n_functions, tuple(checkpoints))


def small_family():
    from fpkflow.functions import ridge
    from fpkflow.selection import MeasureDeterminingFamily

    f, g = ridge("tanh", [1.0]), ridge("tanh", [2.0], 1.0)
    return MeasureDeterminingFamily((f, f.negated(), g, g.negated()), closed_under_negation=True)
