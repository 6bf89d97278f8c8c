import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mpgd.errors import ConfigError, TheoryAssertionError
from mpgd.theorylab import (
    QuadraticProblem, check_descent_lemma, check_theorem1, check_theorem2, gradient_descent,
    make_quadratic, measure_eta, power_iteration, problem_grid, theorem1_curve,
)


def jacobi_singular_values(A, sweeps=60):
    """One-sided Jacobi: orthogonalise column pairs until convergence."""
    U = np.array(A, dtype=np.float64)
    n = U.shape[1]
    for _ in range(sweeps):
        off = 0.0
        for i in range(n - 1):
            for j in range(i + 1, n):
                a, b = U[:, i] @ U[:, i], U[:, j] @ U[:, j]
                g = U[:, i] @ U[:, j]
                off = max(off, abs(g) / math.sqrt(a * b))
                if abs(g) < 1e-300:
                    continue
                zeta = (b - a) / (2 * g)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.sqrt(1 + zeta * zeta))
                c = 1 / math.sqrt(1 + t * t)
                s = c * t
                ui = U[:, i].copy()
                U[:, i] = c * ui - s * U[:, j]
                U[:, j] = s * ui + c * U[:, j]
        if off < 1e-15:
            break
    return np.sort(np.linalg.norm(U, axis=0))[::-1]


@pytest.fixture(scope="module")
def scalar():
    return QuadraticProblem.from_arrays([[1.0]], [1.0])


def test_scalar_problem(scalar):
    assert scalar.L == pytest.approx(2.0, rel=1e-12)
    assert scalar.l_star == 0.0
    tr = gradient_descent(scalar, 1, 1.0 / scalar.L)
    assert tr.w[-1] == pytest.approx([1.0])


def test_scalar_theorem1_equality(scalar):
    res = check_theorem1(scalar, 1)
    assert res.min_grad_sq == pytest.approx(4.0) and res.bound == pytest.approx(4.0)
    assert res.holds


def test_bound_halves_when_T_doubles():
    p = problem_grid(1)[0]
    _, bounds = theorem1_curve(p, 40)
    assert bounds[39] == pytest.approx(bounds[19] / 2, rel=1e-12)


def test_consistent_problem_has_zero_optimum():
    p = make_quadratic(4, 30, 10.0, True, seed=2)
    assert p.l_star == 0.0
    w = np.linalg.lstsq(p.A, p.b, rcond=None)[0]
    assert p.loss(w) < 1e-25


@pytest.mark.parametrize("d,cond", [(2, 10.0), (5, 10.0), (8, 10.0), (8, 100.0), (3, 1.0)])
def test_condition_number_against_jacobi_oracle(d, cond):
    p = make_quadratic(d, 40, cond, False, seed=d)
    sv = jacobi_singular_values(p.A)
    assert sv[0] / sv[-1] == pytest.approx(cond, rel=0.01)
    assert p.L == pytest.approx(2 * sv[0] ** 2 / p.m, rel=1e-8)


def test_power_iteration_against_eigvalsh():
    M = np.random.default_rng(0).normal(size=(6, 6))
    M = M @ M.T
    assert power_iteration(M) == pytest.approx(np.linalg.eigvalsh(M)[-1], rel=1e-8)


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 8), st.integers(8, 40), st.floats(1, 100), st.booleans(), st.integers(0, 10_000))
def test_descent_lemma_property(d, m, cond, consistent, seed):
    p = make_quadratic(d, m, cond, consistent, seed)
    assert check_descent_lemma(p, 50).ok


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 8), st.integers(8, 40), st.floats(1, 100), st.booleans(), st.integers(0, 10_000))
def test_theorem1_property(d, m, cond, consistent, seed):
    p = make_quadratic(d, m, cond, consistent, seed)
    mins, bounds = theorem1_curve(p, 50)
    assert np.all(mins <= bounds * (1 + 1e-9))


def test_overestimated_lipschitz_still_descends():
    p = problem_grid(3)[2]
    assert check_descent_lemma(p, 50, lipschitz=1.5 * p.L).ok


def test_large_step_reports_violations():
    p = make_quadratic(3, 30, 10.0, False, seed=0)
    rep = check_descent_lemma(p, 30, step_scale=2.2)
    assert not rep.ok and rep.violations
    with pytest.raises(TheoryAssertionError):
        rep.assert_ok()


def test_theorem2_full_fraction_replays_plain_descent():
    p = problem_grid(2, consistent=True)[1]
    run = check_theorem2(p, 1.0, 60)
    plain = gradient_descent(p, 60, 1.0 / p.L)
    assert run.trace.w.tobytes() == plain.w.tobytes()
    assert run.trace.loss.tobytes() == plain.loss.tobytes()
    assert np.all(run.eta[run.trace.grad_sq[:60] > 0] == 1.0)


def test_theorem2_single_entry_problem_is_plain_descent(scalar):
    run = check_theorem2(scalar, 0.05, 5)
    assert run.k == 1
    assert run.trace.w.tobytes() == gradient_descent(scalar, 5, 1.0 / scalar.L).w.tobytes()


def test_theorem2_topk_bound_and_decrease():
    for p in problem_grid(6, consistent=True):
        run = check_theorem2(p, 0.05, 100)
        assert run.k == 5
        assert run.holds
        assert run.trace.topk_loss[-1] < run.trace.topk_loss[0]


def test_theorem2_validates_fraction():
    with pytest.raises(ConfigError):
        check_theorem2(problem_grid(1)[0], 0.0, 10)


def test_measure_eta():
    s = measure_eta([1.0, 1.0, 1.0])
    assert (s.min, s.median, s.max, s.frac_ge_1) == (1.0, 1.0, 1.0, 1.0)
    run = check_theorem2(problem_grid(1, consistent=True)[0], 1.0, 20)
    assert measure_eta(run).frac_ge_1 == 1.0
    with pytest.raises(ValueError):
        measure_eta([])
