"""Tests for operators, degeneracy laws, structure audits and finite differences"""

import numpy as np
import pytest

from grid import Jet, make_grid, sample
from operators import (
    DegeneracyForm,
    DegeneracySpec,
    DomainError,
    StencilError,
    check_concavity,
    check_degeneracy_bounds,
    check_ellipticity,
    equation_residual,
    eval_dF_dM,
    eval_F,
    eval_H,
    eval_H_eps,
    fd_derivatives,
    fd_gradient_norm,
    fd_jet,
    from_spectrum,
    infinity_laplacian,
    infinity_operator,
    linear_operator,
    min_of_linears,
    omega_norm_estimate,
    p_laplacian_nondiv,
    p_laplacian_operator,
    power_modulus,
    pucci_minus,
    pucci_plus,
    random_rotations,
    random_symmetric,
    trace_operator,
)
from oracle import aronsson, p_radial_profile, radial_profile, separable_infinity_harmonic
from solver import ProblemSpec, constant_fn


def radial_coefficient(X):
    X = np.asarray(X, dtype=float)
    return (1.0 + np.linalg.norm(X, axis=-1))[..., None, None] * np.eye(X.shape[-1])


# ---------------------------------------------------------------------------
# Operator evaluation
# ---------------------------------------------------------------------------

def test_trace_and_pucci_values():
    M = np.diag([2.0, -1.0])
    X = np.zeros(2)
    assert eval_F(trace_operator(), X, M) == 1.0
    assert eval_F(pucci_minus(1.0, 2.0), X, M) == pytest.approx(0.0)
    assert eval_F(pucci_plus(1.0, 2.0), X, M) == pytest.approx(3.0)


def test_eval_F_broadcasts_over_points():
    M = np.stack([np.eye(2), 2 * np.eye(2), -np.eye(2)])
    X = np.zeros((3, 2))
    assert eval_F(trace_operator(), X, M).tolist() == [2.0, 4.0, -2.0]


def test_linear_and_min_of_linears():
    op = linear_operator(radial_coefficient, 1.0, 2.0)
    assert eval_F(op, np.array([0.6, 0.8]), np.eye(2)) == pytest.approx(4.0)
    family = min_of_linears([np.eye(2), np.diag([2.0, 0.5])])
    assert eval_F(family, np.zeros(2), np.diag([1.0, 1.0])) == pytest.approx(2.0)
    assert eval_F(family, np.zeros(2), np.diag([-1.0, 1.0])) == pytest.approx(-1.5)


def test_asymmetric_matrix_is_a_domain_error():
    with pytest.raises(DomainError):
        eval_F(trace_operator(), np.zeros(2), np.array([[1.0, 1.0], [0.0, 1.0]]))


def test_gradient_kinds_need_the_gradient():
    with pytest.raises(DomainError):
        eval_F(infinity_operator(), np.zeros(2), np.eye(2))
    value = eval_F(infinity_operator(), np.zeros(2), np.diag([1.0, 3.0]), p=np.array([1.0, 2.0]))
    assert value == pytest.approx(13.0)


def test_p_laplacian():
    jet = Jet(0.0, [1.0, 0.0], np.diag([2.0, 3.0]))
    assert p_laplacian_nondiv(jet, 2.0) == pytest.approx(5.0)
    # |p|^{p-2} tr + (p-2)|p|^{p-4} p.M.p with |p| = 1
    assert p_laplacian_nondiv(jet, 4.0) == pytest.approx(5.0 + 2.0 * 2.0)
    assert p_laplacian_nondiv(Jet(0.0, [0.0, 0.0], np.eye(2)), 3.0) == 0.0
    with pytest.raises(DomainError):
        p_laplacian_nondiv(jet, 1.5)
    with pytest.raises(DomainError):
        p_laplacian_operator(1.5)


def test_infinity_laplacian_of_a_jet():
    jet = Jet(0.0, [1.0, 1.0], [[1.0, 2.0], [2.0, -1.0]])
    assert infinity_laplacian(jet) == pytest.approx(4.0)


@pytest.mark.parametrize("t", [-1.5, 0.1, 2.5])
def test_infinity_laplacian_is_cubic_under_scaling(t):
    rng = np.random.default_rng(8)
    gradient = rng.standard_normal(2)
    hessian = random_symmetric(rng, 1, 2)[0]
    jet = Jet(0.7, gradient, hessian)
    base = infinity_laplacian(jet)
    scaled = infinity_laplacian(jet.scaled(t, t, t))
    assert scaled == pytest.approx(t ** 3 * base, rel=1e-12, abs=1e-14)


def test_degeneracy_law():
    H = DegeneracySpec(1.0)
    assert eval_H(H, np.zeros(2), np.array([3.0, 4.0])) == 5.0
    assert eval_H(DegeneracySpec(0.0), np.zeros(2), np.zeros(2)) == 1.0
    assert eval_H_eps(H, np.zeros(2), np.zeros(2), 0.1) == pytest.approx(0.1)
    with pytest.raises(DomainError):
        DegeneracySpec(-0.5)
    with pytest.raises(DomainError):
        DegeneracySpec(1.0, form=DegeneracyForm.MODULATED)


def test_equation_residual_of_radial_oracle():
    oracle = radial_profile(1.0, 2)
    problem = ProblemSpec(trace_operator(), DegeneracySpec(1.0), constant_fn(1.0), oracle.eval,
                          make_grid(2, 9, -1.0, 1.0))
    X = np.array([0.3, -0.2])
    assert abs(equation_residual(problem, oracle.jet(X), X)) < 1e-12


def test_dF_dM_matches_directional_derivative():
    M = np.diag([2.0, -1.0])
    A = eval_dF_dM(pucci_minus(1.0, 3.0), np.zeros(2), M)
    assert np.allclose(A, np.diag([1.0, 3.0]))
    P = np.array([[0.3, 0.1], [0.1, -0.2]])
    t = 1e-3
    op = pucci_minus(1.0, 3.0)
    directional = (eval_F(op, np.zeros(2), M + t * P) - eval_F(op, np.zeros(2), M)) / t
    assert directional == pytest.approx(np.sum(A * P), rel=1e-4)
    assert np.allclose(eval_dF_dM(trace_operator(), np.zeros(2), M), np.eye(2))


# ---------------------------------------------------------------------------
# Structure audits
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("op", [trace_operator(), pucci_minus(1.0, 2.0), pucci_plus(0.5, 3.0),
                                linear_operator(radial_coefficient, 1.0, 2.5)])
def test_ellipticity_passes_for_declared_constants(op):
    report = check_ellipticity(op, trial_count=1000, rng_seed=3)
    assert report.passed
    assert report.min_ratio >= report.lam_eff - 1e-9
    assert report.max_ratio <= report.Lam_eff + 1e-9


def test_ellipticity_fails_for_understated_constants():
    op = linear_operator(lambda X: 3.0 * np.broadcast_to(np.eye(2), X.shape[:-1] + (2, 2)), 1.0, 1.0)
    assert not check_ellipticity(op, trial_count=200).passed


def test_ellipticity_rejects_gradient_kinds():
    with pytest.raises(DomainError):
        check_ellipticity(infinity_operator())


def test_concavity_audit():
    assert check_concavity(pucci_minus(1.0, 2.0)).passed
    assert check_concavity(trace_operator()).passed
    assert not check_concavity(pucci_plus(1.0, 2.0)).passed
    assert check_concavity(min_of_linears([np.eye(2), np.diag([2.0, 0.5])])).passed


@pytest.mark.parametrize("op", [trace_operator(), pucci_minus(1.0, 2.0), pucci_plus(0.5, 3.0),
                                min_of_linears([np.eye(2), np.diag([2.0, 0.5])]),
                                linear_operator(radial_coefficient, 1.0, 2.5)])
def test_degenerate_equation_is_monotone_in_the_hessian(op):
    rng = np.random.default_rng(12)
    count = 2000
    X = rng.uniform(-1.0, 1.0, (count, 2))
    M = random_symmetric(rng, count, 2, scale=2.0)
    P = from_spectrum(random_rotations(rng, count, 2), rng.uniform(0.0, 1.0, (count, 2)))
    p = rng.standard_normal((count, 2))
    p[::10] = 0.0
    H = eval_H(DegeneracySpec(1.5), X, p)
    before = H * eval_F(op, X, M)
    after = H * eval_F(op, X, M + P)
    assert np.all(after - before >= -1e-12 * (1.0 + np.abs(before)))
    assert np.all(after[::10] == 0.0)


def test_degeneracy_bounds_audit():
    assert check_degeneracy_bounds(DegeneracySpec(1.5), sample_count=20_000).violations == 0

    def modulation(X):
        return 1.0 + 0.5 * (np.asarray(X)[..., 0] + 1.0)

    good = DegeneracySpec(1.0, lam=1.0, Lam=2.0, form=DegeneracyForm.MODULATED, modulation=modulation)
    bad = DegeneracySpec(1.0, lam=1.0, Lam=1.5, form=DegeneracyForm.MODULATED, modulation=modulation)
    assert check_degeneracy_bounds(good, sample_count=20_000).passed
    assert check_degeneracy_bounds(bad, sample_count=20_000).violations > 0


def test_omega_norm_of_radial_coefficients():
    op = linear_operator(radial_coefficient, 1.0, 2.0)
    estimate = omega_norm_estimate(op, power_modulus(1.0), sample_count=20_000, rng_seed=0)
    assert 1.8 <= estimate <= 2.0 + 1e-9
    assert omega_norm_estimate(trace_operator(), power_modulus(1.0)) == 0.0


def test_modulus_inverse():
    omega = power_modulus(0.5)
    assert omega.is_valid()
    assert omega.inverse(0.25) == pytest.approx(0.0625, abs=1e-10)
    assert omega.inverse(2.0) == 1.0
    assert omega.inverse(0.0) == 0.0


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------

def test_fd_jet_is_exact_on_quadratics():
    grid = make_grid(2, 9, -1.0, 1.0)
    field = sample(grid, lambda X: 1 + X[:, 0] - 2 * X[:, 1] + X[:, 0] ** 2 + 3 * X[:, 0] * X[:, 1])
    jet = fd_jet(field, grid.index_of([0.25, -0.5]))
    assert np.allclose(jet.gradient, [1 + 0.5 - 1.5, -2 + 0.75])
    assert np.allclose(jet.hessian, [[2.0, 3.0], [3.0, 0.0]])


def test_fd_jet_rejects_boundary_points():
    grid = make_grid(2, 9, -1.0, 1.0)
    field = sample(grid, lambda X: X[:, 0])
    with pytest.raises(StencilError):
        fd_jet(field, grid.index_of([-1.0, 0.0]))


@pytest.mark.parametrize("oracle", [
    radial_profile(1.0, 2),
    aronsson(),
    separable_infinity_harmonic([1.0, -1.0], [1.0, 2.0]),
    p_radial_profile(3.0, 2),
], ids=["radial", "aronsson", "separable", "p-radial"])
def test_fd_jet_converges_at_second_order(oracle):
    point = np.array([0.5, 0.25])
    exact = oracle.jet(point)
    errors = []
    for n in (65, 129, 257):
        grid = make_grid(2, n, -1.0, 1.0)
        jet = fd_jet(sample(grid, oracle.eval), grid.index_of(point))
        errors.append(max(np.max(np.abs(jet.gradient - exact.gradient)),
                          np.max(np.abs(jet.hessian - exact.hessian))))
    orders = np.log2(np.array(errors[:-1]) / np.array(errors[1:]))
    assert np.all((orders >= 1.8) & (orders <= 2.2))


def test_fd_derivatives_match_fd_jet():
    grid = make_grid(2, 9, -1.0, 1.0)
    field = sample(grid, lambda X: np.sin(X[:, 0]) * np.cos(2 * X[:, 1]))
    grad, hess = fd_derivatives(field.as_array(), grid.h)
    interior = np.flatnonzero(grid.interior_mask)
    jet = fd_jet(field, interior[10])
    assert np.allclose(grad[10], jet.gradient)
    assert np.allclose(hess[10], jet.hessian)


def test_gradient_norm_does_not_vanish_at_a_symmetric_minimum():
    grid = make_grid(1, 9, -1.0, 1.0)
    field = sample(grid, lambda X: X[:, 0] ** 2)
    norms = fd_gradient_norm(field.as_array(), grid.h)
    assert norms[3] == pytest.approx(grid.h)
    grad, _ = fd_derivatives(field.as_array(), grid.h)
    assert grad[3, 0] == 0.0
