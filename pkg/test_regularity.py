"""Tests for affine fits, dyadic decay, singular sets and the flatness constants"""

import numpy as np
import pytest

from grid import AffineFn, ScalarField, affine_field, make_grid, sample, sup_norm_on_ball
from operators import DegeneracySpec, DomainError, trace_operator
from oracle import aronsson, ode_profile, p_radial_profile, radial_profile
from regularity import (
    TABLE_COLUMNS,
    UnderdeterminedFitError,
    best_affine_fit,
    dyadic_decay,
    exponent_vs_gamma_table,
    flatness_check,
    holder_constant,
    limit_affine,
    predicted_holder_constant,
    print_decay_report,
    proof_constants,
    sharp_exponent,
    singular_set,
)
from solver import ProblemSpec, SolveConfig, constant_fn, solve_dirichlet, solve_ode_bvp


def power_field(n, power, shift=0.0, scale=1.0):
    grid = make_grid(1, n, -1.0, 1.0)
    return sample(grid, lambda X: scale * np.abs(X[:, 0] - shift) ** power)


# ---------------------------------------------------------------------------
# Best affine fit
# ---------------------------------------------------------------------------

def test_affine_field_is_fitted_exactly():
    grid = make_grid(2, 17, -1.0, 1.0)
    ell = AffineFn(0.3, [1.5, -2.0])
    ell_hat, E = best_affine_fit(affine_field(grid, ell), [0.25, 0.0], 0.5)
    assert E < 1e-12
    assert ell_hat.a == pytest.approx(0.3, abs=1e-12)
    assert np.allclose(ell_hat.b, [1.5, -2.0], atol=1e-12)


def test_chebyshev_fit_of_a_parabola():
    field = power_field(201, 2.0)
    ell, E = best_affine_fit(field, [0.0], 0.3)
    assert E == pytest.approx(0.045, rel=0.02)
    assert ell.a == pytest.approx(0.045, rel=0.02)
    assert abs(ell.b[0]) < 1e-9


def test_minimax_is_no_worse_than_least_squares():
    grid = make_grid(2, 33, -1.0, 1.0)
    rng = np.random.default_rng(5)
    field = ScalarField(grid, rng.standard_normal(grid.size))
    points = grid.points[grid.ball_mask([0.0, 0.0], 0.5)]
    values = field.values[grid.ball_mask([0.0, 0.0], 0.5)]
    design = np.hstack([np.ones((len(points), 1)), points])
    coef = np.linalg.lstsq(design, values, rcond=None)[0]
    ls_error = np.max(np.abs(values - design @ coef))
    _, E = best_affine_fit(field, [0.0, 0.0], 0.5)
    assert E <= ls_error + 1e-12


def test_fit_on_a_tiny_ball_is_underdetermined():
    field = power_field(9, 2.0)
    with pytest.raises(UnderdeterminedFitError):
        best_affine_fit(field, [0.0], 0.01)


# ---------------------------------------------------------------------------
# Dyadic decay
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("a", [0.25, 0.5, 0.75])
def test_decay_exponent_calibration(a):
    report = dyadic_decay(power_field(4097, 1.0 + a), [0.0], rho0=0.5, K=8, verbose=False)
    assert abs(report.alpha_hat - a) <= 0.02
    assert report.used_levels == list(range(9))
    assert report.flags == []


@pytest.mark.parametrize("p", [3.0, 4.0])
def test_decay_exponent_of_the_p_radial_profile(p):
    oracle = p_radial_profile(p, 1)
    field = sample(make_grid(1, 4097, -1.0, 1.0), oracle.eval)
    report = dyadic_decay(field, [0.0], K=8, verbose=False)
    assert abs(report.alpha_hat - oracle.alpha_expected) <= 0.03


def test_affine_field_saturates():
    grid = make_grid(2, 33, -1.0, 1.0)
    report = dyadic_decay(affine_field(grid, AffineFn(1.0, [0.5, 0.25])), [0.0, 0.0], K=3, verbose=False)
    assert report.saturated
    assert report.alpha_hat is None
    assert report.C0_hat is None


def test_decay_truncates_when_balls_run_out_of_points():
    report = dyadic_decay(power_field(65, 1.5), [0.0], K=8, verbose=False)
    assert any(flag.startswith("truncated-at-K=") for flag in report.flags)
    assert len(report.levels) < 9


def test_decay_stops_where_balls_span_few_cells():
    # h = 1/64, so radius 1/16 is the last level spanning four cells
    report = dyadic_decay(power_field(129, 1.5), [0.0], K=6, verbose=False)
    assert [level.k for level in report.levels] == [0, 1, 2, 3, 4]
    assert "truncated-at-K=4" in report.flags
    assert abs(report.alpha_hat - 0.5) <= 0.02


def test_decay_rejects_bad_parameters():
    field = power_field(65, 1.5)
    with pytest.raises(DomainError):
        dyadic_decay(field, [0.0], rho0=0.75)
    with pytest.raises(DomainError):
        dyadic_decay(field, [0.0], K=0)


def test_decay_is_translation_equivariant():
    base = dyadic_decay(power_field(257, 1.5), [0.0], K=5, verbose=False)
    moved = dyadic_decay(power_field(257, 1.5, shift=0.25), [0.25], K=5, verbose=False)
    # the unit ball around 0.25 is clipped by the box, the smaller ones are not
    for a, b in zip(base.levels[1:], moved.levels[1:]):
        assert b.E == pytest.approx(a.E, rel=1e-6, abs=1e-14)
        assert b.ell.b == pytest.approx(a.ell.b, abs=1e-6)


def test_decay_is_scale_covariant():
    grid = make_grid(1, 1025, -1.0, 1.0)
    u = sample(grid, lambda X: np.abs(X[:, 0]) ** 1.5)
    v = ScalarField(grid, 3.0 * u.values + 2.0 + 0.5 * grid.points[:, 0])
    ru = dyadic_decay(u, [0.0], K=6, verbose=False)
    rv = dyadic_decay(v, [0.0], K=6, verbose=False)
    for a, b in zip(ru.levels, rv.levels):
        assert b.E == pytest.approx(3.0 * a.E, rel=1e-4)
    assert rv.alpha_hat == pytest.approx(ru.alpha_hat, abs=1e-4)


def test_coefficient_constants_are_finite():
    report = dyadic_decay(power_field(1025, 1.5), [0.0], K=6, verbose=False)
    assert np.isfinite(report.C0_hat) and report.C0_hat >= 0
    assert np.isfinite(predicted_holder_constant(report))
    assert limit_affine(report) is report.levels[-1].ell


def test_holder_constant_of_a_pure_power():
    field = power_field(4097, 1.5)
    report = dyadic_decay(field, [0.0], K=8, verbose=False)
    assert holder_constant(field, report) == pytest.approx(1.0, abs=1e-3)


@pytest.mark.slow
def test_aronsson_exponent_at_the_origin():
    grid = make_grid(2, 513, -1.0, 1.0)
    field = sample(grid, aronsson().eval)
    report = dyadic_decay(field, [0.0, 0.0], rho0=0.5, K=6, verbose=False)
    assert abs(report.alpha_hat - 1.0 / 3.0) <= 0.03


@pytest.mark.slow
@pytest.mark.parametrize("gamma", [0.5, 1.0, 2.0, 3.0])
def test_sharp_exponent_of_the_1d_solution(gamma):
    c = ode_profile(gamma).params["c"]
    field = solve_ode_bvp(gamma, constant_fn(1.0), -1.0, 1.0, c, c, 2049)
    report = dyadic_decay(field, [0.0], rho0=0.5, K=8, verbose=False)
    assert report.used_levels == list(range(9))
    assert abs(report.alpha_hat - 1.0 / (1.0 + gamma)) <= 0.05


def test_print_decay_report(capsys):
    report = dyadic_decay(power_field(257, 1.5), [0.0], K=3, verbose=False)
    print_decay_report(report)
    out = capsys.readouterr().out
    assert "DYADIC DECAY" in out
    assert f"alpha_hat: {report.alpha_hat:.4f}" in out
    assert out.count("k=") == 4


def test_report_serializes_levels():
    report = dyadic_decay(power_field(257, 1.5), [0.0], K=3, verbose=False)
    data = report.to_dict()
    assert [level["k"] for level in data["levels"]] == [0, 1, 2, 3]
    assert set(data) >= {"center", "rho0", "levels", "alpha_hat", "C0_hat", "fit_residual", "flags"}


# ---------------------------------------------------------------------------
# Singular set
# ---------------------------------------------------------------------------

def test_singular_set_of_a_parabola():
    grid = make_grid(1, 9, -1.0, 1.0)
    field = sample(grid, lambda X: X[:, 0] ** 2)
    assert np.flatnonzero(singular_set(field)).tolist() == [4]
    assert singular_set(field, threshold=0.6).sum() == 3


def test_singular_set_of_a_tilted_plane_is_empty():
    grid = make_grid(2, 17, -1.0, 1.0)
    field = affine_field(grid, AffineFn(0.0, [1.0, 0.0]))
    mask = singular_set(field)
    assert mask.shape == (grid.size,)
    assert not mask.any()
    with pytest.raises(DomainError):
        singular_set(field, threshold=-1.0)


# ---------------------------------------------------------------------------
# Flatness-improvement constants
# ---------------------------------------------------------------------------

def test_proof_constants():
    constants = proof_constants(2.0, 0.5, 0.25, C0=1.0)
    rho0 = 0.25 ** 4
    assert constants.rho0 == pytest.approx(rho0)
    assert constants.delta == pytest.approx(0.5 * rho0 ** 1.25)
    assert constants.C_final == pytest.approx(rho0 ** -1.25 * (1.0 + 1.0 / (1.0 - rho0)))
    assert not constants.rho0_capped


def test_proof_constants_cap_rho0():
    constants = proof_constants(0.6, 1.0, 0.5)
    assert constants.rho0_capped
    assert constants.rho0 == 0.5
    assert constants.rho0_formula == pytest.approx((1.0 / 1.2) ** 2)
    assert constants.delta == pytest.approx(0.5 * 0.5 ** 1.5)


@pytest.mark.parametrize("args", [(2.0, 0.5, 0.5), (2.0, 0.5, 0.0), (0.5, 0.5, 0.25)])
def test_proof_constants_reject_invalid(args):
    with pytest.raises(DomainError):
        proof_constants(*args)


def test_flatness_check_passes_for_a_small_power():
    constants = proof_constants(2.0, 1.0, 0.5)
    report = flatness_check(power_field(257, 1.5, scale=0.1), [0.0], constants)
    assert report.passed
    assert report.normalized
    assert report.E <= report.bound


def test_flatness_check_flags_large_data():
    constants = proof_constants(2.0, 1.0, 0.5)
    report = flatness_check(power_field(257, 1.5, scale=5.0), [0.0], constants)
    assert not report.passed
    assert not report.normalized
    assert any("not normalized" in note for note in report.notes)


def test_flatness_check_of_zero():
    constants = proof_constants(2.0, 1.0, 0.5)
    grid = make_grid(1, 257, -1.0, 1.0)
    report = flatness_check(ScalarField(grid, np.zeros(grid.size)), [0.0], constants)
    assert report.passed
    assert report.E == 0.0


def normalized(field):
    return ScalarField(field.grid, field.values / sup_norm_on_ball(field, np.zeros(field.grid.dim), 1.0))


def test_flatness_check_on_the_normalized_radial_profile():
    constants = proof_constants(0.55, 0.5, 0.4)
    assert not constants.rho0_capped
    field = normalized(sample(make_grid(2, 129, -1.0, 1.0), radial_profile(1.0, 2).eval))
    report = flatness_check(field, [0.0, 0.0], constants)
    assert report.normalized
    assert report.passed
    # minimax constant of r^{3/2} on the ball is half its top value
    assert report.E == pytest.approx(0.5 * constants.rho0 ** 1.5, rel=0.02)


@pytest.mark.slow
def test_flatness_check_on_the_normalized_radial_solution():
    grid = make_grid(2, 65, -1.0, 1.0)
    oracle = radial_profile(1.0, 2)
    problem = ProblemSpec(trace_operator(), DegeneracySpec(1.0), constant_fn(1.0), oracle.eval, grid)
    solution, _ = solve_dirichlet(problem, SolveConfig(tol=1e-5), verbose=False)
    report = flatness_check(normalized(solution), [0.0, 0.0], proof_constants(0.55, 0.5, 0.4))
    assert report.normalized
    assert report.passed
    assert report.E <= report.bound


def test_sharp_exponent():
    assert sharp_exponent(1.0, 1.0).alpha == 0.5
    assert sharp_exponent(1.0, 1.0).attained
    capped = sharp_exponent(0.3, 1.0)
    assert capped.alpha == 0.3
    assert not capped.attained
    with pytest.raises(DomainError):
        sharp_exponent(0.5, -1.0)


# ---------------------------------------------------------------------------
# Exponent table
# ---------------------------------------------------------------------------

@pytest.mark.slow
def test_exponent_table_with_default_grid_and_depth():
    rows = exponent_vs_gamma_table([1.0, 3.0], SolveConfig(tol=1e-5), verbose=False)
    assert [row["gamma"] for row in rows] == [1.0, 3.0]
    for row in rows:
        assert list(row) == TABLE_COLUMNS
        assert row["error"] == ""
        assert row["abs_err"] <= 0.05


def test_exponent_table_records_failures():
    grid = make_grid(1, 17, -1.0, 1.0)
    rows = exponent_vs_gamma_table([1.0, -0.5], SolveConfig(tol=1e-10, max_iters=1), grid=grid,
                                   verbose=False)
    assert len(rows) == 2
    assert all(row["error"] for row in rows)
    assert rows[0]["alpha_hat"] is None
