"""
Regularity Module
Measures C^{1,alpha} regularity at a point: minimax affine fits on shrinking
balls, the decay exponent of the fit errors, the coefficient-Cauchy constant
of the affine sequence, singular-set extraction and the constants of the
flatness-improvement argument.
"""

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import linprog

from grid import AffineFn, EmptyBallError, Grid, ScalarField, ball_values, make_grid
from operators import DegeneracySpec, DomainError, fd_derivatives, trace_operator
from oracle import radial_profile
from solver import (
    ConvergenceFailure,
    NumericalBlowupError,
    ProblemSpec,
    SolveConfig,
    constant_fn,
    solve_dirichlet,
)


class UnderdeterminedFitError(ValueError):
    """Raised when a ball holds too few grid points for an affine fit"""


IRLS_MAX_ROUNDS = 50
IRLS_STAGNATION = 1e-12
NOISE_FACTOR = 10.0
NOISE_ULPS = 64.0
MIN_RESOLVED_CELLS = 4.0
CAP_FLAG_ALPHA = 0.95
TABLE_COLUMNS = ["gamma", "alpha_hat", "alpha_theory", "abs_err", "solver_residual", "error"]


@dataclass
class DecayLevel:
    k: int
    radius: float
    ell: AffineFn
    a: float
    E: float
    points: int
    noise: float

    def to_dict(self) -> dict:
        return {"k": self.k, "a": self.a, "b": self.ell.b.tolist(), "E": self.E}


@dataclass
class DecayReport:
    """Dyadic affine approximation of a field around one center"""
    center: np.ndarray
    rho0: float
    levels: list
    alpha_hat: Optional[float]
    alpha_raw: Optional[float]
    fit_residual: Optional[float]
    C0_hat: Optional[float]
    flags: list = field(default_factory=list)
    used_levels: list = field(default_factory=list)

    @property
    def saturated(self) -> bool:
        return "saturated" in self.flags

    def to_dict(self) -> dict:
        return {
            "center": np.asarray(self.center).tolist(),
            "rho0": self.rho0,
            "levels": [level.to_dict() for level in self.levels],
            "alpha_hat": self.alpha_hat,
            "alpha_raw": self.alpha_raw,
            "C0_hat": self.C0_hat,
            "fit_residual": self.fit_residual,
            "used_levels": list(self.used_levels),
            "flags": list(self.flags),
        }


@dataclass
class ProofConstants:
    C_univ: float
    alpha0: float
    alpha: float
    rho0: float
    delta: float
    C0: float
    C_final: float
    rho0_formula: float
    rho0_capped: bool = False

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class FlatnessReport:
    passed: bool
    E: Optional[float]
    bound: float
    coefficient_size: Optional[float]
    ell: Optional[AffineFn]
    normalized: bool
    notes: list = field(default_factory=list)


@dataclass
class SharpExponent:
    """min{alpha0-, 1/(1+gamma)}; attained means 1/(1+gamma) < alpha0, so the minimum is reached"""
    alpha: float
    attained: bool


def _minimax_lp(design: np.ndarray, values: np.ndarray) -> Optional[np.ndarray]:
    """Chebyshev fit min_c max_i |values_i - design_i . c| as a linear program"""
    count, width = design.shape
    ones = np.ones((count, 1))
    A_ub = np.vstack([np.hstack([-design, -ones]), np.hstack([design, -ones])])
    b_ub = np.concatenate([-values, values])
    cost = np.zeros(width + 1)
    cost[-1] = 1.0
    bounds = [(None, None)] * width + [(0, None)]
    result = linprog(cost, A_ub=A_ub, b_ub=b_ub, bounds=bounds, method="highs")
    return result.x[:width] if result.success else None


def best_affine_fit(field: ScalarField, center, radius: float) -> tuple[AffineFn, float]:
    """
    Sup-norm best affine approximation on the grid points of a closed ball.

    Least squares gives the start; Lawson's reweighting pushes it toward the
    minimax fit and a linear program on the near-extremal points finishes
    it. The returned E never exceeds the least-squares sup error.

    Returns:
        (ell, E) with ell in absolute coordinates and E = max |u - ell|
    """
    dim = field.grid.dim
    center = np.asarray(center, dtype=float).reshape(dim)
    try:
        points, values = ball_values(field, center, radius)
    except EmptyBallError as e:
        raise UnderdeterminedFitError(str(e)) from e
    if values.size < dim + 2:
        raise UnderdeterminedFitError(
            f"ball of radius {radius:g} holds {values.size} points, need at least {dim + 2}"
        )

    design = np.hstack([np.ones((values.size, 1)), (points - center) / radius])

    def sup_error(coef):
        residual = values - design @ coef
        return float(np.max(np.abs(residual))), residual

    coef = np.linalg.lstsq(design, values, rcond=None)[0]
    best_E, residual = sup_error(coef)
    best = coef

    weights = np.full(values.size, 1.0 / values.size)
    for _ in range(IRLS_MAX_ROUNDS):
        if best_E == 0.0:
            break
        weights = weights * np.abs(residual)
        total = weights.sum()
        if total == 0:
            break
        weights /= total
        root = np.sqrt(weights)
        coef = np.linalg.lstsq(design * root[:, None], values * root, rcond=None)[0]
        E, residual = sup_error(coef)
        improved = best_E - E
        if E < best_E:
            best, best_E = coef, E
        if improved < IRLS_STAGNATION:
            break

    if best_E > 0.0:
        _, residual = sup_error(best)
        active = np.abs(residual) >= 0.5 * best_E
        for _ in range(8):
            coef = _minimax_lp(design[active], values[active])
            if coef is None:
                break
            E, residual = sup_error(coef)
            if E < best_E:
                best, best_E = coef, E
            violated = (np.abs(residual) >= 0.5 * E) & ~active
            if not violated.any():
                break
            active |= violated

    slope = best[1:] / radius
    ell = AffineFn(best[0] - slope @ center, slope)
    return ell, best_E


def _noise_floor(field: ScalarField, center: np.ndarray, radius: float, ell: AffineFn) -> float:
    """
    Rounding level of a fit on this ball: the error of fitting the sampled
    affine function ell itself (exact answer 0), floored by a few ulps of the
    data scale.
    """
    points, values = ball_values(field, center, radius)
    scale = float(np.max(np.abs(values), initial=0.0))
    ramp = ScalarField(field.grid, ell(field.grid.points))
    ramp_E = best_affine_fit(ramp, center, radius)[1]
    return max(ramp_E, NOISE_ULPS * np.finfo(float).eps * scale)


def dyadic_decay(field: ScalarField, center, rho0: float = 0.5, K: int = 8,
                 verbose: bool = True) -> DecayReport:
    """
    Affine fits on the balls B_{rho0^k}(center), k = 0..K, and the decay
    exponent alpha_hat = slope(log E_k vs k log rho0) - 1 over the levels
    whose error stands above the rounding floor. Levels whose ball spans
    fewer than MIN_RESOLVED_CELLS grid cells are dropped and K is truncated.
    """
    if not 0 < rho0 <= 0.5:
        raise DomainError(f"rho0 must lie in (0, 1/2], got {rho0}")
    if int(K) != K or K < 1:
        raise DomainError(f"K must be a positive integer, got {K}")
    dim = field.grid.dim
    center = np.asarray(center, dtype=float).reshape(dim)
    flags = []

    levels = []
    floor = MIN_RESOLVED_CELLS * field.grid.h * (1.0 - 1e-12)
    for k in range(int(K) + 1):
        radius = rho0 ** k
        if k > 0 and radius < floor:
            flags.append(f"truncated-at-K={k - 1}")
            if verbose:
                print(f"   ⚠️  Ball of radius {radius:.3g} spans fewer than {MIN_RESOLVED_CELLS:g} grid cells, "
                      f"stopping at K={k - 1}")
            break
        try:
            ell, E = best_affine_fit(field, center, radius)
        except UnderdeterminedFitError:
            flags.append(f"truncated-at-K={k - 1}")
            if verbose:
                print(f"   ⚠️  Ball of radius {radius:.3g} is too small for a fit, stopping at K={k - 1}")
            break
        count = int(field.grid.ball_mask(center, radius).sum())
        noise = _noise_floor(field, center, radius, ell)
        levels.append(DecayLevel(k, radius, ell, float(ell(center)), E, count, noise))
    if not levels:
        raise UnderdeterminedFitError(f"no dyadic level around {center.tolist()} holds enough points")

    used = [lv for lv in levels if lv.E > NOISE_FACTOR * lv.noise]
    alpha_hat = alpha_raw = fit_residual = C0_hat = None
    if not used:
        flags.append("saturated")
    elif len(used) < 2:
        flags.append("insufficient-levels")
    else:
        x = np.array([lv.k * np.log(rho0) for lv in used])
        y = np.log([lv.E for lv in used])
        slope, intercept = np.polyfit(x, y, 1)
        fit_residual = float(np.sqrt(np.mean((y - (slope * x + intercept)) ** 2)))
        alpha_raw = float(slope - 1.0)
        alpha_hat = min(alpha_raw, 1.0)
        if alpha_raw >= CAP_FLAG_ALPHA:
            flags.append("at-cap")
        C0_hat = coefficient_cauchy_constant(levels, rho0, alpha_hat)

    return DecayReport(center, rho0, levels, alpha_hat, alpha_raw, fit_residual, C0_hat, flags,
                       [lv.k for lv in used])


def coefficient_cauchy_constant(levels: Sequence[DecayLevel], rho0: float, alpha: float) -> float:
    """max_k (|a_{k+1} - a_k| + rho0^k |b_{k+1} - b_k|) / rho0^{(1+alpha)k}"""
    ratios = [0.0]
    for current, following in zip(levels, levels[1:]):
        k = current.k
        jump = abs(following.a - current.a) + rho0 ** k * np.linalg.norm(following.ell.b - current.ell.b)
        ratios.append(jump / rho0 ** ((1.0 + alpha) * k))
    return float(max(ratios))


def limit_affine(report: DecayReport) -> AffineFn:
    """The affine function of the deepest level, the best available tangent plane at the center"""
    return report.levels[-1].ell


def holder_constant(field: ScalarField, report: DecayReport) -> Optional[float]:
    """
    Measured constant C with sup_{B_r}|u - l*| <= C r^{1+alpha_hat} over the
    dyadic radii, l* the limit affine function.
    """
    if report.alpha_hat is None:
        return None
    ell = limit_affine(report)
    worst = 0.0
    for level in report.levels:
        points, values = ball_values(field, report.center, level.radius)
        deviation = float(np.max(np.abs(values - ell(points))))
        worst = max(worst, deviation / level.radius ** (1.0 + report.alpha_hat))
    return worst


def predicted_holder_constant(report: DecayReport) -> Optional[float]:
    """rho0^-(1+alpha) (1 + C0/(1 - rho0)), the constant the dyadic argument delivers"""
    if report.alpha_hat is None or report.C0_hat is None:
        return None
    rho0 = report.rho0
    return rho0 ** -(1.0 + report.alpha_hat) * (1.0 + report.C0_hat / (1.0 - rho0))


def sharp_exponent(alpha0: float, gamma: float) -> SharpExponent:
    if not 0 < alpha0 <= 1:
        raise DomainError(f"alpha0 must lie in (0, 1], got {alpha0}")
    if not gamma >= 0:
        raise DomainError(f"gamma must be >= 0, got {gamma}")
    cap = 1.0 / (1.0 + gamma)
    return SharpExponent(min(alpha0, cap), cap < alpha0)


def singular_set(field: ScalarField, threshold: Optional[float] = None) -> np.ndarray:
    """
    Mask over all grid points marking interior points whose central-difference
    gradient has norm <= threshold (default: the grid spacing h).
    """
    grid = field.grid
    if threshold is None:
        threshold = grid.h
    if threshold < 0:
        raise DomainError(f"threshold must be >= 0, got {threshold}")
    grad = fd_derivatives(field.as_array(), grid.h)[0]
    mask = np.zeros(grid.size, dtype=bool)
    mask[grid.interior_mask] = np.linalg.norm(grad, axis=1) <= threshold
    return mask


def proof_constants(C_univ: float, alpha0: float, alpha: float, C0: float = 0.0) -> ProofConstants:
    """
    rho0 = (1/(2C))^{1/(alpha0-alpha)}, delta = rho0^{1+alpha}/2 and
    C_final = rho0^{-(1+alpha)} (1 + C0/(1-rho0)). rho0 is capped at 1/2.
    """
    if not 0 < alpha < alpha0:
        raise DomainError(f"need 0 < alpha < alpha0, got alpha={alpha}, alpha0={alpha0}")
    if not C_univ > 0.5:
        raise DomainError(f"universal constant must exceed 1/2, got {C_univ}")
    if C0 < 0:
        raise DomainError(f"C0 must be >= 0, got {C0}")
    base = 1.0 / (2.0 * C_univ)
    rho0_formula = base ** (1.0 / (alpha0 - alpha))
    capped = rho0_formula >= 0.5
    rho0 = 0.5 if capped else rho0_formula
    delta = 0.5 * rho0 ** (1.0 + alpha)
    C_final = rho0 ** -(1.0 + alpha) * (1.0 + C0 / (1.0 - rho0))
    return ProofConstants(C_univ, alpha0, alpha, rho0, delta, C0, C_final, rho0_formula, capped)


def flatness_check(field: ScalarField, center, constants: ProofConstants) -> FlatnessReport:
    """
    Audit of one flatness-improvement step: the best affine fit on B_rho0
    must satisfy E <= rho0^{1+alpha} with |a| + |b| <= C_univ.
    """
    dim = field.grid.dim
    center = np.asarray(center, dtype=float).reshape(dim)
    bound = constants.rho0 ** (1.0 + constants.alpha)
    notes = []
    try:
        _, unit_values = ball_values(field, center, 1.0)
        normalized = float(np.max(np.abs(unit_values))) <= 1.0
    except EmptyBallError:
        normalized = False
    if not normalized:
        notes.append("field is not normalized (sup over B_1 exceeds 1)")
    try:
        ell, E = best_affine_fit(field, center, constants.rho0)
    except UnderdeterminedFitError as e:
        notes.append(str(e))
        return FlatnessReport(False, None, bound, None, None, normalized, notes)
    size = abs(float(ell(center))) + float(np.linalg.norm(ell.b))
    passed = E <= bound and size <= constants.C_univ
    if E > bound:
        notes.append(f"fit error {E:.3e} exceeds rho0^(1+alpha) = {bound:.3e}")
    if size > constants.C_univ:
        notes.append(f"|a| + |b| = {size:.3e} exceeds C = {constants.C_univ:g}")
    return FlatnessReport(passed, E, bound, size, ell, normalized, notes)


def exponent_vs_gamma_table(gammas: Sequence[float], config: Optional[SolveConfig] = None,
                            grid: Optional[Grid] = None, rho0: float = 0.5, K: int = 6,
                            verbose: bool = True) -> list[dict]:
    """
    For each gamma solve |Du|^gamma Lap u = 1 with radial boundary data and
    measure the decay exponent at the origin. Failed rows carry the error.
    """
    if grid is None:
        grid = make_grid(2, 129, -1.0, 1.0)
    center = np.zeros(grid.dim)
    rows = []
    for gamma in gammas:
        theory = 1.0 / (1.0 + gamma)
        row = {"gamma": float(gamma), "alpha_hat": None, "alpha_theory": theory,
               "abs_err": None, "solver_residual": None, "error": ""}
        if verbose:
            print(f"🧮 gamma={gamma:g}: solving...")
        try:
            oracle = radial_profile(gamma, grid.dim)
            problem = ProblemSpec(trace_operator(), DegeneracySpec(gamma), constant_fn(1.0),
                                  oracle.eval, grid)
            solution, diagnostics = solve_dirichlet(problem, config, verbose=verbose)
            row["solver_residual"] = diagnostics.final_residual
            report = dyadic_decay(solution, center, rho0, K, verbose=verbose)
            row["alpha_hat"] = report.alpha_hat
            if report.alpha_hat is not None:
                row["abs_err"] = abs(report.alpha_hat - theory)
            else:
                row["error"] = ",".join(report.flags)
        except (ConvergenceFailure, NumericalBlowupError, DomainError, UnderdeterminedFitError) as e:
            row["error"] = str(e)
            if verbose:
                print(f"   ❌ gamma={gamma:g}: {e}")
        rows.append(row)
    return rows


def print_decay_report(report: DecayReport) -> None:
    """Print a text summary of a decay report"""
    print(f"\n{'='*60}")
    print(f"DYADIC DECAY - center {np.asarray(report.center).tolist()}, rho0={report.rho0:g}")
    print(f"{'='*60}")
    alpha = (", ".join(report.flags) or "n/a") if report.alpha_hat is None else f"{report.alpha_hat:.4f}"
    print(f"alpha_hat: {alpha} | C0_hat: {report.C0_hat if report.C0_hat is None else f'{report.C0_hat:.4g}'}")
    if report.flags:
        print(f"Flags: {', '.join(report.flags)}")
    print(f"{'='*60}\n")
    for level in report.levels:
        marker = "📐" if level.k in report.used_levels else "·"
        print(f"  k={level.k:2d} │ r={level.radius:10.4e} │ {marker} E={level.E:10.4e} │ "
              f"a={level.a:+.6f} │ {level.points} pts")
    print(f"\n{'='*60}\n")
