"""
Scaling Module
Normalization of a problem to the small-data regime through
u(X) = v(eta X + Y0) / tau, and sample-based verification that the
transformed operator and degeneracy law keep their structural constants.
"""

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from grid import Jet, ScalarField, sup_norm_on_ball
from operators import (
    DegeneracyForm,
    DegeneracySpec,
    DomainError,
    EllipticityReport,
    ModulusOfContinuity,
    OperatorKind,
    OperatorSpec,
    SampleAudit,
    check_degeneracy_bounds,
    check_ellipticity,
    eval_F,
    eval_H,
    from_spectrum,
    omega_norm_estimate,
    random_ball_points,
    random_rotations,
    random_symmetric,
)
from solver import ProblemSpec


class DomainMappingError(ValueError):
    """Raised when eta X + Y0 carries the box outside the original domain"""


CONJUGATION_TOL = 1e-10
DOMAIN_SLACK = 1e-12
OMEGA_INTERPRETATION = "oscillation constant C in omega^-1(eps0/C) read as the sampled omega-norm of F"


@dataclass(frozen=True)
class ScalingParams:
    """u(X) = v(eta X + Y0) / tau with 0 < eta <= 1 and tau >= 1"""
    eta: float
    tau: float
    Y0: tuple
    notes: tuple = ()

    def __post_init__(self):
        if not 0 < self.eta <= 1:
            raise DomainError(f"eta must lie in (0, 1], got {self.eta}")
        if not self.tau >= 1:
            raise DomainError(f"tau must be >= 1, got {self.tau}")
        object.__setattr__(self, "Y0", tuple(float(y) for y in np.atleast_1d(self.Y0)))
        object.__setattr__(self, "notes", tuple(self.notes))

    def apply(self, X) -> np.ndarray:
        return self.eta * np.asarray(X, dtype=float) + np.asarray(self.Y0)

    def source_factor(self, gamma: float) -> float:
        return self.eta ** (gamma + 2.0) / self.tau ** (gamma + 1.0)

    def scale_jet(self, jet: Jet) -> Jet:
        """Jet of u at X from the jet of v at eta X + Y0"""
        return jet.scaled(1.0 / self.tau, self.eta / self.tau, self.eta ** 2 / self.tau)

    def to_dict(self) -> dict:
        return {"eta": self.eta, "tau": self.tau, "Y0": list(self.Y0), "notes": list(self.notes)}


@dataclass
class ScalingReport:
    conjugation_max_error: float
    conjugation_passed: bool
    ellipticity: EllipticityReport
    degeneracy: SampleAudit
    omega_before: Optional[float] = None
    omega_after: Optional[float] = None
    omega_passed: Optional[bool] = None
    notes: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        checks = [self.conjugation_passed, self.ellipticity.passed, self.degeneracy.passed]
        if self.omega_passed is not None:
            checks.append(self.omega_passed)
        return all(checks)


@dataclass
class SmallnessReport:
    oscillation: float
    f_sup: float
    eps0: float

    @property
    def total(self) -> float:
        return self.oscillation + self.f_sup

    @property
    def small(self) -> bool:
        return self.total <= self.eps0


def _composed(fn: Callable, params: ScalingParams) -> Callable:
    return lambda X: fn(params.apply(X))


def _check_domain(problem: ProblemSpec, params: ScalingParams) -> None:
    grid = problem.domain
    Y0 = np.asarray(params.Y0)
    if Y0.size != grid.dim:
        raise DomainMappingError(f"Y0 has {Y0.size} components, the domain is {grid.dim}-dimensional")
    low = params.eta * grid.lo + Y0
    high = params.eta * grid.hi + Y0
    slack = DOMAIN_SLACK * max(1.0, abs(grid.lo), abs(grid.hi))
    if np.any(low < grid.lo - slack) or np.any(high > grid.hi + slack):
        raise DomainMappingError(
            f"eta={params.eta:g}, Y0={list(params.Y0)} maps [{grid.lo:g}, {grid.hi:g}]^{grid.dim} "
            f"onto [{low.min():g}, {high.max():g}], outside the domain"
        )


def _scale_operator(F: OperatorSpec, params: ScalingParams) -> OperatorSpec:
    """
    (eta^2/tau) F(eta X + Y0, (tau/eta^2) M). Every supported kind is
    1-homogeneous in M, so the factors cancel and only the X-dependence moves.
    """
    if F.needs_gradient:
        raise DomainError(f"{F.kind.value} operator has no uniformly elliptic rescaling")
    if F.kind == OperatorKind.LINEAR_COEFF:
        return replace(F, coeff=_composed(F.coeff, params))
    if F.kind == OperatorKind.MIN_OF_LINEARS:
        family = tuple(_composed(m, params) if callable(m) else m for m in F.family)
        return replace(F, family=family)
    return F


def _scale_degeneracy(H: DegeneracySpec, params: ScalingParams) -> DegeneracySpec:
    """(eta/tau)^gamma H(eta X + Y0, (tau/eta) p): the power cancels, a modulation is recentered"""
    if H.form == DegeneracyForm.MODULATED:
        return replace(H, modulation=_composed(H.modulation, params))
    return H


def scale_problem(problem: ProblemSpec, params: ScalingParams) -> ProblemSpec:
    """
    The problem solved by u(X) = v(eta X + Y0)/tau when v solves `problem`.
    The source becomes (eta^{gamma+2}/tau^{gamma+1}) f(eta X + Y0) and the
    boundary data v(eta X + Y0)/tau.
    """
    _check_domain(problem, params)
    factor = params.source_factor(problem.H.gamma)
    f, boundary = problem.f, problem.boundary
    return ProblemSpec(
        F=_scale_operator(problem.F, params),
        H=_scale_degeneracy(problem.H, params),
        f=lambda X: factor * np.asarray(f(params.apply(X)), dtype=float),
        boundary=lambda X: np.asarray(boundary(params.apply(X)), dtype=float) / params.tau,
        domain=problem.domain,
    )


def compose_params(first: ScalingParams, second: ScalingParams) -> ScalingParams:
    """Scaling by `first` then `second` as a single scaling"""
    Y0 = first.eta * np.asarray(second.Y0) + np.asarray(first.Y0)
    return ScalingParams(first.eta * second.eta, first.tau * second.tau, tuple(Y0))


def _ball_sup(problem: ProblemSpec, fn: Callable) -> float:
    grid = problem.domain
    mask = grid.ball_mask(np.zeros(grid.dim), 1.0)
    values = np.asarray(fn(grid.points[mask]), dtype=float)
    return float(np.max(np.abs(values), initial=0.0))


def normalization_params(problem: ProblemSpec, solution: ScalarField, eps0: float,
                         omega: Optional[ModulusOfContinuity] = None, Y0=None,
                         sample_count: int = 20_000, rng_seed: int = 0) -> ScalingParams:
    """
    tau = max{1, |v|}, eta = min{1, lam (eps0/|f|)^{1/(gamma+2)}, omega^-1(eps0/C)}
    with grid sup-norms over B_1. Inactive terms are omitted and listed in notes.
    """
    if not eps0 > 0:
        raise DomainError(f"eps0 must be positive, got {eps0}")
    grid = problem.domain
    if Y0 is None:
        Y0 = np.zeros(grid.dim)
    notes = []
    tau = max(1.0, sup_norm_on_ball(solution, np.zeros(grid.dim), 1.0))
    eta = 1.0

    f_sup = _ball_sup(problem, problem.f)
    if f_sup > 0:
        lam = 1.0 if problem.F.kind == OperatorKind.TRACE else problem.F.params.lam
        eta = min(eta, lam * (eps0 / f_sup) ** (1.0 / (problem.H.gamma + 2.0)))
    else:
        notes.append("source vanishes: source term omitted")

    if problem.F.x_dependent:
        if omega is None:
            raise DomainError("variable coefficients need a modulus of continuity")
        C = omega_norm_estimate(problem.F, omega, sample_count, rng_seed, grid.dim)
        notes.append(OMEGA_INTERPRETATION)
        if C > 0:
            eta = min(eta, omega.inverse(eps0 / C))
        else:
            notes.append("sampled omega-norm is zero: oscillation term omitted")
    else:
        notes.append("constant coefficients: oscillation term omitted")
    return ScalingParams(eta, tau, tuple(np.atleast_1d(Y0)), tuple(notes))


def conjugation_errors(problem: ProblemSpec, params: ScalingParams, scaled: ProblemSpec,
                       sample_count: int = 1000, rng_seed: int = 0) -> np.ndarray:
    """
    Relative defect of R_scaled(u, X) = (eta^{gamma+2}/tau^{gamma+1}) R(v, eta X + Y0)
    on random points and random jets of v.
    """
    rng = np.random.default_rng(rng_seed)
    dim = problem.domain.dim
    lo, hi = problem.domain.lo, problem.domain.hi
    X = rng.uniform(lo, hi, (sample_count, dim))
    Y = params.apply(X)
    grad_v = rng.standard_normal((sample_count, dim)) * 10.0 ** rng.uniform(-2, 1, (sample_count, 1))
    hess_v = random_symmetric(rng, sample_count, dim, scale=3.0)
    grad_u = grad_v * (params.eta / params.tau)
    hess_u = hess_v * (params.eta ** 2 / params.tau)
    kappa = params.source_factor(problem.H.gamma)

    with np.errstate(all="ignore"):
        H_v = np.atleast_1d(eval_H(problem.H, Y, grad_v))
        F_v = np.atleast_1d(eval_F(problem.F, Y, hess_v))
        f_v = np.broadcast_to(np.asarray(problem.f(Y), dtype=float), (sample_count,))
        original = H_v * F_v - f_v
        H_u = np.atleast_1d(eval_H(scaled.H, X, grad_u))
        F_u = np.atleast_1d(eval_F(scaled.F, X, hess_u))
        f_u = np.broadcast_to(np.asarray(scaled.f(X), dtype=float), (sample_count,))
        transformed = H_u * F_u - f_u
        scale = np.maximum(kappa * (np.abs(H_v * F_v) + np.abs(f_v)), np.finfo(float).tiny)
    return np.abs(transformed - kappa * original) / scale


def verify_scaling(problem: ProblemSpec, params: ScalingParams, sample_count: int = 1000,
                   rng_seed: int = 0, scaled: Optional[ProblemSpec] = None,
                   omega: Optional[ModulusOfContinuity] = None) -> ScalingReport:
    """
    Check the transformed problem: the conjugation identity on random jets,
    ellipticity of F and the degeneracy bounds of H with the original
    constants, and (for variable coefficients with omega given) that the
    coefficient oscillation does not grow.

    `scaled` replaces the transformed problem, which lets a deliberately
    wrong transform be checked.
    """
    if scaled is None:
        scaled = scale_problem(problem, params)
    dim = problem.domain.dim
    errors = conjugation_errors(problem, params, scaled, sample_count, rng_seed)
    worst = float(np.max(errors)) if np.all(np.isfinite(errors)) else float("inf")
    report = ScalingReport(
        conjugation_max_error=worst,
        conjugation_passed=worst <= CONJUGATION_TOL,
        ellipticity=check_ellipticity(scaled.F, sample_count, rng_seed, dim),
        degeneracy=check_degeneracy_bounds(scaled.H, sample_count, rng_seed, dim),
    )
    if not report.conjugation_passed:
        report.notes.append(f"conjugation identity fails: relative defect {worst:.3e}")
    if omega is not None and problem.F.x_dependent:
        report.omega_before = omega_norm_estimate(problem.F, omega, 20_000, rng_seed, dim)
        report.omega_after = omega_norm_estimate(scaled.F, omega, 20_000, rng_seed, dim)
        report.omega_passed = report.omega_after <= report.omega_before * (1.0 + 1e-9)
    return report


def iterated_source_bounds(f_sup: float, rho0: float, alpha: float, gamma: float,
                           K: int) -> tuple[list[float], bool]:
    """
    Bounds |f_k| <= rho0^{k[1 - alpha(1+gamma)]} |f| on the sources of the
    dyadic blow-ups. They stay bounded exactly when alpha <= 1/(1+gamma).

    Returns:
        (bounds for k = 0..K, whether the sequence is nonincreasing)
    """
    if not 0 < rho0 < 1:
        raise DomainError(f"rho0 must lie in (0, 1), got {rho0}")
    exponent = 1.0 - alpha * (1.0 + gamma)
    bounds = [f_sup * rho0 ** (k * exponent) for k in range(K + 1)]
    return bounds, exponent >= 0


def smallness_gap(problem: ProblemSpec, eps0: float, sample_count: int = 2000,
                  rng_seed: int = 0) -> SmallnessReport:
    """sup_{|M|<=1} |F(X, M) - F(0, M)| over sampled X in B_1, plus the grid sup of f, against eps0"""
    dim = problem.domain.dim
    oscillation = 0.0
    if problem.F.x_dependent:
        rng = np.random.default_rng(rng_seed)
        X = random_ball_points(rng, sample_count, dim)
        spectrum = np.sign(rng.uniform(-1.0, 1.0, (sample_count, dim)))
        M = from_spectrum(random_rotations(rng, sample_count, dim), spectrum)
        at_origin = eval_F(problem.F, np.zeros_like(X), M)
        oscillation = float(np.max(np.abs(eval_F(problem.F, X, M) - at_origin)))
    return SmallnessReport(oscillation, _ball_sup(problem, problem.f), eps0)
