"""
Operators Module
Diffusion operators F(X, M), degeneracy laws H(X, p), the composite residual
H(X, Du) F(X, D^2u) - f(X), sample-based structure audits (ellipticity,
concavity, degeneracy bounds, coefficient oscillation) and central
finite-difference jets.

All evaluators broadcast: X has shape (..., d), M has shape (..., d, d) and
p has shape (..., d). A single point returns a float.
"""

from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional

import numpy as np
from scipy.optimize import bisect

from grid import Jet, ScalarField


class DomainError(ValueError):
    """Raised when an operator is evaluated outside its domain"""


class StencilError(ValueError):
    """Raised when a finite-difference stencil leaves the grid"""


SYMMETRY_TOL = 1e-12
RATIO_TOL = 1e-9


class OperatorKind(Enum):
    TRACE = "trace"
    PUCCI_MINUS = "pucci-minus"
    PUCCI_PLUS = "pucci-plus"
    LINEAR_COEFF = "linear-coeff"
    MIN_OF_LINEARS = "min-of-linears"
    INFINITY = "infinity"
    P_NONDIV = "p-nondiv"


GRADIENT_KINDS = (OperatorKind.INFINITY, OperatorKind.P_NONDIV)
CONCAVE_KINDS = (
    OperatorKind.TRACE,
    OperatorKind.LINEAR_COEFF,
    OperatorKind.PUCCI_MINUS,
    OperatorKind.MIN_OF_LINEARS,
)


class DegeneracyForm(Enum):
    PURE_POWER = "pure-power"
    MODULATED = "modulated"


@dataclass(frozen=True)
class EllipticityParams:
    """Ellipticity constants 0 < lam <= Lam"""
    lam: float = 1.0
    Lam: float = 1.0

    def __post_init__(self):
        if not (self.lam > 0 and self.Lam >= self.lam):
            raise DomainError(f"need 0 < lambda <= Lambda, got ({self.lam}, {self.Lam})")


@dataclass(frozen=True)
class OperatorSpec:
    """
    Descriptor of the diffusion operator F.

    coeff is the a_ij(X) map of a linear-coeff operator; family holds the
    members of a min-of-linears operator, each either a constant matrix or a
    map X -> a(X). Coefficient maps take (..., d) points and return
    (..., d, d) matrices.
    """
    kind: OperatorKind
    params: EllipticityParams = EllipticityParams()
    coeff: Optional[Callable] = None
    family: tuple = ()
    p: float = 2.0

    def __post_init__(self):
        if self.kind == OperatorKind.LINEAR_COEFF and self.coeff is None:
            raise DomainError("linear-coeff operator needs a coefficient map")
        if self.kind == OperatorKind.MIN_OF_LINEARS and not self.family:
            raise DomainError("min-of-linears operator needs a nonempty family")
        if self.kind == OperatorKind.P_NONDIV and self.p < 2:
            raise DomainError(f"p-Laplacian needs p >= 2, got {self.p}")

    @property
    def needs_gradient(self) -> bool:
        return self.kind in GRADIENT_KINDS

    @property
    def x_dependent(self) -> bool:
        if self.kind == OperatorKind.LINEAR_COEFF:
            return True
        if self.kind == OperatorKind.MIN_OF_LINEARS:
            return any(callable(member) for member in self.family)
        return False

    def effective_constants(self, dim: int) -> tuple[float, float]:
        """
        Declared (lam, Lam) for the spectral-norm ellipticity test.

        tr(P) lies in [|P|, d|P|] for P >= 0, so the trace picks up a factor d
        on the upper side and the other kinds inherit it.
        """
        if self.kind == OperatorKind.TRACE:
            return 1.0, float(dim)
        if self.needs_gradient:
            raise DomainError(f"{self.kind.value} is not uniformly elliptic")
        return self.params.lam, dim * self.params.Lam


@dataclass(frozen=True)
class DegeneracySpec:
    """H(X, p) = |p|^gamma, or c(X)|p|^gamma with lam <= c <= Lam"""
    gamma: float
    lam: float = 1.0
    Lam: float = 1.0
    form: DegeneracyForm = DegeneracyForm.PURE_POWER
    modulation: Optional[Callable] = None

    def __post_init__(self):
        if not self.gamma >= 0:
            raise DomainError(f"gamma must be >= 0, got {self.gamma}")
        if not (self.lam > 0 and self.Lam >= self.lam):
            raise DomainError(f"need 0 < lambda <= Lambda, got ({self.lam}, {self.Lam})")
        if self.form == DegeneracyForm.MODULATED and self.modulation is None:
            raise DomainError("modulated degeneracy law needs c(X)")


@dataclass(frozen=True)
class ModulusOfContinuity:
    """Increasing omega with omega(0+) = 0 and omega(1) = 1"""
    omega: Callable
    name: str = "omega"

    def __call__(self, t):
        return self.omega(t)

    def inverse(self, y: float, xtol: float = 1e-12) -> float:
        """omega^{-1}(y) on [0, 1]; values y >= omega(1) map to 1"""
        if y <= 0:
            return 0.0
        if y >= self.omega(1.0):
            return 1.0
        return float(bisect(lambda t: self.omega(t) - y, 0.0, 1.0, xtol=xtol))

    def is_valid(self, sample_count: int = 1000) -> bool:
        t = np.linspace(0.0, 1.0, sample_count)[1:]
        values = np.asarray(self.omega(t), dtype=float)
        return bool(np.all(np.diff(values) >= 0) and np.isclose(self.omega(1.0), 1.0)
                    and self.omega(1e-12) < 1e-3)


@dataclass
class EllipticityReport:
    min_ratio: float
    max_ratio: float
    lam_eff: float
    Lam_eff: float
    trials: int
    skipped: int
    passed: bool


@dataclass
class SampleAudit:
    """Outcome of a sampled inequality check"""
    samples: int
    violations: int
    worst: float
    passed: bool


def trace_operator() -> OperatorSpec:
    return OperatorSpec(OperatorKind.TRACE)


def pucci_minus(lam: float, Lam: float) -> OperatorSpec:
    return OperatorSpec(OperatorKind.PUCCI_MINUS, EllipticityParams(lam, Lam))


def pucci_plus(lam: float, Lam: float) -> OperatorSpec:
    return OperatorSpec(OperatorKind.PUCCI_PLUS, EllipticityParams(lam, Lam))


def linear_operator(coeff: Callable, lam: float = 1.0, Lam: float = 1.0) -> OperatorSpec:
    return OperatorSpec(OperatorKind.LINEAR_COEFF, EllipticityParams(lam, Lam), coeff=coeff)


def min_of_linears(family, lam: float = 1.0, Lam: float = 1.0) -> OperatorSpec:
    return OperatorSpec(OperatorKind.MIN_OF_LINEARS, EllipticityParams(lam, Lam), family=tuple(family))


def infinity_operator() -> OperatorSpec:
    return OperatorSpec(OperatorKind.INFINITY)


def p_laplacian_operator(p: float) -> OperatorSpec:
    return OperatorSpec(OperatorKind.P_NONDIV, p=p)


def power_modulus(s: float) -> ModulusOfContinuity:
    if s <= 0:
        raise DomainError(f"power modulus needs s > 0, got {s}")
    return ModulusOfContinuity(lambda t: np.power(t, s), name=f"t^{s:g}")


def _to_output(value):
    value = np.asarray(value, dtype=float)
    return float(value) if value.ndim == 0 else value


def _check_symmetric(M: np.ndarray) -> None:
    if M.ndim < 2 or M.shape[-1] != M.shape[-2]:
        raise DomainError(f"expected square matrices, got shape {M.shape}")
    asym = np.max(np.abs(M - np.swapaxes(M, -1, -2)), initial=0.0)
    scale = max(1.0, float(np.max(np.abs(M), initial=0.0)))
    if asym > SYMMETRY_TOL * scale:
        raise DomainError(f"matrix argument is not symmetric (asymmetry {asym:.3e})")


def _member_matrix(member, X: np.ndarray) -> np.ndarray:
    d = X.shape[-1]
    if callable(member):
        A = np.asarray(member(X), dtype=float)
    else:
        A = np.asarray(member, dtype=float)
    return np.broadcast_to(A, X.shape[:-1] + (d, d))


def _require_gradient(spec: OperatorSpec, p):
    if p is None:
        raise DomainError(f"{spec.kind.value} operator needs the gradient")
    return np.asarray(p, dtype=float)


def _p_laplacian(grad: np.ndarray, M: np.ndarray, power: float):
    if power < 2:
        raise DomainError(f"p-Laplacian needs p >= 2, got {power}")
    tr = np.trace(M, axis1=-2, axis2=-1)
    if power == 2:
        return tr
    inf = np.einsum("...i,...ij,...j->...", grad, M, grad)
    norm = np.linalg.norm(grad, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        value = np.power(norm, power - 4) * (norm ** 2 * tr + (power - 2) * inf)
    return np.where(norm > 0, value, 0.0)


def eval_F(spec: OperatorSpec, X, M, p=None):
    """
    Evaluate F(X, M). Gradient-dependent kinds (infinity, p-nondiv) also
    take the gradient p.
    """
    X = np.asarray(X, dtype=float)
    M = np.asarray(M, dtype=float)
    _check_symmetric(M)
    kind = spec.kind

    if kind == OperatorKind.TRACE:
        value = np.trace(M, axis1=-2, axis2=-1)
    elif kind in (OperatorKind.PUCCI_MINUS, OperatorKind.PUCCI_PLUS):
        eig = np.linalg.eigvalsh(M)
        pos = np.where(eig > 0, eig, 0.0).sum(axis=-1)
        neg = np.where(eig < 0, eig, 0.0).sum(axis=-1)
        lam, Lam = spec.params.lam, spec.params.Lam
        if kind == OperatorKind.PUCCI_MINUS:
            value = lam * pos + Lam * neg
        else:
            value = Lam * pos + lam * neg
    elif kind == OperatorKind.LINEAR_COEFF:
        A = _member_matrix(spec.coeff, X)
        value = np.einsum("...ij,...ij->...", A, M)
    elif kind == OperatorKind.MIN_OF_LINEARS:
        values = [np.einsum("...ij,...ij->...", _member_matrix(m, X), M) for m in spec.family]
        value = np.min(np.stack(values), axis=0)
    elif kind == OperatorKind.INFINITY:
        grad = _require_gradient(spec, p)
        value = np.einsum("...i,...ij,...j->...", grad, M, grad)
    elif kind == OperatorKind.P_NONDIV:
        value = _p_laplacian(_require_gradient(spec, p), M, spec.p)
    else:
        raise DomainError(f"unknown operator kind {kind}")
    return _to_output(value)


def eval_dF_dM(spec: OperatorSpec, X, M, p=None) -> np.ndarray:
    """
    Linearization dF/dM at (X, M): the coefficient matrix A with
    F(X, M + dM) ~ F(X, M) + A : dM. The gradient dependence of the
    infinity and p-nondiv kinds is frozen.
    """
    X = np.asarray(X, dtype=float)
    M = np.asarray(M, dtype=float)
    d = M.shape[-1]
    eye = np.broadcast_to(np.eye(d), M.shape)
    kind = spec.kind

    if kind == OperatorKind.TRACE:
        return eye.copy()
    if kind in (OperatorKind.PUCCI_MINUS, OperatorKind.PUCCI_PLUS):
        eig, vec = np.linalg.eigh(M)
        lam, Lam = spec.params.lam, spec.params.Lam
        if kind == OperatorKind.PUCCI_MINUS:
            weights = np.where(eig > 0, lam, Lam)
        else:
            weights = np.where(eig > 0, Lam, lam)
        return np.einsum("...ik,...k,...jk->...ij", vec, weights, vec)
    if kind == OperatorKind.LINEAR_COEFF:
        return _member_matrix(spec.coeff, X).copy()
    if kind == OperatorKind.MIN_OF_LINEARS:
        mats = np.stack([_member_matrix(m, X) for m in spec.family])
        values = np.einsum("k...ij,...ij->k...", mats, M)
        active = np.argmin(values, axis=0)
        return np.take_along_axis(mats, active[None, ..., None, None], axis=0)[0]
    grad = _require_gradient(spec, p)
    outer = np.einsum("...i,...j->...ij", grad, grad)
    if kind == OperatorKind.INFINITY:
        return outer
    power = spec.p
    if power == 2:
        return eye.copy()
    norm = np.linalg.norm(grad, axis=-1)[..., None, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        A = np.power(norm, power - 2) * eye + (power - 2) * np.power(norm, power - 4) * outer
    return np.where(norm > 0, A, 0.0)


def h_of_norm(spec: DegeneracySpec, X, norm, eps: float = 0.0):
    """H as a function of |p| (regularized to sqrt(eps^2 + |p|^2) when eps > 0)"""
    norm = np.asarray(norm, dtype=float)
    if eps < 0:
        raise DomainError(f"regularization must be >= 0, got {eps}")
    r = np.sqrt(eps * eps + norm * norm) if eps > 0 else norm
    value = np.power(r, spec.gamma)
    if spec.form == DegeneracyForm.MODULATED:
        value = np.asarray(spec.modulation(np.asarray(X, dtype=float)), dtype=float) * value
    return _to_output(value)


def eval_H_eps(spec: DegeneracySpec, X, p, eps: float):
    norm = np.linalg.norm(np.atleast_1d(np.asarray(p, dtype=float)), axis=-1)
    return h_of_norm(spec, X, norm, eps)


def eval_H(spec: DegeneracySpec, X, p):
    """H(X, p); |p|^0 = 1 including p = 0"""
    return eval_H_eps(spec, X, p, 0.0)


def equation_residual(problem, jet: Jet, X, eps: float = 0.0) -> float:
    """H_eps(X, Du) F(X, D^2u) - f(X) evaluated on a jet"""
    X = np.asarray(X, dtype=float)
    H = eval_H_eps(problem.H, X, jet.gradient, eps)
    F = eval_F(problem.F, X, jet.hessian, p=jet.gradient)
    return float(H * F - np.asarray(problem.f(X), dtype=float))


def infinity_laplacian(jet: Jet) -> float:
    return float(jet.gradient @ jet.hessian @ jet.gradient)


def p_laplacian_nondiv(jet: Jet, p: float) -> float:
    """|Du|^{p-2} tr(D^2u) + (p-2)|Du|^{p-4} infinity-Laplacian, zero at Du = 0 for p > 2"""
    return float(_p_laplacian(jet.gradient, jet.hessian, p))


# ---------------------------------------------------------------------------
# Random sampling helpers
# ---------------------------------------------------------------------------

def random_rotations(rng: np.random.Generator, count: int, dim: int) -> np.ndarray:
    Q, R = np.linalg.qr(rng.standard_normal((count, dim, dim)))
    signs = np.sign(np.diagonal(R, axis1=-2, axis2=-1))
    signs[signs == 0] = 1.0
    return Q * signs[:, None, :]


def random_symmetric(rng: np.random.Generator, count: int, dim: int, scale: float = 1.0) -> np.ndarray:
    A = rng.standard_normal((count, dim, dim)) * scale
    return 0.5 * (A + np.swapaxes(A, -1, -2))


def from_spectrum(Q: np.ndarray, eig: np.ndarray) -> np.ndarray:
    M = np.einsum("...ik,...k,...jk->...ij", Q, eig, Q)
    return 0.5 * (M + np.swapaxes(M, -1, -2))


def random_ball_points(rng: np.random.Generator, count: int, dim: int) -> np.ndarray:
    direction = rng.standard_normal((count, dim))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    radius = rng.uniform(0.0, 1.0, count) ** (1.0 / dim)
    return direction * radius[:, None]


# ---------------------------------------------------------------------------
# Structure audits
# ---------------------------------------------------------------------------

def check_ellipticity(spec: OperatorSpec, trial_count: int = 1000, rng_seed: int = 0,
                      dim: int = 2) -> EllipticityReport:
    """
    Sample (F(X, M+P) - F(X, M)) / |P| over random X, symmetric M and P >= 0
    (P = Q D Q^T) and compare the extremes with the declared constants.
    """
    lam_eff, Lam_eff = spec.effective_constants(dim)
    rng = np.random.default_rng(rng_seed)
    X = rng.uniform(-1.0, 1.0, (trial_count, dim))
    M = random_symmetric(rng, trial_count, dim, scale=2.0)
    D = rng.uniform(0.0, 1.0, (trial_count, dim))
    # every fourth trial gets a rank-deficient P
    D[::4, 0] = 0.0
    P = from_spectrum(random_rotations(rng, trial_count, dim), D)
    norm = D.max(axis=1)
    keep = norm > 1e-12
    if not keep.any():
        return EllipticityReport(np.nan, np.nan, lam_eff, Lam_eff, trial_count, trial_count, False)
    diff = eval_F(spec, X[keep], M[keep] + P[keep]) - eval_F(spec, X[keep], M[keep])
    ratios = np.atleast_1d(diff) / norm[keep]
    lo, hi = float(ratios.min()), float(ratios.max())
    passed = lo >= lam_eff - RATIO_TOL and hi <= Lam_eff + RATIO_TOL
    return EllipticityReport(lo, hi, lam_eff, Lam_eff, trial_count, int((~keep).sum()), passed)


def check_concavity(spec: OperatorSpec, trial_count: int = 1000, rng_seed: int = 0,
                    dim: int = 2) -> SampleAudit:
    """Midpoint concavity in M: F((M1+M2)/2) >= (F(M1) + F(M2))/2 on random samples"""
    rng = np.random.default_rng(rng_seed)
    X = rng.uniform(-1.0, 1.0, (trial_count, dim))
    M1 = random_symmetric(rng, trial_count, dim, scale=2.0)
    M2 = random_symmetric(rng, trial_count, dim, scale=2.0)
    p = rng.standard_normal((trial_count, dim)) if spec.needs_gradient else None
    mid = eval_F(spec, X, 0.5 * (M1 + M2), p=p)
    avg = 0.5 * (eval_F(spec, X, M1, p=p) + eval_F(spec, X, M2, p=p))
    gap = np.atleast_1d(avg - mid)
    scale = 1.0 + np.abs(np.atleast_1d(avg))
    bad = gap > 1e-12 * scale
    return SampleAudit(trial_count, int(bad.sum()), float(gap.max()), not bad.any())


def check_degeneracy_bounds(spec: DegeneracySpec, sample_count: int = 100_000, rng_seed: int = 0,
                            dim: int = 2) -> SampleAudit:
    """The sandwich lam|p|^gamma <= H(X, p) <= Lam|p|^gamma on random (X, p), exact inequalities"""
    rng = np.random.default_rng(rng_seed)
    X = rng.uniform(-1.0, 1.0, (sample_count, dim))
    p = rng.standard_normal((sample_count, dim)) * 10.0 ** rng.uniform(-3, 1, (sample_count, 1))
    p[::97] = 0.0
    norm = np.linalg.norm(p, axis=-1)
    H = np.atleast_1d(h_of_norm(spec, X, norm))
    base = np.power(norm, spec.gamma)
    lower = spec.lam * base
    upper = spec.Lam * base
    below = lower - H
    above = H - upper
    violations = int((below > 0).sum() + (above > 0).sum())
    worst = float(max(below.max(), above.max()))
    return SampleAudit(sample_count, violations, worst, violations == 0)


def omega_norm_estimate(spec: OperatorSpec, omega: ModulusOfContinuity, sample_count: int = 20_000,
                        rng_seed: int = 0, dim: int = 2) -> float:
    """
    Sampled lower bound for the coefficient-oscillation norm
    sup |F(X,M) - F(Y,M)| / (|M| omega(|X-Y|)) over X, Y in B_1, |M| <= 1.
    Half of the pairs are close pairs Y = X + r e, half independent.
    """
    if not spec.x_dependent:
        return 0.0
    rng = np.random.default_rng(rng_seed)
    X = random_ball_points(rng, sample_count, dim)
    Y = random_ball_points(rng, sample_count, dim)
    close = rng.random(sample_count) < 0.5
    step = rng.standard_normal((sample_count, dim))
    step *= (rng.uniform(0.0, 0.25, sample_count) / np.linalg.norm(step, axis=1))[:, None]
    Y[close] = X[close] + step[close]

    spectrum = rng.uniform(-1.0, 1.0, (sample_count, dim))
    vertex = rng.random(sample_count) < 0.5
    spectrum[vertex] = np.sign(spectrum[vertex])
    M = from_spectrum(random_rotations(rng, sample_count, dim), spectrum)
    norm_M = np.abs(spectrum).max(axis=1)

    dist = np.linalg.norm(X - Y, axis=1)
    weight = np.asarray(omega(dist), dtype=float)
    keep = (dist > 0) & (norm_M > 0) & (weight > 0)
    if not keep.any():
        return 0.0
    diff = np.abs(np.atleast_1d(eval_F(spec, X[keep], M[keep]) - eval_F(spec, Y[keep], M[keep])))
    return float(np.max(diff / (norm_M[keep] * weight[keep])))


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------

def shifted(U: np.ndarray, offset) -> np.ndarray:
    """Interior block of U displaced by `offset` (one entry in {-1, 0, 1} per axis)"""
    n = U.shape
    return U[tuple(slice(1 + o, n[k] - 1 + o) for k, o in enumerate(offset))]


def _unit(dim: int, k: int, sign: int = 1) -> tuple:
    offset = [0] * dim
    offset[k] = sign
    return tuple(offset)


def fd_derivatives(U: np.ndarray, h: float) -> tuple[np.ndarray, np.ndarray]:
    """
    Central differences on every interior node of an nd array.

    Returns:
        (gradient, hessian) with shapes (N_int, d) and (N_int, d, d)
    """
    dim = U.ndim
    center = shifted(U, (0,) * dim)
    count = center.size
    grad = np.empty((count, dim))
    hess = np.empty((count, dim, dim))
    for k in range(dim):
        plus = shifted(U, _unit(dim, k, 1))
        minus = shifted(U, _unit(dim, k, -1))
        grad[:, k] = ((plus - minus) / (2 * h)).ravel()
        hess[:, k, k] = ((plus - 2 * center + minus) / h ** 2).ravel()
    if dim == 2:
        mixed = (shifted(U, (1, 1)) + shifted(U, (-1, -1))
                 - shifted(U, (1, -1)) - shifted(U, (-1, 1))) / (4 * h ** 2)
        hess[:, 0, 1] = hess[:, 1, 0] = mixed.ravel()
    return grad, hess


def one_sided_differences(U: np.ndarray, h: float) -> tuple[np.ndarray, np.ndarray]:
    """Forward and backward differences (N_int, d) on every interior node"""
    dim = U.ndim
    center = shifted(U, (0,) * dim)
    forward = np.stack([((shifted(U, _unit(dim, k, 1)) - center) / h).ravel() for k in range(dim)], axis=1)
    backward = np.stack([((center - shifted(U, _unit(dim, k, -1))) / h).ravel() for k in range(dim)], axis=1)
    return forward, backward


def fd_gradient_norm(U: np.ndarray, h: float) -> np.ndarray:
    """
    |Du| on interior nodes from sum_k ((D+_k u)^2 + (D-_k u)^2) / 2.
    Second-order consistent, and unlike the central difference it does not
    vanish at a symmetric extremum.
    """
    forward, backward = one_sided_differences(U, h)
    return np.sqrt(0.5 * (forward ** 2 + backward ** 2).sum(axis=1))


def fd_jet(field: ScalarField, interior_index: int) -> Jet:
    """Central-difference jet at one grid point at least one cell from the boundary"""
    grid = field.grid
    multi = np.unravel_index(interior_index, grid.shape)
    if any(i < 1 or i > grid.n - 2 for i in multi):
        raise StencilError(f"index {interior_index} {tuple(int(i) for i in multi)} touches the boundary")
    U = field.as_array()
    h = grid.h
    dim = grid.dim
    base = np.array(multi)

    def at(offset) -> float:
        return float(U[tuple(base + np.array(offset))])

    grad = np.empty(dim)
    hess = np.zeros((dim, dim))
    for k in range(dim):
        plus, minus = at(_unit(dim, k, 1)), at(_unit(dim, k, -1))
        grad[k] = (plus - minus) / (2 * h)
        hess[k, k] = (plus - 2 * at((0,) * dim) + minus) / h ** 2
    if dim == 2:
        hess[0, 1] = hess[1, 0] = (at((1, 1)) + at((-1, -1)) - at((1, -1)) - at((-1, 1))) / (4 * h ** 2)
    return Jet(at((0,) * dim), grad, hess)
