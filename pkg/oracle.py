"""
Oracle Module
Closed-form exact solutions with analytic jets. They serve as boundary data,
as ground truth for the solver and as calibration targets for the decay
estimator.

Every oracle evaluates on (..., d) point arrays, so `grid.sample(grid, sol.eval)`
samples it directly. Values exist everywhere; the jet raises at singular
points where the Hessian blows up.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from numpy.polynomial import polynomial as P

from grid import Jet
from operators import DomainError, infinity_laplacian, p_laplacian_nondiv


class ConstraintError(ValueError):
    """Raised when oracle parameters violate a structural constraint"""


class SingularPointError(ValueError):
    """Raised when an analytic jet is requested on the singular set"""


TAU_SUM_TOL = 1e-12
SINGULAR_TOL = 1e-14


@dataclass(frozen=True, eq=False)
class ExactSolution:
    """
    Exact solution with analytic first and second derivatives.

    value_fn, gradient_fn and hessian_fn map (..., d) points to (...),
    (..., d) and (..., d, d) arrays. singular_fn gives the distance to the set
    where the Hessian is unavailable. residual_fn, when present, evaluates the
    defining equation on a jet; it vanishes unless zero_residual is False, in
    which case it is only bounded off the singular set.
    """
    name: str
    dim: int
    alpha_expected: float
    value_fn: Callable
    gradient_fn: Callable
    hessian_fn: Callable
    singular_fn: Callable
    singular_points: tuple = ()
    params: dict = field(default_factory=dict)
    residual_fn: Optional[Callable] = None
    zero_residual: bool = True

    def _points(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 0:
            X = X.reshape(1)
        if X.shape[-1] != self.dim:
            raise DomainError(f"{self.name} is {self.dim}-dimensional, got points of shape {X.shape}")
        return X

    def eval(self, X):
        with np.errstate(all="ignore"):
            value = np.asarray(self.value_fn(self._points(X)), dtype=float)
        return float(value) if value.ndim == 0 else value

    def gradient(self, X) -> np.ndarray:
        with np.errstate(all="ignore"):
            return np.asarray(self.gradient_fn(self._points(X)), dtype=float)

    def hessian(self, X) -> np.ndarray:
        with np.errstate(all="ignore"):
            return np.asarray(self.hessian_fn(self._points(X)), dtype=float)

    def singular_distance(self, X):
        value = np.asarray(self.singular_fn(self._points(X)), dtype=float)
        return float(value) if value.ndim == 0 else value

    def jet(self, X) -> Jet:
        """
        Analytic jet off the singular set. On the singular set (the coordinate
        axes for aronsson) the Hessian is unavailable and this
        raises SingularPointError; gradient() still evaluates there, e.g.
        aronsson().gradient([1, 0]) = (4/3, 0).
        """
        X = self._points(X)
        if self.singular_distance(X) <= SINGULAR_TOL:
            raise SingularPointError(f"{self.name}: no classical jet at {X.tolist()}")
        return Jet(self.eval(X), self.gradient(X), self.hessian(X))

    def residual(self, X) -> float:
        if self.residual_fn is None:
            raise ValueError(f"{self.name} has no defining equation attached")
        return float(self.residual_fn(self.jet(X)))

    def metadata(self) -> dict:
        return {
            "name": self.name,
            "dim": self.dim,
            "alpha_expected": self.alpha_expected,
            "params": dict(self.params),
            "singular_points": [list(p) for p in self.singular_points],
            "zero_residual": self.zero_residual,
        }


def _radial_power(X: np.ndarray, k: float, q: float):
    """value, gradient and Hessian of k|X|^q"""
    r = np.linalg.norm(X, axis=-1)
    safe = np.where(r > 0, r, 1.0)
    value = k * np.power(r, q)
    coef = k * q * np.power(safe, q - 2)
    grad = np.where(r > 0, coef, 0.0)[..., None] * X
    unit = X / safe[..., None]
    eye = np.eye(X.shape[-1])
    hess = coef[..., None, None] * (eye + (q - 2) * np.einsum("...i,...j->...ij", unit, unit))
    if q < 2:
        hess = np.where((r > 0)[..., None, None], hess, np.nan)
    elif q > 2:
        hess = np.where((r > 0)[..., None, None], hess, 0.0)
    return value, grad, hess


def _radial_solution(name: str, dim: int, k: float, q: float, alpha: float, params: dict,
                     residual_fn: Optional[Callable]) -> ExactSolution:
    origin = (0.0,) * dim
    return ExactSolution(
        name=name,
        dim=dim,
        alpha_expected=alpha,
        value_fn=lambda X: _radial_power(X, k, q)[0],
        gradient_fn=lambda X: _radial_power(X, k, q)[1],
        hessian_fn=lambda X: _radial_power(X, k, q)[2],
        singular_fn=lambda X: np.linalg.norm(X, axis=-1),
        singular_points=(origin,),
        params=params,
        residual_fn=residual_fn,
    )


def _degenerate_laplace_residual(gamma: float) -> Callable:
    """|Du|^gamma tr(D^2u) - 1"""
    def residual(jet: Jet) -> float:
        return float(np.linalg.norm(jet.gradient) ** gamma * np.trace(jet.hessian) - 1.0)
    return residual


def radial_profile(gamma: float, d: int) -> ExactSolution:
    """
    Radial solution of |Du|^gamma Lap u = 1: u = c|X|^beta with
    beta = (2+gamma)/(1+gamma) and c = beta^-1 (beta+d-2)^(-1/(1+gamma)).
    """
    if not gamma >= 0:
        raise DomainError(f"gamma must be >= 0, got {gamma}")
    if d not in (1, 2):
        raise DomainError(f"radial profile is available in d = 1, 2, got {d}")
    beta = (2.0 + gamma) / (1.0 + gamma)
    c = (beta + d - 2.0) ** (-1.0 / (1.0 + gamma)) / beta
    return _radial_solution(
        "radial", d, c, beta, 1.0 / (1.0 + gamma),
        {"gamma": gamma, "d": d, "beta": beta, "c": c},
        _degenerate_laplace_residual(gamma),
    )


def ode_profile(delta: float) -> ExactSolution:
    """u(t) = c|t|^beta solving |u'|^delta u'' = 1 (the even extension of the t >= 0 branch)"""
    if not delta >= 0:
        raise DomainError(f"delta must be >= 0, got {delta}")
    beta = (2.0 + delta) / (1.0 + delta)
    c = (beta - 1.0) ** (-1.0 / (1.0 + delta)) / beta
    return _radial_solution(
        "ode", 1, c, beta, 1.0 / (1.0 + delta),
        {"delta": delta, "beta": beta, "c": c},
        _degenerate_laplace_residual(delta),
    )


def p_radial_profile(p: float, d: int) -> ExactSolution:
    """
    u = c|X|^p' with p' = p/(p-1) and c = (1/p') d^(-1/(p-1)), so the
    non-divergence p-Laplacian of u is 1 off the origin.
    """
    if not p >= 2:
        raise DomainError(f"p must be >= 2, got {p}")
    if d not in (1, 2):
        raise DomainError(f"p-radial profile is available in d = 1, 2, got {d}")
    conj = p / (p - 1.0)
    c = d ** (-1.0 / (p - 1.0)) / conj
    return _radial_solution(
        "p-radial", d, c, conj, 1.0 / (p - 1.0),
        {"p": p, "d": d, "p_conjugate": conj, "c": c},
        lambda jet: p_laplacian_nondiv(jet, p) - 1.0,
    )


def _cbrt_power_terms(X: np.ndarray, taus: np.ndarray, consts: np.ndarray):
    """Per-coordinate sigma_i, sigma_i', sigma_i'' of the separable infinity-harmonic factors"""
    nonzero = taus != 0
    safe_tau = np.where(nonzero, taus, 1.0)
    w = 3.0 * taus * X + consts
    root = np.cbrt(w)
    sigma = np.where(nonzero, root ** 4 / (4.0 * safe_tau), consts * X)
    d1 = np.where(nonzero, root, consts)
    with np.errstate(divide="ignore"):
        d2 = np.where(nonzero, taus / root ** 2, 0.0)
    return sigma, d1, d2


def separable_infinity_harmonic(taus, consts) -> ExactSolution:
    """
    u = sum_i sigma_i(x_i) with |sigma_i'|^2 sigma_i'' = tau_i and sum tau_i = 0.
    sigma_i(t) = cbrt(3 tau_i t + c_i)^4 / (4 tau_i), or c_i t when tau_i = 0.
    cbrt(w)^4 = |w|^(4/3), so the factors are even powers of |w|.
    """
    taus = np.atleast_1d(np.asarray(taus, dtype=float))
    consts = np.atleast_1d(np.asarray(consts, dtype=float))
    if taus.shape != consts.shape:
        raise ConstraintError(f"need one constant per tau, got {taus.size} and {consts.size}")
    if abs(taus.sum()) > TAU_SUM_TOL:
        raise ConstraintError(f"taus must sum to zero, got {taus.sum():.3e}")
    dim = taus.size
    active = taus != 0
    roots = np.where(active, -consts / np.where(active, 3.0 * taus, 1.0), 0.0)

    def hessian(X):
        d2 = _cbrt_power_terms(X, taus, consts)[2]
        return d2[..., :, None] * np.eye(dim)

    def singular(X):
        if not active.any():
            return np.full(X.shape[:-1], np.inf)
        return np.min(np.abs(X - roots)[..., active], axis=-1)

    return ExactSolution(
        name="separable",
        dim=dim,
        alpha_expected=1.0 / 3.0,
        value_fn=lambda X: _cbrt_power_terms(X, taus, consts)[0].sum(axis=-1),
        gradient_fn=lambda X: _cbrt_power_terms(X, taus, consts)[1],
        hessian_fn=hessian,
        singular_fn=singular,
        singular_points=(tuple(roots),) if active.any() else (),
        params={"taus": taus.tolist(), "consts": consts.tolist()},
        residual_fn=infinity_laplacian,
    )


def aronsson() -> ExactSolution:
    """
    |x|^(4/3) - |y|^(4/3): infinity-harmonic off the coordinate axes and
    exactly C^{1,1/3} across them. Gradient vanishes on both axes only at
    the origin.
    """
    solution = separable_infinity_harmonic([64.0 / 81.0, -64.0 / 81.0], [0.0, 0.0])
    return ExactSolution(
        name="aronsson",
        dim=2,
        alpha_expected=1.0 / 3.0,
        value_fn=lambda X: np.abs(X[..., 0]) ** (4.0 / 3.0) - np.abs(X[..., 1]) ** (4.0 / 3.0),
        gradient_fn=solution.gradient_fn,
        hessian_fn=solution.hessian_fn,
        singular_fn=lambda X: np.min(np.abs(X), axis=-1),
        singular_points=((0.0, 0.0),),
        params={"convention": "|t|^(4/3)"},
        residual_fn=infinity_laplacian,
    )


def radial_plus_smooth(phi, psi_power: float) -> ExactSolution:
    """
    u = phi(X) + |X|^psi_power with phi a polynomial vanishing to second order
    at the origin.

    Args:
        phi: coefficient array, phi[i] multiplies x^i in 1D and phi[i, j]
             multiplies x^i y^j in 2D
        psi_power: exponent in (1, 2]
    """
    coeffs = np.atleast_1d(np.asarray(phi, dtype=float))
    if coeffs.ndim not in (1, 2):
        raise DomainError(f"phi must be a 1D or 2D coefficient array, got ndim={coeffs.ndim}")
    if not 1.0 < psi_power <= 2.0:
        raise DomainError(f"psi power must lie in (1, 2], got {psi_power}")
    degrees = np.indices(coeffs.shape).sum(axis=0)
    low = (degrees < 2) & (coeffs != 0)
    if low.any():
        raise DomainError("phi must be O(|X|^2) at the origin (nonzero constant or linear coefficient)")
    dim = coeffs.ndim

    def poly(c, X):
        if dim == 1:
            return P.polyval(X[..., 0], c)
        return P.polyval2d(X[..., 0], X[..., 1], c)

    first = [P.polyder(coeffs, axis=k) for k in range(dim)]
    second = [[P.polyder(first[i], axis=j) for j in range(dim)] for i in range(dim)]

    def gradient(X):
        return np.stack([poly(c, X) for c in first], axis=-1) + _radial_power(X, 1.0, psi_power)[1]

    def hessian(X):
        smooth = np.stack([np.stack([poly(c, X) for c in row], axis=-1) for row in second], axis=-2)
        return smooth + _radial_power(X, 1.0, psi_power)[2]

    singular = psi_power < 2
    return ExactSolution(
        name="radial-plus-smooth",
        dim=dim,
        alpha_expected=psi_power - 1.0,
        value_fn=lambda X: poly(coeffs, X) + _radial_power(X, 1.0, psi_power)[0],
        gradient_fn=gradient,
        hessian_fn=hessian,
        singular_fn=(lambda X: np.linalg.norm(X, axis=-1)) if singular
        else (lambda X: np.full(X.shape[:-1], np.inf)),
        singular_points=((0.0,) * dim,) if singular else (),
        params={"phi": coeffs.tolist(), "psi_power": psi_power},
        residual_fn=infinity_laplacian,
        zero_residual=False,
    )


ORACLE_NAMES = ("ode", "radial", "aronsson", "separable", "radial-plus-smooth", "p-radial")


def build_oracle(name: str, gamma: float = 1.0, d: int = 2, p: float = 3.0,
                 psi_power: float = 4.0 / 3.0) -> ExactSolution:
    """Construct an oracle by name with the parameters the command line exposes"""
    if name == "ode":
        return ode_profile(gamma)
    if name == "radial":
        return radial_profile(gamma, d)
    if name == "aronsson":
        return aronsson()
    if name == "separable":
        return separable_infinity_harmonic([64.0 / 81.0, -64.0 / 81.0], [0.0, 0.0])
    if name == "radial-plus-smooth":
        return radial_plus_smooth(np.zeros((1,) * d), psi_power)
    if name == "p-radial":
        return p_radial_profile(p, d)
    raise ValueError(f"Unknown oracle '{name}'. Choose from: {', '.join(ORACLE_NAMES)}")
