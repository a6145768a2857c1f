"""
Solver Module
Grid solutions of H(X, Du) F(X, D^2u) = f with Dirichlet data by
eps-regularized pseudo-time relaxation, a shooting integrator for the 1D
two-point problem |u'|^gamma u'' = f, and the vanishing-exponent family
|Du|^delta F(X, D^2u) = g used to study the superconductivity limit.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import sparse
from scipy.integrate import solve_ivp
from scipy.optimize import bisect
from scipy.sparse.linalg import spsolve

from grid import Grid, ScalarField, make_grid, sample
from operators import (
    DegeneracySpec,
    DomainError,
    OperatorKind,
    OperatorSpec,
    eval_dF_dM,
    eval_F,
    fd_derivatives,
    fd_gradient_norm,
    h_of_norm,
    one_sided_differences,
)


class ConvergenceFailure(RuntimeError):
    """Raised when a relaxation stage exhausts its iteration budget"""

    def __init__(self, message: str, diagnostics: "SolveDiagnostics"):
        super().__init__(message)
        self.diagnostics = diagnostics


class NumericalBlowupError(RuntimeError):
    """Raised when the iteration produces non-finite values"""


class ShootingError(RuntimeError):
    """Raised when the shooting parameter cannot be bracketed or refined"""


SCHEMES = ("implicit", "explicit")
DEFAULT_EPS_SCHEDULE = (1e-1, 1e-2, 1e-3, 1e-4)
DEFAULT_TOL = {1: 1e-6, 2: 1e-5}
DT_MAX = 1e12
DT_FLOOR_RATIO = 1e-14
MAX_BRACKET_DOUBLINGS = 64


def constant_fn(value: float) -> Callable[[np.ndarray], np.ndarray]:
    """Vectorized constant function on (..., d) points"""
    value = float(value)
    return lambda X: np.full(np.asarray(X).shape[:-1], value)


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    """H(X, Du) F(X, D^2u) = f in the grid box, u = boundary on its edge"""
    F: OperatorSpec
    H: DegeneracySpec
    f: Callable
    boundary: Callable
    domain: Grid

    def validate(self) -> "ProblemSpec":
        sample(self.domain, self.f)
        sample(self.domain, self.boundary)
        if not self.F.needs_gradient:
            points = self.domain.points
            zeros = np.zeros((points.shape[0], self.domain.dim, self.domain.dim))
            offset = np.max(np.abs(eval_F(self.F, points, zeros)))
            if offset > 1e-12:
                raise DomainError(f"F(X, 0) must vanish, found {offset:.3e}")
        return self


@dataclass(frozen=True)
class SolveConfig:
    eps_schedule: tuple = DEFAULT_EPS_SCHEDULE
    dt_factor: float = 0.5
    tol: float = 1e-6
    max_iters: int = 2000
    scheme: str = "implicit"

    def __post_init__(self):
        schedule = tuple(float(e) for e in self.eps_schedule)
        if not schedule:
            raise ValueError("eps schedule must not be empty")
        if any(e <= 0 for e in schedule) or any(b >= a for a, b in zip(schedule, schedule[1:])):
            raise ValueError(f"eps schedule must be positive and strictly decreasing, got {schedule}")
        if not 0 < self.dt_factor <= 1:
            raise ValueError(f"dt_factor must lie in (0, 1], got {self.dt_factor}")
        if not self.tol > 0:
            raise ValueError(f"tol must be positive, got {self.tol}")
        if int(self.max_iters) != self.max_iters or self.max_iters < 1:
            raise ValueError(f"max_iters must be a positive integer, got {self.max_iters}")
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        object.__setattr__(self, "eps_schedule", schedule)
        object.__setattr__(self, "max_iters", int(self.max_iters))

    @property
    def eps_min(self) -> float:
        return self.eps_schedule[-1]

    def to_dict(self) -> dict:
        return {
            "eps_schedule": list(self.eps_schedule),
            "dt_factor": self.dt_factor,
            "tol": self.tol,
            "max_iters": self.max_iters,
            "scheme": self.scheme,
        }


def eps_schedule_to(eps_min: float) -> tuple:
    """Default schedule truncated or extended so that it ends exactly at eps_min"""
    if not eps_min > 0:
        raise ValueError(f"eps_min must be positive, got {eps_min}")
    head = [e for e in DEFAULT_EPS_SCHEDULE if e > eps_min]
    return tuple(head) + (float(eps_min),)


@dataclass
class SolveDiagnostics:
    final_residual: float = float("nan")
    iterations: list = field(default_factory=list)
    dt: float = float("nan")
    violations: int = 0
    stage_residuals: list = field(default_factory=list)
    scheme: str = "implicit"
    converged: bool = False

    def to_dict(self) -> dict:
        return {
            "final_residual": self.final_residual,
            "iterations": list(self.iterations),
            "dt": self.dt,
            "violations": self.violations,
            "stage_residuals": list(self.stage_residuals),
            "scheme": self.scheme,
            "converged": self.converged,
        }


@dataclass
class _Evaluation:
    grad: np.ndarray
    hess: np.ndarray
    gnorm: np.ndarray
    H: np.ndarray
    F: np.ndarray
    residual: np.ndarray

    @property
    def norm(self) -> float:
        return float(np.max(np.abs(self.residual), initial=0.0))


class _Discretization:
    """Interior stencils of a problem on its grid"""

    def __init__(self, problem: ProblemSpec):
        grid = problem.domain
        self.problem = problem
        self.grid = grid
        self.h = grid.h
        self.interior = np.flatnonzero(grid.interior_mask)
        self.X = grid.points[self.interior]
        f_values = np.asarray(problem.f(self.X), dtype=float)
        self.f = np.broadcast_to(f_values, (self.interior.size,)).copy()
        self._base = np.array(np.unravel_index(self.interior, grid.shape))

    def neighbor(self, offset) -> np.ndarray:
        shifted = self._base + np.asarray(offset)[:, None]
        return np.ravel_multi_index(tuple(shifted), self.grid.shape)

    def evaluate(self, values: np.ndarray, eps: float) -> _Evaluation:
        U = values.reshape(self.grid.shape)
        grad, hess = fd_derivatives(U, self.h)
        gnorm = fd_gradient_norm(U, self.h)
        H = np.atleast_1d(h_of_norm(self.problem.H, self.X, gnorm, eps))
        F = np.atleast_1d(eval_F(self.problem.F, self.X, hess, p=grad))
        return _Evaluation(grad, hess, gnorm, H, F, H * F - self.f)

    def assemble(self, entries) -> sparse.csr_matrix:
        """Stencil entries (offset, per-node weights) as an (interior, all nodes) matrix"""
        count = self.interior.size
        rows = np.arange(count)
        data = [np.broadcast_to(weights, (count,)) for _, weights in entries]
        cols = [self.neighbor(offset) for offset, _ in entries]
        return sparse.coo_matrix(
            (np.concatenate(data), (np.tile(rows, len(entries)), np.concatenate(cols))),
            shape=(count, self.grid.size),
        ).tocsr()

    def hessian_entries(self, A: np.ndarray, scale: np.ndarray) -> list:
        """Stencil of scale * (A : D^2u) for per-node symmetric A"""
        dim = self.grid.dim
        h2 = self.h ** 2
        zero = (0,) * dim
        entries = [(zero, -2.0 * scale * np.trace(A, axis1=1, axis2=2) / h2)]
        for k in range(dim):
            weight = scale * A[:, k, k] / h2
            entries.append((_unit(dim, k, 1), weight))
            entries.append((_unit(dim, k, -1), weight))
        if dim == 2:
            corner = scale * A[:, 0, 1] / (2.0 * h2)
            entries += [((1, 1), corner), ((-1, -1), corner), ((1, -1), -corner), ((-1, 1), -corner)]
        return entries

    def jacobian(self, values: np.ndarray, ev: _Evaluation, eps: float) -> sparse.csr_matrix:
        """
        dR/du on interior unknowns. The F part is exact for gradient-free
        kinds; the dependence of gradient kinds on the central gradient is
        frozen.
        """
        problem = self.problem
        A = np.asarray(eval_dF_dM(problem.F, self.X, ev.hess, p=ev.grad))
        entries = self.hessian_entries(A, ev.H)
        gamma = problem.H.gamma
        if gamma != 0:
            dim = self.grid.dim
            s = eps * eps + ev.gnorm ** 2
            with np.errstate(divide="ignore", invalid="ignore"):
                dH = np.where(s > 0, 0.5 * gamma * ev.H / s, 0.0)
            weight = ev.F * dH
            forward, backward = one_sided_differences(values.reshape(self.grid.shape), self.h)
            entries.append(((0,) * dim, weight * (backward - forward).sum(axis=1) / self.h))
            for k in range(dim):
                entries.append((_unit(dim, k, 1), weight * forward[:, k] / self.h))
                entries.append((_unit(dim, k, -1), -weight * backward[:, k] / self.h))
        return self.assemble(entries)[:, self.interior]

    def operator_bound(self, ev: _Evaluation) -> float:
        F = self.problem.F
        if F.kind == OperatorKind.TRACE:
            return 1.0
        if not F.needs_gradient:
            return F.params.Lam
        A = eval_dF_dM(F, self.X, ev.hess, p=ev.grad)
        return max(float(np.linalg.eigvalsh(A).max(initial=0.0)), 1e-12)

    def cfl_dt(self, ev: _Evaluation, dt_factor: float) -> float:
        H_max = max(float(ev.H.max(initial=0.0)), 1e-300)
        return dt_factor * self.h ** 2 / (2 * self.grid.dim * self.operator_bound(ev) * H_max)


def _unit(dim: int, k: int, sign: int) -> tuple:
    offset = [0] * dim
    offset[k] = sign
    return tuple(offset)


def harmonic_extension(grid: Grid, boundary_values: np.ndarray) -> np.ndarray:
    """Discrete harmonic function with the given boundary values (linear interpolation in 1D)"""
    problem = ProblemSpec(OperatorSpec(OperatorKind.TRACE), DegeneracySpec(0.0),
                          constant_fn(0.0), constant_fn(0.0), grid)
    disc = _Discretization(problem)
    count = disc.interior.size
    eye = np.broadcast_to(np.eye(grid.dim), (count, grid.dim, grid.dim))
    L = disc.assemble(disc.hessian_entries(eye, np.ones(count)))
    boundary = np.flatnonzero(grid.boundary_mask)
    values = np.array(boundary_values, dtype=float)
    rhs = -L[:, boundary] @ values[boundary]
    values[disc.interior] = spsolve(L[:, disc.interior].tocsc(), rhs)
    return values


def discrete_residual(problem: ProblemSpec, field: ScalarField, eps: float) -> np.ndarray:
    """
    Interior residual H_eps(X, |Du|) F(X, D^2u) - f with central second
    differences and the averaged one-sided gradient norm; computed from
    scratch, independently of any solver state.
    """
    return _Discretization(problem).evaluate(np.asarray(field.values, dtype=float), eps).residual


def _relax_explicit(disc: _Discretization, values: np.ndarray, eps: float, config: SolveConfig,
                    diagnostics: SolveDiagnostics) -> tuple[np.ndarray, int]:
    ev = disc.evaluate(values, eps)
    previous = ev.norm
    iters = 0
    while ev.norm > config.tol:
        if iters >= config.max_iters:
            diagnostics.iterations.append(iters)
            diagnostics.final_residual = ev.norm
            raise ConvergenceFailure(
                f"explicit relaxation stalled at eps={eps:g}: residual {ev.norm:.3e} after {iters} sweeps",
                diagnostics,
            )
        dt = disc.cfl_dt(ev, config.dt_factor)
        values = values.copy()
        values[disc.interior] += dt * ev.residual
        iters += 1
        ev = disc.evaluate(values, eps)
        if not np.all(np.isfinite(ev.residual)):
            raise NumericalBlowupError(f"non-finite residual at eps={eps:g} after {iters} sweeps")
        if ev.norm > previous:
            diagnostics.violations += 1
        previous = ev.norm
        diagnostics.dt = dt
    return values, iters


def _relax_implicit(disc: _Discretization, values: np.ndarray, eps: float, config: SolveConfig,
                    diagnostics: SolveDiagnostics) -> tuple[np.ndarray, int]:
    """
    Linearly implicit pseudo-time steps (I/dt - J) du = R. dt starts at the
    explicit stability bound and grows with the residual reduction, so the
    iteration turns into Newton's method near the solution.
    """
    ev = disc.evaluate(values, eps)
    dt = disc.cfl_dt(ev, config.dt_factor)
    dt_floor = dt * DT_FLOOR_RATIO
    identity = sparse.identity(disc.interior.size, format="csr")
    iters = 0
    while ev.norm > config.tol:
        if iters >= config.max_iters:
            diagnostics.iterations.append(iters)
            diagnostics.final_residual = ev.norm
            raise ConvergenceFailure(
                f"implicit relaxation stalled at eps={eps:g}: residual {ev.norm:.3e} after {iters} steps",
                diagnostics,
            )
        iters += 1
        J = disc.jacobian(values, ev, eps)
        with np.errstate(all="ignore"):
            step = spsolve((identity / dt - J).tocsc(), ev.residual)
        trial_norm = np.inf
        if np.all(np.isfinite(step)):
            trial = values.copy()
            trial[disc.interior] += step
            trial_ev = disc.evaluate(trial, eps)
            if np.all(np.isfinite(trial_ev.residual)):
                trial_norm = trial_ev.norm
        if trial_norm > 2.0 * ev.norm:
            diagnostics.violations += 1
            dt /= 4.0
            if dt < dt_floor:
                raise NumericalBlowupError(
                    f"pseudo-time step collapsed at eps={eps:g} (residual {ev.norm:.3e})"
                )
            continue
        if trial_norm > ev.norm:
            diagnostics.violations += 1
        growth = ev.norm / trial_norm if trial_norm > 0 else 10.0
        diagnostics.dt = dt
        dt = min(DT_MAX, dt * float(np.clip(growth, 2.0, 10.0)))
        values, ev = trial, trial_ev
    return values, iters


def solve_dirichlet(problem: ProblemSpec, config: Optional[SolveConfig] = None,
                    verbose: bool = True) -> tuple[ScalarField, SolveDiagnostics]:
    """
    Solve the Dirichlet problem through the eps schedule, warm-starting each
    stage from the previous one.

    Args:
        problem: operator, degeneracy law, source, boundary data and grid
        config: schedule and stopping rule (defaults depend on the dimension)
        verbose: print one line per eps stage

    Returns:
        (solution field, diagnostics); boundary values equal the boundary
        data bit for bit

    Raises:
        ConvergenceFailure: a stage ran out of iterations
        NumericalBlowupError: non-finite values appeared
    """
    problem.validate()
    grid = problem.domain
    if config is None:
        config = SolveConfig(tol=DEFAULT_TOL[grid.dim])
    disc = _Discretization(problem)
    boundary = sample(grid, problem.boundary).values
    values = harmonic_extension(grid, boundary)
    values[grid.boundary_mask] = boundary[grid.boundary_mask]

    diagnostics = SolveDiagnostics(scheme=config.scheme)
    relax = _relax_implicit if config.scheme == "implicit" else _relax_explicit
    for eps in config.eps_schedule:
        values, iters = relax(disc, values, eps, config, diagnostics)
        stage_residual = disc.evaluate(values, eps).norm
        diagnostics.iterations.append(iters)
        diagnostics.stage_residuals.append(stage_residual)
        if verbose:
            print(f"   🔧 eps={eps:.0e}: residual {stage_residual:.2e} after {iters} steps")

    solution = ScalarField(grid, values)
    diagnostics.final_residual = float(
        np.max(np.abs(discrete_residual(problem, solution, config.eps_min)), initial=0.0)
    )
    diagnostics.converged = diagnostics.final_residual <= config.tol
    return solution, diagnostics


def _point_value(fn: Callable, t: float) -> float:
    return float(np.asarray(fn(np.array([[t]])), dtype=float).ravel()[0])


def solve_ode_bvp(gamma: float, f: Callable, a: float, b: float, ua: float, ub: float,
                  n: int) -> ScalarField:
    """
    Solve |u'|^gamma u'' = f on [a, b] with u(a) = ua, u(b) = ub.

    With w = |u'|^gamma u' the equation becomes the first-order system
    u' = sign(w)|w|^(1/(1+gamma)), w' = (1+gamma) f. The initial flux w(a) is
    found by bracketing and bisection on the terminal mismatch, which is
    increasing in w(a).
    """
    if not gamma >= 0:
        raise DomainError(f"gamma must be >= 0, got {gamma}")
    grid = make_grid(1, n, a, b)
    if np.any(sample(grid, f).values <= 0):
        raise DomainError("source must be positive on [a, b]")
    power = 1.0 / (1.0 + gamma)

    def rhs(t, y):
        w = y[1]
        return [np.sign(w) * abs(w) ** power, (1.0 + gamma) * _point_value(f, t)]

    def integrate(w0: float, t_eval=None):
        solution = solve_ivp(rhs, (a, b), [ua, w0], method="DOP853", rtol=1e-11, atol=1e-13,
                             t_eval=t_eval)
        if not solution.success:
            raise ShootingError(f"integration failed for w(a)={w0:.6g}: {solution.message}")
        return solution

    def mismatch(w0: float) -> float:
        return float(integrate(w0).y[0, -1] - ub)

    lo, hi = -1.0, 1.0
    for _ in range(MAX_BRACKET_DOUBLINGS):
        f_lo, f_hi = mismatch(lo), mismatch(hi)
        if f_lo <= 0 <= f_hi:
            break
        if f_lo > 0:
            lo *= 2.0
        if f_hi < 0:
            hi *= 2.0
    else:
        raise ShootingError(f"could not bracket the initial flux within [{lo:g}, {hi:g}]")

    try:
        w0 = bisect(mismatch, lo, hi, xtol=1e-15, rtol=1e-15, maxiter=400)
    except (RuntimeError, ValueError) as e:
        raise ShootingError(f"bisection on the initial flux failed: {e}") from e

    values = integrate(w0, t_eval=grid.axis).y[0].copy()
    values[0], values[-1] = ua, ub
    return ScalarField(grid, values)


@dataclass
class ScLimitMember:
    delta: float
    field: Optional[ScalarField]
    diagnostics: Optional[SolveDiagnostics]
    error: Optional[str] = None
    above_threshold: bool = False


def sc_compactness_threshold(alpha0: float) -> float:
    """Largest delta for which the delta-family keeps its uniform C^{1,alpha} bound: 1 - alpha0"""
    if not 0 < alpha0 <= 1:
        raise DomainError(f"alpha0 must lie in (0, 1], got {alpha0}")
    return 1.0 - alpha0


def sc_limit_family(F: OperatorSpec, g: Callable, deltas: Sequence[float], grid: Grid,
                    boundary: Callable, config: Optional[SolveConfig] = None,
                    alpha0: Optional[float] = None, verbose: bool = True) -> list[ScLimitMember]:
    """
    Solve |Du|^delta F(X, D^2u) = g(X) for each delta with shared boundary
    data. Member failures are recorded, not raised.
    """
    deltas = [float(d) for d in deltas]
    if any(d < 0 for d in deltas) or any(b >= a for a, b in zip(deltas, deltas[1:])):
        raise ValueError(f"deltas must be non-negative and strictly decreasing, got {deltas}")
    threshold = sc_compactness_threshold(alpha0) if alpha0 is not None else None

    members = []
    for delta in deltas:
        if verbose:
            print(f"🔧 Solving delta={delta:g}...")
        problem = ProblemSpec(F, DegeneracySpec(delta), g, boundary, grid)
        above = threshold is not None and delta > threshold
        try:
            solution, diagnostics = solve_dirichlet(problem, config, verbose=verbose)
            members.append(ScLimitMember(delta, solution, diagnostics, above_threshold=above))
        except ConvergenceFailure as e:
            members.append(ScLimitMember(delta, None, e.diagnostics, str(e), above))
        except NumericalBlowupError as e:
            members.append(ScLimitMember(delta, None, None, str(e), above))
    return members


def c1_distance(u: ScalarField, v: ScalarField, radius: float = 0.8) -> float:
    """sup|u - v| + sup|Du - Dv| over interior grid points of the ball B_radius(0)"""
    if u.grid != v.grid:
        raise ValueError("fields live on different grids")
    grid = u.grid
    interior = grid.interior_mask
    in_ball = grid.ball_mask(np.zeros(grid.dim), radius)[interior]
    if not in_ball.any():
        raise ValueError(f"no interior grid points within radius {radius}")
    diff = u.values - v.values
    grad = fd_derivatives(diff.reshape(grid.shape), grid.h)[0]
    value_part = np.max(np.abs(diff[interior][in_ball]))
    gradient_part = np.max(np.linalg.norm(grad[in_ball], axis=1))
    return float(value_part + gradient_part)


def sc_distances(members: Sequence[ScLimitMember], radius: float = 0.8) -> list[Optional[float]]:
    """C^1 distance of each member to the previous one (None for the first or failed members)"""
    distances = []
    for previous, current in zip([None, *members[:-1]], members):
        if previous is None or previous.field is None or current.field is None:
            distances.append(None)
        else:
            distances.append(c1_distance(previous.field, current.field, radius))
    return distances
