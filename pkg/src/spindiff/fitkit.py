"""Damped Gauss-Newton (Levenberg-Marquardt) least squares.

Supports bounds (projection), fixed parameters, parameters tied to
others through arbitrary functions, stacked multi-dataset residuals and
linearised standard errors. All models in the package fit through
:func:`solve`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, NamedTuple, Sequence
import math

import numpy as np

from .errors import FitError, InputError

CONVERGED = "converged"
MAX_ITER = "max-iter"
SINGULAR = "singular"


@dataclass
class Parameter:
    """One model parameter.

    ``tie`` (if given) computes the value from the dict of all other
    parameter values; tied parameters are never varied directly.
    """

    name: str
    value: float
    lower: float = -math.inf
    upper: float = math.inf
    vary: bool = True
    tie: Callable[[Mapping[str, float]], float] | None = None

    @property
    def free(self) -> bool:
        return self.vary and self.tie is None


@dataclass
class Dataset:
    """Observations ``y`` at abscissae ``x`` with model ``model(params, x)``.

    ``sigma`` may be None (unit weights).
    """

    model: Callable[[Mapping[str, float], np.ndarray], np.ndarray]
    x: np.ndarray
    y: np.ndarray
    sigma: np.ndarray | float | None = None
    label: str = ""

    def residual(self, values):
        r = np.asarray(self.model(values, self.x), dtype=float) - np.asarray(self.y, dtype=float)
        if self.sigma is not None:
            r = r / self.sigma
        return np.ravel(r)


class FitProblem:
    """Parameters plus either a residual callable or a list of datasets.

    ``residual(values) -> array`` must return already-weighted residuals.
    When both are given, dataset residuals are appended after the custom
    residual, in dataset order. ``jac(values)`` optionally supplies the
    analytic Jacobian with respect to the free parameters; otherwise
    central differences are used.
    """

    def __init__(self, params: Sequence[Parameter], residual=None, datasets: Sequence[Dataset] = (),
                 jac=None):
        names = [p.name for p in params]
        if len(set(names)) != len(names):
            raise InputError("duplicate parameter names")
        self.params = list(params)
        self.residual_fn = residual
        self.datasets = list(datasets)
        self.jac = jac
        if residual is None and not self.datasets:
            raise InputError("FitProblem needs a residual function or datasets")
        free = self.free_names
        if not free:
            raise InputError("FitProblem needs at least one free parameter")
        for p in self.params:
            if p.free and not (p.lower <= p.value <= p.upper):
                raise InputError(f"initial value of {p.name!r} outside its bounds")

    @property
    def free_names(self) -> list[str]:
        return [p.name for p in self.params if p.free]

    def initial_vector(self) -> np.ndarray:
        return np.array([p.value for p in self.params if p.free], dtype=float)

    def bounds(self):
        free = [p for p in self.params if p.free]
        return (np.array([p.lower for p in free], dtype=float),
                np.array([p.upper for p in free], dtype=float))

    def values(self, theta) -> dict[str, float]:
        """Full name -> value mapping for free vector ``theta``."""
        out = {}
        it = iter(theta)
        for p in self.params:
            out[p.name] = float(next(it)) if p.free else float(p.value)
        # ties may chain; resolve in declaration order, twice for forward references
        for _ in range(2):
            for p in self.params:
                if p.tie is not None:
                    out[p.name] = float(p.tie(out))
        return out

    def residuals(self, theta) -> np.ndarray:
        vals = self.values(theta)
        parts = []
        if self.residual_fn is not None:
            parts.append(np.ravel(np.asarray(self.residual_fn(vals), dtype=float)))
        for ds in self.datasets:
            parts.append(ds.residual(vals))
        return np.concatenate(parts) if len(parts) > 1 else parts[0]


@dataclass
class FitResult:
    values: dict[str, float]
    errors: dict[str, float]
    cost: float
    status: str
    n_iter: int
    n_points: int
    free_names: list[str]
    covariance: np.ndarray | None = None
    message: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def success(self) -> bool:
        return self.status == CONVERGED

    @property
    def residual_norm(self) -> float:
        return math.sqrt(2.0 * self.cost)

    @property
    def reduced_chi2(self) -> float:
        dof = self.n_points - len(self.free_names)
        return 2.0 * self.cost / dof if dof > 0 else math.nan

    def report(self) -> list[dict]:
        return [{"parameter": k, "value": v, "std_error": self.errors.get(k, 0.0)}
                for k, v in self.values.items()]


def fd_step(theta):
    return np.maximum(1e-8, 1e-6 * np.abs(theta))


def jacobian(problem: FitProblem, theta, r0=None):
    """Jacobian of the stacked residuals (analytic if the problem has one)."""
    theta = np.asarray(theta, dtype=float)
    if problem.jac is not None:
        return np.asarray(problem.jac(problem.values(theta)), dtype=float).reshape(-1, theta.size)
    lo, hi = problem.bounds()
    steps = fd_step(theta)
    cols = []
    for i, h in enumerate(steps):
        tp = theta.copy()
        tm = theta.copy()
        up = min(theta[i] + h, hi[i])
        dn = max(theta[i] - h, lo[i])
        if up == dn:
            cols.append(np.zeros_like(r0 if r0 is not None else problem.residuals(theta)))
            continue
        tp[i] = up
        tm[i] = dn
        cols.append((problem.residuals(tp) - problem.residuals(tm)) / (up - dn))
    return np.column_stack(cols)


def _covariance(J, cost, n_points, scale=True):
    JTJ = J.T @ J
    n_free = J.shape[1]
    try:
        if np.linalg.matrix_rank(JTJ) < n_free:
            raise np.linalg.LinAlgError
        cov = np.linalg.inv(JTJ)
    except np.linalg.LinAlgError:
        return None
    if scale:
        dof = n_points - n_free
        cov = cov * (2.0 * cost / dof if dof > 0 else math.nan)
    return cov


def solve(problem: FitProblem, *, ftol=1e-10, xtol=1e-12, max_iter=500,
          lambda0=1e-3, scale_covariance=True, raise_on_failure=False) -> FitResult:
    """Minimise half the squared residual norm of ``problem``.

    The step is ``(J^T J + lam D) dx = -J^T r`` with Marquardt scaling
    ``D = diag(J^T J)``. The first attempt is undamped (``lam = 0``);
    damping is switched on only after a rejected step. Accepted cost is
    monotone non-increasing. Converged when the relative cost decrease
    of an accepted step falls below ``ftol`` or the step norm falls below
    ``xtol * (|theta| + xtol)``.
    """
    theta = problem.initial_vector()
    lo, hi = problem.bounds()
    r = problem.residuals(theta)
    if not np.all(np.isfinite(r)):
        raise InputError("non-finite residual at the initial point")
    n_points = r.size
    cost = 0.5 * float(r @ r)
    lam = 0.0
    status = MAX_ITER
    message = ""
    n_iter = 0
    D = None
    for n_iter in range(1, max_iter + 1):
        J = jacobian(problem, theta, r)
        g = J.T @ r
        A = J.T @ J
        diag = np.diag(A).copy()
        if np.any(diag <= 0.0):
            dead = [problem.free_names[i] for i in np.flatnonzero(diag <= 0.0)]
            status, message = SINGULAR, f"residual insensitive to {dead}"
            break
        D = diag if D is None else np.maximum(D, diag)
        accepted = False
        for _ in range(60):
            try:
                step = np.linalg.solve(A + lam * np.diag(D), -g)
            except np.linalg.LinAlgError:
                step = None
            if step is None or not np.all(np.isfinite(step)):
                lam = max(lam * 10.0, lambda0)
                continue
            trial = np.clip(theta + step, lo, hi)
            r_new = problem.residuals(trial)
            cost_new = 0.5 * float(r_new @ r_new) if np.all(np.isfinite(r_new)) else math.inf
            if cost_new <= cost:
                accepted = True
                break
            lam = max(lam * 10.0, lambda0)
        if not accepted:
            status = SINGULAR if np.linalg.matrix_rank(A) < A.shape[0] else CONVERGED
            message = "no cost-reducing step found"
            break
        dx = trial - theta
        decrease = cost - cost_new
        theta, r, cost = trial, r_new, cost_new
        lam = lam / 10.0 if lam > 1e-7 else 0.0
        if cost == 0.0 or decrease <= ftol * max(cost + decrease, 1e-300):
            status = CONVERGED
            break
        if np.linalg.norm(dx) <= xtol * (np.linalg.norm(theta) + xtol):
            status = CONVERGED
            break
    values = problem.values(theta)
    J = jacobian(problem, theta, r)
    cov = _covariance(J, cost, n_points, scale_covariance)
    if cov is None and status == CONVERGED:
        status, message = SINGULAR, "singular normal matrix at solution"
    errors = _errors(problem, theta, cov)
    result = FitResult(values=values, errors=errors, cost=cost, status=status,
                       n_iter=n_iter, n_points=n_points, free_names=problem.free_names,
                       covariance=cov, message=message)
    if raise_on_failure and status != CONVERGED:
        raise FitError(f"fit did not converge ({status}): {message}",
                       {"status": status, "n_iter": n_iter, "cost": cost, "values": values})
    return result


def _errors(problem, theta, cov):
    names = problem.free_names
    errors = {p.name: 0.0 for p in problem.params}
    if cov is None:
        for n in names:
            errors[n] = math.inf
        for p in problem.params:
            if p.tie is not None:
                errors[p.name] = math.inf
        return errors
    sig = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    for n, s in zip(names, sig):
        errors[n] = float(s)
    tied = [p for p in problem.params if p.tie is not None]
    if tied:
        steps = fd_step(theta)
        grads = np.zeros((len(tied), len(theta)))
        for i, h in enumerate(steps):
            tp = theta.copy()
            tm = theta.copy()
            tp[i] += h
            tm[i] -= h
            vp, vm = problem.values(tp), problem.values(tm)
            for k, p in enumerate(tied):
                grads[k, i] = (vp[p.name] - vm[p.name]) / (2 * h)
        var = np.einsum("ki,ij,kj->k", grads, cov, grads)
        for p, v in zip(tied, var):
            errors[p.name] = float(math.sqrt(max(v, 0.0)))
    return errors


class Interval(NamedTuple):
    lower: float
    upper: float
    sigma: float
    bounded: bool


def profile_uncertainty(problem: FitProblem, result: FitResult, parameter: str,
                        scale_covariance=True) -> Interval:
    """Linearised 1-sigma interval for ``parameter`` at ``result``.

    Uses ``(J^T W J)^-1`` with the same finite-difference step rule as the
    solver. A singular normal matrix yields an unbounded interval.
    """
    if parameter not in result.values:
        raise InputError(f"unknown parameter {parameter!r}")
    theta = np.array([result.values[n] for n in problem.free_names])
    r = problem.residuals(theta)
    J = jacobian(problem, theta, r)
    cov = _covariance(J, 0.5 * float(r @ r), r.size, scale_covariance)
    value = result.values[parameter]
    if cov is None:
        return Interval(-math.inf, math.inf, math.inf, False)
    sigma = _errors(problem, theta, cov)[parameter]
    return Interval(value - sigma, value + sigma, sigma, True)


def fit_datasets(params, datasets, **options) -> FitResult:
    """Shorthand: build a :class:`FitProblem` from datasets and solve it."""
    return solve(FitProblem(params, datasets=datasets), **options)
