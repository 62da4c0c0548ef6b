"""Thermal polarization of spin levels and the ensemble-coupling model.

Temperatures are in kelvin, angular frequencies in rad/s, densities in m^-3
and couplings in Hz unless a name says otherwise.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from scipy.optimize import brentq, minimize_scalar

from . import constants as K
from .errors import InfeasibleError, InputError
from .fitkit import FitProblem, Parameter, solve
from .spinham import FieldVector, SpinSpecies, track_levels

__all__ = [
    "PolarizationQuery", "EnsembleCouplingModel", "TransitionCoupling",
    "polarization_I0", "boltzmann_populations", "polarization_hyperfine",
    "polarization_curve", "ensemble_coupling", "fit_concentration",
    "ConcentrationFit", "BathTemperature", "infer_bath_temperature",
    "yb_concentration_from_couplings",
]


def _check_T(T):
    T = np.asarray(T, dtype=float)
    if np.any(~np.isfinite(T)) or np.any(T <= 0):
        raise InputError("temperature must be finite and > 0")
    return T


def polarization_I0(T, omega):
    """tanh(hbar*omega / 2kT) for a bare doublet; vectorised over ``T``."""
    T = _check_T(T)
    if not (omega > 0 and math.isfinite(omega)):
        raise InputError("frequency must be positive")
    out = np.tanh(K.HBAR * omega / (2.0 * K.K_B * T))
    return float(out) if out.ndim == 0 else out


def boltzmann_populations(energies, T):
    """Normalised level populations. ``energies`` in rad/s, shape (d,).

    Returns shape (d,) for scalar ``T`` or (len(T), d). Exponents are taken
    relative to the lowest level so nothing overflows at mK.
    """
    E = np.asarray(energies, dtype=float)
    T = _check_T(T)
    x = -(E[None, :] - E.min()) * K.HBAR / (K.K_B * np.atleast_1d(T)[:, None])
    w = np.exp(x)
    p = w / w.sum(axis=1, keepdims=True)
    return p[0] if T.ndim == 0 else p


def _resolve_pair(species: SpinSpecies, transition):
    """Map a transition spec to ((m_S, m_I) lower, (m_S, m_I) upper) labels."""
    if isinstance(transition, str):
        t = transition.replace(" ", "")
        if t == "I=0":
            if species.I != 0:
                raise InputError(f"{species.name} has nuclear spin; give an mI label")
            return (-species.S, 0.0), (-species.S + 1, 0.0)
        if not t.startswith("mI="):
            raise InputError(f"cannot parse transition label {transition!r}")
        try:
            num, _, den = t[3:].partition("/")
            m = float(num) / (float(den) if den else 1.0)
        except ValueError as exc:
            raise InputError(f"cannot parse transition label {transition!r}") from exc
        return (-0.5, m), (0.5, m)
    try:
        a, b = transition
        return tuple(map(float, a)), tuple(map(float, b))
    except (TypeError, ValueError) as exc:
        raise InputError(f"cannot interpret transition {transition!r}") from exc


@dataclass(frozen=True)
class PolarizationQuery:
    T: float
    field: FieldVector
    transition: object  # "mI=+3/2", "I=0", or a pair of (m_S, m_I) labels
    species: SpinSpecies

    def __post_init__(self):
        _check_T(self.T)


def _pair_indices(species, field, transition):
    tr = track_levels(species, field.direction, [field.B0])
    la, lb = _resolve_pair(species, transition)
    try:
        a, b = tr.index(la), tr.index(lb)
    except ValueError:
        raise InputError(f"transition {transition!r} not found for {species.name}") from None
    E = tr.energies[0]
    if E[a] > E[b]:
        a, b = b, a
    return E, a, b


def polarization_curve(species: SpinSpecies, field: FieldVector, transition) -> Callable:
    """P(T) for one level pair with level energies frozen at ``field``.

    P is the population of the lower level minus that of the upper one,
    normalised over every level of the species.
    """
    E, a, b = _pair_indices(species, field, transition)

    def P(T):
        p = boltzmann_populations(E, T)
        out = p[..., a] - p[..., b]
        return float(out) if np.ndim(out) == 0 else out

    P.energies, P.pair = E, (a, b)
    return P


def polarization_hyperfine(q: PolarizationQuery) -> float:
    return polarization_curve(q.species, q.field, q.transition)(q.T)


@dataclass(frozen=True)
class EnsembleCouplingModel:
    gamma_tilde: float  # rad/s/T
    rho: float  # m^-3
    omega0: float  # rad/s

    def __post_init__(self):
        for k in ("gamma_tilde", "rho", "omega0"):
            v = getattr(self, k)
            if not (v > 0 and math.isfinite(v)):
                raise InputError(f"{k} must be positive")

    @property
    def full_polarization(self) -> float:
        """Coupling (Hz) for P = 1."""
        return ensemble_coupling(self, 1.0)


def ensemble_coupling(model: EnsembleCouplingModel, P):
    """(gamma_tilde/4) sqrt(P rho mu0 hbar omega0) / 2pi, in Hz."""
    P = np.asarray(P, dtype=float)
    if np.any(P < 0) or np.any(P > 1 + 1e-12):
        raise InputError("polarization must lie in [0, 1]")
    g = model.gamma_tilde / 4.0 * np.sqrt(P * model.rho * K.MU_0 * K.HBAR * model.omega0) / K.TWO_PI
    return float(g) if g.ndim == 0 else g


@dataclass
class TransitionCoupling:
    """How one measured transition ties to the total density.

    ``fraction`` is rho_sub / rho_total for the ensemble whose Boltzmann
    weights ``polarization`` describes (all 16 levels for 167Er).
    """

    key: str
    gamma_tilde: float
    fraction: float
    polarization: Callable
    omega0: float = K.TWO_PI * 4.37e9

    def model(self, rho_total) -> EnsembleCouplingModel:
        return EnsembleCouplingModel(self.gamma_tilde, self.fraction * rho_total, self.omega0)

    def gens(self, rho_total, T):
        P = np.clip(self.polarization(T), 0.0, 1.0)
        return ensemble_coupling(self.model(rho_total), P)

    @classmethod
    def for_transition(cls, species: SpinSpecies, transition, field: FieldVector,
                       gamma_tilde, fraction, omega0, key=None):
        if species.I == 0 and transition in ("I=0", None):
            def P(T):
                return polarization_I0(T, omega0)
        else:
            P = polarization_curve(species, field, transition)
        return cls(key or f"{species.name}:{transition}", gamma_tilde, fraction, P, omega0)


@dataclass
class ConcentrationFit:
    rho: float
    rho_err: float
    sub_densities: dict
    result: object = field(repr=False, default=None)

    def report(self):
        return [{"parameter": "rho_total_cm3", "value": self.rho / 1e6,
                 "std_error": self.rho_err / 1e6}]


_RHO_UNIT = 1e23  # keeps the single fit parameter O(1)


def fit_concentration(series: Mapping[str, tuple], couplings: Mapping[str, TransitionCoupling],
                      rho0: float = 1.0e23) -> ConcentrationFit:
    """Single-parameter least squares for the total density.

    ``series[key] = (T, gens_Hz, sigma_Hz)``; sigma may be None.
    """
    if not series or all(len(np.atleast_1d(s[0])) == 0 for s in series.values()):
        raise InputError("no g_ens data to fit")
    blocks = []
    for key, data in series.items():
        if key not in couplings:
            raise InputError(f"no coupling model for transition {key!r}")
        T, g = np.atleast_1d(np.asarray(data[0], float)), np.atleast_1d(np.asarray(data[1], float))
        s = data[2] if len(data) > 2 and data[2] is not None else np.ones_like(g)
        s = np.broadcast_to(np.asarray(s, float), g.shape)
        if T.shape != g.shape or np.any(s <= 0) or not np.all(np.isfinite(g)):
            raise InputError(f"malformed series for {key!r}")
        _check_T(T)
        blocks.append((couplings[key], T, g, s))

    def residual(v):
        rho = v["rho"] * _RHO_UNIT
        return np.concatenate([(c.gens(rho, T) - g) / s for c, T, g, s in blocks])

    prob = FitProblem([Parameter("rho", rho0 / _RHO_UNIT, lower=0.0)], residual=residual)
    res = solve(prob, raise_on_failure=True)
    rho = res.values["rho"] * _RHO_UNIT
    err = res.errors["rho"] * _RHO_UNIT
    subs = {k: c.fraction * rho for k, c in couplings.items()}
    return ConcentrationFit(rho, err, subs, res)


@dataclass
class BathTemperature:
    T: float
    std_error: float
    interval: tuple
    at_bound: bool = False
    branch: str = "decreasing"


def _peak(curve, T_lo, T_hi):
    grid = np.geomspace(T_lo, T_hi, 400)
    g = curve(grid)
    k = int(np.argmax(g))
    if 0 < k < grid.size - 1:
        r = minimize_scalar(lambda t: -curve(t), bounds=(grid[k - 1], grid[k + 1]),
                            method="bounded", options={"xatol": 1e-9 * grid[k]})
        return float(r.x), float(curve(r.x)), grid, g
    return float(grid[k]), float(g[k]), grid, g


def infer_bath_temperature(gens, curve: Callable, sigma: float | None = None,
                           T_bounds=(1e-4, 5.0), branch: str = "auto") -> BathTemperature:
    """Invert a g_ens(T) curve (Hz) for the bath temperature.

    ``curve`` maps T (K, array ok) to g_ens. For a curve that first rises
    and then falls (a pair not containing the ground level) pass
    ``branch="low"`` or ``"high"``; ``"auto"`` takes the rising low-T
    side in that case and the only side otherwise.
    """
    if not (gens >= 0 and math.isfinite(gens)):
        raise InputError("coupling must be finite and non-negative")
    T_lo, T_hi = T_bounds
    T_pk, g_pk, grid, g = _peak(curve, T_lo, T_hi)
    monotone = T_pk <= grid[1]
    if gens > g_pk * (1 + 1e-12):
        raise InfeasibleError(f"g_ens = {gens:.6g} Hz exceeds the model maximum {g_pk:.6g} Hz")
    if branch == "auto":
        branch = "high" if monotone else "low"
    if branch not in ("low", "high"):
        raise InputError("branch must be 'auto', 'low' or 'high'")
    if monotone:
        branch = "high"
    a, b = (T_pk, T_hi) if branch == "high" else (T_lo, T_pk)

    def f(t):
        return float(curve(t)) - gens

    at_bound = False
    if abs(gens - g_pk) <= 1e-12 * g_pk:
        T, at_bound = T_pk, True
    elif f(a) * f(b) > 0:
        # below the curve minimum on this branch
        raise InfeasibleError("g_ens outside the range reachable on this branch")
    else:
        T = brentq(f, a, b, xtol=1e-14, rtol=1e-12)
    h = 1e-5 * T
    slope = (float(curve(T + h)) - float(curve(max(T - h, T_lo * 0.5)))) / (T + h - max(T - h, T_lo * 0.5))
    err = abs(sigma / slope) if sigma and slope != 0 else (math.inf if sigma else 0.0)
    return BathTemperature(T, err, (max(T - err, 0.0), T + err), at_bound,
                           "decreasing" if branch == "high" else "increasing")


def yb_concentration_from_couplings(g_er, g_yb, gt_er, gt_yb, rho_er,
                                    abundance_er=0.77, abundance_yb=0.70) -> float:
    """Yb density from the I=0 couplings of Er and Yb measured together."""
    vals = (g_er, g_yb, gt_er, gt_yb, rho_er, abundance_er, abundance_yb)
    if any(not (v > 0 and math.isfinite(v)) for v in vals):
        raise InputError("all inputs must be positive")
    return (abundance_er / abundance_yb) * rho_er * (g_yb * gt_er / (g_er * gt_yb)) ** 2
