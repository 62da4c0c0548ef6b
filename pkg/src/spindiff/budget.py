"""Decoherence budget: instantaneous diffusion, electron and nuclear spectral diffusion.

Rates are Hz (linewidth units), temperatures K, fields T.
"""
from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import constants as K
from .errors import InputError
from .sdmodel import t2_from_params, thermal_factor
from .spinham import FieldVector, SpinSpecies
from .thermal import boltzmann_populations, polarization_curve

# Discrete readings of the printed ID expression that the anchors decide between.
BANDWIDTH = ("dw/Gamma", "Gamma/dw")
ANGLE = ("sin2", "sin-2")
POPULATION = ("pair", "difference")


@dataclass(frozen=True)
class IDConvention:
    bandwidth: str = "dw/Gamma"
    angle: str = "sin2"
    population: str = "pair"

    def __post_init__(self):
        if self.bandwidth not in BANDWIDTH or self.angle not in ANGLE or self.population not in POPULATION:
            raise InputError(f"unknown ID convention {self}")

    def describe(self) -> str:
        return f"bandwidth={self.bandwidth}, angle={self.angle}, population={self.population}"


@dataclass
class BudgetConfig:
    species: SpinSpecies  # 167Er
    g_eff: float = 8.38
    line_width: float = 22e6  # Hz, inhomogeneous width of the probed line
    bandwidth: float = 700e3  # Hz, pulse excitation bandwidth
    theta2: float = 1.9  # rad
    rho167: float = 5.2e22  # m^-3
    B0: float = 43.5e-3
    transition: str = "mI=+3/2"
    field_axis: str = "b"
    gamma_max: dict = field(default_factory=lambda: {"Er": 400e3, "Yb": 150e3})  # Hz
    R_max: dict = field(default_factory=lambda: {"Er": 1.4e3, "Yb": 0.14e3})  # s^-1
    g: dict = field(default_factory=lambda: {"Er": 8.38, "Yb": 3.93677})
    gamma_nsd: float = 12.0
    convention: IDConvention | None = None  # None: calibrate against the anchors on first use

    def __post_init__(self):
        for k in ("g_eff", "line_width", "bandwidth", "rho167", "B0"):
            if not getattr(self, k) > 0:
                raise InputError(f"{k} must be positive")
        if not 0 < self.theta2 <= math.pi:
            raise InputError("theta2 must lie in (0, pi]")
        if self.gamma_nsd < 0 or any(v < 0 for v in (*self.gamma_max.values(), *self.R_max.values())):
            raise InputError("rates must be >= 0")
        self._pops = None

    @classmethod
    def from_config(cls, cfg: dict, species: SpinSpecies) -> "BudgetConfig":
        b = cfg["budget"]
        conv = b.get("id_convention")
        return cls(species, b["g_eff"], b["line_MHz"] * 1e6, b["bandwidth_kHz"] * 1e3, b["theta2_rad"],
                   b["rho167_cm3"] * 1e6, b["B0_mT"] * 1e-3, b["transition"],
                   cfg.get("resonator", {}).get("field_axis", "b"),
                   {"Er": b["gamma_max_er_kHz"] * 1e3, "Yb": b["gamma_max_yb_kHz"] * 1e3},
                   {"Er": b["r_max_er_per_ms"] * 1e3, "Yb": b["r_max_yb_per_ms"] * 1e3},
                   {"Er": b["g_er"], "Yb": b["g_yb"]}, b["gamma_nsd_Hz"],
                   IDConvention(**conv) if conv else None)

    def pair_populations(self, T):
        """(p_lower, p_upper) of the probed level pair at bath temperature T."""
        if self._pops is None:
            P = polarization_curve(self.species, FieldVector.along(self.field_axis, self.B0), self.transition)
            self._pops = (P.energies, P.pair)
        E, (a, b) = self._pops
        p = boltzmann_populations(E, T)
        return p[..., a], p[..., b]


def id_prefactor(g_eff) -> float:
    """mu0 (g mu_B)^2 / (9 sqrt3 hbar): dipolar rate per unit density (m^3/s)."""
    return K.MU_0 * (g_eff * K.MU_B) ** 2 / (9.0 * math.sqrt(3.0) * K.HBAR)


def gamma0_id(T, cfg: BudgetConfig, convention: IDConvention | None = None):
    """Instantaneous-diffusion rate (Hz) at bath temperature T."""
    conv = convention or cfg.convention or calibrate_id_convention(cfg).convention
    T = np.asarray(T, float)
    if np.any(~(T > 0)):
        raise InputError("temperature must be > 0")
    ratio = cfg.bandwidth / cfg.line_width
    if conv.bandwidth == "Gamma/dw":
        ratio = 1.0 / ratio
    s2 = math.sin(cfg.theta2 / 2) ** 2
    angle = s2 if conv.angle == "sin2" else 1.0 / s2
    lo, up = cfg.pair_populations(T)
    pop = lo + up if conv.population == "pair" else lo - up
    out = id_prefactor(cfg.g_eff) * ratio * angle * pop * cfg.rho167
    return float(out) if out.ndim == 0 else out


# Reference values the convention must reproduce (T in K, rate in Hz).
ID_ANCHORS = {"low": (0.023, 51.0), "high": (0.530, 630.0), "plateau": (1.0, 650.0)}


@dataclass
class Calibration:
    convention: IDConvention
    table: list  # one dict per candidate: convention, values, score, monotone

    def report(self):
        return {"selected": self.convention.describe(),
                "candidates": [{**r, "convention": r["convention"].describe()} for r in self.table]}


def calibrate_id_convention(cfg: BudgetConfig, anchors=ID_ANCHORS) -> Calibration:
    """Pick the convention that best matches the anchors among those monotone in T.

    Score is the summed squared log-error over the anchors. The result is
    cached on ``cfg``.
    """
    grid = np.geomspace(0.01, 5.0, 200)
    rows = []
    for bw, ang, pop in itertools.product(BANDWIDTH, ANGLE, POPULATION):
        c = IDConvention(bw, ang, pop)
        vals = {k: gamma0_id(T, cfg, c) for k, (T, _) in anchors.items()}
        curve = gamma0_id(grid, cfg, c)
        mono = bool(np.all(np.diff(curve) >= -1e-12 * np.abs(curve).max()))
        if all(v > 0 for v in vals.values()):
            score = sum(math.log(vals[k] / ref) ** 2 for k, (_, ref) in anchors.items())
        else:
            score = math.inf
        rows.append({"convention": c, "values_Hz": vals, "score": score, "monotone": mono})
    ok = [r for r in rows if r["monotone"] and math.isfinite(r["score"])] or rows
    best = min(ok, key=lambda r: r["score"])
    cfg.convention = best["convention"]
    return Calibration(best["convention"], rows)


def gamma_sd_combined(T, cfg: BudgetConfig):
    """sqrt( (1/4pi) sum_S Gamma_max^S R_max^S sech^4(g_S mu_B B0 / 2kT) ), in Hz."""
    T = np.asarray(T, float)
    tot = 0.0
    for s in cfg.gamma_max:
        f = thermal_factor(cfg.g[s], cfg.B0, T)
        tot = tot + cfg.gamma_max[s] * cfg.R_max[s] * f * f
    out = np.sqrt(np.asarray(tot) / (4.0 * math.pi))
    return float(out) if out.ndim == 0 else out


def gamma_h(g0, g_sd, g_nsd):
    """Homogeneous linewidth (Hz) from the three contributions, rationalised form."""
    g0, g_sd, g_nsd = (np.asarray(v, float) for v in (g0, g_sd, g_nsd))
    if np.any(g0 < 0) or np.any(g_sd < 0) or np.any(g_nsd < 0):
        raise InputError("rates must be >= 0")
    if np.any((g0 == 0) & (g_sd == 0) & (g_nsd == 0)):
        raise InputError("Gamma_h undefined when every contribution is zero")
    out = 0.5 * (g0 + np.sqrt(g0 ** 2 + 4 * g_sd ** 2 + 4 * g_nsd ** 2))
    return float(out) if out.ndim == 0 else out


def gamma_h_quotient(g0, g_sd, g_nsd):
    """The unrationalised quotient form; undefined when g_sd = g_nsd = 0."""
    s = g_sd ** 2 + g_nsd ** 2
    return 2 * s / (-g0 + math.sqrt(g0 ** 2 + 4 * s))


@dataclass
class BudgetRow:
    T: float
    gamma0: float
    gamma_sd: float
    gamma_nsd: float
    gamma_h: float
    T2: float


def budget_curve(T_grid, cfg: BudgetConfig) -> list[BudgetRow]:
    T = np.atleast_1d(np.asarray(T_grid, float))
    if T.size == 0 or np.any(~(T > 0)):
        raise InputError("temperature grid must be non-empty and positive")
    g0 = np.atleast_1d(gamma0_id(T, cfg))
    gsd = np.atleast_1d(gamma_sd_combined(T, cfg))
    rows = []
    for t, a, s in zip(T, g0, gsd):
        gh = gamma_h(a, s, cfg.gamma_nsd)
        t2 = t2_from_params(a, K.TWO_PI * (s ** 2 + cfg.gamma_nsd ** 2))
        rows.append(BudgetRow(float(t), float(a), float(s), cfg.gamma_nsd, gh, t2))
    return rows


BUDGET_HEADER = ["T_mK", "Gamma0_Hz", "GammaSD_Hz", "GammaNSD_Hz", "Gammah_Hz", "T2_ms"]


def write_budget_csv(rows, path):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(BUDGET_HEADER)
        for r in rows:
            w.writerow([f"{r.T * 1e3:.6g}", f"{r.gamma0:.8g}", f"{r.gamma_sd:.8g}", f"{r.gamma_nsd:.8g}",
                        f"{r.gamma_h:.8g}", f"{r.T2 * 1e3:.8g}"])
