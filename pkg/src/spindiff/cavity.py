"""Transmission of a resonator coupled to several inhomogeneous spin ensembles.

Frequencies in rad/s, fields in T, couplings g_ens in Hz and linewidths
Gamma in Hz FWHM at the boundary; report files use kHz/MHz as labelled.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.interpolate import CubicSpline

from . import constants as K
from .errors import ConfigError, FitError, InputError
from .fitkit import FitProblem, Parameter, solve
from .spinham import SpinSpecies, find_transition, transition_frequencies

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Resonator:
    omega_r0: float  # rad/s at zero field
    shift: float = 0.0  # rad/s/T^2, omega_r(B) = omega_r0 - shift*B^2
    kappa_c: float = 3.0e6
    kappa_i: float = 5.0e5
    Q: float | None = None

    def __post_init__(self):
        if not (self.omega_r0 > 0 and self.kappa_c > 0 and self.kappa_i > 0):
            raise InputError("resonator frequency and loss rates must be positive")
        if self.Q is not None and abs(self.omega_r0 / self.kappa_t / self.Q - 1) > 0.05:
            raise InputError(f"configured Q={self.Q:g} inconsistent with omega_r/kappa_T="
                             f"{self.omega_r0 / self.kappa_t:.4g}")

    @property
    def kappa_t(self) -> float:
        return self.kappa_c + self.kappa_i

    def omega_r(self, B0):
        return self.omega_r0 - self.shift * np.asarray(B0, float) ** 2

    @classmethod
    def from_config(cls, cfg: dict) -> "Resonator":
        return cls(K.TWO_PI * cfg["f0_GHz"] * 1e9,
                   K.TWO_PI * cfg.get("quad_shift_MHz_per_mT2", 0.0) * 1e6 / 1e-6,
                   cfg.get("kappa_c_per_s", 3e6), cfg.get("kappa_i_per_s", 5e5), cfg.get("Q"))


@dataclass
class CoupledLine:
    label: str
    gens: float  # Hz
    gamma: float  # Hz FWHM
    omega_s: Callable  # B0 (T, array) -> rad/s

    def __post_init__(self):
        if not (self.gens >= 0 and self.gamma > 0):
            raise InputError(f"{self.label}: need g_ens >= 0 and Gamma > 0")


def s21(omega, B0, resonator: Resonator, lines: Sequence[CoupledLine] = ()):
    """Complex transmission; ``omega`` and ``B0`` broadcast against each other."""
    omega = np.asarray(omega, float)
    B0 = np.asarray(B0, float)
    chi = 0.0
    for ln in lines:
        chi = chi + 2 * (K.TWO_PI * ln.gens) ** 2 / (1j * (omega - ln.omega_s(B0)) + math.pi * ln.gamma)
    den = 2j * (omega - resonator.omega_r(B0)) + resonator.kappa_t + chi
    return 1 - resonator.kappa_c / den


def transition_spline(species: SpinSpecies, label: str, B_range, omega_target, orientation="b",
                      n=400) -> Callable:
    """omega_S(B) for a labelled transition as a cubic spline over ``B_range``."""
    res = find_transition(species, label, omega_target, orientation, (0.0, max(B_range[1], 0.1) * 1.5))
    grid = np.linspace(max(B_range[0], 1e-5), B_range[1], n)
    w = transition_frequencies(species, orientation, grid, res.labels)
    spl = CubicSpline(grid, w)
    spl.B_res = res.B0
    return spl


# ------------------------------------------------------------------ data

@dataclass
class Spectrum:
    """|S21| (or complex S21) on a rectangular (B0, omega) grid."""

    B: np.ndarray  # (nB,) T
    omega: np.ndarray  # (nw,) rad/s
    data: np.ndarray  # (nB, nw), real magnitude or complex

    def __post_init__(self):
        self.B, self.omega = np.asarray(self.B, float), np.asarray(self.omega, float)
        self.data = np.asarray(self.data)
        if self.data.shape != (self.B.size, self.omega.size):
            raise InputError("spectrum data must have shape (len(B), len(omega))")
        if not np.all(np.isfinite(self.data)):
            raise InputError("spectrum contains non-finite values")

    @property
    def is_complex(self) -> bool:
        return np.iscomplexobj(self.data)

    def select(self, mask) -> "Spectrum":
        return Spectrum(self.B[mask], self.omega, self.data[mask])


def simulate_spectrum(B, omega, resonator, lines, noise=0.0, rng=None, magnitude=True) -> Spectrum:
    """Model spectrum with optional additive Gaussian noise (absolute, on |S21|)."""
    B, omega = np.asarray(B, float), np.asarray(omega, float)
    S = s21(omega[None, :], B[:, None], resonator, lines)
    S = np.abs(S) if magnitude else S
    if noise:
        rng = np.random.default_rng(rng)
        S = S + noise * rng.standard_normal(S.shape)
        if not magnitude:
            S = S + 1j * noise * rng.standard_normal(S.shape)
    return Spectrum(B, omega, S)


SPECTRUM_HEADER = ["B0_mT", "freq_GHz", "s21_mag"]


def write_spectrum_csv(spec: Spectrum, path):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SPECTRUM_HEADER + (["s21_re", "s21_im"] if spec.is_complex else []))
        for i, B in enumerate(spec.B):
            for j, om in enumerate(spec.omega):
                v = spec.data[i, j]
                row = [f"{B * 1e3:.9g}", f"{om / K.TWO_PI / 1e9:.12g}", f"{abs(v):.10g}"]
                if spec.is_complex:
                    row += [f"{v.real:.10g}", f"{v.imag:.10g}"]
                w.writerow(row)


def read_spectrum_csv(path) -> Spectrum:
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise InputError(f"cannot read spectrum {path}: {exc}") from exc
    if not rows:
        raise InputError(f"{path}: empty file")
    head = [c.strip() for c in rows[0]]
    if head[:3] != SPECTRUM_HEADER:
        raise InputError(f"{path}: header must start with {','.join(SPECTRUM_HEADER)}")
    cplx = head[3:5] == ["s21_re", "s21_im"]
    try:
        arr = np.array([[float(c) for c in r] for r in rows[1:] if r])
    except ValueError as exc:
        raise InputError(f"{path}: non-numeric value ({exc})") from exc
    if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] < (5 if cplx else 3):
        raise InputError(f"{path}: missing columns or no data rows")
    Bs, fs = np.unique(arr[:, 0]), np.unique(arr[:, 1])
    if arr.shape[0] != Bs.size * fs.size:
        raise InputError(f"{path}: points do not form a complete (B0, freq) grid")
    i, j = np.searchsorted(Bs, arr[:, 0]), np.searchsorted(fs, arr[:, 1])
    data = np.full((Bs.size, fs.size), np.nan, dtype=complex if cplx else float)
    data[i, j] = arr[:, 3] + 1j * arr[:, 4] if cplx else arr[:, 2]
    if np.isnan(data).any():
        raise InputError(f"{path}: duplicate grid points")
    return Spectrum(Bs * 1e-3, fs * 1e9 * K.TWO_PI, data)


# --------------------------------------------------------------- fitting

@dataclass
class BackgroundFit:
    resonator: Resonator
    rms: float
    result: object = field(repr=False, default=None)


def fit_resonator_background(spec: Spectrum, guess: Resonator) -> BackgroundFit:
    """Quadratic omega_r(B0) and loss rates from slices containing no spin lines."""
    if spec.B.size < 3:
        raise FitError("need at least 3 field slices for a quadratic background",
                       {"n_slices": int(spec.B.size)})
    w0 = guess.omega_r0
    params = [Parameter("dw0", 0.0),  # offset of omega_r0 from the guess, units of kappa_T
              Parameter("shift", guess.shift / guess.kappa_t),
              Parameter("kc", 1.0, lower=1e-6), Parameter("ki", guess.kappa_i / guess.kappa_c, lower=1e-6)]
    kscale = guess.kappa_c

    def build(v):
        kc = v["kc"] * kscale
        return Resonator(w0 + v["dw0"] * guess.kappa_t, v["shift"] * guess.kappa_t, kc, v["ki"] * kscale)

    def resid(v):
        S = s21(spec.omega[None, :], spec.B[:, None], build(v))
        r = np.abs(S) - np.abs(spec.data) if not spec.is_complex else (S - spec.data).view(float)
        return np.ravel(r)

    res = solve(FitProblem(params, residual=resid))
    if not res.success:
        raise FitError(f"background fit failed: {res.message}", {"status": res.status})
    return BackgroundFit(build(res.values), float(np.sqrt(2 * res.cost / res.n_points)), res)


@dataclass
class LineTemplate:
    label: str
    omega_s: Callable
    gens_guess: float | None = None  # Hz; None -> from the anti-crossing (dominant only)
    gamma_guess: float = 10e6  # Hz
    dominant: bool = False


def splitting_guess(spec: Spectrum, resonator: Resonator, omega_s: Callable) -> float:
    """g_ens (Hz) from the two deepest |S21| minima of the slice closest to resonance."""
    detune = np.abs(omega_s(spec.B) - resonator.omega_r(spec.B))
    row = np.abs(spec.data[int(np.argmin(detune))])
    inner = np.flatnonzero((row[1:-1] < row[:-2]) & (row[1:-1] <= row[2:])) + 1
    if inner.size < 2:
        return resonator.kappa_t / K.TWO_PI  # no resolved splitting: weak-coupling scale
    a, b = sorted(inner[np.argsort(row[inner])[:2]])
    return abs(spec.omega[b] - spec.omega[a]) / 2 / K.TWO_PI


@dataclass
class LineEstimate:
    label: str
    gens: float
    gens_err: float
    gamma: float
    gamma_err: float

    def as_row(self):
        return {"transition": self.label, "gens_kHz": self.gens / 1e3, "gens_err": self.gens_err / 1e3,
                "gamma_MHz": self.gamma / 1e6, "gamma_err": self.gamma_err / 1e6}


@dataclass
class SpectrumFit:
    lines: list
    amplitude: float
    stages: list  # FitResult per stage, in order run
    notes: list = field(default_factory=list)

    def report(self):
        return [ln.as_row() for ln in self.lines]


_G, _W = 1e6, 1e6  # fit units: g_ens in MHz, Gamma in MHz
_G_FLOOR = 1e-3  # 1 kHz; a line at exactly zero coupling makes its width unidentifiable


def _width_floor(spec, t) -> float:
    """Linewidth (Hz) swept in one field step: narrower lines are unresolvable."""
    dB = float(np.median(np.diff(spec.B))) if spec.B.size > 1 else 0.0
    B = spec.B
    slope = np.max(np.abs(np.gradient(t.omega_s(B), B))) if B.size > 1 else 0.0
    return max(slope * dB / K.TWO_PI, 1e3)


def _stage(spec, resonator, free: list, frozen: list, amplitude, fit_amplitude, stage_name):
    params = []
    for k, t in enumerate(free):
        params += [Parameter(f"g{k}", max(t.gens_guess / _G, _G_FLOOR), lower=_G_FLOOR),
                   Parameter(f"w{k}", max(t.gamma_guess, 2 * _width_floor(spec, t)) / _W,
                             lower=_width_floor(spec, t) / _W)]
    params.append(Parameter("amp", amplitude, lower=0.0, vary=fit_amplitude))
    data = spec.data

    def lines_of(v):
        out = [CoupledLine(t.label, v[f"g{k}"] * _G, v[f"w{k}"] * _W, t.omega_s) for k, t in enumerate(free)]
        return out + [CoupledLine(t.label, t.gens, t.gamma, t.omega_s) for t in frozen]

    def resid(v):
        S = v["amp"] * s21(spec.omega[None, :], spec.B[:, None], resonator, lines_of(v))
        if np.iscomplexobj(data):
            return (S - data).ravel().view(float)
        return (np.abs(S) - data).ravel()

    res = solve(FitProblem(params, residual=resid))
    if not res.success:
        raise FitError(f"{stage_name} did not converge: {res.message}",
                       {"stage": stage_name, "status": res.status, "cost": res.cost,
                        "values": res.values})
    est = [LineEstimate(t.label, res.values[f"g{k}"] * _G, res.errors[f"g{k}"] * _G,
                        res.values[f"w{k}"] * _W, res.errors[f"w{k}"] * _W) for k, t in enumerate(free)]
    return est, res


def fit_spectrum_two_stage(spec: Spectrum, resonator: Resonator, templates: Sequence[LineTemplate],
                           fit_amplitude=False, cycles=2, refine=True,
                           hold_templates=True) -> SpectrumFit:
    """Dominant line alone, then every other line with the dominant one frozen.

    With ``hold_templates`` the other lines sit at their starting values
    during stage 1 instead of being left out. ``cycles`` repeats the pair
    of stages, refitting the dominant line against the latest estimates of
    the others and the others again from their templates. ``refine`` finishes with every line free so the reported
    standard errors include the correlations between overlapping lines;
    with ``refine=False`` they are those of the last stage a line was free in.
    """
    dom = [t for t in templates if t.dominant]
    if len(dom) != 1:
        raise InputError("exactly one line template must be marked dominant")
    dom, rest = dom[0], [t for t in templates if not t.dominant]
    if dom.gens_guess is None:
        dom = replace(dom, gens_guess=splitting_guess(spec, resonator, dom.omega_s))
    if any(t.gens_guess is None for t in rest):
        raise InputError("non-dominant line templates need a g_ens starting value")
    stages, notes = [], []
    context = [_as_fixed(t) for t in rest] if hold_templates else []
    est_dom, r1 = _stage(spec, resonator, [dom], context, 1.0, fit_amplitude, "stage 1")
    stages.append(r1)
    amp = r1.values["amp"]
    est_rest = []
    for cycle in range(cycles + 1 if rest else 0):
        d = est_dom[0]
        frozen_dom = replace(dom, gens_guess=d.gens, gamma_guess=d.gamma)
        est_rest, r2 = _stage(spec, resonator, rest, [_as_fixed(frozen_dom)], amp, fit_amplitude,
                              f"stage 2 (cycle {cycle})")
        stages.append(r2)
        amp = r2.values["amp"]
        latest = [replace(t, gens_guess=e.gens, gamma_guess=e.gamma) for t, e in zip(rest, est_rest)]
        if cycle == cycles:
            break
        dom = replace(dom, gens_guess=d.gens, gamma_guess=d.gamma)
        est_dom, r1 = _stage(spec, resonator, [dom], [_as_fixed(t) for t in latest], amp, fit_amplitude,
                             f"stage 1 (cycle {cycle + 1})")
        stages.append(r1)
        amp = r1.values["amp"]
    order = {t.label: k for k, t in enumerate(templates)}
    lines = sorted(est_dom + est_rest, key=lambda e: order[e.label])
    if refine and rest:
        start = [replace(t, gens_guess=e.gens, gamma_guess=e.gamma)
                 for t, e in zip(sorted([dom] + rest, key=lambda t: order[t.label]), lines)]
        # a line that collapsed onto a bound in the staged fits restarts from its template
        start = [t0 if _collapsed(spec, t) else t
                 for t, t0 in zip(start, sorted([dom] + rest, key=lambda t: order[t.label]))]
        try:
            lines, r3 = _stage(spec, resonator, start, [], amp, fit_amplitude, "joint refinement")
        except FitError as exc:
            # keep the staged estimates; their errors ignore cross-line correlation
            log.warning("%s; reporting staged estimates", exc)
            notes.append(f"joint refinement failed ({exc.diagnostics.get('status')}); staged estimates kept")
        else:
            stages.append(r3)
            amp = r3.values["amp"]
    return SpectrumFit(lines, amp, stages, notes)


def _collapsed(spec, t) -> bool:
    return t.gens_guess <= 1.01 * _G_FLOOR * _G or t.gamma_guess <= 1.01 * _width_floor(spec, t)


@dataclass
class _Fixed:
    label: str
    gens: float
    gamma: float
    omega_s: Callable


def _as_fixed(t: LineTemplate) -> _Fixed:
    return _Fixed(t.label, t.gens_guess, t.gamma_guess, t.omega_s)


def write_fit_report(fit: SpectrumFit, path):
    Path(path).write_text(json.dumps(fit.report(), indent=2) + "\n")


def lines_from_config(cfg: dict, registry: dict, resonator: Resonator, B_range=(0.02, 0.06),
                      guess_scale=(1.0, 1.0)):
    """(CoupledLine list, LineTemplate list) for the ``lines`` section.

    Labels are ``species:transition``. The template starting values are the
    configured (g_ens, Gamma) times ``guess_scale``; the dominant template
    gets its g_ens from the data.
    """
    axis = cfg.get("resonator", {}).get("field_axis", "b")
    truth, templates = [], []
    for ln in cfg.get("lines") or []:
        try:
            sp = registry[ln["species"]]
            label = f"{ln['species']}:{ln['transition']}"
            g, w = ln["gens_kHz"] * 1e3, ln["gamma_MHz"] * 1e6
        except KeyError as exc:
            raise ConfigError(f"line entry {ln!r}: unknown or missing {exc}") from exc
        spl = transition_spline(sp, ln["transition"], B_range, resonator.omega_r0, axis)
        dom = bool(ln.get("dominant"))
        truth.append(CoupledLine(label, g, w, spl))
        templates.append(LineTemplate(label, spl, None if dom else g * guess_scale[0], w * guess_scale[1], dom))
    if not truth:
        raise ConfigError("config defines no coupled lines")
    return truth, templates
