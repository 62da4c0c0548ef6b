"""Echo-decay model with spectral diffusion, ESEEM and the 2PE/3PE fits.

Linewidths (Gamma0, Gamma_SD) are Hz FWHM, rates R are s^-1, delays are s.
"""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import constants as K
from .errors import FitError, InputError
from .fitkit import FitProblem, Parameter, solve


class DegeneracyWarning(UserWarning):
    """Data cannot separate Gamma_SD from R (or too few curves)."""


# ------------------------------------------------------------ temperature laws

def _x(g, B0, T):
    T = np.asarray(T, float)
    if np.any(~(T > 0)):
        raise InputError("temperature must be > 0")
    return g * K.MU_B * B0 / (2.0 * K.K_B * T)


def sech2(x):
    """sech^2 without overflow for large |x|."""
    e = np.exp(-2.0 * np.abs(np.asarray(x, float)))
    out = 4.0 * e / (1.0 + e) ** 2
    return float(out) if out.ndim == 0 else out


def thermal_factor(g, B0, T):
    """sech^2(g muB B0 / 2kT): the polarization factor shared by Gamma_SD(T) and R(T)."""
    return sech2(_x(g, B0, T))


def gamma_sd_of_T(gamma_max, g, B0, T):
    return gamma_max * thermal_factor(g, B0, T)


def flip_rate_of_T(alpha_ff, alpha_ph, g, g_perp, n, linewidth, B0, T):
    """Flip-flop plus direct-phonon flip rate (s^-1)."""
    if not linewidth > 0:
        raise InputError("inhomogeneous linewidth must be > 0")
    ff = alpha_ff * g_perp ** 4 * n ** 2 / linewidth * thermal_factor(g, B0, T)
    if alpha_ph == 0:
        return ff
    return ff + alpha_ph * g ** 3 * B0 ** 5 / np.tanh(_x(g, B0, T))


def gamma_max_analytic(g_er, g_s, n_s):
    """mu_B^2 mu0 g_Er g_S n_S / (9 sqrt3 hbar), n_S in m^-3."""
    if n_s < 0:
        raise InputError("density must be >= 0")
    return K.MU_B ** 2 * K.MU_0 * g_er * g_s * n_s / (9.0 * math.sqrt(3.0) * K.HBAR)


# ------------------------------------------------------------- forward model

@dataclass
class SpeciesSD:
    name: str
    gamma_sd: float = 0.0  # Hz
    R: float = 0.0  # s^-1
    gamma_max: float | None = None
    R_max: float | None = None
    alpha_ff: float | None = None
    alpha_ph: float | None = None

    def __post_init__(self):
        for k in ("gamma_sd", "R", "gamma_max", "R_max", "alpha_ff", "alpha_ph"):
            v = getattr(self, k)
            if v is not None and not v >= 0:
                raise InputError(f"{self.name}: {k} must be >= 0")


SDParams = Sequence[SpeciesSD]


@dataclass(frozen=True)
class Eseem:
    k: float = 0.0
    omega_alpha: float = 0.0  # rad/s
    omega_beta: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.k <= 1.0:
            raise InputError("modulation depth k must lie in [0, 1]")

    @classmethod
    def from_config(cls, d: dict | None) -> "Eseem":
        if not d:
            return cls()
        return cls(d.get("depth", 0.0), K.TWO_PI * d.get("f_alpha_MHz", 0.0) * 1e6,
                   K.TWO_PI * d.get("f_beta_MHz", 0.0) * 1e6)


@dataclass(frozen=True)
class EchoConfig:
    tau: float
    T_W: float = 0.0
    gamma0: float = 0.0
    A0: float = 1.0
    T1: float = math.inf
    eseem: Eseem = Eseem()

    def __post_init__(self):
        if np.any(np.asarray(self.tau) < 0) or np.any(np.asarray(self.T_W) < 0):
            raise InputError("delays must be >= 0")
        if not self.T1 > 0:
            raise InputError("T1 must be > 0")


def gamma_eff(tau, T_W, gamma0, sd: SDParams):
    """Gamma0 + sum (Gamma_SD/2)(R tau + 1 - exp(-R T_W)); array-friendly."""
    tau, T_W = np.asarray(tau, float), np.asarray(T_W, float)
    if np.any(tau < 0) or np.any(T_W < 0):
        raise InputError("delays must be >= 0")
    out = gamma0 + 0.0 * (tau + T_W)
    for s in sd:
        # -expm1(-x) is 1 - exp(-x) without cancellation as R T_W -> 0
        out = out + 0.5 * s.gamma_sd * (s.R * tau - np.expm1(-s.R * T_W))
    return float(out) if out.ndim == 0 else out


def eseem_envelope(kind, tau, T_W, k, omega_alpha, omega_beta):
    """Two- or three-pulse envelope for one effective I=1/2 nucleus.

    Both kinds lie in [1-2k, 1] and equal 1 at tau=0 and for k=0.
    """
    if not 0.0 <= k <= 1.0:
        raise InputError("modulation depth k must lie in [0, 1]")
    tau, T_W = np.asarray(tau, float), np.asarray(T_W, float)
    ca, cb = 1 - np.cos(omega_alpha * tau), 1 - np.cos(omega_beta * tau)
    if kind == "2PE":
        v = 1 - 0.5 * k * (ca * cb)  # grouped so 3PE at T_W = 0 reproduces it bit for bit
    elif kind == "3PE":
        t = tau + T_W
        v = 1 - 0.25 * k * (ca * (1 - np.cos(omega_beta * t)) + cb * (1 - np.cos(omega_alpha * t)))
    else:
        raise InputError(f"unknown echo kind {kind!r}")
    return float(v) if np.ndim(v) == 0 else v


def echo_amplitude(cfg: EchoConfig, sd: SDParams, kind=None):
    kind = kind or ("2PE" if np.all(np.asarray(cfg.T_W) == 0) else "3PE")
    e = cfg.eseem
    v = eseem_envelope(kind, cfg.tau, cfg.T_W, e.k, e.omega_alpha, e.omega_beta) if e.k else 1.0
    g = gamma_eff(cfg.tau, cfg.T_W, cfg.gamma0, sd)
    t1 = np.exp(-np.asarray(cfg.T_W, float) / cfg.T1) if math.isfinite(cfg.T1) else 1.0
    return v * cfg.A0 * np.exp(-K.TWO_PI * g * np.asarray(cfg.tau, float)) * t1


def t2_from_params(a, b):
    """Coherence time (s) with a = Gamma0 (Hz) and b = (1/2) sum Gamma_SD R (s^-2).

    The 2PE amplitude has fallen to 1/e at total evolution time T2 = 2 tau.
    """
    if a < 0 or b < 0:
        raise InputError("a and b must be >= 0")
    if a == 0 and b == 0:
        raise InputError("T2 undefined when a = b = 0")
    # (-a + sqrt(a^2 + 2b/pi)) / b, rationalised: no cancellation, and the
    # b -> 0 (1/(pi a)) and a -> 0 (sqrt(2/(pi b))) limits come out exactly
    return 2.0 / (math.pi * (a + math.sqrt(a * a + 2.0 * b / math.pi)))


# ----------------------------------------------------------- species tying

@dataclass
class TieConfig:
    """Fixed inputs that map the Er pair onto the Yb pair."""

    g_er: float = 8.38
    g_yb: float = 3.93677
    n_er: float = 22.88  # any common unit
    n_yb: float = 14.17
    linewidth_er: float = 36.2e6  # Hz
    linewidth_yb: float = 5.6e6
    B0: float = 43.5e-3

    @classmethod
    def from_config(cls, sd: dict) -> "TieConfig":
        return cls(sd["g_er"], sd["g_yb"], sd["n_er_ppm"], sd["n_yb_ppm"],
                   sd["linewidth_er_MHz"] * 1e6, sd["linewidth_yb_MHz"] * 1e6, sd["B0_mT"] * 1e-3)

    def ratios(self, T):
        """(Gamma_SD^Yb/Gamma_SD^Er, R^Yb/R^Er) at bath temperature T."""
        th = thermal_factor(self.g_yb, self.B0, T) / thermal_factor(self.g_er, self.B0, T)
        rg = self.g_yb * self.n_yb / (self.g_er * self.n_er) * th
        rr = (self.linewidth_er / self.linewidth_yb) * (self.g_yb ** 4 * self.n_yb ** 2) / (
            self.g_er ** 4 * self.n_er ** 2) * th
        return rg, rr


def tie_species(sd_er: SpeciesSD, T, tie: TieConfig, name="Yb") -> SpeciesSD:
    rg, rr = tie.ratios(T)
    return SpeciesSD(name, sd_er.gamma_sd * rg, sd_er.R * rr)


# ------------------------------------------------------------------ datasets

@dataclass
class EchoCurve:
    tau: np.ndarray
    T_W: np.ndarray
    amplitude: np.ndarray
    sigma: np.ndarray | None = None

    def __post_init__(self):
        self.tau = np.atleast_1d(np.asarray(self.tau, float))
        self.T_W = np.broadcast_to(np.asarray(self.T_W, float), self.tau.shape).copy()
        self.amplitude = np.atleast_1d(np.asarray(self.amplitude, float))
        if self.amplitude.shape != self.tau.shape:
            raise InputError("tau, T_W and amplitude must have the same length")
        if not np.all(np.isfinite(self.amplitude)):
            raise InputError("amplitudes must be finite")
        if self.sigma is not None:
            self.sigma = np.broadcast_to(np.asarray(self.sigma, float), self.tau.shape).copy()
            if np.any(~(self.sigma > 0)):
                raise InputError("sigma must be > 0")


@dataclass
class EchoDataset:
    kind: str  # "2PE" or "3PE"
    curves: list
    T_B: float | None = None  # K
    B0: float | None = None  # T

    def __post_init__(self):
        if self.kind not in ("2PE", "3PE"):
            raise InputError(f"unknown echo kind {self.kind!r}")


ECHO_HEADER = ["kind", "tau_us", "Tw_us", "amplitude", "sigma", "T_mK", "B0_mT"]


def read_echo_csv(path) -> list[EchoDataset]:
    """Group rows by (kind, T, B0); 3PE curves split by tau, 2PE curves wherever tau restarts."""
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            rd = csv.DictReader(fh)
            if rd.fieldnames is None or [c.strip() for c in rd.fieldnames] != ECHO_HEADER:
                raise InputError(f"{path}: header must be {','.join(ECHO_HEADER)}")
            rows = list(rd)
    except OSError as exc:
        raise InputError(f"cannot read echo data {path}: {exc}") from exc
    groups: dict = {}
    for n, r in enumerate(rows, start=2):
        try:
            kind = r["kind"].strip()
            vals = [float(r[c]) for c in ECHO_HEADER[1:]]
        except (ValueError, AttributeError) as exc:
            raise InputError(f"{path}:{n}: bad value ({exc})") from exc
        groups.setdefault((kind, vals[4], vals[5]), []).append(vals)
    out = []
    for (kind, T, B), vals in groups.items():
        a = np.array(vals)
        if kind == "3PE":
            curves = [EchoCurve(a[m, 0] * 1e-6, a[m, 1] * 1e-6, a[m, 2], a[m, 3])
                      for m in (a[:, 0] == t for t in np.unique(a[:, 0]))]
        else:
            # a drop in tau starts the next curve of a sweep (e.g. over pulse power)
            cuts = np.flatnonzero(np.diff(a[:, 0]) < 0) + 1
            curves = [EchoCurve(b[:, 0] * 1e-6, b[:, 1] * 1e-6, b[:, 2], b[:, 3]) for b in np.split(a, cuts)]
        out.append(EchoDataset(kind, curves, T * 1e-3, B * 1e-3))
    return out


def write_echo_csv(datasets: Sequence[EchoDataset], path):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ECHO_HEADER)
        for ds in datasets:
            for c in ds.curves:
                sig = c.sigma if c.sigma is not None else np.ones_like(c.amplitude)
                for t, tw, a, s in zip(c.tau, c.T_W, c.amplitude, sig):
                    w.writerow([ds.kind, f"{t * 1e6:.10g}", f"{tw * 1e6:.10g}", f"{a:.10g}", f"{s:.6g}",
                                f"{(ds.T_B or 0) * 1e3:.6g}", f"{(ds.B0 or 0) * 1e3:.6g}"])


# ------------------------------------------------------------------- fitting

@dataclass
class FamilyFit:
    er: SpeciesSD
    yb: SpeciesSD
    errors: dict  # std errors of gamma_sd_er, R_er, gamma_sd_yb, R_yb
    A0: list
    T_B: float
    result: object = field(repr=False, default=None)
    warnings: list = field(default_factory=list)
    gamma0: float = 0.0  # Hz, the fixed instantaneous-diffusion term used in the fit

    @property
    def T2(self) -> float:
        """Hahn-echo T2 implied by the fitted pair and gamma0."""
        b = 0.5 * (self.er.gamma_sd * self.er.R + self.yb.gamma_sd * self.yb.R)
        return t2_from_params(self.gamma0, b) if (self.gamma0 > 0 or b > 0) else math.inf

    def report(self):
        e = self.errors
        return {"T_mK": self.T_B * 1e3, "T2_s": self.T2,
                "Gamma_SD_Er_Hz": self.er.gamma_sd, "Gamma_SD_Er_Hz_err": e["gamma_sd_er"],
                "R_Er_per_s": self.er.R, "R_Er_per_s_err": e["R_er"],
                "Gamma_SD_Yb_Hz": self.yb.gamma_sd, "Gamma_SD_Yb_Hz_err": e["gamma_sd_yb"],
                "R_Yb_per_s": self.yb.R, "R_Yb_per_s_err": e["R_yb"]}


def _curve_sigma(c):
    return c.sigma if c.sigma is not None else None


def _initial_family(curves, rg, rr, gamma0, eseem, T1):
    """Grid over R with a linear solve for (log A0_c, Gamma_SD) at each R."""
    tw_all = np.concatenate([c.T_W for c in curves])
    tw_pos = tw_all[tw_all > 0]
    lo = 0.01 / tw_all.max() if tw_all.max() > 0 else 1.0
    hi = 100.0 / (tw_pos.min() if tw_pos.size else 1.0)
    best = None
    for R in np.geomspace(lo, hi, 80):
        rows, rhs = [], []
        for j, c in enumerate(curves):
            amp = np.clip(c.amplitude, 1e-12, None)
            v = eseem_envelope("3PE", c.tau, c.T_W, eseem.k, eseem.omega_alpha, eseem.omega_beta)
            y = np.log(amp / v) + (c.T_W / T1 if math.isfinite(T1) else 0.0) + K.TWO_PI * gamma0 * c.tau
            shape = (R * c.tau - np.expm1(-R * c.T_W)) + rg * (rr * R * c.tau - np.expm1(-rr * R * c.T_W))
            A = np.zeros((c.tau.size, len(curves) + 1))
            A[:, j] = 1.0
            A[:, -1] = -math.pi * c.tau * shape
            rows.append(A)
            rhs.append(y)
        A, y = np.vstack(rows), np.concatenate(rhs)
        coef, *_ = np.linalg.lstsq(A, y, rcond=None)
        r = np.sum((A @ coef - y) ** 2)
        if coef[-1] > 0 and (best is None or r < best[0]):
            best = (r, R, coef[-1], np.exp(coef[:-1]))
    if best is None:
        raise FitError("no decaying solution found for the 3PE family", {})
    return best[1:]


def fit_3pe_family(ds: EchoDataset, tie: TieConfig, gamma0=0.0, eseem: Eseem = Eseem(), T1=math.inf,
                   min_curves=4, degeneracy_limit=0.1) -> FamilyFit:
    """Joint fit of Gamma_SD^Er and R^Er to 3PE curves at one bath temperature.

    Each curve has its own A0. The Yb pair follows from the tie ratios.
    """
    if ds.kind != "3PE":
        raise InputError("fit_3pe_family needs 3PE data")
    if ds.T_B is None:
        raise InputError("3PE family needs a bath temperature")
    curves = ds.curves
    notes = []
    taus = [float(np.unique(c.tau)[0]) for c in curves]
    if any(np.unique(c.tau).size != 1 for c in curves) or len(set(taus)) != len(taus):
        raise InputError("each 3PE curve needs one tau, distinct between curves")
    if len(curves) < min_curves:
        notes.append(f"only {len(curves)} curves; Gamma_SD and R may not be separable")
    tie = replace(tie, B0=ds.B0) if ds.B0 else tie
    rg, rr = tie.ratios(ds.T_B)
    R0, G0, A0s = _initial_family(curves, rg, rr, gamma0, eseem, T1)
    # work in log units so both parameters are O(1) and positive
    params = [Parameter("lnG", math.log(G0)), Parameter("lnR", math.log(R0))]
    params += [Parameter(f"A{j}", float(a), lower=0.0) for j, a in enumerate(A0s)]

    def model(v, c, j):
        er = SpeciesSD("Er", math.exp(v["lnG"]), math.exp(v["lnR"]))
        yb = SpeciesSD("Yb", er.gamma_sd * rg, er.R * rr)
        cfg = EchoConfig(c.tau, c.T_W, gamma0, v[f"A{j}"], T1, eseem)
        return echo_amplitude(cfg, [er, yb], kind="3PE")

    def resid(v):
        out = []
        for j, c in enumerate(curves):
            r = model(v, c, j) - c.amplitude
            out.append(r / c.sigma if c.sigma is not None else r)
        return np.concatenate(out)

    res = solve(FitProblem(params, residual=resid), scale_covariance=curves[0].sigma is None)
    if not res.success:
        raise FitError(f"3PE family fit failed: {res.message}",
                       {"status": res.status, "values": res.values, "T_B": ds.T_B})
    G, R = math.exp(res.values["lnG"]), math.exp(res.values["lnR"])
    eG, eR = G * res.errors["lnG"], R * res.errors["lnR"]
    rtw = R * max(float(c.T_W.max()) for c in curves)
    if rtw < degeneracy_limit:
        notes.append(f"R*T_W <= {rtw:.3g} everywhere: only the product Gamma_SD*R is identifiable")
    for n in notes:
        warnings.warn(n, DegeneracyWarning, stacklevel=2)
    er, yb = SpeciesSD("Er", G, R), SpeciesSD("Yb", G * rg, R * rr)
    errs = {"gamma_sd_er": eG, "R_er": eR, "gamma_sd_yb": eG * rg, "R_yb": eR * rr}
    return FamilyFit(er, yb, errs, [res.values[f"A{j}"] for j in range(len(curves))], ds.T_B, res, notes,
                     gamma0)


@dataclass
class TwoPulseFit:
    gamma0: list  # Hz, one per curve
    gamma0_err: list
    sd_product: float  # sum Gamma_SD R, s^-2
    sd_product_err: float
    A0: list
    T2: list  # s, one per curve
    result: object = field(repr=False, default=None)

    def report(self):
        return {"Gamma0_Hz": self.gamma0, "Gamma0_Hz_err": self.gamma0_err,
                "sum_GammaSD_R_per_s2": self.sd_product, "sum_GammaSD_R_per_s2_err": self.sd_product_err,
                "T2_s": self.T2}


def fit_2pe(curves: Sequence[EchoCurve], eseem: Eseem = Eseem(), fix_sd_product: float | None = None,
            shared_sd=True) -> TwoPulseFit:
    """Quadratic-exponent 2PE fit; one Gamma0 and A0 per curve, sum Gamma_SD R shared.

    With several curves (a pulse-power sweep) the per-curve Gamma0 carries
    the instantaneous-diffusion dependence.
    """
    curves = list(curves)
    if not curves:
        raise InputError("no 2PE curves")
    if any(np.any(c.T_W != 0) for c in curves):
        raise InputError("2PE data must have T_W = 0")
    # linear start: ln(A/V) = ln A0 - 2 pi Gamma0 tau - pi S tau^2
    n = len(curves)
    rows, rhs = [], []
    for j, c in enumerate(curves):
        v = eseem_envelope("2PE", c.tau, 0.0, eseem.k, eseem.omega_alpha, eseem.omega_beta)
        y = np.log(np.clip(c.amplitude / v, 1e-12, None))
        A = np.zeros((c.tau.size, 2 * n + 1))
        A[:, j], A[:, n + j], A[:, -1] = 1.0, -K.TWO_PI * c.tau, -math.pi * c.tau ** 2
        w = np.clip(c.amplitude, 1e-3, None)  # de-weight points near the noise floor
        rows.append(A * w[:, None])
        rhs.append(y * w)
    coef, *_ = np.linalg.lstsq(np.vstack(rows), np.concatenate(rhs), rcond=None)
    tau_max = max(float(c.tau.max()) for c in curves)
    s_scale = 1.0 / tau_max ** 2
    g_scale = 1.0 / tau_max
    params = [Parameter(f"A{j}", float(np.exp(coef[j])), lower=0.0) for j in range(n)]
    params += [Parameter(f"G{j}", max(coef[n + j], 0.0) / g_scale, lower=0.0) for j in range(n)]
    if fix_sd_product is not None:
        params.append(Parameter("S", fix_sd_product / s_scale, vary=False))
    else:
        params.append(Parameter("S", max(coef[-1], 0.0) / s_scale, lower=0.0))

    def resid(v):
        out = []
        for j, c in enumerate(curves):
            cfg = EchoConfig(c.tau, 0.0, v[f"G{j}"] * g_scale, v[f"A{j}"], math.inf, eseem)
            sd = [SpeciesSD("sum", 1.0, v["S"] * s_scale)]
            r = echo_amplitude(cfg, sd, kind="2PE") - c.amplitude
            out.append(r / c.sigma if c.sigma is not None else r)
        return np.concatenate(out)

    res = solve(FitProblem(params, residual=resid), scale_covariance=curves[0].sigma is None)
    if not res.success:
        raise FitError(f"2PE fit failed: {res.message}", {"status": res.status, "values": res.values})
    S = res.values["S"] * s_scale
    g0 = [res.values[f"G{j}"] * g_scale for j in range(n)]
    T2 = [t2_from_params(g, S / 2) if (g > 0 or S > 0) else math.inf for g in g0]
    return TwoPulseFit(g0, [res.errors[f"G{j}"] * g_scale for j in range(n)], S,
                       res.errors["S"] * s_scale, [res.values[f"A{j}"] for j in range(n)], T2, res)


def write_echo_report(rows: list, path):
    Path(path).write_text(json.dumps(rows, indent=2) + "\n")
