"""Vacuum-fluctuation field maps of the resonator and the averaged gyromagnetic ratio.

Frame: x is normal to the chip surface (crystal at x < 0), z runs across
the inductor wire, the wire carries current along y.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.integrate import trapezoid

from . import constants as K
from .errors import InputError

log = logging.getLogger(__name__)

HEADER = ("x_um", "z_um", "dB1x_T", "dB1z_T")


@dataclass(frozen=True)
class FieldMap:
    x: np.ndarray  # (nx,) m, all < 0
    z: np.ndarray  # (nz,) m
    bx: np.ndarray  # (nx, nz) T
    bz: np.ndarray  # (nx, nz) T
    L: float  # inductor length, m

    def __post_init__(self):
        x, z = np.asarray(self.x, float), np.asarray(self.z, float)
        bx, bz = np.asarray(self.bx, float), np.asarray(self.bz, float)
        for name, g in (("x", x), ("z", z)):
            if g.ndim != 1 or g.size < 2 or np.any(np.diff(g) <= 0):
                raise InputError(f"{name} grid must be strictly increasing with >= 2 points")
        if bx.shape != (x.size, z.size) or bz.shape != bx.shape:
            raise InputError("field arrays must have shape (len(x), len(z))")
        if not (np.all(np.isfinite(bx)) and np.all(np.isfinite(bz)) and np.all(np.isfinite(x))
                and np.all(np.isfinite(z))):
            raise InputError("field map contains non-finite values")
        if np.any(x >= 0):
            raise InputError("field map must lie on the crystal side (x < 0)")
        if not (self.L > 0 and math.isfinite(self.L)):
            raise InputError("inductor length must be positive")
        for k, v in (("x", x), ("z", z), ("bx", bx), ("bz", bz)):
            object.__setattr__(self, k, v)

    def integral(self, fx=None, fz=None) -> float:
        """Trapezoid integral of fx^2 + fz^2 over the map (defaults to the map fields)."""
        fx = self.bx if fx is None else fx
        fz = self.bz if fz is None else fz
        return float(trapezoid(trapezoid(fx ** 2 + fz ** 2, self.z, axis=1), self.x))

    def scaled(self, s) -> "FieldMap":
        return replace(self, bx=self.bx * s, bz=self.bz * s)


def fock_energy_integral(omega_r, L) -> float:
    """mu0 hbar omega_r / (4 L), the target of the normalisation, in T^2 m^2."""
    return K.MU_0 * K.HBAR * omega_r / (4.0 * L)


def normalize(fmap: FieldMap, omega_r) -> FieldMap:
    if not (omega_r > 0 and math.isfinite(omega_r)):
        raise InputError("resonator frequency must be positive")
    I = fmap.integral()
    if not I > 0:
        raise InputError("field map integral is zero")
    return fmap.scaled(math.sqrt(fock_energy_integral(omega_r, fmap.L) / I))


def gamma_tilde(fmap: FieldMap, Sx, Sz, gamma_perp, gamma_par) -> float:
    """Field-weighted gyromagnetic ratio (units of ``gamma_perp``).

    Scale invariant, so the map need not be normalised.
    """
    den = fmap.integral()
    if not den > 0:
        raise InputError("field map integral is zero")
    num = fmap.integral(gamma_perp * abs(Sx) * fmap.bx, gamma_par * abs(Sz) * fmap.bz)
    return 2.0 * math.sqrt(num / den)


def strip_field(x, z, width, K_sheet=1.0):
    """Field (T) of a thin strip at x=0, |z| <= width/2, sheet current K along y."""
    x, z = np.asarray(x, float), np.asarray(z, float)
    h = width / 2.0
    pre = K.MU_0 * K_sheet / (4 * math.pi)
    bx = pre * np.log((x ** 2 + (z + h) ** 2) / (x ** 2 + (z - h) ** 2))
    bz = -2 * pre * (np.arctan((z + h) / x) - np.arctan((z - h) / x))
    return bx, bz


def toy_wire_map(width=5e-6, x_extent=200e-6, z_extent=400e-6, omega_r=K.TWO_PI * 4.37e9,
                 L=725e-6, step=1e-6) -> FieldMap:
    """Normalised map of a thin current strip on the crystal surface.

    Stand-in for a simulated map: nodes sit at cell centres, so the
    surface row is at x = -step/2 and never on the strip itself.
    """
    if min(width, x_extent, z_extent, step, L) <= 0:
        raise InputError("dimensions must be positive")
    nx = max(int(round(x_extent / step)), 2)
    nz = max(int(round(z_extent / step)), 2)
    x = -(np.arange(nx)[::-1] + 0.5) * (x_extent / nx)
    z = (np.arange(nz) + 0.5) * (z_extent / nz) - z_extent / 2
    X, Z = np.meshgrid(x, z, indexing="ij")
    bx, bz = strip_field(X, Z, width)
    return normalize(FieldMap(x, z, bx, bz, L), omega_r)


def read_fieldmap_csv(path, L) -> FieldMap:
    """Read a rectangular-grid map. Rows with x >= 0 are dropped with a warning."""
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise InputError(f"cannot read field map {path}: {exc}") from exc
    if not rows or tuple(c.strip() for c in rows[0]) != HEADER:
        raise InputError(f"{path}: header must be {','.join(HEADER)}")
    try:
        data = np.array([[float(c) for c in r] for r in rows[1:] if r], dtype=float)
    except ValueError as exc:
        raise InputError(f"{path}: non-numeric value ({exc})") from exc
    if data.ndim != 2 or data.shape[1] != 4 or len(data) == 0:
        raise InputError(f"{path}: expected 4 numeric columns")
    bad = data[:, 0] >= 0
    if bad.any():
        log.warning("%s: dropped %d rows with x >= 0", path, int(bad.sum()))
        data = data[~bad]
    xs, zs = np.unique(data[:, 0]), np.unique(data[:, 1])
    if len(data) != xs.size * zs.size:
        raise InputError(f"{path}: points do not form a complete rectangular grid")
    ix, iz = np.searchsorted(xs, data[:, 0]), np.searchsorted(zs, data[:, 1])
    bx, bz = np.full((xs.size, zs.size), np.nan), np.full((xs.size, zs.size), np.nan)
    bx[ix, iz], bz[ix, iz] = data[:, 2], data[:, 3]
    if np.isnan(bx).any():
        raise InputError(f"{path}: duplicate grid points")
    return FieldMap(xs * 1e-6, zs * 1e-6, bx, bz, L)


def write_fieldmap_csv(fmap: FieldMap, path):
    X, Z = np.meshgrid(fmap.x, fmap.z, indexing="ij")
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HEADER)
        for row in zip(X.ravel() * 1e6, Z.ravel() * 1e6, fmap.bx.ravel(), fmap.bz.ravel()):
            w.writerow([f"{v:.10g}" for v in row])
