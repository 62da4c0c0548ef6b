"""PNG figures for the CLI report path.

Figures are built on ``matplotlib.figure.Figure`` directly, so nothing here
touches pyplot's global state or needs a display.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from matplotlib.figure import Figure

from . import constants as K

DPI = 120


def _save(fig: Figure, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=DPI, metadata={"Software": None})  # no version stamp: reproducible bytes
    return path


def plot_levels(B, E, path, title=""):
    """Energy levels (rad/s, shape (nB, n)) against field, as GHz vs mT."""
    fig = Figure(figsize=(6, 4.5))
    ax = fig.add_subplot()
    B = np.asarray(B)
    for n in range(E.shape[1]):
        ax.plot(B * 1e3, E[:, n] / K.TWO_PI / 1e9, lw=0.9)
    if title:
        ax.set_title(title)
    ax.set_xlabel("B0 (mT)")
    ax.set_ylabel("E / h (GHz)")
    return _save(fig, path)


def plot_spectrum(spec, path, fit_lines=None):
    """|S21| map; optional (label, omega_s) pairs drawn as dashed guides."""
    fig = Figure(figsize=(6.5, 4.5))
    ax = fig.add_subplot()
    mag = np.abs(spec.data)
    f = spec.omega / K.TWO_PI / 1e9
    im = ax.pcolormesh(spec.B * 1e3, f, mag.T, shading="auto", cmap="viridis")
    fig.colorbar(im, ax=ax, label="|S21|")
    for label, ws in fit_lines or ():
        w = ws(spec.B) / K.TWO_PI / 1e9
        ax.plot(spec.B * 1e3, w, "w--", lw=0.7)
        inside = (w >= f.min()) & (w <= f.max())
        if inside.any():
            i = int(np.flatnonzero(inside)[0])
            ax.annotate(label, (spec.B[i] * 1e3, w[i]), color="w", fontsize=7)
    ax.set_ylim(f.min(), f.max())
    ax.set_xlabel("B0 (mT)")
    ax.set_ylabel("frequency (GHz)")
    return _save(fig, path)


def plot_echo(datasets, path, models=None):
    """Echo amplitude against tau (2PE) or T_W (3PE); models: same shape as curves, or None."""
    fig = Figure(figsize=(6, 4.5))
    ax = fig.add_subplot()
    for d, ds in enumerate(datasets):
        for c_i, c in enumerate(ds.curves):
            x = (c.tau if ds.kind == "2PE" else c.T_W) * 1e6
            lab = f"{ds.kind} T={1e3 * (ds.T_B or 0):.0f} mK"
            if ds.kind == "3PE":
                lab += f", tau={c.tau[0] * 1e6:.3g} us"
            line, = ax.plot(x, c.amplitude, ".", ms=2, label=lab)
            if models is not None:
                ax.plot(x, models[d][c_i], "-", lw=0.8, color=line.get_color())
    kinds = {ds.kind for ds in datasets}
    ax.set_xlabel("tau (us)" if kinds == {"2PE"} else "T_W (us)")
    ax.set_ylabel("echo amplitude")
    ax.set_yscale("log")
    if sum(len(ds.curves) for ds in datasets) <= 12:
        ax.legend(fontsize=6)
    return _save(fig, path)


def plot_budget(rows, path):
    """Gamma contributions against bath temperature, log-log."""
    fig = Figure(figsize=(6, 4.5))
    ax = fig.add_subplot()
    T = np.array([r.T for r in rows]) * 1e3
    for attr, lab in (("gamma0", "Gamma0 (ID)"), ("gamma_sd", "Gamma(SD)"),
                      ("gamma_nsd", "Gamma(NSD)"), ("gamma_h", "Gamma_h")):
        ax.plot(T, [getattr(r, attr) for r in rows], label=lab, lw=2 if attr == "gamma_h" else 1)
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("T_B (mK)")
    ax.set_ylabel("rate (Hz)")
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_rotation(rows, path):
    fig = Figure(figsize=(6, 4.5))
    ax = fig.add_subplot()
    names = sorted({r.species for r in rows})
    for name in names:
        sel = [r for r in rows if r.species == name]
        ax.plot([r.theta_deg for r in sel], [r.B_res * 1e3 for r in sel], ".", ms=3, label=name)
    ax.set_xlabel("angle from c (deg)")
    ax.set_ylabel("resonance field (mT)")
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_fieldmap(fmap, path):
    """|dB1| over the cross-section, log colour scale."""
    fig = Figure(figsize=(6, 4))
    ax = fig.add_subplot()
    mag = np.hypot(fmap.bx, fmap.bz)
    mag = np.where(mag > 0, mag, np.nan)
    im = ax.pcolormesh(fmap.z * 1e6, fmap.x * 1e6, np.log10(mag), shading="auto", cmap="magma")
    fig.colorbar(im, ax=ax, label="log10 |dB1| (T)")
    ax.set_xlabel("z (um)")
    ax.set_ylabel("x (um)")
    return _save(fig, path)
