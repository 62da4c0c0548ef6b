"""Command-line entry point: ``spindiff <command> ...``.

Each command writes CSV/JSON tables plus a PNG figure into ``--out``.
Boundary units are mT, GHz, MHz, kHz, us and mK as named in the flags
and file headers; everything is SI internally.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, constants as K
from . import budget as bg
from . import cavity as cv
from . import fieldmap as fm
from . import plotting
from . import sdmodel as sdm
from .config import load_config, section, species_registry
from .errors import ConfigError, FitError, InputError
from .spinham import format_m, resonance_fields, rotation_pattern, track_levels

log = logging.getLogger("spindiff")

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_DATA, EXIT_FIT = 0, 2, 3, 4, 5


class UsageError(Exception):
    pass


def _floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _write_json(obj, path):
    path.write_text(json.dumps(obj, indent=2, default=_json_default) + "\n")
    return path


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


# ------------------------------------------------------------------ commands

def cmd_levels(args, cfg, out):
    reg = species_registry(cfg)
    if args.species not in reg:
        raise UsageError(f"unknown species {args.species!r}; known: {', '.join(reg)}")
    if args.points < 2 or not args.bmax > args.bmin or args.bmin < 0:
        raise UsageError("field sweep is empty: need --points >= 2 and 0 <= --bmin < --bmax")
    sp = reg[args.species]
    B = np.linspace(args.bmin, args.bmax, args.points) * 1e-3
    tr = track_levels(sp, args.axis, B)
    names = [f"E_mS{format_m(ms)}_mI{format_m(mi)}_GHz" for ms, mi in tr.labels]
    path = out / "levels.csv"
    with path.open("w") as fh:
        fh.write(",".join(["B0_mT"] + names) + "\n")
        for b, E in zip(B, tr.energies):
            fh.write(",".join([f"{b * 1e3:.8g}"] + [f"{e / K.TWO_PI / 1e9:.10g}" for e in E]) + "\n")
    omega = K.TWO_PI * section(cfg, "resonator")["f0_GHz"] * 1e9
    res = resonance_fields(sp, omega, args.axis, (B[0], B[-1]))
    _write_json({"species": sp.name, "axis": args.axis, "f_GHz": omega / K.TWO_PI / 1e9,
                 "resonances": [{"transition": r.label, "B0_mT": r.B0 * 1e3, "abs_Sx": abs(r.Sx),
                                 "abs_Sz": abs(r.Sz)} for r in res]}, out / "levels_resonances.json")
    plotting.plot_levels(B, tr.energies, out / "levels.png", title=sp.name)
    print(f"{sp.name}: {len(tr.labels)} levels, {len(res)} resonances at {omega / K.TWO_PI / 1e9:g} GHz")
    for r in res:
        print(f"  {r.label:>10s}  {r.B0 * 1e3:9.4f} mT")


def _resonator(cfg):
    try:
        return cv.Resonator.from_config(section(cfg, "resonator"))
    except KeyError as exc:
        raise ConfigError(f"resonator section missing {exc}") from exc


def _spectrum_lines(cfg, res, B):
    lo, hi = float(B.min()), float(B.max())
    span = (max(lo - 0.01, 1e-4), hi + 0.01)
    return cv.lines_from_config(cfg, species_registry(cfg), res, span)


def cmd_spectrum(args, cfg, out):
    res = _resonator(cfg)
    if args.action == "simulate":
        if not args.bmax > args.bmin or args.bstep <= 0 or args.fpoints < 2:
            raise UsageError("empty field or frequency grid")
        B = np.arange(args.bmin, args.bmax + 0.5 * args.bstep, args.bstep) * 1e-3
        omega = res.omega_r0 + K.TWO_PI * np.linspace(-args.fspan, args.fspan, args.fpoints) * 1e6
        lines, _ = _spectrum_lines(cfg, res, B)
        rng = np.random.default_rng(args.seed)
        spec = cv.simulate_spectrum(B, omega, res, lines, args.noise, rng, magnitude=not args.complex)
        cv.write_spectrum_csv(spec, out / "spectrum.csv")
        _write_json({"seed": args.seed, "noise": args.noise,
                     "lines": [{"transition": ln.label, "gens_kHz": ln.gens / 1e3, "gamma_MHz": ln.gamma / 1e6,
                                "B_res_mT": ln.omega_s.B_res * 1e3} for ln in lines]},
                    out / "spectrum_truth.json")
        plotting.plot_spectrum(spec, out / "spectrum.png", [(ln.label, ln.omega_s) for ln in lines])
        print(f"simulated {spec.B.size} x {spec.omega.size} grid -> {out / 'spectrum.csv'}")
        return
    spec = cv.read_spectrum_csv(args.data)
    _, templates = _spectrum_lines(cfg, res, spec.B)
    fit = cv.fit_spectrum_two_stage(spec, res, templates, fit_amplitude=args.fit_amplitude,
                                    cycles=args.cycles)
    report = {"data": str(args.data), "amplitude": fit.amplitude, "notes": fit.notes,
              "stages": [{"status": r.status, "cost": r.cost} for r in fit.stages],
              "lines": fit.report()}
    _write_json(report, out / "spectrum_fit.json")
    plotting.plot_spectrum(spec, out / "spectrum_fit.png", [(t.label, t.omega_s) for t in templates])
    for row in fit.report():
        print(f"{row['transition']:>16s}  g_ens = {row['gens_kHz']:9.1f} +/- {row['gens_err']:6.1f} kHz"
              f"   Gamma = {row['gamma_MHz']:6.2f} +/- {row['gamma_err']:5.2f} MHz")


def _sd_at(cfg, T, tie):
    """Er and tied Yb spectral-diffusion pair at T from the configured maxima."""
    b = section(cfg, "budget")
    f = sdm.thermal_factor(tie.g_er, tie.B0, T)
    er = sdm.SpeciesSD("Er", b["gamma_max_er_kHz"] * 1e3 * f, b["r_max_er_per_ms"] * 1e3 * f)
    return er, sdm.tie_species(er, T, tie)


def _echo_common(cfg):
    sd = section(cfg, "sd")
    try:
        tie = sdm.TieConfig.from_config(sd)
    except KeyError as exc:
        raise ConfigError(f"sd section missing {exc}") from exc
    T1 = sd.get("T1_s")
    return sd, tie, sdm.Eseem.from_config(sd.get("eseem")), math.inf if T1 is None else float(T1)


def cmd_echo(args, cfg, out):
    sd, tie, eseem, T1 = _echo_common(cfg)
    gamma0 = args.gamma0 if args.gamma0 is not None else [sd.get("gamma0_Hz", 0.0)]
    if args.no_eseem:
        eseem = sdm.Eseem()
    if args.action == "simulate":
        _echo_simulate(args, out, tie, eseem, T1, gamma0, cfg)
        return
    data = sdm.read_echo_csv(args.data)
    kind = "3PE" if args.action == "fit3pe" else "2PE"
    sets = [d for d in data if d.kind == kind]
    if not sets:
        raise InputError(f"{args.data}: no {kind} rows")
    if kind == "3PE":
        def run(ds):
            return sdm.fit_3pe_family(ds, tie, gamma0[0], eseem, T1)
        if args.threads > 1:
            with ThreadPoolExecutor(args.threads) as pool:
                fits = list(pool.map(run, sets))
        else:
            fits = [run(ds) for ds in sets]
        rows = [f.report() | {"warnings": f.warnings} for f in fits]
        models = [[sdm.echo_amplitude(sdm.EchoConfig(c.tau, c.T_W, gamma0[0], f.A0[j], T1, eseem),
                                      [f.er, f.yb], kind="3PE") for j, c in enumerate(ds.curves)]
                  for ds, f in zip(sets, fits)]
        for r in rows:
            print(f"T = {r['T_mK']:7.1f} mK  Gamma_SD^Er = {r['Gamma_SD_Er_Hz'] / 1e3:8.2f} kHz"
                  f"  R^Er = {r['R_Er_per_s']:8.2f} /s  T2 = {r['T2_s'] * 1e6:8.2f} us")
    else:
        rows, models = [], []
        table = [["T_mK", "curve", "tag", "Gamma0_Hz", "Gamma0_Hz_err", "T2_s"]]
        for ds in sets:
            f = sdm.fit_2pe(ds.curves, eseem)
            tags = args.tags if args.tags else list(range(len(ds.curves)))
            if len(tags) != len(ds.curves):
                raise UsageError(f"--tags has {len(tags)} entries for {len(ds.curves)} curves")
            rows.append({"T_mK": (ds.T_B or 0) * 1e3, "tags": tags, **f.report()})
            for j, (g, e, t2) in enumerate(zip(f.gamma0, f.gamma0_err, f.T2)):
                table.append([f"{(ds.T_B or 0) * 1e3:.6g}", j, tags[j], f"{g:.8g}", f"{e:.4g}", f"{t2:.8g}"])
                print(f"T = {(ds.T_B or 0) * 1e3:7.1f} mK  tag {tags[j]}: Gamma0 = {g:8.2f} +/- {e:6.2f} Hz"
                      f"  T2 = {t2 * 1e6:8.2f} us")
            models.append([sdm.echo_amplitude(sdm.EchoConfig(c.tau, 0.0, f.gamma0[j], f.A0[j], math.inf, eseem),
                                              [sdm.SpeciesSD("sum", 1.0, f.sd_product)], kind="2PE")
                           for j, c in enumerate(ds.curves)])
        (out / "echo_2pe_sweep.csv").write_text("\n".join(",".join(map(str, r)) for r in table) + "\n")
    sdm.write_echo_report(rows, out / f"echo_{kind.lower()}_fit.json")
    plotting.plot_echo(sets, out / f"echo_{kind.lower()}_fit.png", models)


def _echo_simulate(args, out, tie, eseem, T1, gamma0, cfg):
    rng = np.random.default_rng(args.seed)
    sets = []
    for T in np.asarray(args.temps) * 1e-3:
        er, yb = _sd_at(cfg, T, tie)
        curves = []
        if args.kind == "3PE":
            TW = np.linspace(0.0, args.tw_max * 1e-6, args.points)
            for tau in np.asarray(args.taus) * 1e-6:
                a = sdm.echo_amplitude(sdm.EchoConfig(tau, TW, gamma0[0], 1.0, T1, eseem), [er, yb], "3PE")
                curves.append(sdm.EchoCurve(np.full_like(TW, tau), TW, a + args.noise * rng.standard_normal(TW.size),
                                            args.noise or None))
        else:
            S = er.gamma_sd * er.R + yb.gamma_sd * yb.R
            t_max = args.tau_max * 1e-6 if args.tau_max else 1.5 * sdm.t2_from_params(max(gamma0), S / 2)
            tau = np.linspace(0.0, t_max, args.points)
            for g0 in gamma0:
                a = sdm.echo_amplitude(sdm.EchoConfig(tau, 0.0, g0, 1.0, math.inf, eseem),
                                       [sdm.SpeciesSD("sum", 1.0, S)], "2PE")
                curves.append(sdm.EchoCurve(tau, 0.0, a + args.noise * rng.standard_normal(tau.size),
                                            args.noise or None))
        sets.append(sdm.EchoDataset(args.kind, curves, T, tie.B0))
        print(f"T = {T * 1e3:7.1f} mK  Gamma_SD^Er = {er.gamma_sd / 1e3:.2f} kHz  R^Er = {er.R:.2f} /s"
              f"  ({len(curves)} curves)")
    sdm.write_echo_csv(sets, out / "echo.csv")
    plotting.plot_echo(sets, out / "echo.png")


def cmd_budget(args, cfg, out):
    reg = species_registry(cfg)
    try:
        bc = bg.BudgetConfig.from_config(cfg, reg["Er167"])
    except KeyError as exc:
        raise ConfigError(f"budget config missing {exc}") from exc
    if args.zero_sd:
        bc.gamma_max = {k: 0.0 for k in bc.gamma_max}
    if args.temps:
        T = np.asarray(args.temps) * 1e-3
    else:
        if args.points < 1 or not 0 < args.tmin <= args.tmax:
            raise UsageError("temperature grid is empty")
        T = np.geomspace(args.tmin, args.tmax, args.points) * 1e-3
    cal = bg.calibrate_id_convention(bc)
    rows = bg.budget_curve(T, bc)
    bg.write_budget_csv(rows, out / "budget.csv")
    _write_json({"id_convention": cal.report(), "zero_sd": args.zero_sd}, out / "budget.json")
    plotting.plot_budget(rows, out / "budget.png")
    print(f"ID convention: {cal.convention.describe()}")
    for r in rows[:: max(1, len(rows) // 8)]:
        print(f"T = {r.T * 1e3:8.1f} mK  Gamma0 = {r.gamma0:8.2f}  Gamma_SD = {r.gamma_sd:9.2f}"
              f"  Gamma_h = {r.gamma_h:9.2f} Hz  T2 = {r.T2 * 1e3:.4g} ms")


def cmd_rotation(args, cfg, out):
    reg = species_registry(cfg)
    names = args.species.split(",")
    unknown = [n for n in names if n not in reg]
    if unknown:
        raise UsageError(f"unknown species {unknown}; known: {', '.join(reg)}")
    if args.count < 1:
        raise UsageError("angle grid is empty")
    ang = np.radians(args.start + args.step * np.arange(args.count))
    omega = K.TWO_PI * section(cfg, "resonator")["f0_GHz"] * 1e9
    rows = rotation_pattern([reg[n] for n in names], omega, ang, (0.0, args.bmax * 1e-3),
                            threads=args.threads)
    with (out / "rotation.csv").open("w") as fh:
        fh.write("theta_deg,species,transition,B_res_mT\n")
        for r in rows:
            fh.write(f"{r.theta_deg:.6g},{r.species},{r.label},{r.B_res * 1e3:.8g}\n")
    plotting.plot_rotation(rows, out / "rotation.png")
    print(f"{len(rows)} resonance fields over {args.count} angles -> {out / 'rotation.csv'}")


def cmd_fieldmap(args, cfg, out):
    fc = section(cfg, "fieldmap")
    L = fc["inductor_length_um"] * 1e-6
    omega = K.TWO_PI * section(cfg, "resonator")["f0_GHz"] * 1e9
    if args.input:
        fmap = fm.normalize(fm.read_fieldmap_csv(args.input, L), omega)
    else:
        fmap = fm.toy_wire_map(fc["wire_width_um"] * 1e-6, fc["x_extent_um"] * 1e-6, fc["z_extent_um"] * 1e-6,
                               omega, L, args.step * 1e-6)
        fm.write_fieldmap_csv(fmap, out / "fieldmap.csv")
    reg = species_registry(cfg)
    res = _resonator(cfg)
    axis = section(cfg, "resonator").get("field_axis", "b")
    rows = []
    from .spinham import find_transition
    for ln in cfg.get("lines") or []:
        sp = reg[ln["species"]]
        r = find_transition(sp, ln["transition"], res.omega_r0, axis)
        gt = fm.gamma_tilde(fmap, r.Sx, r.Sz, sp.gyro_along("a"), sp.gyro_along("c"))
        rows.append({"transition": f"{ln['species']}:{ln['transition']}", "B0_mT": r.B0 * 1e3,
                     "gamma_tilde_hbar_over_muB": gt / K.MU_B_OVER_HBAR})
        print(f"{rows[-1]['transition']:>16s}  gamma~ hbar/muB = {rows[-1]['gamma_tilde_hbar_over_muB']:.3f}")
    _write_json({"source": str(args.input) if args.input else "toy strip", "lines": rows}, out / "fieldmap.json")
    plotting.plot_fieldmap(fmap, out / "fieldmap.png")


# ------------------------------------------------------------------- parser

def _global_flags(p, suppress):
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--config", type=Path, default=d(None), help="JSON config merged over the defaults")
    p.add_argument("--out", type=Path, default=d(Path(".")), help="output directory (created if missing)")
    p.add_argument("--seed", type=int, default=d(0), help="seed for synthetic noise")
    p.add_argument("--threads", type=int, default=d(1), help="worker threads where a command can use them")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spindiff", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    _global_flags(p, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("levels", parents=[common], help="energy levels against field")
    s.add_argument("--species", default="Er167")
    s.add_argument("--bmin", type=float, default=0.0, help="mT")
    s.add_argument("--bmax", type=float, default=100.0, help="mT")
    s.add_argument("--points", type=int, default=201)
    s.add_argument("--axis", default="b", choices=["a", "b", "c"])
    s.set_defaults(func=cmd_levels)

    s = sub.add_parser("spectrum", help="simulate or fit |S21| field sweeps")
    ss = s.add_subparsers(dest="action", required=True)
    a = ss.add_parser("simulate", parents=[common])
    a.add_argument("--bmin", type=float, default=30.0, help="mT")
    a.add_argument("--bmax", type=float, default=48.0, help="mT")
    a.add_argument("--bstep", type=float, default=0.05, help="mT")
    a.add_argument("--fspan", type=float, default=40.0, help="half span around f0, MHz")
    a.add_argument("--fpoints", type=int, default=201)
    a.add_argument("--noise", type=float, default=0.01, help="absolute Gaussian noise on |S21|")
    a.add_argument("--complex", action="store_true", help="write complex S21 instead of |S21|")
    a = ss.add_parser("fit", parents=[common])
    a.add_argument("--data", type=Path, required=True)
    a.add_argument("--cycles", type=int, default=2)
    a.add_argument("--fit-amplitude", action="store_true")
    s.set_defaults(func=cmd_spectrum)

    s = sub.add_parser("echo", help="simulate or fit 2PE/3PE decays")
    ss = s.add_subparsers(dest="action", required=True)
    a = ss.add_parser("simulate", parents=[common])
    a.add_argument("--kind", choices=["2PE", "3PE"], default="3PE")
    a.add_argument("--temps", type=_floats, default=[530.0], help="bath temperatures, mK")
    a.add_argument("--taus", type=_floats, default=[1.0, 2.0, 3.0, 4.0, 5.0], help="3PE tau values, us")
    a.add_argument("--tw-max", type=float, default=12000.0, help="3PE waiting-time span, us")
    a.add_argument("--tau-max", type=float, default=None, help="2PE tau span, us (default 1.5 T2)")
    a.add_argument("--points", type=int, default=60)
    a.add_argument("--noise", type=float, default=0.01)
    for name in ("simulate", "fit2pe", "fit3pe"):
        if name != "simulate":
            a = ss.add_parser(name, parents=[common])
            a.add_argument("--data", type=Path, required=True)
        if name == "fit2pe":
            a.add_argument("--tags", type=lambda t: t.split(","), default=None,
                           help="labels for the curves of a sweep, e.g. pulse powers")
        a.add_argument("--gamma0", type=_floats, default=None,
                       help="instantaneous-diffusion rate(s), Hz; several values make a 2PE sweep")
        a.add_argument("--no-eseem", action="store_true")
    s.set_defaults(func=cmd_echo)

    s = sub.add_parser("budget", parents=[common], help="decoherence budget against temperature")
    s.add_argument("--temps", type=_floats, default=None, help="explicit grid, mK")
    s.add_argument("--tmin", type=float, default=10.0, help="mK")
    s.add_argument("--tmax", type=float, default=1000.0, help="mK")
    s.add_argument("--points", type=int, default=100)
    s.add_argument("--zero-sd", action="store_true", help="switch electron spectral diffusion off")
    s.set_defaults(func=cmd_budget)

    s = sub.add_parser("rotation", parents=[common], help="resonance fields against angle in the a-c plane")
    s.add_argument("--species", default="Er_I0,Yb_I0")
    s.add_argument("--start", type=float, default=0.0, help="deg from c")
    s.add_argument("--step", type=float, default=1.5, help="deg")
    s.add_argument("--count", type=int, default=61)
    s.add_argument("--bmax", type=float, default=400.0, help="mT")
    s.set_defaults(func=cmd_rotation)

    s = sub.add_parser("fieldmap", parents=[common], help="field-weighted gyromagnetic ratios")
    s.add_argument("--input", type=Path, default=None, help="map CSV; default is the toy strip map")
    s.add_argument("--step", type=float, default=1.0, help="toy-map grid step, um")
    s.set_defaults(func=cmd_fieldmap)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        cfg = load_config(args.config)
        args.out.mkdir(parents=True, exist_ok=True)
        args.func(args, cfg, args.out)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InputError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FitError as exc:
        print(f"fit error: {exc}", file=sys.stderr)
        if exc.diagnostics:
            print(json.dumps(exc.diagnostics, default=str), file=sys.stderr)
        return EXIT_FIT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
