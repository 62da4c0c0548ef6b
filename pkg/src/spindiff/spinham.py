"""Effective spin Hamiltonians of Kramers ions and their static spectroscopy.

The Hamiltonian is ``H = muB S.g.B0 + S.A.I`` (nuclear Zeeman and
quadrupole terms left out). Matrices are kept in angular-frequency units
(rad/s), i.e. ``H / hbar``. Tensors are given in the crystal (a, b, c)
frame.

Level labels ``(m_S, m_I)`` are defined at a high reference field, where
both projections are good quantum numbers, and carried down to the field
of interest by following eigenvector overlaps.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
import math

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import constants as K
from .errors import InputError

CRYSTAL_AXES = {"a": np.array([1.0, 0.0, 0.0]),
                "b": np.array([0.0, 1.0, 0.0]),
                "c": np.array([0.0, 0.0, 1.0])}


def _as_tensor(t, name):
    t = np.asarray(t, dtype=float)
    if t.shape == (3,):
        t = np.diag(t)
    if t.shape != (3, 3):
        raise InputError(f"{name} must be a 3-vector (diagonal) or a 3x3 matrix")
    if not np.allclose(t, t.T, rtol=0, atol=1e-12 * max(1.0, np.abs(t).max())):
        raise InputError(f"{name} must be symmetric")
    return t


def _check_spin(x, name):
    if x < 0 or abs(2 * x - round(2 * x)) > 1e-12:
        raise InputError(f"{name} must be a non-negative multiple of 1/2, got {x}")
    return float(x)


@dataclass
class SpinSpecies:
    """A paramagnetic species.

    ``g`` is dimensionless, ``A`` is in Hz (cyclic frequency),
    ``concentration`` in m^-3, ``linewidth`` is the inhomogeneous FWHM in
    Hz. Diagonal tensors may be passed as 3-vectors.
    """

    name: str
    S: float = 0.5
    I: float = 0.0
    g: np.ndarray = field(default_factory=lambda: np.eye(3) * 2.0023)
    A: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    concentration: float = 0.0
    linewidth: float | None = None
    T1: float | None = None
    abundance: float = 1.0

    def __post_init__(self):
        self.S = _check_spin(self.S, "S")
        self.I = _check_spin(self.I, "I")
        if self.S < 0.5:
            raise InputError("S must be >= 1/2")
        self.g = _as_tensor(self.g, "g")
        self.A = _as_tensor(self.A, "A")
        if self.concentration < 0:
            raise InputError("concentration must be >= 0")
        if self.linewidth is not None and self.linewidth <= 0:
            raise InputError("linewidth must be > 0")

    @property
    def dimension(self) -> int:
        return int(round((2 * self.S + 1) * (2 * self.I + 1)))

    def g_along(self, direction) -> float:
        """Effective g-factor ``|g . n|`` for field direction ``n``."""
        return float(np.linalg.norm(self.g @ _unit(direction)))

    def gyro_along(self, direction) -> float:
        """Gyromagnetic ratio (rad/s/T) along ``direction``."""
        return self.g_along(direction) * K.MU_B_OVER_HBAR


def _unit(v):
    if isinstance(v, str):
        return CRYSTAL_AXES[v]
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v)
    if not np.isfinite(n) or n == 0:
        raise InputError("direction must be a finite non-zero vector")
    return v / n


@dataclass(frozen=True)
class FieldVector:
    """Static field: magnitude (T) and polar/azimuthal angles in the (a, b, c)
    frame; ``theta`` is measured from c, ``phi`` from a towards b."""

    B0: float
    theta: float = math.pi / 2
    phi: float = math.pi / 2

    def __post_init__(self):
        if not all(math.isfinite(x) for x in (self.B0, self.theta, self.phi)):
            raise InputError("non-finite field component")
        if self.B0 < 0:
            raise InputError("field magnitude must be >= 0")

    @property
    def direction(self) -> np.ndarray:
        st = math.sin(self.theta)
        return np.array([st * math.cos(self.phi), st * math.sin(self.phi), math.cos(self.theta)])

    @property
    def vector(self) -> np.ndarray:
        return self.B0 * self.direction

    @classmethod
    def along(cls, axis, B0) -> "FieldVector":
        """Field of magnitude ``B0`` along a crystal axis name or any vector."""
        n = _unit(axis)
        theta = math.acos(max(-1.0, min(1.0, n[2])))
        phi = math.atan2(n[1], n[0])
        return cls(B0, theta, phi)

    def with_magnitude(self, B0) -> "FieldVector":
        return FieldVector(B0, self.theta, self.phi)


def spin_matrices(s):
    """Sx, Sy, Sz for spin ``s`` in the |m> basis ordered m = s, s-1, ..., -s."""
    d = int(round(2 * s + 1))
    m = s - np.arange(d)
    sp = np.zeros((d, d), dtype=complex)
    for k in range(1, d):
        sp[k - 1, k] = math.sqrt(s * (s + 1) - m[k] * (m[k] + 1))
    sx = 0.5 * (sp + sp.conj().T)
    sy = -0.5j * (sp - sp.conj().T)
    sz = np.diag(m).astype(complex)
    return sx, sy, sz


@lru_cache(maxsize=32)
def _operators(S, I):
    """S_k, I_k and S_k I_m on the product space as read-only stacks, cached per (S, I)."""
    Sm, Im = spin_matrices(S), spin_matrices(I)
    eS, eI = np.eye(Sm[0].shape[0]), np.eye(Im[0].shape[0])
    Sop = np.array([np.kron(x, eI) for x in Sm])
    Iop = np.array([np.kron(eS, x) for x in Im])
    SI = np.einsum("kab,mbc->kmac", Sop, Iop)
    for a in (Sop, Iop, SI):
        a.flags.writeable = False
    return Sop, Iop, SI


def build_hamiltonian(species: SpinSpecies, field: FieldVector) -> np.ndarray:
    """``(muB S.g.B0 + S.A.I) / hbar`` as a complex Hermitian matrix, rad/s."""
    B = np.asarray(field.vector if isinstance(field, FieldVector) else field, dtype=float)
    if B.shape != (3,) or not np.all(np.isfinite(B)):
        raise InputError("field must be a finite 3-vector")
    Sop, _, SI = _operators(float(species.S), float(species.I))
    gB = species.g @ B * K.MU_B_OVER_HBAR
    H = np.tensordot(gB, Sop, axes=1)
    if species.I > 0:
        H = H + np.tensordot(species.A * K.TWO_PI, SI, axes=2)
    return H


@dataclass
class EigenSystem:
    """Ascending energies (rad/s) and eigenvectors as columns of ``states``."""

    energies: np.ndarray
    states: np.ndarray

    @property
    def dimension(self) -> int:
        return self.energies.size

    def reconstruct(self) -> np.ndarray:
        return (self.states * self.energies) @ self.states.conj().T


def eigensystem(H, tol=1e-10) -> EigenSystem:
    H = np.asarray(H)
    if H.ndim != 2 or H.shape[0] != H.shape[1]:
        raise InputError("Hamiltonian must be square")
    scale = max(np.linalg.norm(H), 1e-300)
    if np.linalg.norm(H - H.conj().T) > tol * scale:
        raise InputError("matrix is not Hermitian within tolerance")
    E, U = np.linalg.eigh(0.5 * (H + H.conj().T))
    return EigenSystem(E, U)


def transition_frame(direction):
    """Unit vectors (x, y, z) with y along the field and z the part of c
    orthogonal to it; for a field along b this is x=a, y=b, z=c."""
    y = _unit(direction)
    ref = CRYSTAL_AXES["c"]
    z = ref - (ref @ y) * y
    if np.linalg.norm(z) < 1e-9:
        ref = CRYSTAL_AXES["a"]
        z = ref - (ref @ y) * y
    z /= np.linalg.norm(z)
    x = np.cross(y, z)
    return x, y, z


def transition_elements(es: EigenSystem, species: SpinSpecies, i: int, j: int, direction="b"):
    """``(<i|Sx|j>, <i|Sz|j>)`` in the frame with the field along y.

    The global phase is fixed so that ``<i|Sz|j>`` is real and
    non-negative. ``i`` is normally the upper level.
    """
    if i == j:
        raise InputError("transition needs two distinct levels")
    d = es.dimension
    if not (0 <= i < d and 0 <= j < d):
        raise InputError("level index out of range")
    Sop = _operators(float(species.S), float(species.I))[0]
    x, _, z = transition_frame(direction)
    Sx = sum(x[k] * Sop[k] for k in range(3))
    Sz = sum(z[k] * Sop[k] for k in range(3))
    bra, ket = es.states[:, i].conj(), es.states[:, j]
    ex, ez = complex(bra @ Sx @ ket), complex(bra @ Sz @ ket)
    if abs(ez) > 1e-14:
        phase = np.exp(-1j * np.angle(ez))
    elif abs(ex) > 1e-14:
        phase = np.exp(-1j * (np.angle(ex) + math.pi / 2))
    else:
        phase = 1.0
    return ex * phase, ez * phase


def format_m(m: float) -> str:
    f = Fraction(m).limit_denominator(2)
    if f == 0:
        return "0"
    return f"{'+' if f > 0 else '-'}{abs(f)}"


# ---------------------------------------------------------------- level tracking

def _reference_field(species, direction):
    zeeman = species.g_along(direction) * K.MU_B / K.H  # Hz/T
    hyper = np.abs(species.A).max() * max(species.I, 0.5) * 2
    return max(1.0, 200.0 * hyper / zeeman)


def _label_high_field(species, direction, es):
    """(m_S, m_I) of each eigenvector at a field where both are good."""
    n = _unit(direction)
    ne = species.g @ n
    ne /= np.linalg.norm(ne)
    nn = species.A @ ne
    if np.linalg.norm(nn) < 1e-12 * max(1.0, np.abs(species.A).max()):
        nn = ne.copy()
    else:
        nn = np.sign(nn @ ne or 1.0) * nn / np.linalg.norm(nn)
    Sop, Iop, _ = _operators(float(species.S), float(species.I))
    Sn = sum(ne[k] * Sop[k] for k in range(3))
    In = sum(nn[k] * Iop[k] for k in range(3))
    labels = []
    for col in es.states.T:
        ms = float(np.real(col.conj() @ Sn @ col))
        mi = float(np.real(col.conj() @ In @ col))
        labels.append((round(2 * ms) / 2, round(2 * mi) / 2))
    if len(set(labels)) != len(labels):
        raise RuntimeError("ambiguous high-field labels; reference field too low")
    return labels


def _match(U_prev, U_new):
    """Permutation p with column p[k] of U_new continuing column k of U_prev,
    and the smallest matched overlap."""
    ov = np.abs(U_prev.conj().T @ U_new) ** 2
    rows, cols = linear_sum_assignment(-ov)
    perm = np.empty_like(cols)
    perm[rows] = cols
    return perm, float(ov[rows, cols].min())


def _follow(species, direction, B_from, U_from, B_to, depth=0):
    """Eigen-solve at ``B_to`` with columns ordered to continue ``U_from``."""
    es = eigensystem(build_hamiltonian(species, B_to * direction))
    perm, worst = _match(U_from, es.states)
    if worst < 0.6 and depth < 12:
        Bm = 0.5 * (B_from + B_to)
        _, Um = _follow(species, direction, B_from, U_from, Bm, depth + 1)
        return _follow(species, direction, Bm, Um, B_to, depth + 1)
    return es.energies[perm], es.states[:, perm]


@dataclass
class LevelTrack:
    """Energies (rad/s) of adiabatically continued branches on a field grid.

    Column ``k`` of ``energies``/``states[n]`` is the same branch at every
    field; ``labels[k]`` is its high-field ``(m_S, m_I)``.
    """

    species: SpinSpecies
    direction: np.ndarray
    fields: np.ndarray
    energies: np.ndarray
    states: np.ndarray
    labels: list

    def index(self, label) -> int:
        return self.labels.index(tuple(label))

    def eigen_order(self, n):
        """Branch indices sorted by energy at grid point ``n``."""
        return np.argsort(self.energies[n], kind="stable")


_MIN_FIELD = 1e-6


def track_levels(species: SpinSpecies, direction, fields) -> LevelTrack:
    """Follow all levels of ``species`` over ``fields`` (T) along ``direction``."""
    n = _unit(direction)
    fields = np.asarray(fields, dtype=float)
    if fields.ndim != 1 or fields.size == 0:
        raise InputError("field grid must be a non-empty 1-D array")
    if np.any(~np.isfinite(fields)) or np.any(fields < 0):
        raise InputError("field grid must be finite and non-negative")
    order = np.argsort(fields)[::-1]
    work = np.maximum(fields[order], _MIN_FIELD)
    B_ref = max(_reference_field(species, n), work[0])
    es = eigensystem(build_hamiltonian(species, B_ref * n))
    labels = _label_high_field(species, n, es)
    U, B_prev = es.states, B_ref
    if B_ref > work[0]:
        for B in np.geomspace(B_ref, work[0], 40)[1:]:
            _, U = _follow(species, n, B_prev, U, B)
            B_prev = B
    d = species.dimension
    E_out = np.empty((fields.size, d))
    U_out = np.empty((fields.size, d, d), dtype=complex)
    for k, B in zip(order, work):
        E, U = _follow(species, n, B_prev, U, B)
        B_prev = B
        E_out[k], U_out[k] = E, U
    return LevelTrack(species, n, fields, E_out, U_out, labels)


def level_labels(species: SpinSpecies, field: FieldVector):
    """``(m_S, m_I)`` label of each eigen-index (ascending energy) at ``field``."""
    tr = track_levels(species, field.direction, [field.B0])
    order = tr.eigen_order(0)
    return [tr.labels[k] for k in order]


# ---------------------------------------------------------------- resonances

def _selected_pairs(labels, selection):
    pairs = []
    for a, la in enumerate(labels):
        for b, lb in enumerate(labels):
            if a == b:
                continue
            if callable(selection):
                ok = selection(la, lb)
            elif selection == "dmI0":
                ok = lb[0] - la[0] == 1 and lb[1] == la[1]
            elif selection == "all":
                ok = lb[0] > la[0] or (lb[0] == la[0] and lb[1] > la[1])
            else:
                raise InputError(f"unknown selection rule {selection!r}")
            if ok:
                pairs.append((a, b))
    return pairs


def transition_label(species, lower, upper) -> str:
    if species.I == 0:
        return "I=0"
    if lower[1] == upper[1]:
        return f"mI={format_m(lower[1])}"
    return f"{format_m(lower[1])}->{format_m(upper[1])}"


@dataclass
class Resonance:
    B0: float
    levels: tuple  # eigen-indices (lower, upper) at B0, ascending-energy numbering
    labels: tuple  # ((m_S, m_I) lower, (m_S, m_I) upper)
    label: str
    Sx: complex
    Sz: complex

    @property
    def element(self) -> float:
        """Transverse transition matrix element magnitude."""
        return math.hypot(abs(self.Sx), abs(self.Sz))


def _branch_gap(species, n, B, U_ref, B_ref, a, b):
    E, U = _follow(species, n, B_ref, U_ref, B)
    return E[b] - E[a], E, U


def resonance_fields(species: SpinSpecies, omega_target: float, orientation="b",
                     B_range=(0.0, 0.1), selection="dmI0", n_sweep=500,
                     xtol=1e-11) -> list[Resonance]:
    """Fields where a selected transition matches ``omega_target`` (rad/s).

    Sign changes of ``E_b - E_a - omega`` are bracketed on a uniform
    sweep of ``n_sweep`` points and refined by bisection to ``xtol`` (T).
    Returned in ascending field order; empty if nothing crosses.
    """
    if not (omega_target > 0 and math.isfinite(omega_target)):
        raise InputError("target frequency must be positive")
    lo, hi = (float(x) for x in B_range)
    if not (math.isfinite(lo) and math.isfinite(hi)) or hi <= lo or lo < 0:
        raise InputError("invalid field range")
    n = _unit(orientation)
    grid = np.linspace(max(lo, _MIN_FIELD), hi, max(int(n_sweep), 500))
    tr = track_levels(species, n, grid)
    out = []
    for a, b in _selected_pairs(tr.labels, selection):
        gap = tr.energies[:, b] - tr.energies[:, a] - omega_target
        for k in np.flatnonzero(np.sign(gap[:-1]) * np.sign(gap[1:]) <= 0):
            if gap[k] == 0 and k > 0 and gap[k - 1] == 0:
                continue
            B_l, B_r = grid[k], grid[k + 1]
            U_l, f_l = tr.states[k], gap[k]
            while B_r - B_l > xtol:
                B_m = 0.5 * (B_l + B_r)
                g_m, _, U_m = _branch_gap(species, n, B_m, U_l, B_l, a, b)
                g_m -= omega_target
                if np.sign(g_m) == np.sign(f_l) and g_m != 0:
                    B_l, U_l, f_l = B_m, U_m, g_m
                else:
                    B_r = B_m
            B_res = 0.5 * (B_l + B_r)
            _, E, U = _branch_gap(species, n, B_res, U_l, B_l, a, b)
            es = eigensystem(build_hamiltonian(species, B_res * n))
            perm, _ = _match(U, es.states)
            ia, ib = int(perm[a]), int(perm[b])
            lo_i, up_i = (ia, ib) if es.energies[ib] >= es.energies[ia] else (ib, ia)
            sx, sz = transition_elements(es, species, up_i, lo_i, n)
            la, lb = tr.labels[a], tr.labels[b]
            out.append(Resonance(B_res, (lo_i, up_i), (la, lb), transition_label(species, la, lb), sx, sz))
    out.sort(key=lambda r: r.B0)
    return out


def transition_frequency(species: SpinSpecies, field: FieldVector, labels) -> float:
    """Angular frequency (rad/s) between two labelled levels at ``field``."""
    tr = track_levels(species, field.direction, [field.B0])
    a, b = tr.index(labels[0]), tr.index(labels[1])
    return float(abs(tr.energies[0, b] - tr.energies[0, a]))


def transition_frequencies(species: SpinSpecies, direction, fields, labels) -> np.ndarray:
    """Transition angular frequency on a field grid for a labelled level pair."""
    tr = track_levels(species, direction, fields)
    a, b = tr.index(labels[0]), tr.index(labels[1])
    return np.abs(tr.energies[:, b] - tr.energies[:, a])


def find_transition(species: SpinSpecies, label: str, omega_target, orientation="b",
                    B_range=(0.0, 0.2), selection="dmI0") -> Resonance:
    """The resonance whose label matches ``label`` (e.g. ``"mI=+3/2"`` or ``"I=0"``)."""
    hits = [r for r in resonance_fields(species, omega_target, orientation, B_range, selection)
            if r.label == label]
    if not hits:
        raise InputError(f"no {label} transition of {species.name} at this frequency in range")
    return hits[0]


@dataclass
class RotationRow:
    theta_deg: float
    species: str
    label: str
    B_res: float


def rotation_pattern(species_list, omega_target, angles, B_range=(0.0, 0.4),
                     selection="dmI0", threads=1) -> list[RotationRow]:
    """Resonance fields against field angle in the a-c plane.

    ``angles`` are radians from c (0) towards a (pi/2). Rows come back in
    (angle, species, field) order regardless of ``threads``.
    """
    angles = np.atleast_1d(np.asarray(angles, dtype=float))
    if angles.size == 0:
        raise InputError("angle grid is empty")
    jobs = [(th, sp) for th in angles for sp in species_list]

    def run(job):
        th, sp = job
        n = np.array([math.sin(th), 0.0, math.cos(th)])
        return [RotationRow(math.degrees(th), sp.name, r.label, r.B0)
                for r in resonance_fields(sp, omega_target, n, B_range, selection)]

    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            chunks = list(pool.map(run, jobs))
    else:
        chunks = [run(j) for j in jobs]
    return [row for chunk in chunks for row in chunk]
