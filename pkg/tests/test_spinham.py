import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spindiff import constants as K
from spindiff.errors import InputError
from spindiff.spinham import (FieldVector, SpinSpecies, build_hamiltonian, eigensystem,
                              level_labels, resonance_fields, rotation_pattern,
                              spin_matrices, track_levels, transition_elements,
                              transition_frequency)

from conftest import OMEGA_R

B_PERP = FieldVector.along("b", 0.0)


def test_zero_field_doublet(er0):
    H = build_hamiltonian(er0, B_PERP)
    assert H.shape == (2, 2)
    assert np.all(H == 0)


def test_dimension_167(er167):
    assert build_hamiltonian(er167, FieldVector.along("b", 0.034)).shape == (16, 16)
    assert er167.dimension == 16


def test_zeeman_splitting_er0(er0):
    # hf = g muB B0 by hand
    es = eigensystem(build_hamiltonian(er0, FieldVector.along("b", 37.26e-3)))
    f = (es.energies[1] - es.energies[0]) / K.TWO_PI
    assert f == pytest.approx(8.38 * K.MU_B * 37.26e-3 / K.H, rel=1e-9)
    assert f == pytest.approx(4.37e9, abs=2e6)


def test_reduces_to_zeeman_when_A_zero(er167):
    sp = SpinSpecies("x", 0.5, 3.5, er167.g, np.zeros(3))
    H = build_hamiltonian(sp, FieldVector.along("a", 0.05))
    Hz = build_hamiltonian(SpinSpecies("y", 0.5, 0.0, er167.g), FieldVector.along("a", 0.05))
    np.testing.assert_allclose(H, np.kron(Hz, np.eye(8)), atol=1e-6)


def test_nonfinite_field(er0):
    with pytest.raises(InputError):
        build_hamiltonian(er0, np.array([0.0, np.nan, 0.0]))
    with pytest.raises(InputError):
        FieldVector(math.inf)


def test_species_validation():
    with pytest.raises(InputError):
        SpinSpecies("bad", S=0.0)
    with pytest.raises(InputError):
        SpinSpecies("bad", I=0.3)
    with pytest.raises(InputError):
        SpinSpecies("bad", concentration=-1)
    with pytest.raises(InputError):
        SpinSpecies("bad", g=[[1, 2, 0], [0, 1, 0], [0, 0, 1]])


class TestEigensystem:
    def test_diagonal(self):
        es = eigensystem(np.diag([3.0, 1.0, 2.0]).astype(complex))
        np.testing.assert_allclose(es.energies, [1, 2, 3])
        np.testing.assert_allclose(np.abs(es.states), np.eye(3)[:, [1, 2, 0]])

    def test_pauli_x(self):
        w = K.TWO_PI * 1e9
        sx = spin_matrices(0.5)[0] * 2
        es = eigensystem(w * sx)
        np.testing.assert_allclose(es.energies / K.TWO_PI, [-1e9, 1e9], rtol=1e-12)
        es = eigensystem(0.5 * w * sx)
        np.testing.assert_allclose(es.energies / K.TWO_PI, [-0.5e9, 0.5e9], rtol=1e-12)

    def test_non_hermitian_rejected(self):
        with pytest.raises(InputError):
            eigensystem(np.array([[0, 1], [0, 0]], dtype=complex))

    def test_167_independent_solve(self, er167):
        # independent construction: explicit 16x16 in |m_I> (x) |m_S> ordering
        B = 0.034
        g, A = 8.38, -873e6 * K.TWO_PI
        sI = [np.asarray(m) for m in spin_matrices(3.5)]
        sS = [np.asarray(m) for m in spin_matrices(0.5)]
        Hd = (g * K.MU_B_OVER_HBAR * B) * np.kron(np.eye(8), sS[1])
        Hd += A * sum(np.kron(sI[k], sS[k]) for k in (0, 1))
        Hd += -130e6 * K.TWO_PI * np.kron(sI[2], sS[2])
        ref = np.linalg.eigvalsh(Hd)
        es = eigensystem(build_hamiltonian(er167, FieldVector.along("b", B)))
        np.testing.assert_allclose(es.energies, ref, rtol=1e-10, atol=1e-3)
        labels = level_labels(er167, FieldVector.along("b", B))
        assert [l[0] for l in labels] == [-0.5] * 8 + [0.5] * 8
        # lower multiplet ordered m_I = -7/2 ... +7/2 for negative A
        assert [l[1] for l in labels[:8]] == [m - 3.5 for m in range(8)]


@settings(max_examples=40, deadline=None)
@given(gx=st.floats(0.5, 10), gz=st.floats(0.5, 10), ax=st.floats(-2e9, 2e9), az=st.floats(-2e9, 2e9),
       I=st.sampled_from([0.0, 0.5, 1.5, 2.5, 3.5]), B=st.floats(0.0, 0.5),
       th=st.floats(0, math.pi), ph=st.floats(0, 2 * math.pi))
def test_hermitian_and_reconstruction(gx, gz, ax, az, I, B, th, ph):
    sp = SpinSpecies("r", 0.5, I, [gx, gx, gz], [ax, ax, az])
    H = build_hamiltonian(sp, FieldVector(B, th, ph))
    scale = max(np.linalg.norm(H), 1.0)
    assert np.linalg.norm(H - H.conj().T) <= 1e-14 * scale
    es = eigensystem(H)
    assert np.all(np.diff(es.energies) >= 0)
    assert np.linalg.norm(es.reconstruct() - H) <= 1e-10 * scale
    U = es.states
    assert np.abs(U.conj().T @ U - np.eye(U.shape[0])).max() < 1e-12


@settings(max_examples=40, deadline=None)
@given(g=st.lists(st.floats(0.3, 10), min_size=3, max_size=3), B=st.floats(1e-3, 1.0),
       th=st.floats(0, math.pi), ph=st.floats(0, 2 * math.pi))
def test_zeeman_only_frequency(g, B, th, ph):
    sp = SpinSpecies("z", 0.5, 0.0, g)
    fv = FieldVector(B, th, ph)
    es = eigensystem(build_hamiltonian(sp, fv))
    geff = np.linalg.norm(np.diag(g) @ fv.direction)
    expect = geff * K.MU_B * B / K.HBAR
    assert es.energies[1] - es.energies[0] == pytest.approx(expect, rel=1e-10)


class TestTransitionElements:
    def test_er0(self, er0):
        es = eigensystem(build_hamiltonian(er0, FieldVector.along("b", 0.037)))
        sx, sz = transition_elements(es, er0, 1, 0)
        assert sx == pytest.approx(-0.5j, abs=1e-12)
        assert sz == pytest.approx(0.5, abs=1e-12)

    @pytest.mark.parametrize("label,B,sx,sz", [("mI=+1/2", 34.52e-3, 0.413, 0.498),
                                               ("mI=+3/2", 43.5e-3, 0.433, 0.498)])
    def test_167_table(self, er167, label, B, sx, sz):
        res = {r.label: r for r in resonance_fields(er167, OMEGA_R, "b", (0.0, 0.08))}[label]
        assert res.B0 == pytest.approx(B, abs=0.5e-3)
        assert res.Sx.real == pytest.approx(0, abs=1e-10)
        assert -res.Sx.imag == pytest.approx(sx, abs=0.005)
        assert res.Sz.real == pytest.approx(sz, abs=0.005)

    def test_same_level_rejected(self, er0):
        es = eigensystem(build_hamiltonian(er0, FieldVector.along("b", 0.037)))
        with pytest.raises(InputError):
            transition_elements(es, er0, 0, 0)


class TestResonanceFields:
    def test_er0(self, er0):
        res = resonance_fields(er0, OMEGA_R, "b", (0.0, 0.1))
        assert len(res) == 1
        expect = K.HBAR * OMEGA_R / (8.38 * K.MU_B)
        assert res[0].B0 == pytest.approx(expect, rel=1e-8)
        assert res[0].B0 == pytest.approx(37.3e-3, abs=0.1e-3)

    def test_yb0(self, yb0):
        res = resonance_fields(yb0, OMEGA_R, "b", (0.0, 0.2))
        assert len(res) == 1
        assert res[0].B0 == pytest.approx(4.37 / 55.1, abs=0.1e-3)

    def test_167_eight_lines(self, er167):
        res = resonance_fields(er167, OMEGA_R, "b", (0.0, 0.1))
        assert len(res) == 8
        assert sorted(r.label for r in res) == sorted(f"mI={m}" for m in
                                                      ["-7/2", "-5/2", "-3/2", "-1/2", "+1/2", "+3/2", "+5/2", "+7/2"])

    def test_round_trip(self, er167):
        for r in resonance_fields(er167, OMEGA_R, "b", (0.0, 0.1)):
            w = transition_frequency(er167, FieldVector.along("b", r.B0), r.labels)
            assert w == pytest.approx(OMEGA_R, rel=1e-6)

    def test_empty(self, er0):
        assert resonance_fields(er0, OMEGA_R, "b", (0.0, 0.01)) == []

    def test_bad_input(self, er0):
        with pytest.raises(InputError):
            resonance_fields(er0, -1.0)
        with pytest.raises(InputError):
            resonance_fields(er0, OMEGA_R, "b", (0.1, 0.0))


class TestRotation:
    def test_er0_endpoints(self):
        g_par = 17.5e9 * K.H / K.MU_B
        er = SpinSpecies("Er", 0.5, 0.0, [117e9 * K.H / K.MU_B] * 2 + [g_par])
        rows = rotation_pattern([er], OMEGA_R, np.radians([0.0, 90.0]), (0.0, 0.4))
        by = {round(r.theta_deg): r.B_res for r in rows}
        assert by[0] == pytest.approx(4.37 / 17.5, abs=0.1e-3)
        assert by[90] == pytest.approx(4.37 / 117.0, abs=0.1e-3)

    def test_yb171_two_curves(self, registry):
        rows = rotation_pattern([registry["Yb171"]], OMEGA_R, np.radians([60.0, 90.0]), (0.0, 0.4))
        labels = {r.label for r in rows if r.theta_deg == 90.0}
        assert len(labels) == 2

    def test_symmetric_in_theta(self, er0, yb0):
        th = np.radians([25.0, 50.0])
        plus = rotation_pattern([er0, yb0], OMEGA_R, th, (0.0, 0.4))
        minus = rotation_pattern([er0, yb0], OMEGA_R, -th, (0.0, 0.4))
        np.testing.assert_allclose([r.B_res for r in plus], [r.B_res for r in minus], rtol=1e-9)

    def test_threads_same_result(self, er0, yb0):
        th = np.radians(np.arange(0, 90, 15.0))
        a = rotation_pattern([er0, yb0], OMEGA_R, th, (0.0, 0.4))
        b = rotation_pattern([er0, yb0], OMEGA_R, th, (0.0, 0.4), threads=4)
        assert a == b

    def test_empty_grid(self, er0):
        with pytest.raises(InputError):
            rotation_pattern([er0], OMEGA_R, [], (0.0, 0.4))


def test_tracked_branches_continuous(er167):
    fields = np.linspace(1e-3, 0.08, 300)
    tr = track_levels(er167, "b", fields)
    steps = np.abs(np.diff(tr.energies, axis=0)).max() / K.TWO_PI
    assert steps < 0.2e9  # no branch jumps between grid points
