import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spindiff import constants as K
from spindiff.errors import InputError
from spindiff.fieldmap import (FieldMap, fock_energy_integral, gamma_tilde, normalize,
                               read_fieldmap_csv, toy_wire_map, write_fieldmap_csv)

from conftest import OMEGA_R

G_PERP, G_PAR = K.TWO_PI * 117e9, K.TWO_PI * 17.5e9


def uniform_map(nx=5, nz=7, bx=1.0, bz=1.0, L=725e-6):
    x = np.linspace(-10e-6, -1e-6, nx)
    z = np.linspace(-5e-6, 5e-6, nz)
    return FieldMap(x, z, np.full((nx, nz), bx), np.full((nx, nz), bz), L)


@pytest.fixture(scope="module")
def toy():
    return toy_wire_map()


def test_target_integral():
    ref = 4e-7 * math.pi * 1.054571817e-34 * OMEGA_R / (4 * 725e-6)
    assert fock_energy_integral(OMEGA_R, 725e-6) == pytest.approx(ref, rel=1e-8)
    assert ref == pytest.approx(1.255e-27, abs=0.001e-27)


class TestNormalize:
    def test_hits_target(self, toy):
        assert toy.integral() == pytest.approx(fock_energy_integral(OMEGA_R, 725e-6), rel=1e-12)

    def test_idempotent(self, toy):
        again = normalize(toy, OMEGA_R)
        np.testing.assert_allclose(again.bx, toy.bx, rtol=1e-12)

    def test_scale_invariant(self, toy):
        again = normalize(toy.scaled(2.0), OMEGA_R)
        np.testing.assert_allclose(again.bz, toy.bz, rtol=1e-12)

    def test_zero_map(self):
        with pytest.raises(InputError):
            normalize(uniform_map(bx=0.0, bz=0.0), OMEGA_R)


class TestGammaTilde:
    def test_isotropic_collapses(self, toy):
        g = K.TWO_PI * 30e9
        assert gamma_tilde(toy, 0.5, 0.5, g, g) == pytest.approx(g, rel=1e-12)

    def test_uniform_closed_form(self):
        v = gamma_tilde(uniform_map(), -0.5j, 0.5, G_PERP, G_PAR) / K.MU_B_OVER_HBAR
        by_hand = 2 * math.sqrt((58.5 ** 2 + 8.75 ** 2) / 2) / 13.996245
        assert v == pytest.approx(by_hand, rel=1e-6)
        assert v == pytest.approx(5.98, abs=0.01)

    def test_toy_map_in_window(self, toy):
        v = gamma_tilde(toy, 0.5, 0.5, G_PERP, G_PAR) / K.MU_B_OVER_HBAR
        assert 4.5 <= v <= 6.5

    def test_refinement(self):
        a = gamma_tilde(toy_wire_map(step=1e-6), 0.5, 0.5, G_PERP, G_PAR)
        b = gamma_tilde(toy_wire_map(step=0.5e-6), 0.5, 0.5, G_PERP, G_PAR)
        assert abs(a / b - 1) < 5e-3

    def test_zero_map(self):
        with pytest.raises(InputError):
            gamma_tilde(uniform_map(bx=0.0, bz=0.0), 0.5, 0.5, 1.0, 1.0)


@settings(max_examples=50, deadline=None)
@given(s=st.floats(1e-6, 1e6), sx=st.floats(0.01, 1), sz=st.floats(0.01, 1),
       gp=st.floats(0.1, 10), ga=st.floats(0.1, 10), seed=st.integers(0, 1000))
def test_scale_invariance_and_bounds(s, sx, sz, gp, ga, seed):
    rng = np.random.default_rng(seed)
    m = uniform_map()
    m = FieldMap(m.x, m.z, rng.normal(size=m.bx.shape), rng.normal(size=m.bz.shape), m.L)
    g = gamma_tilde(m, sx, sz, gp, ga)
    assert gamma_tilde(m.scaled(s), sx, sz, gp, ga) == pytest.approx(g, rel=1e-12)
    lo, hi = sorted((2 * gp * sx, 2 * ga * sz))
    assert lo * (1 - 1e-12) <= g <= hi * (1 + 1e-12)


def test_decays_with_depth(toy):
    mid = np.argmin(np.abs(toy.z))
    mag = np.hypot(toy.bx[:, mid], toy.bz[:, mid])  # x ascending, so toward the surface
    assert np.all(np.diff(mag) > 0)


class TestValidation:
    def test_bad_grids(self):
        m = uniform_map()
        with pytest.raises(InputError):
            FieldMap(m.x[::-1], m.z, m.bx, m.bz, m.L)
        with pytest.raises(InputError):
            FieldMap(m.x + 5e-6, m.z, m.bx, m.bz, m.L)
        with pytest.raises(InputError):
            FieldMap(m.x, m.z, m.bx, m.bz, 0.0)
        bad = m.bx.copy()
        bad[0, 0] = np.nan
        with pytest.raises(InputError):
            FieldMap(m.x, m.z, bad, m.bz, m.L)


class TestCSV:
    def test_round_trip(self, tmp_path, toy):
        small = FieldMap(toy.x[-4:], toy.z[::50], toy.bx[-4:, ::50], toy.bz[-4:, ::50], toy.L)
        p = tmp_path / "map.csv"
        write_fieldmap_csv(small, p)
        back = read_fieldmap_csv(p, small.L)
        np.testing.assert_allclose(back.bx, small.bx, rtol=1e-9)
        np.testing.assert_allclose(back.x, small.x, rtol=1e-9)

    def test_drops_crystal_outside_rows(self, tmp_path, caplog):
        p = tmp_path / "m.csv"
        p.write_text("x_um,z_um,dB1x_T,dB1z_T\n-2,0,1,1\n-2,1,1,1\n-1,0,1,1\n-1,1,1,1\n0,0,9,9\n0,1,9,9\n")
        m = read_fieldmap_csv(p, 1e-3)
        assert m.bx.shape == (2, 2) and m.bx.max() == 1
        assert "dropped 2 rows" in caplog.text

    @pytest.mark.parametrize("text", ["a,b,c,d\n-1,0,1,1\n",
                                      "x_um,z_um,dB1x_T,dB1z_T\n-1,0,x,1\n",
                                      "x_um,z_um,dB1x_T,dB1z_T\n-1,0,1,1\n-2,1,1,1\n"])
    def test_malformed(self, tmp_path, text):
        p = tmp_path / "m.csv"
        p.write_text(text)
        with pytest.raises(InputError):
            read_fieldmap_csv(p, 1e-3)

    def test_missing_file(self, tmp_path):
        with pytest.raises(InputError):
            read_fieldmap_csv(tmp_path / "nope.csv", 1e-3)
