import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spindiff import constants as K
from spindiff.errors import InfeasibleError, InputError
from spindiff.spinham import FieldVector
from spindiff.thermal import (EnsembleCouplingModel, PolarizationQuery, TransitionCoupling,
                              boltzmann_populations, ensemble_coupling, fit_concentration,
                              infer_bath_temperature, polarization_curve, polarization_hyperfine,
                              polarization_I0, yb_concentration_from_couplings)

from conftest import OMEGA_R

MU0 = 4e-7 * math.pi * 1.00000000055  # CODATA 2018 mu0 to ~1e-10
RHO_TOTAL = 2.26e23
GT = 5.71 * K.MU_B_OVER_HBAR


class TestPolarizationI0:
    def test_100mK(self):
        x = 6.62607015e-34 * 4.37e9 / (2 * 1.380649e-23 * 0.1)
        assert polarization_I0(0.1, OMEGA_R) == pytest.approx(math.tanh(x), rel=1e-9)
        assert polarization_I0(0.1, OMEGA_R) == pytest.approx(0.78127, abs=1e-5)

    def test_limits(self):
        assert polarization_I0(1e-5, OMEGA_R) == 1.0
        assert polarization_I0(1e5, OMEGA_R) < 1e-5

    def test_bad_T(self):
        for T in (0.0, -1.0, math.nan):
            with pytest.raises(InputError):
                polarization_I0(T, OMEGA_R)


class TestHyperfine:
    @pytest.fixture(scope="class")
    @classmethod
    def field(cls):
        return FieldVector.along("b", 43.5e-3)

    def test_ground_pair_low_T(self, er167):
        P = polarization_curve(er167, FieldVector.along("b", 9.3e-3), "mI=-7/2")
        assert P(1e-4) == pytest.approx(1.0, abs=1e-12)

    def test_high_T_zero(self, er167, field):
        for m in ("-7/2", "-1/2", "+3/2", "+7/2"):
            assert abs(polarization_curve(er167, field, f"mI={m}")(1e4)) < 1e-4

    def test_reduces_to_I0(self, er0):
        fv = FieldVector.along("b", 37.26e-3)
        for T in (0.005, 0.023, 0.1, 0.53, 4.0):
            q = PolarizationQuery(T, fv, "I=0", er0)
            ref = math.tanh(8.38 * K.MU_B * 37.26e-3 / (2 * K.K_B * T))
            assert polarization_hyperfine(q) == pytest.approx(ref, abs=1e-12)
            assert polarization_I0(T, 8.38 * K.MU_B_OVER_HBAR * 37.26e-3) == pytest.approx(ref, abs=1e-12)

    def test_pair_is_lower_minus_upper(self, er167, field):
        P = polarization_curve(er167, field, "mI=+3/2")
        a, b = P.pair
        p = boltzmann_populations(P.energies, 0.05)
        assert P(0.05) == pytest.approx(p[a] - p[b])
        assert P(0.05) > 0

    def test_bad_label(self, er167, field):
        with pytest.raises(InputError):
            polarization_curve(er167, field, "mI=+9/2")
        with pytest.raises(InputError):
            polarization_curve(er167, field, "nonsense")

    def test_T_invariant(self, er167, field):
        with pytest.raises(InputError):
            PolarizationQuery(0.0, field, "mI=+3/2", er167)


@settings(max_examples=60, deadline=None)
@given(E=st.lists(st.floats(-1e11, 1e11), min_size=2, max_size=16), T=st.floats(1e-4, 100))
def test_populations_normalised(E, T):
    p = boltzmann_populations(E, T)
    assert np.all((p >= 0) & (p <= 1))
    assert p.sum() == pytest.approx(1.0, abs=1e-12)


class TestEnsembleCoupling:
    def test_anchor(self):
        m = EnsembleCouplingModel(GT, RHO_TOTAL / 1.3, OMEGA_R)
        oracle = (5.71 * 9.2740100783e-24 / 1.054571817e-34) / 4 * math.sqrt(
            0.7815 * RHO_TOTAL / 1.3 * MU0 * 1.054571817e-34 * OMEGA_R) / (2 * math.pi)
        assert ensemble_coupling(m, 0.7815) == pytest.approx(oracle, rel=1e-6)
        assert ensemble_coupling(m, 0.7815) == pytest.approx(14.05e6, abs=0.005e6)

    def test_trivial(self):
        m = EnsembleCouplingModel(GT, 1e23, OMEGA_R)
        assert ensemble_coupling(m, 0.0) == 0.0
        m4 = EnsembleCouplingModel(GT, 4e23, OMEGA_R)
        assert ensemble_coupling(m4, 0.3) == pytest.approx(2 * ensemble_coupling(m, 0.3), rel=1e-14)
        with pytest.raises(InputError):
            ensemble_coupling(m, 1.5)
        with pytest.raises(InputError):
            EnsembleCouplingModel(0.0, 1e23, OMEGA_R)

    def test_monotone_and_limit(self, er0):
        c = TransitionCoupling.for_transition(er0, "I=0", None, GT, 1 / 1.3, OMEGA_R)
        T = np.geomspace(1e-3, 10, 200)
        g = c.gens(RHO_TOTAL, T)
        assert np.all(np.diff(g) <= 0) and np.all(np.diff(g[g < 0.999 * g[0]]) < 0)
        assert c.gens(RHO_TOTAL, 1e-4) == pytest.approx(c.model(RHO_TOTAL).full_polarization, rel=1e-12)


@pytest.fixture(scope="module")
def couplings(registry):
    er0, er167 = registry["Er_I0"], registry["Er167"]
    out = {"Er_I0:I=0": TransitionCoupling.for_transition(er0, "I=0", None, GT, 1 / 1.3, OMEGA_R)}
    for lab, B, gt in (("mI=+1/2", 34.52e-3, 4.75), ("mI=+3/2", 43.2e-3, 4.98)):
        out[f"Er167:{lab}"] = TransitionCoupling.for_transition(
            er167, lab, FieldVector.along("b", B), gt * K.MU_B_OVER_HBAR, 1 / 4.37, OMEGA_R)
    return out


class TestFitConcentration:
    T = np.array([0.02, 0.04, 0.07, 0.1, 0.2, 0.35, 0.5])

    def _series(self, couplings, noise=0.0, seed=0):
        rng = np.random.default_rng(seed)
        return {k: (self.T, c.gens(RHO_TOTAL, self.T) * (1 + noise * rng.standard_normal(self.T.size)), None)
                for k, c in couplings.items()}

    def test_noise_free(self, couplings):
        fit = fit_concentration(self._series(couplings), couplings)
        assert fit.rho == pytest.approx(RHO_TOTAL, rel=1e-6)
        assert fit.sub_densities["Er167:mI=+3/2"] == pytest.approx(RHO_TOTAL / 4.37, rel=1e-6)

    def test_noisy(self, couplings):
        for seed in range(5):
            fit = fit_concentration(self._series(couplings, 0.02, seed), couplings)
            assert fit.rho == pytest.approx(RHO_TOTAL, rel=0.05)
            assert fit.rho_err > 0

    def test_single_point_inversion(self, couplings):
        c = couplings["Er_I0:I=0"]
        g = 12.0e6
        fit = fit_concentration({"Er_I0:I=0": ([0.1], [g], None)}, {"Er_I0:I=0": c})
        assert c.gens(fit.rho, 0.1) == pytest.approx(g, rel=1e-9)

    def test_empty(self, couplings):
        with pytest.raises(InputError):
            fit_concentration({}, couplings)
        with pytest.raises(InputError):
            fit_concentration({"other": ([0.1], [1e6], None)}, couplings)


class TestBathTemperature:
    def test_i0_round_trip(self, couplings):
        c = couplings["Er_I0:I=0"]
        f = lambda t: c.gens(RHO_TOTAL, t)
        for T in (0.023, 0.1, 0.4):
            r = infer_bath_temperature(f(T), f, sigma=1e3)
            assert r.T == pytest.approx(T, abs=1e-4)
            assert r.branch == "decreasing"
        warm, cold = infer_bath_temperature(f(0.12), f), infer_bath_temperature(f(0.1), f)
        assert f(0.1) > f(0.12) and cold.T < warm.T  # larger g -> colder

    def test_hyperfine_round_trip(self, couplings):
        c = couplings["Er167:mI=+3/2"]
        f = lambda t: c.gens(RHO_TOTAL, t)
        r = infer_bath_temperature(f(0.023), f, sigma=20e3)
        assert r.T == pytest.approx(0.023, abs=1e-4)
        assert r.branch == "increasing"
        assert 0 < r.std_error < 0.01
        hi = infer_bath_temperature(f(0.4), f, branch="high")
        assert hi.T == pytest.approx(0.4, abs=1e-4)

    def test_asymptote(self, couplings):
        c = couplings["Er_I0:I=0"]
        f = lambda t: c.gens(RHO_TOTAL, t)
        top = c.model(RHO_TOTAL).full_polarization
        r = infer_bath_temperature(top, f)
        assert r.at_bound and r.T < 0.01
        with pytest.raises(InfeasibleError):
            infer_bath_temperature(1.01 * top, f)


class TestYb:
    def test_anchor(self):
        rho = yb_concentration_from_couplings(14135, 4904, 5.71, 2.75, 2.26e17)
        assert rho == pytest.approx(1.29e17, rel=0.02)

    def test_trivial(self):
        assert yb_concentration_from_couplings(1, 1, 2, 2, 5.0) == pytest.approx(5.5)
        r1 = yb_concentration_from_couplings(1, 1, 2, 2, 5.0)
        assert yb_concentration_from_couplings(1, 2, 2, 2, 5.0) == pytest.approx(4 * r1)
        with pytest.raises(InputError):
            yb_concentration_from_couplings(1, -1, 2, 2, 5.0)
