"""Parity analysis, Bell fidelity, readout correction and lifetime fits."""

import math

import numpy as np
import pytest
from scipy.linalg import expm
from sklearn.base import clone

from rydcz.spam import (
    BellMeasurement,
    DatasetError,
    LifetimeFitter,
    ParityFitter,
    bell_fidelity,
    bell_state,
    bright_probability,
    diagonal_from_measured,
    fit_lifetime,
    parity_fit,
    read_bell_table,
    read_lifetime_table,
    readout_populations,
    spam_lower_bound,
    survival_model,
)

THETA = np.linspace(0, np.pi, 13, endpoint=False)


def reference_signal(rho, theta, p, q):
    """Both-bright probability built atom by atom, without the module helpers."""
    x = np.array([[0, 1], [1, 0]])
    rot = expm(-1j * np.pi / 4 * x)
    out = []
    for t in theta:
        ph = np.diag([np.exp(-1j * t / 2), np.exp(1j * t / 2)])
        u1 = rot @ ph
        u = np.kron(u1, u1)
        r = u @ rho @ u.conj().T
        povm = np.kron(np.diag([p, q]), np.diag([p, q]))
        out.append(np.real(np.trace(r @ povm)))
    return np.array(out)


def mixed_bell(p00, p11, coherence, phase=0.4, leak=0.0):
    rho = np.zeros((4, 4), dtype=complex)
    rho[0, 0], rho[3, 3] = p00, p11
    rho[1, 1] = rho[2, 2] = leak / 2
    rho[0, 3] = coherence / 2 * np.exp(-1j * phase)
    rho[3, 0] = np.conj(rho[0, 3])
    return rho


class TestParitySignal:
    @pytest.mark.parametrize("p,q", [(1.0, 0.0), (0.98, 0.01), (0.9, 0.1)])
    def test_matches_reference(self, p, q):
        rho = mixed_bell(0.47, 0.45, 0.8, leak=0.08)
        ours = np.array([bright_probability(rho, t, p, q) for t in THETA])
        np.testing.assert_allclose(ours, reference_signal(rho, THETA, p, q), atol=1e-12)

    @pytest.mark.parametrize("coherence", [1.0, 0.6, 0.0])
    @pytest.mark.parametrize("p,q", [(1.0, 0.0), (0.97, 0.02), (0.8, 0.15)])
    def test_amplitude_is_quarter_coherence_times_contrast(self, coherence, p, q):
        rho = mixed_bell(0.5, 0.5, coherence)
        y = reference_signal(rho, THETA, p, q)
        fit = parity_fit(THETA, y, np.full(THETA.size, 1e-6))
        assert fit.amplitude == pytest.approx(coherence / 4 * (p - q) ** 2, abs=1e-9)

    def test_pure_bell_state_coherence(self):
        y = np.array([bright_probability(bell_state(), t) for t in THETA])
        assert parity_fit(THETA, y, np.full(THETA.size, 1e-6)).coherence == pytest.approx(1.0, abs=1e-8)

    def test_readout_round_trip(self, rng):
        for _ in range(50):
            pops = rng.dirichlet(np.ones(4))
            p, q = rng.uniform(0.9, 1.0), rng.uniform(0.0, 0.05)
            m00, m11 = readout_populations(pops, p, q)
            assert diagonal_from_measured(m00, m11, p, q) == pytest.approx(pops[0] + pops[3], abs=1e-12)

    def test_readout_matches_reference(self):
        rho = mixed_bell(0.4, 0.35, 0.5, leak=0.25)
        p, q = 0.95, 0.03
        m00, _ = readout_populations(np.real(np.diag(rho)), p, q)
        povm = np.kron(np.diag([p, q]), np.diag([p, q]))
        assert m00 == pytest.approx(np.real(np.trace(rho @ povm)))


class TestParityFit:
    def test_exact_recovery(self):
        y = 0.2 * np.cos(2 * THETA + 1.1) + 0.3
        fit = parity_fit(THETA, y, np.full(THETA.size, 1e-3))
        assert (fit.amplitude, fit.phase, fit.offset) == pytest.approx((0.2, 1.1, 0.3), abs=1e-12)
        np.testing.assert_allclose(fit.predict(THETA), y, atol=1e-12)

    def test_negative_amplitude_moves_to_phase(self):
        y = -0.2 * np.cos(2 * THETA) + 0.3
        fit = parity_fit(THETA, y, np.full(THETA.size, 1e-3))
        assert fit.amplitude == pytest.approx(0.2)
        assert abs(math.remainder(fit.phase - np.pi, 2 * np.pi)) < 1e-9

    def test_flat_signal_is_degenerate(self, rng):
        se = np.full(THETA.size, 1e-2)
        fit = parity_fit(THETA, 0.25 + rng.normal(0, 1e-2, THETA.size), se)
        assert fit.degenerate
        assert fit.coherence == 0.0

    def test_error_propagation_coverage(self):
        gen = np.random.default_rng(11)
        se = np.full(THETA.size, 0.01)
        clean = 0.2 * np.cos(2 * THETA + 0.3) + 0.25
        trials = 1000
        hits = sum(
            abs(f.amplitude - 0.2) <= f.amplitude_err
            for f in (parity_fit(THETA, clean + gen.normal(0, se), se) for _ in range(trials))
        )
        assert hits / trials == pytest.approx(0.68, abs=0.05)

    def test_bootstrap_coverage(self):
        gen = np.random.default_rng(12)
        se = np.full(THETA.size, 0.01)
        clean = 0.2 * np.cos(2 * THETA + 0.3) + 0.25
        trials = 300
        hits = 0
        for k in range(trials):
            f = parity_fit(THETA, clean + gen.normal(0, se), se, n_bootstrap=100, seed=k)
            hits += abs(f.amplitude - 0.2) <= f.amplitude_err
        assert hits / trials == pytest.approx(0.68, abs=0.08)

    def test_unweighted_errors_scale_with_residual(self, rng):
        y = 0.2 * np.cos(2 * THETA) + 0.3 + rng.normal(0, 0.01, THETA.size)
        fit = parity_fit(THETA, y)
        assert 0.001 < fit.amplitude_err < 0.02

    @pytest.mark.parametrize(
        "theta,msg",
        [(np.linspace(0, np.pi, 4), "five"), (np.linspace(0, 0.5, 8), "span")],
    )
    def test_validation(self, theta, msg):
        with pytest.raises(ValueError, match=msg):
            parity_fit(theta, np.zeros(theta.size))

    def test_estimator(self):
        est = ParityFitter(n_bootstrap=10)
        assert clone(est).get_params() == {"n_bootstrap": 10, "random_state": 0}
        y = 0.1 * np.cos(2 * THETA) + 0.2
        est.fit(THETA, y, np.full(THETA.size, 1e-3))
        assert est.coherence_ == pytest.approx(0.4)
        np.testing.assert_allclose(est.predict(THETA), y, atol=1e-9)


class TestReadoutCorrection:
    def test_end_to_end_inverse(self, rng):
        # measure a known state through imperfect readout, then undo it
        for _ in range(20):
            p, q = rng.uniform(0.9, 1.0), rng.uniform(0.0, 0.05)
            pc = rng.uniform(0.5, 0.95)
            rho = mixed_bell(0.48, 0.47, pc, phase=rng.uniform(0, 6), leak=0.05)
            true_f = 0.5 * (0.48 + 0.47 + pc)
            m00, m11 = readout_populations(np.real(np.diag(rho)), p, q)
            fit = parity_fit(THETA, reference_signal(rho, THETA, p, q), np.full(THETA.size, 1e-6))
            f_meas = 0.5 * (m00 + m11 + fit.coherence)
            assert spam_lower_bound(f_meas, p, q).exact == pytest.approx(true_f, abs=1e-8)

    def test_inequality_chain_sweep(self, rng):
        n = 10_000
        f = rng.uniform(0.55, 1.0, n)
        q = rng.uniform(0.0, 0.05, n)
        p = q + rng.uniform(1e-3, 1.0, n) * (1 - q)
        for fi, pi, qi in zip(f, p, q):
            b = spam_lower_bound(fi, pi, qi)
            assert b.exact >= b.bound - 1e-12
            assert b.bound >= b.measured - 1e-12
            assert b.measured_is_lower_bound
            assert abs(b.bound - b.expansion) <= 2 * qi**3 + 1e-15

    def test_perfect_true_positive_is_tight(self):
        b = spam_lower_bound(0.99, 1.0, 0.004)
        assert b.exact == pytest.approx(b.bound, abs=1e-15)
        assert b.bound == pytest.approx((0.99 - 0.004) / 0.996**2)

    def test_no_readout_error_is_identity(self):
        b = spam_lower_bound(0.9, 1.0, 0.0)
        assert b.exact == b.bound == b.expansion == 0.9

    def test_rates_must_be_ordered(self):
        with pytest.raises(ValueError):
            spam_lower_bound(0.9, 0.1, 0.2)


class TestBellFidelity:
    def test_arithmetic(self):
        meas = BellMeasurement(0.46, 0.42, 0.9, coherence=0.86, P00_err=0.01, P11_err=0.02, coherence_err=0.02, P_nl_err=0.01)
        res = bell_fidelity(meas)
        assert res.fidelity == pytest.approx(0.87)
        assert res.fidelity_err == pytest.approx(0.5 * math.sqrt(0.01**2 + 0.02**2 + 0.02**2))
        assert res.corrected == pytest.approx(0.87 / 0.9)
        rel = math.hypot(res.fidelity_err / 0.87, 0.01 / 0.9)
        assert res.corrected_err == pytest.approx(0.87 / 0.9 * rel)
        assert not res.flagged

    def test_flag_above_one(self):
        assert bell_fidelity(BellMeasurement(0.5, 0.5, 0.8, coherence=0.95)).flagged

    def test_from_parity_data(self):
        y = 0.2 * np.cos(2 * THETA + 0.5) + 0.25
        data = np.column_stack([THETA, y, np.full(THETA.size, 1e-3)])
        res = bell_fidelity(BellMeasurement(0.45, 0.45, 0.95, parity_data=data))
        assert res.coherence == pytest.approx(0.8)
        assert res.fidelity == pytest.approx(0.85)

    def test_summary_keys(self):
        s = bell_fidelity(BellMeasurement(0.45, 0.45, 0.95, coherence=0.8)).summary()
        assert set(s) == {"F_B", "F_B_err", "F_B_corrected", "F_B_corrected_err", "P_c", "P_c_err", "corrected_above_one"}

    def test_validation(self):
        with pytest.raises(ValueError):
            BellMeasurement(0.5, 0.5, 0.9)
        with pytest.raises(ValueError):
            BellMeasurement(0.5, 0.5, 0.9, coherence=0.5, parity_data=np.zeros((5, 2)))
        with pytest.raises(ValueError):
            BellMeasurement(1.5, 0.5, 0.9, coherence=0.5)
        with pytest.raises(ValueError):
            bell_fidelity(BellMeasurement(0.5, 0.5, 0.0, coherence=0.5))


class TestLifetime:
    POWER = np.array([0.0, 2.0, 5.0, 10.0, 15.0, 20.0, 30.0])
    TRUE = np.array([0.5, 0.05, 2e-3])

    def rates(self, power):
        return self.TRUE[0] + self.TRUE[1] * power + self.TRUE[2] * power**2

    def test_noiseless(self):
        fit = fit_lifetime(self.POWER, self.rates(self.POWER))
        np.testing.assert_allclose(fit.coefficients, self.TRUE, rtol=1e-9)
        assert not fit.flagged

    def test_recovery_within_two_sigma(self):
        gen = np.random.default_rng(4)
        se = 0.03 * self.rates(self.POWER)
        fit = fit_lifetime(self.POWER, self.rates(self.POWER) + gen.normal(0, se), se)
        assert np.all(np.abs(fit.coefficients - self.TRUE) <= 2 * fit.errors)

    def test_band_matches_covariance(self):
        gen = np.random.default_rng(5)
        se = 0.03 * self.rates(self.POWER)
        fit = fit_lifetime(self.POWER, self.rates(self.POWER) + gen.normal(0, se), se)
        _, band = fit.predict(np.array([0.0]), return_band=True)
        assert band[0] == pytest.approx(fit.errors[0])

    def test_negative_coefficient_flagged(self):
        fit = fit_lifetime(self.POWER, 2.0 - 0.01 * self.POWER**2 + 0.4 * self.POWER)
        assert fit.flagged

    def test_validation(self):
        with pytest.raises(ValueError, match="three distinct"):
            fit_lifetime([1, 1, 2], [1, 2, 3])
        with pytest.raises(ValueError):
            fit_lifetime([1, 2, 3], [1, -2, 3])

    def test_estimator(self):
        est = clone(LifetimeFitter()).fit(self.POWER, self.rates(self.POWER))
        np.testing.assert_allclose(est.predict([7.0]), self.rates(7.0), rtol=1e-9)


class TestSurvivalModel:
    def test_initial_values(self):
        s = survival_model(0.0, 1.0, 5.0)
        assert (float(s.metastable), float(s.p0_from_0), float(s.p0_from_1)) == (1.0, 1.0, 0.0)

    def test_infinite_spin_lifetime(self):
        t = np.linspace(0, 3, 7)
        s = survival_model(t, 0.7, math.inf)
        np.testing.assert_allclose(s.p0_from_0, np.exp(-0.7 * t))
        np.testing.assert_allclose(s.p0_from_1, 0.0)

    def test_populations_sum_to_survival(self):
        t = np.linspace(0, 3, 7)
        s = survival_model(t, 0.7, 1.3)
        np.testing.assert_allclose(s.p0_from_0 + s.p0_from_1, s.metastable)


class TestDatasets:
    def test_lifetime_table(self, tmp_path):
        path = tmp_path / "life.csv"
        path.write_text("# trap scan\npower_mw,rate_per_s,stderr\n0,0.5,0.01\n10,1.2,0.02\n20,2.5,0.03\n")
        p, r, s = read_lifetime_table(path)
        np.testing.assert_array_equal(p, [0, 10, 20])
        np.testing.assert_array_equal(s, [0.01, 0.02, 0.03])

    @pytest.mark.parametrize(
        "body,match",
        [
            ("0,0.5\n", "life.csv:1: expected 3 columns"),
            ("0,abc,0.1\n", "life.csv:1: cannot parse"),
            ("0,-1,0.1\n", "life.csv:1:"),
            ("# nothing\n", "no data rows"),
        ],
    )
    def test_lifetime_errors(self, tmp_path, body, match):
        path = tmp_path / "life.csv"
        path.write_text(body)
        with pytest.raises(DatasetError, match=match):
            read_lifetime_table(path)

    def test_bell_table(self, tmp_path):
        rows = ["quantity,theta_rad,value,stderr", "P00,,0.46,0.01", "P11,,0.42,0.01", "P_nl,,0.9,0.005", "p_FP,,0.004,"]
        rows += [f"parity,{t},{0.2 * math.cos(2 * t) + 0.25},0.001" for t in THETA]
        path = tmp_path / "bell.csv"
        path.write_text("\n".join(rows) + "\n")
        meas = read_bell_table(path)
        assert meas.p_FP == 0.004
        assert meas.parity_data.shape == (THETA.size, 3)
        assert bell_fidelity(meas).coherence == pytest.approx(0.8)

    @pytest.mark.parametrize(
        "rows,match",
        [
            (["P00,,0.4,", "P11,,0.4,", "P_nl,,x,"], "bell.csv:3: cannot parse"),
            (["P00,,0.4,", "P00,,0.4,"], "bell.csv:2: duplicate"),
            (["P00,,0.4,", "Pxx,,0.4,"], "unknown quantity"),
            (["P00,,0.4,", "P11,,0.4,", "P_c,,0.8,"], "missing P_nl"),
            (["P00,,0.4,", "P11,,0.4,", "P_nl,,0.9,"], "need parity rows"),
            (["P00,,0.4,", "P11,,0.4,", "P_nl,,0.9"], "expected 4 columns"),
        ],
    )
    def test_bell_errors(self, tmp_path, rows, match):
        path = tmp_path / "bell.csv"
        path.write_text("\n".join(rows) + "\n")
        with pytest.raises(DatasetError, match=match):
            read_bell_table(path)
