"""Clifford group, RB fitting, erasure-conditioned RB, bias and threshold sweeps."""

import math

import numpy as np
import pytest
from sklearn.base import clone

from rydcz.benchmark import (
    CLIFFORDS,
    SINGLE_QUBIT_LENGTHS,
    BiasResult,
    ChannelParams,
    CountModel,
    ImagingParams,
    NoiseEngineCZChannel,
    ParametricCZChannel,
    RBDecayFitter,
    RBFitError,
    bias_ratio,
    detection_threshold_sweep,
    erasure_bias_experiment,
    expected_rb_epsilons,
    expected_single_qubit_curves,
    fit_rb_decay,
    noise_scale_scan,
    run_single_qubit_rb,
    run_two_qubit_rb,
)
from rydcz.noise import Branching, NoiseConfig

NO_DECAY = ImagingParams(decay_during_image=0.0)


@pytest.fixture(scope="module")
def calibrated():
    return ChannelParams.calibrated()


@pytest.fixture(scope="module")
def sq_result(calibrated):
    return run_single_qubit_rb(calibrated, shots=3000, seed=2)


class TestCliffordGroup:
    def test_size_and_unitarity(self):
        assert CLIFFORDS.shape == (24, 2, 2)
        for c in CLIFFORDS:
            np.testing.assert_allclose(c.conj().T @ c, np.eye(2), atol=1e-12)

    def test_closure(self):
        def same(a, b):
            return abs(abs(np.trace(a.conj().T @ b)) - 2) < 1e-9

        for a in CLIFFORDS:
            for b in CLIFFORDS:
                assert any(same(a @ b, c) for c in CLIFFORDS)

    def test_unitary_two_design(self):
        # frame potential of a unitary 2-design on a qubit is exactly 2
        tr = np.einsum("aji,bji->ab", CLIFFORDS.conj(), CLIFFORDS)
        assert np.mean(np.abs(tr) ** 4) == pytest.approx(2.0, abs=1e-12)

    def test_contains_paulis(self):
        for p in (np.array([[0, 1], [1, 0]]), np.array([[0, -1j], [1j, 0]]), np.diag([1, -1])):
            assert max(abs(np.trace(c.conj().T @ p)) for c in CLIFFORDS) == pytest.approx(2.0)


class TestChannelParams:
    def test_budget_epsilon(self):
        ch = ChannelParams.from_error_budget(1e-3, 0.56, 2e-4, 1e-4)
        assert ch.epsilon == pytest.approx(1e-3)
        assert ch.f_det == pytest.approx(0.56)
        assert ch.p_return == pytest.approx(2e-4)

    def test_budget_overrun(self):
        with pytest.raises(ValueError):
            ChannelParams.from_error_budget(1e-3, 0.9, 2e-4, 1e-4)

    def test_calibrated_hits_targets(self, calibrated):
        eps, eps_c = expected_rb_epsilons(calibrated)
        assert eps == pytest.approx(1e-3, rel=1e-6)
        assert (eps - eps_c) / eps == pytest.approx(0.56, abs=1e-6)

    def test_calibrated_unreachable(self):
        with pytest.raises(ValueError):
            ChannelParams.calibrated(conversion=0.99, loss=3e-4, returned=3e-4)

    def test_calibrated_zero(self):
        assert ChannelParams.calibrated(epsilon=0.0).epsilon == 0.0

    def test_from_lifetime(self):
        ch = ChannelParams.from_lifetime(0.5, recapture=0.8)
        p = 1 - math.exp(-0.5 * 1.875e-3)
        assert ch.p_detectable == pytest.approx(0.8 * p)
        assert ch.p_loss == pytest.approx(0.2 * p)

    def test_validation(self):
        with pytest.raises(ValueError):
            ChannelParams(p_detectable=0.6, p_loss=0.6)
        with pytest.raises(ValueError):
            ImagingParams(fidelity=1.2)


class TestRBFit:
    LENGTHS = np.array(SINGLE_QUBIT_LENGTHS, dtype=float)

    def test_noiseless_recovery(self):
        y = 0.48 * 0.998**self.LENGTHS + 0.5
        fit = fit_rb_decay(self.LENGTHS, y, np.full(6, 1e-4), offset=0.5)
        assert fit.p == pytest.approx(0.998, abs=1e-10)
        assert fit.epsilon == pytest.approx(1e-3, rel=1e-7)

    @pytest.mark.parametrize("seed", range(5))
    def test_noisy_recovery_within_5_percent(self, seed):
        gen = np.random.default_rng(seed)
        se = np.full(6, 5e-4)
        y = 0.49 * 0.998**self.LENGTHS + 0.5 + gen.normal(0, se)
        fit = fit_rb_decay(self.LENGTHS, y, se, offset=0.5)
        assert fit.epsilon == pytest.approx(1e-3, rel=0.05)

    def test_free_offset_recovery(self):
        m = np.arange(2, 60, 4, dtype=float)
        y = 0.7 * 0.95**m + 0.25
        fit = fit_rb_decay(m, y, np.full(m.size, 1e-4), n_qubits=2)
        assert fit.p == pytest.approx(0.95, rel=1e-6)
        assert fit.B == pytest.approx(0.25, abs=1e-6)
        assert fit.epsilon == pytest.approx(0.75 * 0.05, rel=1e-5)

    def test_interval_coverage(self):
        # the 1 sigma interval on p covers the truth 68% of the time
        gen = np.random.default_rng(7)
        se = np.full(6, 2e-3)
        clean = 0.49 * 0.998**self.LENGTHS + 0.5
        hits = 0
        trials = 1000
        for _ in range(trials):
            fit = fit_rb_decay(self.LENGTHS, clean + gen.normal(0, se), se, offset=0.5)
            hits += abs(fit.p - 0.998) <= fit.p_err
        assert hits / trials == pytest.approx(0.68, abs=0.05)

    def test_too_few_lengths(self):
        with pytest.raises(RBFitError):
            fit_rb_decay([1, 2], [0.9, 0.8])

    def test_growth_is_flagged(self):
        m = np.array([10, 20, 30, 40.0])
        fit = fit_rb_decay(m, 0.1 * 1.01**m + 0.5, np.full(4, 1e-5), offset=0.5)
        assert fit.flagged

    def test_estimator(self):
        est = RBDecayFitter(offset=0.5)
        assert clone(est).get_params() == {"n_qubits": 1, "offset": 0.5}
        y = 0.5 * 0.99**self.LENGTHS + 0.5
        est.fit(self.LENGTHS, y, np.full(6, 1e-4))
        assert est.epsilon_ == pytest.approx(5e-3, rel=1e-6)
        np.testing.assert_allclose(est.predict(self.LENGTHS), y, atol=1e-9)


class TestSingleQubitRB:
    def test_noiseless_is_exactly_one(self):
        res = run_single_qubit_rb(ChannelParams(imaging=NO_DECAY), [10, 20, 30], erasure_period=10, shots=200)
        np.testing.assert_allclose(res.success, 1.0, atol=1e-12)
        np.testing.assert_allclose(res.success_conditioned, 1.0, atol=1e-12)
        assert res.epsilon == pytest.approx(0.0, abs=1e-9)

    def test_pauli_channel(self):
        ch = ChannelParams(p_pauli=3e-3)
        res = run_single_qubit_rb(ch, erasure_period=0, shots=4000, seed=1)
        assert res.epsilon == pytest.approx(ch.epsilon, rel=0.05)
        assert res.conversion == pytest.approx(0.0, abs=0.05)

    def test_expected_curves_closure(self):
        ch = ChannelParams(p_detectable=1e-3, p_loss=5e-4, p_return=4e-4, p_pauli=6e-4)
        res = run_single_qubit_rb(ch, shots=10000, seed=3)
        plain, cond = expected_single_qubit_curves(ch)
        assert np.all(np.abs(res.success - plain) <= 4 * res.stderr)
        assert np.all(np.abs(res.success_conditioned - cond) <= 4 * res.stderr_conditioned)

    def test_calibrated_recovery(self, sq_result):
        assert sq_result.epsilon == pytest.approx(1e-3, rel=0.15)
        assert sq_result.conversion == pytest.approx(0.56, abs=0.08)
        assert sq_result.epsilon_c < sq_result.epsilon

    def test_tables(self, sq_result):
        assert sq_result.curve_table().shape == (6, 5)
        s = sq_result.summary()
        assert s["n_qubits"] == 1
        assert set(s["fit"]) >= {"A", "p", "B"}

    def test_reweighting(self, sq_result):
        rec = sq_result.records
        w = rec.weights(1.0, 0.0)
        # with a perfect image a shot survives only if nothing was seen
        np.testing.assert_array_equal(w, (rec.ground_checked == 0).astype(float))

    def test_deterministic(self, calibrated):
        a = run_single_qubit_rb(calibrated, [50, 100, 150], shots=300, seed=5)
        b = run_single_qubit_rb(calibrated, [50, 100, 150], shots=300, seed=5)
        np.testing.assert_array_equal(a.success, b.success)

    def test_length_cap(self, calibrated):
        with pytest.raises(ValueError):
            run_single_qubit_rb(calibrated, [400], shots=10)


class TestTwoQubitRB:
    def test_ideal_cz_is_exactly_one(self):
        res = run_two_qubit_rb(ParametricCZChannel(), shots=300, imaging=NO_DECAY)
        np.testing.assert_allclose(res.success, 1.0, atol=1e-12)
        assert res.epsilon == pytest.approx(0.0, abs=1e-9)

    @pytest.mark.parametrize("rotations", ["discrete", "haar"])
    def test_pauli_channel(self, rotations):
        ch = ParametricCZChannel(p_pauli=1e-2)
        res = run_two_qubit_rb(ch, shots=4000, seed=1, rotations=rotations, imaging=NO_DECAY)
        assert res.epsilon == pytest.approx(ch.true_error, rel=0.1)

    def test_detectable_leakage_is_converted(self):
        ch = ParametricCZChannel(leak=(5e-3,) * 4, branching=Branching.all_detectable())
        res = run_two_qubit_rb(ch, shots=4000, seed=2, imaging=NO_DECAY)
        assert 0.9 < res.conversion <= 1.0

    def test_undetectable_leakage_is_not(self):
        b = Branching(to_3p0=0.0, to_1s0=0.0, to_3p2=0.0, unaccounted=1.0, post_1s0=0.0, post_3p0=0.0)
        ch = ParametricCZChannel(leak=(5e-3,) * 4, branching=b)
        res = run_two_qubit_rb(ch, shots=4000, seed=2, imaging=NO_DECAY)
        assert abs(res.conversion) < 0.1

    def test_bad_rotations(self):
        with pytest.raises(ValueError):
            run_two_qubit_rb(ParametricCZChannel(), shots=10, rotations="clifford")

    def test_channel_validation(self):
        with pytest.raises(ValueError):
            ParametricCZChannel(leak=(0.1, 0.1))

    def test_noise_engine_channel_phases(self, pulse, model):
        # with no noise the pool reproduces CZ up to a global phase
        ch = NoiseEngineCZChannel.from_pulse(pulse, model, NoiseConfig(), (), sequences=3, gates=2)
        ratio = ch.u / ch.u[..., :1]
        np.testing.assert_allclose(ratio, np.broadcast_to([1, 1, 1, -1], ratio.shape), atol=2e-3)
        drawn = ch.draw(np.random.default_rng(0), 5, 7)
        assert drawn.shape == (5, 7, 4)


@pytest.fixture(scope="module")
def selective():
    ch = ParametricCZChannel(leak=(0.0, 1e-2, 1e-2, 1.2e-2))
    return {i: erasure_bias_experiment(ch, i, shots=8000, seed=k) for k, i in enumerate(("00", "++", "11"))}


class TestErasureBias:
    def test_symmetric_channel_has_unit_ratio(self):
        ch = ParametricCZChannel(leak=(4e-3,) * 4)
        a = erasure_bias_experiment(ch, "00", shots=6000, seed=1)
        b = erasure_bias_experiment(ch, "11", shots=6000, seed=2)
        assert abs(a.slope - b.slope) <= 3 * math.hypot(a.slope_err, b.slope_err)

    def test_slope_oracle(self, selective):
        img = ImagingParams(decay_during_image=1.4e-4)
        expected = 1.2e-2 * Branching().post_1s0 * img.fidelity
        assert selective["11"].slope == pytest.approx(expected, rel=0.1)

    def test_zero_state_sits_on_floor(self, selective):
        img = ImagingParams(decay_during_image=1.4e-4)
        a = img.false_positive + (1 - img.false_positive) * img.decay_during_image * img.fidelity
        floor = 1 - (1 - a) ** 2
        r = selective["00"]
        assert abs(r.slope) <= 3 * r.slope_err
        assert abs(r.intercept - floor) <= 3 * r.intercept_err

    def test_plus_state_in_between(self, selective):
        assert selective["00"].slope < selective["++"].slope < selective["11"].slope

    def test_ratio(self, selective):
        ratio, lower, bound_only = bias_ratio(selective["11"], selective["00"])
        assert lower > 15
        assert ratio >= lower or bound_only

    def test_ratio_arithmetic(self):
        def res(slope, err):
            z = np.zeros(2)
            return BiasResult("x", z, z, z, slope, err, 0.0, 0.0)

        ratio, lower, bound_only = bias_ratio(res(6e-3, 1e-4), res(2e-4, 1e-4))
        assert ratio == pytest.approx(30.0)
        assert lower == pytest.approx(5.9e-3 / 3e-4)
        assert not bound_only
        _, lower, bound_only = bias_ratio(res(6e-3, 1e-4), res(-1e-5, 2e-5))
        assert lower == pytest.approx(5.9e-3 / 2e-5)
        assert bound_only

    def test_validation(self):
        with pytest.raises(ValueError):
            erasure_bias_experiment(ParametricCZChannel(), "01", shots=10)
        with pytest.raises(ValueError):
            erasure_bias_experiment(ParametricCZChannel(), "00", n_gates=[0, 20], shots=10)


class TestThresholdSweep:
    def test_calibrated_counts(self):
        cm = CountModel.calibrated()
        assert cm.fidelity(700.0) == pytest.approx(0.986)
        assert cm.false_positive(700.0) == pytest.approx(4e-4)

    def test_plateau_exists(self, calibrated, sq_result):
        sweep = detection_threshold_sweep(CountModel.calibrated(), calibrated, result=sq_result)
        assert sweep.plateau_exists
        t = sweep.thresholds[sweep.plateau]
        assert t.min() <= 700.0 <= t.max() + 50

    def test_limits(self, calibrated, sq_result):
        cm = CountModel.calibrated()
        sweep = detection_threshold_sweep(cm, calibrated, thresholds=[-1e4, 1e5], result=sq_result)
        # everything flagged: P(err | det) is the overall error probability
        assert sweep.p_err_given_det[0] == pytest.approx(np.mean(1 - sq_result.records.success), rel=1e-9)
        # nothing flagged: no conversion
        assert abs(sweep.conversion[1]) < 1e-9

    def test_overlapping_distributions_have_no_plateau(self, calibrated, sq_result):
        cm = CountModel(300.0, 100.0, 300.0, 100.0)
        sweep = detection_threshold_sweep(cm, calibrated, result=sq_result)
        assert not sweep.plateau_exists

    def test_table(self, calibrated, sq_result):
        sweep = detection_threshold_sweep(CountModel.calibrated(), calibrated, thresholds=[500, 700], result=sq_result)
        assert sweep.table().shape == (2, 4)


class TestNoiseScaleScan:
    def test_smoke(self, pulse, model):
        scan = noise_scale_scan(pulse, model, NoiseConfig(), scales=[0.5, 2.0], rb_shots=400, pool_sequences=20, true_shots=60)
        assert scan.table().shape == (2, 5)
        assert scan.true_error[1] > scan.true_error[0]
        assert scan.rb_error[1] > scan.rb_error[0]
