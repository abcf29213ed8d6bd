"""Randomized benchmarking with mid-circuit erasure detection.

Shots are simulated as state vectors with per-atom status flags
(computational, decayed to the ground state, lost).  Erasure images remove
ground-state atoms whether or not they are seen, so the state never depends
on the detection outcome; conditioning on "no detection" is done with the
exact per-shot probability of seeing nothing::

    w = (1 - f_det) ** n_ground_checked * (1 - p_fp) ** n_other_checked

which also lets a detection-threshold sweep reweight the same shots.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import curve_fit, least_squares
from scipy.stats import norm
from sklearn.base import BaseEstimator

from rydcz._validation import (
    as_float_array,
    check_count,
    check_nonnegative,
    check_probability,
    frozen_array,
    shot_rng,
)
from rydcz.noise import Branching, NoiseConfig, SOURCES, sample_gate_overlaps, scale_noise, simulate_noisy_gate

COMP, GROUND, LOST = 0, 1, 2
CLIFFORD_TIME = 1.875e-3
SINGLE_QUBIT_LENGTHS = (50, 100, 150, 200, 250, 300)
TWO_QUBIT_LENGTHS = (2, 4, 6, 8, 10)


class RBFitError(RuntimeError):
    """The decay model could not be fitted to the data."""


# ----------------------------------------------------------------------------- Cliffords


def _canonical(u):
    flat = u.ravel()
    k = int(np.argmax(np.abs(flat) > 1e-9))
    return u * (abs(flat[k]) / flat[k])


def _key(u):
    return tuple(np.round(_canonical(u).ravel(), 8).view(float))


def clifford_group():
    """The 24 single-qubit Cliffords (up to phase), generated from H and S."""
    h = np.array([[1, 1], [1, -1]], dtype=complex) / math.sqrt(2)
    s = np.diag([1, 1j])
    elems = [np.eye(2, dtype=complex)]
    seen = {_key(elems[0])}
    frontier = list(elems)
    while frontier:
        nxt = []
        for u in frontier:
            for g in (h, s):
                v = _canonical(g @ u)
                k = _key(v)
                if k not in seen:
                    seen.add(k)
                    elems.append(v)
                    nxt.append(v)
        frontier = nxt
    return np.array(elems)


def _group_tables(group):
    index = {_key(u): i for i, u in enumerate(group)}
    n = len(group)
    mult = np.empty((n, n), dtype=int)
    for i in range(n):
        for j in range(n):
            mult[i, j] = index[_key(group[i] @ group[j])]
    inverse = np.array([index[_key(u.conj().T)] for u in group])
    return mult, inverse


CLIFFORDS = clifford_group()
_MULT, _INV = _group_tables(CLIFFORDS)
_PAULIS = np.array([[[0, 1], [1, 0]], [[0, -1j], [1j, 0]], [[1, 0], [0, -1]]], dtype=complex)


# ----------------------------------------------------------------------------- parameters


@dataclass(frozen=True)
class ImagingParams:
    """Fast ground-state image used as an erasure check.

    ``fidelity`` is the probability a ground-state atom is seen,
    ``false_positive`` the probability an empty or metastable site is
    flagged, ``decay_during_image`` the extra metastable decay per image.
    """

    fidelity: float = 0.986
    false_positive: float = 4e-4
    decay_during_image: float = 7e-6

    def __post_init__(self):
        check_probability(self.fidelity, "fidelity")
        check_probability(self.false_positive, "false_positive")
        check_probability(self.decay_during_image, "decay_during_image")


@dataclass(frozen=True)
class ChannelParams:
    """Per-Clifford error channel of a single metastable qubit.

    Parameters
    ----------
    p_detectable : float
        Decay to the ground state, seen by the next image.
    p_loss : float
        Undetectable atom loss.
    p_return : float
        Decay that lands back in the qubit manifold in a random basis state.
    p_pauli : float
        Uniformly random X, Y or Z error.
    gate_duration : float
        Clifford duration (s), informational.
    imaging : ImagingParams
    """

    p_detectable: float = 0.0
    p_loss: float = 0.0
    p_return: float = 0.0
    p_pauli: float = 0.0
    gate_duration: float = CLIFFORD_TIME
    imaging: ImagingParams = field(default_factory=ImagingParams)

    def __post_init__(self):
        for name in ("p_detectable", "p_loss", "p_return", "p_pauli"):
            check_probability(getattr(self, name), name)
        if self.p_detectable + self.p_loss + self.p_return + self.p_pauli > 1:
            raise ValueError("channel probabilities sum to more than 1")
        check_nonnegative(self.gate_duration, "gate_duration")

    @property
    def f_det(self):
        """Share of the per-gate error that is a detectable decay."""
        eps = self.epsilon
        return self.p_detectable / eps if eps > 0 else 0.0

    @property
    def epsilon(self):
        """First-order average error per Clifford (loss counted as a full error)."""
        return self.p_detectable + self.p_loss + self.p_return / 2 + 2 * self.p_pauli / 3

    @classmethod
    def from_error_budget(cls, epsilon=1e-3, detectable_fraction=0.56, loss=2e-4, returned=1e-4, **kw):
        """Split ``epsilon`` into detectable decay, loss, 3P0 return and in-manifold errors.

        ``returned`` and the in-manifold remainder are error contributions; a
        random reset costs 1/2 and a random Pauli 2/3 of its probability.
        """
        det = detectable_fraction * epsilon
        rest = epsilon - det - loss - returned
        if rest < -1e-15:
            raise ValueError("error budget components exceed epsilon")
        return cls(p_detectable=det, p_loss=loss, p_return=2 * returned, p_pauli=1.5 * max(rest, 0.0), **kw)

    @classmethod
    def calibrated(cls, epsilon=1e-3, conversion=0.56, loss=2e-4, returned=1e-4, lengths=None, erasure_period=50, **kw):
        """Channel whose expected RB fits return ``epsilon`` and conversion ``conversion``.

        Loss and detected decay pull the success towards zero rather than
        1/2, so a fixed-offset fit does not read back the first-order sums
        of :meth:`from_error_budget`.  The overall scale and the detectable
        share are solved for on the exact expected curves; ``loss`` and
        ``returned`` keep their ratio to ``epsilon``.
        """
        check_probability(epsilon, "epsilon")
        check_probability(conversion, "conversion")
        if epsilon == 0:
            return cls(**kw)
        lengths = SINGLE_QUBIT_LENGTHS if lengths is None else lengths

        def build(x):
            scale, share = map(float, x)
            return cls.from_error_budget(scale * epsilon, share, scale * loss, scale * returned, **kw)

        def mismatch(x):
            eps, eps_c = expected_rb_epsilons(build(x), lengths, erasure_period)
            return [eps / epsilon - 1, (eps - eps_c) / eps - conversion]

        sol = least_squares(mismatch, [0.9, conversion], bounds=([0.05, 0.0], [2.0, 1.0]), xtol=1e-12, ftol=1e-12)
        if np.max(np.abs(sol.fun)) > 1e-6:
            raise ValueError("no channel of this form reproduces the requested epsilon and conversion")
        return build(sol.x)

    @classmethod
    def from_lifetime(cls, gamma_m, recapture=1.0, clifford_time=CLIFFORD_TIME, loss=0.0, returned=0.0, pauli=0.0, **kw):
        """Detectable decay per Clifford from the metastable decay rate ``gamma_m`` (1/s)."""
        p = -math.expm1(-gamma_m * clifford_time)
        return cls(
            p_detectable=recapture * p,
            p_loss=(1 - recapture) * p + loss,
            p_return=2 * returned,
            p_pauli=1.5 * pauli,
            gate_duration=clifford_time,
            **kw,
        )


# ----------------------------------------------------------------------------- fitting


@dataclass(frozen=True)
class RBFit:
    A: float
    p: float
    B: float
    A_err: float
    p_err: float
    B_err: float
    n_qubits: int
    flagged: bool = False

    @property
    def epsilon(self):
        d = 2**self.n_qubits
        return (d - 1) / d * (1 - self.p)

    @property
    def epsilon_err(self):
        d = 2**self.n_qubits
        return (d - 1) / d * self.p_err

    def predict(self, lengths):
        return self.A * self.p ** np.asarray(lengths, dtype=float) + self.B


def fit_rb_decay(lengths, success, stderr=None, n_qubits=1, offset=None):
    """Weighted least-squares fit of ``A p^m + B``.

    Parameters
    ----------
    lengths, success : array_like
    stderr : array_like, optional
        Standard errors used as absolute weights; zeros are floored.
    n_qubits : int
        Sets ``epsilon = (1 - 1/2^n) (1 - p)``.
    offset : float, optional
        Hold ``B`` fixed at this value.

    Returns
    -------
    RBFit
        ``flagged`` is set when ``p`` falls outside (0, 1] by more than its
        uncertainty.

    Raises
    ------
    RBFitError
        Too few lengths, or the optimizer does not converge.
    """
    m = as_float_array(lengths, "lengths")
    y = as_float_array(success, "success")
    if np.unique(m).size < (2 if offset is not None else 3):
        raise RBFitError("need at least three distinct sequence lengths")
    sigma = np.full_like(y, 1e-3) if stderr is None else np.maximum(as_float_array(stderr, "stderr"), 1e-9)
    absolute = stderr is not None

    amp0 = max(y[0] - (offset if offset is not None else y[-1] * 0.5), 1e-3)
    ratio = np.clip((y[-1] - (offset or 0)) / max(y[0] - (offset or 0), 1e-12), 1e-6, 1.0)
    p0 = float(np.clip(ratio ** (1 / max(m[-1] - m[0], 1)), 0.5, 1.0))
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            if offset is not None:
                popt, pcov = curve_fit(
                    lambda x, a, p: a * p**x + offset,
                    m,
                    y,
                    p0=[amp0, p0],
                    sigma=sigma,
                    absolute_sigma=absolute,
                    bounds=([-np.inf, 0.0], [np.inf, 1.5]),
                    maxfev=20000,
                )
                a, p = popt
                b = float(offset)
                perr = np.sqrt(np.clip(np.diag(pcov), 0, None))
                a_err, p_err, b_err = perr[0], perr[1], 0.0
            else:
                popt, pcov = curve_fit(
                    lambda x, a, p, b: a * p**x + b,
                    m,
                    y,
                    p0=[amp0, p0, y[-1] * 0.5],
                    sigma=sigma,
                    absolute_sigma=absolute,
                    bounds=([-np.inf, 0.0, -np.inf], [np.inf, 1.5, np.inf]),
                    maxfev=20000,
                )
                a, p, b = popt
                a_err, p_err, b_err = np.sqrt(np.clip(np.diag(pcov), 0, None))
    except (RuntimeError, ValueError) as exc:
        raise RBFitError(f"decay fit failed: {exc}") from exc
    if not np.all(np.isfinite([a, p, b])):
        raise RBFitError("decay fit returned non-finite parameters")
    flagged = bool(p > 1 + max(p_err, 1e-12) or p <= 0)
    return RBFit(float(a), float(p), float(b), float(a_err), float(p_err), float(b_err), int(n_qubits), flagged)


class RBDecayFitter(BaseEstimator):
    """Estimator form of :func:`fit_rb_decay`.

    ``fit(lengths, success, stderr=None)`` sets ``A_``, ``p_``, ``B_``,
    ``epsilon_`` and ``epsilon_err_``; ``predict(lengths)`` evaluates the
    fitted curve.
    """

    def __init__(self, n_qubits=1, offset=None):
        self.n_qubits = n_qubits
        self.offset = offset

    def fit(self, X, y, stderr=None):
        lengths = np.asarray(X, dtype=float).ravel()
        self.fit_ = fit_rb_decay(lengths, y, stderr, self.n_qubits, self.offset)
        self.A_, self.p_, self.B_ = self.fit_.A, self.fit_.p, self.fit_.B
        self.epsilon_ = self.fit_.epsilon
        self.epsilon_err_ = self.fit_.epsilon_err
        return self

    def predict(self, X):
        return self.fit_.predict(np.asarray(X, dtype=float).ravel())


# ----------------------------------------------------------------------------- results


@dataclass(frozen=True, eq=False)
class ShotRecords:
    """Per-shot bookkeeping kept for reweighting with other imaging parameters."""

    length: np.ndarray
    ground_checked: np.ndarray
    other_checked: np.ndarray
    success: np.ndarray

    def weights(self, fidelity, false_positive):
        return (1.0 - fidelity) ** self.ground_checked * (1.0 - false_positive) ** self.other_checked


@dataclass(frozen=True, eq=False)
class RBResult:
    lengths: np.ndarray
    success: np.ndarray
    stderr: np.ndarray
    success_conditioned: np.ndarray
    stderr_conditioned: np.ndarray
    fit: RBFit
    fit_conditioned: RBFit
    n_qubits: int
    records: ShotRecords | None = None

    @property
    def epsilon(self):
        return self.fit.epsilon

    @property
    def epsilon_err(self):
        return self.fit.epsilon_err

    @property
    def epsilon_c(self):
        return self.fit_conditioned.epsilon

    @property
    def epsilon_c_err(self):
        return self.fit_conditioned.epsilon_err

    @property
    def conversion(self):
        """R_e = (eps - eps_c) / eps."""
        return (self.epsilon - self.epsilon_c) / self.epsilon if self.epsilon > 0 else float("nan")

    @property
    def conversion_err(self):
        if not self.epsilon > 0:
            return float("nan")
        r = self.epsilon_c / self.epsilon
        rel = math.hypot(
            self.epsilon_c_err / self.epsilon_c if self.epsilon_c > 0 else 0.0, self.epsilon_err / self.epsilon
        )
        return abs(r) * rel

    def curve_table(self):
        return np.column_stack(
            [self.lengths, self.success, self.stderr, self.success_conditioned, self.stderr_conditioned]
        )

    def summary(self):
        return {
            "n_qubits": self.n_qubits,
            "epsilon": self.epsilon,
            "epsilon_err": self.epsilon_err,
            "epsilon_c": self.epsilon_c,
            "epsilon_c_err": self.epsilon_c_err,
            "conversion": self.conversion,
            "conversion_err": self.conversion_err,
            "fit": _fit_dict(self.fit),
            "fit_conditioned": _fit_dict(self.fit_conditioned),
        }


def _fit_dict(fit):
    return {"A": fit.A, "p": fit.p, "B": fit.B, "A_err": fit.A_err, "p_err": fit.p_err, "B_err": fit.B_err, "flagged": fit.flagged}


def _weighted_mean(values, weights):
    total = weights.sum()
    if total <= 0:
        return float("nan"), float("nan")
    mean = float(np.sum(weights * values) / total)
    se = float(math.sqrt(np.sum(weights**2 * (values - mean) ** 2)) / total)
    return mean, se


def _binomial_floor(mean, n):
    """Standard error floor for means of probabilities from ``n`` shots."""
    return math.sqrt(max(mean * (1 - mean), 1.0 / n) / n)


def _summarize(records, lengths, imaging, n_qubits, offset):
    succ, se, succ_c, se_c = [], [], [], []
    w_all = records.weights(imaging.fidelity, imaging.false_positive)
    for m in lengths:
        sel = records.length == m
        s = records.success[sel]
        n = s.size
        mean = float(s.mean())
        succ.append(mean)
        se.append(max(float(s.std(ddof=1) / math.sqrt(n)), _binomial_floor(mean, n) * 1e-3))
        mc, sc = _weighted_mean(s, w_all[sel])
        succ_c.append(mc)
        se_c.append(max(sc, _binomial_floor(mc, n) * 1e-3) if np.isfinite(mc) else float("nan"))
    succ, se, succ_c, se_c = map(np.array, (succ, se, succ_c, se_c))
    fit = fit_rb_decay(lengths, succ, se, n_qubits, offset)
    ok = np.isfinite(succ_c)
    fit_c = fit_rb_decay(np.asarray(lengths)[ok], succ_c[ok], se_c[ok], n_qubits, offset)
    return succ, se, succ_c, se_c, fit, fit_c


# ----------------------------------------------------------------------------- single qubit


def _simulate_single(channel, m, period, shots, rng):
    seq = rng.integers(0, 24, size=(shots, m))
    psi = np.zeros((shots, 2), dtype=complex)
    psi[:, 0] = 1.0
    status = np.zeros(shots, dtype=int)
    cum = np.zeros(shots, dtype=int)
    g_cnt = np.zeros(shots)
    c_cnt = np.zeros(shots)
    edges = np.cumsum([channel.p_detectable, channel.p_loss, channel.p_return, channel.p_pauli])
    img = channel.imaging
    for g in range(m):
        c = seq[:, g]
        psi = np.einsum("sij,sj->si", CLIFFORDS[c], psi)
        cum = _MULT[c, cum]
        u = rng.random(shots)
        aux = rng.random(shots)
        comp = status == COMP
        status[comp & (u < edges[0])] = GROUND
        status[comp & (u >= edges[0]) & (u < edges[1])] = LOST
        reset = comp & (u >= edges[1]) & (u < edges[2])
        if reset.any():
            psi[reset] = 0.0
            psi[reset, (aux[reset] < 0.5).astype(int)] = 1.0
        flip = comp & (u >= edges[2]) & (u < edges[3])
        if flip.any():
            which = np.minimum((aux[flip] * 3).astype(int), 2)
            psi[flip] = np.einsum("sij,sj->si", _PAULIS[which], psi[flip])
        if period and (g + 1) % period == 0:
            decay = (status == COMP) & (rng.random(shots) < img.decay_during_image)
            status[decay] = GROUND
            ground = status == GROUND
            g_cnt += ground
            c_cnt += ~ground
            status[ground] = LOST
    psi = np.einsum("sij,sj->si", CLIFFORDS[_INV[cum]], psi)
    success = np.where(status == COMP, np.abs(psi[:, 0]) ** 2, 0.0)
    return g_cnt, c_cnt, success


def expected_single_qubit_curves(channel, lengths=SINGLE_QUBIT_LENGTHS, erasure_period=50):
    """Exact shot-averaged success, unconditioned and conditioned on no detection.

    The atom is tracked as weighted masses in (qubit, undetected ground,
    gone); each image multiplies the ground mass by ``1 - f`` and the others
    by ``1 - p_fp``.  The qubit Bloch vector shrinks by
    ``(1 - p_return)(1 - 4 p_pauli / 3)`` per gate independently.
    """
    img = channel.imaging
    lam = (1 - channel.p_return) * (1 - 4 * channel.p_pauli / 3)
    plain, cond = [], []
    for m in lengths:
        m = int(m)
        raw = np.array([1.0, 0.0, 0.0])
        wtd = raw.copy()
        for g in range(m):
            for v in (raw, wtd):
                c = v[0]
                v += (-c * (channel.p_detectable + channel.p_loss), c * channel.p_detectable, c * channel.p_loss)
            if erasure_period and (g + 1) % erasure_period == 0:
                for v, (f, fp) in ((raw, (0.0, 0.0)), (wtd, (img.fidelity, img.false_positive))):
                    pend = v[1] + v[0] * img.decay_during_image
                    v[0] *= (1 - img.decay_during_image) * (1 - fp)
                    v[2] = (v[2] * (1 - fp)) + pend * (1 - f)
                    v[1] = 0.0
        bloch = 0.5 * (1 + lam**m)
        plain.append(raw[0] * bloch)
        cond.append(wtd[0] * bloch / wtd.sum())
    return np.array(plain), np.array(cond)


def expected_rb_epsilons(channel, lengths=SINGLE_QUBIT_LENGTHS, erasure_period=50, offset=0.5):
    """Errors per Clifford ``(eps, eps_c)`` that fixed-offset fits report for the expected curves."""
    out = []
    for s in expected_single_qubit_curves(channel, lengths, erasure_period):
        sigma = np.sqrt(np.clip(s * (1 - s), 1e-12, None))
        out.append(fit_rb_decay(lengths, s, sigma, 1, offset).epsilon)
    return tuple(out)


def run_single_qubit_rb(channel, lengths=SINGLE_QUBIT_LENGTHS, erasure_period=50, shots=10000, seed=0, offset=0.5):
    """Single-qubit Clifford RB with an erasure image every ``erasure_period`` gates.

    Each shot is an independent random sequence; the exact inverse is
    appended and the success is the population returned to |0>, or zero if
    the atom is no longer in the qubit manifold.

    Parameters
    ----------
    channel : ChannelParams
    lengths : sequence of int
        At most 300.
    erasure_period : int
        Gates between images (0 disables imaging).
    shots : int
        Sequences per length.
    seed : int
    offset : float or None
        Fixed asymptote of the decay fit; ``None`` fits it.

    Returns
    -------
    RBResult
    """
    lengths = [check_count(m, "length") for m in lengths]
    if max(lengths) > 300:
        raise ValueError("sequence lengths are limited to 300")
    shots = check_count(shots, "shots")
    period = check_count(erasure_period, "erasure_period", minimum=0)
    parts = [_simulate_single(channel, m, period, shots, shot_rng(seed, i)) for i, m in enumerate(lengths)]
    records = ShotRecords(
        length=np.repeat(lengths, shots),
        ground_checked=np.concatenate([p[0] for p in parts]),
        other_checked=np.concatenate([p[1] for p in parts]),
        success=np.concatenate([p[2] for p in parts]),
    )
    succ, se, succ_c, se_c, fit, fit_c = _summarize(records, lengths, channel.imaging, 1, offset)
    return RBResult(
        frozen_array(lengths), frozen_array(succ), frozen_array(se), frozen_array(succ_c), frozen_array(se_c),
        fit, fit_c, 1, records,
    )


# ----------------------------------------------------------------------------- two qubits

_CZ = np.array([1, 1, 1, -1], dtype=complex)


class ParametricCZChannel:
    """CZ with fixed leakage per basis state and a two-qubit Pauli error.

    Parameters
    ----------
    leak : sequence of 4 floats
        Leakage probability per gate for |00>, |01>, |10>, |11>.
    p_pauli : float
        Probability of a uniformly random non-identity two-qubit Pauli.
    branching : Branching
    """

    def __init__(self, leak=(0.0, 0.0, 0.0, 0.0), p_pauli=0.0, branching=None):
        leak = np.asarray(leak, dtype=float)
        if leak.shape != (4,) or np.any(leak < 0) or np.any(leak > 1):
            raise ValueError("leak must be four probabilities")
        self.leak = leak
        self.p_pauli = check_probability(p_pauli, "p_pauli")
        self.branching = Branching() if branching is None else branching

    def draw(self, rng, sequences, gates):
        u = _CZ * np.sqrt(1.0 - self.leak)
        return np.broadcast_to(u, (sequences, gates, 4))

    @property
    def true_error(self):
        """Average gate error: leakage counts fully, Paulis with weight 4/5."""
        return float(self.leak.mean() + 0.8 * self.p_pauli)


class NoiseEngineCZChannel:
    """CZ gates drawn from a pool of trajectory-simulated noisy overlaps.

    Each pool row is one sequence worth of gates sharing quasi-static noise;
    sequences pick a row at random.
    """

    def __init__(self, samples, branching=None):
        u = np.asarray(samples.u)
        if u.ndim != 3:
            raise ValueError("pool needs sequence-correlated samples (shots, gates, 4)")
        z = np.exp(-1j * samples.theta1)
        self.u = u * np.array([1.0, z, z, z * z])
        self.p_pauli = 0.0
        self.branching = Branching() if branching is None else branching

    @classmethod
    def from_pulse(cls, pulse, model, config, sources=SOURCES, sequences=400, gates=10):
        samples = sample_gate_overlaps(pulse, model, config.with_(shots=sequences), sources, gates=gates)
        return cls(samples, config.branching)

    def draw(self, rng, sequences, gates):
        rows = rng.integers(0, self.u.shape[0], size=sequences)
        cols = np.arange(gates) % self.u.shape[1]
        return self.u[rows][:, cols]


def _rotation_set():
    def r(axis, angle):
        return np.cos(angle / 2) * np.eye(2) - 1j * np.sin(angle / 2) * _PAULIS[axis]

    return np.array(
        [np.eye(2, dtype=complex), r(0, np.pi / 2), r(0, -np.pi / 2), r(1, np.pi / 2), r(1, -np.pi / 2), r(0, np.pi), r(1, np.pi)]
    )


_ROTATIONS = _rotation_set()


def _haar_su2(rng, n):
    z = rng.normal(size=(n, 4))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    a = z[:, 0] + 1j * z[:, 1]
    b = z[:, 2] + 1j * z[:, 3]
    return np.stack([np.stack([a, -b.conj()], -1), np.stack([b, a.conj()], -1)], -2)


def _apply_global(rot, psi):
    mat = psi.reshape(-1, 2, 2)
    return np.einsum("sij,sjk,slk->sil", rot, mat, rot).reshape(-1, 4)


_PAULI4 = np.array(
    [np.kron(a, b) for a in np.concatenate([np.eye(2)[None], _PAULIS]) for b in np.concatenate([np.eye(2)[None], _PAULIS])]
)[1:]


def _leak_step(psi, u, status, branching, rng):
    """Apply one noisy CZ with diagonal no-leak amplitudes ``u`` (shots, 4)."""
    n = psi.shape[0]
    out = u * psi
    pop = np.abs(psi) ** 2
    leak_pop = pop * (1.0 - np.abs(u) ** 2)
    p_leak = leak_pop.sum(axis=1)
    live = np.all(status == COMP, axis=1)
    leaked = live & (rng.random(n) < p_leak)
    r_state, r_atom, r_out, r_bit = rng.random((4, n))
    keep = ~leaked
    norms = np.linalg.norm(out[keep], axis=1)
    out[keep] = out[keep] / np.where(norms > 0, norms, 1.0)[:, None]
    if leaked.any():
        idx = np.nonzero(leaked)[0]
        cdf = np.cumsum(leak_pop[idx], axis=1)
        k = np.minimum((cdf < (r_state[idx] * cdf[:, -1])[:, None]).sum(axis=1), 3)
        bits = np.stack([k >> 1, k & 1], axis=1)
        atom = np.where(k == 1, 1, np.where(k == 2, 0, (r_atom[idx] < 0.5).astype(int)))
        det, ret, _ = branching.outcome_fractions
        o = r_out[idx]
        result = np.where(o < det, GROUND, np.where(o < det + ret, COMP, LOST))
        rows = np.arange(idx.size)
        status[idx, atom] = result
        bits[rows, atom] = np.where(result == COMP, (r_bit[idx] < 0.5).astype(int), bits[rows, atom])
        out[idx] = 0.0
        out[idx, 2 * bits[:, 0] + bits[:, 1]] = 1.0
    return out


def _image_pair(status, imaging, rng, g_cnt, c_cnt):
    decay = (status == COMP) & (rng.random(status.shape) < imaging.decay_during_image)
    status[decay] = GROUND
    ground = status == GROUND
    g_cnt += ground.sum(axis=1)
    c_cnt += (~ground).sum(axis=1)
    status[ground] = LOST


def _simulate_two(channel, m, period, shots, rng, rotations, imaging, initial=None):
    us = channel.draw(rng, shots, m)
    psi = np.zeros((shots, 4), dtype=complex)
    if initial is None:
        psi[:, 3] = 1.0
    else:
        psi[:] = initial
    ideal = psi.copy()
    status = np.zeros((shots, 2), dtype=int)
    g_cnt = np.zeros(shots)
    c_cnt = np.zeros(shots)
    for g in range(m):
        if rotations is not None:
            rot = _haar_su2(rng, shots) if rotations == "haar" else _ROTATIONS[rng.integers(0, 7, size=shots)]
            psi = _apply_global(rot, psi)
            ideal = _apply_global(rot, ideal)
        psi = _leak_step(psi, us[:, g], status, channel.branching, rng)
        ideal = ideal * _CZ
        if channel.p_pauli:
            hit = rng.random(shots) < channel.p_pauli
            if hit.any():
                which = rng.integers(0, 15, size=hit.sum())
                psi[hit] = np.einsum("sij,sj->si", _PAULI4[which], psi[hit])
        if period and (g + 1) % period == 0:
            _image_pair(status, imaging, rng, g_cnt, c_cnt)
    live = np.all(status == COMP, axis=1)
    success = np.where(live, np.abs(np.sum(ideal.conj() * psi, axis=1)) ** 2, 0.0)
    return g_cnt, c_cnt, success, status


def run_two_qubit_rb(
    channel,
    lengths=TWO_QUBIT_LENGTHS,
    erasure_period=2,
    shots=4000,
    seed=0,
    rotations="discrete",
    imaging=None,
    offset=0.25,
):
    """Randomized CZ circuit with global single-qubit rotations and erasure images.

    Each gate is a random global rotation followed by a noisy CZ; the state
    starts in |11>.  Success is the overlap with the ideal final state (so
    no explicit inverting rotation is needed), zero once an atom has left
    the qubit manifold.

    Parameters
    ----------
    channel : ParametricCZChannel or NoiseEngineCZChannel
    lengths : sequence of int
        Numbers of CZ gates.
    erasure_period : int
        CZ gates between erasure images.
    shots : int
        Sequences per length.
    rotations : {'discrete', 'haar'}
        Draw each global rotation from {I, +-X/2, +-Y/2, X, Y} or from Haar.
    imaging : ImagingParams, optional
        Defaults to the two-qubit erasure image (decay 1.4e-4 per image).
    offset : float or None
        Fixed asymptote of the decay fit.
    """
    if rotations not in ("discrete", "haar"):
        raise ValueError("rotations must be 'discrete' or 'haar'")
    imaging = ImagingParams(decay_during_image=1.4e-4) if imaging is None else imaging
    lengths = [check_count(m, "length") for m in lengths]
    shots = check_count(shots, "shots")
    period = check_count(erasure_period, "erasure_period", minimum=0)
    parts = [
        _simulate_two(channel, m, period, shots, shot_rng(seed, i), rotations, imaging)
        for i, m in enumerate(lengths)
    ]
    records = ShotRecords(
        length=np.repeat(lengths, shots),
        ground_checked=np.concatenate([p[0] for p in parts]),
        other_checked=np.concatenate([p[1] for p in parts]),
        success=np.concatenate([p[2] for p in parts]),
    )
    succ, se, succ_c, se_c, fit, fit_c = _summarize(records, lengths, imaging, 2, offset)
    return RBResult(
        frozen_array(lengths), frozen_array(succ), frozen_array(se), frozen_array(succ_c), frozen_array(se_c),
        fit, fit_c, 2, records,
    )


# ----------------------------------------------------------------------------- erasure bias

_INITIAL_STATES = {
    "00": np.array([1, 0, 0, 0], dtype=complex),
    "11": np.array([0, 0, 0, 1], dtype=complex),
    "++": np.full(4, 0.5, dtype=complex),
}


@dataclass(frozen=True, eq=False)
class BiasResult:
    initial: str
    n_gates: np.ndarray
    detection: np.ndarray
    stderr: np.ndarray
    slope: float
    slope_err: float
    intercept: float
    intercept_err: float

    def table(self):
        return np.column_stack([self.n_gates, self.detection, self.stderr])


def _linear_fit(x, y, se):
    w = 1.0 / np.maximum(se, 1e-12) ** 2
    a = np.column_stack([np.ones_like(x), x])
    cov = np.linalg.inv(a.T @ (w[:, None] * a))
    coef = cov @ (a.T @ (w * y))
    return coef, np.sqrt(np.diag(cov))


def erasure_bias_experiment(channel, initial, n_gates=tuple(range(0, 19, 2)), shots=20000, seed=0, imaging=None):
    """Detection probability after ``n`` CZ gates with one image at the end.

    No rotations are interleaved, so basis populations are preserved.  The
    detection probability of each shot is evaluated exactly from the atom
    status at the image; the slope of a weighted linear fit is the erasure
    probability per gate and the intercept the imaging false-positive floor.
    """
    if initial not in _INITIAL_STATES:
        raise ValueError(f"initial must be one of {sorted(_INITIAL_STATES)}")
    imaging = ImagingParams(decay_during_image=1.4e-4) if imaging is None else imaging
    n_gates = [check_count(n, "n_gates", minimum=0) for n in n_gates]
    if max(n_gates) > 18:
        raise ValueError("at most 18 gates")
    det, se = [], []
    for i, n in enumerate(n_gates):
        rng = shot_rng(seed, i)
        _, _, _, status = _simulate_two(channel, n, 0, shots, rng, None, imaging, _INITIAL_STATES[initial])
        p_atom = np.where(
            status == GROUND,
            imaging.fidelity,
            np.where(
                status == COMP,
                imaging.false_positive + (1 - imaging.false_positive) * imaging.decay_during_image * imaging.fidelity,
                imaging.false_positive,
            ),
        )
        p = 1.0 - np.prod(1.0 - p_atom, axis=1)
        mean = float(p.mean())
        det.append(mean)
        se.append(math.sqrt(max(mean * (1 - mean), 1.0 / shots) / shots))
    x = np.asarray(n_gates, dtype=float)
    coef, err = _linear_fit(x, np.array(det), np.array(se))
    return BiasResult(initial, frozen_array(x), frozen_array(det), frozen_array(se), float(coef[1]), float(err[1]), float(coef[0]), float(err[0]))


def bias_ratio(p11, p00):
    """Ratio p11/p00 and its one-sigma lower bound ``(p11 - s11) / (p00 + s00)``.

    Returns ``(ratio, lower_bound, is_bound_only)``; when p00 is consistent
    with zero only the bound is meaningful.
    """
    lower = (p11.slope - p11.slope_err) / (max(p00.slope, 0.0) + p00.slope_err)
    bound_only = p00.slope <= p00.slope_err
    ratio = p11.slope / p00.slope if p00.slope > 0 else float("inf")
    return ratio, lower, bound_only


# ----------------------------------------------------------------------------- threshold sweep


@dataclass(frozen=True)
class CountModel:
    """Gaussian camera-count distributions for empty and occupied sites."""

    background_mean: float
    background_sigma: float
    bright_mean: float
    bright_sigma: float

    def fidelity(self, threshold):
        return norm.sf(threshold, self.bright_mean, self.bright_sigma)

    def false_positive(self, threshold):
        return norm.sf(threshold, self.background_mean, self.background_sigma)

    @classmethod
    def calibrated(cls, fidelity=0.986, false_positive=4e-4, threshold=700.0, background_mean=300.0, bright_sigma=150.0):
        """Place the distributions so ``threshold`` gives the stated rates."""
        bg_sigma = (threshold - background_mean) / norm.isf(false_positive)
        bright_mean = threshold + bright_sigma * norm.isf(1 - fidelity)
        return cls(background_mean, bg_sigma, bright_mean, bright_sigma)


@dataclass(frozen=True, eq=False)
class ThresholdSweep:
    thresholds: np.ndarray
    p_err_given_det: np.ndarray
    conversion: np.ndarray
    plateau: np.ndarray

    @property
    def plateau_exists(self):
        return bool(self.plateau.any())

    def table(self):
        return np.column_stack([self.thresholds, self.p_err_given_det, self.conversion, self.plateau])


def detection_threshold_sweep(count_model, channel, shots=10000, thresholds=None, seed=0, lengths=SINGLE_QUBIT_LENGTHS, erasure_period=50, result=None):
    """Error-given-detection and conversion fraction versus the count threshold.

    The RB shots are simulated once (or taken from ``result``) and
    reweighted for each threshold.  The plateau is where the conversion is
    within 2% of its maximum while ``P(err | det) > 0.9``.
    """
    if result is None:
        result = run_single_qubit_rb(channel, lengths, erasure_period, shots, seed)
    rec = result.records
    if thresholds is None:
        lo = count_model.background_mean - 4 * count_model.background_sigma
        hi = count_model.bright_mean + 4 * count_model.bright_sigma
        thresholds = np.linspace(lo, hi, 60)
    thresholds = np.asarray(thresholds, dtype=float)
    lengths = [int(m) for m in result.lengths]
    eps = result.epsilon
    p_err, conv = [], []
    for t in thresholds:
        f, fp = count_model.fidelity(t), count_model.false_positive(t)
        w = rec.weights(f, fp)
        flagged = 1.0 - w
        p_err.append(float(np.sum(flagged * (1 - rec.success)) / flagged.sum()) if flagged.sum() > 0 else float("nan"))
        succ_c, se_c = [], []
        for m in lengths:
            sel = rec.length == m
            mc, sc = _weighted_mean(rec.success[sel], w[sel])
            succ_c.append(mc)
            se_c.append(max(sc, 1e-9) if np.isfinite(mc) else float("nan"))
        succ_c = np.array(succ_c)
        ok = np.isfinite(succ_c)
        try:
            fit_c = fit_rb_decay(np.array(lengths)[ok], succ_c[ok], np.array(se_c)[ok], 1, result.fit.B)
            conv.append((eps - fit_c.epsilon) / eps if eps > 0 else float("nan"))
        except RBFitError:
            conv.append(float("nan"))
    p_err, conv = np.array(p_err), np.array(conv)
    finite = np.isfinite(conv)
    best = np.nanmax(conv) if finite.any() else float("nan")
    plateau = finite & (best > 0) & (conv >= best - 0.02 * abs(best)) & (np.nan_to_num(p_err) > 0.9)
    return ThresholdSweep(frozen_array(thresholds), frozen_array(p_err), frozen_array(conv), frozen_array(plateau, dtype=bool))


# ----------------------------------------------------------------------------- noise-scaling scan


@dataclass(frozen=True, eq=False)
class NoiseScaleScan:
    scales: np.ndarray
    true_error: np.ndarray
    true_stderr: np.ndarray
    rb_error: np.ndarray
    rb_stderr: np.ndarray

    def table(self):
        return np.column_stack([self.scales, self.true_error, self.true_stderr, self.rb_error, self.rb_stderr])


def noise_scale_scan(
    pulse,
    model,
    config=None,
    scales=None,
    sources=SOURCES,
    rb_shots=4000,
    pool_sequences=400,
    true_shots=2000,
    seed=0,
    rotations="discrete",
):
    """Compare randomized-circuit error with the simulated gate error across noise strengths."""
    config = NoiseConfig() if config is None else config
    scales = np.geomspace(0.25, 3.0, 12) if scales is None else np.asarray(scales, dtype=float)
    true_e, true_se, rb_e, rb_se = [], [], [], []
    for i, s in enumerate(scales):
        cfg = scale_noise(config, s).with_(seed=seed + i)
        rep = simulate_noisy_gate(pulse, model, cfg.with_(shots=true_shots), sources)
        channel = NoiseEngineCZChannel.from_pulse(pulse, model, cfg, sources, sequences=pool_sequences, gates=max(TWO_QUBIT_LENGTHS))
        rb = run_two_qubit_rb(channel, shots=rb_shots, seed=seed + i, rotations=rotations)
        true_e.append(rep.total_error)
        true_se.append(rep.stderr)
        rb_e.append(rb.epsilon)
        rb_se.append(rb.epsilon_err)
    return NoiseScaleScan(*(frozen_array(v) for v in (scales, true_e, true_se, rb_e, rb_se)))


__all__ = [
    "CLIFFORDS",
    "ImagingParams",
    "ChannelParams",
    "RBFit",
    "RBFitError",
    "RBDecayFitter",
    "RBResult",
    "ShotRecords",
    "fit_rb_decay",
    "run_single_qubit_rb",
    "expected_single_qubit_curves",
    "expected_rb_epsilons",
    "ParametricCZChannel",
    "NoiseEngineCZChannel",
    "run_two_qubit_rb",
    "erasure_bias_experiment",
    "bias_ratio",
    "BiasResult",
    "CountModel",
    "ThresholdSweep",
    "detection_threshold_sweep",
    "NoiseScaleScan",
    "noise_scale_scan",
]
