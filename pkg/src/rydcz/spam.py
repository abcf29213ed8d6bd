"""Bell-state analysis, readout-error correction and metastable lifetime fits.

Two-qubit states use the basis order |00>, |01>, |10>, |11>, with |0> the
bright state.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm
from sklearn.base import BaseEstimator

from rydcz._validation import check_count, check_nonnegative, check_positive, check_probability, make_rng

_SX = np.array([[0, 1], [1, 0]], dtype=complex)
_SZ = np.diag([1.0, -1.0]).astype(complex)
_I2 = np.eye(2, dtype=complex)
_XX = np.kron(_SX, _I2) + np.kron(_I2, _SX)
_ZZ = np.kron(_SZ, _I2) + np.kron(_I2, _SZ)
_ANALYSIS = expm(-1j * np.pi / 4 * _XX)


class DatasetError(ValueError):
    """A dataset file could not be parsed; the message names the line."""


# ----------------------------------------------------------------------------- observables


def readout_povm(p_tp=1.0, p_fp=0.0):
    """Both-bright POVM element for independent single-atom readout.

    Each atom reads bright with probability ``p_tp`` from |0> and ``p_fp``
    from |1>, so the element is ``(p_tp |0><0| + p_fp |1><1|)`` on each atom.
    """
    check_probability(p_tp, "p_tp")
    check_probability(p_fp, "p_fp")
    single = np.diag([p_tp, p_fp]).astype(complex)
    return np.kron(single, single)


def effective_observable(theta, p_tp=1.0, p_fp=0.0):
    """Both-bright observable seen through the parity-analysis rotation.

    ``O_theta = exp(i theta Z/2) exp(i pi X/4) O_bb exp(-i pi X/4) exp(-i theta Z/2)``
    with ``X`` and ``Z`` summed over both atoms.

    Parameters
    ----------
    theta : float
        Analysis phase (rad).
    p_tp, p_fp : float
        Single-atom true- and false-positive bright probabilities.

    Returns
    -------
    ndarray, shape (4, 4)
    """
    phase = np.diag(np.exp(-1j * theta / 2 * np.diag(_ZZ).real))
    u = _ANALYSIS @ phase
    return u.conj().T @ readout_povm(p_tp, p_fp) @ u


def bright_probability(rho, theta, p_tp=1.0, p_fp=0.0):
    """Probability that both atoms read bright after the analysis rotation."""
    return float(np.real(np.trace(np.asarray(rho) @ effective_observable(theta, p_tp, p_fp))))


def bell_state(phase=np.pi / 2):
    """Density matrix of ``(|00> + e^{i phase} |11>) / sqrt(2)``."""
    psi = np.array([1, 0, 0, np.exp(1j * phase)]) / math.sqrt(2)
    return np.outer(psi, psi.conj())


def readout_populations(populations, p_tp, p_fp):
    """Measured (P00, P11) for true basis populations (P00, P01, P10, P11)."""
    p00, p01, p10, p11 = np.asarray(populations, dtype=float)
    m00 = p00 * p_tp**2 + (p01 + p10) * p_tp * p_fp + p11 * p_fp**2
    m11 = p11 * p_tp**2 + (p01 + p10) * p_tp * p_fp + p00 * p_fp**2
    return m00, m11


def diagonal_from_measured(m00, m11, p_tp, p_fp):
    """True ``P00 + P11`` from measured values, for states with ``P00 + P11 + P01 + P10 = 1``."""
    _check_rates(p_tp, p_fp)
    return (m00 + m11 - 2 * p_tp * p_fp) / (p_tp - p_fp) ** 2


def _check_rates(p_tp, p_fp):
    check_probability(p_tp, "p_tp")
    check_probability(p_fp, "p_fp")
    if p_tp <= p_fp:
        raise ValueError("p_tp must exceed p_fp")


# ----------------------------------------------------------------------------- parity fit


@dataclass(frozen=True)
class ParityFit:
    amplitude: float
    amplitude_err: float
    phase: float
    phase_err: float
    offset: float
    offset_err: float
    degenerate: bool = False

    @property
    def coherence(self):
        """P_c = 4 A, or 0 when the amplitude is consistent with zero."""
        return 0.0 if self.degenerate else 4 * self.amplitude

    @property
    def coherence_err(self):
        return 4 * self.amplitude_err

    def predict(self, theta):
        return self.amplitude * np.cos(2 * np.asarray(theta) + self.phase) + self.offset


def _parity_linear(theta, y, w):
    design = np.column_stack([np.cos(2 * theta), -np.sin(2 * theta), np.ones_like(theta)])
    aw = design * w[:, None]
    cov = np.linalg.inv(aw.T @ aw)
    coef = cov @ (aw.T @ (y * w))
    return coef, cov


def parity_fit(theta, signal, stderr=None, n_bootstrap=0, seed=0):
    """Fit ``A cos(2 theta + theta0) + B`` to a parity oscillation.

    The model is linear in ``(A cos theta0, A sin theta0, B)``, so the
    weighted least-squares solution is exact; ``A >= 0`` with the sign
    carried by ``theta0``.  Uncertainties follow by first-order propagation,
    or from a parametric bootstrap when ``n_bootstrap > 0``.

    Parameters
    ----------
    theta, signal : array_like
        Analysis phases (rad) and both-bright probabilities.
    stderr : array_like, optional
        Standard errors; unit weights (errors scaled by the residual) otherwise.

    Returns
    -------
    ParityFit
        ``degenerate`` is set when ``A`` is within 2 sigma of zero.

    Raises
    ------
    ValueError
        Fewer than five points, or ``2 theta`` values leaving a gap wider than pi.
    """
    theta = np.asarray(theta, dtype=float).ravel()
    y = np.asarray(signal, dtype=float).ravel()
    if theta.size != y.size:
        raise ValueError("theta and signal differ in length")
    if theta.size < 5:
        raise ValueError("at least five phase points are required")
    angles = np.sort(np.mod(2 * theta, 2 * np.pi))
    gaps = np.diff(np.append(angles, angles[0] + 2 * np.pi))
    if gaps.max() > np.pi + 1e-9:
        raise ValueError("phase points must span a full period of 2 theta")
    if stderr is None:
        w = np.ones_like(y)
    else:
        w = 1.0 / np.maximum(np.asarray(stderr, dtype=float).ravel(), 1e-12)
    coef, cov = _parity_linear(theta, y, w)
    if stderr is None:
        dof = max(y.size - 3, 1)
        design = np.column_stack([np.cos(2 * theta), -np.sin(2 * theta), np.ones_like(theta)])
        cov = cov * float(np.sum((y - design @ coef) ** 2) / dof)
    c, s, b = coef
    amp = math.hypot(c, s)
    phase = math.atan2(s, c)
    if n_bootstrap:
        rng = make_rng(seed)
        sig = 1.0 / w if stderr is not None else np.full_like(y, math.sqrt(cov[2, 2] * y.size))
        model = c * np.cos(2 * theta) - s * np.sin(2 * theta) + b
        draws = []
        for _ in range(check_count(n_bootstrap, "n_bootstrap")):
            cb, _ = _parity_linear(theta, model + rng.normal(0.0, sig), w)
            draws.append((math.hypot(cb[0], cb[1]), math.atan2(cb[1], cb[0]), cb[2]))
        draws = np.array(draws)
        amp_err = float(draws[:, 0].std(ddof=1))
        phase_err = float(np.angle(np.exp(1j * (draws[:, 1] - phase))).std(ddof=1))
        off_err = float(draws[:, 2].std(ddof=1))
    else:
        if amp > 0:
            grad_a = np.array([c, s]) / amp
            grad_p = np.array([-s, c]) / amp**2
            amp_err = math.sqrt(grad_a @ cov[:2, :2] @ grad_a)
            phase_err = math.sqrt(grad_p @ cov[:2, :2] @ grad_p)
        else:
            amp_err = math.sqrt(0.5 * (cov[0, 0] + cov[1, 1]))
            phase_err = math.pi
        off_err = math.sqrt(cov[2, 2])
    return ParityFit(amp, amp_err, phase, phase_err, float(b), off_err, bool(amp <= 2 * amp_err))


class ParityFitter(BaseEstimator):
    """Estimator form of :func:`parity_fit`; ``X`` holds the phases."""

    def __init__(self, n_bootstrap=0, random_state=0):
        self.n_bootstrap = n_bootstrap
        self.random_state = random_state

    def fit(self, X, y, stderr=None):
        self.fit_ = parity_fit(np.asarray(X).ravel(), y, stderr, self.n_bootstrap, self.random_state)
        self.amplitude_ = self.fit_.amplitude
        self.phase_ = self.fit_.phase
        self.offset_ = self.fit_.offset
        self.coherence_ = self.fit_.coherence
        return self

    def predict(self, X):
        return self.fit_.predict(np.asarray(X).ravel())


# ----------------------------------------------------------------------------- Bell fidelity


@dataclass(frozen=True, eq=False)
class BellMeasurement:
    """Raw Bell-state data.

    Either ``parity_data`` (rows of theta, signal, stderr) or a directly
    supplied ``coherence`` must be given.
    """

    P00_raw: float
    P11_raw: float
    P_nl: float
    parity_data: np.ndarray | None = None
    coherence: float | None = None
    P00_err: float = 0.0
    P11_err: float = 0.0
    coherence_err: float = 0.0
    P_nl_err: float = 0.0
    p_TP: float = 1.0
    p_FP: float = 0.0

    def __post_init__(self):
        for name in ("P00_raw", "P11_raw", "P_nl", "p_TP", "p_FP"):
            check_probability(getattr(self, name), name)
        for name in ("P00_err", "P11_err", "coherence_err", "P_nl_err"):
            check_nonnegative(getattr(self, name), name)
        if self.p_TP < self.p_FP:
            raise ValueError("p_TP must be at least p_FP")
        if (self.parity_data is None) == (self.coherence is None):
            raise ValueError("give exactly one of parity_data and coherence")
        if self.parity_data is not None:
            data = np.asarray(self.parity_data, dtype=float)
            if data.ndim != 2 or data.shape[1] not in (2, 3):
                raise ValueError("parity_data rows must be (theta, signal[, stderr])")
            object.__setattr__(self, "parity_data", data)


@dataclass(frozen=True)
class BellFidelity:
    fidelity: float
    fidelity_err: float
    corrected: float
    corrected_err: float
    coherence: float
    coherence_err: float
    flagged: bool

    def summary(self):
        return {
            "F_B": self.fidelity,
            "F_B_err": self.fidelity_err,
            "F_B_corrected": self.corrected,
            "F_B_corrected_err": self.corrected_err,
            "P_c": self.coherence,
            "P_c_err": self.coherence_err,
            "corrected_above_one": self.flagged,
        }


def bell_fidelity(meas):
    """``F_B = (P00 + P11 + P_c) / 2`` and the loss-corrected ``F_B / P_nl``.

    Uncertainties are propagated to first order; ``flagged`` marks a
    corrected value above one.
    """
    if meas.P_nl <= 0:
        raise ValueError("P_nl must be positive")
    if meas.coherence is None:
        data = meas.parity_data
        fit = parity_fit(data[:, 0], data[:, 1], data[:, 2] if data.shape[1] == 3 else None)
        pc, pc_err = fit.coherence, fit.coherence_err
    else:
        pc, pc_err = float(meas.coherence), float(meas.coherence_err)
    f = 0.5 * (meas.P00_raw + meas.P11_raw + pc)
    f_err = 0.5 * math.sqrt(meas.P00_err**2 + meas.P11_err**2 + pc_err**2)
    fc = f / meas.P_nl
    fc_err = abs(fc) * math.hypot(f_err / f if f else 0.0, meas.P_nl_err / meas.P_nl)
    return BellFidelity(f, f_err, fc, fc_err, pc, pc_err, bool(fc > 1))


# ----------------------------------------------------------------------------- readout bound


@dataclass(frozen=True)
class SpamBound:
    measured: float
    exact: float
    bound: float
    expansion: float
    measured_is_lower_bound: bool


def spam_lower_bound(f_measured, p_tp, p_fp):
    """Correct a measured Bell fidelity for readout errors.

    Returns the exact inverse ``(F - p_tp p_fp) / (p_tp - p_fp)^2``, the
    ``p_tp = 1`` bound ``(F - p_fp) / (1 - p_fp)^2``, its second-order
    expansion and whether the measured value sits below the exact one.
    """
    check_probability(f_measured, "f_measured")
    _check_rates(p_tp, p_fp)
    exact = (f_measured - p_tp * p_fp) / (p_tp - p_fp) ** 2
    bound = (f_measured - p_fp) / (1 - p_fp) ** 2
    expansion = f_measured + (2 * f_measured - 1) * p_fp + (3 * f_measured - 2) * p_fp**2
    return SpamBound(float(f_measured), float(exact), float(bound), float(expansion), bool(exact >= f_measured))


# ----------------------------------------------------------------------------- lifetime


@dataclass(frozen=True, eq=False)
class LifetimeFit:
    coefficients: np.ndarray
    errors: np.ndarray
    covariance: np.ndarray
    flagged: bool

    @property
    def gamma0(self):
        return float(self.coefficients[0])

    @property
    def alpha(self):
        return float(self.coefficients[1])

    @property
    def beta(self):
        return float(self.coefficients[2])

    def predict(self, power, return_band=False):
        """Decay rate at ``power`` (mW); optionally with its 1 sigma band."""
        p = np.asarray(power, dtype=float)
        design = np.stack([np.ones_like(p), p, p**2], axis=-1)
        rate = design @ self.coefficients
        if not return_band:
            return rate
        band = np.sqrt(np.einsum("...i,ij,...j->...", design, self.covariance, design))
        return rate, band

    def summary(self):
        names = ("gamma0", "alpha", "beta")
        out = {n: float(v) for n, v in zip(names, self.coefficients)}
        out.update({f"{n}_err": float(e) for n, e in zip(names, self.errors)})
        out["negative_coefficient"] = self.flagged
        return out


def fit_lifetime(power, rate, stderr=None):
    """Weighted least-squares fit of ``Gamma_m = Gamma_0 + alpha P + beta P^2``.

    Parameters
    ----------
    power : array_like
        Trap powers (mW), non-negative.
    rate : array_like
        Decay rates (1/s), positive.
    stderr : array_like, optional
        Standard errors; without them the covariance is scaled by the
        residual variance.

    Raises
    ------
    ValueError
        Fewer than three distinct powers.
    """
    p = np.asarray(power, dtype=float).ravel()
    g = np.asarray(rate, dtype=float).ravel()
    if p.size != g.size:
        raise ValueError("power and rate differ in length")
    if np.any(p < 0):
        raise ValueError("powers must be non-negative")
    if np.any(g <= 0):
        raise ValueError("rates must be positive")
    if np.unique(p).size < 3:
        raise ValueError("at least three distinct powers are needed for a quadratic fit")
    w = np.ones_like(g) if stderr is None else 1.0 / np.maximum(np.asarray(stderr, dtype=float).ravel(), 1e-300)
    design = np.column_stack([np.ones_like(p), p, p**2])
    aw = design * w[:, None]
    cov = np.linalg.inv(aw.T @ aw)
    coef = cov @ (aw.T @ (g * w))
    if stderr is None:
        dof = p.size - 3
        resid = g - design @ coef
        cov = cov * (float(resid @ resid) / dof if dof > 0 else 0.0)
    return LifetimeFit(coef, np.sqrt(np.diag(cov)), cov, bool(np.any(coef < 0)))


class LifetimeFitter(BaseEstimator):
    """Estimator form of :func:`fit_lifetime`; ``X`` holds the trap powers."""

    def fit(self, X, y, stderr=None):
        self.fit_ = fit_lifetime(np.asarray(X).ravel(), y, stderr)
        self.coef_ = self.fit_.coefficients
        self.coef_err_ = self.fit_.errors
        return self

    def predict(self, X):
        return self.fit_.predict(np.asarray(X).ravel())


@dataclass(frozen=True, eq=False)
class SurvivalPrediction:
    metastable: np.ndarray
    p0_from_0: np.ndarray
    p0_from_1: np.ndarray


def survival_model(t, gamma_m, t1_spin):
    """Metastable survival and |0> populations for initial |0> and |1>.

    The spin polarization inside the surviving manifold relaxes as
    ``exp(-t / t1_spin)``.
    """
    check_positive(gamma_m, "gamma_m")
    check_positive(t1_spin, "t1_spin", allow_inf=True)
    t = np.asarray(t, dtype=float)
    survive = np.exp(-gamma_m * t)
    pol = np.exp(-t / t1_spin)
    return SurvivalPrediction(survive, survive * 0.5 * (1 + pol), survive * 0.5 * (1 - pol))


# ----------------------------------------------------------------------------- datasets


def _rows(path, header):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        rows = []
        for lineno, row in enumerate(reader, start=1):
            if not row or row[0].lstrip().startswith("#"):
                continue
            if [c.strip() for c in row] == list(header):
                continue
            rows.append((lineno, [c.strip() for c in row]))
    return rows


def _float(cell, path, lineno, name):
    try:
        return float(cell)
    except ValueError:
        raise DatasetError(f"{path}:{lineno}: cannot parse {name} {cell!r}") from None


LIFETIME_HEADER = ("power_mw", "rate_per_s", "stderr")
BELL_HEADER = ("quantity", "theta_rad", "value", "stderr")
_BELL_SCALARS = ("P00", "P11", "P_nl", "P_c", "p_TP", "p_FP")


def read_lifetime_table(path):
    """Read ``power_mw,rate_per_s,stderr`` rows; returns three arrays."""
    out = []
    for lineno, row in _rows(path, LIFETIME_HEADER):
        if len(row) != 3:
            raise DatasetError(f"{path}:{lineno}: expected 3 columns, got {len(row)}")
        vals = [_float(c, path, lineno, n) for c, n in zip(row, LIFETIME_HEADER)]
        if vals[0] < 0 or vals[1] <= 0 or vals[2] < 0:
            raise DatasetError(f"{path}:{lineno}: power must be >= 0, rate > 0, stderr >= 0")
        out.append(vals)
    if not out:
        raise DatasetError(f"{path}: no data rows")
    return tuple(np.array(c) for c in zip(*out))


def read_bell_table(path):
    """Read a Bell dataset into a :class:`BellMeasurement`.

    Rows are ``quantity,theta_rad,value,stderr``; ``quantity`` is one of
    P00, P11, P_nl, P_c, p_TP, p_FP (theta left empty) or ``parity``.
    """
    scalars, parity = {}, []
    for lineno, row in _rows(path, BELL_HEADER):
        if len(row) != 4:
            raise DatasetError(f"{path}:{lineno}: expected 4 columns, got {len(row)}")
        kind = row[0]
        value = _float(row[2], path, lineno, "value")
        err = _float(row[3], path, lineno, "stderr") if row[3] else 0.0
        if kind == "parity":
            parity.append((_float(row[1], path, lineno, "theta_rad"), value, err))
        elif kind in _BELL_SCALARS:
            if kind in scalars:
                raise DatasetError(f"{path}:{lineno}: duplicate {kind}")
            scalars[kind] = (value, err)
        else:
            raise DatasetError(f"{path}:{lineno}: unknown quantity {kind!r}")
    for need in ("P00", "P11", "P_nl"):
        if need not in scalars:
            raise DatasetError(f"{path}: missing {need}")
    kw = dict(
        P00_raw=scalars["P00"][0],
        P00_err=scalars["P00"][1],
        P11_raw=scalars["P11"][0],
        P11_err=scalars["P11"][1],
        P_nl=scalars["P_nl"][0],
        P_nl_err=scalars["P_nl"][1],
        p_TP=scalars.get("p_TP", (1.0, 0.0))[0],
        p_FP=scalars.get("p_FP", (0.0, 0.0))[0],
    )
    if parity:
        data = np.array(parity)
        if np.all(data[:, 2] == 0):
            data = data[:, :2]
        kw["parity_data"] = data
    elif "P_c" in scalars:
        kw["coherence"], kw["coherence_err"] = scalars["P_c"]
    else:
        raise DatasetError(f"{path}: need parity rows or a P_c row")
    try:
        return BellMeasurement(**kw)
    except ValueError as exc:
        raise DatasetError(f"{path}: {exc}") from None


__all__ = [
    "DatasetError",
    "readout_povm",
    "effective_observable",
    "bright_probability",
    "bell_state",
    "readout_populations",
    "diagonal_from_measured",
    "ParityFit",
    "parity_fit",
    "ParityFitter",
    "BellMeasurement",
    "BellFidelity",
    "bell_fidelity",
    "SpamBound",
    "spam_lower_bound",
    "LifetimeFit",
    "fit_lifetime",
    "LifetimeFitter",
    "SurvivalPrediction",
    "survival_model",
    "read_lifetime_table",
    "read_bell_table",
]
