"""CZ fidelity, exact phase gradients and pulse optimization.

The gate acts diagonally on the computational states, so the three (or
four) block overlaps ``u_k = <k|U|k>`` fully determine it.  Target::

    |00> -> e^{i t0} |00>
    |01> -> e^{i (t0 + t1)} |01>      (and |10>)
    |11> -> -e^{i (t0 + 2 t1)} |11>

The global phase ``t0`` drops out of the fidelity; ``t1`` is maximized
analytically per evaluation.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from joblib import Parallel, delayed
from numpy.polynomial import Chebyshev
from scipy.optimize import minimize
from sklearn.base import BaseEstimator

from rydcz._validation import check_count, check_positive, frozen_array, shot_rng
from rydcz.atom import (
    ChebyshevDetuning,
    GateParams,
    Pulse,
    build_blockade_model,
    dress_with_phases,
    gaussian_edge_envelope,
    piece_exponentials,
    piece_midpoints,
)

OVERLAP_TOL = 1e-6
_THETA_GRID = np.linspace(0.0, 2 * np.pi, 256, endpoint=False)


@dataclass(frozen=True)
class CZOverlaps:
    """Diagonal block overlaps of a two-atom propagator.

    ``u10`` is ``None`` when the |10> block is not simulated separately; it is
    then taken equal to ``u01``.
    """

    u00: complex
    u01: complex
    u11: complex
    u10: complex | None = None

    def __post_init__(self):
        for name in ("u00", "u01", "u11", "u10"):
            v = getattr(self, name)
            if v is None:
                continue
            v = complex(v)
            if not np.isfinite(v) or abs(v) > 1 + OVERLAP_TOL:
                raise ValueError(f"|{name}| = {abs(v):.9g} exceeds 1: propagator is not unitary")
            object.__setattr__(self, name, v)

    @classmethod
    def from_propagators(cls, props):
        if "full" in props:
            u = props["full"]
            return cls(u[0, 0], u[1, 1], u[7, 7], u[6, 6])
        u10 = props["10"][0, 0] if "10" in props else None
        return cls(props["00"][0, 0], props["01"][0, 0], props["11"][0, 0], u10)

    def terms(self):
        """Overlaps and weights for |00>, |01>, |10>, |11> (|10> folded into |01> if absent)."""
        if self.u10 is None:
            return np.array([self.u00, self.u01, self.u11]), np.array([1.0, 2.0, 1.0]), np.array([0, 1, 2])
        return (
            np.array([self.u00, self.u01, self.u10, self.u11]),
            np.ones(4),
            np.array([0, 1, 1, 2]),
        )


def _quadratic_coefficients(u, w, power):
    """S(t1) = a + b z + c z^2 with z = exp(-i t1) and m_11 carrying the CZ sign."""
    sign = np.where(power == 2, -1.0, 1.0)
    wu = w * u * sign
    return np.array([wu[power == p].sum() for p in (0, 1, 2)])


def _maximize_theta(abc):
    a, b, c = abc
    z = np.exp(-1j * _THETA_GRID)
    f = np.abs(a + b * z + c * z * z) ** 2
    t = float(_THETA_GRID[np.argmax(f)])
    for _ in range(8):
        z = np.exp(-1j * t)
        s = a + b * z + c * z * z
        ds = -1j * (b * z + 2 * c * z * z)
        d2s = -(b * z + 4 * c * z * z)
        f1 = 2 * np.real(np.conj(s) * ds)
        f2 = 2 * np.real(np.conj(ds) * ds + np.conj(s) * d2s)
        if f2 >= 0:
            break
        step = f1 / f2
        t -= step
        if abs(step) < 1e-15:
            break
    return math.remainder(t, 2 * np.pi)


def optimal_theta1(overlaps):
    """Single-qubit phase maximizing the CZ fidelity of ``overlaps``."""
    u, w, p = overlaps.terms()
    return _maximize_theta(_quadratic_coefficients(u, w, p))


def _fidelity_terms(u, w, power, theta1):
    z = np.exp(-1j * theta1)
    coef = np.where(power == 2, -(z**2), z**power)
    m = coef * u
    s = np.sum(w * m)
    f = (np.sum(w * np.abs(m) ** 2) + abs(s) ** 2) / 20.0
    return f, m, s, coef


def cz_fidelity(overlaps, theta1=None):
    """Average gate fidelity to CZ, maximized over ``theta1`` unless it is given.

    Parameters
    ----------
    overlaps : CZOverlaps
    theta1 : float, optional
        Fixed single-qubit phase.

    Returns
    -------
    float
        ``(sum_k w_k |m_k|^2 + |sum_k w_k m_k|^2) / 20``, clipped to [0, 1].
    """
    u, w, p = overlaps.terms()
    if theta1 is None:
        theta1 = _maximize_theta(_quadratic_coefficients(u, w, p))
    f = _fidelity_terms(u, w, p, theta1)[0]
    return float(min(max(f, 0.0), 1.0))


class GrapeProblem:
    """Cached piece exponentials for one model and amplitude profile.

    Calling :meth:`evaluate` with a phase vector returns the fidelity, its
    exact gradient with respect to every piece phase and the optimal
    ``theta1``, in one forward and one backward sweep.
    """

    def __init__(self, model, amplitudes, dt):
        amplitudes = np.asarray(amplitudes, dtype=float)
        self.model = model
        self.n_pieces = amplitudes.size
        dims = {b.dim for b in model.blocks}
        if len(dims) != 1:
            raise ValueError("all blocks must share one dimension")
        self.exps = np.stack([piece_exponentials(b, amplitudes, dt) for b in model.blocks])
        self.excitation = np.stack([b.excitation for b in model.blocks])
        if model.perfect_blockade:
            labels = [b.label for b in model.blocks]
            self._init = np.zeros((len(labels), 1), dtype=int)
            self._entries = {lab: (i, 0) for i, lab in enumerate(labels)}
        else:
            init = model.blocks[0].initial
            order = ("00", "01", "10", "11")
            self._init = np.array([[init[k] for k in order]])
            self._entries = {k: (0, j) for j, k in enumerate(order)}
        u10 = "10" in self._entries
        self._order = ("00", "01", "10", "11") if u10 else ("00", "01", "11")
        self._weights = np.ones(4) if u10 else np.array([1.0, 2.0, 1.0])
        self._power = np.array([0, 1, 1, 2]) if u10 else np.array([0, 1, 2])

    @classmethod
    def from_pulse(cls, model, pulse):
        return cls(model, pulse.amplitudes, pulse.dt)

    def _sweep(self, phases, backward):
        nb, n, d, _ = self.exps.shape
        k = self._init.shape[1]
        u_pieces = dress_with_phases(self.exps, phases[None, :], self.excitation[:, None, :])
        psi = np.zeros((nb, n + 1, d, k), dtype=complex)
        rows = np.arange(nb)[:, None]
        cols = np.arange(k)[None, :]
        psi[rows, 0, self._init, cols] = 1.0
        for i in range(n):
            psi[:, i + 1] = u_pieces[:, i] @ psi[:, i]
        final = psi[:, n]
        u = final[rows, self._init, cols]
        if not backward:
            return u, None
        lam = np.zeros((nb, n + 1, k, d), dtype=complex)
        lam[rows, n, cols, self._init] = 1.0
        for i in range(n, 0, -1):
            lam[:, i - 1] = lam[:, i] @ u_pieces[:, i - 1]
        g = np.einsum("bnki,bi,bnik->bnk", lam, self.excitation, psi)
        du = 1j * (g[:, 1:] - g[:, :-1])
        return u, du

    def _flatten(self, arr):
        return np.array([arr[self._entries[k]] for k in self._order])

    def overlaps(self, phases):
        u, _ = self._sweep(np.asarray(phases, dtype=float), backward=False)
        vals = {k: u[self._entries[k]] for k in self._order}
        return CZOverlaps(vals["00"], vals["01"], vals["11"], vals.get("10"))

    def evaluate(self, phases, theta1=None):
        """Return ``(F, dF/dphi, theta1)`` for the piece phases."""
        phases = np.asarray(phases, dtype=float)
        u_blocks, du_blocks = self._sweep(phases, backward=True)
        u = self._flatten(u_blocks)
        du = np.stack([du_blocks[self._entries[k][0], :, self._entries[k][1]] for k in self._order])
        w, p = self._weights, self._power
        if theta1 is None:
            theta1 = _maximize_theta(_quadratic_coefficients(u, w, p))
        f, m, s, coef = _fidelity_terms(u, w, p, theta1)
        # d|m|^2 = 2 Re(conj(m) coef du); d|S|^2 = 2 Re(conj(S) w coef du)
        weight = w * np.conj(m) * coef + np.conj(s) * w * coef
        grad = 2.0 * np.real(weight @ du) / 20.0
        return float(f), grad, float(theta1)


def fidelity_gradient(pulse, model):
    """Exact dF/dphi_n for every piece of ``pulse``."""
    return GrapeProblem.from_pulse(model, pulse).evaluate(pulse.phases)[1]


def gate_overlaps(pulse, model):
    return GrapeProblem.from_pulse(model, pulse).overlaps(pulse.phases)


def gate_infidelity(pulse, model):
    return 1.0 - cz_fidelity(gate_overlaps(pulse, model))


@dataclass(frozen=True)
class OptimizerSettings:
    """Optimizer controls.

    ``init='smooth'`` draws random coefficients of a low-order Chebyshev
    phase, optimizes in that basis first and then refines every piece;
    ``init='uniform'`` draws piece phases uniformly from [0, 2 pi) and runs
    the piecewise optimization directly.
    """

    restarts: int = 20
    max_iter: int = 5000
    gtol: float = 1e-9
    init: str = "smooth"
    coarse_order: int = 13
    init_scale: float = 3.0
    n_jobs: int = 1
    target_infidelity: float | None = None

    def __post_init__(self):
        check_count(self.restarts, "restarts")
        check_count(self.max_iter, "max_iter")
        check_positive(self.gtol, "gtol")
        if self.init not in ("smooth", "uniform"):
            raise ValueError(f"init must be 'smooth' or 'uniform', got {self.init!r}")
        check_count(self.coarse_order, "coarse_order", minimum=0)


@dataclass(frozen=True, eq=False)
class OptimizationResult:
    pulse: Pulse
    theta1: float
    infidelity: float
    iterations: int
    converged: bool
    restart: int = 0
    restart_infidelities: np.ndarray = field(default_factory=lambda: frozen_array([]))
    params: GateParams | None = None

    def __post_init__(self):
        if not 0.0 <= self.infidelity <= 1.0:
            raise ValueError("infidelity must lie in [0, 1]")

    def summary(self):
        return {
            "infidelity": self.infidelity,
            "theta1_rad": self.theta1,
            "iterations": self.iterations,
            "converged": self.converged,
            "best_restart": self.restart,
            "restart_infidelities": [float(x) for x in self.restart_infidelities],
            "n_pieces": self.pulse.n_pieces,
            "duration_s": self.pulse.duration,
        }


def _integrated_chebyshev_basis(n_pieces, order):
    """Columns are the antiderivatives of T_0..T_order at piece midpoints on [-1, 1]."""
    x = 2.0 * (np.arange(n_pieces) + 0.5) / n_pieces - 1.0
    basis = np.empty((n_pieces, order + 1))
    for k in range(order + 1):
        basis[:, k] = Chebyshev.basis(k).integ(lbnd=-1)(x)
    return basis


def _lbfgs(fun, x0, max_iter, gtol):
    return minimize(
        fun,
        x0,
        jac=True,
        method="L-BFGS-B",
        options=dict(maxiter=max_iter, gtol=gtol, ftol=1e-16, maxcor=30, maxls=40),
    )


def _single_restart(problem, n_pieces, settings, seed, index):
    rng = shot_rng(seed, index)
    iterations = 0
    if settings.init == "smooth":
        basis = _integrated_chebyshev_basis(n_pieces, settings.coarse_order)
        a0 = rng.normal(scale=settings.init_scale, size=basis.shape[1])

        def coarse(a):
            f, g, _ = problem.evaluate(basis @ a)
            return 1.0 - f, -(basis.T @ g)

        r0 = _lbfgs(coarse, a0, settings.max_iter, settings.gtol)
        iterations += r0.nit
        phi0 = basis @ r0.x
    else:
        phi0 = rng.uniform(0.0, 2 * np.pi, n_pieces)

    def fine(phi):
        f, g, _ = problem.evaluate(phi)
        return 1.0 - f, -g

    r = _lbfgs(fine, phi0, settings.max_iter, settings.gtol)
    iterations += r.nit
    f, g, theta1 = problem.evaluate(r.x)
    converged = bool(r.success) or float(np.max(np.abs(g))) < settings.gtol
    return r.x, min(max(1.0 - f, 0.0), 1.0), theta1, iterations, converged


def optimize(params, n_pieces=100, seed=0, settings=None, model=None):
    """Search piece phases for a CZ gate, keeping the best of several restarts.

    Parameters
    ----------
    params : GateParams
    n_pieces : int
        Number of constant-phase pieces, at least 10.
    seed : int
        Master seed; restart ``i`` uses the stream ``(seed, i)``.
    settings : OptimizerSettings, optional
    model : BlockadeModel, optional
        Defaults to the perfectly blockaded model of ``params``.

    Returns
    -------
    OptimizationResult
    """
    settings = OptimizerSettings() if settings is None else settings
    n_pieces = check_count(n_pieces, "n_pieces", minimum=10)
    return _optimize(params, n_pieces, seed, settings, model)


def _optimize(params, n_pieces, seed, settings, model=None):
    model = build_blockade_model(params) if model is None else model
    amps = gaussian_edge_envelope(
        piece_midpoints(params.duration, n_pieces), params.duration, params.omega, params.sigma
    )
    problem = GrapeProblem(model, amps, params.duration / n_pieces)

    if settings.target_infidelity is None and settings.n_jobs != 1:
        runs = Parallel(n_jobs=settings.n_jobs)(
            delayed(_single_restart)(problem, n_pieces, settings, seed, i) for i in range(settings.restarts)
        )
    else:
        runs = []
        for i in range(settings.restarts):
            runs.append(_single_restart(problem, n_pieces, settings, seed, i))
            if settings.target_infidelity is not None and runs[-1][1] < settings.target_infidelity:
                break

    infidelities = np.array([r[1] for r in runs])
    best = int(np.argmin(infidelities))
    phases, infid, theta1, iterations, converged = runs[best]
    return OptimizationResult(
        pulse=Pulse(phases, amps, params.duration),
        theta1=theta1,
        infidelity=float(infid),
        iterations=int(iterations),
        converged=converged,
        restart=best,
        restart_infidelities=frozen_array(infidelities),
        params=params,
    )


def scan_duration(params, durations, n_pieces=100, seed=0, settings=None, target=1e-5):
    """Optimize at each duration and return ``(results, shortest passing duration or None)``."""
    settings = OptimizerSettings() if settings is None else settings
    results = []
    shortest = None
    for duration in sorted(durations):
        res = optimize(params.with_(duration=duration), n_pieces, seed, settings)
        results.append(res)
        if shortest is None and res.infidelity < target:
            shortest = duration
    return results, shortest


def chebyshev_refit(pulse, n_max, residual_threshold=0.05):
    """Least-squares Chebyshev detuning reproducing the piece phases of ``pulse``.

    The unwrapped phase is fitted with the antiderivatives of T_0..T_n_max
    (plus a constant), weighting each piece by its Rabi amplitude since the
    phase is irrelevant where the drive is off.  The detuning is the exact
    derivative of that fit.

    Parameters
    ----------
    pulse : Pulse
    n_max : int
        Highest Chebyshev order of the detuning.
    residual_threshold : float
        Amplitude-weighted RMS phase residual (rad) above which a
        ``RuntimeWarning`` is issued.

    Returns
    -------
    ChebyshevDetuning
        With ``fit_residual`` set to the weighted RMS residual.
    """
    n_max = check_count(n_max, "n_max", minimum=0)
    t = pulse.times
    phi = np.unwrap(pulse.phases)
    amps = pulse.amplitudes
    if np.max(amps) > 0:
        w = amps / np.max(amps)
    else:
        w = np.ones_like(amps)
    deg = min(n_max + 1, pulse.n_pieces - 1)
    if deg < 1:
        return ChebyshevDetuning([0.0], pulse.duration, fit_residual=0.0)
    fit = Chebyshev.fit(t, phi, deg, domain=[0.0, pulse.duration], w=w)
    resid = float(np.sqrt(np.sum((w * (fit(t) - phi)) ** 2) / np.sum(w**2)))
    coef = np.zeros(n_max + 1)
    d = fit.deriv().coef
    coef[: d.size] = d
    if resid > residual_threshold:
        warnings.warn(
            f"Chebyshev refit residual {resid:.3g} rad exceeds {residual_threshold:g} rad",
            RuntimeWarning,
            stacklevel=2,
        )
    return ChebyshevDetuning(coef, pulse.duration, fit_residual=resid)


def refit_sweep(pulse, orders, model=None, max_iter=2000):
    """Chebyshev refits of ``pulse`` for several truncation orders.

    Without ``model`` this is :func:`chebyshev_refit` at each order.  With a
    model, every refit is polished by fidelity ascent in coefficient space,
    starting from the better of its least-squares fit and the previous
    (lower) order's result padded with zeros, so the infidelity is
    non-increasing along ``sorted(orders)``.

    Returns
    -------
    list of (order, ChebyshevDetuning, infidelity or None)
    """
    orders = sorted(check_count(n, "order", minimum=0) for n in orders)
    out = []
    if model is None:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return [(n, chebyshev_refit(pulse, n), None) for n in orders]
    problem = GrapeProblem.from_pulse(model, pulse)
    half = pulse.duration / 2.0
    previous = None
    for n in orders:
        basis = _integrated_chebyshev_basis(pulse.n_pieces, n) * half

        def objective(c, basis=basis):
            f, g, _ = problem.evaluate(basis @ c)
            return 1.0 - f, -(basis.T @ g)

        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            ls = chebyshev_refit(pulse, n)
        starts = [np.array(ls.coefficients)]
        if previous is not None:
            pad = np.zeros(n + 1)
            pad[: previous.size] = previous
            starts.append(pad)
        start = min(starts, key=lambda c: objective(c)[0])
        # work in phase units so the quasi-Newton scaling is O(1)
        scale = half
        r = minimize(
            lambda a: tuple(v * s for v, s in zip(objective(a / scale), (1.0, 1.0 / scale))),
            start * scale,
            jac=True,
            method="L-BFGS-B",
            options=dict(maxiter=max_iter, gtol=1e-12, ftol=1e-16),
        )
        coef = r.x / scale
        if objective(coef)[0] > objective(start)[0]:
            coef = start
        infid = min(max(objective(coef)[0], 0.0), 1.0)
        previous = coef
        out.append((n, ChebyshevDetuning(coef, pulse.duration, fit_residual=ls.fit_residual), float(infid)))
    return out


@dataclass(frozen=True, eq=False)
class ScanTable:
    index: int
    values: np.ndarray
    fidelities: np.ndarray

    @property
    def best_value(self):
        return float(self.values[int(np.argmax(self.fidelities))])

    @property
    def best_fidelity(self):
        return float(np.max(self.fidelities))


def finetune_scan(detuning, index, span, points, evaluator, n_pieces=100, omega=None, edge_sigma=None):
    """Scan one Chebyshev coefficient and record the evaluated fidelity.

    Parameters
    ----------
    detuning : ChebyshevDetuning
        Nominal profile; it is not modified.
    index : int
        Coefficient to vary.
    span : float
        Full scan width (rad/s) centered on the nominal value.
    points : int
    evaluator : callable
        Maps a :class:`Pulse` to a fidelity.
    n_pieces, omega, edge_sigma
        Discretization and envelope used to turn each profile into a pulse.
    """
    from rydcz.atom import detuning_to_phase

    if omega is None:
        raise ValueError("omega is required to build the pulse envelope")
    points = check_count(points, "points")
    if span < 0:
        raise ValueError("span must be non-negative")
    nominal = float(detuning.coefficients[index])
    if span == 0:
        values = np.array([nominal])
    else:
        values = nominal + np.linspace(-span / 2, span / 2, points)
    fids = np.array(
        [
            evaluator(detuning_to_phase(detuning.with_coefficient(index, v), n_pieces, omega, edge_sigma))
            for v in values
        ]
    )
    return ScanTable(int(index), frozen_array(values), frozen_array(fids))


def make_fidelity_evaluator(params, detuning_offset=0.0, theta1=None):
    """Ideal-gate fidelity of a pulse, optionally with a static laser detuning.

    The offset adds ``detuning_offset`` (rad/s) times the Rydberg excitation
    number to every block Hamiltonian.
    """
    model = build_blockade_model(params)
    if detuning_offset:
        model = replace(
            model,
            blocks=tuple(
                replace(b, static=b.static + np.diag(detuning_offset * b.excitation)) for b in model.blocks
            ),
        )

    def evaluate(pulse):
        return cz_fidelity(gate_overlaps(pulse, model), theta1)

    return evaluate


class CZPulseOptimizer(BaseEstimator):
    """Estimator wrapper around :func:`optimize`.

    Parameters mirror :class:`GateParams` and :class:`OptimizerSettings`.
    ``fit`` ignores its arguments; after fitting, ``pulse_``, ``theta1_``,
    ``infidelity_`` and ``result_`` are available.
    """

    def __init__(
        self,
        omega=2 * np.pi * 1.6e6,
        delta_r=2 * np.pi * 9.3e6,
        duration_omega=9.3,
        delta_m=0.0,
        edge_sigma=None,
        n_pieces=100,
        restarts=20,
        max_iter=5000,
        gtol=1e-9,
        init="smooth",
        coarse_order=13,
        n_jobs=1,
        random_state=0,
    ):
        self.omega = omega
        self.delta_r = delta_r
        self.duration_omega = duration_omega
        self.delta_m = delta_m
        self.edge_sigma = edge_sigma
        self.n_pieces = n_pieces
        self.restarts = restarts
        self.max_iter = max_iter
        self.gtol = gtol
        self.init = init
        self.coarse_order = coarse_order
        self.n_jobs = n_jobs
        self.random_state = random_state

    def _gate_params(self):
        return GateParams(
            omega=self.omega,
            delta_r=self.delta_r,
            duration=self.duration_omega / self.omega,
            delta_m=self.delta_m,
            edge_sigma=self.edge_sigma,
        )

    def fit(self, X=None, y=None):
        settings = OptimizerSettings(
            restarts=self.restarts,
            max_iter=self.max_iter,
            gtol=self.gtol,
            init=self.init,
            coarse_order=self.coarse_order,
            n_jobs=self.n_jobs,
        )
        seed = 0 if self.random_state is None else int(self.random_state)
        self.result_ = optimize(self._gate_params(), self.n_pieces, seed, settings)
        self.pulse_ = self.result_.pulse
        self.theta1_ = self.result_.theta1
        self.infidelity_ = self.result_.infidelity
        return self

    def score(self, X=None, y=None):
        """Ideal CZ fidelity of the fitted pulse."""
        return 1.0 - self.infidelity_

    def transform(self, n_max=13):
        """Chebyshev refit of the fitted pulse."""
        return chebyshev_refit(self.pulse_, n_max)
