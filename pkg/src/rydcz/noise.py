"""Monte Carlo trajectory noise model for the blockaded CZ gate.

Each shot draws quasi-static Doppler detunings (one per atom), a laser
phase-noise trace, a static intensity multiplier and uniform variates for
the quantum jump.  The coherent part is evolved with the non-Hermitian
Hamiltonian ``H - i gamma/2 n_ryd``; the squared norm of that state is the
no-jump probability.  A sampled jump ends the trajectory and is routed
through the decay branching table.

Per-shot gate fidelities use the unnormalized no-jump overlaps directly, so
their shot average is the fidelity of the trajectory-averaged channel with
jumped trajectories counted as failures.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.linalg import expm

from rydcz._validation import (
    as_float_array,
    check_count,
    check_nonnegative,
    check_positive,
    check_probability,
    frozen_array,
    shot_rng,
)
from rydcz.atom import Level, build_blockade_model, dress_with_phases
from rydcz.grape import gate_overlaps, optimal_theta1

SOURCES = ("rydberg_decay", "doppler", "phase_noise", "intensity_noise", "envelope_distortion")
OUTCOMES = ("detectable", "returned", "lost")
PRE_REPUMP = ("3P0", "1S0", "3P2", "unaccounted")
_CHUNK = 250


@dataclass(frozen=True)
class Branching:
    """Where a Rydberg decay ends up, before and after repumping 3P2.

    The 3P2 share is redistributed by the repump into 1S0 and 3P0 so that
    the post-repump fractions are reproduced; whatever is left of it, and
    the unaccounted share, is lost.
    """

    to_3p0: float = 0.10
    to_1s0: float = 0.25
    to_3p2: float = 0.35
    unaccounted: float = 0.30
    post_1s0: float = 0.51
    post_3p0: float = 0.19

    def __post_init__(self):
        pre = (self.to_3p0, self.to_1s0, self.to_3p2, self.unaccounted)
        for name, v in zip(("to_3p0", "to_1s0", "to_3p2", "unaccounted", "post_1s0", "post_3p0"), pre + (self.post_1s0, self.post_3p0)):
            check_probability(v, name)
        if abs(sum(pre) - 1.0) > 1e-6:
            raise ValueError(f"pre-repump branching fractions sum to {sum(pre):.9g}, expected 1")
        gain_1s0 = self.post_1s0 - self.to_1s0
        gain_3p0 = self.post_3p0 - self.to_3p0
        if gain_1s0 < -1e-9 or gain_3p0 < -1e-9 or gain_1s0 + gain_3p0 > self.to_3p2 + 1e-9:
            raise ValueError("post-repump fractions cannot be reached by repumping the 3P2 share")

    @property
    def pre_repump(self):
        return np.array([self.to_3p0, self.to_1s0, self.to_3p2, self.unaccounted])

    @property
    def repump(self):
        """Probabilities that a 3P2 atom ends in (1S0, 3P0, lost)."""
        if self.to_3p2 == 0:
            return np.array([0.0, 0.0, 1.0])
        a = max(self.post_1s0 - self.to_1s0, 0.0) / self.to_3p2
        b = max(self.post_3p0 - self.to_3p0, 0.0) / self.to_3p2
        return np.array([a, b, max(1.0 - a - b, 0.0)])

    @property
    def outcome_fractions(self):
        """Final (detectable, returned, lost) shares of one decay."""
        lost = max(1.0 - self.post_1s0 - self.post_3p0, 0.0)
        return np.array([self.post_1s0, self.post_3p0, lost])

    @classmethod
    def all_detectable(cls):
        return cls(to_3p0=0.0, to_1s0=1.0, to_3p2=0.0, unaccounted=0.0, post_1s0=1.0, post_3p0=0.0)


@dataclass(frozen=True, eq=False)
class PhaseNoisePSD:
    """One-sided laser phase-noise spectrum, measured before frequency doubling.

    ``psd`` is in rad^2/Hz at ``frequencies`` (Hz).  Each row is synthesized as
    one cosine carrying the power of a trapezoid-rule bandwidth around it; a
    single-row table is a 1 Hz wide line.
    """

    frequencies: np.ndarray
    psd: np.ndarray
    label: str = ""

    def __post_init__(self):
        f = as_float_array(self.frequencies, "frequencies")
        s = as_float_array(self.psd, "psd")
        if f.shape != s.shape:
            raise ValueError("frequencies and psd must have the same length")
        if f.size and (np.any(np.diff(f) <= 0) or f[0] <= 0):
            raise ValueError("frequencies must be positive and strictly increasing")
        if np.any(s < 0):
            raise ValueError("psd must be non-negative")
        object.__setattr__(self, "frequencies", frozen_array(f))
        object.__setattr__(self, "psd", frozen_array(s))

    @property
    def bandwidths(self):
        f = self.frequencies
        if f.size == 0:
            return np.zeros(0)
        if f.size == 1:
            return np.ones(1)
        bw = np.empty_like(f)
        d = np.diff(f)
        bw[0] = d[0] / 2
        bw[-1] = d[-1] / 2
        bw[1:-1] = (d[:-1] + d[1:]) / 2
        return bw

    @property
    def integrated(self):
        """Total phase variance (rad^2) before frequency doubling."""
        return float(np.sum(self.psd * self.bandwidths))

    def scaled(self, factor):
        return PhaseNoisePSD(self.frequencies, self.psd * factor, self.label)

    @classmethod
    def flat(cls, level_dbc, f_lo=1e4, f_hi=2e6, points=400, label=""):
        f = np.geomspace(f_lo, f_hi, points)
        return cls(f, np.full(points, 10 ** (level_dbc / 10)), label)

    @classmethod
    def placeholder(cls):
        """Illustrative flat spectrum; not a measured laser.

        The level is chosen so the doubled-light phase noise alone costs
        about 2e-3 on the default gate.  Replace it with a measured table
        for any quantitative budget.
        """
        return cls.flat(PLACEHOLDER_PSD_DBC, label="placeholder (not measured)")

    @classmethod
    def empty(cls):
        return cls(np.zeros(0), np.zeros(0), "none")

    @classmethod
    def read(cls, path):
        path = Path(path)
        with path.open() as fh:
            first = fh.readline().strip().replace(" ", "")
        skip = 1 if first == "frequency_hz,psd_rad2_per_hz" else 0
        data = np.loadtxt(path, delimiter=",", comments="#", ndmin=2, skiprows=skip)
        if data.size == 0:
            return cls.empty()
        if data.shape[1] != 2:
            raise ValueError(f"{path}: expected columns frequency_hz,psd_rad2_per_hz")
        return cls(data[:, 0], data[:, 1], str(path))

    def write(self, path):
        np.savetxt(
            path,
            np.column_stack([self.frequencies, self.psd]),
            delimiter=",",
            header="frequency_hz,psd_rad2_per_hz",
            comments="",
            fmt="%.17g",
        )


PLACEHOLDER_PSD_DBC = -97.5


@dataclass(frozen=True)
class EnvelopeDistortion:
    """Rising-edge transient of the complex pulse envelope.

    The drive amplitude is multiplied by ``1 + amplitude * exp(-t/tau)`` and
    the phase picks up ``phase * exp(-t/tau)``.  Defaults are illustrative
    (not measured), sized to cost about 2e-3 on the default gate.
    """

    amplitude: float = 0.02
    phase: float = 0.23
    time_constant: float = 0.4e-6

    def __post_init__(self):
        if not math.isfinite(self.amplitude) or self.amplitude <= -1:
            raise ValueError("amplitude must be finite and > -1")
        if not math.isfinite(self.phase):
            raise ValueError("phase must be finite")
        check_positive(self.time_constant, "time_constant")

    def transient(self, t):
        return np.exp(-np.asarray(t, dtype=float) / self.time_constant)

    def amplitude_factor(self, t):
        return 1.0 + self.amplitude * self.transient(t)

    def phase_offset(self, t):
        return self.phase * self.transient(t)


@dataclass(frozen=True, eq=False)
class NoiseConfig:
    """Stochastic model parameters.

    Parameters
    ----------
    t1_rydberg : float
        Rydberg lifetime (s), shared by all four sublevels; ``inf`` disables decay.
    t2_star : float
        Gaussian 1/e Ramsey time (s) setting the Doppler spread; ``inf`` disables it.
    phase_psd : PhaseNoisePSD
    intensity_rms : float
        Relative rms of the per-shot static Rabi amplitude error.
    envelope_distortion : EnvelopeDistortion or None
    branching : Branching
    shots : int
    seed : int
    harmonic : int
        Frequency multiplication between the PSD reference point and the atoms.
    """

    t1_rydberg: float = 65e-6
    t2_star: float = 5.7e-6
    phase_psd: PhaseNoisePSD = field(default_factory=PhaseNoisePSD.placeholder)
    intensity_rms: float = 0.01
    envelope_distortion: EnvelopeDistortion | None = field(default_factory=EnvelopeDistortion)
    branching: Branching = field(default_factory=Branching)
    shots: int = 4000
    seed: int = 0
    harmonic: int = 2

    def __post_init__(self):
        check_positive(self.t1_rydberg, "t1_rydberg", allow_inf=True)
        check_positive(self.t2_star, "t2_star", allow_inf=True)
        check_nonnegative(self.intensity_rms, "intensity_rms")
        check_count(self.shots, "shots")
        check_count(self.harmonic, "harmonic")
        if int(self.seed) != self.seed:
            raise ValueError("seed must be an integer")

    @property
    def decay_rate(self):
        return 0.0 if math.isinf(self.t1_rydberg) else 1.0 / self.t1_rydberg

    @property
    def doppler_sigma(self):
        return 0.0 if math.isinf(self.t2_star) else math.sqrt(2.0) / self.t2_star

    def with_(self, **changes):
        return replace(self, **changes)


@dataclass(frozen=True, eq=False)
class NoiseSample:
    """One realization of the classical noise plus its jump record.

    ``jump_schedule`` holds ``(initial_state, time_s, level_label, pre_repump,
    outcome)`` for every simulated initial state that jumped.
    """

    static_detuning: np.ndarray
    phase_trace: np.ndarray
    amplitude_trace: np.ndarray
    jump_schedule: tuple = ()

    def __post_init__(self):
        if np.any(np.asarray(self.amplitude_trace) <= 0):
            raise ValueError("amplitude multipliers must be positive")
        if np.shape(self.phase_trace) != np.shape(self.amplitude_trace):
            raise ValueError("phase and amplitude traces must have the same length")


@dataclass(frozen=True, eq=False)
class GateErrorReport:
    """Trajectory-averaged gate performance.

    ``channel_estimate`` maps each initial state to averaged populations:
    ``computational`` (no jump, back in the qubit state), ``rydberg`` (no
    jump, left in a Rydberg level), ``jumped`` (sampled jump fraction) and
    the sampled outcome split of the jumps.
    """

    total_error: float
    stderr: float
    per_source: dict
    leakage: float
    leakage_stderr: float
    leakage_fraction: float
    channel_estimate: dict
    sources: tuple
    shots: int
    theta1: float
    wide_interval: bool = False
    samples: tuple = ()

    def __post_init__(self):
        if not 0.0 <= self.leakage_fraction <= 1.0:
            raise ValueError("leakage_fraction must lie in [0, 1]")
        for k, (err, _) in self.per_source.items():
            if err < 0:
                raise ValueError(f"per-source error for {k} is negative")

    def summary(self):
        return {
            "total_error": self.total_error,
            "stderr": self.stderr,
            "leakage": self.leakage,
            "leakage_stderr": self.leakage_stderr,
            "leakage_fraction": self.leakage_fraction,
            "sources": list(self.sources),
            "shots": self.shots,
            "theta1_rad": self.theta1,
            "wide_interval": self.wide_interval,
            "per_source": {k: {"error": e, "stderr": s} for k, (e, s) in self.per_source.items()},
            "channel_estimate": self.channel_estimate,
        }


def sample_doppler(config, rng, size=2):
    """Static detuning (rad/s) for each atom, Gaussian with sigma = sqrt(2)/T2*."""
    sigma = config.doppler_sigma
    draws = rng.normal(size=size)
    return sigma * draws


def synthesize_phase_trace(psd, duration, n_pieces, rng, harmonic=2, times=None):
    """Sum-of-cosines phase trace at the piece midpoints.

    Component ``i`` has amplitude ``sqrt(2 S_i df_i)`` and a uniform random
    phase, then the whole trace is multiplied by ``harmonic`` (power grows by
    ``harmonic**2``).
    """
    n_pieces = check_count(n_pieces, "n_pieces")
    t = (np.arange(n_pieces) + 0.5) * (duration / n_pieces) if times is None else np.asarray(times)
    if psd.frequencies.size == 0:
        return np.zeros(t.shape)
    offsets = rng.uniform(0.0, 2 * np.pi, psd.frequencies.size)
    amp = np.sqrt(2.0 * psd.psd * psd.bandwidths)
    return harmonic * (amp @ np.cos(2 * np.pi * psd.frequencies[:, None] * t[None, :] + offsets[:, None]))


def _normalize_sources(sources):
    if sources is None:
        return SOURCES
    sources = tuple(sources)
    unknown = set(sources) - set(SOURCES)
    if unknown:
        raise ValueError(f"unknown noise sources: {sorted(unknown)}")
    return tuple(s for s in SOURCES if s in sources)


def _noise_model(model):
    if not model.perfect_blockade:
        raise NotImplementedError("trajectory simulation supports the blockaded model only")
    if "10" in model.labels:
        return model
    return build_blockade_model(model.params, include_swapped=True)


class _ShotDraws:
    """Per-shot variates, drawn in a fixed order.

    An integer key ``i`` takes everything from stream ``(seed, i)``.  A pair
    ``(c, g)`` takes the quasi-static draws (Doppler, intensity) from stream
    ``(seed, c)`` and the per-gate draws (phase noise, jumps) from
    ``(seed, c, g + 1)``, so gates of one sequence share their static noise.
    """

    def __init__(self, config, pulse, keys):
        keys = list(keys)
        n = len(keys)
        self.doppler = np.empty((n, 2))
        self.intensity = np.empty(n)
        self.phase = np.zeros((n, pulse.n_pieces))
        self.jump = np.empty((n, 4))
        self.level = np.empty((n, 4))
        self.branch = np.empty((n, 4))
        self.repump = np.empty((n, 4))
        has_psd = config.phase_psd.frequencies.size > 0
        t = pulse.times
        for j, key in enumerate(keys):
            if isinstance(key, tuple):
                static = shot_rng(config.seed, key[0])
                dynamic = shot_rng(config.seed, key[0], key[1] + 1)
            else:
                static = dynamic = shot_rng(config.seed, key)
            self.doppler[j] = sample_doppler(config, static)
            self.intensity[j] = static.normal()
            if has_psd:
                self.phase[j] = synthesize_phase_trace(
                    config.phase_psd, pulse.duration, pulse.n_pieces, dynamic, config.harmonic, times=t
                )
            self.jump[j] = dynamic.uniform(size=4)
            self.level[j] = dynamic.uniform(size=4)
            self.branch[j] = dynamic.uniform(size=4)
            self.repump[j] = dynamic.uniform(size=4)


def _chunk_exponentials(model, profile, dt, doppler, intensity, decay_rate):
    """exp(-i H dt) for every (block, shot, piece); shots share a result when possible."""
    uniq, inv = np.unique(profile, return_inverse=True)
    out = []
    for block in model.blocks:
        amps = intensity[:, None] * uniq[None, :]
        diag = doppler @ block.atom_excitation.T - 0.5j * decay_rate * block.excitation
        h = (
            block.static[None, None]
            + amps[..., None, None] * block.coupling[None, None]
            + diag[:, None, :, None] * np.eye(block.dim)[None, None]
        )
        s, k = amps.shape
        e = expm(-1j * dt * h.reshape(-1, block.dim, block.dim)).reshape(s, k, block.dim, block.dim)
        out.append(e[:, inv])
    return np.stack(out)


def _run_chunk(model, pulse, config, sources, draws, theta1):
    n = draws.intensity.size
    profile = np.array(pulse.amplitudes)
    if "envelope_distortion" in sources and config.envelope_distortion is not None:
        profile = profile * config.envelope_distortion.amplitude_factor(pulse.times)
    doppler = draws.doppler if "doppler" in sources else np.zeros((n, 2))
    if "intensity_noise" in sources:
        intensity = np.clip(1.0 + config.intensity_rms * draws.intensity, 1e-6, None)
    else:
        intensity = np.ones(n)
    decay = config.decay_rate if "rydberg_decay" in sources else 0.0
    noise_phase = draws.phase if "phase_noise" in sources else np.zeros_like(draws.phase)
    phases = pulse.phases[None, :] + noise_phase
    if "envelope_distortion" in sources and config.envelope_distortion is not None:
        phases = phases + config.envelope_distortion.phase_offset(pulse.times)[None, :]

    if "doppler" in sources or "intensity_noise" in sources:
        exps = _chunk_exponentials(model, profile, pulse.dt, doppler, intensity, decay)
    else:
        exps = _chunk_exponentials(model, profile, pulse.dt, doppler[:1], intensity[:1], decay)
    exc = np.stack([b.excitation for b in model.blocks])
    pieces = dress_with_phases(exps, phases[None], exc[:, None, None, :])
    nb, d = len(model.blocks), model.blocks[0].dim
    pieces = np.broadcast_to(pieces, (nb, n) + pieces.shape[2:])

    psi = np.zeros((nb, n, pulse.n_pieces + 1, d), dtype=complex)
    psi[:, :, 0, 0] = 1.0
    for i in range(pulse.n_pieces):
        psi[:, :, i + 1] = np.einsum("bsij,bsj->bsi", pieces[:, :, i], psi[:, :, i])
    final = psi[:, :, -1]
    u = final[:, :, 0]  # (block, shot) in the order 00, 01, 10, 11
    norms = np.sum(np.abs(psi) ** 2, axis=-1)
    norm_final = norms[:, :, -1]

    z = np.exp(-1j * theta1)
    m = np.stack([u[0], u[1] * z, u[2] * z, -u[3] * z * z])
    fid = (np.sum(np.abs(m) ** 2, axis=0) + np.abs(m.sum(axis=0)) ** 2) / 20.0

    # a jump happens once the no-jump norm drops below the shot's variate
    jumped = draws.jump.T > norm_final if decay > 0 else np.zeros((nb, n), dtype=bool)
    outcome = np.full((nb, n), -1)
    records = [[] for _ in range(n)]
    pre_cum = np.cumsum(config.branching.pre_repump)
    rep_cum = np.cumsum(config.branching.repump)
    for b, s in zip(*np.nonzero(jumped)):
        step = int(np.argmax(norms[b, s] < draws.jump[s, b]))
        w = np.cumsum(np.abs(psi[b, s, step - 1]) ** 2 * exc[b])
        which = min(int(np.searchsorted(w, draws.level[s, b] * w[-1])), d - 1)
        a, c = model.blocks[b].basis[which]
        level = Level(a if a >= Level.R_M3_2 else c)
        dest = PRE_REPUMP[min(int(np.searchsorted(pre_cum, draws.branch[s, b] * pre_cum[-1])), 3)]
        if dest == "1S0":
            res = 0
        elif dest == "3P0":
            res = 1
        elif dest == "3P2":
            res = min(int(np.searchsorted(rep_cum, draws.repump[s, b] * rep_cum[-1])), 2)
        else:
            res = 2
        outcome[b, s] = res
        records[s].append((model.blocks[b].label, (step - 0.5) * pulse.dt, level.label, dest, OUTCOMES[res]))

    return dict(
        u=u,
        fid=fid,
        leak=1.0 - np.abs(u) ** 2,
        comp=np.abs(u) ** 2,
        ryd=norm_final - np.abs(u) ** 2,
        norm=norm_final,
        jumped=jumped,
        outcome=outcome,
        records=records,
        doppler=doppler,
        intensity=intensity,
        noise_phase=noise_phase,
        profile=profile,
    )


def simulate_noisy_gate(pulse, model, config, sources=None, theta1=None, target_stderr=None, return_samples=False):
    """Trajectory-averaged CZ error of ``pulse`` under the enabled noise sources.

    Parameters
    ----------
    pulse : Pulse
    model : BlockadeModel
        Perfect-blockade model; the |10> block is added if absent.
    config : NoiseConfig
    sources : iterable of str, optional
        Subset of ``SOURCES``; all by default.
    theta1 : float, optional
        Single-qubit phase correction.  Defaults to the optimum of the
        noiseless gate, as a calibration would set it.
    target_stderr : float, optional
        Flag the report when the Monte Carlo standard error exceeds this.
    return_samples : bool
        Keep a :class:`NoiseSample` per shot.

    Returns
    -------
    GateErrorReport
    """
    sources = _normalize_sources(sources)
    model = _noise_model(model)
    if theta1 is None:
        theta1 = optimal_theta1(gate_overlaps(pulse, model))

    parts = []
    for start in range(0, config.shots, _CHUNK):
        draws = _ShotDraws(config, pulse, range(start, min(start + _CHUNK, config.shots)))
        parts.append(_run_chunk(model, pulse, config, sources, draws, theta1))

    def cat(key, axis=0):
        return np.concatenate([p[key] for p in parts], axis=axis)

    fid = cat("fid")
    leak = cat("leak", axis=1).mean(axis=0)
    comp, ryd = cat("comp", axis=1), cat("ryd", axis=1)
    jumped, outcome = cat("jumped", axis=1), cat("outcome", axis=1)
    shots = fid.size

    err = float(np.clip(1.0 - fid.mean(), 0.0, 1.0))
    stderr = float(fid.std(ddof=1) / math.sqrt(shots)) if shots > 1 else float("nan")
    leak_mean = float(leak.mean())
    leak_se = float(leak.std(ddof=1) / math.sqrt(shots)) if shots > 1 else float("nan")

    estimate = {}
    for b, block in enumerate(model.blocks):
        j = jumped[b]
        entry = {
            "computational": float(comp[b].mean()),
            "rydberg": float(ryd[b].mean()),
            "jumped": float(j.mean()),
            "jumped_stderr": float(math.sqrt(max(j.mean() * (1 - j.mean()), 0.0) / shots)),
            "no_jump_expected": float(1.0 - (comp[b] + ryd[b]).mean()),
        }
        for k, name in enumerate(OUTCOMES):
            entry[f"jump_{name}"] = float(np.mean(outcome[b] == k))
        estimate[block.label] = entry

    samples = ()
    if return_samples:
        recs = [r for p in parts for r in p["records"]]
        dop, inten, ph = cat("doppler"), cat("intensity"), cat("noise_phase")
        profile = parts[0]["profile"] / np.where(pulse.amplitudes > 0, pulse.amplitudes, 1.0)
        profile = np.where(pulse.amplitudes > 0, profile, 1.0)
        samples = tuple(
            NoiseSample(
                static_detuning=frozen_array(dop[s]),
                phase_trace=frozen_array(ph[s]),
                amplitude_trace=frozen_array(inten[s] * profile),
                jump_schedule=tuple(recs[s]),
            )
            for s in range(shots)
        )

    fraction = float(np.clip(leak_mean / err, 0.0, 1.0)) if err > 0 else 0.0
    wide = bool(target_stderr is not None and not stderr <= target_stderr)
    return GateErrorReport(
        total_error=err,
        stderr=stderr,
        per_source={},
        leakage=leak_mean,
        leakage_stderr=leak_se,
        leakage_fraction=fraction,
        channel_estimate=estimate,
        sources=sources,
        shots=shots,
        theta1=float(theta1),
        wide_interval=wide,
        samples=samples,
    )


def error_budget(pulse, model, config, sources=SOURCES):
    """One single-source row per entry of ``sources`` plus the combined run.

    Returns the combined :class:`GateErrorReport` with ``per_source`` filled
    as ``{source: (error, stderr)}``; the combined row is under ``"combined"``.
    """
    model = _noise_model(model)
    theta1 = optimal_theta1(gate_overlaps(pulse, model))
    rows = {}
    for s in sources:
        r = simulate_noisy_gate(pulse, model, config, (s,), theta1=theta1)
        rows[s] = (r.total_error, r.stderr)
    combined = simulate_noisy_gate(pulse, model, config, sources, theta1=theta1)
    rows["combined"] = (combined.total_error, combined.stderr)
    return replace(combined, per_source=rows)


def leakage_fraction(report):
    """Share of the gate error that leaves the qubit space (jumps plus Rydberg remainder)."""
    return report.leakage_fraction


def detectable_split(report, config):
    """Split the leaked population into detectable, returned and lost parts.

    Returns
    -------
    dict
        ``detectable`` reaches 1S0 and is seen by ground-state imaging,
        ``returned`` lands back in 3P0 as an undetected error, ``lost`` is
        the rest.  The three add up to ``report.leakage``.
    """
    det, ret, lost = config.branching.outcome_fractions
    total = det + ret + lost
    mass = report.leakage
    return {
        "detectable": mass * det / total,
        "returned": mass * ret / total,
        "lost": mass * lost / total,
    }


@dataclass(frozen=True, eq=False)
class GateOverlapSamples:
    """Per-shot no-jump overlaps and excitation bookkeeping for benchmarking.

    ``u`` has shape (shots, 4) in the order |00>, |01>, |10>, |11>; ``norm``
    the corresponding no-jump probabilities (the rest decayed).
    """

    u: np.ndarray
    norm: np.ndarray
    theta1: float


def sample_gate_overlaps(pulse, model, config, sources=None, theta1=None, gates=None):
    """No-jump overlaps for circuit-level simulation.

    Parameters
    ----------
    gates : int, optional
        When given, return ``config.shots`` sequences of ``gates`` gates that
        share their quasi-static noise (Doppler, intensity) within a
        sequence and draw fresh phase noise per gate.  Otherwise every shot
        is independent.

    Returns
    -------
    GateOverlapSamples
        ``u`` and ``norm`` have shape (shots, 4) or (shots, gates, 4).
    """
    sources = _normalize_sources(sources)
    model = _noise_model(model)
    if theta1 is None:
        theta1 = optimal_theta1(gate_overlaps(pulse, model))
    if gates is None:
        keys = list(range(config.shots))
    else:
        gates = check_count(gates, "gates")
        keys = [(c, g) for c in range(config.shots) for g in range(gates)]
    us, norms = [], []
    for start in range(0, len(keys), _CHUNK):
        draws = _ShotDraws(config, pulse, keys[start : start + _CHUNK])
        out = _run_chunk(model, pulse, config, sources, draws, theta1)
        us.append(out["u"].T)
        norms.append(out["norm"].T)
    u = np.concatenate(us)
    norm = np.concatenate(norms)
    if gates is not None:
        u = u.reshape(config.shots, gates, 4)
        norm = norm.reshape(config.shots, gates, 4)
    return GateOverlapSamples(u=frozen_array(u, dtype=complex), norm=frozen_array(norm), theta1=float(theta1))


def scale_noise(config, factor):
    """Scale every noise source so its first-order gate error grows by ``factor``.

    Rates and spectral densities scale linearly, amplitudes (Doppler width,
    intensity rms, envelope transient) with the square root.
    """
    check_nonnegative(factor, "factor")
    root = math.sqrt(factor)
    t1 = math.inf if factor == 0 else config.t1_rydberg / factor
    t2 = math.inf if factor == 0 else config.t2_star / root
    env = config.envelope_distortion
    if env is not None:
        env = replace(env, amplitude=env.amplitude * root, phase=env.phase * root)
    return config.with_(
        t1_rydberg=t1,
        t2_star=t2,
        phase_psd=config.phase_psd.scaled(factor),
        intensity_rms=config.intensity_rms * root,
        envelope_distortion=env,
    )


__all__ = [
    "SOURCES",
    "Branching",
    "PhaseNoisePSD",
    "EnvelopeDistortion",
    "NoiseConfig",
    "NoiseSample",
    "GateErrorReport",
    "GateOverlapSamples",
    "sample_doppler",
    "synthesize_phase_trace",
    "simulate_noisy_gate",
    "error_budget",
    "leakage_fraction",
    "detectable_split",
    "sample_gate_overlaps",
    "scale_noise",
]
