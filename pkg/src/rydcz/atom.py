"""Six-level atom, blockaded two-atom Hamiltonians and piecewise-constant propagation.

Each atom carries the two metastable qubit states and the four Zeeman
sublevels of the F=3/2 Rydberg manifold::

    index  label    energy
    -----  -----    ------
      0    |0>      -delta_m
      1    |1>       0
      2    |r-3/2>  -3 delta_r
      3    |r-1/2>  -2 delta_r
      4    |r+1/2>  -delta_r
      5    |r+3/2>   0

All frequencies are angular (rad/s) and all times are in seconds; hbar = 1.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from numpy.polynomial import Chebyshev
from scipy.linalg import expm

from rydcz._validation import (
    as_float_array,
    check_count,
    check_nonnegative,
    check_positive,
    frozen_array,
)

TWO_PI = 2.0 * np.pi
UNITARITY_TOL = 1e-10


class Level(enum.IntEnum):
    """Single-atom basis; the integer value is the matrix row."""

    ZERO = 0
    ONE = 1
    R_M3_2 = 2
    R_M1_2 = 3
    R_P1_2 = 4
    R_P3_2 = 5

    @property
    def label(self):
        return _LEVEL_LABELS[self]

    @property
    def is_rydberg(self):
        return self >= Level.R_M3_2

    @classmethod
    def from_label(cls, label):
        try:
            return cls(_LEVEL_LABELS.index(label))
        except ValueError:
            raise KeyError(f"unknown level label {label!r}") from None


_LEVEL_LABELS = ("0", "1", "r-3/2", "r-1/2", "r+1/2", "r+3/2")
RYDBERG_LEVELS = (Level.R_M3_2, Level.R_M1_2, Level.R_P1_2, Level.R_P3_2)

# Drive pattern for unit Rabi frequency and zero phase (upper triangle).
_SQ3 = math.sqrt(3.0)
_COUPLINGS = (
    (Level.ZERO, Level.R_M3_2, 0.5),
    (Level.ZERO, Level.R_P1_2, 0.5 / _SQ3),
    (Level.ONE, Level.R_M1_2, 0.5 / _SQ3),
    (Level.ONE, Level.R_P3_2, 0.5),
)

# Five-state subspaces that close under perfect blockade.  '10' mirrors '01'
# and is only built on request (per-atom noise breaks the mirror symmetry).
BLOCK_BASES = {
    "00": ((0, 0), (0, 2), (0, 4), (2, 0), (4, 0)),
    "01": ((0, 1), (0, 3), (0, 5), (2, 1), (4, 1)),
    "10": ((1, 0), (3, 0), (5, 0), (1, 2), (1, 4)),
    "11": ((1, 1), (1, 3), (1, 5), (3, 1), (5, 1)),
}
COMPUTATIONAL = ("00", "01", "10", "11")


@dataclass(frozen=True)
class GateParams:
    """Physical parameters of the entangling pulse.

    Parameters
    ----------
    omega : float
        Peak Rabi angular frequency (rad/s).
    delta_r : float
        Zeeman splitting between adjacent Rydberg sublevels (rad/s).
    duration : float
        Total pulse duration T, edges included (s).
    delta_m : float
        Metastable-manifold Zeeman splitting (rad/s).  Zero by default.
    blockade : float
        Van der Waals shift V (rad/s).  ``math.inf`` selects the perfectly
        blockaded five-dimensional blocks.
    edge_sigma : float or None
        Width of the Gaussian rising/falling edges (s).  ``None`` means
        ``duration / 20``; ``0`` gives a square pulse.
    """

    omega: float
    delta_r: float
    duration: float
    delta_m: float = 0.0
    blockade: float = math.inf
    edge_sigma: float | None = None

    def __post_init__(self):
        check_positive(self.omega, "omega")
        check_positive(self.duration, "duration")
        if not math.isfinite(self.delta_r / self.omega):
            raise ValueError("delta_r / omega must be finite")
        if not math.isfinite(self.delta_m):
            raise ValueError("delta_m must be finite")
        if math.isnan(self.blockade) or self.blockade == 0:
            raise ValueError("blockade must be non-zero (use math.inf for perfect blockade)")
        if self.edge_sigma is not None:
            check_nonnegative(self.edge_sigma, "edge_sigma")
            if 3 * self.edge_sigma > self.duration / 2:
                raise ValueError("edge_sigma too large: 3 sigma edges exceed half the duration")

    @property
    def sigma(self):
        return self.duration / 20.0 if self.edge_sigma is None else float(self.edge_sigma)

    @property
    def perfect_blockade(self):
        return math.isinf(self.blockade)

    def with_(self, **changes):
        return replace(self, **changes)

    @classmethod
    def defaults(cls, duration_omega=9.3, **changes):
        """Omega = 2pi x 1.6 MHz, delta_r = 2pi x 9.3 MHz; duration in units of 1/Omega."""
        omega = TWO_PI * 1.6e6
        kw = dict(omega=omega, delta_r=TWO_PI * 9.3e6, duration=duration_omega / omega)
        kw.update(changes)
        return cls(**kw)


def gaussian_edge_envelope(t, duration, omega, edge_sigma):
    """Flat-top envelope with Gaussian edges that reach ``omega`` at ``3 * edge_sigma``."""
    t = np.asarray(t, dtype=float)
    out = np.full_like(t, float(omega))
    if edge_sigma == 0:
        return out
    rise = 3.0 * edge_sigma
    early = t < rise
    late = t > duration - rise
    out[early] = omega * np.exp(-((t[early] - rise) ** 2) / (2 * edge_sigma**2))
    out[late] = omega * np.exp(-((t[late] - (duration - rise)) ** 2) / (2 * edge_sigma**2))
    return out


def piece_midpoints(duration, n_pieces):
    return (np.arange(n_pieces) + 0.5) * (duration / n_pieces)


@dataclass(frozen=True, eq=False)
class Pulse:
    """Piecewise-constant drive: one phase and one Rabi amplitude per piece."""

    phases: np.ndarray
    amplitudes: np.ndarray
    duration: float

    def __post_init__(self):
        phases = as_float_array(self.phases, "phases")
        amps = as_float_array(self.amplitudes, "amplitudes")
        if phases.size < 1:
            raise ValueError("a pulse needs at least one piece")
        if amps.shape != phases.shape:
            raise ValueError("phases and amplitudes must have the same length")
        if np.any(amps < 0):
            raise ValueError("amplitudes must be non-negative")
        check_positive(self.duration, "duration")
        object.__setattr__(self, "phases", frozen_array(phases))
        object.__setattr__(self, "amplitudes", frozen_array(amps))
        object.__setattr__(self, "duration", float(self.duration))

    @classmethod
    def gaussian_edged(cls, phases, duration, omega, edge_sigma=None):
        phases = np.asarray(phases, dtype=float)
        sigma = duration / 20.0 if edge_sigma is None else edge_sigma
        amps = gaussian_edge_envelope(piece_midpoints(duration, phases.size), duration, omega, sigma)
        return cls(phases, amps, duration)

    @classmethod
    def for_params(cls, phases, params):
        return cls.gaussian_edged(phases, params.duration, params.omega, params.sigma)

    @property
    def n_pieces(self):
        return self.phases.size

    @property
    def dt(self):
        return self.duration / self.n_pieces

    @property
    def times(self):
        return piece_midpoints(self.duration, self.n_pieces)

    def detuning(self):
        """Instantaneous detuning d(phi)/dt from the unwrapped piece phases."""
        if self.n_pieces == 1:
            return np.zeros(1)
        return np.gradient(np.unwrap(self.phases), self.dt)

    def with_phases(self, phases):
        return Pulse(phases, self.amplitudes, self.duration)

    def with_amplitudes(self, amplitudes):
        return Pulse(self.phases, amplitudes, self.duration)


@dataclass(frozen=True, eq=False)
class ChebyshevDetuning:
    """Detuning profile sum_n c_n T_n(2t/T - 1) on [0, T]."""

    coefficients: np.ndarray
    duration: float
    fit_residual: float | None = field(default=None, compare=False)

    def __post_init__(self):
        c = as_float_array(self.coefficients, "coefficients")
        if c.size < 1:
            raise ValueError("need at least one Chebyshev coefficient")
        check_positive(self.duration, "duration")
        object.__setattr__(self, "coefficients", frozen_array(c))
        object.__setattr__(self, "duration", float(self.duration))

    @property
    def n_max(self):
        return self.coefficients.size - 1

    @property
    def series(self):
        return Chebyshev(self.coefficients, domain=[0.0, self.duration])

    def __call__(self, t):
        return self.series(np.asarray(t, dtype=float))

    def phase(self, t):
        """Exact antiderivative of the detuning, zero at t = 0."""
        return self.series.integ(lbnd=0.0)(np.asarray(t, dtype=float))

    def with_coefficient(self, index, value):
        c = np.array(self.coefficients)
        c[index] = value
        return ChebyshevDetuning(c, self.duration)


def detuning_to_phase(detuning, n_pieces, omega, edge_sigma=None):
    """Sample the integrated detuning at piece midpoints and return the pulse."""
    n_pieces = check_count(n_pieces, "n_pieces")
    phases = detuning.phase(piece_midpoints(detuning.duration, n_pieces))
    return Pulse.gaussian_edged(phases, detuning.duration, omega, edge_sigma)


def _single_atom_diagonal(params):
    dr, dm = params.delta_r, params.delta_m
    return np.array([-dm, 0.0, -3 * dr, -2 * dr, -dr, 0.0])


def _single_atom_coupling():
    c = np.zeros((6, 6))
    for a, b, v in _COUPLINGS:
        c[a, b] = c[b, a] = v
    return c


_EXCITATION = np.array([0, 0, 1, 1, 1, 1], dtype=float)


def build_single_atom_hamiltonian(params, phase, omega_inst):
    """Return the 6x6 single-atom Hamiltonian for laser phase ``phase``."""
    omega_inst = float(omega_inst)
    if not omega_inst >= 0:
        raise ValueError(f"omega_inst must be non-negative, got {omega_inst!r}")
    d = np.exp(1j * phase * _EXCITATION)
    h = np.diag(_single_atom_diagonal(params)).astype(complex)
    h += omega_inst * (d[:, None] * _single_atom_coupling() * d.conj()[None, :])
    return h


@dataclass(frozen=True, eq=False)
class Block:
    """One closed subspace of the two-atom problem.

    ``static`` holds the phase-independent part, ``coupling`` the drive for
    unit Rabi frequency at zero phase; the laser phase enters through the
    Rydberg excitation number as ``D H D^dagger`` with
    ``D = exp(i phase * excitation)``.
    """

    label: str
    basis: tuple
    static: np.ndarray
    coupling: np.ndarray
    excitation: np.ndarray
    atom_excitation: np.ndarray
    initial: dict

    @property
    def dim(self):
        return self.static.shape[0]

    def hamiltonian(self, phase, omega_inst, extra_diagonal=None):
        d = np.exp(1j * phase * self.excitation)
        h = self.static + omega_inst * self.coupling
        if extra_diagonal is not None:
            h = h + np.diag(extra_diagonal)
        return d[:, None] * h * d.conj()[None, :]

    def basis_labels(self):
        return tuple(f"|{Level(a).label},{Level(b).label}>" for a, b in self.basis)


@dataclass(frozen=True, eq=False)
class BlockadeModel:
    """Two-atom dynamics: three (optionally four) 5-state blocks or one 36-state block."""

    params: GateParams
    blocks: tuple

    @property
    def perfect_blockade(self):
        return self.blocks[0].label != "full"

    def __getitem__(self, label):
        for b in self.blocks:
            if b.label == label:
                return b
        raise KeyError(label)

    @property
    def labels(self):
        return tuple(b.label for b in self.blocks)


def _two_atom_operators(params):
    diag1 = _single_atom_diagonal(params)
    c1 = _single_atom_coupling()
    eye = np.eye(6)
    ones = np.ones(6)
    static = np.diag(np.kron(diag1, ones) + np.kron(ones, diag1)).astype(complex)
    coupling = np.kron(c1, eye) + np.kron(eye, c1)
    atom_exc = np.stack([np.kron(_EXCITATION, ones), np.kron(ones, _EXCITATION)], axis=1)
    return static, coupling, atom_exc


def _interaction_matrix(params, interaction):
    """hbar sum V_ijkl |r_i><r_k| (x) |r_j><r_l| over the four Rydberg sublevels."""
    v = np.zeros((36, 36), dtype=complex)
    ryd = [int(lvl) for lvl in RYDBERG_LEVELS]
    if interaction is None:
        for i in ryd:
            for j in ryd:
                v[6 * i + j, 6 * i + j] = params.blockade
        return v
    tensor = np.asarray(interaction, dtype=complex)
    if tensor.shape != (4, 4, 4, 4):
        raise ValueError("interaction tensor must have shape (4, 4, 4, 4)")
    for i, ri in enumerate(ryd):
        for j, rj in enumerate(ryd):
            for k, rk in enumerate(ryd):
                for m, rl in enumerate(ryd):
                    v[6 * ri + rj, 6 * rk + rl] += tensor[i, j, k, m]
    if not np.allclose(v, v.conj().T):
        raise ValueError("interaction tensor does not give a Hermitian operator")
    return v


def build_blockade_model(params, interaction=None, include_swapped=False):
    """Build the blockaded 5-state blocks, or the full 36-state model for finite V.

    Parameters
    ----------
    params : GateParams
    interaction : array_like, shape (4, 4, 4, 4), optional
        Full V_ijkl tensor (rad/s) over the Rydberg sublevels, ordered
        r-3/2 .. r+3/2.  Only used with finite ``params.blockade``; the
        default puts the scalar ``params.blockade`` on every |r_i r_j> pair.
    include_swapped : bool
        Also build the '10' block.  Needed when the two atoms see different
        noise; for identical atoms it duplicates '01'.
    """
    static, coupling, atom_exc = _two_atom_operators(params)
    excitation = atom_exc.sum(axis=1)

    if not params.perfect_blockade or interaction is not None:
        if params.perfect_blockade:
            raise ValueError("an interaction tensor requires a finite blockade setting")
        if abs(params.blockade) <= params.omega:
            warnings.warn(
                "|V| <= omega: the blockade assumption is not valid for this model",
                RuntimeWarning,
                stacklevel=2,
            )
        full = Block(
            label="full",
            basis=tuple((a, b) for a in range(6) for b in range(6)),
            static=static + _interaction_matrix(params, interaction),
            coupling=coupling,
            excitation=excitation,
            atom_excitation=atom_exc,
            initial={"00": 0, "01": 1, "10": 6, "11": 7},
        )
        return BlockadeModel(params, (full,))

    labels = ("00", "01", "10", "11") if include_swapped else ("00", "01", "11")
    blocks = []
    for label in labels:
        basis = BLOCK_BASES[label]
        idx = [6 * a + b for a, b in basis]
        blocks.append(
            Block(
                label=label,
                basis=basis,
                static=static[np.ix_(idx, idx)].copy(),
                coupling=coupling[np.ix_(idx, idx)].copy(),
                excitation=excitation[idx].copy(),
                atom_excitation=atom_exc[idx].copy(),
                initial={label: 0},
            )
        )
    return BlockadeModel(params, tuple(blocks))


def piece_exponentials(block, amplitudes, dt, extra_diagonal=None, decay_rate=0.0):
    """exp(-i H dt) at zero phase for every amplitude.

    ``amplitudes`` may have any leading shape; ``extra_diagonal`` (real or
    complex, last axis = block dimension) broadcasts against it.  A non-zero
    ``decay_rate`` adds -i decay_rate/2 on every Rydberg-excited state and the
    result is no longer unitary.
    """
    amps = np.asarray(amplitudes, dtype=float)
    flat, inverse = np.unique(amps, return_inverse=True)
    if extra_diagonal is None and decay_rate == 0:
        h = block.static[None] + flat[:, None, None] * block.coupling[None]
        w, v = np.linalg.eigh(h)
        e = np.einsum("nij,nj,nkj->nik", v, np.exp(-1j * w * dt), v.conj())
        return e[inverse.reshape(amps.shape)]

    diag = np.zeros(block.dim, dtype=complex)
    if decay_rate:
        diag = diag - 0.5j * decay_rate * block.excitation
    if extra_diagonal is None:
        extra = diag
    else:
        extra = np.asarray(extra_diagonal, dtype=complex) + diag
    h = (
        block.static
        + amps[..., None, None] * block.coupling
        + extra[..., None, :] * np.eye(block.dim)
    )
    if extra_diagonal is None:
        h_flat = block.static[None] + flat[:, None, None] * block.coupling[None] + np.diag(extra)[None]
        return expm(-1j * dt * h_flat)[inverse.reshape(amps.shape)]
    shape = h.shape
    return expm(-1j * dt * h.reshape(-1, block.dim, block.dim)).reshape(shape)


def dress_with_phases(exps, phases, excitation):
    """Turn zero-phase piece exponentials into D(phi) E D(phi)^dagger."""
    d = np.exp(1j * np.asarray(phases)[..., None] * excitation)
    return d[..., :, None] * exps * d.conj()[..., None, :]


def ordered_product(pieces):
    """U_N ... U_1 for pieces stacked along axis -3 (time order, earliest first)."""
    u = np.broadcast_to(np.eye(pieces.shape[-1], dtype=complex), pieces.shape[:-3] + pieces.shape[-2:]).copy()
    for n in range(pieces.shape[-3]):
        u = pieces[..., n, :, :] @ u
    return u


def check_unitary(u, tol=UNITARITY_TOL):
    d = u.shape[-1]
    err = np.max(np.abs(np.swapaxes(u.conj(), -1, -2) @ u - np.eye(d)))
    if err >= tol:
        raise RuntimeError(f"propagator is not unitary: |U^dag U - 1| = {err:.3e}")
    return err


def propagate(model, pulse):
    """Propagator of every block under ``pulse``, late times on the left."""
    out = {}
    for block in model.blocks:
        exps = piece_exponentials(block, pulse.amplitudes, pulse.dt)
        u = ordered_product(dress_with_phases(exps, pulse.phases, block.excitation))
        check_unitary(u)
        out[block.label] = u
    return out


def restrict(u_full, block):
    """Restrict a 36x36 two-atom propagator to a 5-state block basis."""
    idx = [6 * a + b for a, b in block.basis]
    return u_full[np.ix_(idx, idx)]


_TABLE_HEADER = "t_seconds,omega_rad_per_s,phi_rad,delta_rad_per_s"


def write_pulse_table(path, pulse, detuning=None):
    """Write a pulse as comma-delimited text, one row per piece midpoint."""
    t = pulse.times
    delta = pulse.detuning() if detuning is None else detuning(t)
    data = np.column_stack([t, pulse.amplitudes, pulse.phases, delta])
    np.savetxt(path, data, delimiter=",", header=_TABLE_HEADER, comments="", fmt="%.17g")


def read_pulse_table(path):
    path = Path(path)
    with path.open() as fh:
        header = fh.readline().strip()
    if header.replace(" ", "") != _TABLE_HEADER:
        raise ValueError(f"{path}: unexpected pulse table header {header!r}")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.shape[1] != 4:
        raise ValueError(f"{path}: expected 4 columns, got {data.shape[1]}")
    t = data[:, 0]
    dt = 2.0 * t[0]
    return Pulse(data[:, 2], data[:, 1], dt * t.size)
