"""Run configuration: layered YAML over named presets.

Resolution order is ``BASE`` < preset < config file < command-line flags.
Every key must already exist in ``BASE``; its default also fixes the type.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math

import numpy as np
import yaml

from rydcz.atom import GateParams
from rydcz.benchmark import ChannelParams, ImagingParams
from rydcz.grape import OptimizerSettings
from rydcz.noise import Branching, EnvelopeDistortion, NoiseConfig, PhaseNoisePSD

TWO_PI = 2 * math.pi


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


REQUIRED = {"gate.omega", "gate.delta_r", "gate.duration_omega"}

BASE = {
    "seed": 0,
    "shots": 4000,
    "out": "results",
    "pulse": None,
    "gate": {
        "omega": TWO_PI * 1.6e6,
        "delta_r": TWO_PI * 9.3e6,
        "duration_omega": 9.3,
        "delta_m": 0.0,
        "blockade": math.inf,
        "edge_sigma": None,
    },
    "optimizer": {
        "n_pieces": 100,
        "restarts": 20,
        "max_iter": 5000,
        "gtol": 1e-9,
        "init": "smooth",
        "coarse_order": 13,
        "n_jobs": 1,
        "chebyshev_order": 13,
    },
    "noise": {
        "t1_rydberg": 65e-6,
        "t2_star": 5.7e-6,
        "phase_psd_dbc": -97.5,
        "phase_psd_file": None,
        "intensity_rms": 0.01,
        "envelope_amplitude": 0.02,
        "envelope_phase": 0.23,
        "envelope_time_constant": 0.4e-6,
        "harmonic": 2,
        "sources": ["rydberg_decay", "doppler", "phase_noise", "intensity_noise", "envelope_distortion"],
        "branching": {
            "to_3p0": 0.10,
            "to_1s0": 0.25,
            "to_3p2": 0.35,
            "unaccounted": 0.30,
            "post_1s0": 0.51,
            "post_3p0": 0.19,
        },
    },
    "rb": {
        "mode": "single",
        "epsilon": 1e-3,
        "conversion": 0.56,
        "loss": 2e-4,
        "returned": 1e-4,
        "lengths": [50, 100, 150, 200, 250, 300],
        "erasure_period": 50,
        "rotations": "discrete",
        "channel": "noise-engine",
        "pool_sequences": 400,
        "bias_gates": [0, 2, 4, 6, 8, 10, 12, 14, 16, 18],
        "imaging": {"fidelity": 0.986, "false_positive": 4e-4, "decay_during_image": 7e-6},
        "counts": {"threshold": 700.0, "background_mean": 300.0, "bright_sigma": 150.0},
        "thresholds": None,
    },
    "analyze": {"kind": "bell", "dataset": None},
}

_TWO_QUBIT_RB = {
    "lengths": [2, 4, 6, 8, 10],
    "erasure_period": 2,
    "imaging": {"decay_during_image": 1.4e-4},
}

PRESETS = {
    "fig3a-defaults": {},
    "methods-error-budget": {"shots": 4000},
    "fig2e-defaults": {"shots": 10000, "rb": {"mode": "single"}},
    "fig2g-defaults": {"shots": 10000, "rb": {"mode": "threshold"}},
    "fig4c-defaults": {"shots": 4000, "rb": dict(_TWO_QUBIT_RB, mode="two")},
    "fig4e-defaults": {"shots": 20000, "rb": {"mode": "bias", "imaging": {"decay_during_image": 1.4e-4}}},
    "fig3e-defaults": {"analyze": {"kind": "bell"}},
    "fig2b-defaults": {"analyze": {"kind": "lifetime"}},
}


def _merge(base, override, prefix=""):
    out = copy.deepcopy(base)
    for key, value in override.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown key '{path}'")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"'{path}' must be a mapping")
            out[key] = _merge(base[key], value, path + ".")
        else:
            out[key] = _coerce(BASE_LOOKUP.get(path, base[key]), value, path)
    return out


def _lookup(tree, prefix=""):
    flat = {}
    for key, value in tree.items():
        if isinstance(value, dict):
            flat.update(_lookup(value, f"{prefix}{key}."))
        else:
            flat[f"{prefix}{key}"] = value
    return flat


BASE_LOOKUP = _lookup(BASE)


def _coerce(default, value, path):
    if value is None:
        if path in REQUIRED:
            raise ConfigError(f"'{path}' is required")
        return None
    if isinstance(value, str) and value.strip().lower() in ("inf", ".inf", "infinity"):
        value = math.inf
    if default is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"'{path}' must be true or false")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"'{path}' must be an integer")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"'{path}' must be a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"'{path}' must be a string")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"'{path}' must be a list")
        return list(value)
    return value


def load_config(path=None, preset=None, overrides=None):
    """Resolve a configuration.

    Parameters
    ----------
    path : str, optional
        YAML file with a subset of the keys of ``BASE``; a top-level
        ``preset`` key is used when ``preset`` is not given.
    preset : str, optional
        One of ``PRESETS``.
    overrides : dict, optional
        Final layer, e.g. from command-line flags.

    Returns
    -------
    dict
        Fully resolved configuration.

    Raises
    ------
    ConfigError
    """
    data = {}
    if path is not None:
        try:
            with open(path) as fh:
                data = yaml.safe_load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config '{path}': {exc.strerror}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"malformed YAML in '{path}': {exc}") from None
        if data is None:
            data = {}
        if not isinstance(data, dict):
            raise ConfigError(f"'{path}' must contain a mapping at top level")
        file_preset = data.pop("preset", None)
        if preset is None:
            preset = file_preset
    cfg = copy.deepcopy(BASE)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset '{preset}' (choose from {', '.join(sorted(PRESETS))})")
        cfg = _merge(cfg, PRESETS[preset])
    cfg = _merge(cfg, data)
    if overrides:
        cfg = _merge(cfg, {k: v for k, v in overrides.items() if v is not None})
    for key in REQUIRED:
        if _get(cfg, key) is None:
            raise ConfigError(f"'{key}' is required")
    return cfg


def _get(cfg, dotted):
    node = cfg
    for part in dotted.split("."):
        node = node[part]
    return node


def _jsonable(value):
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, float) and not math.isfinite(value):
        return "inf" if value > 0 else ("-inf" if value < 0 else "nan")
    if isinstance(value, np.generic):
        return _jsonable(value.item())
    return value


def canonical_json(obj):
    """Sorted-key compact JSON with non-finite floats as strings."""
    return json.dumps(_jsonable(obj), sort_keys=True, separators=(",", ":"))


def config_hash(cfg):
    """SHA-256 of the canonical JSON of ``cfg`` without the output directory."""
    body = {k: v for k, v in cfg.items() if k != "out"}
    return hashlib.sha256(canonical_json(body).encode()).hexdigest()


# ----------------------------------------------------------------------------- builders


def _build(kind, fn):
    try:
        return fn()
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {kind} settings: {exc}") from None


def gate_params(cfg):
    g = cfg["gate"]
    return _build(
        "gate",
        lambda: GateParams(
            omega=g["omega"],
            delta_r=g["delta_r"],
            duration=g["duration_omega"] / g["omega"],
            delta_m=g["delta_m"],
            blockade=g["blockade"],
            edge_sigma=g["edge_sigma"],
        ),
    )


def optimizer_settings(cfg):
    o = cfg["optimizer"]
    return _build(
        "optimizer",
        lambda: OptimizerSettings(
            restarts=o["restarts"],
            max_iter=o["max_iter"],
            gtol=o["gtol"],
            init=o["init"],
            coarse_order=o["coarse_order"],
            n_jobs=o["n_jobs"],
        ),
    )


def noise_config(cfg):
    n = cfg["noise"]

    def build():
        if n["phase_psd_file"]:
            try:
                psd = PhaseNoisePSD.read(n["phase_psd_file"])
            except OSError as exc:
                raise ConfigError(f"'noise.phase_psd_file': {exc.strerror}") from None
        elif n["phase_psd_dbc"] is None:
            psd = PhaseNoisePSD.empty()
        else:
            psd = PhaseNoisePSD.flat(n["phase_psd_dbc"], label="placeholder (not measured)")
        env = None
        if n["envelope_amplitude"] or n["envelope_phase"]:
            env = EnvelopeDistortion(n["envelope_amplitude"], n["envelope_phase"], n["envelope_time_constant"])
        return NoiseConfig(
            t1_rydberg=n["t1_rydberg"],
            t2_star=n["t2_star"],
            phase_psd=psd,
            intensity_rms=n["intensity_rms"],
            envelope_distortion=env,
            branching=Branching(**n["branching"]),
            shots=cfg["shots"],
            seed=cfg["seed"],
            harmonic=n["harmonic"],
        )

    return _build("noise", build)


def imaging_params(cfg):
    return _build("rb.imaging", lambda: ImagingParams(**cfg["rb"]["imaging"]))


def channel_params(cfg):
    r = cfg["rb"]
    return _build(
        "rb",
        lambda: ChannelParams.calibrated(
            epsilon=r["epsilon"],
            conversion=r["conversion"],
            loss=r["loss"],
            returned=r["returned"],
            lengths=r["lengths"],
            erasure_period=r["erasure_period"],
            imaging=imaging_params(cfg),
        ),
    )


__all__ = [
    "BASE",
    "PRESETS",
    "ConfigError",
    "load_config",
    "canonical_json",
    "config_hash",
    "gate_params",
    "optimizer_settings",
    "noise_config",
    "imaging_params",
    "channel_params",
]
