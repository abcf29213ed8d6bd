"""Configuration layering and the command-line interface."""

import json
import math
import subprocess
import sys

import pytest
import yaml

from rydcz import __version__
from rydcz.atom import write_pulse_table
from rydcz.cli import EXIT_CONFIG, EXIT_NUMERICAL, EXIT_OK, main
from rydcz.config import (
    BASE,
    PRESETS,
    ConfigError,
    channel_params,
    config_hash,
    gate_params,
    load_config,
    noise_config,
)


def write_yaml(path, data):
    path.write_text(yaml.safe_dump(data))
    return path


class TestLoadConfig:
    def test_base_round_trip(self):
        cfg = load_config()
        assert cfg == BASE
        params = gate_params(cfg)
        assert params.omega * params.duration == pytest.approx(9.3)

    @pytest.mark.parametrize("name", sorted(PRESETS))
    def test_presets_resolve(self, name):
        cfg = load_config(preset=name)
        gate_params(cfg)
        noise_config(cfg)
        channel_params(cfg)

    def test_layering_order(self, tmp_path):
        path = write_yaml(tmp_path / "c.yaml", {"preset": "fig2e-defaults", "shots": 123, "seed": 4})
        cfg = load_config(path, overrides={"seed": 9})
        assert cfg["rb"]["mode"] == "single"
        assert cfg["shots"] == 123
        assert cfg["seed"] == 9

    def test_explicit_preset_beats_file_preset(self, tmp_path):
        path = write_yaml(tmp_path / "c.yaml", {"preset": "fig2e-defaults"})
        assert load_config(path, preset="fig4c-defaults")["rb"]["mode"] == "two"

    @pytest.mark.parametrize(
        "data,match",
        [
            ({"shotz": 1}, "unknown key 'shotz'"),
            ({"gate": {"omgea": 1.0}}, "unknown key 'gate.omgea'"),
            ({"gate": {"omega": None}}, "'gate.omega' is required"),
            ({"shots": 1.5}, "'shots' must be an integer"),
            ({"shots": True}, "'shots' must be an integer"),
            ({"gate": {"delta_r": "fast"}}, "'gate.delta_r' must be a number"),
            ({"noise": {"sources": "doppler"}}, "must be a list"),
            ({"gate": 3}, "'gate' must be a mapping"),
        ],
    )
    def test_rejects(self, tmp_path, data, match):
        with pytest.raises(ConfigError, match=match):
            load_config(write_yaml(tmp_path / "c.yaml", data))

    def test_unknown_preset(self):
        with pytest.raises(ConfigError, match="unknown preset"):
            load_config(preset="fig9z")

    def test_missing_and_malformed_files(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read"):
            load_config(tmp_path / "absent.yaml")
        bad = tmp_path / "bad.yaml"
        bad.write_text("gate: [1, 2\n")
        with pytest.raises(ConfigError, match="malformed"):
            load_config(bad)

    def test_infinity_strings(self, tmp_path):
        cfg = load_config(write_yaml(tmp_path / "c.yaml", {"gate": {"blockade": "inf"}}))
        assert cfg["gate"]["blockade"] == math.inf

    def test_builder_errors_name_section(self, tmp_path):
        cfg = load_config(write_yaml(tmp_path / "c.yaml", {"gate": {"omega": -1.0}}))
        with pytest.raises(ConfigError, match="invalid gate settings"):
            gate_params(cfg)

    def test_hash_ignores_output_directory(self):
        a = load_config(overrides={"out": "x"})
        b = load_config(overrides={"out": "y"})
        c = load_config(overrides={"seed": 1})
        assert config_hash(a) == config_hash(b) != config_hash(c)


@pytest.fixture
def pulse_file(tmp_path, pulse):
    path = tmp_path / "pulse.csv"
    write_pulse_table(path, pulse)
    return path


def run(argv, capsys):
    code = main([str(a) for a in argv])
    captured = capsys.readouterr()
    return code, captured.out, captured.err


class TestCLI:
    def test_version_entry_point(self):
        out = subprocess.run([sys.executable, "-m", "rydcz.cli", "--version"], capture_output=True, text=True, check=True)
        assert __version__ in out.stdout

    def test_optimize_numerical_failure(self, tmp_path, capsys):
        cfg = write_yaml(tmp_path / "c.yaml", {"optimizer": {"n_pieces": 10, "restarts": 1, "max_iter": 1}})
        code, _, err = run(["optimize", "--config", cfg, "--out", tmp_path / "o"], capsys)
        assert code == EXIT_NUMERICAL
        assert "did not converge" in err
        # the partial result is still written
        assert (tmp_path / "o" / "pulse.csv").exists()

    def test_config_error_exit(self, tmp_path, capsys):
        cfg = write_yaml(tmp_path / "c.yaml", {"bogus": 1})
        code, _, err = run(["rb", "single", "--config", cfg, "--out", tmp_path / "o"], capsys)
        assert code == EXIT_CONFIG
        assert "unknown key 'bogus'" in err

    def test_missing_pulse(self, tmp_path, capsys):
        code, _, err = run(["error-budget", "--out", tmp_path / "o"], capsys)
        assert code == EXIT_CONFIG
        assert "'pulse' is required" in err
        code, _, err = run(["error-budget", "--pulse", tmp_path / "nope.csv", "--out", tmp_path / "o"], capsys)
        assert code == EXIT_CONFIG
        assert "not found" in err

    def test_error_budget(self, tmp_path, pulse_file, capsys):
        cfg = write_yaml(tmp_path / "c.yaml", {"noise": {"sources": ["rydberg_decay", "doppler"]}})
        out = tmp_path / "o"
        code, stdout, _ = run(["error-budget", "--config", cfg, "--pulse", pulse_file, "--shots", 200, "--out", out], capsys)
        assert code == EXIT_OK
        rows = (out / "error_budget.csv").read_text().splitlines()
        assert rows[0] == "source,error,stderr"
        assert {r.split(",")[0] for r in rows[1:]} >= {"rydberg_decay", "doppler"}
        summary = json.loads((out / "summary.json").read_text())
        assert summary["command"] == "error-budget"
        assert summary["config"]["shots"] == 200

    def test_unknown_source_is_config_error(self, tmp_path, pulse_file, capsys):
        cfg = write_yaml(tmp_path / "c.yaml", {"noise": {"sources": ["cosmic_rays"]}})
        code, _, _ = run(["error-budget", "--config", cfg, "--pulse", pulse_file, "--out", tmp_path / "o"], capsys)
        assert code == EXIT_CONFIG

    def test_rb_single_is_deterministic(self, tmp_path, capsys):
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert run(["rb", "single", "--shots", 300, "--seed", 7, "--out", out], capsys)[0] == EXIT_OK
            outs.append(out)
        a, b = (json.loads((o / "summary.json").read_text()) for o in outs)
        assert a["config_hash"] == b["config_hash"]
        a["config"].pop("out"), b["config"].pop("out")
        assert a == b
        assert (outs[0] / "rb_curves.csv").read_bytes() == (outs[1] / "rb_curves.csv").read_bytes()

    def test_rb_mode_implies_preset(self, tmp_path, capsys):
        out = tmp_path / "o"
        code, _, _ = run(["rb", "two", "--channel", "ideal", "--shots", 200, "--out", out], capsys)
        assert code == EXIT_OK
        summary = json.loads((out / "summary.json").read_text())
        assert summary["config"]["rb"]["lengths"] == [2, 4, 6, 8, 10]
        assert len((out / "rb_curves.csv").read_text().splitlines()) == 6

    def test_rb_threshold(self, tmp_path, capsys):
        out = tmp_path / "o"
        code, stdout, _ = run(["rb", "threshold", "--shots", 1500, "--out", out], capsys)
        assert code == EXIT_OK
        assert json.loads(stdout)["plateau_exists"]
        header, first = (out / "threshold.csv").read_text().splitlines()[:2]
        assert header == "threshold,p_err_given_det,conversion,plateau"
        assert first.split(",")[-1] in ("true", "false")

    def test_rb_bias_ideal_channel(self, tmp_path, capsys):
        out = tmp_path / "o"
        code, stdout, _ = run(["rb", "bias", "--channel", "ideal", "--shots", 500, "--out", out], capsys)
        assert code == EXIT_OK
        assert set(json.loads(stdout)) >= {"00", "++", "11", "ratio_11_00", "ratio_lower_bound"}

    def test_analyze_bell(self, tmp_path, capsys):
        rows = ["quantity,theta_rad,value,stderr", "P00,,0.46,0.01", "P11,,0.42,0.01", "P_nl,,0.9,0.01"]
        rows += [f"parity,{k * math.pi / 12},{0.2 * math.cos(k * math.pi / 6) + 0.25},0.002" for k in range(12)]
        data = tmp_path / "bell.csv"
        data.write_text("\n".join(rows) + "\n")
        code, stdout, _ = run(["analyze", "bell", data, "--out", tmp_path / "o"], capsys)
        assert code == EXIT_OK
        res = json.loads(stdout)
        assert res["P_c"] == pytest.approx(0.8, abs=1e-9)
        assert res["F_B"] == pytest.approx(0.84, abs=1e-9)

    def test_analyze_lifetime(self, tmp_path, capsys):
        data = tmp_path / "life.csv"
        data.write_text("power_mw,rate_per_s,stderr\n0,0.5,0.01\n10,1.2,0.02\n20,2.5,0.03\n30,4.4,0.04\n")
        code, stdout, _ = run(["analyze", "lifetime", data, "--out", tmp_path / "o"], capsys)
        assert code == EXIT_OK
        assert set(json.loads(stdout)) >= {"gamma0", "alpha", "beta", "negative_coefficient"}

    def test_analyze_bad_dataset(self, tmp_path, capsys):
        data = tmp_path / "bad.csv"
        data.write_text("power_mw,rate_per_s,stderr\n0,abc,0.1\n")
        code, _, err = run(["analyze", "lifetime", data, "--out", tmp_path / "o"], capsys)
        assert code == EXIT_CONFIG
        assert "bad.csv:2: cannot parse" in err

    def test_analyze_missing_dataset(self, tmp_path, capsys):
        code, _, err = run(["analyze", "bell", tmp_path / "none.csv", "--out", tmp_path / "o"], capsys)
        assert code == EXIT_CONFIG
        assert "not found" in err

    def test_usage_error_is_config_error(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["rb", "triple"])
        assert exc.value.code == EXIT_CONFIG
        assert "invalid choice" in capsys.readouterr().err
