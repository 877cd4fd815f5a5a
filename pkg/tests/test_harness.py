import json
import os
import re
import subprocess
import sys

import pytest

from fieldcrystal.errors import ConfigError, WraparoundRisk
from fieldcrystal.harness import EXPERIMENTS, load_config, run_experiment, validate_config
from fieldcrystal.harness.cli import main
from fieldcrystal.harness.config import estimated_gamma

from conftest import REFERENCE_CONFIG


def reference_text():
    with open(REFERENCE_CONFIG) as fh:
        return fh.read()


def edit(text, section, key, value):
    """Set ``key = value`` inside ``[section]`` (adding the key if absent)."""
    lines = text.splitlines()
    start = lines.index(f"[{section}]")
    end = next((i for i in range(start + 1, len(lines)) if lines[i].startswith("[")), len(lines))
    for i in range(start + 1, end):
        if re.match(rf"{re.escape(key)}\s*=", lines[i]):
            if value is None:
                del lines[i]
            else:
                lines[i] = f"{key} = {value}"
            return "\n".join(lines) + "\n"
    if value is not None:
        lines.insert(start + 1, f"{key} = {value}")
    return "\n".join(lines) + "\n"


def small_text():
    """Reference config on a shorter crystal with times that respect the wraparound guard."""
    t = reference_text()
    t = edit(t, "model", "N", "512")
    t = edit(t, "model", "K", "4")
    t = edit(t, "converge", "times", "1 2 5 10 20 50 100")
    t = edit(t, "gaussianity", "samples", "400")
    t = edit(t, "gaussianity", "t_final", "50")
    t = edit(t, "mixing", "samples", "300")
    t = edit(t, "mixing", "times", "0 5 50")
    t = edit(t, "mixing", "decay_time", "50")
    t = edit(t, "bands", "grid", "64")
    t = edit(t, "coupling-scan", "grid", "64")
    t = edit(t, "coupling-scan", "amplitudes", "0 1 100")
    return t


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "small.ini"
    path.write_text(small_text())
    return str(path)


class TestValidation:
    def test_reference_is_valid(self):
        for exp in EXPERIMENTS:
            cfg = validate_config(reference_text(), exp)
            assert cfg.model.N == 4096 and cfg.model.K == 8
        assert set(cfg.measures) == {"ma", "lattice", "gibbs"}

    def test_missing_m0(self):
        with pytest.raises(ConfigError) as info:
            validate_config(edit(reference_text(), "model", "m0", None))
        assert len(info.value.errors) == 1
        assert "m0" in info.value.errors[0]

    def test_odd_n(self):
        with pytest.raises(ConfigError) as info:
            validate_config(edit(reference_text(), "model", "N", "4095"))
        assert any("'N'" in e for e in info.value.errors)

    def test_errors_aggregated(self):
        t = edit(reference_text(), "model", "N", "7")
        t = edit(t, "model", "m0", "-1")
        t = edit(t, "converge", "rel_tol", "abc")
        t = edit(t, "decay", "bogus", "1")
        with pytest.raises(ConfigError) as info:
            validate_config(t)
        joined = " | ".join(info.value.errors)
        for needle in ("'N'", "m0", "rel_tol", "bogus"):
            assert needle in joined
        assert len(info.value.errors) >= 4

    def test_dangling_reference(self):
        t = edit(reference_text(), "converge", "testfn", "nosuch")
        with pytest.raises(ConfigError, match="testfn.nosuch"):
            validate_config(t, "converge")

    def test_unknown_section(self):
        with pytest.raises(ConfigError, match="unknown section"):
            validate_config(reference_text() + "\n[extra]\nx = 1\n")

    def test_wraparound_bound(self):
        t = edit(reference_text(), "model", "N", "512")
        cfg = validate_config(t, check_wrap=False)
        gamma = estimated_gamma(cfg.model)
        with pytest.raises(WraparoundRisk) as info:
            validate_config(t, "converge")
        assert info.value.bound == pytest.approx(1.5 * gamma * 200.0)
        assert f"{1.5 * gamma * 200.0:.6g}" in str(info.value)
        # the static experiments have no time horizon
        validate_config(t, "bands")

    def test_load_config(self):
        cfg = load_config(REFERENCE_CONFIG, "bands")
        assert cfg.experiment == "bands" and cfg.seed == 0


class TestRuns:
    def test_summary_structure(self, small_config, tmp_path):
        cfg = load_config(small_config, "conditions")
        summary = run_experiment(cfg, "conditions", str(tmp_path / "out"))
        on_disk = json.loads((tmp_path / "out" / "conditions" / "summary.json").read_text())
        assert on_disk == json.loads(json.dumps(summary))
        assert on_disk["passed"] is True
        for a in on_disk["assertions"]:
            assert set(a) == {"name", "anchor", "measured", "threshold", "relation", "passed"}

    @pytest.mark.parametrize("experiment", ["bands", "converge", "gaussianity", "mixing", "coupling-scan"])
    def test_deterministic_csv(self, small_config, tmp_path, experiment):
        cfg = load_config(small_config, experiment)
        run_experiment(cfg, experiment, str(tmp_path / "a"))
        run_experiment(cfg, experiment, str(tmp_path / "b"))
        files = sorted(os.listdir(tmp_path / "a" / experiment))
        assert any(f.startswith("data_") and f.endswith(".csv") for f in files)
        for f in files:
            assert (tmp_path / "a" / experiment / f).read_bytes() == (tmp_path / "b" / experiment / f).read_bytes()

    def test_scan_rows(self, small_config, tmp_path):
        cfg = load_config(small_config, "coupling-scan")
        run_experiment(cfg, "coupling-scan", str(tmp_path))
        rows = (tmp_path / "coupling-scan" / "data_scan.csv").read_text().splitlines()
        assert rows[1].startswith("0,ok") and rows[3].startswith("100,skipped")


class TestCli:
    def test_pass_exit_zero(self, small_config, tmp_path, capsys):
        assert main(["invariance", "--config", small_config, "--out", str(tmp_path)]) == 0
        out = capsys.readouterr().out
        assert out.count("PASS invariance.") == 3

    def test_assertion_failure_exit_one(self, tmp_path, capsys):
        path = tmp_path / "strict.ini"
        path.write_text(edit(small_text(), "converge", "rel_tol", "1e-12"))
        assert main(["converge", "--config", str(path), "--out", str(tmp_path)]) == 1
        assert "FAIL converge.relative_error_at_final_time" in capsys.readouterr().out
        summary = json.loads((tmp_path / "converge" / "summary.json").read_text())
        assert summary["passed"] is False

    def test_odd_n_exit_two(self, tmp_path, capsys):
        path = tmp_path / "odd.ini"
        path.write_text(edit(reference_text(), "model", "N", "4095"))
        assert main(["bands", "--config", str(path), "--out", str(tmp_path)]) == 2
        assert "N" in capsys.readouterr().err

    def test_wraparound_exit_two(self, tmp_path, capsys):
        path = tmp_path / "wrap.ini"
        path.write_text(edit(reference_text(), "model", "N", "256"))
        assert main(["converge", "--config", str(path), "--out", str(tmp_path)]) == 2
        assert "gamma" in capsys.readouterr().err

    def test_missing_file_exit_two(self, tmp_path):
        assert main(["bands", "--config", str(tmp_path / "none.ini")]) == 2

    def test_bad_threads(self, small_config, tmp_path):
        assert main(["bands", "--config", small_config, "--threads", "0", "--out", str(tmp_path)]) == 2

    def test_seed_override(self, small_config, tmp_path):
        assert main(["invariance", "--config", small_config, "--seed", "17", "--out", str(tmp_path)]) == 0
        assert json.loads((tmp_path / "invariance" / "summary.json").read_text())["seed"] == 17

    def test_console_script(self, small_config, tmp_path):
        proc = subprocess.run([sys.executable, "-m", "fieldcrystal.harness.cli", "conditions", "--config",
                               small_config, "--out", str(tmp_path)], capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        assert "PASS conditions.r2_prime_margin" in proc.stdout
