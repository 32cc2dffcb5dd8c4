import json
import subprocess
import sys

import numpy as np
import pytest

from emosim import cli
from emosim import measurement as meas


def run_json(capsys, *argv):
    code = cli.main([*argv, "--json"])
    out = capsys.readouterr().out
    return code, (json.loads(out) if code == 0 else None)


@pytest.fixture(scope="module")
def seeded_runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("runs")
    dirs = {}
    for name, variant in (("emo_a", "emo"), ("emo_b", "emo"), ("sm", "spin-motion")):
        d = base / name
        assert cli.main(["run", "--variant", variant, "--shots", "500", "--seed", "7", "--out-dir", str(d)]) == 0
        dirs[name] = d
    return dirs


class TestRun:
    def test_analytic_noiseless(self, tmp_path, capsys):
        code, fit = run_json(capsys, "run", "--variant", "emo", "--noise", "off", "--shots", "0", "--analytic",
                             "--out-dir", str(tmp_path))
        assert code == 0
        assert fit["C2"] == pytest.approx(1.0, abs=1e-9)
        assert fit["sigma"]["C2"] == pytest.approx(0.0, abs=1e-9)
        assert fit["entangled"] is True
        report = json.loads((tmp_path / "checkpoints.json").read_text())
        assert all(abs(c["fidelity"] - 1) < 1e-9 for c in report["checkpoints"].values())

    def test_byte_identical(self, seeded_runs):
        for f in ("parity.csv", "fit.json", "checkpoints.json"):
            assert (seeded_runs["emo_a"] / f).read_bytes() == (seeded_runs["emo_b"] / f).read_bytes()

    def test_spin_motion_beats_emo(self, seeded_runs):
        emo = json.loads((seeded_runs["emo_a"] / "fit.json").read_text())
        sm = json.loads((seeded_runs["sm"] / "fit.json").read_text())
        assert sm["C2"] > emo["C2"]

    def test_outputs_round_trip(self, seeded_runs):
        d = seeded_runs["emo_a"]
        refit = meas.fit_parity(meas.read_parity_csv(d / "parity.csv"))
        emitted = json.loads((d / "fit.json").read_text())
        for k in meas.PARAMS:
            assert getattr(refit, k) == pytest.approx(emitted[k], abs=1e-12)
        np.testing.assert_allclose(refit.cov, emitted["cov"], atol=1e-12)

    def test_csv_shape(self, seeded_runs):
        rows = (seeded_runs["emo_a"] / "parity.csv").read_text().splitlines()
        assert rows[0] == "phi_p,parity,std_error,shots"
        assert len(rows) == 17
        assert all(r.endswith(",500") for r in rows[1:])

    def test_env_seed_overridden_by_flag(self, tmp_path, monkeypatch, seeded_runs):
        monkeypatch.setenv(cli.SEED_ENV, "99")
        assert cli.main(["run", "--seed", "7", "--out-dir", str(tmp_path / "x")]) == 0
        assert (tmp_path / "x" / "parity.csv").read_bytes() == (seeded_runs["emo_a"] / "parity.csv").read_bytes()

    def test_env_seed_used(self, tmp_path, monkeypatch, seeded_runs):
        monkeypatch.setenv(cli.SEED_ENV, "7")
        assert cli.main(["run", "--out-dir", str(tmp_path / "y")]) == 0
        assert (tmp_path / "y" / "parity.csv").read_bytes() == (seeded_runs["emo_a"] / "parity.csv").read_bytes()

    def test_config_file_and_flag_precedence(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"variant": "spin_motion", "noise": "off", "phases": 8, "shots": 3,
                                   "noise_overrides": {"field_gradient_freq": 250}}))
        code, fit = run_json(capsys, "run", "--config", str(cfg), "--variant", "emo", "--analytic",
                             "--out-dir", str(tmp_path))
        assert code == 0
        report = json.loads((tmp_path / "checkpoints.json").read_text())
        assert report["config"]["variant"] == "emo"
        assert report["config"]["phases"] == 8
        assert report["config"]["noise_overrides"] == {"field_gradient_freq": 250}
        assert fit["C2"] == pytest.approx(1.0, abs=1e-9)

    def test_noise_set_override(self, tmp_path):
        args = cli.make_parser().parse_args(["run", "--set", "prep_fidelity=0.95", "--set", "cutoff=3"])
        model = cli.build_run_config(args).noise_model()
        assert model.prep_fidelity == 0.95 and model.cutoff == 3 and isinstance(model.cutoff, int)


class TestExitCodes:
    @pytest.mark.parametrize("argv", [
        ["run", "--variant", "teleport"],
        ["run", "--phases", "3"],
        ["run", "--shots", "0"],
        ["run", "--set", "warp_drive=1"],
        ["run", "--set", "prep_fidelity=banana"],
        ["run", "--variant", "control_after_state4"],
        ["control", "--variant", "emo"],
        ["modes", "--chain", "Be,Xe"],
        ["modes", "--calibrate", "breathing=3MHz"],
    ])
    def test_config_errors(self, argv, tmp_path, capsys):
        assert cli.main([*argv, "--out-dir", str(tmp_path)] if argv[0] == "run" else argv) == cli.EXIT_CONFIG
        assert "error" in capsys.readouterr().err

    def test_bad_config_file(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text('{"shots": 10, "colour": "blue"}')
        assert cli.main(["run", "--config", str(cfg)]) == cli.EXIT_CONFIG

    def test_fit_failure_is_numerical(self, tmp_path):
        pts = [meas.ParityPoint(p, 0.1, 0.05, 100) for p in (0.0, 0.5, 1.0)]
        meas.write_parity_csv(pts, tmp_path / "few.csv")
        assert cli.main(["fit", str(tmp_path / "few.csv")]) == cli.EXIT_NUMERIC

    def test_missing_csv(self, tmp_path):
        assert cli.main(["fit", str(tmp_path / "nope.csv")]) == cli.EXIT_CONFIG


class TestModes:
    def test_pair(self, capsys):
        code, r = run_json(capsys, "modes", "--chain", "Be,Mg", "--calibrate", "common=2.3MHz")
        assert code == 0
        assert r["frequencies_mhz"][0] == pytest.approx(2.3, rel=1e-6)
        assert r["frequencies_mhz"][1] == pytest.approx(4.9, rel=0.02)
        assert len(r["ground_state_sizes_nm"]) == 2

    def test_four_ion(self, capsys):
        code, r = run_json(capsys, "modes", "--chain", "Be,Mg,Mg,Be", "--calibrate", "inphase=2.0MHz")
        assert code == 0
        assert len(r["frequencies_mhz"]) == 4
        assert r["frequencies_mhz"][0] == pytest.approx(2.0, rel=1e-6)

    def test_double_well(self, capsys):
        code, r = run_json(capsys, "modes", "--double-well", "--spacing", "0.24mm")
        assert code == 0
        ex = r["exchange"]
        assert 2.5 <= ex["exchange_rate_hz"] <= 10
        assert ex["transfer_bound"] == pytest.approx(1.6e-7, rel=0.1)
        assert ex["detuning_hz"] == 25e3

    def test_text_table(self, capsys):
        assert cli.main(["modes", "--chain", "Be,Mg"]) == 0
        out = capsys.readouterr().out
        assert "freq (MHz)" in out and len(out.strip().splitlines()) == 3


class TestControl:
    def test_noiseless_state4(self, capsys):
        code, r = run_json(capsys, "control", "--variant", "control_after_state4", "--noise", "off", "--analytic")
        assert code == 0
        assert (r["P_upup"], r["P_downdown"], r["P_mixed"]) == pytest.approx((0.5, 0, 0.5), abs=1e-12)

    def test_noiseless_state5(self, capsys):
        code, r = run_json(capsys, "control", "--variant", "control-after-state5", "--noise", "off", "--analytic")
        assert r["P_upup"] == pytest.approx(1, abs=1e-12)

    def test_sampled_has_uncertainties(self, capsys):
        code, r = run_json(capsys, "control", "--variant", "control_after_state5", "--shots", "2000", "--seed", "3")
        assert code == 0
        assert r["shots"] == 2000
        assert 0 < r["sigma"]["P_upup"] < 0.05


class TestFitCommand:
    def test_offline_fit(self, tmp_path, capsys):
        phases = np.linspace(0, 2 * np.pi, 16, endpoint=False)
        pts = [meas.ParityPoint(p, 0.57 * np.cos(2 * p + 0.3) + 0.01, 0.02, 500) for p in phases]
        meas.write_parity_csv(pts, tmp_path / "p.csv")
        code, r = run_json(capsys, "fit", str(tmp_path / "p.csv"), "--out", str(tmp_path / "f.json"))
        assert code == 0
        assert r["C2"] == pytest.approx(0.57, abs=1e-12)
        assert json.loads((tmp_path / "f.json").read_text())["C2"] == r["C2"]


def test_console_script_module_entry(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "emosim.cli", "modes", "--chain", "Be,Mg", "--json"],
                          capture_output=True, text=True, check=True)
    assert json.loads(proc.stdout)["species"] == ["Be", "Mg"]
