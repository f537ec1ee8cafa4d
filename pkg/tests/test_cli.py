import json
import subprocess
import sys

import pytest

from rotvi import cli
from rotvi.errors import NumericalError

SMALL = {
    "quadrature": "mc:512",
    "mfvi": {"max_iter": 100},
    "rovi": {"restarts": 1, "max_iter": 100},
    "lmc": {"steps": 1000, "burn_in": 100, "chains": 4},
    "output": {"grid": 20, "n_eval": 1000},
}


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(SMALL))
    return path


def run(argv, capsys):
    code = cli.main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


class TestBounds:
    def test_symmetric_mixture(self, capsys):
        code, out, _ = run(["bounds", "--preset", "fig1-m3"], capsys)
        assert code == 0
        rep = json.loads(out)["bounds"]
        assert rep["epsilon"] == pytest.approx(0.002698, abs=1e-6)
        assert rep["collapse_bound"] == pytest.approx(0.2251, abs=1e-4)

    def test_writes_summary(self, tmp_path, capsys):
        code, out, _ = run(["bounds", "--preset", "fig3a", "--out", str(tmp_path / "o")], capsys)
        assert code == 0
        assert json.loads((tmp_path / "o" / "summary.json").read_text()) == json.loads(out)


class TestFits:
    @pytest.mark.parametrize("command", ["fit-mfvi", "fit-rovi"])
    def test_fit(self, command, small_config, tmp_path, capsys):
        out_dir = tmp_path / command
        code, out, _ = run([command, "--preset", "fig3b", "--config", str(small_config), "--out", str(out_dir), "--seed", "3"], capsys)
        assert code == 0
        payload = json.loads(out)
        method = command.split("-")[1]
        assert payload["seed"] == 3 and payload["command"] == command
        assert set(payload["methods"]) == {method}
        assert (out_dir / f"{method}_trace.csv").exists() and (out_dir / "summary.json").exists()

    def test_sample_lmc(self, small_config, tmp_path, capsys):
        code, out, _ = run(["sample-lmc", "--preset", "fig3b", "--config", str(small_config), "--out", str(tmp_path)], capsys)
        assert code == 0
        assert json.loads(out)["methods"]["lmc"]["n_samples"] == 4 * 90
        assert (tmp_path / "lmc_samples.csv").exists()

    def test_experiment(self, small_config, tmp_path, capsys):
        code, out, _ = run(["experiment", "fig3c", "--config", str(small_config), "--out", str(tmp_path), "--restarts", "1"], capsys)
        assert code == 0
        payload = json.loads(out)
        assert payload["config"]["rovi"]["restarts"] == 1
        assert (tmp_path / "contour_rovi.csv").exists()

    def test_gradcheck(self, capsys):
        code, out, _ = run(["gradcheck", "--preset", "fig3c", "--points", "2"], capsys)
        assert code == 0
        assert json.loads(out)["gradcheck"]["passed"] is True


class TestErrors:
    def test_unknown_preset(self, capsys):
        with pytest.raises(SystemExit) as exc:
            cli.main(["bounds", "--preset", "fig9"])
        assert exc.value.code == 1

    def test_unknown_command(self, capsys):
        with pytest.raises(SystemExit) as exc:
            cli.main(["frobnicate"])
        assert exc.value.code == 1

    def test_no_target(self, capsys):
        code, _, err = run(["bounds"], capsys)
        assert code == 1 and "error" in err

    def test_bad_quadrature(self, capsys):
        code, _, err = run(["fit-mfvi", "--preset", "fig3a", "--quadrature", "simpson:4"], capsys)
        assert code == 1 and "quadrature" in err

    def test_missing_config(self, tmp_path, capsys):
        code, _, _ = run(["bounds", "--config", str(tmp_path / "missing.json")], capsys)
        assert code == 1

    def test_bad_target(self, tmp_path, capsys):
        p = tmp_path / "t.json"
        p.write_text(json.dumps({"target": {"weights": [0.5, 0.6], "means": [[0, 0], [1, 1]], "covariances": [[[1, 0], [0, 1]]] * 2}}))
        code, _, _ = run(["bounds", "--config", str(p)], capsys)
        assert code == 1

    def test_unwritable_out(self, tmp_path, capsys):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        code, _, _ = run(["bounds", "--preset", "fig3a", "--out", str(blocker / "sub")], capsys)
        assert code == 1

    def test_numerical_failure(self, monkeypatch, capsys):
        def boom(*args, **kwargs):
            raise NumericalError("diverged")

        monkeypatch.setattr(cli, "run_lmc_method", boom)
        code, _, err = run(["sample-lmc", "--preset", "fig3a"], capsys)
        assert code == 2 and "numerical failure" in err


def test_console_entry_point():
    res = subprocess.run([sys.executable, "-m", "rotvi.cli", "bounds", "--preset", "fig3d"], capture_output=True, text=True)
    assert res.returncode == 0
    assert json.loads(res.stdout)["command"] == "bounds"
