import pytest

from sustain.cli import main
from sustain.harness import read_trajectory_csv


@pytest.mark.parametrize("suite", ["bias", "lipschitz", "gradcheck", "reduction"])
def test_check_suites_pass(suite, capsys):
    assert main(["check", "--suite", suite]) == 0
    assert "pass" in capsys.readouterr().out


def test_check_all(capsys):
    assert main(["check"]) == 0
    out = capsys.readouterr().out
    assert out.count("pass") == 4


def test_run_and_fit(tmp_path, capsys):
    cfg = tmp_path / "exp.cfg"
    cfg.write_text(
        "experiment.name = smoke\n"
        "problem.kind = quadratic\n"
        "problem.sigma_g = 0.1\n"
        "run.T = 40\n"
        "run.seeds = 0\n"
        "schedule.K = 2\n"
        f"output.dir = {tmp_path}\n"
    )
    assert main(["run", "--config", str(cfg)]) == 0
    out = capsys.readouterr().out
    assert "summary:" in out
    traj = tmp_path / "smoke_sustain_seed0.csv"
    assert traj.exists()
    rows = read_trajectory_csv(traj)
    assert len(rows) == 40

    assert main(["fit", "--input", str(traj), "--metric", "tracking_sq",
                 "--tmin", "1", "--tmax", "39"]) == 0
    assert "exponent=" in capsys.readouterr().out


def test_run_override(tmp_path, capsys):
    cfg = tmp_path / "exp.cfg"
    cfg.write_text(
        "experiment.name = ov\nproblem.kind = quadratic\nrun.T = 5\n"
        f"run.seeds = 0\noutput.dir = {tmp_path}\nschedule.K = 1\n"
    )
    assert main(["run", "--config", str(cfg), "--run.T=7"]) == 0
    rows = read_trajectory_csv(tmp_path / "ov_sustain_seed0.csv")
    assert rows[-1]["t"] == 6
