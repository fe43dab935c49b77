import json
from pathlib import Path

import numpy as np
import pytest

from spintrack.cli import EXIT_CONFIG, EXIT_RUNTIME, main
from spintrack.records import write_text

ROOT = Path(__file__).resolve().parents[1]
SMALL = """
g = 1.1e-7
atoms_mean = 1.88e6
photons_v = 2.74e6
photons_h = 1.49e6
eta = 3e-10
p_return = 0.7
pump_efficiency = 0.98
t2_gradient = 20000.0
omega_jitter_rms = 2e-4
repetitions = {reps}
seed = 11
te_start = 310.0
te_stop = 390.0
te_step = 40.0
"""


def small_config(tmp_path, reps=4, extra=""):
    return write_text(tmp_path / "run.toml", SMALL.format(reps=reps) + extra)


def test_simulate_writes_manifest_and_traces(tmp_path):
    out = tmp_path / "out"
    assert main(["simulate", "--config", str(small_config(tmp_path)), "--out", str(out)]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "simulate" and manifest["seed"] == 11
    assert len(manifest["config_sha256"]) == 64
    assert manifest["units"]["time"] == "us"
    ids = {line.split(",")[0] for line in (out / "traces.csv").read_text().splitlines()[1:]}
    assert ids == {"0", "1", "2", "3"}
    assert (out / "truth.csv").exists()


def test_simulate_per_trace_files(tmp_path):
    cfg = small_config(tmp_path, reps=3, extra='trace_layout = "files"\n')
    out = tmp_path / "out"
    assert main(["simulate", "--config", str(cfg), "--out", str(out)]) == 0
    assert len(list(out.glob("trace_*.csv"))) == 3


def test_missing_key_is_a_config_error(tmp_path, capsys):
    cfg = write_text(tmp_path / "bad.toml", SMALL.format(reps=2).replace("photons_v = 2.74e6\n", ""))
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_CONFIG
    assert "photons_v" in capsys.readouterr().err


def test_unknown_key_and_bad_type(tmp_path, capsys):
    cfg = small_config(tmp_path, extra="colour = 3\n")
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_CONFIG
    assert "colour" in capsys.readouterr().err
    cfg = write_text(tmp_path / "t.toml", SMALL.format(reps='"four"'))
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["simulate", "--config", str(tmp_path / "none.toml")]) == EXIT_CONFIG


def test_rerun_is_byte_identical_across_jobs(tmp_path):
    cfg = small_config(tmp_path, reps=3)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["simulate", "--config", str(cfg), "--out", str(a)]) == 0
    assert main(["simulate", "--config", str(cfg), "--out", str(b), "--jobs", "2"]) == 0
    for name in ("manifest.json", "traces.csv", "truth.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    c = tmp_path / "c"
    assert main(["simulate", "--config", str(cfg), "--out", str(c), "--seed", "12"]) == 0
    assert (a / "traces.csv").read_bytes() != (c / "traces.csv").read_bytes()


def test_track_writes_report_and_summary(tmp_path):
    cfg = small_config(tmp_path, reps=30)
    out = tmp_path / "out"
    assert main(["simulate", "--config", str(cfg), "--out", str(out)]) == 0
    assert main(["track", "--config", str(cfg), "--out", str(out)]) == 0
    summary = json.loads((out / "summary.json").read_text())
    for key in ("db_psi_steady", "db_rho_steady", "sql_crossing_us", "failed_traces", "weights", "n_traces"):
        assert key in summary
    assert summary["n_traces"] == 30 and summary["benchmark_source"] == "truth"
    report = (out / "report.csv").read_text().splitlines()
    assert len(report) == 1 + 3
    assert (out / "residuals.csv").exists()


def test_track_with_empty_trace_dir(tmp_path, capsys):
    empty = tmp_path / "empty"
    empty.mkdir()
    cfg = small_config(tmp_path)
    code = main(["track", "--config", str(cfg), "--traces", str(empty), "--out", str(tmp_path / "o")])
    assert code == EXIT_CONFIG
    assert "no trace files" in capsys.readouterr().err


def test_failing_track_is_a_runtime_error(tmp_path):
    # flat traces carry no precession signal, so every global fit fails
    times = np.arange(334) * 3.0
    rows = "".join(f"{i},{float(t)!r},0.0\n" for i in range(5) for t in times)
    traces = write_text(tmp_path / "flat" / "traces.csv", "trace_id,t_us,phi_rad\n" + rows)
    out = tmp_path / "out"
    code = main(["track", "--config", str(small_config(tmp_path)), "--traces", str(traces), "--out", str(out)])
    assert code == EXIT_RUNTIME
    assert json.loads((out / "manifest.json").read_text())["command"] == "track"


def test_calibrate_alpha(capsys):
    assert main(["calibrate", "alpha", "--chi", "0.99", "--p", "0.7", "--np", "36"]) == 0
    data = json.loads(capsys.readouterr().out)
    assert data["beta"] == pytest.approx(0.1081, abs=1e-4)
    assert data["alpha"] == pytest.approx(8 * data["beta"])


def test_calibrate_mu1_and_mu2(tmp_path, capsys):
    ns = np.linspace(2e5, 2e6, 10)
    p1 = write_text(tmp_path / "m1.csv", "N_A,value\n" + "".join(f"{n!r},{3.9e-3 + 7.07e-8 * n!r}\n" for n in ns.tolist()))
    assert main(["calibrate", "mu1", "--input", str(p1), "--out", str(tmp_path / "c")]) == 0
    data = json.loads(capsys.readouterr().out)
    assert data["mu1"] == pytest.approx(7.07e-8, rel=1e-9)
    assert json.loads((tmp_path / "c" / "calibration_mu1.json").read_text()) == data
    p2 = write_text(tmp_path / "m2.csv", "N_A,value\n" + "".join(f"{n!r},{4e-7 + 6.5e-15 * n!r}\n" for n in ns.tolist()))
    assert main(["calibrate", "mu2", "--input", str(p2), "--alpha", "0.86"]) == 0
    assert json.loads(capsys.readouterr().out)["mu2"] == pytest.approx(1.51e-14, abs=0.01e-14)
    bad = write_text(tmp_path / "bad.csv", "N_A,value\n1e6,abc\n")
    assert main(["calibrate", "mu1", "--input", str(bad)]) == EXIT_CONFIG


def test_calibrate_moments_is_seeded(capsys):
    argv = ["calibrate", "moments", "--samples", "20000", "--seed", "3"]
    assert main(argv) == 0
    first = capsys.readouterr().out
    assert main(argv) == 0
    assert capsys.readouterr().out == first
    assert json.loads(first)["mu2"] > json.loads(first)["mu1"] ** 2


def test_sweep_default_and_single_candidate(tmp_path):
    cfg = small_config(tmp_path, reps=30)
    out = tmp_path / "s"
    assert main(["sweep", "--config", str(cfg), "--out", str(out)]) == 0
    lines = (out / "sweep.csv").read_text().splitlines()
    assert lines[0] == "delta_t_us,trace_gamma_cond,stderr" and len(lines) == 1 + 7
    summary = json.loads((out / "sweep_summary.json").read_text())
    assert summary["argmin_us"] in [float(x.split(",")[0]) for x in lines[1:]]
    one = tmp_path / "one"
    assert main(["sweep", "--config", str(cfg), "--out", str(one), "--candidates", "150"]) == 0
    assert len((one / "sweep.csv").read_text().splitlines()) == 2
    assert main(["sweep", "--config", str(cfg), "--out", str(one), "--candidates", "a,b"]) == EXIT_CONFIG


def test_shipped_config_loads():
    from spintrack.cli import load_config, pulse_train

    cfg = load_config(ROOT / "configs" / "reference.toml")
    train = pulse_train(cfg)
    assert cfg["repetitions"] == 450 and train.pulse_count == 334


def test_commands_need_a_config(capsys):
    assert main(["simulate"]) == EXIT_CONFIG
    assert "--config" in capsys.readouterr().err
