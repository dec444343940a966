import json
import os

import pytest

from wentzell.expcli import (
    ConfigError,
    ExperimentConfig,
    emit_report,
    load_config,
    main,
    parse_config_text,
    run_experiment,
)


def test_defaults():
    cfg = ExperimentConfig()
    assert (cfg.n_r, cfg.n_theta, cfg.dt, cfg.T, cfg.resolution) == (16, 48, 1e-4, 0.1, 256)
    assert min(cfg.h) == 1e-3


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# comment\nmesh.n_r = 8\nmodel.a = 0.5, 2\njko.epsilon = auto\nseed=3\n")
    cfg = load_config(str(path), {"seed": "5", "time.T": "0.01"})
    assert cfg.n_r == 8 and cfg.a == (0.5, 2.0) and cfg.seed == 5 and cfg.T == 0.01
    assert cfg.epsilon is None


@pytest.mark.parametrize(
    "text",
    ["mesh.n_r = 0", "model.a = -1", "bogus.key = 1", "mesh.n_r", "time.dt = x", "time.T = 1e-6"],
)
def test_config_errors(tmp_path, text):
    path = tmp_path / "bad.cfg"
    path.write_text(text + "\n")
    with pytest.raises(ConfigError):
        load_config(str(path))


def test_hash_ignores_output_dir():
    a = ExperimentConfig()
    b = a.with_overrides({"output.dir": "elsewhere"})
    c = a.with_overrides({"seed": "1"})
    assert a.hash() == b.hash() != c.hash()


def test_parse_config_text():
    assert parse_config_text("a = 1 # x\n\n b=2") == {"a": "1", "b": "2"}


def test_cli_simple_commands(tmp_path, capsys):
    assert main(["mesh-info"]) == 0
    assert json.loads(capsys.readouterr().out)["node_count"] == 816
    assert main(["distance", "--a", "4", "--", "1,0", "-1,0"]) == 0
    assert float(capsys.readouterr().out) == pytest.approx(1.5707963267948966, rel=1e-9)
    out = str(tmp_path / "o")
    assert main(["--out", out, "geodesic", "--a", "4", "--", "0.9,0", "-0.9,0"]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["snell_angle_deg"] == pytest.approx(30.0, abs=1e-4)
    assert os.path.exists(os.path.join(out, "geodesic.json"))
    assert main(["--out", out, "--set", "time.T=0.001", "heat", "--a", "0.5"]) == 0
    lines = open(os.path.join(out, "heat.csv")).read().splitlines()
    assert lines[0].startswith("# config_hash=") and lines[1] == "t,mass,entropy,boundary_mass,trace_mismatch"
    assert main(["--out", out, "--set", "time.T=0.004", "--set", "metric.resolution=32", "jko"]) == 0
    assert open(os.path.join(out, "jko.csv")).read().splitlines()[1].startswith("n,t,entropy")


def test_cli_bad_config(tmp_path, capsys):
    assert main(["--set", "mesh.n_r=-2", "mesh-info"]) == 2
    with pytest.raises(SystemExit):
        main(["exp", "nonsense"])


def test_run_experiment_rejects_unknown(tmp_path):
    with pytest.raises(ConfigError):
        run_experiment("nonsense", ExperimentConfig(out_dir=str(tmp_path)))


def test_emit_report_empty(tmp_path):
    with pytest.raises(FileNotFoundError):
        emit_report(str(tmp_path))


def test_snell_experiment_deterministic(tmp_path):
    outs = []
    for k in range(2):
        d = str(tmp_path / f"r{k}")
        cfg = ExperimentConfig(a=(0.5, 4.0), out_dir=d, seed=11)
        assert run_experiment("snell", cfg) == 0
        emit_report(d)
        outs.append(
            (open(os.path.join(d, "snell.csv"), "rb").read(), open(os.path.join(d, "report.json"), "rb").read())
        )
    assert outs[0] == outs[1]
    rows = outs[0][0].decode().splitlines()
    assert rows[0].startswith("# config_hash=") and rows[1] == "a,alpha_measured_deg,alpha_predicted_deg"
    assert len(rows) == 2 + 20
    assert all(abs(float(r.split(",")[1]) - 30.0) <= 2 for r in rows[2:])


def test_envelope_experiment_low_resolution(tmp_path):
    cfg = ExperimentConfig(out_dir=str(tmp_path), resolution=64)
    run_experiment("envelope", cfg)
    summary = json.load(open(tmp_path / "envelope.json"))
    assert all(v == 0.0 for v in summary["max_abs_diff"].values())
    assert summary["antipodal_rel_error"] < 0.02
    report = emit_report(str(tmp_path))
    assert list(report["sections"]) == ["envelope"]


def test_ede_experiment_short(tmp_path):
    cfg = ExperimentConfig(out_dir=str(tmp_path), n_r=8, n_theta=24, T=2e-3, a=(1.0,))
    assert run_experiment("ede", cfg) == 0
    rows = open(tmp_path / "ede.csv").read().splitlines()
    assert rows[1] == "a,t,entropy,psi,psi_star,lagrangian" and len(rows) == 2 + 21
