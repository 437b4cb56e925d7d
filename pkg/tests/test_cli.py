import json

import pytest

from kinhilbert import cli
from kinhilbert.config import ConfigError, ExperimentConfig, from_mapping, load_config


def test_missing_config_exit_2(tmp_path, capsys):
    path = tmp_path / "nope.ini"
    assert cli.main(["verify", "--config", str(path)]) == 2
    assert str(path) in capsys.readouterr().err


def test_invalid_field_is_named(tmp_path, capsys):
    ini = tmp_path / "c.ini"
    ini.write_text("[model]\nkappa = -3.5\n")
    assert cli.main(["verify", "--config", str(ini)]) == 2
    assert "model.kappa" in capsys.readouterr().err
    with pytest.raises(ConfigError) as ei:
        from_mapping({"grid.bogus": "1"})
    assert ei.value.field == "grid.bogus"


@pytest.mark.parametrize("key,val", [("weights.frak_a", "0.5"), ("knudsen.ds", "20 10"),
                                     ("euler.far", "open"), ("expand.eps", "0.7"),
                                     ("sweep.presets", "criterion-9")])
def test_validation(key, val):
    with pytest.raises(ConfigError) as ei:
        from_mapping({key: val}).validate()
    assert ei.value.field == key


def test_knudsen_needs_l_above_two():
    with pytest.raises(ConfigError):
        from_mapping({"run.subcommand": "knudsen", "weights.l": "2"}).validate()


def test_config_file_roundtrip(tmp_path):
    ini = tmp_path / "c.ini"
    ini.write_text("[run]\nsubcommand = euler\nseed = 3\n[euler]\ndelta_E = 0.01\nt_end = 0.05\n"
                   "[state]\nu = 0.1, 0, 0\n")
    cfg = load_config(ini)
    assert cfg.subcommand == "euler" and cfg.seed == 3 and cfg.u == (0.1, 0.0, 0.0)
    assert cfg.digest() == load_config(ini).digest()
    assert cfg.digest() != ExperimentConfig().digest()


def test_euler_run_is_reproducible(tmp_path):
    outs = []
    for k in range(2):
        out = tmp_path / f"r{k}"
        assert cli.main(["euler", "--out", str(out), "--set", "euler.t_end=0.05",
                         "--set", "euler.n=100"]) == 0
        outs.append(((out / "euler_profiles.csv").read_bytes(), (out / "euler.json").read_bytes()))
    assert outs[0] == outs[1]
    rep = json.loads(outs[0][1])
    assert rep["provenance"]["parameters"]["t_end"] == 0.05
    assert rep["acoustic_l2_error"] < 1e-4
    assert outs[0][0].startswith(b"# config_hash=")


def test_verify_and_coeffs(tmp_path):
    assert cli.main(["verify", "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "verify.json").read_text())
    assert rep["passed"] and rep["self_adjoint_probe"] < 1e-12
    assert {"symmetry", "null_residual_max", "c0_positive"} <= set(rep["checks"])
    assert cli.main(["coeffs", "--kappa", "-1", "--out", str(tmp_path)]) == 0
    lines = [l for l in (tmp_path / "coeffs.csv").read_text().splitlines() if not l.startswith("#")]
    assert lines[0].split(",")[:3] == ["T", "kappa", "mu"]
    assert float(lines[1].split(",")[2]) > 0


def test_assemble_op_outputs(tmp_path):
    assert cli.main(["assemble-op", "--n", "8", "--out", str(tmp_path)]) == 0
    for name in ("operator.npz", "operator.csv", "operator.json"):
        assert (tmp_path / name).exists()


def test_sweep_single_preset(tmp_path, capsys):
    assert cli.main(["sweep", "criterion-6", "--out", str(tmp_path)]) == 0
    assert "criterion-6: PASS" in capsys.readouterr().out
    assert json.loads((tmp_path / "summary.json").read_text())["criterion-6"] is True


def test_solver_failure_exit_3(tmp_path):
    # a strong compression leaves the smooth regime before t_end
    code = cli.main(["euler", "--out", str(tmp_path), "--set", "euler.delta_E=0.9",
                     "--set", "euler.profile=smooth", "--set", "euler.t_end=2"])
    assert code == 3
    err = json.loads((tmp_path / "error.json").read_text())
    assert err["error"] in ("LifespanExceeded", "PositivityError")
