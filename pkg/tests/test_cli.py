import re

import numpy as np
import pytest
import yaml

from ddrom import cli, lmi
from ddrom.config import ConfigError, PipelineConfig, default_mapping, load_config
from ddrom.experiment import DataRichnessError
from ddrom.reduction import load_reduction, save_reduction


def report(path):
    out = {}
    for line in path.read_text().splitlines():
        k, _, v = line.partition("=")
        out[k] = v
    return out


# -- config --------------------------------------------------------------------------

@pytest.mark.parametrize("name", ["ct10", "dt10", "pendulum_ct", "pendulum_dt"])
def test_benchmark_defaults_load(name):
    cfg = load_config(benchmark_id=name)
    assert cfg.name == name
    assert cfg.reduction.nhat == 2
    assert (cfg.scenario is not None) == (name in ("ct10", "dt10"))


def test_benchmark_hyperparameters():
    ct = load_config(benchmark_id="ct10").reduction
    assert (ct.kappa_hat, ct.mu, ct.gamma) == (1.0, 0.5, 0.1)
    np.testing.assert_array_equal(ct.fixed, -1e-4 * np.eye(2))
    dt = load_config(benchmark_id="dt10").reduction
    assert (dt.kappa, dt.mu, dt.eta) == (0.5, 1.0, 0.99)
    assert load_config(benchmark_id="pendulum_dt").reduction.kappa == 0.45


def test_nu_inference_is_flagged():
    assert load_config(benchmark_id="dt10").nu() == (72.0, True)
    assert load_config(benchmark_id="pendulum_dt").nu() == (1.0, False)
    u, inferred = load_config(benchmark_id="ct10").uhat_inf()
    assert u == pytest.approx(6 * np.sqrt(2)) and inferred


def test_config_file_round_trip(tmp_path):
    cfg = load_config(benchmark_id="dt10")
    cfg.dump(tmp_path / "c.yaml")
    back = load_config(tmp_path / "c.yaml")
    assert back.digest() == cfg.digest()
    assert back.reduction.digest() == cfg.reduction.digest()


def test_output_dir_does_not_change_digest():
    a = load_config(benchmark_id="ct10")
    assert a.with_overrides(output="x").digest() == a.with_overrides(output="y").digest()
    assert a.with_overrides(seed=3).digest() != a.digest()


def test_config_rejects_bad_input(tmp_path):
    with pytest.raises(ConfigError):
        load_config(benchmark_id="ct11")
    with pytest.raises(ConfigError):
        PipelineConfig.from_mapping({"benchmark": "ct10", "colour": 1})
    with pytest.raises(ConfigError):
        PipelineConfig.from_mapping({"benchmark": "ct10", "reduction": {"nhat": 11}})
    with pytest.raises(ConfigError):
        PipelineConfig.from_mapping({"benchmark": "ct10", "reduction": {"fixed": [[1.0]]}})
    with pytest.raises(ConfigError):
        PipelineConfig.from_mapping({"benchmark": "dt10", "experiment": {"bogus": 1}})
    with pytest.raises(ConfigError):
        PipelineConfig.from_mapping({"benchmark": "ct10", "scenario": {"target_box": [[9, 11], [9, 10]]}})


def test_custom_plant_config(tmp_path):
    mapping = {
        "plant": {"time_kind": "continuous", "A": [[-1, 0, 0.5], [0, -2, 0]], "B": [[1, 0], [0, 1]]},
        "dictionary": {"state_dim": 2, "nonlinear": [{"kind": "sine", "args": [1]}]},
        "experiment": {"T": 10, "tau": 0.05, "oracle_derivatives": True},
        "reduction": {"nhat": 1, "kappa_hat": 1.0, "mu": 0.5, "fixed": [[-1.0]]},
    }
    path = tmp_path / "custom.yaml"
    path.write_text(yaml.safe_dump(mapping))
    cfg = load_config(path)
    assert cfg.name == "custom" and cfg.spec.size == 3
    out = tmp_path / "out"
    assert cli.main(["collect", "--config", str(path), "--out", str(out)]) == 0
    assert cli.main(["reduce", "--out", str(out)]) == 0
    assert cli.main(["verify", "--out", str(out)]) == 0
    assert cli.main(["bound", "--out", str(out)]) == 0
    assert (out / "reduction.txt").exists()


# -- cli -----------------------------------------------------------------------------

def test_bound_flags_ct(capsys):
    assert cli.main(["bound", "--alpha", "1.2048", "--rho", "0.0812", "--kappa", "0.5",
                     "--uhat-inf", "6", "--s0", "0"]) == 0
    out = capsys.readouterr().out
    val = float(re.search(r"^literal_bound=(\S+)", out, re.M).group(1))
    assert val == pytest.approx(0.809, abs=5e-4)


def test_bound_flags_dt(capsys, tmp_path):
    assert cli.main(["bound", "--discrete", "--alpha", "0.0056", "--rho", "0.00032", "--kappa",
                     "0.45", "--eta", "0.99", "--nu", "1", "--out", str(tmp_path)]) == 0
    rep = report(tmp_path / "bound_report.txt")
    assert float(rep["epsilon"]) == pytest.approx(0.324, abs=1e-3)
    assert rep["nu_inferred"] == "no"


def test_bound_flags_missing_values(capsys):
    assert cli.main(["bound", "--alpha", "1", "--rho", "0.1"]) == cli.EXIT_INPUT
    assert "error:" in capsys.readouterr().err


def test_collect_short_experiment_is_rank_error(tmp_path, capsys):
    out = tmp_path / "o"
    code = cli.main(["collect", "--benchmark", "ct10", "--T", "20", "--out", str(out)])
    assert code == cli.EXIT_INPUT
    rep = report(out / "collect_report.txt")
    assert rep["D.verdict"] == "RANK DEFICIENT"
    assert "d+1" in rep["warning"]
    assert cli.main(["reduce", "--out", str(out)]) == cli.EXIT_INPUT


def test_missing_artifacts_are_input_errors(tmp_path):
    assert cli.main(["reduce", "--benchmark", "dt10", "--out", str(tmp_path / "none")]) == cli.EXIT_INPUT
    assert cli.main(["verify"]) == cli.EXIT_INPUT


def test_infeasible_reduction_exit_code(tmp_path):
    out = tmp_path / "o"
    assert cli.main(["collect", "--benchmark", "pendulum_dt", "--out", str(out)]) == 0
    assert "forward Euler" in report(out / "collect_report.txt")["discretization"]
    # kappa close to zero asks for a contraction the data cannot certify
    assert cli.main(["reduce", "--out", str(out), "--kappa", "0.001"]) == cli.EXIT_CERT


@pytest.fixture(scope="module")
def pendulum_demo(tmp_path_factory):
    out = tmp_path_factory.mktemp("demo") / "pendulum_ct"
    code = cli.main(["demo", "pendulum_ct", "--out", str(out)])
    return code, out


def test_demo_pendulum_ct(pendulum_demo):
    code, out = pendulum_demo
    assert code == 0
    for name in ("excited.csv", "zero_input.csv", "reduction.txt", "config.yaml", "manifest.txt",
                 *cli.REPORTS.values()):
        if name == "synthesis_report.txt":
            continue
        assert (out / name).exists(), name
    bound = report(out / "bound_report.txt")
    assert float(bound["kappa"]) == 1.0
    assert float(bound["alpha"]) > 0 and float(bound["rho"]) > 0
    for rep in map(report, (out / n for n in ("collect_report.txt", "reduce_report.txt",
                                              "verify_report.txt", "bound_report.txt"))):
        assert rep["tool_version"] and rep["config_hash"] and rep["data_hash"]
    assert report(out / "verify_report.txt")["verdict"] == "pass"


def test_tampered_archive_fails_verification(pendulum_demo, tmp_path):
    _, out = pendulum_demo
    red = load_reduction(out / "reduction.txt")
    bad = tmp_path / "bad.txt"
    save_reduction(red.replace(rho=red.rho * 0.01), bad)
    code = cli.main(["verify", "--out", str(out), "--archive", str(bad)])
    assert code == cli.EXIT_CERT
    assert report(out / "verify_report.txt")["verdict"] == "FAIL"
    # restore the passing report
    assert cli.main(["verify", "--out", str(out)]) == 0


def test_stages_rerun_reproduce_artifacts(pendulum_demo, tmp_path):
    _, out = pendulum_demo
    other = tmp_path / "again"
    assert cli.main(["demo", "pendulum_ct", "--out", str(other)]) == 0
    assert (other / "manifest.txt").read_text() == (out / "manifest.txt").read_text()


def test_exit_code_mapping():
    assert cli._exit_code(lmi.InfeasibleError("x")) == 2
    assert cli._exit_code(cli.CertificateFailure("x")) == 2
    assert cli._exit_code(cli.StageError("reduce", DataRichnessError("x"))) == 3
    assert cli._exit_code(ConfigError("x")) == 3
    assert cli._exit_code(RuntimeError("x")) == 4


def test_default_mapping_has_output():
    m = default_mapping("dt10")
    assert m["output"] == "out/dt10" and m["experiment"]["seed"] == 1
