import json

import pytest
import yaml

from barrierlab.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main
from barrierlab.config import EXPERIMENT_DEFAULTS, ConfigError, resolve_config, validate_config
from barrierlab.experiments import EXPERIMENTS, SUMMARY_COLUMNS


def _write(tmp_path, data, name="cfg.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(data))
    return p


# -- validation ------------------------------------------------------------------


def test_registry_matches_defaults():
    assert set(EXPERIMENTS) == set(EXPERIMENT_DEFAULTS)
    assert len(EXPERIMENTS) == 8


@pytest.mark.parametrize("name", sorted(EXPERIMENT_DEFAULTS))
def test_defaults_are_valid(name, tmp_path):
    assert validate_config(_write(tmp_path, {"experiment": name})) == []


def test_theta_above_start_is_rejected(tmp_path):
    errors = validate_config(_write(tmp_path, {"experiment": "stopping-times", "theta": 2.0}))
    assert any("theta" in e and "h(x0)" in e for e in errors)


def test_dt_above_horizon_is_rejected(tmp_path):
    errors = validate_config(_write(tmp_path, {"experiment": "rcbf-safe", "dt": 2.0, "horizon": 1.0}))
    assert any("dt" in e for e in errors)


def test_unknown_alpha_family_lists_choices(tmp_path):
    cfg = {"experiment": "rcbf-safe", "controller": {"kind": "rcbf", "alpha3": {"family": "cubic"}}}
    errors = validate_config(_write(tmp_path, cfg))
    assert any("linear" in e and "power" in e for e in errors)


def test_unknown_experiment_lists_registered_names(tmp_path):
    errors = validate_config(_write(tmp_path, {"experiment": "nope"}))
    assert len(errors) == 1
    assert all(name in errors[0] for name in EXPERIMENTS)


def test_errors_are_collected(tmp_path):
    cfg = {"experiment": "stopping-times", "theta": 5.0, "n_paths": 0, "bogus": 1, "dt": -1.0}
    errors = validate_config(_write(tmp_path, cfg))
    assert len(errors) >= 4


def test_yaml_exponent_strings_are_numbers(tmp_path):
    cfg = resolve_config(_write(tmp_path, {"experiment": "rcbf-safe", "dt": "1e-3", "n_paths": 10}))
    assert cfg.dt_list == [1e-3]


def test_overrides_win(tmp_path):
    cfg = resolve_config(_write(tmp_path, {"experiment": "rcbf-safe", "seed": 1}), {"seed": 9, "dt": 0.01})
    assert cfg.seed == 9 and cfg.dt_list == [0.01]


def test_resolve_raises_with_all_errors(tmp_path):
    with pytest.raises(ConfigError) as exc:
        resolve_config(_write(tmp_path, {"experiment": "rcbf-safe", "n_paths": -3, "horizon": 0}))
    assert len(exc.value.errors) >= 2


# -- CLI -------------------------------------------------------------------------


def test_cli_validate_codes(tmp_path, capsys):
    assert main(["validate", str(_write(tmp_path, {"experiment": "rcbf-safe"}))]) == EXIT_OK
    assert main(["validate", str(_write(tmp_path, {"experiment": "rcbf-safe", "dt": 5.0}, "bad.yaml"))]) == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_cli_missing_file_is_config_error(tmp_path):
    assert main(["validate", str(tmp_path / "absent.yaml")]) == EXIT_CONFIG


def test_cli_feller_classify_json(capsys):
    assert main(["feller-classify", "--gamma", "1", "--p", "0.5", "--sigma-bounded", "true"]) == EXIT_OK
    d = json.loads(capsys.readouterr().out)
    assert d["case_tag"] == "hits_zero_with_positive_prob"
    assert d["verdict"] == {"prob_T_finite": "positive", "prob_inf_positive": "unknown"}
    assert main(["feller-classify", "--gamma", "1", "--p", "2"]) == EXIT_OK
    d = json.loads(capsys.readouterr().out)
    assert d["case_tag"] == "null_recurrent_boundary" and d["s_at_inf"] == "inf"


def test_cli_feller_bad_parameters():
    assert main(["feller-classify", "--gamma", "-1", "--p", "1"]) == EXIT_CONFIG


SMALL = {"experiment": "rcbf-safe", "n_paths": 200, "dt": [0.1, 0.01], "seed": 4}


def test_cli_run_writes_reports(tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["run", str(_write(tmp_path, SMALL)), "--out", str(out)]) == EXIT_OK
    assert sorted(p.name for p in out.iterdir()) == ["digest.txt", "metadata.json", "results.json", "summary.csv"]
    header, *rows = (out / "summary.csv").read_text().splitlines()
    assert header.split(",") == list(SUMMARY_COLUMNS)
    assert len(rows) == 2
    res = json.loads((out / "results.json").read_text())
    assert res["config"]["seed"] == 4 and res["config"]["experiment"] == "rcbf-safe"


def test_cli_flags_override_config(tmp_path, capsys):
    out = tmp_path / "out"
    args = ["run", str(_write(tmp_path, SMALL)), "--out", str(out), "--seed", "11", "--n-paths", "50", "--dt", "0.05"]
    assert main(args) == EXIT_OK
    res = json.loads((out / "results.json").read_text())
    assert res["config"]["seed"] == 11 and res["config"]["n_paths"] == 50
    assert res["config"]["dt"] == 0.05


def test_cli_run_bad_config(tmp_path, capsys):
    assert main(["run", str(_write(tmp_path, {"experiment": "rcbf-safe", "n_paths": 0}))]) == EXIT_CONFIG


def test_cli_run_runtime_failure(tmp_path, capsys):
    cfg = {**SMALL, "x0": [0.05], "controller": {"kind": "rcbf", "alpha3": {"family": "linear", "k": 1.0}, "u_max": 0.1}}
    assert main(["run", str(_write(tmp_path, cfg)), "--out", str(tmp_path / "o")]) == EXIT_RUNTIME
    assert "runtime failure" in capsys.readouterr().err


@pytest.mark.parametrize(
    "cfg",
    [
        SMALL,
        {"experiment": "divergence-rate-sweep", "n_paths": 100, "dt": 0.01, "gamma_grid": [1.0], "p_grid": [0.5, 2.0]},
        {"experiment": "stopping-times", "n_paths": 100, "dt": [1e-3], "horizon": 0.05},
        {"experiment": "tanaka-check", "n_paths": 100, "dt": [0.01, 0.001]},
        {"experiment": "b-tilde-bound", "n_paths": 100, "pilot_paths": 100, "dt": 0.01},
    ],
    ids=lambda c: c["experiment"],
)
def test_rerun_is_byte_identical(cfg, tmp_path, capsys):
    path = _write(tmp_path, cfg)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", str(path), "--out", str(a)]) == EXIT_OK
    assert main(["run", str(path), "--out", str(b)]) == EXIT_OK
    for name in ("summary.csv", "results.json", "digest.txt"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


SHIPPED = sorted((__import__("pathlib").Path(__file__).parent.parent / "configs").glob("*.yaml"))


@pytest.mark.parametrize("path", SHIPPED, ids=lambda p: p.stem)
def test_shipped_configs_validate(path):
    assert validate_config(path) == []


def test_every_experiment_has_a_shipped_config():
    assert {p.stem for p in SHIPPED} == set(EXPERIMENTS)
