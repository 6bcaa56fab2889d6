import csv
import hashlib

import numpy as np
import pytest
import yaml

from matsplan import cli, fitter, scenes


def run(*argv) -> int:
    return cli.main([str(a) for a in argv])


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def digest(path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline")
    assert run("generate", "--out", root / "gen", "--train-count", 30, "--test-count", 8, "--seed", 3) == 0
    manifest = root / "gen" / "manifest.json"
    assert run("fit", "--data", manifest, "--modes", 2, "--out", root / "fit", "--seed", 3) == 0
    model = root / "fit" / "model.json"
    assert run("eval", "--model", model, "--data", manifest, "--out", root / "eval") == 0
    return root, manifest, model


# --- configuration ------------------------------------------------------------------

def test_precedence_flags_over_file_over_defaults():
    doc = {"seed": 5, "fit": {"fit": {"num_modes": 4, "ridge": 0.5}, "data": "a.json"}}
    cfg = cli.resolve("fit", doc, {"fit.num_modes": 7, "data": None})
    assert cfg["fit"]["num_modes"] == 7  # flag
    assert cfg["fit"]["ridge"] == 0.5  # file
    assert cfg["data"] == "a.json"  # file, flag unset
    assert cfg["seed"] == 5
    assert cfg["fit"]["max_em_iters"] == fitter.FitConfig().max_em_iters  # default


def test_other_sections_are_ignored():
    doc = {"plan": {"steps": 3}, "fit": {"split": "test"}}
    assert cli.resolve("fit", doc, {})["split"] == "test"


def test_unknown_keys_are_config_errors():
    with pytest.raises(cli.ConfigError):
        cli.resolve("fit", {"fit": {"nonsense": 1}}, {})
    with pytest.raises(cli.ConfigError):
        cli.resolve("fit", {"typo": {}}, {})


def test_default_generation_counts():
    cfg = cli.resolve("generate", None, {})
    assert cfg["social_forces"]["train_count"] == 700
    assert cfg["social_forces"]["test_count"] == 100
    assert cli.resolve("fit", None, {})["fit"]["num_modes"] == 25


def test_exit_codes(tmp_path):
    assert run("plan", "--modes", 0, "--out", tmp_path / "a") == cli.EXIT_CONFIG
    assert run("fit", "--out", tmp_path / "b") == cli.EXIT_CONFIG  # no data
    assert run("eval", "--model", tmp_path / "missing.json", "--data", tmp_path / "m.json",
               "--out", tmp_path / "c") == cli.EXIT_IO
    assert run("plan", "--config", tmp_path / "missing.yaml") == cli.EXIT_IO
    bad = tmp_path / "bad.yaml"
    bad.write_text("plan: [1, 2]\n")
    assert run("plan", "--config", bad) == cli.EXIT_CONFIG
    bad.write_text("plan: {steps: [\n")
    assert run("plan", "--config", bad) == cli.EXIT_CONFIG


def test_help_lists_subcommands(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    for name in cli.COMMANDS:
        assert name in text


# --- generate / fit / eval ----------------------------------------------------------------

def test_generate_is_deterministic(tmp_path):
    for name in ("a", "b"):
        assert run("generate", "--out", tmp_path / name, "--train-count", 5, "--test-count", 2, "--seed", 9) == 0
    assert digest(tmp_path / "a" / "manifest.json") == digest(tmp_path / "b" / "manifest.json")
    assert digest(tmp_path / "a" / "trajectories_test.csv") == digest(tmp_path / "b" / "trajectories_test.csv")


def test_augment_multiplies_training_scenes(tmp_path):
    assert run("generate", "--out", tmp_path, "--train-count", 2, "--test-count", 1, "--augment") == 0
    manifest = tmp_path / "manifest.json"
    assert len(scenes.read_dataset(manifest, "train")) == 48
    assert len(scenes.read_dataset(manifest, "test")) == 1


def test_resolved_config_is_echoed(pipeline):
    root, _, _ = pipeline
    echoed = yaml.safe_load((root / "fit" / "resolved_config.yaml").read_text())
    assert echoed["fit"]["fit"]["num_modes"] == 2 and echoed["fit"]["seed"] == 3


def test_fit_outputs_and_reproducibility(pipeline, tmp_path):
    root, manifest, model_path = pipeline
    model = fitter.load_model(model_path)
    assert model.num_modes == 2
    rows = read_rows(root / "fit" / "training_log.csv")
    assert rows[0][:3] == ["iteration", "loglik_nats", "objective_nats"]
    obj = [float(r[2]) for r in rows[1:]]
    assert all(b >= a - 1e-8 * abs(a) for a, b in zip(obj, obj[1:]))
    assert run("fit", "--data", manifest, "--modes", 2, "--out", tmp_path, "--seed", 3) == 0
    assert digest(tmp_path / "model.json") == digest(model_path)
    assert digest(tmp_path / "training_log.csv") == digest(root / "fit" / "training_log.csv")


def test_eval_outputs(pipeline, tmp_path):
    root, manifest, model = pipeline
    ev = root / "eval"
    for name in ("metrics.csv", "fde_windows.csv", "fde_horizon.csv", "block_norms.csv", "mode_probs.csv",
                 "a_block_peaks.csv"):
        assert read_rows(ev / name)[0], name
    horizon = read_rows(ev / "fde_horizon.csv")
    assert horizon[0] == ["step", "t_s", "fde_model_m", "fde_cv_m"] and len(horizon) == 13
    norms = read_rows(ev / "block_norms.csv")
    b_norm = [float(r[6]) for r in norms[1:] if r[4].startswith("B_")]
    a_norm = [float(r[6]) for r in norms[1:] if r[4].startswith("A_")]
    assert max(b_norm) == 1.0 and max(a_norm) == 1.0
    probs = np.array([[float(v) for v in r[2:]] for r in read_rows(ev / "mode_probs.csv")[1:]])
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)
    # byte-identical on rerun
    assert run("eval", "--model", model, "--data", manifest, "--out", tmp_path) == 0
    for name in ("metrics.csv", "fde_windows.csv", "block_norms.csv", "a_block_peaks.csv"):
        assert digest(tmp_path / name) == digest(ev / name)


def test_predict_outputs(pipeline, tmp_path):
    _, manifest, model = pipeline
    assert run("predict", "--model", model, "--data", manifest, "--scene", 1, "--window", 2, "--top-k", 1,
               "--out", tmp_path) == 0
    rows = read_rows(tmp_path / "prediction_means.csv")
    assert rows[0][:3] == ["mode_rank", "mode_prob", "step"]
    assert len(rows) == 1 + 12 * 2
    assert float(rows[1][1]) == pytest.approx(1.0)
    assert run("predict", "--model", model, "--data", manifest, "--scene", 99, "--out", tmp_path) == cli.EXIT_CONFIG


# --- plan --------------------------------------------------------------------------------

def _without_timing(path):
    rows = read_rows(path)
    col = rows[0].index("solve_ms")
    return [r[:col] + r[col + 1:] for r in rows]


def test_plan_runs_and_is_deterministic_except_timing(tmp_path):
    for name in ("a", "b"):
        assert run("plan", "--steps", 6, "--out", tmp_path / name) == 0
    rows = read_rows(tmp_path / "a" / "closed_loop.csv")
    assert "solve_ms" in rows[0] and "min_distance_m" in rows[0] and rows[0][-1] == "p_mode_2"
    assert len(rows) == 7
    assert _without_timing(tmp_path / "a" / "closed_loop.csv") == _without_timing(tmp_path / "b" / "closed_loop.csv")
    assert digest(tmp_path / "a" / "plans.json") == digest(tmp_path / "b" / "plans.json")


def test_generated_scenario_file_drives_plan(tmp_path):
    assert run("generate", "--kind", "intersection", "--out", tmp_path / "sc", "--seed", 2) == 0
    doc = yaml.safe_load((tmp_path / "sc" / "scenario.yaml").read_text())
    assert doc["plan"]["seed"] == 2
    assert run("plan", "--config", tmp_path / "sc" / "scenario.yaml", "--steps", 3, "--out", tmp_path / "p") == 0
    assert read_rows(tmp_path / "sc" / "waypoints.csv")[0] == ["x_m", "y_m"]


def test_single_and_duplicated_modes_agree(tmp_path):
    assert run("plan", "--modes", 1, "--truth-mode", 0, "--steps", 8, "--out", tmp_path / "one") == 0
    assert run("plan", "--modes", 3, "--duplicate", "--truth-mode", 0, "--steps", 8, "--out", tmp_path / "dup") == 0
    one = _without_timing(tmp_path / "one" / "closed_loop.csv")
    dup = _without_timing(tmp_path / "dup" / "closed_loop.csv")
    header = one[0]
    for name in ("x_m", "y_m", "speed_mps", "omega_radps", "accel_mps2"):
        k = header.index(name)
        a = np.array([float(r[k]) for r in one[1:]])
        b = np.array([float(r[k]) for r in dup[1:]])
        np.testing.assert_allclose(a, b, atol=1e-6)


def test_collision_exits_with_solver_code(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump({"plan": {
        "planner": {"collision_distance": 5.0, "margin": 0.0, "modes_used": 1},
        "scenario": {"n_oncoming": 0, "n_cross": 0, "n_pedestrians": 0, "lead_speed": 0.0,
                     "lead_brake_speed": 0.0, "lead_fast_speed": 0.0}}}))
    assert run("plan", "--config", cfg, "--out", tmp_path / "o") == cli.EXIT_SOLVER
    assert (tmp_path / "o" / "closed_loop.csv").exists()
