"""Command-line entry points: generate, fit, predict, eval and plan.

Every subcommand resolves its configuration as defaults, overridden by the
matching section of an optional YAML file (``--config``), overridden by flags.
The resolved configuration is written to ``resolved_config.yaml`` in the
output directory before any work starts.

Exit codes: 0 success, 2 configuration error, 3 solver failure or collision,
4 input/output failure.
"""
from __future__ import annotations

import argparse
import copy
import csv
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import yaml

from matsplan import evaluation, fitter, mats, scenes
from matsplan.planner import mpc
from matsplan.planner.loop import PlanningFailure, closed_loop, write_log_csv, write_plans_json

logger = logging.getLogger("matsplan")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_IO = 0, 2, 3, 4
COMMANDS = ("generate", "fit", "predict", "eval", "plan")


class ConfigError(ValueError):
    pass


class IOFailure(RuntimeError):
    pass


class SolverFailure(RuntimeError):
    pass


# --- defaults ---------------------------------------------------------------------

def _social_defaults() -> dict:
    d = scenes.config_dict(scenes.SocialForcesConfig())
    d.pop("rng_seed")
    return d


def _intersection_defaults() -> dict:
    d = scenes.config_dict(scenes.IntersectionConfig())
    d.pop("seed")
    return d


def _planner_defaults() -> dict:
    d = {k: v for k, v in asdict(mpc.PlannerConfig()).items() if k != "qp_settings"}
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}


def _fit_defaults() -> dict:
    d = asdict(fitter.FitConfig())
    d.pop("rng_seed")
    d["feature_map"] = fitter.FeatureMap(d["feature_map"]).value
    return d


def defaults(command: str) -> dict:
    common = {"seed": 0, "out": f"out/{command}"}
    specific = {
        "generate": {"kind": "social-forces", "augment": False,
                     "social_forces": _social_defaults(), "intersection": _intersection_defaults()},
        "fit": {"data": None, "split": "train", "fit": _fit_defaults()},
        "predict": {"model": None, "data": None, "split": "test", "scene": 0, "window": 0, "top_k": None},
        "eval": {"model": None, "data": None, "split": "test", "radius": evaluation.INTERACTION_RADIUS},
        "plan": {"steps": 60, "truth_mode": None, "duplicate": False,
                 "scenario": _intersection_defaults(), "planner": _planner_defaults()},
    }[command]
    return {**common, **specific}


def _merge(base: dict, override: dict, where: str) -> None:
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"unknown configuration key {where}{key!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where}{key} must be a mapping")
            _merge(base[key], value, f"{where}{key}.")
        else:
            base[key] = value


def _set_dotted(cfg: dict, dotted: str, value) -> None:
    *parents, leaf = dotted.split(".")
    node = cfg
    for p in parents:
        node = node[p]
    node[leaf] = value


def read_config_file(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IOFailure(f"cannot read config {path}: {exc}") from exc
    try:
        doc = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return doc


def resolve(command: str, file_doc: dict | None, flags: dict) -> dict:
    """Defaults < config-file section < flags.

    The file may hold top-level ``seed`` and ``out`` and one section per
    subcommand; sections for other subcommands are ignored so one file can
    drive a whole pipeline.
    """
    cfg = defaults(command)
    doc = dict(file_doc or {})
    unknown = set(doc) - {"seed", "out"} - set(COMMANDS)
    if unknown:
        raise ConfigError(f"unknown top-level configuration keys {sorted(unknown)}")
    _merge(cfg, {k: doc[k] for k in ("seed", "out") if k in doc}, "")
    section = doc.get(command) or {}
    if not isinstance(section, dict):
        raise ConfigError(f"section {command!r} must be a mapping")
    _merge(cfg, section, f"{command}.")
    for dotted, value in flags.items():
        if value is not None:
            _set_dotted(cfg, dotted, value)
    return cfg


def _build(factory, kwargs: dict, what: str):
    try:
        return factory(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {what} configuration: {exc}") from exc


def _require(cfg: dict, *keys) -> None:
    for k in keys:
        if cfg.get(k) in (None, ""):
            raise ConfigError(f"missing required setting {k!r}")


def _output_dir(cfg: dict) -> Path:
    out = Path(cfg["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IOFailure(f"cannot create output directory {out}: {exc}") from exc
    return out


def _echo(cfg: dict, out: Path, command: str) -> None:
    (out / "resolved_config.yaml").write_text(yaml.safe_dump({command: cfg}, sort_keys=True))


def _load(loader, path, what: str):
    try:
        return loader(path)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise IOFailure(f"cannot load {what} from {path}: {exc}") from exc


# --- subcommands ---------------------------------------------------------------------

def cmd_generate(cfg: dict) -> int:
    if cfg["kind"] not in ("social-forces", "intersection"):
        raise ConfigError(f"unknown generate kind {cfg['kind']!r}")
    sf = _build(scenes.SocialForcesConfig, {**cfg["social_forces"], "rng_seed": cfg["seed"]}, "social_forces")
    ic = _build(scenes.IntersectionConfig, {**cfg["intersection"], "seed": cfg["seed"]}, "intersection")
    out = _output_dir(cfg)
    _echo(cfg, out, "generate")
    if cfg["kind"] == "social-forces":
        train, test = scenes.generate_social_forces(sf)
        if cfg["augment"]:
            train = scenes.augment(train)
        manifest = scenes.write_dataset(out, {"train": train, "test": test}, {"social_forces": scenes.config_dict(sf),
                                                                               "augment": bool(cfg["augment"])})
        scenes.export_csv(test, out / "trajectories_test.csv")
        logger.info("wrote %d train and %d test scenes to %s", len(train), len(test), manifest)
    else:
        scenario = scenes.build_intersection(ic)
        scenes.write_scene(scenario.scene, out / "intersection_scene.json")
        with open(out / "waypoints.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["x_m", "y_m"])
            writer.writerows([[repr(float(x)), repr(float(y))] for x, y in scenario.waypoints])
        plan_doc = defaults("plan")
        plan_doc.pop("out")
        plan_doc["seed"] = cfg["seed"]
        plan_doc["scenario"] = cfg["intersection"]
        (out / "scenario.yaml").write_text(yaml.safe_dump({"plan": plan_doc}, sort_keys=True))
        logger.info("wrote intersection scenario to %s", out)
    return EXIT_OK


def _dataset(cfg: dict) -> list:
    _require(cfg, "data")
    try:
        return scenes.read_dataset(cfg["data"], cfg["split"])
    except KeyError as exc:
        raise ConfigError(f"split {cfg['split']!r} not in {cfg['data']}") from exc
    except (OSError, ValueError, TypeError) as exc:
        raise IOFailure(f"cannot read dataset {cfg['data']}: {exc}") from exc


def cmd_fit(cfg: dict) -> int:
    fit_cfg = _build(fitter.FitConfig, {**cfg["fit"], "rng_seed": cfg["seed"]}, "fit")
    data = _dataset(cfg)
    out = _output_dir(cfg)
    _echo(cfg, out, "fit")
    model = fitter.fit(data, fit_cfg)
    fitter.save_model(model, out / "model.json")
    fitter.write_training_log(model, out / "training_log.csv")
    logger.info("fitted %d modes in %d EM iterations", model.num_modes, len(model.log))
    return EXIT_OK


def cmd_predict(cfg: dict) -> int:
    _require(cfg, "model")
    model = _load(fitter.load_model, cfg["model"], "model")
    data = _dataset(cfg)
    if not 0 <= cfg["scene"] < len(data):
        raise ConfigError(f"scene index {cfg['scene']} out of range (0..{len(data) - 1})")
    windows = data[cfg["scene"]].windows(prediction=model.horizon)
    if not 0 <= cfg["window"] < len(windows):
        raise ConfigError(f"window index {cfg['window']} out of range (0..{len(windows) - 1})")
    w = windows[cfg["window"]]
    out = _output_dir(cfg)
    _echo(cfg, out, "predict")
    system = fitter.predict_window(model, w, top_k=cfg["top_k"])
    (out / "prediction.json").write_text(mats.dumps(system))
    with open(out / "prediction_means.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["mode_rank", "mode_prob", "step", "t_s", "agent", "x_m", "y_m", "x_true_m", "y_true_m"])
        true = system.layout.positions(w.future)
        for rank, z in enumerate(system.top_modes(system.num_modes)):
            pos = system.layout.positions(mats.rollout_means(system.modes[z], w.current, w.ego_controls))
            for t in range(len(pos)):
                for i in range(pos.shape[1]):
                    writer.writerow([rank, repr(float(system.mode_probs[z])), t + 1, repr((t + 1) * w.dt), i,
                                     repr(float(pos[t, i, 0])), repr(float(pos[t, i, 1])),
                                     repr(float(true[t, i, 0])), repr(float(true[t, i, 1]))])
    return EXIT_OK


def _analysis_windows(data, model) -> list:
    """One window per scene: the one centred on the closest approach, else the first."""
    out = []
    for scene in data:
        w = evaluation.interaction_window(scene)
        if w is None:
            ws = scene.windows(prediction=model.horizon)
            w = ws[0] if ws else None
        if w is not None:
            out.append(w)
    return out


def cmd_eval(cfg: dict) -> int:
    _require(cfg, "model")
    model = _load(fitter.load_model, cfg["model"], "model")
    data = _dataset(cfg)
    out = _output_dir(cfg)
    _echo(cfg, out, "eval")
    windows = fitter.as_windows(data)
    results = [evaluation.evaluate_window(model, w) for w in windows]
    summary = evaluation.summarize(results, cfg["radius"])
    peaks = evaluation.interaction_peaks(model, data, cfg["radius"])
    evaluation.write_fde_csv(results, out / "fde_windows.csv")
    evaluation.write_horizon_csv(evaluation.fde_by_horizon(model, windows), model.dt, out / "fde_horizon.csv")
    evaluation.write_block_norm_csv(evaluation.block_norm_rows(model, _analysis_windows(data, model)),
                                    out / "block_norms.csv")
    evaluation.write_mode_prob_csv(model, windows, out / "mode_probs.csv")
    with open(out / "a_block_peaks.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scene_id", "window_start", "min_distance_step", "peak_step", "first_over_peak",
                         "last_over_peak", "aligned", "dissipates"])
        for p in peaks:
            writer.writerow([p.scene_id, p.start, p.min_step, p.peak_step, repr(p.first_ratio), repr(p.last_ratio),
                             int(p.peak_aligned), int(p.dissipates)])
    both = float(np.mean([p.peak_aligned and p.dissipates for p in peaks])) if peaks else float("nan")
    metrics = [
        ("fde_model_m", summary.fde_model), ("fde_cv_m", summary.fde_cv),
        ("fde_model_interacting_m", summary.fde_model_interacting),
        ("fde_cv_interacting_m", summary.fde_cv_interacting),
        ("improvement_interacting", summary.improvement_interacting),
        ("num_windows", summary.num_windows), ("num_interacting_windows", summary.num_interacting),
        ("num_interacting_scenes", len(peaks)), ("peak_aligned_and_dissipating_fraction", both),
    ]
    with open(out / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value"])
        writer.writerows([[k, repr(v)] for k, v in metrics])
    logger.info("FDE %.3f m (constant velocity %.3f m); interacting %.3f vs %.3f m",
                summary.fde_model, summary.fde_cv, summary.fde_model_interacting, summary.fde_cv_interacting)
    return EXIT_OK


def cmd_plan(cfg: dict) -> int:
    ic = _build(scenes.IntersectionConfig, {**cfg["scenario"], "seed": cfg["seed"]}, "scenario")
    pc = _build(mpc.PlannerConfig, dict(cfg["planner"]), "planner")
    if cfg["steps"] < 1:
        raise ConfigError("steps must be positive")
    scenario = scenes.build_intersection(ic)
    out = _output_dir(cfg)
    _echo(cfg, out, "plan")
    provider = mpc.ScriptedProvider(scenario, pc.horizon_steps - 1)
    if cfg["duplicate"]:
        provider = mpc.DuplicatedProvider(provider, pc.modes_used)
    try:
        log = closed_loop(pc, scenario, provider, cfg["steps"], truth_mode=cfg["truth_mode"])
    except (PlanningFailure, mpc.InfeasibleBoxes, np.linalg.LinAlgError) as exc:
        raise SolverFailure(str(exc)) from exc
    write_log_csv(log, out / "closed_loop.csv", pc.modes_used)
    write_plans_json(log, out / "plans.json")
    times = log.qp_times_ms
    logger.info("%d steps, min distance %.2f m, median QP %.1f ms", len(log.records), log.min_distance,
                float(np.median(times)) if len(times) else float("nan"))
    if log.collision:
        logger.error("collision flagged at step %d", log.collision_step)
        return EXIT_SOLVER
    return EXIT_OK


HANDLERS = {"generate": cmd_generate, "fit": cmd_fit, "predict": cmd_predict, "eval": cmd_eval, "plan": cmd_plan}


# --- argument parsing ------------------------------------------------------------------

def _bool_flag(parser, name: str, dest: str, help_text: str) -> None:
    parser.add_argument(name, dest=dest, action="store_const", const=True, default=None, help=help_text)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="matsplan", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML file with a section per subcommand")
        p.add_argument("--out", dest="out", default=None, help="output directory")
        p.add_argument("--seed", dest="seed", type=int, default=None, help="random seed")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")

    p = sub.add_parser("generate", help="write social-force scenes or the intersection scenario")
    common(p)
    p.add_argument("--kind", choices=("social-forces", "intersection"), default=None)
    _bool_flag(p, "--augment", "augment", "add 24 rotated copies of every training scene")
    p.add_argument("--train-count", dest="social_forces.train_count", type=int, default=None)
    p.add_argument("--test-count", dest="social_forces.test_count", type=int, default=None)
    p.add_argument("--repulsion-gain", dest="social_forces.repulsion_gain", type=float, default=None)

    p = sub.add_parser("fit", help="fit a mixture model by EM")
    common(p)
    p.add_argument("--data", default=None, help="dataset manifest.json")
    p.add_argument("--split", default=None)
    p.add_argument("--modes", dest="fit.num_modes", type=int, default=None, help="number of modes")
    p.add_argument("--ridge", dest="fit.ridge", type=float, default=None)
    p.add_argument("--max-iters", dest="fit.max_em_iters", type=int, default=None)
    p.add_argument("--feature-map", dest="fit.feature_map", choices=[f.value for f in fitter.FeatureMap],
                   default=None)

    p = sub.add_parser("predict", help="mixture prediction for one scene window")
    common(p)
    p.add_argument("--model", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--split", default=None)
    p.add_argument("--scene", type=int, default=None, help="scene index within the split")
    p.add_argument("--window", type=int, default=None, help="window index within the scene")
    p.add_argument("--top-k", dest="top_k", type=int, default=None)

    p = sub.add_parser("eval", help="FDE, block norms and mode probabilities as CSV")
    common(p)
    p.add_argument("--model", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--split", default=None)
    p.add_argument("--radius", type=float, default=None, help="interaction distance threshold in m")

    p = sub.add_parser("plan", help="closed-loop multimodal planning on the intersection")
    common(p)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--modes", dest="planner.modes_used", type=int, default=None, help="modes planned against")
    p.add_argument("--truth-mode", dest="truth_mode", type=int, default=None,
                   help="mode the scripted world follows")
    _bool_flag(p, "--duplicate", "duplicate", "plan against copies of the most likely mode")
    _bool_flag(p, "--probability-weighted", "planner.probability_weighted", "weight mode costs by probability")
    p.add_argument("--horizon", dest="planner.horizon_steps", type=int, default=None)
    p.add_argument("--consensus", dest="planner.consensus_steps", type=int, default=None)
    p.add_argument("--margin", dest="planner.margin", type=float, default=None)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")}
    try:
        file_doc = read_config_file(args.config) if args.config else None
        cfg = resolve(args.command, copy.deepcopy(file_doc), flags)
        return HANDLERS[args.command](cfg)
    except ConfigError as exc:
        logger.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except (IOFailure, OSError) as exc:
        logger.error("i/o error: %s", exc)
        return EXIT_IO
    except SolverFailure as exc:
        logger.error("solver failure: %s", exc)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
