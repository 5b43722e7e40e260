"""Command-line entry point: scene generation, encoder and RL training,
end-to-end prediction, evaluation, and SVG plot emission.

Exit codes: 0 success, 1 usage, 2 validation, 3 numeric failure. Errors
print one machine-parseable JSON line on stderr. Every artifact embeds the
resolved run parameters and seed; writes are atomic (temp file + rename).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .artifacts import (
    ArtifactError,
    atomic_write_json,
    atomic_write_text,
    load_checkpoint,
    read_json,
    save_checkpoint,
    write_csv,
)
from .autodiff import NumericError
from .encoder import (
    EncoderConfig,
    HETERO_MODES,
    HeteroEncoder,
    KeyPositionSet,
    train_encoder,
)
from .kinematics import VehicleParams
from .metrics import PredictionSet, dac, min_ade, min_fde, MISS_THRESHOLD
from .pipeline import predict_trajectories
from .plotting import parse_trace_csv, render_scene_svg
from .policy import PPOConfig, build_policy
from .ppo import run_episode, train
from .scene import Scene, SceneFormatError, SceneValidationError, load_scene, save_scene
from .subscene import RewardConfig, SubSceneEnv, make_action_model, subscenes_from_ground_truth
from .synthetic import SCENE_KINDS, generate_synthetic_scene

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_NUMERIC = 3

RL_ABLATIONS = {
    "transformer-kinematic": ("transformer", "kinematic"),
    "transformer-direct": ("transformer", "direct"),
    "mlp-kinematic": ("mlp", "kinematic"),
    "mlp-direct": ("mlp", "direct"),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _timestamps(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"bad timestamp list {text!r}; expected e.g. 1.5,3.0") from None


def build_parser() -> _Parser:
    parser = _Parser(prog="hiertraj", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--config", help="JSON config file (encoder/ppo/reward sections)")
        p.add_argument("--out", required=True, help="output directory (or file for plot)")

    p = sub.add_parser("gen", help="generate synthetic scene files")
    p.add_argument("--kind", required=True, choices=SCENE_KINDS + ("mixed",))
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--agents", type=int, default=3)
    common(p)

    p = sub.add_parser("train-encoder", help="train the key-position encoder")
    p.add_argument("--scenes", required=True, help="directory of scene files")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--modes", type=int, default=None)
    p.add_argument("--radius", type=float, default=None)
    p.add_argument("--d-model", type=int, default=None)
    p.add_argument("--key-timestamps", type=_timestamps, default=None)
    p.add_argument("--ablation", choices=HETERO_MODES, default=None,
                   help="heterogeneity arm (default: full)")
    common(p)

    p = sub.add_parser("train-rl", help="train the sub-scene planning policy")
    p.add_argument("--scenes", required=True)
    p.add_argument("--updates", type=int, default=50)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--beta", type=float, default=None, help="scene-mean reward mixing")
    p.add_argument("--rollout-steps", type=int, default=None)
    p.add_argument("--minibatch-size", type=int, default=None)
    p.add_argument("--epochs-per-update", type=int, default=None)
    p.add_argument("--d-model", type=int, default=None)
    p.add_argument("--key-timestamps", type=_timestamps, default=None)
    p.add_argument("--ablation", choices=sorted(RL_ABLATIONS), default=None,
                   help="policy arm (default: transformer-kinematic)")
    common(p)

    p = sub.add_parser("predict", help="run the two-stage pipeline on one scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--encoder-ckpt", required=True)
    p.add_argument("--rl-ckpt", required=True)
    p.add_argument("--key-positions", default=None,
                   help="precomputed raw key-position file (skips the encoder)")
    p.add_argument("--modes", type=int, default=None,
                   help="must match the encoder checkpoint when given")
    p.add_argument("--radius", type=float, default=None)
    p.add_argument("--beta", type=float, default=None)
    common(p)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--predictions", required=True, nargs="+")
    p.add_argument("--scenes", required=True, nargs="+")
    common(p)

    p = sub.add_parser("plot", help="render a scene (plus overlays) to SVG")
    p.add_argument("--scene", required=True)
    p.add_argument("--predictions", default=None)
    p.add_argument("--key-positions", default=None)
    p.add_argument("--trace", default=None, help="episode trace CSV")
    common(p)

    return parser


# -- config plumbing ---------------------------------------------------------


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    doc = read_json(path)
    if not isinstance(doc, dict):
        raise ArtifactError(f"{path}: config file must hold a JSON object")
    return doc


def _encoder_config(args, file_cfg: dict) -> EncoderConfig:
    doc = EncoderConfig().to_dict()
    doc.update(file_cfg.get("encoder", {}))
    for flag, key in (("modes", "n_modes"), ("radius", "radius"),
                      ("d_model", "d_model"), ("ablation", "hetero_mode"),
                      ("key_timestamps", "key_timestamps")):
        value = getattr(args, flag, None)
        if value is not None:
            doc[key] = value
    try:
        return EncoderConfig.from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise ArtifactError(f"bad encoder config: {exc}") from None


def _ppo_config(args, file_cfg: dict) -> PPOConfig:
    doc = PPOConfig().to_dict()
    doc.update(file_cfg.get("ppo", {}))
    for flag, key in (("lr", "lr"), ("rollout_steps", "rollout_steps"),
                      ("minibatch_size", "minibatch_size"),
                      ("epochs_per_update", "epochs_per_update"),
                      ("d_model", "d_model")):
        value = getattr(args, flag, None)
        if value is not None:
            doc[key] = value
    ablation = getattr(args, "ablation", None)
    if ablation is not None:
        doc["policy_arch"], doc["action_model"] = RL_ABLATIONS[ablation]
    try:
        return PPOConfig.from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise ArtifactError(f"bad ppo config: {exc}") from None


def _reward_config(args, file_cfg: dict) -> RewardConfig:
    doc = RewardConfig().to_dict()
    doc.update(file_cfg.get("reward", {}))
    beta = getattr(args, "beta", None)
    if beta is not None:
        doc["scene_mix"] = beta
    try:
        return RewardConfig.from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise ArtifactError(f"bad reward config: {exc}") from None


def _run_echo(args, **extra) -> dict:
    params = {k: v for k, v in sorted(vars(args).items())
              if k not in ("command", "seed") and v is not None}
    params.update(extra)
    return {"command": args.command, "seed": args.seed, "params": params}


def _load_scene_dir(path: str) -> list[tuple[str, Scene]]:
    if not os.path.isdir(path):
        raise ArtifactError(f"{path}: not a directory of scene files")
    out = []
    for name in sorted(os.listdir(path)):
        if not name.endswith(".json"):
            continue
        full = os.path.join(path, name)
        doc = read_json(full)
        if "format" in doc:
            continue  # one of our own artifacts (manifest etc.), not a scene
        out.append((name, load_scene(full)))
    if not out:
        raise ArtifactError(f"{path}: no scene files found")
    return out


# -- commands -----------------------------------------------------------------


def cmd_gen(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    kinds = SCENE_KINDS if args.kind == "mixed" else (args.kind,)
    files = []
    for i in range(args.count):
        kind = kinds[i % len(kinds)]
        scene = generate_synthetic_scene(kind, args.agents, seed=args.seed + i)
        name = f"scene_{i:03d}_{kind}.json"
        save_scene(scene, os.path.join(args.out, name))
        files.append(name)
    atomic_write_json(os.path.join(args.out, "gen_manifest.json"),
                      {"format": "gen-manifest/v1", "run": _run_echo(args),
                       "files": files})
    return EXIT_OK


def cmd_train_encoder(args) -> int:
    file_cfg = _load_config_file(args.config)
    config = _encoder_config(args, file_cfg)
    scenes = [s for _, s in _load_scene_dir(args.scenes)]
    encoder, history = train_encoder(scenes, config, epochs=args.epochs,
                                     lr=args.lr, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    run = _run_echo(args, encoder=config.to_dict())
    save_checkpoint(os.path.join(args.out, "encoder.json"), "encoder",
                    config.to_dict(), encoder.state_dict(), run=run)
    write_csv(os.path.join(args.out, "encoder_losses.csv"),
              ["epoch", "loss", "fde"],
              [[h["epoch"], h["loss"], h["fde"]] for h in history], run=run)
    return EXIT_OK


def cmd_train_rl(args) -> int:
    file_cfg = _load_config_file(args.config)
    config = _ppo_config(args, file_cfg)
    reward_cfg = _reward_config(args, file_cfg)
    timestamps = args.key_timestamps or (1.5, 3.0)
    vehicle = VehicleParams()
    episodes = []
    for _, scene in _load_scene_dir(args.scenes):
        for sub in subscenes_from_ground_truth(scene, timestamps):
            episodes.append((scene, sub))
    if not episodes:
        raise ArtifactError("no trainable sub-scenes in the scene directory")

    def factory(index):
        scene, sub = episodes[index % len(episodes)]
        return SubSceneEnv(scene, sub, reward_cfg=reward_cfg, vehicle_params=vehicle,
                           action_model=config.action_model)

    net, logs = train(factory, config, total_updates=args.updates, seed=args.seed,
                      vehicle_params=vehicle)
    os.makedirs(args.out, exist_ok=True)
    run = _run_echo(args, ppo=config.to_dict(), reward=reward_cfg.to_dict())
    save_checkpoint(os.path.join(args.out, "policy.json"), "policy",
                    {"ppo": config.to_dict(), "reward": reward_cfg.to_dict(),
                     "key_timestamps": list(timestamps)},
                    net.state_dict(), run=run)
    write_csv(os.path.join(args.out, "rl_log.csv"),
              ["update", "mean_return", "policy_loss", "value_loss", "entropy",
               "clip_fraction", "collision_rate", "goal_hit_rate"],
              [[l["update"], l["mean_return"], l["policy_loss"], l["value_loss"],
                l["entropy"], l["clip_fraction"], l["collision_rate"],
                l["goal_hit_rate"]] for l in logs], run=run)
    # sample episode trace of the trained policy for the plotter
    env = factory(0)
    run_episode(env, net, np.random.default_rng(args.seed), deterministic=True)
    env.export_trace(os.path.join(args.out, "trace_sample.csv"), run=run)
    return EXIT_OK


def _load_policy(path: str) -> tuple[PPOConfig, RewardConfig, object]:
    config_doc, params = load_checkpoint(path, "policy")
    ppo_cfg = PPOConfig.from_dict(config_doc["ppo"])
    reward_cfg = RewardConfig.from_dict(config_doc["reward"])
    scale = make_action_model(ppo_cfg.action_model, VehicleParams()).scale
    net = build_policy(ppo_cfg, scale, np.random.default_rng(0))
    net.load_state_dict(params)
    return ppo_cfg, reward_cfg, net


def _load_encoder(path: str, expect_modes: int | None, expect_radius: float | None):
    config_doc, params = load_checkpoint(path, "encoder")
    config = EncoderConfig.from_dict(config_doc)
    if expect_modes is not None and expect_modes != config.n_modes:
        raise ArtifactError(
            f"{path}: checkpoint has n_modes={config.n_modes}, requested {expect_modes}")
    if expect_radius is not None and expect_radius != config.radius:
        raise ArtifactError(
            f"{path}: checkpoint has radius={config.radius}, requested {expect_radius}")
    encoder = HeteroEncoder(config, np.random.default_rng(0))
    encoder.load_state_dict(params)
    return encoder


def _read_key_positions(path: str) -> KeyPositionSet:
    doc = read_json(path)
    if doc.get("format") != "key-positions/v1":
        raise ArtifactError(f"{path}: not a key-positions file")
    return KeyPositionSet.from_dict(doc)


def cmd_predict(args) -> int:
    file_cfg = _load_config_file(args.config)
    reward_cfg = _reward_config(args, file_cfg)
    scene = load_scene(args.scene)
    encoder = _load_encoder(args.encoder_ckpt, args.modes, args.radius)
    ppo_cfg, ckpt_reward, net = _load_policy(args.rl_ckpt)
    if args.beta is None and "reward" not in file_cfg:
        reward_cfg = ckpt_reward
    kps = _read_key_positions(args.key_positions) if args.key_positions else None

    preds, intermediates = predict_trajectories(
        scene, encoder, net, reward_cfg=reward_cfg,
        action_model=ppo_cfg.action_model, key_positions=kps)

    os.makedirs(args.out, exist_ok=True)
    run = _run_echo(args, ppo=ppo_cfg.to_dict(), reward=reward_cfg.to_dict(),
                    encoder=encoder.config.to_dict())
    atomic_write_json(os.path.join(args.out, "predictions.json"),
                      {"format": "predictions/v1", "run": run, **preds.to_dict()})
    for name, key in (("key_positions_raw.json", "key_positions_raw"),
                      ("key_positions_calibrated.json", "key_positions_calibrated")):
        atomic_write_json(os.path.join(args.out, name),
                          {"format": "key-positions/v1", "run": run,
                           **intermediates[key].to_dict()})
    atomic_write_json(os.path.join(args.out, "subscenes.json"),
                      {"format": "subscenes/v1", "run": run,
                       "membership_per_mode": intermediates["subscene_membership"]})
    return EXIT_OK


def cmd_eval(args) -> int:
    if len(args.predictions) != len(args.scenes):
        raise UsageError("--predictions and --scenes must pair up")
    ades, fdes, misses, dac_flags = [], [], [], []
    for pred_path, scene_path in zip(args.predictions, args.scenes):
        doc = read_json(pred_path)
        if doc.get("format") != "predictions/v1":
            raise ArtifactError(f"{pred_path}: not a predictions file")
        preds = PredictionSet.from_dict(doc)
        scene = load_scene(scene_path)
        for aid, pred in preds.agents.items():
            if pred.ground_truth is None:
                track = scene.agent(aid)
                if track.future_gt is None:
                    raise ArtifactError(
                        f"{scene_path}: agent {aid} lacks ground truth for evaluation")
                pred.ground_truth = track.future_gt[:, 1:3]
            ades.append(min_ade(pred))
            fdes.append(min_fde(pred))
            misses.append(min_fde(pred) > MISS_THRESHOLD)
            for traj in pred.trajectories:
                dac_flags.append(all(scene.in_drivable_area(p) for p in traj))
    report = {
        "format": "metrics/v1",
        "run": _run_echo(args),
        "minADE": float(np.mean(ades)),
        "minFDE": float(np.mean(fdes)),
        "MR": float(np.mean(misses)),
        "DAC": float(np.mean(dac_flags)),
        "n_agents": len(ades),
    }
    os.makedirs(args.out, exist_ok=True)
    atomic_write_json(os.path.join(args.out, "metrics.json"), report)
    print(json.dumps({k: report[k] for k in ("minADE", "minFDE", "MR", "DAC", "n_agents")}))
    return EXIT_OK


def cmd_plot(args) -> int:
    scene = load_scene(args.scene)
    preds = None
    if args.predictions:
        doc = read_json(args.predictions)
        if doc.get("format") != "predictions/v1":
            raise ArtifactError(f"{args.predictions}: not a predictions file")
        preds = PredictionSet.from_dict(doc)
    kps = _read_key_positions(args.key_positions) if args.key_positions else None
    trace = None
    if args.trace:
        try:
            with open(args.trace, encoding="utf-8") as fh:
                trace = parse_trace_csv(fh.read())
        except FileNotFoundError:
            raise ArtifactError(f"{args.trace}: file not found") from None
    svg = render_scene_svg(scene, predictions=preds, key_positions=kps,
                           trace_rows=trace, run=_run_echo(args))
    parent = os.path.dirname(args.out)
    if parent:
        os.makedirs(parent, exist_ok=True)
    atomic_write_text(args.out, svg)
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen,
    "train-encoder": cmd_train_encoder,
    "train-rl": cmd_train_rl,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "plot": cmd_plot,
}


def _fail(code: int, category: str, message: str) -> int:
    sys.stderr.write(json.dumps({"error": category, "message": str(message)}) + "\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", str(exc))
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", str(exc))
    except (SceneFormatError, SceneValidationError, ArtifactError, FileNotFoundError,
            NotADirectoryError, ValueError) as exc:
        return _fail(EXIT_VALIDATION, "validation", str(exc))
    except NumericError as exc:
        return _fail(EXIT_NUMERIC, "numeric", str(exc))


if __name__ == "__main__":
    sys.exit(main())
