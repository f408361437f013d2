"""Command-line front end tying the pipeline together for reproducible runs.

Every subcommand loads one YAML experiment config, applies flag overrides
(flags win), does its work under the output directory, and writes a manifest
recording the config hash, the seed, and every artifact it produced.  Two
runs with the same config and flags produce byte-identical artifacts.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

import numpy as np

from .config import ExperimentConfig, config_hash, load_config
from .dataset import read_dataset
from .evaluation import (
    export_cost_map,
    grasp_success_eval,
    run_ablation,
    run_rollout_suite,
)
from .mpc import OracleGraspCost
from .network import init_model, load_checkpoint, save_checkpoint
from .planner import build_dataset, generate_anchor_grasps
from .scene import sample_surface_points
from .se3 import default_gripper
from .training import fraction_by_trajectory, train


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="YAML experiment config")
    common.add_argument("--seed", type=int, default=None,
                        help="override the data-generation, training, and episode seeds")
    common.add_argument("--out", default=None, help="override the output directory")
    common.add_argument("--object", default=None, help="restrict the run to one object_id")
    common.add_argument("--threads", type=int, default=None,
                        help="recorded for provenance; results are deterministic regardless")

    parser = argparse.ArgumentParser(
        prog="graspfields",
        description="grasp-trajectory datasets, pose-value networks, and sampling MPC",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="plan trajectories, write datasets")
    g.add_argument("--n-traj", type=int, default=None, help="override trajectory count")
    g.add_argument("--phi", type=float, default=None, help="override the path-length filter")
    g.add_argument("--anchors", type=int, default=None, help="override the anchor subset size")

    t = sub.add_parser("train", parents=[common], help="train a model per object")
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--dataset", default=None, help="explicit dataset path (single object)")

    gr = sub.add_parser("grasp", parents=[common], help="grasp success-rate protocol")
    gr.add_argument("--cases", type=int, default=10)
    gr.add_argument("--model", default=None, help="explicit checkpoint path")
    gr.add_argument("--oracle", action="store_true", help="use ground-truth costs instead")

    for mode in ("eval-static", "eval-dynamic"):
        e = sub.add_parser(mode, parents=[common], help=f"rollout curves, {mode[5:]} object")
        e.add_argument("--episodes", type=int, default=None)
        e.add_argument("--steps", type=int, default=None)
        e.add_argument("--model", default=None)
        e.add_argument("--oracle", action="store_true")

    c = sub.add_parser("costmap", parents=[common], help="export a predicted cost map")
    c.add_argument("--model", default=None)
    c.add_argument("--anchor-index", type=int, default=0)
    c.add_argument("--extent", type=float, default=0.12, help="half-width of the map (m)")
    c.add_argument("--resolution", type=float, default=0.01)

    a = sub.add_parser("ablate", parents=[common], help="dataset-fraction or anchor-count sweep")
    a.add_argument("--suite", required=True, choices=("dataset_fraction", "anchor_count"))
    a.add_argument("--fraction", type=float, action="append",
                   help="repeatable; defaults to 0.05 0.1 1.0")
    a.add_argument("--anchors", type=int, action="append",
                   help="repeatable; defaults to 2 16 32")
    return parser


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    if args.seed is not None:
        cfg = replace(
            cfg,
            seed=args.seed,
            train=replace(cfg.train, seed=args.seed),
            episodes=replace(cfg.episodes, seed=args.seed),
        )
    if args.out is not None:
        cfg = replace(cfg, out_dir=args.out)
    if getattr(args, "n_traj", None) is not None:
        cfg = replace(cfg, trajectories=args.n_traj)
    if getattr(args, "phi", None) is not None:
        cfg = replace(cfg, phi=args.phi)
    if args.command == "gen-data" and args.anchors is not None:
        cfg = replace(cfg, anchor_count=args.anchors)
    if getattr(args, "epochs", None) is not None:
        cfg = replace(cfg, train=replace(cfg.train, epochs=args.epochs))
    if getattr(args, "episodes", None) is not None:
        cfg = replace(cfg, episodes=replace(cfg.episodes, episodes=args.episodes))
    if getattr(args, "steps", None) is not None:
        cfg = replace(cfg, episodes=replace(cfg.episodes, steps=args.steps))
    return cfg


def _selected(cfg: ExperimentConfig, args):
    """(object_index, spec) pairs, optionally narrowed by --object."""
    if args.object is None:
        return list(enumerate(cfg.objects))
    spec = cfg.object_by_id(args.object)
    return [(cfg.objects.index(spec), spec)]


def _dataset_path(cfg, object_id):
    return os.path.join(cfg.out_dir, f"{object_id}.grasps.bin")


def _checkpoint_path(cfg, object_id):
    return os.path.join(cfg.out_dir, f"{object_id}.ckpt")


def _cloud(cfg, shape):
    return sample_surface_points(shape, cfg.cloud_points, seed=cfg.cloud_seed)


def _cost(cfg, args, spec, shape, anchors, gm):
    """Oracle provider or a loaded checkpoint, per the flags."""
    if getattr(args, "oracle", False):
        return OracleGraspCost(shape, anchors, gm)
    path = args.model or _checkpoint_path(cfg, spec.object_id)
    return load_checkpoint(path)


def cmd_gen_data(cfg, args):
    gm = default_gripper()
    artifacts = []
    for idx, spec in _selected(cfg, args):
        shape = spec.build()
        anchors = generate_anchor_grasps(shape, seed=cfg.seed, gm=gm).subset(cfg.anchor_count)
        path = _dataset_path(cfg, spec.object_id)
        counts = build_dataset(
            shape, anchors, cfg.trajectories, cfg.rrt, cfg.seed, path, gm,
            phi=cfg.phi, object_index=idx,
        )
        print(
            f"{spec.object_id}: kept={counts['kept']} discarded={counts['discarded']} "
            f"failures={counts['failures']} records={counts['records']} -> {path}"
        )
        artifacts.append(path)
    return artifacts


def _train_one(cfg, idx, spec, records):
    if records.shape[0] == 0:
        raise ValueError(f"dataset for {spec.object_id!r} holds no records")
    shape = spec.build()
    cloud = _cloud(cfg, shape)
    clouds = {int(i): cloud for i in np.unique(records["object_index"])}
    model = init_model(cfg.train.seed)
    curves = train(model, records, clouds, cfg.train)
    return model, curves


def cmd_train(cfg, args):
    artifacts = []
    for idx, spec in _selected(cfg, args):
        ds_path = args.dataset or _dataset_path(cfg, spec.object_id)
        _, records = read_dataset(ds_path)
        model, curves = _train_one(cfg, idx, spec, records)
        ckpt = _checkpoint_path(cfg, spec.object_id)
        save_checkpoint(model, ckpt)
        tail = {b: (c[-1] if c else float("nan")) for b, c in curves.items()}
        print(
            f"{spec.object_id}: trained {cfg.train.epochs} epochs, final losses "
            f"path={tail.get('path', float('nan')):.4f} "
            f"collision={tail.get('collision', float('nan')):.4f} -> {ckpt}"
        )
        artifacts.append(ckpt)
    return artifacts


def _eval_mode(mode):
    def cmd(cfg, args):
        gm = default_gripper()
        episodes = replace(cfg.episodes, mode=mode)
        artifacts = []
        for idx, spec in _selected(cfg, args):
            shape = spec.build()
            anchors = generate_anchor_grasps(shape, seed=cfg.seed, gm=gm)
            cost = _cost(cfg, args, spec, shape, anchors, gm)
            curves = run_rollout_suite(
                episodes, cost, shape, anchors, cfg.mpc, cloud=_cloud(cfg, shape), gm=gm
            )
            path = os.path.join(
                cfg.out_dir, f"curves_{mode}_{spec.object_id}_seed{episodes.seed}.txt"
            )
            curves.save(path)
            print(
                f"{spec.object_id} [{mode}]: final err "
                f"{curves.translation_mean[-1]:.4f} m / {curves.rotation_mean[-1]:.4f} rad, "
                f"failures {curves.failures}/{curves.episodes} -> {path}"
            )
            artifacts.append(path)
        return artifacts

    return cmd


def cmd_grasp(cfg, args):
    gm = default_gripper()
    artifacts = []
    for idx, spec in _selected(cfg, args):
        shape = spec.build()
        anchors = generate_anchor_grasps(shape, seed=cfg.seed, gm=gm)
        cost = _cost(cfg, args, spec, shape, anchors, gm)
        rate = grasp_success_eval(
            cost, shape, anchors, cfg.mpc,
            cases=args.cases, time_budget_steps=cfg.episodes.steps,
            seed=cfg.episodes.seed, cloud=_cloud(cfg, shape), gm=gm,
            translation_tolerance=cfg.episodes.translation_tolerance,
            rotation_tolerance=cfg.episodes.rotation_tolerance,
        )
        path = os.path.join(cfg.out_dir, f"success_{spec.object_id}.txt")
        with open(path, "w", encoding="ascii") as f:
            f.write("# object_id success_rate cases\n")
            f.write(f"{spec.object_id} {rate:.6g} {args.cases}\n")
        print(f"{spec.object_id}: success rate {rate:.3f} over {args.cases} cases -> {path}")
        artifacts.append(path)
    return artifacts


def cmd_costmap(cfg, args):
    gm = default_gripper()
    artifacts = []
    for idx, spec in _selected(cfg, args):
        shape = spec.build()
        anchors = generate_anchor_grasps(shape, seed=cfg.seed, gm=gm)
        if not (0 <= args.anchor_index < len(anchors)):
            raise ValueError(
                f"anchor index {args.anchor_index} out of range 0..{len(anchors) - 1}"
            )
        model = load_checkpoint(args.model or _checkpoint_path(cfg, spec.object_id))
        base = anchors.grasps[args.anchor_index]
        span = (-args.extent, args.extent)
        path = os.path.join(
            cfg.out_dir, f"costmap_{spec.object_id}_anchor{args.anchor_index}.txt"
        )
        grid = export_cost_map(
            model, _cloud(cfg, shape), base, span, span, args.resolution, out_path=path
        )
        i, j = grid.minimum_index()
        print(
            f"{spec.object_id}: cost map min {grid.values[i, j]:.4f} at offset "
            f"({grid.x_offsets[i]:+.3f}, {grid.y_offsets[j]:+.3f}) m -> {path}"
        )
        artifacts.append(path)
    return artifacts


def cmd_ablate(cfg, args):
    chosen = _selected(cfg, args)
    if len(chosen) != 1:
        raise ValueError("ablate runs one object at a time; narrow with --object")
    idx, spec = chosen[0]
    gm = default_gripper()
    shape = spec.build()
    full_anchors = generate_anchor_grasps(shape, seed=cfg.seed, gm=gm)
    cloud = _cloud(cfg, shape)
    artifacts = []
    variants = {}
    if args.suite == "dataset_fraction":
        fractions = args.fraction or [0.05, 0.1, 1.0]
        _, records = read_dataset(_dataset_path(cfg, spec.object_id))
        for frac in fractions:
            label = int(round(100.0 * frac))
            subset = records[fraction_by_trajectory(records, frac)]
            model, _ = _train_one(cfg, idx, spec, subset)
            ckpt = os.path.join(cfg.out_dir, f"{spec.object_id}_fraction{label}.ckpt")
            save_checkpoint(model, ckpt)
            artifacts.append(ckpt)
            variants[label] = model
    else:
        for k in args.anchors or [2, 16, 32]:
            anchors_k = full_anchors.subset(k)
            ds = os.path.join(cfg.out_dir, f"{spec.object_id}_anchors{k}.grasps.bin")
            build_dataset(
                shape, anchors_k, cfg.trajectories, cfg.rrt, cfg.seed, ds, gm,
                phi=cfg.phi, object_index=idx,
            )
            _, records = read_dataset(ds)
            model, _ = _train_one(cfg, idx, spec, records)
            ckpt = os.path.join(cfg.out_dir, f"{spec.object_id}_anchors{k}.ckpt")
            save_checkpoint(model, ckpt)
            artifacts.extend([ds, ckpt])
            variants[k] = model
    results = run_ablation(
        args.suite, variants, shape, full_anchors, cfg.episodes, cfg.mpc,
        cloud, gm=gm, out_dir=cfg.out_dir,
    )
    for label, curves in results.items():
        path = os.path.join(
            cfg.out_dir, f"{args.suite}_{label}_seed{cfg.episodes.seed}.curves.txt"
        )
        print(
            f"{spec.object_id} [{args.suite}={label}]: final err "
            f"{curves.translation_mean[-1]:.4f} m / {curves.rotation_mean[-1]:.4f} rad -> {path}"
        )
        artifacts.append(path)
    return artifacts


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "grasp": cmd_grasp,
    "eval-static": _eval_mode("static"),
    "eval-dynamic": _eval_mode("dynamic"),
    "costmap": cmd_costmap,
    "ablate": cmd_ablate,
}


def write_manifest(cfg: ExperimentConfig, command: str, artifacts, threads=None) -> str:
    path = os.path.join(cfg.out_dir, f"{command}.manifest")
    with open(path, "w", encoding="ascii") as f:
        f.write(f"command={command}\n")
        f.write(f"config={config_hash(cfg)}\n")
        f.write(f"seed={cfg.seed}\n")
        f.write(f"threads={'auto' if threads is None else threads}\n")
        for art in artifacts:
            f.write(f"artifact={os.path.relpath(art, cfg.out_dir)}\n")
    return path


def run_cli(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        os.makedirs(cfg.out_dir, exist_ok=True)
        artifacts = COMMANDS[args.command](cfg, args)
        manifest = write_manifest(cfg, args.command, artifacts, threads=args.threads)
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    print(f"manifest -> {manifest}")
    return 0


def main(argv=None) -> int:
    return run_cli(sys.argv[1:] if argv is None else argv)


if __name__ == "__main__":
    sys.exit(main())
