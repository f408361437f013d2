"""Evaluation protocols: rollout curves, grasp-success runs, ablations, cost maps.

Everything here consumes the controller's RolloutLog (object-frame poses) so
no object-motion replay is needed.  Success checks recompute collisions from
ground-truth geometry rather than trusting the model's collision head.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .mpc import (
    GripperState,
    LearnedGraspCost,
    MpcConfig,
    RolloutLog,
    run_episode,
)
from .network import ValueModel, branch_raw_outputs, encode_cloud, softplus
from .planner import AnchorGraspSet
from .scene import Bowl, Box, ObjectShape, ScenePose, gripper_in_collision
from .se3 import (
    GripperModel,
    Pose,
    default_gripper,
    pose_from_vec9,
    pose_pair_distance,
    random_rotation,
    rotation_about_axis,
)


@dataclass(frozen=True)
class EpisodeConfig:
    mode: str = "static"
    episodes: int = 50
    steps: int = 1000
    seed: int = 0
    translation_tolerance: float = 0.02
    rotation_tolerance: float = 0.2

    def __post_init__(self):
        if self.mode not in ("static", "dynamic"):
            raise ValueError(f"unknown episode mode {self.mode!r}")
        if self.episodes < 1 or self.steps < 1:
            raise ValueError("episodes and steps must both be >= 1")


@dataclass(frozen=True)
class RolloutCurves:
    """Per-timestep error statistics across a suite of episodes."""

    rotation_mean: np.ndarray
    rotation_std: np.ndarray
    translation_mean: np.ndarray
    translation_std: np.ndarray
    episodes: int = 0
    failures: int = 0

    def __post_init__(self):
        for name in ("rotation_mean", "rotation_std", "translation_mean", "translation_std"):
            arr = np.asarray(getattr(self, name), dtype=np.float64).reshape(-1)
            object.__setattr__(self, name, arr)
        n = self.rotation_mean.shape[0]
        shapes = {
            self.rotation_std.shape[0],
            self.translation_mean.shape[0],
            self.translation_std.shape[0],
        }
        if shapes != {n}:
            raise ValueError("curve arrays must share one length")

    def save(self, path) -> None:
        with open(path, "w", encoding="ascii") as f:
            f.write(
                f"# step rot_err_mean_rad rot_err_std_rad trans_err_mean_m trans_err_std_m"
                f" (episodes={self.episodes} failures={self.failures})\n"
            )
            for i in range(self.rotation_mean.shape[0]):
                f.write(
                    f"{i} {self.rotation_mean[i]:.17g} {self.rotation_std[i]:.17g} "
                    f"{self.translation_mean[i]:.17g} {self.translation_std[i]:.17g}\n"
                )

    @staticmethod
    def load(path) -> "RolloutCurves":
        with open(path, "r", encoding="ascii") as f:
            header = f.readline()
        episodes = failures = 0
        if "episodes=" in header:
            meta = header[header.find("(") + 1 : header.rfind(")")].split()
            episodes = int(meta[0].split("=")[1])
            failures = int(meta[1].split("=")[1])
        data = np.loadtxt(path, dtype=np.float64, ndmin=2)
        if data.shape[1] != 5:
            raise ValueError(f"curve file {path}: expected 5 columns")
        return RolloutCurves(data[:, 1], data[:, 2], data[:, 3], data[:, 4], episodes, failures)


@dataclass(frozen=True)
class CostMapGrid:
    """Predicted path lengths over x/y translation offsets at fixed orientation."""

    base_grasp: Pose
    x_offsets: np.ndarray
    y_offsets: np.ndarray
    values: np.ndarray  # values[i, j] at (x_offsets[i], y_offsets[j])

    def __post_init__(self):
        x = np.asarray(self.x_offsets, dtype=np.float64).reshape(-1)
        y = np.asarray(self.y_offsets, dtype=np.float64).reshape(-1)
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != (x.shape[0], y.shape[0]):
            raise ValueError("cost map values must be (len(x), len(y))")
        if not np.all(np.isfinite(v)) or np.any(v < 0.0):
            raise ValueError("cost map values must be finite and non-negative")
        object.__setattr__(self, "x_offsets", x)
        object.__setattr__(self, "y_offsets", y)
        object.__setattr__(self, "values", v)

    def minimum_index(self) -> tuple:
        flat = int(np.argmin(self.values))
        return np.unravel_index(flat, self.values.shape)

    def save(self, path) -> None:
        from .se3 import pose_to_vec9

        vec = pose_to_vec9(self.base_grasp)
        with open(path, "w", encoding="ascii") as f:
            f.write("# x_offset_m y_offset_m predicted_path_length_m; base_grasp_vec9: ")
            f.write(" ".join(f"{v:.17g}" for v in vec) + "\n")
            for i, x in enumerate(self.x_offsets):
                for j, y in enumerate(self.y_offsets):
                    f.write(f"{x:.17g} {y:.17g} {self.values[i, j]:.17g}\n")

    @staticmethod
    def load(path) -> "CostMapGrid":
        with open(path, "r", encoding="ascii") as f:
            header = f.readline()
        marker = "base_grasp_vec9:"
        if marker not in header:
            raise ValueError(f"cost map {path}: missing base grasp header")
        vec = np.array([float(t) for t in header.split(marker)[1].split()])
        base = pose_from_vec9(vec)
        data = np.loadtxt(path, dtype=np.float64, ndmin=2)
        xs = np.unique(data[:, 0])
        ys = np.unique(data[:, 1])
        values = np.full((xs.shape[0], ys.shape[0]), np.nan)
        xi = np.searchsorted(xs, data[:, 0])
        yi = np.searchsorted(ys, data[:, 1])
        values[xi, yi] = data[:, 2]
        return CostMapGrid(base, xs, ys, values)


def closest_anchor_grasp(g: Pose, anchors: AnchorGraspSet, gm: GripperModel) -> Pose:
    """The anchor minimizing the keypoint pose distance; ties keep lowest index."""
    if len(anchors) == 0:
        raise ValueError("anchor set is empty")
    dists = [pose_pair_distance(g, a, gm) for a in anchors.grasps]
    return anchors.grasps[int(np.argmin(dists))]


def sample_free_start(shape: ObjectShape, gm: GripperModel, bounds, rng) -> Pose:
    """Uniform collision-free gripper pose for episode starts."""
    bounds = np.asarray(bounds, dtype=np.float64).reshape(2, 3)
    for _ in range(1000):
        pose = Pose(random_rotation(rng), rng.uniform(bounds[0], bounds[1]))
        if not gripper_in_collision(shape, pose, gm):
            return pose
    raise RuntimeError("could not sample a collision-free start")


def sample_scene(mode: str, rng) -> ScenePose:
    """Object placement per episode: identity when static, drifting when dynamic."""
    if mode == "static":
        return ScenePose(Pose.identity())
    pose = Pose(random_rotation(rng), rng.uniform(-0.1, 0.1, 3))
    velocity = np.concatenate(
        [rng.uniform(-0.01, 0.01, 3), rng.uniform(-0.2, 0.2, 3)]
    )
    return ScenePose(pose, velocity)


def run_rollout_suite(
    cfg: EpisodeConfig,
    cost,
    shape: ObjectShape,
    anchors: AnchorGraspSet,
    mpc: MpcConfig,
    cloud: np.ndarray = None,
    gm: GripperModel = None,
    log_dir=None,
) -> RolloutCurves:
    """Seeded episode suite aggregated into per-timestep error curves.

    Episodes draw their seeds from (cfg.seed, episode index) so the suite is
    deterministic and order-independent.  Diverged episodes are counted in
    `failures` and excluded from the averages rather than silently dropped.
    """
    gm = gm if gm is not None else default_gripper()
    if isinstance(cost, ValueModel):
        if cloud is None:
            raise ValueError("a point cloud is required with a ValueModel")
        cost = LearnedGraspCost(cost, cloud, mpc.tau)
    rot = np.full((cfg.episodes, cfg.steps), np.nan)
    trans = np.full((cfg.episodes, cfg.steps), np.nan)
    failures = 0
    for ep in range(cfg.episodes):
        rng = np.random.default_rng([cfg.seed, ep])
        scene = sample_scene(cfg.mode, rng)
        start = sample_free_start(shape, gm, mpc.workspace_bounds, rng)
        try:
            log = run_episode(
                GripperState.at_rest(start), scene, shape, cost, anchors, mpc,
                cfg.steps, seed=[cfg.seed, ep, 1], gm=gm,
            )
        except FloatingPointError:
            failures += 1
            continue
        rot[ep] = log.rotation_errors
        trans[ep] = log.translation_errors
        if log_dir is not None:
            log.save(os.path.join(log_dir, f"episode_{cfg.mode}_{cfg.seed}_{ep}.txt"))
    ok = ~np.isnan(rot[:, 0])
    if not np.any(ok):
        raise RuntimeError("every episode in the suite failed")
    curves = RolloutCurves(
        rotation_mean=rot[ok].mean(axis=0),
        rotation_std=rot[ok].std(axis=0),
        translation_mean=trans[ok].mean(axis=0),
        translation_std=trans[ok].std(axis=0),
        episodes=cfg.episodes,
        failures=failures,
    )
    return curves


def stable_object_poses(shape: ObjectShape) -> list:
    """Resting orientations: boxes on each of 6 faces, bowls upright/inverted."""
    if isinstance(shape, Box):
        half_turns = [
            np.eye(3),
            rotation_about_axis([1, 0, 0], np.pi),
            rotation_about_axis([1, 0, 0], np.pi / 2),
            rotation_about_axis([1, 0, 0], -np.pi / 2),
            rotation_about_axis([0, 1, 0], np.pi / 2),
            rotation_about_axis([0, 1, 0], -np.pi / 2),
        ]
        return [Pose(r, np.zeros(3)) for r in half_turns]
    if isinstance(shape, Bowl):
        return [
            Pose(np.eye(3), np.zeros(3)),
            Pose(rotation_about_axis([1, 0, 0], np.pi), np.zeros(3)),
        ]
    raise TypeError(f"unknown shape type {type(shape).__name__}")


def final_approach_window(steps: int) -> int:
    """How many trailing steps must be collision-free for a success."""
    return max(10, steps // 10)


def grasp_success_eval(
    cost,
    shape: ObjectShape,
    anchors: AnchorGraspSet,
    mpc: MpcConfig,
    cases: int = 10,
    time_budget_steps: int = 1000,
    seed: int = 0,
    cloud: np.ndarray = None,
    gm: GripperModel = None,
    translation_tolerance: float = 0.02,
    rotation_tolerance: float = 0.2,
) -> float:
    """Fraction of cases ending within tolerance of an anchor with a clean
    final approach (ground-truth collision checks on the logged poses)."""
    gm = gm if gm is not None else default_gripper()
    if isinstance(cost, ValueModel):
        if cloud is None:
            raise ValueError("a point cloud is required with a ValueModel")
        cost = LearnedGraspCost(cost, cloud, mpc.tau)
    resting = stable_object_poses(shape)
    successes = 0
    for case in range(cases):
        rng = np.random.default_rng([seed, case])
        base = resting[int(rng.integers(len(resting)))]
        yaw = rotation_about_axis([0, 0, 1], float(rng.uniform(0.0, 2.0 * np.pi)))
        scene = ScenePose(Pose(yaw @ base.rotation, base.translation))
        start = sample_free_start(shape, gm, mpc.workspace_bounds, rng)
        try:
            log = run_episode(
                GripperState.at_rest(start), scene, shape, cost, anchors, mpc,
                time_budget_steps, seed=[seed, case, 1], gm=gm,
            )
        except FloatingPointError:
            continue
        if log.translation_errors[-1] >= translation_tolerance:
            continue
        if log.rotation_errors[-1] >= rotation_tolerance:
            continue
        window = final_approach_window(time_budget_steps)
        clean = True
        for row in log.rows[-window:]:
            pose = pose_from_vec9(row[1:10])
            if gripper_in_collision(shape, pose, gm):
                clean = False
                break
        successes += clean
    return successes / cases


def export_cost_map(
    model: ValueModel,
    cloud: np.ndarray,
    base_grasp: Pose,
    x_range: tuple,
    y_range: tuple,
    resolution: float,
    out_path=None,
) -> CostMapGrid:
    """Sweep x/y translation offsets at the base grasp's orientation and
    record the predicted path length at every cell."""
    if resolution <= 0.0:
        raise ValueError("resolution must be positive")

    def offsets(lo, hi):
        n = max(1, int(round((hi - lo) / resolution)) + 1)
        return lo + resolution * np.arange(n) if hi > lo else np.array([lo])

    xs = offsets(*x_range)
    ys = offsets(*y_range)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    n = gx.size
    vecs = np.empty((n, 9))
    vecs[:, 0:3] = base_grasp.rotation[:, 0]
    vecs[:, 3:6] = base_grasp.rotation[:, 1]
    vecs[:, 6] = base_grasp.translation[0] + gx.ravel()
    vecs[:, 7] = base_grasp.translation[1] + gy.ravel()
    vecs[:, 8] = base_grasp.translation[2]
    feature = encode_cloud(model.path, cloud)
    values = softplus(branch_raw_outputs(model.path, feature, vecs)).astype(np.float64)
    grid = CostMapGrid(base_grasp, xs, ys, values.reshape(xs.shape[0], ys.shape[0]))
    if out_path is not None:
        grid.save(out_path)
    return grid


def ray_is_monotone(values: np.ndarray, allowed_violations: int = 1) -> bool:
    """Non-decreasing along the ray, forgiving `allowed_violations` steps."""
    diffs = np.diff(np.asarray(values, dtype=np.float64))
    return int(np.sum(diffs < 0.0)) <= allowed_violations


def cost_map_ray_monotonicity(grid: CostMapGrid) -> int:
    """How many of the 4 axis-aligned rays from the grid minimum rise
    monotonically (with one forgiven step each)."""
    i, j = grid.minimum_index()
    rays = [
        grid.values[i, j:],
        grid.values[i, j::-1],
        grid.values[i:, j],
        grid.values[i::-1, j],
    ]
    return sum(ray_is_monotone(r) for r in rays if r.shape[0] > 1)


def run_ablation(
    suite: str,
    variants: dict,
    shape: ObjectShape,
    anchors: AnchorGraspSet,
    episode_cfg: EpisodeConfig,
    mpc: MpcConfig,
    cloud: np.ndarray,
    gm: GripperModel = None,
    out_dir=None,
) -> dict:
    """Run the rollout suite for pre-trained ablation variants.

    `variants` maps a label (e.g. 100, 10, 5 or 32, 16, 2) to a trained
    ValueModel.  Returns {label: RolloutCurves}; files are written as
    <suite>_<label>_seed<seed>.curves.txt when out_dir is given.  The error
    metric always references the full anchor set so labels are comparable.
    """
    if suite not in ("dataset_fraction", "anchor_count"):
        raise ValueError(f"unknown ablation suite {suite!r}")
    if not variants:
        raise ValueError(f"no variants supplied for {suite}")
    results = {}
    for label, model in variants.items():
        if model is None:
            raise ValueError(f"missing trained model for {suite} variant {label}")
        curves = run_rollout_suite(episode_cfg, model, shape, anchors, mpc, cloud=cloud, gm=gm)
        results[label] = curves
        if out_dir is not None:
            curves.save(
                os.path.join(out_dir, f"{suite}_{label}_seed{episode_cfg.seed}.curves.txt")
            )
    return results
