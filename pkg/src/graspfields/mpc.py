"""Sampling-based MPC that steers a free-floating gripper into a grasp.

The controller is MPPI over a double-integrator state (pose + twist).  Each
update draws K noisy acceleration sequences around the running nominal, rolls
them out H steps, scores every visited pose with a grasp cost plus quadratic
smoothness/limit terms, and exponentially reweights.  The grasp cost is
predicted path length to the nearest grasp plus a hard unit penalty when the
predicted collision probability crosses the threshold tau.

Costs are evaluated in the object frame, so a moving object just changes the
frame conversion each step and the same model keeps working.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .network import ValueModel, branch_raw_outputs, encode_cloud, sigmoid, softplus
from .planner import AnchorGraspSet
from .scene import ObjectShape, ScenePose, gripper_collision_mask, step_scene_pose
from .se3 import (
    GripperModel,
    Pose,
    compose_poses,
    default_gripper,
    invert_pose,
    pose_errors,
    rotation_about_axis,
    transform_keypoints,
)

DEFAULT_TWIST_LIMIT = np.array([1.0, 1.0, 1.0, 2.0, 2.0, 2.0])
DEFAULT_ACCEL_LIMIT = np.array([2.0, 2.0, 2.0, 4.0, 4.0, 4.0])
# Exploration noise spanning the full acceleration authority: with dt = 0.02
# and a 20-step horizon, smaller perturbations barely separate the rollout
# costs and the sampler stops making progress.
DEFAULT_NOISE_SIGMA = np.array([2.0, 2.0, 2.0, 4.0, 4.0, 4.0])


@dataclass(frozen=True)
class MpcConfig:
    horizon: int = 20
    samples: int = 64
    dt: float = 0.02
    noise_sigma: np.ndarray = field(default_factory=lambda: DEFAULT_NOISE_SIGMA.copy())
    temperature: float = 0.05
    tau: float = 0.25
    smooth_weight: float = 0.01
    accel_weight: float = 1e-4
    bounds_weight: float = 100.0
    twist_limit: np.ndarray = field(default_factory=lambda: DEFAULT_TWIST_LIMIT.copy())
    accel_limit: np.ndarray = field(default_factory=lambda: DEFAULT_ACCEL_LIMIT.copy())
    workspace_bounds: np.ndarray = field(
        default_factory=lambda: np.array([[-0.4, -0.4, -0.4], [0.4, 0.4, 0.4]])
    )

    def __post_init__(self):
        if self.horizon < 1 or self.samples < 2:
            raise ValueError("need horizon >= 1 and samples >= 2")
        if self.dt <= 0.0 or self.temperature <= 0.0:
            raise ValueError("dt and temperature must be positive")
        if not (0.0 < self.tau < 1.0):
            raise ValueError("tau must lie strictly inside (0, 1)")
        for name in ("noise_sigma", "twist_limit", "accel_limit"):
            v = np.asarray(getattr(self, name), dtype=np.float64).reshape(6)
            if not np.all(np.isfinite(v)) or np.any(v <= 0.0):
                raise ValueError(f"{name} must be 6 positive finite values")
            object.__setattr__(self, name, v)
        if min(self.smooth_weight, self.accel_weight, self.bounds_weight) < 0.0:
            raise ValueError("cost weights must be non-negative")
        bounds = np.asarray(self.workspace_bounds, dtype=np.float64).reshape(2, 3)
        if np.any(bounds[1] <= bounds[0]):
            raise ValueError("workspace bounds upper corner must dominate lower")
        object.__setattr__(self, "workspace_bounds", bounds)


@dataclass(frozen=True)
class GripperState:
    pose: Pose
    twist: np.ndarray  # (6,) linear m/s then angular rad/s

    def __post_init__(self):
        twist = np.asarray(self.twist, dtype=np.float64).reshape(6).copy()
        if not np.all(np.isfinite(twist)):
            raise ValueError("twist must be finite")
        object.__setattr__(self, "twist", twist)

    @staticmethod
    def at_rest(pose: Pose) -> "GripperState":
        return GripperState(pose, np.zeros(6))


@dataclass(frozen=True)
class ControlSequence:
    accelerations: np.ndarray  # (H, 6)

    def __post_init__(self):
        acc = np.asarray(self.accelerations, dtype=np.float64)
        if acc.ndim != 2 or acc.shape[1] != 6 or not np.all(np.isfinite(acc)):
            raise ValueError("accelerations must be a finite (H, 6) array")
        object.__setattr__(self, "accelerations", acc)

    @staticmethod
    def zeros(horizon: int) -> "ControlSequence":
        return ControlSequence(np.zeros((horizon, 6)))


def rotations_from_rotvecs(w: np.ndarray) -> np.ndarray:
    """Batched Rodrigues map: (B, 3) rotation vectors -> (B, 3, 3) matrices.

    Uses R = cos(t) I + sin(t) [a]x + (1 - cos(t)) a a^T assembled component
    by component; near-zero angles fall back to the identity exactly.
    """
    w = np.asarray(w, dtype=np.float64)
    angles = np.linalg.norm(w, axis=1)
    safe = np.where(angles > 1e-12, angles, 1.0)
    ax, ay, az = (w / safe[:, None]).T
    c = np.cos(angles)
    s = np.sin(angles)
    c[angles <= 1e-12] = 1.0
    s[angles <= 1e-12] = 0.0
    v = 1.0 - c
    rots = np.empty(w.shape[:1] + (3, 3))
    rots[:, 0, 0] = c + v * ax * ax
    rots[:, 0, 1] = v * ax * ay - s * az
    rots[:, 0, 2] = v * ax * az + s * ay
    rots[:, 1, 0] = v * ay * ax + s * az
    rots[:, 1, 1] = c + v * ay * ay
    rots[:, 1, 2] = v * ay * az - s * ax
    rots[:, 2, 0] = v * az * ax - s * ay
    rots[:, 2, 1] = v * az * ay + s * ax
    rots[:, 2, 2] = c + v * az * az
    return rots


# ---------------------------------------------------------------------------
# Grasp-cost providers.  Both expose costs(rotations, translations) working in
# the object frame; mppi_update handles the world-to-object conversion.


class LearnedGraspCost:
    """Caches the per-branch cloud encodings; per query only the heads run."""

    def __init__(self, model: ValueModel, cloud: np.ndarray, tau: float = 0.25):
        self.model = model
        self.tau = float(tau)
        dt = model.path.theta.dtype
        self._path_feat = encode_cloud(model.path, np.asarray(cloud, dtype=dt))
        self._coll_feat = encode_cloud(model.collision, np.asarray(cloud, dtype=dt))
        self._dtype = dt

    def costs(self, rotations: np.ndarray, translations: np.ndarray):
        vecs = np.concatenate(
            [rotations[:, :, 0], rotations[:, :, 1], translations], axis=1
        ).astype(self._dtype)
        lengths = softplus(branch_raw_outputs(self.model.path, self._path_feat, vecs))
        probs = sigmoid(branch_raw_outputs(self.model.collision, self._coll_feat, vecs))
        # compare in float64 so the inclusive threshold is exact even when the
        # model computes in float32
        hit = probs.astype(np.float64) >= self.tau
        return lengths.astype(np.float64) + hit, hit


class OracleGraspCost:
    """Ground-truth stand-in: nearest-anchor pose distance + true collision.

    Distances expand |x - a|^2 = |x|^2 + |a|^2 - 2 x.a against precomputed
    anchor keypoint tables, which keeps the per-query cost at one small
    batched matmul instead of materializing a (B, anchors, keypoints, 3)
    difference tensor.
    """

    def __init__(self, shape: ObjectShape, anchors: AnchorGraspSet, gm: GripperModel = None):
        self.shape = shape
        self.gm = gm if gm is not None else default_gripper()
        self.anchors = anchors
        images = np.stack([transform_keypoints(g, self.gm) for g in anchors.grasps])
        # (m, 3, A) keypoint table and (m, A) squared norms
        self._anchor_kps_t = np.ascontiguousarray(images.transpose(1, 2, 0))
        self._anchor_sq = np.ascontiguousarray(np.sum(images * images, axis=2).T)

    def costs(self, rotations: np.ndarray, translations: np.ndarray):
        kps = np.einsum("bij,mj->mbi", rotations, self.gm.keypoints) + translations[None, :, :]
        dots = kps @ self._anchor_kps_t  # (m, B, A)
        sq = np.sum(kps * kps, axis=2)  # (m, B)
        d2 = sq[:, :, None] + self._anchor_sq[:, None, :] - 2.0 * dots
        np.maximum(d2, 0.0, out=d2)
        np.sqrt(d2, out=d2)
        nearest = d2.mean(axis=0).min(axis=1)
        hit = gripper_collision_mask(self.shape, rotations, translations, self.gm)
        return nearest + hit, hit


def grasp_cost(model: ValueModel, cloud: np.ndarray, g: Pose, tau: float = 0.25) -> float:
    """Predicted path length plus a unit penalty when P(collision) >= tau."""
    provider = LearnedGraspCost(model, cloud, tau)
    costs, _ = provider.costs(g.rotation[None], g.translation[None])
    return float(costs[0])


def auxiliary_cost(state: GripperState, controls: np.ndarray, cfg: MpcConfig) -> float:
    """Quadratic smoothness, effort, and workspace-violation penalty."""
    controls = np.asarray(controls, dtype=np.float64).reshape(6)
    lo, hi = cfg.workspace_bounds
    t = state.pose.translation
    violation = np.maximum(lo - t, 0.0) + np.maximum(t - hi, 0.0)
    return float(
        cfg.smooth_weight * np.dot(state.twist, state.twist)
        + cfg.accel_weight * np.dot(controls, controls)
        + cfg.bounds_weight * np.dot(violation, violation)
    )


def step_dynamics(
    state: GripperState, accel: np.ndarray, dt: float, twist_limit: np.ndarray = DEFAULT_TWIST_LIMIT
) -> GripperState:
    """Euler double-integrator step; angular rate integrates in the body frame."""
    accel = np.asarray(accel, dtype=np.float64).reshape(6)
    twist = np.clip(state.twist + accel * dt, -twist_limit, twist_limit)
    ang = twist[3:] * dt
    angle = float(np.linalg.norm(ang))
    spin = rotation_about_axis(ang, angle) if angle > 1e-15 else np.eye(3)
    moved = Pose(state.pose.rotation, state.pose.translation + twist[:3] * dt)
    return GripperState(compose_poses(moved, Pose(spin, np.zeros(3))), twist)


def _as_cost_provider(cost, cloud, cfg: MpcConfig):
    if isinstance(cost, ValueModel):
        if cloud is None:
            raise ValueError("a point cloud is required with a ValueModel")
        return LearnedGraspCost(cost, cloud, cfg.tau)
    return cost


def mppi_update(
    state: GripperState,
    nominal: ControlSequence,
    cost,
    cfg: MpcConfig,
    rng,
    cloud: np.ndarray = None,
    object_pose: Pose = None,
):
    """One MPPI iteration.

    Returns (next nominal sequence shifted by one step, the control to execute
    now, telemetry dict).  `cost` is either a ValueModel (then `cloud` must be
    given) or any provider with costs(rotations, translations).
    """
    provider = _as_cost_provider(cost, cloud, cfg)
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    h, k = cfg.horizon, cfg.samples
    if nominal.accelerations.shape[0] != h:
        raise ValueError("nominal sequence length must equal the horizon")
    noise = rng.normal(size=(k, h, 6)) * cfg.noise_sigma
    noise[0] = 0.0  # sample 0 re-evaluates the unperturbed nominal plan
    seqs = np.clip(nominal.accelerations[None] + noise, -cfg.accel_limit, cfg.accel_limit)

    # Roll the dynamics sequentially (cheap), then score every visited pose in
    # one batched provider call (the expensive part).
    all_rots = np.empty((h, k, 3, 3))
    all_trans = np.empty((h, k, 3))
    all_twists = np.empty((h, k, 6))
    rots = np.broadcast_to(state.pose.rotation, (k, 3, 3))
    trans = state.pose.translation
    twists = state.twist
    for step in range(h):
        twists = np.clip(twists + seqs[:, step] * cfg.dt, -cfg.twist_limit, cfg.twist_limit)
        trans = trans + twists[:, :3] * cfg.dt
        rots = rots @ rotations_from_rotvecs(twists[:, 3:] * cfg.dt)
        all_rots[step] = rots
        all_trans[step] = trans
        all_twists[step] = twists

    flat_rots = all_rots.reshape(h * k, 3, 3)
    flat_trans = all_trans.reshape(h * k, 3)
    if object_pose is None:
        query_r, query_t = flat_rots, flat_trans
    else:
        inv = invert_pose(object_pose)
        query_r = np.einsum("ij,bjk->bik", inv.rotation, flat_rots)
        query_t = flat_trans @ inv.rotation.T + inv.translation
    step_costs, _ = provider.costs(query_r, query_t)

    lo, hi = cfg.workspace_bounds
    violation = np.maximum(lo - all_trans, 0.0) + np.maximum(all_trans - hi, 0.0)
    total = (
        step_costs.reshape(h, k).sum(axis=0)
        + cfg.smooth_weight * np.sum(all_twists * all_twists, axis=(0, 2))
        + cfg.accel_weight * np.sum(seqs * seqs, axis=(1, 2))
        + cfg.bounds_weight * np.sum(violation * violation, axis=(0, 2))
    )

    if not np.all(np.isfinite(total)):
        raise FloatingPointError("non-finite rollout costs in MPPI update")
    best = float(np.min(total))
    weights = np.exp(-(total - best) / cfg.temperature)
    weights /= np.sum(weights)
    averaged = np.einsum("k,khu->hu", weights, seqs)
    execute = averaged[0].copy()
    shifted = np.vstack([averaged[1:], averaged[-1:]])
    telemetry = {
        "min_cost": best,
        "mean_cost": float(np.mean(total)),
        "max_weight": float(np.max(weights)),
        "effective_samples": float(1.0 / np.sum(weights * weights)),
    }
    return ControlSequence(shifted), execute, telemetry


# ---------------------------------------------------------------------------
# Episodes


LOG_COLUMNS = 14  # step, 9 pose values, grasp cost, collision, rot err, trans err


@dataclass(frozen=True)
class RolloutLog:
    """Per-step telemetry of one episode; poses are in the object frame."""

    rows: np.ndarray  # (steps, LOG_COLUMNS)

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.float64).reshape(-1, LOG_COLUMNS)
        object.__setattr__(self, "rows", rows)

    def __len__(self) -> int:
        return self.rows.shape[0]

    @property
    def grasp_costs(self) -> np.ndarray:
        return self.rows[:, 10]

    @property
    def collisions(self) -> np.ndarray:
        return self.rows[:, 11].astype(bool)

    @property
    def rotation_errors(self) -> np.ndarray:
        return self.rows[:, 12]

    @property
    def translation_errors(self) -> np.ndarray:
        return self.rows[:, 13]

    def save(self, path) -> None:
        with open(path, "w", encoding="ascii") as f:
            for row in self.rows:
                fields = [f"{int(row[0])}"] + [f"{v:.9g}" for v in row[1:]]
                f.write(" ".join(fields) + "\n")

    @staticmethod
    def load(path) -> "RolloutLog":
        rows = np.loadtxt(path, dtype=np.float64, ndmin=2)
        if rows.size == 0 or rows.shape[1] != LOG_COLUMNS:
            raise ValueError(f"rollout log {path}: expected {LOG_COLUMNS} columns")
        return RolloutLog(rows)


def nearest_anchor(g_obj: Pose, anchors: AnchorGraspSet, gm: GripperModel, images=None) -> int:
    """Index of the anchor closest to g_obj in the keypoint pseudo-metric."""
    if images is None:
        images = np.stack([transform_keypoints(a, gm) for a in anchors.grasps])
    kps = transform_keypoints(g_obj, gm)
    dists = np.linalg.norm(images - kps[None], axis=2).mean(axis=1)
    return int(np.argmin(dists))


def run_episode(
    initial: GripperState,
    scene: ScenePose,
    shape: ObjectShape,
    cost,
    anchors: AnchorGraspSet,
    cfg: MpcConfig,
    steps: int,
    seed,
    cloud: np.ndarray = None,
    gm: GripperModel = None,
) -> RolloutLog:
    """Run MPPI closed loop for `steps` control cycles.

    The object may move (scene.velocity); each step advances the object, then
    plans against its current frame.  Logged poses and errors are object-frame
    so downstream success checks need no replay of the object motion.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    provider = _as_cost_provider(cost, cloud, cfg)
    gm = gm if gm is not None else default_gripper()
    rng = np.random.default_rng(seed)
    state = initial
    nominal = ControlSequence.zeros(cfg.horizon)
    moving = bool(np.any(scene.velocity != 0.0))
    anchor_images = np.stack([transform_keypoints(a, gm) for a in anchors.grasps])
    rows = np.zeros((steps, LOG_COLUMNS))
    for k in range(steps):
        if moving:
            scene = step_scene_pose(scene, cfg.dt)
        obj_pose = scene.object_pose
        identity_frame = not moving and np.array_equal(
            obj_pose.translation, np.zeros(3)
        ) and np.array_equal(obj_pose.rotation, np.eye(3))
        nominal, control, _ = mppi_update(
            state, nominal, provider, cfg, rng,
            object_pose=None if identity_frame else obj_pose,
        )
        state = step_dynamics(state, control, cfg.dt, cfg.twist_limit)
        if not (
            np.all(np.isfinite(state.pose.translation)) and np.all(np.isfinite(state.twist))
        ):
            raise FloatingPointError(f"non-finite gripper state at episode step {k}")
        g_obj = state.pose if identity_frame else compose_poses(invert_pose(obj_pose), state.pose)
        cost_now, hit_now = provider.costs(g_obj.rotation[None], g_obj.translation[None])
        best = anchors.grasps[nearest_anchor(g_obj, anchors, gm, anchor_images)]
        rot_err, trans_err = pose_errors(g_obj, best)
        rows[k, 0] = k
        rows[k, 1:4] = g_obj.rotation[:, 0]
        rows[k, 4:7] = g_obj.rotation[:, 1]
        rows[k, 7:10] = g_obj.translation
        rows[k, 10] = cost_now[0]
        rows[k, 11] = float(bool(hit_now[0]))
        rows[k, 12] = rot_err
        rows[k, 13] = trans_err
    return RolloutLog(rows)
