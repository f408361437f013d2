"""Anchor grasp construction and RRT trajectory generation.

Anchor grasps are antipodal pinches built analytically per shape family
(opposing box faces, bowl rim), culled by the exact collision test, thinned
to 16 well-spread poses with farthest point sampling, then doubled by
rotating each grasp 180 degrees about its own wrist axis.  Trajectories are
planned with a goal-biased RRT directly in SE(3) using the keypoint pose
distance as the tree metric, then densified and labeled with cumulative path
length from the grasp end.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dataset import RANDOM_POSE_SENTINEL, RECORD_DTYPE, write_dataset
from .scene import (
    Bowl,
    Box,
    ObjectShape,
    farthest_point_sample,
    gripper_in_collision,
    sdf_query,
)
from .se3 import (
    GripperModel,
    Pose,
    Trajectory,
    _log_rotation,
    compose_poses,
    interpolate_poses,
    pose_on_geodesic,
    pose_pair_distance,
    pose_to_vec9,
    random_rotation,
    rotation_about_axis,
    transform_keypoints,
)

RZ_180 = np.diag([-1.0, -1.0, 1.0])

GRIP_DEPTH = 0.015  # how far the fingertips reach past the contact surface
FINGER_TIP_Z = 0.112  # wrist-frame height of the fingertip keypoints
# Widest object section the jaws may straddle.  At 0.056 m the fingertip
# spheres (8 mm) keep >= 4 mm of clearance inside the grasp corridor, which is
# exactly the planner's edge margin, so planned approaches stay verifiable.
MAX_GRASP_SPAN = 0.056


@dataclass(frozen=True)
class AnchorGraspSet:
    """Grasp poses in the object frame plus a tag describing their origin."""

    grasps: tuple
    source: str = "flipped_32"

    def __post_init__(self):
        grasps = tuple(self.grasps)
        object.__setattr__(self, "grasps", grasps)
        if self.source == "flipped_32":
            if len(grasps) != 32:
                raise ValueError("flipped_32 anchor sets hold exactly 32 grasps")
            for i in range(16):
                a, b = grasps[i], grasps[i + 16]
                rel = a.rotation.T @ b.rotation
                if np.max(np.abs(rel - RZ_180)) > 1e-9:
                    raise ValueError(f"anchor {i + 16} is not the wrist flip of anchor {i}")
                if np.max(np.abs(a.translation - b.translation)) > 1e-9:
                    raise ValueError(f"anchor {i + 16} moved away from anchor {i}")

    def __len__(self) -> int:
        return len(self.grasps)

    def subset(self, k: int) -> "AnchorGraspSet":
        """First k grasps in construction order (k=16 is the unflipped half)."""
        if not (1 <= k <= len(self.grasps)):
            raise ValueError("subset size out of range")
        if k == len(self.grasps):
            return self
        return AnchorGraspSet(self.grasps[:k], source=f"subset({k})")


@dataclass(frozen=True)
class RrtConfig:
    step_size: float = 0.05
    goal_bias: float = 0.1
    max_iterations: int = 5000
    goal_tolerance: float = 1e-3
    workspace_bounds: np.ndarray = field(
        default_factory=lambda: np.array([[-0.4, -0.4, -0.4], [0.4, 0.4, 0.4]])
    )
    edge_margin: float = 0.004  # clearance enforced along tree edges
    edge_resolution: float = 0.005  # pose spacing of edge collision samples
    approach_retreat: float = 0.08  # standoff distance back along the wrist axis

    def __post_init__(self):
        if not (0.0 <= self.goal_bias <= 1.0):
            raise ValueError("goal_bias must be a probability")
        if self.step_size <= 0.0 or self.max_iterations < 1:
            raise ValueError("bad RRT step_size / max_iterations")
        bounds = np.asarray(self.workspace_bounds, dtype=np.float64).reshape(2, 3)
        if np.any(bounds[1] <= bounds[0] - 1e-12):
            raise ValueError("workspace bounds upper corner must dominate lower")
        object.__setattr__(self, "workspace_bounds", bounds)


def _rng_from(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def _wrist_flip(p: Pose) -> Pose:
    # Right-composing with Rz(180) negates the first two rotation columns
    # exactly and keeps the translation, so the flip relation is bit-clean.
    return Pose(p.rotation @ RZ_180, p.translation)


def _grasp_pose(position, closing_axis, approach_axis) -> Pose:
    x = np.asarray(closing_axis, dtype=np.float64)
    z = np.asarray(approach_axis, dtype=np.float64)
    y = np.cross(z, x)
    rot = np.stack([x, y, z], axis=1)
    return Pose(rot, position)


def _box_candidates(box: Box) -> list:
    """Pinches on every face whose thinner lateral extent fits the jaws."""
    cands = []
    ext = box.extents
    n_slide = 12
    for axis in range(3):
        lat = [i for i in range(3) if i != axis]
        close_axis = lat[0] if ext[lat[0]] <= ext[lat[1]] else lat[1]
        slide_axis = lat[1] if close_axis == lat[0] else lat[0]
        if ext[close_axis] > MAX_GRASP_SPAN:
            continue
        for sign in (1.0, -1.0):
            normal = np.zeros(3)
            normal[axis] = sign
            closing = np.zeros(3)
            closing[close_axis] = 1.0
            half_slide = 0.5 * ext[slide_axis]
            for s in np.linspace(-0.8, 0.8, n_slide):
                pos = normal * (0.5 * ext[axis] + FINGER_TIP_Z - GRIP_DEPTH)
                pos = pos + s * half_slide * _unit(slide_axis)
                cands.append(_grasp_pose(pos, closing, -normal))
    return cands


def _unit(axis: int) -> np.ndarray:
    e = np.zeros(3)
    e[axis] = 1.0
    return e


def _bowl_candidates(bowl: Bowl) -> list:
    """Rim pinches: straddle the wall from above, fingers radial."""
    cands = []
    wall = bowl.outer_radius - bowl.inner_radius
    if wall > MAX_GRASP_SPAN:
        return cands
    r_mid = 0.5 * (bowl.outer_radius + bowl.inner_radius)
    for theta in np.linspace(0.0, 2.0 * np.pi, 64, endpoint=False):
        radial = np.array([np.cos(theta), np.sin(theta), 0.0])
        pos = r_mid * radial + np.array([0.0, 0.0, FINGER_TIP_Z - GRIP_DEPTH])
        cands.append(_grasp_pose(pos, radial, np.array([0.0, 0.0, -1.0])))
    return cands


def generate_anchor_grasps(shape: ObjectShape, seed: int, gm: GripperModel) -> AnchorGraspSet:
    """16 farthest-point-spread collision-free pinches plus their wrist flips."""
    if isinstance(shape, Box):
        cands = _box_candidates(shape)
    elif isinstance(shape, Bowl):
        cands = _bowl_candidates(shape)
    else:
        raise TypeError(f"unknown shape type {type(shape).__name__}")
    free = [g for g in cands if not gripper_in_collision(shape, g, gm)]
    if len(free) < 16:
        raise ValueError("object admits too few grasps")
    translations = np.stack([g.translation for g in free])
    picks = farthest_point_sample(translations, 16, seed=seed)
    base = [free[i] for i in picks]
    return AnchorGraspSet(tuple(base + [_wrist_flip(g) for g in base]), source="flipped_32")


def sample_start_pose(
    anchor: Pose,
    bounds: np.ndarray,
    shape: ObjectShape,
    gm: GripperModel,
    seed,
    margin: float = 0.0,
    reach: float = 0.5,
    max_tilt: float = np.pi / 2,
) -> Pose:
    """Collision-free start pose sampled relative to the goal grasp.

    Translation is uniform in a `reach`-radius ball around the anchor
    (rejected when it leaves the workspace box); rotation perturbs the
    anchor's by a random axis and an angle uniform in [0, max_tilt].  Keeping
    starts oriented toward their own goal keeps the path-length labels of
    nearby poses consistent -- with fully random rotations the same pose
    shows up on trajectories to opposing anchors and the regression targets
    disagree by the anchor spacing.  Rejection-samples up to 1000 draws.
    """
    rng = _rng_from(seed)
    bounds = np.asarray(bounds, dtype=np.float64).reshape(2, 3)
    for _ in range(1000):
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        offset = direction * reach * rng.uniform() ** (1.0 / 3.0)
        translation = anchor.translation + offset
        if np.any(translation < bounds[0]) or np.any(translation > bounds[1]):
            continue
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        tilt = rotation_about_axis(axis, rng.uniform(0.0, max_tilt))
        pose = Pose(anchor.rotation @ tilt, translation)
        if not gripper_in_collision(shape, pose, gm, margin=margin):
            return pose
    raise RuntimeError("workspace too constrained")


# ---------------------------------------------------------------------------
# RRT


def _max_center_travel(a: Pose, b: Pose, gm: GripperModel) -> float:
    """Upper bound on how far any collision-sphere center moves from a to b."""
    trans = float(np.linalg.norm(a.translation - b.translation))
    cos_angle = np.clip((np.trace(a.rotation.T @ b.rotation) - 1.0) * 0.5, -1.0, 1.0)
    angle = float(np.arccos(cos_angle))
    reach = float(np.max(np.linalg.norm(gm.sphere_centers, axis=1)))
    return trans + angle * reach


def _edge_is_clear(a: Pose, b: Pose, shape: ObjectShape, gm: GripperModel, cfg: RrtConfig) -> bool:
    """Margin-checked sweep: samples spaced so the centers move <= resolution
    between checks; with clearance >= edge_margin at each sample the whole
    edge (and anything later interpolated on it) stays strictly outside."""
    travel = _max_center_travel(a, b, gm)
    steps = max(2, int(math.ceil(travel / cfg.edge_resolution)) + 1)
    t = np.linspace(0.0, 1.0, steps)
    rel = _log_rotation(a.rotation.T @ b.rotation)
    angle = float(np.linalg.norm(rel))
    if angle > 0.0:
        x, y, z = rel / angle
        k = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
        ang = t * angle
        rel_rots = (
            np.eye(3)
            + np.sin(ang)[:, None, None] * k
            + (1.0 - np.cos(ang))[:, None, None] * (k @ k)
        )
        rots = a.rotation @ rel_rots
    else:
        rots = np.broadcast_to(a.rotation, (steps, 3, 3))
    trans = (1.0 - t)[:, None] * a.translation + t[:, None] * b.translation
    centers = np.einsum("bij,sj->bsi", rots, gm.sphere_centers) + trans[:, None, :]
    d = sdf_query(shape, centers)
    return not np.any(d < gm.sphere_radii[None, :] + cfg.edge_margin)


class _Tree:
    """Pose nodes with parents and cached keypoint images for fast NN."""

    def __init__(self, root: Pose, gm: GripperModel, capacity: int = 256):
        self.gm = gm
        m = gm.num_keypoints
        self.images = np.empty((capacity, m, 3))
        self.poses = [root]
        self.parents = [-1]
        self.images[0] = transform_keypoints(root, gm)
        self.size = 1

    def add(self, pose: Pose, parent: int) -> int:
        if self.size == self.images.shape[0]:
            grown = np.empty((2 * self.size, *self.images.shape[1:]))
            grown[: self.size] = self.images
            self.images = grown
        self.images[self.size] = transform_keypoints(pose, self.gm)
        self.poses.append(pose)
        self.parents.append(parent)
        self.size += 1
        return self.size - 1

    def nearest(self, pose: Pose) -> int:
        target = transform_keypoints(pose, self.gm)
        d = np.linalg.norm(self.images[: self.size] - target, axis=2).mean(axis=1)
        return int(np.argmin(d))


def _steer(from_pose: Pose, to_pose: Pose, step: float, dist: float) -> Pose:
    if dist <= step:
        return to_pose
    return pose_on_geodesic(from_pose, to_pose, step / dist)


def _march(tree: _Tree, node: int, target: Pose, shape, gm, cfg) -> tuple:
    """Greedy connect: step from node toward target until blocked or arrived.

    Returns (last node index, reached target exactly)."""
    prev_dist = np.inf
    while True:
        cur = tree.poses[node]
        dist = pose_pair_distance(cur, target, gm)
        if dist <= 1e-12:
            return node, True
        if dist >= prev_dist - 1e-12:
            return node, False
        prev_dist = dist
        nxt = _steer(cur, target, cfg.step_size, dist)
        if not _edge_is_clear(cur, nxt, shape, gm, cfg):
            return node, False
        node = tree.add(nxt, node)
        if nxt is target:
            return node, True


def _extract(tree: _Tree, node: int) -> Trajectory:
    waypoints = []
    while node >= 0:
        waypoints.append(tree.poses[node])
        node = tree.parents[node]
    # The walk runs leaf -> root, i.e. grasp end first, which is the wanted
    # ordering: waypoint 0 is the grasp.
    return Trajectory(tuple(waypoints))


def rrt_plan(start: Pose, goal: Pose, shape: ObjectShape, cfg: RrtConfig, seed, gm: GripperModel) -> Trajectory:
    """Plan a collision-free pose path; waypoint 0 is the grasp (goal) end.

    Raises RuntimeError("no path found") when max_iterations is exhausted.
    """
    rng = _rng_from(seed)
    if pose_pair_distance(start, goal, gm) <= cfg.goal_tolerance:
        return Trajectory((start,))
    tree = _Tree(start, gm)
    bounds = cfg.workspace_bounds
    # Iteration 1 always aims straight at the goal, so uncluttered problems
    # resolve with a single connect.
    node, reached = _march(tree, 0, goal, shape, gm, cfg)
    if reached or pose_pair_distance(tree.poses[node], goal, gm) <= cfg.goal_tolerance:
        return _extract(tree, node)
    # The grasp corridor is too narrow to enter from a random direction, so
    # the tree aims for a standoff pose straight back along the wrist axis
    # and the final descent is an explicit axis-aligned edge.
    pre_grasp = compose_poses(goal, Pose(np.eye(3), [0.0, 0.0, -cfg.approach_retreat]))
    for _ in range(1, cfg.max_iterations):
        if rng.random() < cfg.goal_bias:
            target = pre_grasp
        else:
            target = Pose(random_rotation(rng), rng.uniform(bounds[0], bounds[1]))
        node, reached = _march(tree, tree.nearest(target), target, shape, gm, cfg)
        if target is not pre_grasp:
            continue
        near = reached or pose_pair_distance(tree.poses[node], pre_grasp, gm) <= cfg.goal_tolerance
        if near and _edge_is_clear(tree.poses[node], goal, shape, gm, cfg):
            return _extract(tree, tree.add(goal, node))
    raise RuntimeError("no path found")


def label_trajectory(traj: Trajectory, gm: GripperModel) -> list:
    """[(waypoint_index, cumulative path length from waypoint 0)]."""
    labels = [(0, 0.0)]
    total = 0.0
    for i in range(1, len(traj)):
        total += pose_pair_distance(traj[i - 1], traj[i], gm)
        labels.append((i, total))
    return labels


def densify_trajectory(traj: Trajectory, gm: GripperModel, spacing: float = 0.01) -> Trajectory:
    """Insert geodesic waypoints so consecutive pose distances are <= spacing.

    The chord distance only lower-bounds the geodesic arc, so the split count
    is refined until the realized sub-chords actually meet the bound.
    """
    if len(traj) < 2:
        return traj
    out = [traj[0]]
    for i in range(1, len(traj)):
        a, b = traj[i - 1], traj[i]
        d = pose_pair_distance(a, b, gm)
        steps = max(2, int(math.ceil(d / spacing)) + 1)
        while True:
            seg = interpolate_poses(a, b, steps)
            widths = [pose_pair_distance(seg[j], seg[j + 1], gm) for j in range(steps - 1)]
            worst = max(widths)
            if worst <= spacing:
                break
            steps = max(steps + 1, int(math.ceil((steps - 1) * worst / spacing)) + 1)
        out.extend(seg[1:])
    return Trajectory(tuple(out))


def build_dataset(
    shape: ObjectShape,
    anchors: AnchorGraspSet,
    n_trajectories: int,
    cfg: RrtConfig,
    seed: int,
    out_path,
    gm: GripperModel,
    phi: float = 1.0,
    object_index: int = 0,
    densify_spacing: float = 0.01,
    random_poses_per_trajectory: int = 4,
) -> dict:
    """Plan, densify, label, filter by phi, and write the dataset file.

    Each trajectory id draws its own random stream from (seed, id), so the
    output is byte-identical however the work is scheduled.  Returns counts.
    """
    all_records = []
    kept = discarded = failures = 0
    for traj_id in range(n_trajectories):
        rng = np.random.default_rng([seed, traj_id])
        anchor = anchors.grasps[int(rng.integers(len(anchors.grasps)))]
        try:
            start = sample_start_pose(
                anchor, cfg.workspace_bounds, shape, gm, rng, margin=cfg.edge_margin
            )
            traj = rrt_plan(start, anchor, shape, cfg, rng, gm)
        except RuntimeError:
            failures += 1
            continue
        dense = densify_trajectory(traj, gm, spacing=densify_spacing)
        labels = label_trajectory(dense, gm)
        if labels[-1][1] > phi:
            discarded += 1
            continue
        kept += 1
        recs = np.zeros(len(dense) + random_poses_per_trajectory, dtype=RECORD_DTYPE)
        recs["object_index"] = object_index
        recs["trajectory_id"] = traj_id
        for i, pose in enumerate(dense):
            recs[i]["waypoint_index"] = labels[i][0]
            recs[i]["pose"] = pose_to_vec9(pose)
            recs[i]["path_length"] = labels[i][1]
            recs[i]["collision_label"] = 0
        for j in range(random_poses_per_trajectory):
            pose = Pose(
                random_rotation(rng),
                rng.uniform(cfg.workspace_bounds[0], cfg.workspace_bounds[1]),
            )
            r = recs[len(dense) + j]
            r["waypoint_index"] = RANDOM_POSE_SENTINEL
            r["pose"] = pose_to_vec9(pose)
            r["path_length"] = np.nan
            r["collision_label"] = int(gripper_in_collision(shape, pose, gm))
        all_records.append(recs)
    records = (
        np.concatenate(all_records) if all_records else np.zeros(0, dtype=RECORD_DTYPE)
    )
    write_dataset(out_path, records, shape.object_id, phi, seed, gm)
    return {
        "kept": kept,
        "discarded": discarded,
        "failures": failures,
        "records": int(records.shape[0]),
    }
