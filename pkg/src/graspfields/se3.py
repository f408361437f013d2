"""Rigid-body pose algebra for a parallel-jaw gripper.

Poses live in SE(3) and are stored as an explicit rotation matrix plus a
translation vector.  Rotations headed for the learned model are encoded with
the 6D representation (the first two matrix columns, re-orthogonalized on
decode), which keeps the mapping continuous.  Distances between poses are
measured through the gripper itself: transform a fixed set of keypoints by
both poses and average the point-to-point displacements.  Summing that
distance along a trajectory gives the path-length functional the value model
is trained to predict.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_ORTHO_TOL = 1e-9
_DEGENERATE_TOL = 1e-6


def _as_vec3(v) -> np.ndarray:
    out = np.asarray(v, dtype=np.float64).reshape(3)
    return out


@dataclass(frozen=True, eq=False)
class Pose:
    """A rigid transform: world_point = rotation @ local_point + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        trans = _as_vec3(self.translation)
        if not np.all(np.isfinite(rot)) or not np.all(np.isfinite(trans)):
            raise ValueError("pose entries must be finite")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))


@dataclass(frozen=True)
class GripperModel:
    """Keypoint skeleton plus sphere decomposition used for collision checks.

    keypoints: (m, 3) points in the gripper frame, pairwise distinct.
    sphere_centers / sphere_radii: the swept-sphere approximation of the body.
    """

    keypoints: np.ndarray
    sphere_centers: np.ndarray
    sphere_radii: np.ndarray

    def __post_init__(self):
        kp = np.asarray(self.keypoints, dtype=np.float64).reshape(-1, 3)
        centers = np.asarray(self.sphere_centers, dtype=np.float64).reshape(-1, 3)
        radii = np.asarray(self.sphere_radii, dtype=np.float64).reshape(-1)
        if kp.shape[0] < 1:
            raise ValueError("gripper needs at least one keypoint")
        if centers.shape[0] != radii.shape[0]:
            raise ValueError("sphere centers and radii disagree in length")
        if np.any(radii <= 0.0):
            raise ValueError("sphere radii must be positive")
        diff = kp[:, None, :] - kp[None, :, :]
        dist = np.linalg.norm(diff, axis=-1)
        np.fill_diagonal(dist, np.inf)
        if np.any(dist < 1e-12):
            raise ValueError("gripper keypoints must be pairwise distinct")
        object.__setattr__(self, "keypoints", kp)
        object.__setattr__(self, "sphere_centers", centers)
        object.__setattr__(self, "sphere_radii", radii)

    @property
    def num_keypoints(self) -> int:
        return self.keypoints.shape[0]


def default_gripper() -> GripperModel:
    """Five-point parallel-jaw skeleton: palm, two finger bases, two fingertips.

    The sphere decomposition pads the palm block and both fingers; fingertip
    spheres are small (8 mm) so the jaws can straddle objects up to ~5 cm
    across the closing axis without phantom contact.
    """
    keypoints = np.array(
        [
            [0.0, 0.0, 0.0],
            [-0.04, 0.0, 0.066],
            [0.04, 0.0, 0.066],
            [-0.04, 0.0, 0.112],
            [0.04, 0.0, 0.112],
        ]
    )
    centers = np.array(
        [
            [0.0, 0.0, 0.0],
            [0.0, 0.0, 0.033],
            [-0.04, 0.0, 0.066],
            [0.04, 0.0, 0.066],
            [-0.04, 0.0, 0.112],
            [0.04, 0.0, 0.112],
        ]
    )
    radii = np.array([0.022, 0.018, 0.012, 0.012, 0.008, 0.008])
    return GripperModel(keypoints, centers, radii)


@dataclass(frozen=True)
class Trajectory:
    """An ordered pose sequence; index 0 is the grasp end, the last is the start."""

    waypoints: tuple

    def __post_init__(self):
        wps = tuple(self.waypoints)
        if len(wps) < 1:
            raise ValueError("trajectory needs at least one waypoint")
        object.__setattr__(self, "waypoints", wps)

    def __len__(self) -> int:
        return len(self.waypoints)

    def __getitem__(self, i):
        return self.waypoints[i]

    def __iter__(self):
        return iter(self.waypoints)


def rotation_is_valid(mat: np.ndarray, tol: float = 1e-6) -> bool:
    mat = np.asarray(mat, dtype=np.float64)
    if mat.shape != (3, 3) or not np.all(np.isfinite(mat)):
        return False
    if np.max(np.abs(mat.T @ mat - np.eye(3))) > tol:
        return False
    return abs(np.linalg.det(mat) - 1.0) <= tol


def _reorthogonalize(mat: np.ndarray) -> np.ndarray:
    # Project back onto SO(3) via SVD; only invoked when drift is detected.
    u, _, vt = np.linalg.svd(mat)
    rot = u @ vt
    if np.linalg.det(rot) < 0.0:
        u[:, -1] = -u[:, -1]
        rot = u @ vt
    return rot


def compose_poses(a: Pose, b: Pose) -> Pose:
    """a ∘ b: apply b first, then a."""
    rot = a.rotation @ b.rotation
    if np.max(np.abs(rot.T @ rot - np.eye(3))) > _ORTHO_TOL:
        rot = _reorthogonalize(rot)
    return Pose(rot, a.rotation @ b.translation + a.translation)


def invert_pose(p: Pose) -> Pose:
    rot_t = p.rotation.T
    return Pose(rot_t, -(rot_t @ p.translation))


def rot6d_to_rotation(a1, a2) -> np.ndarray:
    """Gram-Schmidt two raw 3-vectors into the columns of a rotation matrix."""
    a1 = _as_vec3(a1)
    a2 = _as_vec3(a2)
    n1 = np.linalg.norm(a1)
    if n1 < _DEGENERATE_TOL:
        raise ValueError("degenerate 6D rotation")
    b1 = a1 / n1
    v2 = a2 - (b1 @ a2) * b1
    n2 = np.linalg.norm(v2)
    if n2 < _DEGENERATE_TOL * max(1.0, np.linalg.norm(a2)):
        raise ValueError("degenerate 6D rotation")
    b2 = v2 / n2
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=1)


def pose_to_vec9(p: Pose) -> np.ndarray:
    """Encode as [first rotation column; second rotation column; translation]."""
    return np.concatenate([p.rotation[:, 0], p.rotation[:, 1], p.translation])


def pose_from_vec9(v) -> Pose:
    v = np.asarray(v, dtype=np.float64).reshape(9)
    return Pose(rot6d_to_rotation(v[0:3], v[3:6]), v[6:9])


def transform_keypoints(p: Pose, gm: GripperModel) -> np.ndarray:
    """Map the gripper keypoints through the pose: returns (m, 3)."""
    return gm.keypoints @ p.rotation.T + p.translation


def pose_pair_distance(a: Pose, b: Pose, gm: GripperModel) -> float:
    """Mean distance between the two keypoint images (meters)."""
    diff = transform_keypoints(a, gm) - transform_keypoints(b, gm)
    return float(np.mean(np.linalg.norm(diff, axis=1)))


def trajectory_path_length(traj: Trajectory, gm: GripperModel) -> float:
    """Sum of keypoint-averaged distances over consecutive waypoint pairs."""
    wps = traj.waypoints
    if len(wps) < 2:
        return 0.0
    images = np.stack([transform_keypoints(p, gm) for p in wps])
    seg = np.linalg.norm(images[1:] - images[:-1], axis=2)
    return float(np.sum(np.mean(seg, axis=1)))


def rotation_about_axis(axis, angle: float) -> np.ndarray:
    """Rodrigues formula for a unit-ish axis and an angle in radians."""
    axis = _as_vec3(axis)
    n = np.linalg.norm(axis)
    if n < 1e-15:
        return np.eye(3)
    x, y, z = axis / n
    k = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def _log_rotation(mat: np.ndarray) -> np.ndarray:
    """Axis-angle vector of a rotation matrix (angle * unit axis)."""
    cos_angle = np.clip((np.trace(mat) - 1.0) * 0.5, -1.0, 1.0)
    angle = float(np.arccos(cos_angle))
    if angle < 1e-12:
        return np.zeros(3)
    if angle > np.pi - 1e-6:
        # Near 180° the skew part vanishes; recover the axis from R + I.
        m = (mat + np.eye(3)) * 0.5
        axis = np.sqrt(np.clip(np.diag(m), 0.0, None))
        # Fix signs using the largest component.
        k = int(np.argmax(axis))
        if axis[k] < 1e-12:
            return np.zeros(3)
        sign = np.ones(3)
        for j in range(3):
            if j != k and abs(m[k, j]) > 1e-12:
                sign[j] = np.sign(m[k, j] / axis[k])
        axis = axis * sign
        axis /= np.linalg.norm(axis)
        return angle * axis
    vec = np.array([mat[2, 1] - mat[1, 2], mat[0, 2] - mat[2, 0], mat[1, 0] - mat[0, 1]])
    return angle / (2.0 * np.sin(angle)) * vec


def pose_on_geodesic(a: Pose, b: Pose, t: float) -> Pose:
    """Pose at parameter t in [0, 1] on the lerp + rotation-geodesic path a->b."""
    rel = _log_rotation(a.rotation.T @ b.rotation)
    angle = float(np.linalg.norm(rel))
    if angle > 0.0:
        rot = a.rotation @ rotation_about_axis(rel, t * angle)
    else:
        rot = a.rotation
    return Pose(rot, (1.0 - t) * a.translation + t * b.translation)


def interpolate_poses(a: Pose, b: Pose, steps: int) -> Trajectory:
    """Lerp the translation and walk the rotation geodesic in `steps` waypoints.

    Endpoints are reproduced exactly: waypoint 0 is a, waypoint steps-1 is b.
    """
    if steps < 2:
        raise ValueError("steps must be >= 2")
    waypoints = [pose_on_geodesic(a, b, i / (steps - 1)) for i in range(steps)]
    # Pin the endpoints to the inputs to kill interpolation round-off.
    waypoints[0] = a
    waypoints[-1] = b
    return Trajectory(tuple(waypoints))


def pose_errors(current: Pose, target: Pose) -> tuple:
    """(geodesic rotation error in radians, translation error in meters)."""
    cos_angle = np.clip((np.trace(current.rotation.T @ target.rotation) - 1.0) * 0.5, -1.0, 1.0)
    rot_err = float(np.arccos(cos_angle))
    trans_err = float(np.linalg.norm(current.translation - target.translation))
    return rot_err, trans_err


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform random rotation (Shoemake's subgroup-algorithm quaternion)."""
    u1, u2, u3 = rng.random(3)
    s1, s2 = np.sqrt(1.0 - u1), np.sqrt(u1)
    w = s1 * np.sin(2.0 * np.pi * u2)
    x = s1 * np.cos(2.0 * np.pi * u2)
    y = s2 * np.sin(2.0 * np.pi * u3)
    z = s2 * np.cos(2.0 * np.pi * u3)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )
