"""Parametric objects with exact signed-distance functions.

Two shape families are enough for the experiments: axis-aligned boxes and a
hollow-hemisphere bowl (open side up, sphere center at the origin, material
below z = 0).  Both SDFs are exact, which keeps collision labels and the
eikonal property exact too.  The bowl is handled in the (r, z) half-plane of
its revolution: the boundary there is two circular arcs (outer and inner
sphere) plus the flat rim at z = 0 and, when `height` truncates the shell, a
bottom face.  Distance to that 2-D boundary equals the 3-D distance because
every nearest boundary point keeps r >= 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .se3 import Pose, GripperModel, rotation_about_axis


@dataclass(frozen=True)
class Box:
    """Axis-aligned box, `extents` are full side lengths in meters."""

    extents: np.ndarray
    object_id: str = "box"

    def __post_init__(self):
        ext = np.asarray(self.extents, dtype=np.float64).reshape(3)
        if np.any(ext <= 0.0) or not np.all(np.isfinite(ext)):
            raise ValueError("box extents must be positive and finite")
        object.__setattr__(self, "extents", ext)

    @property
    def kind(self) -> str:
        return "box"


@dataclass(frozen=True)
class Bowl:
    """Hollow hemisphere shell: inner/outer sphere radii, cavity opening +z.

    `height` truncates the shell from below (material spans -height <= z <= 0);
    height >= outer_radius keeps the full hemisphere.
    """

    outer_radius: float
    inner_radius: float
    height: float
    object_id: str = "bowl"

    def __post_init__(self):
        if not (0.0 < self.inner_radius < self.outer_radius):
            raise ValueError("need 0 < inner_radius < outer_radius")
        if self.height <= 0.0:
            raise ValueError("bowl height must be positive")

    @property
    def kind(self) -> str:
        return "bowl"


ObjectShape = Union[Box, Bowl]


@dataclass(frozen=True)
class ScenePose:
    """World placement of an object plus its (possibly zero) rigid velocity."""

    object_pose: Pose
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(6))

    def __post_init__(self):
        vel = np.asarray(self.velocity, dtype=np.float64).reshape(6)
        if not np.all(np.isfinite(vel)):
            raise ValueError("scene velocity must be finite")
        if np.linalg.norm(vel[3:]) > 2.0 * np.pi:
            raise ValueError("angular speed above the 2*pi rad/s generation bound")
        object.__setattr__(self, "velocity", vel)


def step_scene_pose(scene: ScenePose, dt: float) -> ScenePose:
    """Advance the object by its rigid velocity: world-frame twist for dt."""
    lin, ang = scene.velocity[:3], scene.velocity[3:]
    rot = rotation_about_axis(ang, float(np.linalg.norm(ang)) * dt) @ scene.object_pose.rotation
    trans = scene.object_pose.translation + lin * dt
    return ScenePose(Pose(rot, trans), scene.velocity)


# ---------------------------------------------------------------------------
# Signed distance


def _box_sdf(box: Box, pts: np.ndarray) -> np.ndarray:
    q = np.abs(pts) - 0.5 * box.extents
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    inside = np.minimum(np.max(q, axis=-1), 0.0)
    return outside + inside


def _dist_to_arc(r, z, radius, z_min):
    """Distance in the (r, z) plane to the arc rho = radius, z in [z_min, 0]."""
    phi_lo = -np.arcsin(min(-z_min, radius) / radius)
    phi = np.arctan2(z, r)
    phi_c = np.clip(phi, phi_lo, 0.0)
    on_arc = phi_c == phi
    rho = np.hypot(r, z)
    radial = np.abs(rho - radius)
    near = np.stack([radius * np.cos(phi_c), radius * np.sin(phi_c)], axis=-1)
    end = np.hypot(r - near[..., 0], z - near[..., 1])
    return np.where(on_arc, radial, end)


def _dist_to_hseg(r, z, r_lo, r_hi, z0):
    return np.hypot(np.clip(r, r_lo, r_hi) - r, z - z0)


def _bowl_sdf(bowl: Bowl, pts: np.ndarray) -> np.ndarray:
    r_o, r_i, h = bowl.outer_radius, bowl.inner_radius, bowl.height
    r = np.hypot(pts[..., 0], pts[..., 1])
    z = pts[..., 2]
    rho = np.hypot(r, z)

    dist = _dist_to_arc(r, z, r_o, -min(h, r_o))
    dist = np.minimum(dist, _dist_to_arc(r, z, r_i, -min(h, r_i)))
    dist = np.minimum(dist, _dist_to_hseg(r, z, r_i, r_o, 0.0))
    if h < r_o:
        bot_hi = np.sqrt(r_o * r_o - h * h)
        bot_lo = np.sqrt(max(r_i * r_i - h * h, 0.0))
        dist = np.minimum(dist, _dist_to_hseg(r, z, bot_lo, bot_hi, -h))

    inside = (rho >= r_i) & (rho <= r_o) & (z <= 0.0) & (z >= -h)
    return np.where(inside, -dist, dist)


def sdf_query(shape: ObjectShape, points) -> np.ndarray:
    """Signed distance (negative inside) for one point or an array of points.

    Returns a scalar ndarray for a single (3,) point, else shape (...,).
    """
    pts = np.asarray(points, dtype=np.float64)
    if isinstance(shape, Box):
        return _box_sdf(shape, pts)
    if isinstance(shape, Bowl):
        return _bowl_sdf(shape, pts)
    raise TypeError(f"unknown shape type {type(shape).__name__}")


# ---------------------------------------------------------------------------
# Surface sampling


def _sample_box_surface(box: Box, n: int, rng: np.random.Generator) -> np.ndarray:
    ex, ey, ez = box.extents
    # Face order: -x, +x, -y, +y, -z, +z.
    areas = np.array([ey * ez, ey * ez, ex * ez, ex * ez, ex * ey, ex * ey])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, size=(n, 2))
    pts = np.empty((n, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, -0.5, 0.5)
    for a in range(3):
        m = axis == a
        others = [i for i in range(3) if i != a]
        pts[m, a] = sign[m] * box.extents[a]
        pts[np.ix_(m, others)] = u[m] * box.extents[others]
    return pts


def _sample_bowl_surface(bowl: Bowl, n: int, rng: np.random.Generator) -> np.ndarray:
    r_o, r_i, h = bowl.outer_radius, bowl.inner_radius, bowl.height
    z_o, z_i = min(h, r_o), min(h, r_i)
    areas = [
        2.0 * np.pi * r_o * z_o,                # outer spherical zone
        2.0 * np.pi * r_i * z_i,                # inner spherical zone
        np.pi * (r_o * r_o - r_i * r_i),        # rim annulus at z = 0
    ]
    if h < r_o:
        bot_hi2 = r_o * r_o - h * h
        bot_lo2 = max(r_i * r_i - h * h, 0.0)
        areas.append(np.pi * (bot_hi2 - bot_lo2))  # bottom face at z = -h
    areas = np.array(areas)
    part = rng.choice(len(areas), size=n, p=areas / areas.sum())
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    u = rng.uniform(0.0, 1.0, size=n)
    pts = np.empty((n, 3))
    for idx, radius, z_cap in ((0, r_o, z_o), (1, r_i, z_i)):
        m = part == idx
        # Uniform z gives uniform area on a sphere zone (Archimedes).
        z = -z_cap * u[m]
        r = np.sqrt(np.maximum(radius * radius - z * z, 0.0))
        pts[m] = np.stack([r * np.cos(theta[m]), r * np.sin(theta[m]), z], axis=1)
    m = part == 2
    r = np.sqrt(r_i * r_i + u[m] * (r_o * r_o - r_i * r_i))
    pts[m] = np.stack([r * np.cos(theta[m]), r * np.sin(theta[m]), np.zeros(m.sum())], axis=1)
    if h < r_o:
        m = part == 3
        r = np.sqrt(bot_lo2 + u[m] * (bot_hi2 - bot_lo2))
        pts[m] = np.stack([r * np.cos(theta[m]), r * np.sin(theta[m]), np.full(m.sum(), -h)], axis=1)
    return pts


def sample_surface_points(shape: ObjectShape, n: int, seed: int) -> np.ndarray:
    """Area-weighted surface samples, deterministic for a given seed: (n, 3)."""
    if n < 1:
        raise ValueError("need n >= 1 surface points")
    rng = np.random.default_rng(seed)
    if isinstance(shape, Box):
        return _sample_box_surface(shape, n, rng)
    if isinstance(shape, Bowl):
        return _sample_bowl_surface(shape, n, rng)
    raise TypeError(f"unknown shape type {type(shape).__name__}")


def farthest_point_sample(points: np.ndarray, k: int, seed: int) -> np.ndarray:
    """Greedy farthest-point indices; the first pick is seeded-random."""
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    if k > n:
        raise ValueError(f"cannot pick {k} from {n} points")
    rng = np.random.default_rng(seed)
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = rng.integers(n)
    min_d2 = np.sum((pts - pts[chosen[0]]) ** 2, axis=1)
    for i in range(1, k):
        chosen[i] = int(np.argmax(min_d2))
        d2 = np.sum((pts - pts[chosen[i]]) ** 2, axis=1)
        np.minimum(min_d2, d2, out=min_d2)
    return chosen


# ---------------------------------------------------------------------------
# Collision and cloud transforms


def gripper_in_collision(shape: ObjectShape, g: Pose, gm: GripperModel, margin: float = 0.0) -> bool:
    """True iff any collision sphere dips under the surface (strict)."""
    centers = gm.sphere_centers @ g.rotation.T + g.translation
    return bool(np.any(sdf_query(shape, centers) < gm.sphere_radii + margin))


def gripper_collision_mask(
    shape: ObjectShape,
    rotations: np.ndarray,
    translations: np.ndarray,
    gm: GripperModel,
    margin: float = 0.0,
) -> np.ndarray:
    """Vectorized collision test for B poses given as (B,3,3) and (B,3)."""
    centers = np.einsum("bij,sj->bsi", rotations, gm.sphere_centers) + translations[:, None, :]
    d = sdf_query(shape, centers)
    return np.any(d < gm.sphere_radii[None, :] + margin, axis=1)


def transform_cloud(cloud: np.ndarray, p: Pose) -> np.ndarray:
    """Rigidly move every point: R x + T."""
    return np.asarray(cloud, dtype=np.float64) @ p.rotation.T + p.translation
