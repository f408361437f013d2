"""Training-set container: a text manifest followed by packed binary records.

One record is 49 bytes, little-endian, in field order: object index (u16),
trajectory id (u32), waypoint index (u16), pose as 9 f32 (two rotation
columns then translation), cumulative path length (f32), collision label
(u8).  Waypoints store collision_label 0; the extra uniformly-sampled
collision-supervision poses are marked with waypoint_index 0xFFFF and a NaN
path length so the two record populations stay distinguishable.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .se3 import GripperModel

RECORD_DTYPE = np.dtype(
    [
        ("object_index", "<u2"),
        ("trajectory_id", "<u4"),
        ("waypoint_index", "<u2"),
        ("pose", "<f4", (9,)),
        ("path_length", "<f4"),
        ("collision_label", "u1"),
    ]
)
assert RECORD_DTYPE.itemsize == 49

RANDOM_POSE_SENTINEL = 0xFFFF  # waypoint_index of non-waypoint records

MANIFEST_KEYS = ("version", "object_id", "count", "phi", "seed", "gripper")


def gripper_hash(gm: GripperModel) -> str:
    """16-hex-digit digest of the gripper geometry (keypoints + spheres)."""
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(gm.keypoints, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(gm.sphere_centers, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(gm.sphere_radii, dtype="<f8").tobytes())
    return h.hexdigest()[:16]


def write_dataset(path, records: np.ndarray, object_id: str, phi: float, seed: int, gm: GripperModel) -> None:
    records = np.asarray(records, dtype=RECORD_DTYPE)
    manifest = (
        f"version=1\n"
        f"object_id={object_id}\n"
        f"count={records.shape[0]}\n"
        f"phi={phi:.9g}\n"
        f"seed={seed}\n"
        f"gripper={gripper_hash(gm)}\n"
        f"\n"
    )
    try:
        with open(path, "wb") as f:
            f.write(manifest.encode("ascii"))
            f.write(records.tobytes())
    except OSError as e:
        raise OSError(f"failed writing dataset {path}: {e}") from e


def read_dataset(path):
    """Returns (manifest dict, structured record array)."""
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise OSError(f"failed reading dataset {path}: {e}") from e
    end = blob.find(b"\n\n")
    if end < 0:
        raise ValueError(f"dataset {path}: missing manifest terminator")
    manifest = {}
    for line in blob[:end].decode("ascii").splitlines():
        key, _, value = line.partition("=")
        manifest[key] = value
    missing = [k for k in MANIFEST_KEYS if k not in manifest]
    if missing:
        raise ValueError(f"dataset {path}: manifest missing {missing}")
    if manifest["version"] != "1":
        raise ValueError(f"dataset {path}: unsupported version {manifest['version']}")
    body = blob[end + 2 :]
    count = int(manifest["count"])
    if len(body) != count * RECORD_DTYPE.itemsize:
        raise ValueError(
            f"dataset {path}: expected {count} records "
            f"({count * RECORD_DTYPE.itemsize} bytes), got {len(body)} bytes"
        )
    records = np.frombuffer(body, dtype=RECORD_DTYPE)
    return manifest, records


def waypoint_mask(records: np.ndarray) -> np.ndarray:
    """True for planner-waypoint records, False for random collision poses."""
    return records["waypoint_index"] != RANDOM_POSE_SENTINEL
