"""One YAML file per experiment: objects, planning, training, control, eval.

Parsing is strict — unknown keys are rejected so a typo cannot silently fall
back to a default — and round-trips exactly: parse -> serialize -> parse gives
an identical configuration, and the serialized form is canonical enough to
hash for provenance manifests.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields

import numpy as np
import yaml

from .evaluation import EpisodeConfig
from .mpc import MpcConfig
from .planner import RrtConfig
from .scene import Bowl, Box, ObjectShape
from .training import TrainConfig


@dataclass(frozen=True)
class ObjectSpec:
    """Declarative object description; `build()` makes the actual shape."""

    object_id: str
    kind: str
    extents: tuple = None  # box only: full side lengths (m)
    outer_radius: float = None  # bowl only
    inner_radius: float = None
    height: float = None

    def __post_init__(self):
        if not self.object_id:
            raise ValueError("object_id must be a non-empty string")
        if self.kind == "box":
            if self.extents is None or len(self.extents) != 3:
                raise ValueError(f"box {self.object_id!r} needs 3 extents")
            if any(v is not None for v in (self.outer_radius, self.inner_radius, self.height)):
                raise ValueError(f"box {self.object_id!r} takes only extents")
            object.__setattr__(self, "extents", tuple(float(v) for v in self.extents))
        elif self.kind == "bowl":
            if None in (self.outer_radius, self.inner_radius, self.height):
                raise ValueError(
                    f"bowl {self.object_id!r} needs outer_radius, inner_radius, height"
                )
            if self.extents is not None:
                raise ValueError(f"bowl {self.object_id!r} does not take extents")
        else:
            raise ValueError(f"unknown object kind {self.kind!r}")

    def build(self) -> ObjectShape:
        if self.kind == "box":
            return Box(np.array(self.extents), object_id=self.object_id)
        return Bowl(
            float(self.outer_radius),
            float(self.inner_radius),
            float(self.height),
            object_id=self.object_id,
        )


@dataclass(frozen=True)
class ExperimentConfig:
    objects: tuple
    seed: int = 0
    trajectories: int = 5000
    phi: float = 1.0
    anchor_count: int = 32
    cloud_points: int = 1024
    cloud_seed: int = 7
    out_dir: str = "runs"
    rrt: RrtConfig = field(default_factory=RrtConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    mpc: MpcConfig = field(default_factory=MpcConfig)
    episodes: EpisodeConfig = field(default_factory=EpisodeConfig)

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))
        if not self.objects:
            raise ValueError("config needs at least one object")
        ids = [o.object_id for o in self.objects]
        dupes = {i for i in ids if ids.count(i) > 1}
        if dupes:
            raise ValueError(f"object_id defined more than once: {sorted(dupes)}")
        if self.trajectories < 0:
            raise ValueError("trajectories must be >= 0")
        if not (0.0 < self.phi):
            raise ValueError("phi must be positive")
        if not (1 <= self.anchor_count <= 32):
            raise ValueError("anchor_count must be in 1..32")
        if self.cloud_points < 1:
            raise ValueError("cloud_points must be >= 1")

    def object_by_id(self, object_id: str) -> ObjectSpec:
        for spec in self.objects:
            if spec.object_id == object_id:
                return spec
        known = [o.object_id for o in self.objects]
        raise ValueError(f"object {object_id!r} not in config (have {known})")


def _build(cls, data: dict, section: str):
    allowed = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ValueError(f"unknown key(s) {unknown} in config section {section!r}")
    return cls(**data)


def parse_config(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ValueError("config file must contain a mapping at top level")
    data = dict(data)
    objects = tuple(
        _build(ObjectSpec, dict(o), f"objects[{i}]")
        for i, o in enumerate(data.pop("objects", []))
    )
    sections = {
        "rrt": RrtConfig,
        "train": TrainConfig,
        "mpc": MpcConfig,
        "episodes": EpisodeConfig,
    }
    built = {
        name: _build(cls, dict(data.pop(name, {})), name) for name, cls in sections.items()
    }
    return _build(ExperimentConfig, {**data, "objects": objects, **built}, "top level")


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f)
    except OSError as e:
        raise OSError(f"failed reading config {path}: {e}") from e
    except yaml.YAMLError as e:
        raise ValueError(f"config {path} is not valid YAML: {e}") from e
    return parse_config(data or {})


def _plain(value):
    if isinstance(value, np.ndarray):
        return [_plain(v) for v in value.tolist()]
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    return value


def _section_dict(cfg) -> dict:
    return {f.name: _plain(getattr(cfg, f.name)) for f in fields(cfg)}


def serialize_config(cfg: ExperimentConfig) -> dict:
    out = _section_dict(cfg)
    out["objects"] = [
        {k: v for k, v in _section_dict(o).items() if v is not None} for o in cfg.objects
    ]
    for name in ("rrt", "train", "mpc", "episodes"):
        out[name] = _section_dict(getattr(cfg, name))
    return out


def save_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(serialize_config(cfg), f, sort_keys=True)


def config_hash(cfg: ExperimentConfig) -> str:
    """Stable 16-hex-digit digest of the canonical serialized form."""
    text = yaml.safe_dump(serialize_config(cfg), sort_keys=True)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]
