"""Experiment-config parsing, validation, and round-trip stability."""

import numpy as np
import pytest

from graspfields.config import (
    ExperimentConfig,
    ObjectSpec,
    config_hash,
    load_config,
    parse_config,
    save_config,
    serialize_config,
)
from graspfields.scene import Bowl, Box


def minimal() -> dict:
    return {"objects": [{"object_id": "b", "kind": "box", "extents": [0.04, 0.1, 0.08]}]}


def test_parse_minimal_uses_defaults():
    cfg = parse_config(minimal())
    assert cfg.trajectories == 5000 and cfg.phi == 1.0 and cfg.anchor_count == 32
    assert cfg.mpc.horizon == 20 and cfg.train.epochs == 20 and cfg.episodes.steps == 1000
    shape = cfg.objects[0].build()
    assert isinstance(shape, Box) and shape.object_id == "b"


def test_object_spec_validation():
    with pytest.raises(ValueError, match="extents"):
        ObjectSpec("b", "box")
    with pytest.raises(ValueError, match="needs outer_radius"):
        ObjectSpec("w", "bowl", height=0.08)
    with pytest.raises(ValueError, match="kind"):
        ObjectSpec("x", "pyramid", extents=(1, 1, 1))
    with pytest.raises(ValueError, match="only extents"):
        ObjectSpec("b", "box", extents=(0.1, 0.1, 0.1), outer_radius=0.2)
    bowl = ObjectSpec("w", "bowl", outer_radius=0.08, inner_radius=0.065, height=0.08).build()
    assert isinstance(bowl, Bowl) and bowl.object_id == "w"


def test_duplicate_object_ids_rejected():
    data = minimal()
    data["objects"].append(dict(data["objects"][0]))
    with pytest.raises(ValueError, match="more than once"):
        parse_config(data)


def test_unknown_keys_rejected():
    data = minimal()
    data["trajectorys"] = 10
    with pytest.raises(ValueError, match="trajectorys"):
        parse_config(data)
    data = minimal()
    data["mpc"] = {"horizn": 5}
    with pytest.raises(ValueError, match="horizn"):
        parse_config(data)
    data = minimal()
    data["objects"][0]["colour"] = "red"
    with pytest.raises(ValueError, match="colour"):
        parse_config(data)


def test_sub_config_invariants_enforced_at_parse():
    data = minimal()
    data["mpc"] = {"temperature": -1.0}
    with pytest.raises(ValueError, match="temperature"):
        parse_config(data)
    data = minimal()
    data["episodes"] = {"mode": "wobbly"}
    with pytest.raises(ValueError, match="mode"):
        parse_config(data)


def test_round_trip_identical(tmp_path):
    data = minimal()
    data.update(seed=9, trajectories=44, out_dir="runs/x", cloud_points=256)
    data["rrt"] = {"step_size": 0.03, "workspace_bounds": [[-0.3, -0.3, -0.3], [0.3, 0.3, 0.3]]}
    data["mpc"] = {"samples": 16, "noise_sigma": [1, 1, 1, 2, 2, 2]}
    data["episodes"] = {"mode": "dynamic", "episodes": 5, "steps": 50, "seed": 3}
    cfg = parse_config(data)
    path = tmp_path / "exp.yaml"
    save_config(cfg, path)
    again = load_config(path)
    assert serialize_config(again) == serialize_config(cfg)
    assert config_hash(again) == config_hash(cfg)
    assert len(config_hash(cfg)) == 16
    bumped = parse_config({**data, "seed": 10})
    assert config_hash(bumped) != config_hash(cfg)


def test_shipped_configs_parse():
    import glob
    import os

    root = os.path.join(os.path.dirname(__file__), "..", "configs")
    paths = sorted(glob.glob(os.path.join(root, "*.yaml")))
    assert len(paths) >= 4
    for p in paths:
        cfg = load_config(p)
        assert len(cfg.objects) >= 1


def test_bad_files(tmp_path):
    with pytest.raises(OSError, match="failed reading config"):
        load_config(tmp_path / "missing.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("objects: [}{")
    with pytest.raises(ValueError, match="YAML"):
        load_config(bad)
    listy = tmp_path / "list.yaml"
    listy.write_text("- 1\n- 2\n")
    with pytest.raises(ValueError, match="mapping"):
        load_config(listy)


def test_object_by_id():
    cfg = parse_config(minimal())
    assert cfg.object_by_id("b") is cfg.objects[0]
    with pytest.raises(ValueError, match="not in config"):
        cfg.object_by_id("ghost")
