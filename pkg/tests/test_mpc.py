"""MPPI controller tests: dynamics, costs, weights, episodes."""

import numpy as np
import pytest

from graspfields.mpc import (
    ControlSequence,
    GripperState,
    LearnedGraspCost,
    MpcConfig,
    OracleGraspCost,
    RolloutLog,
    auxiliary_cost,
    grasp_cost,
    mppi_update,
    nearest_anchor,
    rotations_from_rotvecs,
    run_episode,
    step_dynamics,
)
from graspfields.network import init_model, predict_collision, predict_path_length
from graspfields.planner import generate_anchor_grasps
from graspfields.scene import Box, ScenePose, sample_surface_points
from graspfields.se3 import (
    Pose,
    default_gripper,
    pose_pair_distance,
    random_rotation,
    rotation_about_axis,
    rotation_is_valid,
)

GM = default_gripper()
TINY = Box(np.array([0.002, 0.002, 0.002]))


class FlatCost:
    """Zero grasp cost everywhere; isolates the MPPI weight machinery."""

    def costs(self, rotations, translations):
        n = rotations.shape[0]
        return np.zeros(n), np.zeros(n, dtype=bool)


class ShiftedCost:
    def __init__(self, inner, offset):
        self.inner = inner
        self.offset = offset

    def costs(self, rotations, translations):
        c, hit = self.inner.costs(rotations, translations)
        return c + self.offset, hit


def test_config_validation():
    MpcConfig()  # defaults valid
    with pytest.raises(ValueError):
        MpcConfig(horizon=0)
    with pytest.raises(ValueError):
        MpcConfig(samples=1)
    with pytest.raises(ValueError):
        MpcConfig(dt=0.0)
    with pytest.raises(ValueError):
        MpcConfig(temperature=0.0)
    with pytest.raises(ValueError):
        MpcConfig(tau=1.0)
    with pytest.raises(ValueError):
        MpcConfig(tau=0.0)
    with pytest.raises(ValueError):
        MpcConfig(noise_sigma=np.zeros(6))
    with pytest.raises(ValueError):
        MpcConfig(smooth_weight=-1.0)


def test_state_and_controls_validation():
    with pytest.raises(ValueError):
        GripperState(Pose.identity(), np.array([np.nan] * 6))
    with pytest.raises(ValueError):
        ControlSequence(np.zeros((4, 5)))
    cs = ControlSequence.zeros(7)
    assert cs.accelerations.shape == (7, 6)


def test_rotvec_batch_matches_scalar():
    rng = np.random.default_rng(0)
    w = rng.normal(size=(100, 3)) * 2.0
    w[0] = 0.0  # exact identity row
    rots = rotations_from_rotvecs(w)
    assert np.array_equal(rots[0], np.eye(3))
    for i in range(1, 100):
        angle = np.linalg.norm(w[i])
        expected = rotation_about_axis(w[i] / angle, angle)
        np.testing.assert_allclose(rots[i], expected, atol=1e-13)
        assert rotation_is_valid(rots[i])


def test_step_dynamics_examples():
    s0 = GripperState.at_rest(Pose.identity())
    s1 = step_dynamics(s0, np.zeros(6), 0.02)
    assert np.array_equal(s1.pose.rotation, np.eye(3))
    assert np.array_equal(s1.pose.translation, np.zeros(3))
    assert np.array_equal(s1.twist, np.zeros(6))

    moving = GripperState(Pose.identity(), np.array([1.0, 0, 0, 0, 0, 0]))
    s2 = step_dynamics(moving, np.zeros(6), 0.01)
    np.testing.assert_allclose(s2.pose.translation, [0.01, 0, 0], atol=1e-15)

    # pi rad/s exceeds the default angular speed limit, so lift the clamp
    spinning = GripperState(Pose.identity(), np.array([0, 0, 0, 0, 0, np.pi]))
    s3 = step_dynamics(spinning, np.zeros(6), 0.5, twist_limit=np.full(6, 10.0))
    np.testing.assert_allclose(
        s3.pose.rotation, rotation_about_axis([0, 0, 1], np.pi / 2), atol=1e-12
    )


def test_step_dynamics_twist_clamp():
    s = GripperState.at_rest(Pose.identity())
    limit = np.array([1.0, 1, 1, 2, 2, 2])
    s = step_dynamics(s, np.array([500.0, 0, 0, 0, 0, -900.0]), 0.1, limit)
    assert s.twist[0] == 1.0
    assert s.twist[5] == -2.0


def test_step_dynamics_orthonormality_drift():
    rng = np.random.default_rng(1)
    state = GripperState.at_rest(Pose(random_rotation(rng), np.zeros(3)))
    for _ in range(100_000):
        state = step_dynamics(state, rng.normal(size=6), 0.02)
    r = state.pose.rotation
    assert np.max(np.abs(r.T @ r - np.eye(3))) < 1e-6


def zeroed_head_model(path_bias, collision_bias):
    model = init_model(0, encoder_widths=(3, 8, 16), head_hidden=(8,))
    for branch, bias in ((model.path, path_bias), (model.collision, collision_bias)):
        w, b = branch.views()[-1]
        w[:] = 0.0
        b[:] = bias
    return model


def test_grasp_cost_examples():
    rng = np.random.default_rng(2)
    cloud = rng.normal(size=(16, 3))
    g = Pose(random_rotation(rng), rng.normal(size=3))
    # V ~ 0 (softplus(-50)), p = 0.1 < 0.25 -> cost 0
    m = zeroed_head_model(-50.0, np.log(0.1 / 0.9))
    assert grasp_cost(m, cloud, g, tau=0.25) < 1e-9
    # V = 0.4, p = 0.3 >= 0.25 -> cost 1.4
    m = zeroed_head_model(np.log(np.expm1(0.4)), np.log(0.3 / 0.7))
    assert abs(grasp_cost(m, cloud, g, tau=0.25) - 1.4) < 1e-6
    # boundary is inclusive: p == tau adds the unit penalty
    m = zeroed_head_model(-50.0, 0.0)  # sigmoid(0) = 0.5 exactly
    assert grasp_cost(m, cloud, g, tau=0.5) >= 1.0
    assert grasp_cost(m, cloud, g, tau=np.nextafter(0.5, 1.0)) < 1e-9


def test_learned_cost_matches_scalar_predictions():
    model = init_model(3)
    rng = np.random.default_rng(4)
    cloud = rng.normal(size=(32, 3))
    provider = LearnedGraspCost(model, cloud, tau=0.25)
    rots = np.stack([random_rotation(rng) for _ in range(8)])
    trans = rng.normal(size=(8, 3)) * 0.2
    costs, hits = provider.costs(rots, trans)
    for b in range(8):
        g = Pose(rots[b], trans[b])
        v = predict_path_length(model, cloud, np.concatenate([rots[b, :, 0], rots[b, :, 1], trans[b]]))
        p = predict_collision(model, cloud, np.concatenate([rots[b, :, 0], rots[b, :, 1], trans[b]]))
        assert abs(costs[b] - (v + (p >= 0.25))) < 1e-4
        assert hits[b] == (p >= 0.25)


def test_auxiliary_cost_examples():
    cfg = MpcConfig(smooth_weight=1.0, accel_weight=1.0, bounds_weight=1.0)
    rest = GripperState.at_rest(Pose.identity())
    assert auxiliary_cost(rest, np.zeros(6), cfg) == 0.0
    u = np.array([1.0, 0, 0, 0, 0, 0])
    assert abs(auxiliary_cost(rest, 2 * u, cfg) - 4 * auxiliary_cost(rest, u, cfg)) < 1e-12
    outside = GripperState.at_rest(Pose(np.eye(3), np.array([0.5, 0.0, 0.0])))
    assert abs(auxiliary_cost(outside, np.zeros(6), cfg) - 0.01) < 1e-12


def test_mppi_equal_costs_average_uniformly():
    cfg = MpcConfig(samples=8, horizon=5, smooth_weight=0.0, accel_weight=0.0, bounds_weight=0.0)
    state = GripperState.at_rest(Pose.identity())
    nominal = ControlSequence.zeros(5)
    new_nom, execute, tel = mppi_update(state, nominal, FlatCost(), cfg, rng=42)
    rng = np.random.default_rng(42)
    noise = rng.normal(size=(8, 5, 6)) * cfg.noise_sigma
    noise[0] = 0.0
    seqs = np.clip(noise, -cfg.accel_limit, cfg.accel_limit)
    np.testing.assert_allclose(execute, seqs[:, 0].mean(axis=0), atol=1e-15)
    mean_seq = seqs.mean(axis=0)
    np.testing.assert_allclose(new_nom.accelerations[:-1], mean_seq[1:], atol=1e-15)
    np.testing.assert_allclose(new_nom.accelerations[-1], mean_seq[-1], atol=1e-15)
    assert abs(tel["effective_samples"] - 8.0) < 1e-9
    assert abs(tel["max_weight"] - 0.125) < 1e-12


def test_mppi_invariant_to_constant_cost_shift():
    anchors = generate_anchor_grasps(TINY, seed=0, gm=GM)
    oracle = OracleGraspCost(TINY, anchors, GM)
    cfg = MpcConfig(samples=16, horizon=8)
    state = GripperState.at_rest(Pose(np.eye(3), np.array([0.2, 0.1, 0.05])))
    nominal = ControlSequence.zeros(8)
    a, ua, _ = mppi_update(state, nominal, oracle, cfg, rng=7)
    b, ub, _ = mppi_update(state, nominal, ShiftedCost(oracle, 1000.0), cfg, rng=7)
    np.testing.assert_allclose(a.accelerations, b.accelerations, atol=1e-12)
    np.testing.assert_allclose(ua, ub, atol=1e-12)


def test_mppi_object_frame_equivalence():
    """Planning against a displaced object with a displaced gripper must match
    the identity-frame problem exactly (object-frame querying)."""
    anchors = generate_anchor_grasps(TINY, seed=0, gm=GM)
    oracle = OracleGraspCost(TINY, anchors, GM)
    cfg = MpcConfig(samples=16, horizon=8, bounds_weight=0.0)
    start_local = Pose(np.eye(3), np.array([0.2, 0.1, 0.05]))
    nominal = ControlSequence.zeros(8)

    base, ub, _ = mppi_update(
        GripperState.at_rest(start_local), nominal, oracle, cfg, rng=9, object_pose=None
    )
    shift = Pose(np.eye(3), np.array([0.05, -0.03, 0.08]))
    from graspfields.se3 import compose_poses

    moved, um, _ = mppi_update(
        GripperState.at_rest(compose_poses(shift, start_local)),
        nominal,
        oracle,
        cfg,
        rng=9,
        object_pose=shift,
    )
    np.testing.assert_allclose(base.accelerations, moved.accelerations, atol=1e-9)
    np.testing.assert_allclose(ub, um, atol=1e-9)


def test_minimizer_invariant_to_monotone_probability_rescale():
    rng = np.random.default_rng(5)
    lengths = rng.uniform(0.0, 1.0, 200)
    probs = rng.uniform(0.0, 1.0, 200)
    tau = 0.25
    base = lengths + (probs >= tau)
    # squash probabilities toward tau without crossing it
    squashed = tau + (probs - tau) * 0.37
    rescaled = lengths + (squashed >= tau)
    assert np.argmin(base) == np.argmin(rescaled)
    np.testing.assert_array_equal(base >= 1.0, rescaled >= 1.0)


@pytest.fixture(scope="module")
def tiny_setup():
    anchors = generate_anchor_grasps(TINY, seed=0, gm=GM)
    return anchors, OracleGraspCost(TINY, anchors, GM)


def test_run_episode_single_step(tiny_setup):
    anchors, oracle = tiny_setup
    start = GripperState.at_rest(Pose(np.eye(3), np.array([0.2, 0.0, 0.1])))
    log = run_episode(start, ScenePose(Pose.identity()), TINY, oracle, anchors, MpcConfig(), 1, seed=0)
    assert len(log) == 1
    assert log.rows[0, 0] == 0.0


def test_run_episode_deterministic_and_round_trips(tmp_path, tiny_setup):
    anchors, oracle = tiny_setup
    cfg = MpcConfig(samples=16, horizon=8)
    start = GripperState.at_rest(Pose(np.eye(3), np.array([0.2, 0.0, 0.1])))
    logs = [
        run_episode(start, ScenePose(Pose.identity()), TINY, oracle, anchors, cfg, 20, seed=3)
        for _ in range(2)
    ]
    assert np.array_equal(logs[0].rows, logs[1].rows)
    p1, p2 = tmp_path / "a.txt", tmp_path / "b.txt"
    logs[0].save(p1)
    loaded = RolloutLog.load(p1)
    np.testing.assert_allclose(loaded.rows, logs[0].rows, rtol=1e-8, atol=1e-12)
    loaded.save(p2)  # save -> load -> save is byte-stable
    assert p1.read_bytes() == p2.read_bytes()


def test_run_episode_zero_velocity_matches_static(tiny_setup):
    anchors, oracle = tiny_setup
    cfg = MpcConfig(samples=16, horizon=8)
    start = GripperState.at_rest(Pose(np.eye(3), np.array([0.2, 0.0, 0.1])))
    static = run_episode(start, ScenePose(Pose.identity()), TINY, oracle, anchors, cfg, 15, seed=5)
    zerovel = run_episode(
        start, ScenePose(Pose.identity(), np.zeros(6)), TINY, oracle, anchors, cfg, 15, seed=5
    )
    assert np.array_equal(static.rows, zerovel.rows)


def test_run_episode_diverged_state_raises(tiny_setup):
    anchors, _ = tiny_setup

    class PoisonCost:
        def costs(self, rotations, translations):
            n = rotations.shape[0]
            return np.full(n, np.nan), np.zeros(n, dtype=bool)

    start = GripperState.at_rest(Pose(np.eye(3), np.array([0.2, 0.0, 0.1])))
    with pytest.raises(FloatingPointError, match="non-finite"):
        run_episode(
            start, ScenePose(Pose.identity()), TINY, PoisonCost(), anchors, MpcConfig(), 5, seed=0
        )


def test_oracle_episode_converges_fast(tiny_setup):
    """200 MPPI steps from ~0.3 m away with ground-truth costs must close the
    translation gap below 2 cm (learning-free controller check)."""
    anchors, oracle = tiny_setup
    rng = np.random.default_rng(0)
    start = Pose(random_rotation(rng), np.array([0.25, 0.15, 0.1]))
    log = run_episode(
        GripperState.at_rest(start), ScenePose(Pose.identity()), TINY, oracle, anchors,
        MpcConfig(), 200, seed=1,
    )
    assert log.translation_errors[-1] < 0.02
    # grasp cost must have decreased substantially from the start
    assert log.grasp_costs[-1] < 0.25 * log.grasp_costs[0]


def test_nearest_anchor_identifies_exact_match(tiny_setup):
    anchors, _ = tiny_setup
    for idx in (0, 7, 31):
        assert nearest_anchor(anchors.grasps[idx], anchors, GM) == idx


def test_learned_provider_runs_in_episode(tiny_setup):
    """A freshly initialized model won't converge, but the episode machinery
    must accept a ValueModel + cloud directly."""
    anchors, _ = tiny_setup
    model = init_model(0)
    cloud = sample_surface_points(TINY, 128, seed=0)
    start = GripperState.at_rest(Pose(np.eye(3), np.array([0.2, 0.0, 0.1])))
    log = run_episode(
        start, ScenePose(Pose.identity()), TINY, model, anchors,
        MpcConfig(samples=8, horizon=4), 3, seed=0, cloud=cloud,
    )
    assert len(log) == 3
    assert np.all(np.isfinite(log.rows))


def test_moving_object_episode_runs(tiny_setup):
    anchors, oracle = tiny_setup
    cfg = MpcConfig(samples=16, horizon=8)
    start = GripperState.at_rest(Pose(np.eye(3), np.array([0.2, 0.0, 0.1])))
    scene = ScenePose(Pose.identity(), np.array([0.02, 0.0, 0.0, 0.0, 0.0, 0.1]))
    log = run_episode(start, scene, TINY, oracle, anchors, cfg, 10, seed=2)
    assert len(log) == 10
    assert np.all(np.isfinite(log.rows))
    # object-frame pose column should differ from the static run
    static = run_episode(
        start, ScenePose(Pose.identity()), TINY, oracle, anchors, cfg, 10, seed=2
    )
    assert not np.array_equal(log.rows[:, 1:10], static.rows[:, 1:10])
