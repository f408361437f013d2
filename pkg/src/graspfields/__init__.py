"""Grasp-trajectory datasets, implicit pose-value networks, and sampling MPC
for a desk-scale parallel-jaw gripper.

Pipeline: parametric objects with exact SDFs -> anchor grasps -> RRT
trajectories -> packed binary datasets -> a point-cloud-conditioned network
predicting remaining path length and collision probability for any SE(3)
gripper pose -> an MPPI controller that descends the learned cost.
"""

from .config import ExperimentConfig, ObjectSpec, config_hash, load_config, save_config
from .dataset import read_dataset, write_dataset
from .evaluation import (
    CostMapGrid,
    EpisodeConfig,
    RolloutCurves,
    closest_anchor_grasp,
    export_cost_map,
    grasp_success_eval,
    run_ablation,
    run_rollout_suite,
)
from .mpc import (
    ControlSequence,
    GripperState,
    LearnedGraspCost,
    MpcConfig,
    OracleGraspCost,
    RolloutLog,
    grasp_cost,
    mppi_update,
    run_episode,
    step_dynamics,
)
from .network import (
    ValueModel,
    init_model,
    load_checkpoint,
    predict_collision,
    predict_path_length,
    save_checkpoint,
)
from .planner import (
    AnchorGraspSet,
    RrtConfig,
    build_dataset,
    densify_trajectory,
    generate_anchor_grasps,
    label_trajectory,
    rrt_plan,
)
from .scene import Bowl, Box, gripper_in_collision, sample_surface_points, sdf_query
from .se3 import (
    GripperModel,
    Pose,
    Trajectory,
    compose_poses,
    default_gripper,
    interpolate_poses,
    pose_from_vec9,
    pose_pair_distance,
    pose_to_vec9,
    trajectory_path_length,
)
from .training import (
    TrainConfig,
    collision_accuracy,
    fraction_by_trajectory,
    path_length_mae,
    split_by_trajectory,
    train,
)

__version__ = "0.1.0"
