"""Adam training loop for the value model.

Both branches train independently on the same dataset file: the path branch
sees only planner-waypoint records (their cumulative path-length labels),
the collision branch sees every record (waypoints count as negatives).  The
update rule is classic Adam with L2 regularization folded into the gradient
before the moment updates.  An optional cosine decay tapers the learning
rate over the configured epochs — with a constant rate, Adam on an L1
objective orbits the optimum instead of settling onto it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import waypoint_mask
from .network import (
    ValueModel,
    branch_raw_outputs,
    compute_gradients,
    encode_cloud,
    sigmoid,
    softplus,
)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-3
    weight_decay: float = 1e-6
    batch_size: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    epochs: int = 20
    seed: int = 0
    lr_schedule: str = "cosine"  # or "constant"

    def __post_init__(self):
        if self.learning_rate <= 0.0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")

    def lr_at(self, epoch: int) -> float:
        if self.lr_schedule == "constant" or self.epochs <= 1:
            return self.learning_rate
        t = epoch / self.epochs
        return self.learning_rate * 0.5 * (1.0 + np.cos(np.pi * t))


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray

    @staticmethod
    def zeros_like(params: np.ndarray) -> "AdamState":
        return AdamState(np.zeros_like(params), np.zeros_like(params))


def adam_step(
    params: np.ndarray,
    grads: np.ndarray,
    state: AdamState,
    cfg: TrainConfig,
    step: int,
    learning_rate=None,
) -> tuple:
    """One bias-corrected Adam update; pure, returns (new params, new state).

    `step` is 1-based.  L2 weight decay is added to the gradient before the
    moment estimates (the classic coupled form).
    """
    lr = cfg.learning_rate if learning_rate is None else learning_rate
    g = grads + cfg.weight_decay * params
    # Saturated units leave vanishing gradients whose squares and decayed
    # moments land in the float32 subnormal range, where arithmetic takes a
    # microcoded slow path -- epochs were getting ~25% slower each.  The
    # masks below keep every derived quantity (g*g, lr*m_hat, beta^t decays)
    # in normal range; a flushed entry moves its parameter by less than one
    # float32 ulp even accumulated over an entire run.  Multiplying by the
    # mask costs the same no matter how many entries it zeroes.
    g *= np.abs(g) >= 1e-16
    m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * g
    v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * g * g
    m *= np.abs(m) >= 1e-26
    v *= v >= 1e-30
    m_hat = m / (1.0 - cfg.beta1**step)
    v_hat = v / (1.0 - cfg.beta2**step)
    new_params = params - lr * m_hat / (np.sqrt(v_hat) + cfg.epsilon)
    return new_params.astype(params.dtype), AdamState(m, v)


def _train_branch(model: ValueModel, branch: str, records, clouds, cfg: TrainConfig, rng) -> list:
    bp = model.path if branch == "path" else model.collision
    state = AdamState.zeros_like(bp.theta)
    step = 0
    curve = []
    n = records.shape[0]
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        lr = cfg.lr_at(epoch)
        total = 0.0
        for lo in range(0, n, cfg.batch_size):
            batch = records[order[lo : lo + cfg.batch_size]]
            loss, grad = compute_gradients(model, batch, clouds, branch, batch_id=(epoch, lo))
            step += 1
            bp.theta, state = adam_step(bp.theta, grad, state, cfg, step, learning_rate=lr)
            total += loss * batch.shape[0]
        curve.append(total / n)
    return curve


def train(model: ValueModel, records: np.ndarray, clouds: dict, cfg: TrainConfig, branches=("path", "collision")) -> dict:
    """Train the requested branches in place; returns per-epoch loss curves.

    The path branch uses waypoint records only, the collision branch all
    records.  A fresh seeded stream per branch keeps batch order independent
    of which branches are requested.
    """
    curves = {}
    for branch in branches:
        subset = records[waypoint_mask(records)] if branch == "path" else records
        if subset.shape[0] == 0:
            raise ValueError(f"no records to train the {branch} branch")
        rng = np.random.default_rng([cfg.seed, 0 if branch == "path" else 1])
        curves[branch] = _train_branch(model, branch, subset, clouds, cfg, rng)
    return curves


def split_by_trajectory(records: np.ndarray, holdout_every: int = 10) -> tuple:
    """(train mask, holdout mask): every k-th trajectory id is held out."""
    hold = records["trajectory_id"] % holdout_every == 0
    return ~hold, hold


def fraction_by_trajectory(records: np.ndarray, fraction: float) -> np.ndarray:
    """Mask keeping approximately `fraction` of trajectories, id-deterministic."""
    if not (0.0 < fraction <= 1.0):
        raise ValueError("fraction must be in (0, 1]")
    if fraction == 1.0:
        return np.ones(records.shape[0], dtype=bool)
    modulus = int(round(1.0 / fraction))
    return records["trajectory_id"] % modulus == 0


def path_length_mae(model: ValueModel, records: np.ndarray, clouds: dict) -> float:
    """Mean |prediction - label| over the waypoint records, in meters."""
    recs = records[waypoint_mask(records)]
    total = 0.0
    for obj in np.unique(recs["object_index"]):
        sel = recs["object_index"] == obj
        feature = encode_cloud(model.path, clouds[int(obj)])
        pred = softplus(branch_raw_outputs(model.path, feature, recs["pose"][sel]))
        total += float(np.sum(np.abs(pred - recs["path_length"][sel])))
    return total / recs.shape[0]


def collision_accuracy(model: ValueModel, records: np.ndarray, clouds: dict, threshold: float = 0.5) -> float:
    """Fraction of records whose thresholded collision probability is right."""
    correct = 0
    for obj in np.unique(records["object_index"]):
        sel = records["object_index"] == obj
        feature = encode_cloud(model.collision, clouds[int(obj)])
        prob = sigmoid(branch_raw_outputs(model.collision, feature, records["pose"][sel]))
        correct += int(np.sum((prob >= threshold) == (records["collision_label"][sel] == 1)))
    return correct / records.shape[0]
