"""The implicit grasp value model and its hand-written gradients.

Two independent branches (path length, collision), each a permutation-
invariant point-cloud encoder plus a pose-conditioned MLP head:

    per-point MLP 3 -> 64 -> 128 -> 512, ReLU, max-pool over points -> f
    head: concat(f, pose 9-vector) -> hidden layers (ReLU) -> scalar

The path head is read through softplus (lengths are non-negative), the
collision head through a sigmoid.  Parameters live in one flat vector per
branch so the optimizer is a couple of array operations; layer weight/bias
views are cut out of the flat vector on demand.  Backprop is written out by
hand: the max-pool routes feature gradients to the argmax points only, so
the encoder backward pass touches just that row subset of the cloud.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ENCODER_WIDTHS = (3, 64, 128, 512)
HEAD_HIDDEN = (256, 256, 256, 256)
POSE_DIM = 9

CHECKPOINT_MAGIC = b"NMF1"
CHECKPOINT_VERSION = 1

_PRED_CLAMP = 1e-7


def softplus(z):
    z = np.asarray(z)
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def sigmoid(z):
    z = np.asarray(z)
    out = np.empty_like(z, dtype=z.dtype if z.dtype.kind == "f" else np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass
class BranchParams:
    """One branch: encoder layers then head layers over a flat parameter vector.

    layer_shapes holds (fan_in, fan_out) pairs, encoder first; the first
    `encoder_layers` of them make up the per-point MLP.
    """

    layer_shapes: tuple
    encoder_layers: int
    theta: np.ndarray

    def __post_init__(self):
        need = sum(i * o + o for i, o in self.layer_shapes)
        if self.theta.shape != (need,):
            raise ValueError(f"flat parameter vector must have {need} entries")
        offsets = []
        at = 0
        for fan_in, fan_out in self.layer_shapes:
            offsets.append((at, at + fan_in * fan_out, at + fan_in * fan_out + fan_out))
            at = offsets[-1][2]
        self._offsets = tuple(offsets)

    def views(self, theta=None):
        """[(W (in,out), b (out,)) ...] slicing the flat vector; zero-copy."""
        theta = self.theta if theta is None else theta
        out = []
        for (w0, w1, b1), (fan_in, fan_out) in zip(self._offsets, self.layer_shapes):
            out.append((theta[w0:w1].reshape(fan_in, fan_out), theta[w1:b1]))
        return out

    @property
    def feature_dim(self) -> int:
        return self.layer_shapes[self.encoder_layers - 1][1]


@dataclass
class ValueModel:
    """Separate parameter branches for path-length and collision prediction."""

    path: BranchParams
    collision: BranchParams


def init_branch(
    rng: np.random.Generator,
    encoder_widths=ENCODER_WIDTHS,
    head_hidden=HEAD_HIDDEN,
    pose_dim: int = POSE_DIM,
    dtype=np.float32,
) -> BranchParams:
    """He-uniform weights, zero biases, drawn from the given stream."""
    shapes = list(zip(encoder_widths[:-1], encoder_widths[1:]))
    widths = (encoder_widths[-1] + pose_dim,) + tuple(head_hidden) + (1,)
    shapes += list(zip(widths[:-1], widths[1:]))
    chunks = []
    for fan_in, fan_out in shapes:
        bound = np.sqrt(6.0 / fan_in)
        chunks.append(rng.uniform(-bound, bound, size=fan_in * fan_out))
        chunks.append(np.zeros(fan_out))
    theta = np.concatenate(chunks).astype(dtype)
    return BranchParams(tuple(shapes), len(encoder_widths) - 1, theta)


def init_model(seed: int, encoder_widths=ENCODER_WIDTHS, head_hidden=HEAD_HIDDEN, dtype=np.float32) -> ValueModel:
    rng = np.random.default_rng(seed)
    path = init_branch(rng, encoder_widths, head_hidden, dtype=dtype)
    coll = init_branch(rng, encoder_widths, head_hidden, dtype=dtype)
    return ValueModel(path, coll)


# ---------------------------------------------------------------------------
# Forward


def _encoder_forward(bp: BranchParams, cloud: np.ndarray):
    """Per-point MLP + max-pool.  Returns (feature, argmax rows, activations).

    activations[i] is the input to encoder layer i (post-ReLU for i > 0)."""
    h = np.asarray(cloud, dtype=bp.theta.dtype)
    acts = [h]
    for w, b in bp.views()[: bp.encoder_layers]:
        h = np.maximum(h @ w + b, 0.0)
        acts.append(h)
    winner = np.argmax(h, axis=0)
    feature = h[winner, np.arange(h.shape[1])]
    return feature, winner, acts


def _head_forward(bp: BranchParams, feature: np.ndarray, vecs: np.ndarray):
    """Raw (pre-activation) scalar for each pose row.  vecs is (B, 9)."""
    vecs = np.asarray(vecs, dtype=bp.theta.dtype)
    n = vecs.shape[0]
    x = np.concatenate([np.broadcast_to(feature, (n, feature.shape[0])), vecs], axis=1)
    acts = [x]
    head_views = bp.views()[bp.encoder_layers :]
    h = x
    for i, (w, b) in enumerate(head_views):
        z = h @ w + b
        h = z if i == len(head_views) - 1 else np.maximum(z, 0.0)
        acts.append(h)
    return h[:, 0], acts


def encode_cloud(bp: BranchParams, cloud: np.ndarray) -> np.ndarray:
    """Permutation-invariant 512-d (by default) cloud feature."""
    feature, _, _ = _encoder_forward(bp, cloud)
    return feature


def branch_raw_outputs(bp: BranchParams, feature: np.ndarray, vecs: np.ndarray) -> np.ndarray:
    """Head outputs before softplus/sigmoid, for a batch of pose vectors."""
    raw, _ = _head_forward(bp, feature, vecs)
    return raw


def predict_path_length(model: ValueModel, cloud: np.ndarray, vec9: np.ndarray) -> float:
    feature = encode_cloud(model.path, cloud)
    raw = branch_raw_outputs(model.path, feature, np.asarray(vec9).reshape(1, POSE_DIM))
    return float(softplus(raw[0]))


def predict_collision(model: ValueModel, cloud: np.ndarray, vec9: np.ndarray) -> float:
    feature = encode_cloud(model.collision, cloud)
    raw = branch_raw_outputs(model.collision, feature, np.asarray(vec9).reshape(1, POSE_DIM))
    return float(sigmoid(raw[0]))


# ---------------------------------------------------------------------------
# Losses


def loss_path_length(pred, gt) -> float:
    """Mean absolute error in meters."""
    return float(np.mean(np.abs(np.asarray(pred) - np.asarray(gt))))


def loss_collision(pred, gt) -> float:
    """Mean binary cross-entropy with predictions clamped away from {0,1}."""
    p = np.clip(np.asarray(pred, dtype=np.float64), _PRED_CLAMP, 1.0 - _PRED_CLAMP)
    t = np.asarray(gt, dtype=np.float64)
    return float(np.mean(-(t * np.log(p) + (1.0 - t) * np.log1p(-p))))


# ---------------------------------------------------------------------------
# Backward


def _backward_from_raw(bp: BranchParams, enc_acts, winner, head_acts, d_raw, grad: np.ndarray):
    """Accumulate d(loss)/d(theta) into `grad` given d(loss)/d(raw output)."""
    views = bp.views()
    grad_views = bp.views(grad)
    n_enc = bp.encoder_layers
    d = bp.feature_dim

    g = d_raw[:, None].astype(bp.theta.dtype)
    for i in range(len(views) - 1, n_enc - 1, -1):
        x_in = head_acts[i - n_enc]
        gw, gb = grad_views[i]
        gw += x_in.T @ g
        gb += g.sum(axis=0)
        if i > n_enc:
            g = (g @ views[i][0].T) * (x_in > 0)
        else:
            g = g @ views[i][0].T
    d_feature = g[:, :d].sum(axis=0)

    # Max-pool: each feature dimension belongs to exactly one cloud point, so
    # the encoder backward pass only needs those rows.
    rows = np.unique(winner)
    pos = np.searchsorted(rows, winner)
    gp = np.zeros((rows.shape[0], d), dtype=bp.theta.dtype)
    gp[pos, np.arange(d)] = d_feature
    for i in range(n_enc - 1, -1, -1):
        x_in = enc_acts[i][rows]
        h_out = enc_acts[i + 1][rows]
        gz = gp * (h_out > 0)
        gw, gb = grad_views[i]
        gw += x_in.T @ gz
        gb += gz.sum(axis=0)
        if i > 0:
            gp = gz @ views[i][0].T


def branch_loss_and_gradient(
    bp: BranchParams,
    cloud: np.ndarray,
    vecs: np.ndarray,
    targets: np.ndarray,
    kind: str,
    grad: np.ndarray,
    denom: int,
):
    """One cloud's contribution to the mean-batch loss and its gradient.

    Loss and gradient are scaled by len(vecs)/denom so multi-object batches
    can accumulate into one `grad` vector.  Returns the scaled loss.
    """
    dtype = bp.theta.dtype
    vecs = np.asarray(vecs, dtype=dtype)
    targets = np.asarray(targets, dtype=dtype)
    feature, winner, enc_acts = _encoder_forward(bp, cloud)
    raw, head_acts = _head_forward(bp, feature, vecs)
    if kind == "path":
        pred = softplus(raw)
        diff = pred - targets
        loss = float(np.sum(np.abs(diff))) / denom
        d_raw = np.sign(diff) * sigmoid(raw) / denom
    elif kind == "collision":
        pred = sigmoid(raw)
        p = np.clip(pred.astype(np.float64), _PRED_CLAMP, 1.0 - _PRED_CLAMP)
        t = targets.astype(np.float64)
        loss = float(np.sum(-(t * np.log(p) + (1.0 - t) * np.log1p(-p)))) / denom
        d_raw = (pred - targets) / denom
    else:
        raise ValueError(f"unknown branch kind {kind!r}")
    _backward_from_raw(bp, enc_acts, winner, head_acts, d_raw, grad)
    return loss


def compute_gradients(model: ValueModel, batch: np.ndarray, clouds: dict, branch: str, batch_id=None):
    """Mean-batch loss and flat gradient for one branch over mixed-object records.

    `batch` is a structured record array (see dataset.RECORD_DTYPE); `clouds`
    maps object_index -> (N, 3) point cloud.  Raises on non-finite loss.
    """
    bp = model.path if branch == "path" else model.collision
    kind = "path" if branch == "path" else "collision"
    if batch.shape[0] == 0:
        raise ValueError("empty batch")
    grad = np.zeros_like(bp.theta)
    total = 0.0
    denom = batch.shape[0]
    field = "path_length" if kind == "path" else "collision_label"
    for obj in np.unique(batch["object_index"]):
        sel = batch["object_index"] == obj
        total += branch_loss_and_gradient(
            bp, clouds[int(obj)], batch["pose"][sel], batch[field][sel], kind, grad, denom
        )
    if not np.isfinite(total):
        raise FloatingPointError(f"numerical blow-up in batch {batch_id!r}")
    return total, grad


# ---------------------------------------------------------------------------
# Checkpoints


def _write_branch(f, bp: BranchParams):
    f.write(np.asarray([len(bp.layer_shapes)], dtype="<u4").tobytes())
    dims = np.asarray(bp.layer_shapes, dtype="<u4")
    f.write(dims.tobytes())
    f.write(np.ascontiguousarray(bp.theta, dtype="<f4").tobytes())


def save_checkpoint(model: ValueModel, path) -> None:
    try:
        with open(path, "wb") as f:
            f.write(CHECKPOINT_MAGIC)
            f.write(np.asarray([CHECKPOINT_VERSION], dtype="<u4").tobytes())
            _write_branch(f, model.path)
            _write_branch(f, model.collision)
    except OSError as e:
        raise OSError(f"failed writing checkpoint {path}: {e}") from e


def _take(blob: bytes, at: int, n: int, path) -> tuple:
    if at + n > len(blob):
        raise ValueError(f"checkpoint {path}: truncated at byte {at}")
    return blob[at : at + n], at + n


def _read_branch(blob: bytes, at: int, path):
    raw, at = _take(blob, at, 4, path)
    n_layers = int(np.frombuffer(raw, dtype="<u4")[0])
    if not (2 <= n_layers <= 64):
        raise ValueError(f"checkpoint {path}: implausible layer count {n_layers}")
    raw, at = _take(blob, at, 8 * n_layers, path)
    dims = np.frombuffer(raw, dtype="<u4").reshape(n_layers, 2).astype(int)
    # The head starts where the layer chain breaks: its input is the encoder
    # output plus the 9 pose entries.
    encoder_layers = None
    for i in range(1, n_layers):
        if dims[i, 0] != dims[i - 1, 1]:
            if dims[i, 0] != dims[i - 1, 1] + POSE_DIM:
                raise ValueError(f"checkpoint {path}: inconsistent layer dims at {i}")
            encoder_layers = i
            break
    if encoder_layers is None:
        raise ValueError(f"checkpoint {path}: no encoder/head boundary found")
    n_params = int(sum(i * o + o for i, o in dims))
    raw, at = _take(blob, at, 4 * n_params, path)
    theta = np.frombuffer(raw, dtype="<f4").copy()
    return BranchParams(tuple((int(i), int(o)) for i, o in dims), encoder_layers, theta), at


def load_checkpoint(path) -> ValueModel:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise OSError(f"failed reading checkpoint {path}: {e}") from e
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"checkpoint {path}: bad magic {blob[:4]!r}")
    version = int(np.frombuffer(blob[4:8], dtype="<u4")[0])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"checkpoint {path}: unsupported version {version}")
    path_branch, at = _read_branch(blob, 8, path)
    coll_branch, at = _read_branch(blob, at, path)
    if at != len(blob):
        raise ValueError(f"checkpoint {path}: {len(blob) - at} trailing bytes")
    return ValueModel(path_branch, coll_branch)
