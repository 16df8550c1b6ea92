"""Forward pass of the tagging head and task-specific top-K prediction.

The head is two trainable dense layers with a ReLU between them, followed by
a projection onto a frozen matrix of tag word vectors and a global pooling
(mean or max) over instances:

    hidden   = relu(W1 @ f + b1)          per instance column f
    f'       = W2 @ hidden + b2           no activation after the second layer
    scores   = frozen.T @ f'              one column of tag scores per instance
    bag      = pool(scores, axis=instances)

Only W1, b1, W2, b2 train; the frozen matrix is rebuilt from word vectors, so
the tag universe can be widened at prediction time without touching weights.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

POOLINGS = ("mean", "max")
TASKS = ("conventional", "zst", "gzst", "zsr")

_CHECKPOINT_MAGIC = b"miltag-checkpoint v1"


class ModelParams:
    """Trainable dense weights plus the frozen tag matrix and pooling mode."""

    __slots__ = ("w1", "b1", "w2", "b2", "frozen", "pooling")

    def __init__(self, w1, b1, w2, b2, frozen, pooling):
        w1 = np.array(w1, dtype=np.float64)
        b1 = np.array(b1, dtype=np.float64)
        w2 = np.array(w2, dtype=np.float64)
        b2 = np.array(b2, dtype=np.float64)
        if w1.ndim != 2 or b1.shape != (w1.shape[0],):
            raise ValueError(f"layer 1 shapes disagree: w1 {w1.shape}, b1 {b1.shape}")
        if w2.ndim != 2 or w2.shape[1] != w1.shape[0] or b2.shape != (w2.shape[0],):
            raise ValueError(f"layer 2 shapes disagree: w2 {w2.shape}, b2 {b2.shape}")
        if frozen.dim != w2.shape[0]:
            raise ValueError(
                f"frozen matrix dimension {frozen.dim} does not match layer output {w2.shape[0]}"
            )
        if pooling not in POOLINGS:
            raise ValueError(f"pooling must be one of {POOLINGS}, got {pooling!r}")
        self.w1 = w1
        self.b1 = b1
        self.w2 = w2
        self.b2 = b2
        self.frozen = frozen
        self.pooling = pooling

    @property
    def feature_dim(self):
        return self.w1.shape[1]

    @property
    def hidden_dim(self):
        return self.w1.shape[0]

    @property
    def embed_dim(self):
        return self.w2.shape[0]

    @property
    def num_tags(self):
        return self.frozen.num_tags

    def trainables(self):
        """Trainable arrays in declared order (the frozen matrix never trains)."""
        return (("w1", self.w1), ("b1", self.b1), ("w2", self.w2), ("b2", self.b2))

    def copy(self):
        return ModelParams(
            self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy(),
            self.frozen, self.pooling,
        )

    def with_frozen(self, matrix):
        """Same trainable weights projected onto a different tag matrix."""
        return ModelParams(self.w1, self.b1, self.w2, self.b2, matrix, self.pooling)


class ForwardTrace:
    """Every intermediate of one forward pass, kept for the backward pass."""

    __slots__ = (
        "features", "pre_activation1", "hidden", "f_prime",
        "instance_scores", "bag_scores", "argmax_instance",
    )

    def __init__(self, features, pre_activation1, hidden, f_prime,
                 instance_scores, bag_scores, argmax_instance):
        self.features = features
        self.pre_activation1 = pre_activation1
        self.hidden = hidden
        self.f_prime = f_prime
        self.instance_scores = instance_scores
        self.bag_scores = bag_scores
        self.argmax_instance = argmax_instance


def pool(instance_scores, mode):
    """Reduce a T x (n+1) score matrix to one score per tag.

    Max pooling also returns the per-tag winning instance index (first index
    on ties); mean pooling returns ``None`` in its place.
    """
    scores = np.asarray(instance_scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[1] < 1:
        raise ValueError(f"instance scores must be a nonempty 2-D matrix, got shape {scores.shape}")
    if mode == "mean":
        return scores.mean(axis=1), None
    if mode == "max":
        argmax = np.argmax(scores, axis=1)  # first maximal index on ties
        return scores[np.arange(scores.shape[0]), argmax], argmax
    raise ValueError(f"pooling must be one of {POOLINGS}, got {mode!r}")


def forward(params, bag):
    """Run the head over one bag and return the full trace."""
    feats = bag.features
    if feats.shape[0] != params.feature_dim:
        raise ValueError(
            f"bag {bag.id!r} has feature dimension {feats.shape[0]}, "
            f"model expects {params.feature_dim}"
        )
    if not np.all(np.isfinite(feats)):
        raise ValueError(f"bag {bag.id!r} contains non-finite features")
    pre1 = params.w1 @ feats + params.b1[:, None]
    hidden = np.maximum(pre1, 0.0)
    f_prime = params.w2 @ hidden + params.b2[:, None]
    instance_scores = params.frozen.columns.T @ f_prime
    bag_scores, argmax = pool(instance_scores, params.pooling)
    return ForwardTrace(feats, pre1, hidden, f_prime, instance_scores, bag_scores, argmax)


def task_index_range(task, num_seen, num_total):
    """Half-open index range of tags a task is allowed to rank."""
    if task not in TASKS:
        raise ValueError(f"task must be one of {TASKS}, got {task!r}")
    if not (0 <= num_seen <= num_total):
        raise ValueError(f"invalid seen count {num_seen} for universe of {num_total}")
    if task == "conventional":
        lo, hi = 0, num_seen
    elif task in ("zst", "zsr"):
        lo, hi = num_seen, num_total
    else:  # gzst
        lo, hi = 0, num_total
    if hi <= lo:
        raise ValueError(f"task {task!r} has an empty tag subset ({lo}:{hi})")
    return lo, hi


def rank_tags(bag_scores, task, num_seen):
    """Total order over the task's eligible tag indices, best first.

    Ties break toward the lower tag index, so the ranking is deterministic.
    """
    scores = np.asarray(bag_scores, dtype=np.float64)
    if scores.ndim != 1:
        raise ValueError(f"bag scores must be 1-D, got shape {scores.shape}")
    lo, hi = task_index_range(task, num_seen, scores.shape[0])
    order = np.argsort(-scores[lo:hi], kind="stable")
    return order + lo


def predict_topk(bag_scores, task, k, num_seen):
    """Indices of the K best tags for the task, best first.

    The single-label recognition task (``zsr``) is the K=1 restriction of
    ranking the unseen subset.
    """
    ranked = rank_tags(bag_scores, task, num_seen)
    k = int(k)
    if task == "zsr" and k != 1:
        raise ValueError("zsr is a single-label task; k must be 1")
    if not (1 <= k <= ranked.shape[0]):
        raise ValueError(f"k={k} is outside the task's {ranked.shape[0]}-tag subset")
    return ranked[:k]


def save_checkpoint(params, path):
    """Write a versioned checkpoint: text header, then raw little-endian
    float64 payloads for w1, b1, w2, b2 in that order.

    The frozen matrix is not stored; it is rebuilt from word vectors and tag
    lists so a wider tag universe can be installed at load time.
    """
    header = {
        "feature_dim": params.feature_dim,
        "hidden_dim": params.hidden_dim,
        "embed_dim": params.embed_dim,
        "num_tags_at_save": params.num_tags,
        "pooling": params.pooling,
    }
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_CHECKPOINT_MAGIC + b"\n")
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for _, arr in params.trainables():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path, frozen, pooling=None):
    """Read a checkpoint and install ``frozen`` as the tag matrix.

    ``frozen`` may carry a different number of columns than at save time (the
    open-vocabulary swap); only its vector dimension must match.  ``pooling``
    overrides the stored mode when given.
    """
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.readline().rstrip(b"\n")
        if magic != _CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a recognized checkpoint (header {magic!r})")
        header = json.loads(fh.readline().decode("utf-8"))
        payload = fh.read()
    d_feat = int(header["feature_dim"])
    d_hidden = int(header["hidden_dim"])
    d_embed = int(header["embed_dim"])
    mode = pooling if pooling is not None else header["pooling"]
    if frozen.dim != d_embed:
        raise ValueError(
            f"{path}: checkpoint embeds into {d_embed} dimensions but the "
            f"tag matrix has {frozen.dim}"
        )
    shapes = [(d_hidden, d_feat), (d_hidden,), (d_embed, d_hidden), (d_embed,)]
    expected = sum(int(np.prod(s)) for s in shapes) * 8
    if len(payload) != expected:
        raise ValueError(f"{path}: payload holds {len(payload)} bytes, expected {expected}")
    arrays = []
    offset = 0
    for shape in shapes:
        count = int(np.prod(shape))
        arrays.append(
            np.frombuffer(payload, dtype="<f8", count=count, offset=offset)
            .astype(np.float64)
            .reshape(shape)
        )
        offset += count * 8
    w1, b1, w2, b2 = arrays
    return ModelParams(w1, b1, w2, b2, frozen, mode)
