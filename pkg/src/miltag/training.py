"""Parameter initialization, Adam, and the one-bag-per-iteration training loop.

Optimization follows the Adam update with bias correction:

    m <- b1*m + (1-b1)*g        v <- b2*v + (1-b2)*g^2        t <- t+1
    theta <- theta - lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)

Every iteration consumes exactly one bag, drawn from a seeded shuffle of the
dataset that reshuffles each epoch.  Degenerate bags (no ranking pair) are
skipped without consuming an iteration.  The whole run is a pure function of
(dataset, matrix, config), so reruns reproduce checkpoints byte for byte.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

from .losses import DegenerateBagError, backward, tag_loss, _positives_for
from .model import ModelParams, POOLINGS, forward, save_checkpoint


class TrainingDiverged(RuntimeError):
    """The loss became non-finite; the message names the offending bag."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    iterations: int = 1000
    seed: int = 0
    pooling: str = "mean"
    hidden_dim: int = 512
    log_every: int = 100
    checkpoint_every: int = 1000

    def validate(self):
        if self.learning_rate < 0.0:
            raise ValueError("learning_rate must be nonnegative")
        for name, beta in (("beta1", self.beta1), ("beta2", self.beta2)):
            if not (0.0 <= beta < 1.0):
                raise ValueError(f"{name} must lie in [0, 1), got {beta}")
        if self.epsilon <= 0.0:
            raise ValueError("epsilon must be positive")
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        if self.pooling not in POOLINGS:
            raise ValueError(f"pooling must be one of {POOLINGS}")
        if self.hidden_dim < 1:
            raise ValueError("hidden_dim must be positive")
        if self.log_every < 1 or self.checkpoint_every < 1:
            raise ValueError("log_every and checkpoint_every must be positive")


@dataclass
class AdamState:
    """First/second moment accumulators and the step counter."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls(
            m={name: np.zeros_like(arr) for name, arr in params.trainables()},
            v={name: np.zeros_like(arr) for name, arr in params.trainables()},
            t=0,
        )


def init_params(feature_dim, hidden_dim, embed_dim, matrix, pooling, seed):
    """Seeded uniform initialization of the two dense layers, zero biases.

    Layer 1 uses fan-in scaling ``U(+-sqrt(6/D))`` (ReLU follows it); layer 2
    uses symmetric scaling ``U(+-sqrt(6/(H+d)))``.
    """
    feature_dim, hidden_dim, embed_dim = int(feature_dim), int(hidden_dim), int(embed_dim)
    if min(feature_dim, hidden_dim, embed_dim) < 1:
        raise ValueError("all dimensions must be positive")
    if matrix.dim != embed_dim:
        raise ValueError(f"tag matrix dimension {matrix.dim} does not match embed_dim {embed_dim}")
    rng = np.random.default_rng(seed)
    bound1 = math.sqrt(6.0 / feature_dim)
    bound2 = math.sqrt(6.0 / (hidden_dim + embed_dim))
    w1 = rng.uniform(-bound1, bound1, size=(hidden_dim, feature_dim))
    w2 = rng.uniform(-bound2, bound2, size=(embed_dim, hidden_dim))
    return ModelParams(w1, np.zeros(hidden_dim), w2, np.zeros(embed_dim), matrix, pooling)


def adam_step(params, grads, state, cfg):
    """One Adam update; returns fresh ``(params, state)``, inputs untouched.

    The frozen tag matrix is carried over by reference and never modified.
    """
    if state.t < 0:
        raise ValueError("Adam step counter must be nonnegative")
    if not grads.all_finite():
        raise ValueError("gradients contain non-finite entries")
    g = grads.as_dict()
    t = state.t + 1
    new_m, new_v, updated = {}, {}, {}
    for name, theta in params.trainables():
        if g[name].shape != theta.shape:
            raise ValueError(f"gradient for {name} has shape {g[name].shape}, expected {theta.shape}")
        m = cfg.beta1 * state.m[name] + (1.0 - cfg.beta1) * g[name]
        v = cfg.beta2 * state.v[name] + (1.0 - cfg.beta2) * g[name] ** 2
        m_hat = m / (1.0 - cfg.beta1**t)
        v_hat = v / (1.0 - cfg.beta2**t)
        new_m[name] = m
        new_v[name] = v
        updated[name] = theta - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.epsilon)
    new_params = ModelParams(
        updated["w1"], updated["b1"], updated["w2"], updated["b2"],
        params.frozen, params.pooling,
    )
    return new_params, AdamState(m=new_m, v=new_v, t=t)


def train(dataset, matrix, cfg, checkpoint_dir=None):
    """Optimize the head on a training dataset.

    Parameters
    ----------
    dataset : Dataset
        Training bags; its seen tag list must equal ``matrix.tags``.
    matrix : SemanticMatrix
        Frozen tag matrix over the seen vocabulary.
    cfg : TrainConfig
    checkpoint_dir : path-like, optional
        When given, a checkpoint is written every ``cfg.checkpoint_every``
        applied steps as ``checkpoint_0000500.ckpt`` etc.

    Returns
    -------
    (ModelParams, list of (int, float))
        Final parameters and the loss curve: the mean loss over each window
        of ``cfg.log_every`` iterations, keyed by iteration number.
    """
    cfg.validate()
    if tuple(matrix.tags) != tuple(dataset.seen_tags):
        raise ValueError("tag matrix must be built from the dataset's seen tags, in order")
    if checkpoint_dir is not None:
        checkpoint_dir = Path(checkpoint_dir)
        checkpoint_dir.mkdir(parents=True, exist_ok=True)

    params = init_params(
        dataset.feature_dim, cfg.hidden_dim, matrix.dim, matrix, cfg.pooling, cfg.seed
    )
    state = AdamState.zeros_like(params)
    shuffle_rng = np.random.default_rng([int(cfg.seed), 1])
    index = matrix.index

    curve = []
    window = []
    iteration = 0
    skipped = 0
    while iteration < cfg.iterations:
        order = shuffle_rng.permutation(len(dataset.bags))
        applied_this_epoch = 0
        for bag_pos in order:
            if iteration >= cfg.iterations:
                break
            bag = dataset.bags[int(bag_pos)]
            positives = _positives_for(bag, index)
            if not positives or len(positives) == len(matrix.tags):
                skipped += 1
                logger.warning("skipping degenerate bag %r (no ranking pair)", bag.id)
                continue
            trace = forward(params, bag)
            loss = tag_loss(trace.bag_scores, positives)
            if not np.isfinite(loss.value):
                raise TrainingDiverged(
                    f"non-finite loss at iteration {iteration + 1} on bag {bag.id!r}"
                )
            grads = backward(params, trace, positives)
            params, state = adam_step(params, grads, state, cfg)
            iteration += 1
            applied_this_epoch += 1
            window.append(loss.value)
            if iteration % cfg.log_every == 0 or iteration == cfg.iterations:
                curve.append((iteration, float(np.mean(window))))
                window = []
            if checkpoint_dir is not None and iteration % cfg.checkpoint_every == 0:
                save_checkpoint(params, checkpoint_dir / f"checkpoint_{iteration:07d}.ckpt")
        if applied_this_epoch == 0 and iteration < cfg.iterations:
            raise DegenerateBagError("dataset holds no trainable bags (all degenerate)")
    return params, curve
