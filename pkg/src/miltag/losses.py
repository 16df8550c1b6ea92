"""Pairwise tag-ranking loss, analytic gradients, and a finite-difference oracle.

For one bag with pooled scores ``o`` over S training tags, positives ``y``
and negatives ``S \\ y``, the loss averages a softplus penalty over every
(positive, negative) pair:

    loss = mean over pairs of softplus(o[neg] - o[pos])

computed in the stable form ``softplus(x) = max(x, 0) + log1p(exp(-|x|))``.
The dataset objective is the unweighted mean of per-bag losses.

Gradients are hand-derived through the pooling, the frozen projection, and
both dense layers.  Mean pooling spreads a tag's score gradient evenly over
instances; max pooling routes it to the winning instance recorded in the
forward trace.  The ReLU passes no gradient at exactly zero, and max-pool
ties route to the first maximal instance; both are documented
nondifferentiable points that the gradient-check generator avoids.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .data import Bag
from .model import ModelParams, forward


class DegenerateBagError(ValueError):
    """The bag has no (positive, negative) pair: positives are empty or cover
    every tag.  Callers skip such bags."""


class LossValue(NamedTuple):
    value: float
    num_pairs: int


@dataclass
class Gradients:
    """Gradients of the trainable arrays; shapes mirror ModelParams."""

    dw1: np.ndarray
    db1: np.ndarray
    dw2: np.ndarray
    db2: np.ndarray

    def as_dict(self):
        return {"w1": self.dw1, "b1": self.db1, "w2": self.dw2, "b2": self.db2}

    def all_finite(self):
        return all(np.all(np.isfinite(a)) for a in self.as_dict().values())


def _softplus(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _sigmoid(x):
    # exact 0.0 / 1.0 in the saturated tails, no overflow warnings
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _split_positive_negative(num_tags, positives):
    pos = np.array(sorted({int(i) for i in positives}), dtype=np.intp)
    if pos.size and (pos[0] < 0 or pos[-1] >= num_tags):
        raise ValueError(f"positive indices {pos.tolist()} outside [0, {num_tags})")
    if pos.size == 0:
        raise DegenerateBagError("bag has no positive tags")
    if pos.size == num_tags:
        raise DegenerateBagError("bag is positive for every tag; no ranking pair exists")
    mask = np.ones(num_tags, dtype=bool)
    mask[pos] = False
    return pos, np.nonzero(mask)[0]


def tag_loss(bag_scores, positives):
    """Mean pairwise ranking penalty of one bag.

    Parameters
    ----------
    bag_scores : array of shape (S,)
        Pooled scores over the training tags.
    positives : iterable of int
        Indices of the bag's ground-truth tags; must be a nonempty proper
        subset of ``range(S)``.
    """
    scores = np.asarray(bag_scores, dtype=np.float64)
    if scores.ndim != 1:
        raise ValueError(f"bag scores must be 1-D, got shape {scores.shape}")
    pos, neg = _split_positive_negative(scores.shape[0], positives)
    diffs = scores[neg][:, None] - scores[pos][None, :]
    return LossValue(float(np.mean(_softplus(diffs))), int(pos.size * neg.size))


def dataset_loss(params, bags):
    """Mean per-bag loss over all non-degenerate bags.

    Returns ``(mean_loss, skipped)`` where ``skipped`` counts degenerate bags.
    Raises :class:`DegenerateBagError` when every bag is degenerate.
    """
    index = params.frozen.index
    total = 0.0
    counted = 0
    skipped = 0
    for bag in bags:
        positives = _positives_for(bag, index)
        try:
            lv = tag_loss(forward(params, bag).bag_scores, positives)
        except DegenerateBagError:
            skipped += 1
            continue
        total += lv.value
        counted += 1
    if counted == 0:
        raise DegenerateBagError("every bag is degenerate; the objective is undefined")
    return total / counted, skipped


def _positives_for(bag, tag_index):
    try:
        return frozenset(tag_index[t] for t in bag.tags)
    except KeyError as exc:
        raise ValueError(f"bag {bag.id!r} carries tag {exc.args[0]!r} absent from the tag matrix")


def backward(params, trace, positives):
    """Analytic gradients of :func:`tag_loss` for one bag.

    ``trace`` must come from :func:`miltag.model.forward` under ``params``;
    the frozen matrix receives no gradient by construction.
    """
    _check_trace(params, trace)
    num_tags, num_instances = trace.instance_scores.shape
    pos, neg = _split_positive_negative(num_tags, positives)
    num_pairs = pos.size * neg.size

    sig = _sigmoid(trace.bag_scores[neg][:, None] - trace.bag_scores[pos][None, :])
    grad_o = np.zeros(num_tags, dtype=np.float64)
    grad_o[neg] = sig.sum(axis=1) / num_pairs
    grad_o[pos] = -sig.sum(axis=0) / num_pairs

    grad_scores = np.zeros((num_tags, num_instances), dtype=np.float64)
    if params.pooling == "mean":
        grad_scores[:] = grad_o[:, None] / num_instances
    else:
        grad_scores[np.arange(num_tags), trace.argmax_instance] = grad_o

    grad_fprime = params.frozen.columns @ grad_scores
    dw2 = grad_fprime @ trace.hidden.T
    db2 = grad_fprime.sum(axis=1)
    grad_hidden = params.w2.T @ grad_fprime
    grad_pre1 = grad_hidden * (trace.pre_activation1 > 0.0)
    dw1 = grad_pre1 @ trace.features.T
    db1 = grad_pre1.sum(axis=1)
    return Gradients(dw1, db1, dw2, db2)


def _check_trace(params, trace):
    checks = (
        (trace.features.shape[0], params.feature_dim, "feature"),
        (trace.hidden.shape[0], params.hidden_dim, "hidden"),
        (trace.f_prime.shape[0], params.embed_dim, "embedding"),
        (trace.instance_scores.shape[0], params.num_tags, "tag"),
    )
    for got, want, what in checks:
        if got != want:
            raise ValueError(f"stale trace: {what} dimension {got} does not match params ({want})")
    if params.pooling == "max" and trace.argmax_instance is None:
        raise ValueError("stale trace: max pooling requires recorded argmax instances")


def finite_diff_grad(params, bag, positives, h=1e-5):
    """Central-difference gradient of the bag loss, one probe per scalar.

    Re-runs the full forward pass at ``theta + h`` and ``theta - h`` for every
    trainable entry.  Slow by design; this is the verification oracle for
    :func:`backward`.
    """
    h = float(h)
    if h <= 0.0:
        raise ValueError("finite-difference step h must be positive")
    work = params.copy()
    out = {name: np.zeros_like(arr) for name, arr in work.trainables()}
    for name, arr in work.trainables():
        flat = arr.reshape(-1)
        grad = out[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            loss_plus = tag_loss(forward(work, bag).bag_scores, positives).value
            flat[i] = orig - h
            loss_minus = tag_loss(forward(work, bag).bag_scores, positives).value
            flat[i] = orig
            if not (np.isfinite(loss_plus) and np.isfinite(loss_minus)):
                raise ValueError(f"non-finite loss while probing {name}[{i}]")
            grad[i] = (loss_plus - loss_minus) / (2.0 * h)
    return Gradients(out["w1"], out["b1"], out["w2"], out["b2"])


def max_relative_error(analytic, reference):
    """Largest elementwise ``|a - b| / max(1, |a|, |b|)`` across all arrays."""
    worst = 0.0
    ref = reference.as_dict()
    for name, a in analytic.as_dict().items():
        b = ref[name]
        denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
        err = np.abs(a - b) / denom
        if err.size:
            worst = max(worst, float(err.max()))
    return worst


@dataclass
class GradientCheckReport:
    trials: int
    h: float
    max_rel_error: float
    worst_trial: dict
    results: list  # (trial, pooling, error) triples


# margin below which a ReLU gate or a max-pool winner could flip under a
# +-h probe, corrupting the finite-difference estimate
_TIE_MARGIN = 1e-3


def _random_check_case(rng, pooling):
    for _ in range(200):
        d_feat = int(rng.integers(2, 9))
        d_hidden = int(rng.integers(2, 9))
        d_embed = int(rng.integers(2, 5))
        num_tags = int(rng.integers(2, 6))
        num_instances = int(rng.integers(1, 5))

        from .embeddings import SemanticMatrix  # local import avoids a cycle at module load

        cols = rng.standard_normal((d_embed, num_tags))
        cols /= np.linalg.norm(cols, axis=0, keepdims=True)
        frozen = SemanticMatrix(d_embed, [f"t{i}" for i in range(num_tags)], cols)
        params = ModelParams(
            0.6 * rng.standard_normal((d_hidden, d_feat)),
            0.3 * rng.standard_normal(d_hidden),
            0.6 * rng.standard_normal((d_embed, d_hidden)),
            0.3 * rng.standard_normal(d_embed),
            frozen,
            pooling,
        )
        bag = Bag("gradcheck", rng.standard_normal((d_feat, num_instances)))
        k = int(rng.integers(1, num_tags))
        positives = frozenset(rng.choice(num_tags, size=k, replace=False).tolist())

        trace = forward(params, bag)
        if np.abs(trace.pre_activation1).min() < _TIE_MARGIN:
            continue
        if pooling == "max" and num_instances > 1:
            top2 = np.sort(trace.instance_scores, axis=1)[:, -2:]
            if np.min(top2[:, 1] - top2[:, 0]) < _TIE_MARGIN:
                continue
        return params, bag, positives
    raise RuntimeError("could not draw a tie-free gradient-check configuration")


def _tied_max_case():
    """A deliberately tied max-pool case where analytic and finite differences
    disagree: two instances share the winning score for tag 0 but respond
    differently to the same weight probe."""
    from .embeddings import SemanticMatrix

    frozen = SemanticMatrix(2, ["t0", "t1"], np.eye(2))
    params = ModelParams(np.eye(2), np.zeros(2), np.eye(2), np.zeros(2), frozen, "max")
    bag = Bag("tied", np.array([[3.0, 3.0], [5.0, 9.0]]))
    return params, bag, frozenset({0})


def run_gradient_check_suite(trials=100, seed=0, poolings=("mean", "max"), h=1e-5,
                             allow_ties=False):
    """Compare analytic and finite-difference gradients over random cases.

    Each trial draws a small random head (feature dim <= 8, hidden <= 8,
    embedding <= 4, tags <= 5, instances <= 4), a random bag, and a random
    proper subset of positive tags, filtered to stay clear of ReLU and
    max-pool tie points.  ``allow_ties`` appends one crafted exactly-tied
    max-pool case, which is expected to blow the tolerance.
    """
    if trials < 1:
        raise ValueError("trials must be positive")
    results = []
    worst = {"trial": None, "pooling": None, "error": -1.0}
    for trial in range(trials):
        pooling = poolings[trial % len(poolings)]
        rng = np.random.default_rng([int(seed), trial])
        params, bag, positives = _random_check_case(rng, pooling)
        trace = forward(params, bag)
        analytic = backward(params, trace, positives)
        oracle = finite_diff_grad(params, bag, positives, h=h)
        err = max_relative_error(analytic, oracle)
        results.append((trial, pooling, err))
        if err > worst["error"]:
            worst = {"trial": trial, "pooling": pooling, "error": err}
    if allow_ties:
        params, bag, positives = _tied_max_case()
        trace = forward(params, bag)
        err = max_relative_error(
            backward(params, trace, positives), finite_diff_grad(params, bag, positives, h=h)
        )
        results.append(("tied-max-demo", "max", err))
        if err > worst["error"]:
            worst = {"trial": "tied-max-demo", "pooling": "max", "error": err}
    return GradientCheckReport(
        trials=len(results),
        h=h,
        max_rel_error=worst["error"],
        worst_trial=worst,
        results=results,
    )
