"""Scikit-learn style front end for the tagger.

``ZeroShotTagger`` wraps initialization, training, and prediction behind the
familiar ``fit`` / ``decision_function`` / ``predict`` surface so the model
composes with the wider estimator ecosystem (``get_params``, ``clone``,
pipelines over precomputed bag features).  The open-vocabulary behavior is
exposed as ``extra_tags``: any token with a word vector can be scored at
prediction time without retraining.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .data import Bag, Dataset
from .embeddings import build_matrix, normalize_table
from .metrics import evaluate_scores
from .model import forward, predict_topk
from .training import TrainConfig, train
from .validation import check_bags, check_tag_sets, check_token_list


class ZeroShotTagger(BaseEstimator):
    """Multi-label tagger over bags of instance features.

    Parameters
    ----------
    embeddings : EmbeddingTable
        Word vectors covering every tag the model will ever score.  The
        table is length-normalized internally.
    classes : sequence of str, optional
        Training tag vocabulary in a fixed order.  Defaults to the sorted
        union of the tags observed in ``y``.
    hidden_dim, pooling, learning_rate, beta1, beta2, epsilon, iterations,
    log_every, seed :
        Optimization settings; see :class:`miltag.training.TrainConfig`.

    Attributes
    ----------
    classes_ : list of str
        Training vocabulary, index-aligned with decision columns.
    params_ : ModelParams
        Trained weights with the training tag matrix installed.
    loss_curve_ : list of (int, float)
        Windowed mean training loss per logging interval.
    """

    def __init__(self, embeddings=None, classes=None, hidden_dim=512, pooling="mean",
                 learning_rate=1e-5, beta1=0.9, beta2=0.999, epsilon=1e-8,
                 iterations=1000, log_every=100, seed=0):
        self.embeddings = embeddings
        self.classes = classes
        self.hidden_dim = hidden_dim
        self.pooling = pooling
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.iterations = iterations
        self.log_every = log_every
        self.seed = seed

    def _train_config(self):
        return TrainConfig(
            learning_rate=self.learning_rate,
            beta1=self.beta1,
            beta2=self.beta2,
            epsilon=self.epsilon,
            iterations=self.iterations,
            seed=self.seed,
            pooling=self.pooling,
            hidden_dim=self.hidden_dim,
            log_every=self.log_every,
        )

    def fit(self, X, y):
        """Train on bags ``X`` with per-bag tag collections ``y``."""
        if self.embeddings is None:
            raise ValueError("ZeroShotTagger requires an embeddings table")
        bags = check_bags(X)
        tag_sets = check_tag_sets(y, len(bags))
        if self.classes is not None:
            classes = check_token_list(self.classes, "classes")
        else:
            classes = sorted(set().union(*tag_sets))
        observed = set().union(*tag_sets)
        unknown = observed - set(classes)
        if unknown:
            raise ValueError("y uses tags outside classes: " + ", ".join(sorted(unknown)))

        table = normalize_table(self.embeddings)
        matrix, _ = build_matrix(table, classes, [])
        labeled = [Bag(bag.id, bag.features, tags) for bag, tags in zip(bags, tag_sets)]
        dataset = Dataset(labeled, classes, [], split="train")
        params, curve = train(dataset, matrix, self._train_config())

        self.classes_ = classes
        self.params_ = params
        self.loss_curve_ = curve
        self.table_ = table
        self.feature_dim_ = dataset.feature_dim
        return self

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise ValueError("this ZeroShotTagger instance is not fitted yet")

    def _params_for(self, extra_tags):
        extra = check_token_list(extra_tags, "extra_tags")
        overlap = set(extra) & set(self.classes_)
        if overlap:
            raise ValueError(
                "extra_tags overlap the training vocabulary: " + ", ".join(sorted(overlap))
            )
        if not extra:
            return self.params_
        _, extended = build_matrix(self.table_, self.classes_, extra)
        return self.params_.with_frozen(extended)

    def decision_function(self, X, extra_tags=()):
        """Bag scores, one row per sample.

        Columns follow ``classes_`` and then ``extra_tags``; appending extra
        tags never changes the scores of the training columns.
        """
        self._check_fitted()
        bags = check_bags(X, feature_dim=self.feature_dim_)
        params = self._params_for(extra_tags)
        return np.stack([forward(params, bag).bag_scores for bag in bags])

    def predict(self, X, task="conventional", k=3, extra_tags=()):
        """Top-K tag tokens per bag for the given task protocol."""
        self._check_fitted()
        params = self._params_for(extra_tags)
        universe = list(self.classes_) + list(extra_tags)
        scores = self.decision_function(X, extra_tags=extra_tags)
        return [
            [universe[i] for i in predict_topk(row, task, k, len(self.classes_))]
            for row in scores
        ]

    def score(self, X, y, task="conventional", extra_tags=()):
        """Mean image average precision of the task's ranking on (X, y)."""
        self._check_fitted()
        scores = self.decision_function(X, extra_tags=extra_tags)
        universe = list(self.classes_) + list(extra_tags)
        index = {t: i for i, t in enumerate(universe)}
        gts = []
        for i, tags in enumerate(y):
            try:
                gts.append({index[str(t)] for t in tags})
            except KeyError as exc:
                raise ValueError(f"y[{i}] uses unknown tag {exc.args[0]!r}")
        report = evaluate_scores(scores, gts, task, ks=(), num_seen=len(self.classes_))
        return report.miap
