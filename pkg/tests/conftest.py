import numpy as np
import pytest

from miltag.data import Bag
from miltag.embeddings import EmbeddingTable, SemanticMatrix
from miltag.model import ModelParams


def identity_params(dim, pooling="mean"):
    """Identity network: every layer is the identity, frozen matrix is I."""
    frozen = SemanticMatrix(dim, [f"t{i}" for i in range(dim)], np.eye(dim))
    return ModelParams(np.eye(dim), np.zeros(dim), np.eye(dim), np.zeros(dim), frozen, pooling)


def random_params(rng, d_feat, d_hidden, d_embed, num_tags, pooling="mean", scale=0.6):
    cols = rng.standard_normal((d_embed, num_tags))
    cols /= np.linalg.norm(cols, axis=0, keepdims=True)
    frozen = SemanticMatrix(d_embed, [f"t{i}" for i in range(num_tags)], cols)
    return ModelParams(
        scale * rng.standard_normal((d_hidden, d_feat)),
        scale * rng.standard_normal(d_hidden),
        scale * rng.standard_normal((d_embed, d_hidden)),
        scale * rng.standard_normal(d_embed),
        frozen,
        pooling,
    )


def make_bag(features, tags=(), bag_id="b0"):
    return Bag(bag_id, np.asarray(features, dtype=float), tags)


@pytest.fixture
def rng():
    return np.random.default_rng(20240901)


@pytest.fixture
def tiny_table():
    return EmbeddingTable(2, {"cat": [1.0, 0.0], "dog": [0.0, 1.0]})
