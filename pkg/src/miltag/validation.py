"""Input validation helpers for the estimator front end.

Bags are lists of 2-D matrices with a shared row count but varying column
counts, so the usual rectangular-array checks do not apply; these helpers
normalize and validate that structure.
"""

from __future__ import annotations

import numpy as np

from .data import Bag


def check_bags(X, feature_dim=None, ids=None):
    """Coerce ``X`` into a list of :class:`Bag` with one shared feature dim.

    ``X`` may hold :class:`Bag` objects or raw D x (n+1) arrays.  Raw arrays
    get synthetic ids (or ``ids`` when provided) and empty tag sets.
    """
    if isinstance(X, (np.ndarray, Bag)) or not hasattr(X, "__iter__"):
        raise ValueError("X must be a sequence of bags or of 2-D feature matrices")
    bags = []
    for i, item in enumerate(X):
        if isinstance(item, Bag):
            bags.append(item)
        else:
            bag_id = ids[i] if ids is not None else f"bag-{i:05d}"
            bags.append(Bag(bag_id, item))
    if not bags:
        raise ValueError("X is empty")
    dims = {bag.feature_dim for bag in bags}
    if len(dims) != 1:
        raise ValueError(f"bags disagree on feature dimension: {sorted(dims)}")
    dim = dims.pop()
    if feature_dim is not None and dim != feature_dim:
        raise ValueError(f"bags have feature dimension {dim}, expected {feature_dim}")
    return bags


def check_tag_sets(y, n_samples):
    """Validate per-sample tag collections and return them as sets of str."""
    if y is None:
        raise ValueError("y (per-bag tag sets) is required")
    tag_sets = []
    for i, tags in enumerate(y):
        if isinstance(tags, str):
            raise ValueError(f"y[{i}] is a single string; pass a collection of tag tokens")
        tag_set = {str(t) for t in tags}
        if not tag_set:
            raise ValueError(f"y[{i}] is empty; training bags need at least one tag")
        tag_sets.append(tag_set)
    if len(tag_sets) != n_samples:
        raise ValueError(f"y has {len(tag_sets)} entries for {n_samples} bags")
    return tag_sets


def check_token_list(tokens, name):
    """Validate an ordered, duplicate-free list of tag tokens."""
    out = [str(t) for t in tokens]
    if len(set(out)) != len(out):
        raise ValueError(f"{name} contains duplicate tokens")
    return out
