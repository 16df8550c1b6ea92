"""Word-vector tables and the frozen tag-embedding matrices built from them.

A tagger scores instances by projecting visual features onto a matrix whose
columns are word vectors of the candidate tags.  The matrix over the training
vocabulary is fixed during optimization; at prediction time it can be rebuilt
with extra columns for tags never seen in training.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

ZERO_NORM_TOLERANCE = 1e-12
UNIT_NORM_TOLERANCE = 1e-6


class ZeroVectorError(ValueError):
    """A vector with (near-)zero norm cannot be length-normalized."""


class MissingVectorError(ValueError):
    """Requested tags have no vector in the table."""

    def __init__(self, missing):
        self.missing = sorted(missing)
        super().__init__("no word vector for tags: " + ", ".join(self.missing))


class EmbeddingTable:
    """Immutable map from token to a fixed-dimension float64 vector."""

    def __init__(self, dim, vectors):
        dim = int(dim)
        if dim < 1:
            raise ValueError("embedding dimension must be positive")
        self.dim = dim
        store = {}
        for token, vec in vectors.items():
            arr = np.array(vec, dtype=np.float64)
            if arr.shape != (dim,):
                raise ValueError(
                    f"vector for token {token!r} has shape {arr.shape}, expected ({dim},)"
                )
            arr.flags.writeable = False
            store[str(token)] = arr
        self._vectors = store

    def __len__(self):
        return len(self._vectors)

    def __contains__(self, token):
        return token in self._vectors

    def vector(self, token):
        try:
            return self._vectors[token]
        except KeyError:
            raise MissingVectorError([token]) from None

    @property
    def tokens(self):
        """Tokens in insertion order."""
        return list(self._vectors)

    def items(self):
        return self._vectors.items()


def load_embeddings(path, expected_dim=None):
    """Parse a word-vector text file (token followed by floats, one per line).

    Duplicate tokens resolve to the last occurrence.  Vectors are returned as
    stored in the file, not normalized.

    Parameters
    ----------
    path : path-like
        Text file whose nonempty lines read ``token v1 ... vd``.
    expected_dim : int, optional
        Require every vector to have this many components.  When omitted the
        first nonempty line fixes the dimension.

    Returns
    -------
    (EmbeddingTable, int)
        The table and the number of duplicate tokens that were overwritten.
    """
    path = Path(path)
    dim = int(expected_dim) if expected_dim is not None else None
    vectors: dict[str, np.ndarray] = {}
    duplicates = 0
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            token, raw = parts[0], parts[1:]
            if dim is None:
                dim = len(raw)
                if dim == 0:
                    raise ValueError(f"{path}:{lineno}: token {token!r} has no vector components")
            if len(raw) != dim:
                raise ValueError(
                    f"{path}:{lineno}: vector for {token!r} has {len(raw)} components, expected {dim}"
                )
            try:
                vec = np.array([float(x) for x in raw], dtype=np.float64)
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: unparsable float ({exc})") from None
            if token in vectors:
                duplicates += 1
            vectors[token] = vec
    if dim is None or not vectors:
        raise ValueError(f"{path}: no embedding entries found")
    return EmbeddingTable(dim, vectors), duplicates


def normalize_table(table):
    """Return a copy of ``table`` with every vector scaled to unit length.

    Raises
    ------
    ZeroVectorError
        If any vector has Euclidean norm below ``ZERO_NORM_TOLERANCE``.
    """
    normalized = {}
    for token, vec in table.items():
        norm = float(np.linalg.norm(vec))
        if norm < ZERO_NORM_TOLERANCE:
            raise ZeroVectorError(f"token {token!r} has a zero vector and cannot be normalized")
        normalized[token] = vec / norm
    return EmbeddingTable(table.dim, normalized)


class SemanticMatrix:
    """Ordered tag vocabulary with its d x T matrix of word-vector columns."""

    def __init__(self, dim, tags, columns):
        tags = tuple(str(t) for t in tags)
        columns = np.array(columns, dtype=np.float64)
        if columns.shape != (int(dim), len(tags)):
            raise ValueError(
                f"columns have shape {columns.shape}, expected ({dim}, {len(tags)})"
            )
        columns.flags.writeable = False
        self.dim = int(dim)
        self.tags = tags
        self.columns = columns
        self.index = {t: i for i, t in enumerate(tags)}

    @property
    def num_tags(self):
        return len(self.tags)

    def column_for(self, tag):
        return self.columns[:, self.index[tag]]


def build_matrix(table, seen_tags, unseen_tags):
    """Assemble the training matrix and its seen+unseen extension.

    The first matrix holds one column per seen tag, in order.  The second is
    the same columns followed by one column per unseen tag, so the seen block
    is bit-identical between the two.

    Parameters
    ----------
    table : EmbeddingTable
        Must already be normalized (all vectors unit length).
    seen_tags, unseen_tags : sequence of str
        Ordered, mutually disjoint tag vocabularies.

    Returns
    -------
    (SemanticMatrix, SemanticMatrix)
        ``(seen_matrix, extended_matrix)``.
    """
    seen_tags = [str(t) for t in seen_tags]
    unseen_tags = [str(t) for t in unseen_tags]
    if not seen_tags:
        raise ValueError("seen tag list is empty")
    combined = seen_tags + unseen_tags
    if len(set(combined)) != len(combined):
        dupes = sorted({t for t in combined if combined.count(t) > 1})
        raise ValueError("duplicate tags across seen/unseen lists: " + ", ".join(dupes))
    missing = [t for t in combined if t not in table]
    if missing:
        raise MissingVectorError(missing)
    for t in combined:
        norm = float(np.linalg.norm(table.vector(t)))
        if abs(norm - 1.0) > UNIT_NORM_TOLERANCE:
            raise ValueError(
                f"table is not normalized: token {t!r} has norm {norm!r}; "
                "call normalize_table first"
            )
    seen_cols = np.column_stack([table.vector(t) for t in seen_tags])
    if unseen_tags:
        all_cols = np.column_stack(
            [seen_cols] + [table.vector(t).reshape(-1, 1) for t in unseen_tags]
        )
    else:
        all_cols = seen_cols.copy()
    seen_matrix = SemanticMatrix(table.dim, seen_tags, seen_cols)
    extended = SemanticMatrix(table.dim, combined, all_cols)
    return seen_matrix, extended
