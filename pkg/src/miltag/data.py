"""Bags of instance features, dataset files, and a synthetic generator.

An image enters the tagger as a *bag*: a D x (n+1) matrix whose columns are
instance feature vectors, with column 0 reserved for the whole-image instance.
How those features were produced (region proposals, crops, ...) is outside
this package; bags arrive from files or from :func:`generate_synthetic`.

File formats:

* bag files are line-delimited JSON records
  ``{"id": str, "rows": D, "cols": n+1, "data": [floats, column-major], "tags": [str, ...]}``
* tag lists are plain text, one token per line, order-significant.

Floats are serialized with round-trip-exact decimal formatting.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .embeddings import EmbeddingTable

_DISTRACTOR_ATTEMPTS = 1000
_VOCAB_ATTEMPTS = 200000


class Bag:
    """One image: an instance feature matrix plus its ground-truth tag set."""

    __slots__ = ("id", "features", "tags")

    def __init__(self, bag_id, features, tags=()):
        feats = np.array(features, dtype=np.float64, order="C")
        if feats.ndim != 2:
            raise ValueError(f"bag {bag_id!r}: features must be 2-D, got shape {feats.shape}")
        if feats.shape[1] < 1:
            raise ValueError(f"bag {bag_id!r}: a bag needs at least one instance column")
        feats.flags.writeable = False
        self.id = str(bag_id)
        self.features = feats
        self.tags = frozenset(str(t) for t in tags)

    @property
    def feature_dim(self):
        return self.features.shape[0]

    @property
    def num_instances(self):
        return self.features.shape[1]

    def __eq__(self, other):
        if not isinstance(other, Bag):
            return NotImplemented
        return (
            self.id == other.id
            and self.tags == other.tags
            and self.features.shape == other.features.shape
            and np.array_equal(self.features, other.features)
        )

    def __hash__(self):
        return hash((self.id, self.tags, self.features.tobytes()))

    def __repr__(self):
        d, n1 = self.features.shape
        return f"Bag(id={self.id!r}, features={d}x{n1}, tags={sorted(self.tags)})"


class Dataset:
    """A list of bags together with its seen/unseen tag vocabularies.

    ``split="train"`` additionally requires every bag to carry a nonempty tag
    set drawn entirely from the seen vocabulary.
    """

    def __init__(self, bags, seen_tags, unseen_tags, split="test"):
        if split not in ("train", "test"):
            raise ValueError(f"split must be 'train' or 'test', got {split!r}")
        bags = list(bags)
        seen_tags = [str(t) for t in seen_tags]
        unseen_tags = [str(t) for t in unseen_tags]
        overlap = set(seen_tags) & set(unseen_tags)
        if overlap:
            raise ValueError("seen and unseen tag sets overlap: " + ", ".join(sorted(overlap)))
        if len(set(seen_tags)) != len(seen_tags) or len(set(unseen_tags)) != len(unseen_tags):
            raise ValueError("tag lists contain duplicates")
        if not bags:
            raise ValueError("dataset has no bags")

        ids = set()
        dims = {bag.feature_dim for bag in bags}
        if len(dims) != 1:
            raise ValueError(f"bags disagree on feature dimension: {sorted(dims)}")
        seen_set = set(seen_tags)
        allowed = seen_set | set(unseen_tags)
        for bag in bags:
            if bag.id in ids:
                raise ValueError(f"duplicate bag id {bag.id!r}")
            ids.add(bag.id)
            if split == "train":
                if not bag.tags:
                    raise ValueError(f"training bag {bag.id!r} has an empty tag set")
                bad = bag.tags - seen_set
                if bad:
                    raise ValueError(
                        f"training bag {bag.id!r} uses tags outside the seen set: "
                        + ", ".join(sorted(bad))
                    )
            else:
                if not bag.tags:
                    raise ValueError(f"test bag {bag.id!r} has an empty tag set")
                bad = bag.tags - allowed
                if bad:
                    raise ValueError(
                        f"test bag {bag.id!r} uses unknown tags: " + ", ".join(sorted(bad))
                    )

        self.bags = bags
        self.seen_tags = seen_tags
        self.unseen_tags = unseen_tags
        self.split = split
        self.feature_dim = dims.pop()

    def __len__(self):
        return len(self.bags)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.seen_tags == other.seen_tags
            and self.unseen_tags == other.unseen_tags
            and self.split == other.split
            and self.bags == other.bags
        )

    def __repr__(self):
        return (
            f"Dataset(split={self.split!r}, bags={len(self.bags)}, "
            f"D={self.feature_dim}, S={len(self.seen_tags)}, U={len(self.unseen_tags)})"
        )


def load_tag_list(path):
    """Read an order-significant tag list, one token per line."""
    path = Path(path)
    tags = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            token = line.strip()
            if token:
                tags.append(token)
    if len(set(tags)) != len(tags):
        raise ValueError(f"{path}: tag list contains duplicates")
    return tags


def save_tag_list(tags, path):
    with open(path, "w", encoding="utf-8") as fh:
        for token in tags:
            fh.write(f"{token}\n")


def load_bags(path):
    """Parse a line-delimited bag record file. Validates shapes and id uniqueness."""
    path = Path(path)
    bags = []
    ids = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: invalid record ({exc})") from None
            try:
                bag_id = rec["id"]
                rows = int(rec["rows"])
                cols = int(rec["cols"])
                data = rec["data"]
                tags = rec.get("tags", [])
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed record ({exc})") from None
            if len(data) != rows * cols:
                raise ValueError(
                    f"{path}:{lineno}: bag {bag_id!r} declares shape {rows}x{cols} "
                    f"but carries {len(data)} values"
                )
            feats = np.array(data, dtype=np.float64).reshape(rows, cols, order="F")
            if bag_id in ids:
                raise ValueError(f"{path}:{lineno}: duplicate bag id {bag_id!r}")
            ids.add(bag_id)
            bags.append(Bag(bag_id, feats, tags))
    return bags


def load_dataset(bags_path, seen_path, unseen_path, split="train"):
    """Load bags plus both tag lists and enforce the dataset invariants."""
    seen = load_tag_list(seen_path)
    unseen = load_tag_list(unseen_path)
    bags = load_bags(bags_path)
    return Dataset(bags, seen, unseen, split=split)


def save_dataset(dataset, path):
    """Write a dataset's bags as line-delimited records.

    Tag lists are stored separately with :func:`save_tag_list`.  Round trips
    through :func:`load_dataset` are lossless: floats are serialized with
    shortest round-trip decimal representations.
    """
    if not dataset.bags:
        raise ValueError("refusing to save an empty dataset")
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for bag in dataset.bags:
            rows, cols = bag.features.shape
            rec = {
                "id": bag.id,
                "rows": rows,
                "cols": cols,
                "data": bag.features.flatten(order="F").tolist(),
                "tags": sorted(bag.tags),
            }
            fh.write(json.dumps(rec) + "\n")


@dataclass(frozen=True)
class SynthConfig:
    """Configuration of the synthetic bag generator.

    Generation is a pure function of this config: all randomness flows from a
    single PCG64 stream seeded with ``seed``, so identical configs reproduce
    byte-identical datasets.

    Bags are built so a linear visual-to-semantic map exists by construction:
    instances are an orthonormal mixing matrix applied to unit tag embeddings
    plus Gaussian noise.  Each bag holds the whole-image instance (column 0,
    the mean of the tag instances), one instance per ground-truth tag, and
    distractor instances whose directions stay below
    ``distractor_max_cosine`` similarity to every vocabulary vector.  The
    distractor count fills the bag to exactly ``bag_size`` columns, so
    ``distractors_per_bag`` must bracket the fill counts.

    Seen embeddings form an orthonormal frame; unseen embeddings are unit
    vectors sampled *inside the span of the seen ones*, with their cosine to
    every seen vector capped by ``unseen_max_cos_seen`` and their pairwise
    cosine capped by ``unseen_max_cos_pair``.  Realistic vocabularies have
    far more seen tags than embedding dimensions, so every unseen vector
    automatically lies in the seen span; at desk scale (few seen tags) that
    span condition must be imposed for the projection learned from seen
    supervision to determine unseen scores at all, and the cosine caps keep
    unseen candidates from hiding behind highly correlated seen tags.

    ``test_include_seen`` selects the test-image composition: ``True`` draws
    every test image's tags from the combined vocabulary, ``False`` (the
    default) builds a pure zero-shot test bed where each test image carries
    exactly one unseen tag and no seen instances, keeping per-image
    ground truth sparse relative to the unseen subset the way large-scale
    tag vocabularies do.
    """

    num_seen: int = 10
    num_unseen: int = 5
    embed_dim: int = 16
    feature_dim: int = 32
    bag_size: int = 8
    tags_per_image: tuple[int, int] = (1, 3)
    distractors_per_bag: tuple[int, int] = (4, 6)
    noise_sigma: float = 0.02
    label_noise_rate: float = 0.0
    train_size: int = 200
    test_size: int = 100
    test_include_seen: bool = False
    distractor_max_cosine: float = 0.3
    unseen_max_cos_seen: float = 0.42
    unseen_max_cos_pair: float = 0.25
    seed: int = 0

    def validate(self):
        counts = {
            "num_seen": self.num_seen,
            "num_unseen": self.num_unseen,
            "embed_dim": self.embed_dim,
            "feature_dim": self.feature_dim,
            "bag_size": self.bag_size,
            "train_size": self.train_size,
            "test_size": self.test_size,
        }
        for name, value in counts.items():
            if int(value) < 1:
                raise ValueError(f"{name} must be positive, got {value}")
        if self.feature_dim < self.embed_dim:
            raise ValueError("feature_dim must be at least embed_dim")
        if self.num_seen > self.embed_dim:
            raise ValueError("num_seen cannot exceed embed_dim (seen vectors are orthonormal)")
        lo, hi = self.tags_per_image
        if not (1 <= lo <= hi):
            raise ValueError(f"tags_per_image range {self.tags_per_image} is invalid")
        if hi > self.num_seen:
            raise ValueError(f"tags_per_image max {hi} exceeds the seen pool ({self.num_seen})")
        if self.test_include_seen and hi > self.num_seen + self.num_unseen:
            raise ValueError("tags_per_image max exceeds the combined test pool")
        dlo, dhi = self.distractors_per_bag
        if not (0 <= dlo <= dhi):
            raise ValueError(f"distractors_per_bag range {self.distractors_per_bag} is invalid")
        # bags are filled to bag_size: 1 whole-image + k tags + (bag_size-1-k) distractors
        test_lo, test_hi = (lo, hi) if self.test_include_seen else (1, 1)
        fill_min = self.bag_size - 1 - max(hi, test_hi)
        fill_max = self.bag_size - 1 - min(lo, test_lo)
        if fill_min < dlo or fill_max > dhi:
            raise ValueError(
                f"bag_size {self.bag_size} needs {fill_min}..{fill_max} distractors per bag, "
                f"outside distractors_per_bag {self.distractors_per_bag}"
            )
        if not (0.0 <= self.label_noise_rate <= 1.0):
            raise ValueError("label_noise_rate must be a probability")
        if self.noise_sigma < 0.0:
            raise ValueError("noise_sigma must be nonnegative")
        if not (0.0 < self.distractor_max_cosine <= 1.0):
            raise ValueError("distractor_max_cosine must be in (0, 1]")
        if self.unseen_max_cos_seen * math.sqrt(self.num_seen) < 1.0:
            raise ValueError(
                f"unseen_max_cos_seen {self.unseen_max_cos_seen} is below the geometric "
                f"floor 1/sqrt(num_seen) = {1.0 / math.sqrt(self.num_seen):.3f}"
            )
        if not (0.0 < self.unseen_max_cos_pair <= 1.0):
            raise ValueError("unseen_max_cos_pair must be in (0, 1]")


def _unit(rng, dim):
    v = rng.standard_normal(dim)
    norm = np.linalg.norm(v)
    if norm < 1e-12:
        raise RuntimeError("degenerate random direction")
    return v / norm


def _sample_vocab(rng, cfg):
    """Seen vectors: a random orthonormal frame.  Unseen vectors: unit
    combinations of the seen frame, rejection-sampled under the cosine caps."""
    q, r = np.linalg.qr(rng.standard_normal((cfg.embed_dim, cfg.num_seen)))
    seen = (q * np.sign(np.diag(r))).T  # num_seen rows, orthonormal
    unseen = []
    for _ in range(_VOCAB_ATTEMPTS):
        if len(unseen) == cfg.num_unseen:
            break
        coef = _unit(rng, cfg.num_seen)  # coef[i] = cosine to the i-th seen vector
        if float(np.max(np.abs(coef))) >= cfg.unseen_max_cos_seen:
            continue
        candidate = seen.T @ coef
        if unseen and float(np.max(np.abs(np.array(unseen) @ candidate))) >= cfg.unseen_max_cos_pair:
            continue
        unseen.append(candidate)
    if len(unseen) < cfg.num_unseen:
        raise ValueError(
            f"could not sample {cfg.num_unseen} unseen vectors under "
            f"unseen_max_cos_seen={cfg.unseen_max_cos_seen} and "
            f"unseen_max_cos_pair={cfg.unseen_max_cos_pair} within {_VOCAB_ATTEMPTS} attempts; "
            "the config is infeasible"
        )
    return np.vstack([seen] + [u.reshape(1, -1) for u in unseen])


def _sample_distractor(rng, vocab, max_cosine):
    """Unit direction with cosine below ``max_cosine`` to every vocabulary vector."""
    for _ in range(_DISTRACTOR_ATTEMPTS):
        r = _unit(rng, vocab.shape[1])
        if float(np.max(vocab @ r)) < max_cosine:
            return r
    raise ValueError(
        f"could not sample a distractor with cosine < {max_cosine} to all "
        f"{vocab.shape[0]} vocabulary vectors after {_DISTRACTOR_ATTEMPTS} attempts; "
        "the config is infeasible"
    )


def _apply_label_noise(rng, cfg, tags, pool, tokens):
    if cfg.label_noise_rate <= 0.0 or rng.random() >= cfg.label_noise_rate:
        return tags
    current = sorted(tags)
    victim = current[int(rng.integers(len(current)))]
    delete = int(rng.integers(2)) == 0
    if delete and len(current) > 1:
        tags.remove(victim)
    else:
        candidates = [tokens[t] for t in pool if tokens[t] not in tags]
        if candidates:
            tags.remove(victim)
            tags.add(candidates[int(rng.integers(len(candidates)))])
        elif len(current) > 1:
            tags.remove(victim)
    return tags


def _synth_bag(rng, cfg, tokens, vocab, mixing, tag_idx, noise_pool, bag_id):
    def noisy(mean_vec):
        return mean_vec + cfg.noise_sigma * rng.standard_normal(cfg.feature_dim)

    tag_cols = [noisy(mixing @ vocab[t]) for t in tag_idx]
    num_distractors = cfg.bag_size - 1 - len(tag_idx)
    distractor_cols = [
        noisy(mixing @ _sample_distractor(rng, vocab, cfg.distractor_max_cosine))
        for _ in range(num_distractors)
    ]
    whole_image = noisy(np.mean(tag_cols, axis=0))
    features = np.column_stack([whole_image] + tag_cols + distractor_cols)
    tags = _apply_label_noise(rng, cfg, {tokens[t] for t in tag_idx}, noise_pool, tokens)
    return Bag(bag_id, features, tags)


def generate_synthetic(cfg):
    """Generate train/test datasets with controllable zero-shot structure.

    Train images sample 1..k seen tags per the configured range.  Test
    composition follows ``cfg.test_include_seen`` (see :class:`SynthConfig`).

    Returns
    -------
    (Dataset, Dataset, EmbeddingTable, numpy.ndarray)
        Train set (seen tags only), test set, the tag embedding table, and
        the D x d orthonormal-column mixing matrix used to lift embeddings
        into feature space.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)

    total = cfg.num_seen + cfg.num_unseen
    tokens = [f"seen{i:03d}" for i in range(cfg.num_seen)] + [
        f"unseen{i:03d}" for i in range(cfg.num_unseen)
    ]
    vocab = _sample_vocab(rng, cfg)
    table = EmbeddingTable(cfg.embed_dim, dict(zip(tokens, vocab)))

    q, r = np.linalg.qr(rng.standard_normal((cfg.feature_dim, cfg.embed_dim)))
    mixing = q * np.sign(np.diag(r))  # sign-fixed so the factorization is unique

    lo, hi = cfg.tags_per_image
    seen_pool = np.arange(cfg.num_seen)
    mixed_pool = np.arange(total)
    unseen_pool = np.arange(cfg.num_seen, total)

    train_bags = []
    for i in range(cfg.train_size):
        k = int(rng.integers(lo, hi + 1))
        tag_idx = rng.choice(seen_pool, size=k, replace=False).tolist()
        train_bags.append(
            _synth_bag(rng, cfg, tokens, vocab, mixing, tag_idx, seen_pool, f"train-{i:05d}")
        )

    test_bags = []
    for i in range(cfg.test_size):
        if cfg.test_include_seen:
            k = int(rng.integers(lo, hi + 1))
            tag_idx = rng.choice(mixed_pool, size=k, replace=False).tolist()
            noise_pool = mixed_pool
        else:
            tag_idx = [int(rng.choice(unseen_pool))]
            noise_pool = unseen_pool
        test_bags.append(
            _synth_bag(rng, cfg, tokens, vocab, mixing, tag_idx, noise_pool, f"test-{i:05d}")
        )

    seen_tokens = tokens[: cfg.num_seen]
    unseen_tokens = tokens[cfg.num_seen :]
    train = Dataset(train_bags, seen_tokens, unseen_tokens, split="train")
    test = Dataset(test_bags, seen_tokens, unseen_tokens, split="test")
    return train, test, table, mixing
