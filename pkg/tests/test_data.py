import json

import numpy as np
import pytest

from miltag.data import (
    Bag,
    Dataset,
    SynthConfig,
    generate_synthetic,
    load_bags,
    load_dataset,
    load_tag_list,
    save_dataset,
    save_tag_list,
)


def write_record(path, **overrides):
    rec = {
        "id": "img0",
        "rows": 4,
        "cols": 3,
        "data": list(range(12)),
        "tags": ["a"],
    }
    rec.update(overrides)
    path.write_text(json.dumps(rec) + "\n", encoding="utf-8")
    return path


def write_tags(path, tags):
    save_tag_list(tags, path)
    return path


class TestLoadDataset:
    def test_single_record(self, tmp_path):
        bags = write_record(tmp_path / "bags.jsonl")
        seen = write_tags(tmp_path / "seen.txt", ["a", "b"])
        unseen = write_tags(tmp_path / "unseen.txt", [])
        ds = load_dataset(bags, seen, unseen, split="train")
        assert len(ds) == 1
        assert ds.feature_dim == 4
        assert ds.bags[0].num_instances == 3
        assert ds.bags[0].tags == {"a"}

    def test_column_major_layout(self, tmp_path):
        bags = write_record(tmp_path / "bags.jsonl", rows=2, cols=2, data=[1, 2, 3, 4])
        ds = load_dataset(
            bags,
            write_tags(tmp_path / "s.txt", ["a"]),
            write_tags(tmp_path / "u.txt", []),
            split="train",
        )
        assert np.array_equal(ds.bags[0].features, [[1.0, 3.0], [2.0, 4.0]])

    def test_train_tag_outside_seen(self, tmp_path):
        bags = write_record(tmp_path / "bags.jsonl", tags=["c"])
        seen = write_tags(tmp_path / "seen.txt", ["a", "b"])
        unseen = write_tags(tmp_path / "unseen.txt", ["c"])
        with pytest.raises(ValueError, match="img0.*c"):
            load_dataset(bags, seen, unseen, split="train")

    def test_test_split_allows_unseen_tags(self, tmp_path):
        bags = write_record(tmp_path / "bags.jsonl", tags=["c"])
        seen = write_tags(tmp_path / "seen.txt", ["a", "b"])
        unseen = write_tags(tmp_path / "unseen.txt", ["c"])
        ds = load_dataset(bags, seen, unseen, split="test")
        assert ds.bags[0].tags == {"c"}

    def test_shape_mismatch(self, tmp_path):
        bags = write_record(tmp_path / "bags.jsonl", data=list(range(11)))
        with pytest.raises(ValueError, match="4x3.*11 values"):
            load_bags(bags)

    def test_duplicate_ids(self, tmp_path):
        rec = json.dumps({"id": "x", "rows": 1, "cols": 1, "data": [1.0], "tags": ["a"]})
        path = tmp_path / "bags.jsonl"
        path.write_text(rec + "\n" + rec + "\n", encoding="utf-8")
        with pytest.raises(ValueError, match="duplicate bag id"):
            load_bags(path)

    def test_empty_training_tags_rejected(self, tmp_path):
        bags = write_record(tmp_path / "bags.jsonl", tags=[])
        seen = write_tags(tmp_path / "seen.txt", ["a"])
        unseen = write_tags(tmp_path / "unseen.txt", [])
        with pytest.raises(ValueError, match="empty tag set"):
            load_dataset(bags, seen, unseen, split="train")

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "bags.jsonl"
        path.write_text("{nope}\n", encoding="utf-8")
        with pytest.raises(ValueError, match="invalid record"):
            load_bags(path)

    def test_tag_list_duplicates(self, tmp_path):
        path = tmp_path / "t.txt"
        path.write_text("a\nb\na\n", encoding="utf-8")
        with pytest.raises(ValueError, match="duplicates"):
            load_tag_list(path)


class TestDatasetInvariants:
    def test_seen_unseen_disjoint(self):
        bag = Bag("b", np.zeros((2, 1)), ["a"])
        with pytest.raises(ValueError, match="overlap"):
            Dataset([bag], ["a"], ["a"], split="test")

    def test_mixed_feature_dims(self):
        bags = [Bag("b1", np.zeros((2, 1)), ["a"]), Bag("b2", np.zeros((3, 1)), ["a"])]
        with pytest.raises(ValueError, match="feature dimension"):
            Dataset(bags, ["a"], [], split="train")

    def test_bag_needs_column(self):
        with pytest.raises(ValueError, match="at least one instance"):
            Bag("b", np.zeros((3, 0)))


class TestSaveRoundTrip:
    def test_round_trip_synthetic_train(self, tmp_path):
        train, _, _, _ = generate_synthetic(SynthConfig(train_size=12, test_size=4, seed=5))
        save_dataset(train, tmp_path / "bags.jsonl")
        save_tag_list(train.seen_tags, tmp_path / "seen.txt")
        save_tag_list(train.unseen_tags, tmp_path / "unseen.txt")
        loaded = load_dataset(
            tmp_path / "bags.jsonl", tmp_path / "seen.txt", tmp_path / "unseen.txt",
            split="train",
        )
        assert loaded == train

    def test_round_trip_preserves_tag_order(self, tmp_path):
        _, test, _, _ = generate_synthetic(SynthConfig(train_size=4, test_size=4, seed=5))
        save_tag_list(test.seen_tags, tmp_path / "seen.txt")
        save_tag_list(test.unseen_tags, tmp_path / "unseen.txt")
        assert load_tag_list(tmp_path / "seen.txt") == test.seen_tags
        assert load_tag_list(tmp_path / "unseen.txt") == test.unseen_tags

    def test_empty_dataset_refused(self, tmp_path):
        train, _, _, _ = generate_synthetic(SynthConfig(train_size=2, test_size=2, seed=5))
        train.bags = []
        with pytest.raises(ValueError, match="empty dataset"):
            save_dataset(train, tmp_path / "bags.jsonl")

    def test_floats_round_trip_exactly(self, tmp_path):
        feats = np.array([[1.0 / 3.0, np.pi], [np.e, 2.0 ** -52]])
        ds = Dataset([Bag("b", feats, ["a"])], ["a"], [], split="train")
        save_dataset(ds, tmp_path / "bags.jsonl")
        loaded = load_bags(tmp_path / "bags.jsonl")
        assert np.array_equal(loaded[0].features, feats)


class TestGenerateSynthetic:
    def test_deterministic(self):
        cfg = SynthConfig(train_size=10, test_size=6, seed=99)
        a = generate_synthetic(cfg)
        b = generate_synthetic(cfg)
        assert a[0] == b[0]
        assert a[1] == b[1]
        assert np.array_equal(a[3], b[3])
        for tok in a[2].tokens:
            assert np.array_equal(a[2].vector(tok), b[2].vector(tok))

    def test_shapes_and_closure(self):
        cfg = SynthConfig(num_seen=10, num_unseen=5, embed_dim=16, feature_dim=32,
                          bag_size=8, train_size=200, test_size=50, seed=3)
        train, test, table, mixing = generate_synthetic(cfg)
        assert len(train) == 200
        assert all(bag.features.shape == (32, 8) for bag in train.bags)
        seen = set(train.seen_tags)
        assert all(bag.tags <= seen for bag in train.bags)
        assert mixing.shape == (32, 16)
        assert np.allclose(mixing.T @ mixing, np.eye(16), atol=1e-12)

    def test_noise_free_instances_hit_their_embedding(self):
        cfg = SynthConfig(noise_sigma=0.0, label_noise_rate=0.0,
                          train_size=20, test_size=10, seed=11)
        train, test, table, mixing = generate_synthetic(cfg)
        for ds in (train, test):
            for bag in ds.bags:
                decoded = table_scores(table, mixing, bag)
                for tag in bag.tags:
                    col = np.argmax(decoded[tag_row(table, tag)])
                    # the tag's own instance projects back onto its vector with score 1
                    assert abs(decoded[tag_row(table, tag), col] - 1.0) < 1e-9

    def test_mil_premise_by_nearest_embedding_decoding(self):
        cfg = SynthConfig(noise_sigma=0.0, label_noise_rate=0.0,
                          train_size=30, test_size=10, seed=2)
        train, _, table, mixing = generate_synthetic(cfg)
        tokens = table.tokens
        vocab = np.stack([table.vector(t) for t in tokens])
        for bag in train.bags:
            scores = vocab @ (mixing.T @ bag.features)  # tags x instances
            decoded = {tokens[int(scores[:, j].argmax())] for j in range(bag.num_instances)}
            assert bag.tags <= decoded, f"bag {bag.id} misses an instance for some tag"

    def test_unseen_vectors_live_in_seen_span(self):
        _, _, table, _ = generate_synthetic(SynthConfig(train_size=2, test_size=2, seed=8))
        seen = np.stack([table.vector(t) for t in table.tokens if t.startswith("seen")])
        for tok in table.tokens:
            if tok.startswith("unseen"):
                u = table.vector(tok)
                residual = u - seen.T @ (seen @ u)
                assert np.linalg.norm(residual) < 1e-9
                assert np.max(np.abs(seen @ u)) < 0.42

    def test_zero_shot_test_bed_composition(self):
        _, test, _, _ = generate_synthetic(SynthConfig(train_size=2, test_size=40, seed=4))
        unseen = set(test.unseen_tags)
        for bag in test.bags:
            assert len(bag.tags) == 1
            assert bag.tags <= unseen

    def test_mixed_test_composition(self):
        cfg = SynthConfig(train_size=2, test_size=60, test_include_seen=True, seed=4)
        _, test, _, _ = generate_synthetic(cfg)
        everything = set(test.seen_tags) | set(test.unseen_tags)
        assert all(bag.tags <= everything for bag in test.bags)
        assert any(bag.tags & set(test.seen_tags) for bag in test.bags)

    def test_label_noise_keeps_tags_valid(self):
        cfg = SynthConfig(label_noise_rate=1.0, train_size=40, test_size=5, seed=13)
        train, _, _, _ = generate_synthetic(cfg)
        seen = set(train.seen_tags)
        for bag in train.bags:
            assert bag.tags and bag.tags <= seen

    def test_infeasible_distractor_config(self):
        cfg = SynthConfig(distractor_max_cosine=0.01, train_size=2, test_size=2, seed=0)
        with pytest.raises(ValueError, match="infeasible"):
            generate_synthetic(cfg)


def tag_row(table, tag):
    return table.tokens.index(tag)


def table_scores(table, mixing, bag):
    vocab = np.stack([table.vector(t) for t in table.tokens])
    return vocab @ (mixing.T @ bag.features)


class TestSynthConfigValidation:
    @pytest.mark.parametrize(
        "kwargs, message",
        [
            (dict(num_seen=0), "num_seen"),
            (dict(feature_dim=8, embed_dim=16), "feature_dim"),
            (dict(num_seen=20, embed_dim=16), "orthonormal"),
            (dict(tags_per_image=(0, 3)), "tags_per_image"),
            (dict(tags_per_image=(3, 1)), "tags_per_image"),
            (dict(tags_per_image=(1, 11)), "seen pool"),
            (dict(distractors_per_bag=(5, 3)), "distractors_per_bag"),
            (dict(bag_size=4), "distractors per bag"),
            (dict(label_noise_rate=1.5), "probability"),
            (dict(noise_sigma=-0.1), "nonnegative"),
            (dict(distractor_max_cosine=0.0), "distractor_max_cosine"),
            (dict(unseen_max_cos_seen=0.1), "geometric"),
        ],
    )
    def test_rejects(self, kwargs, message):
        with pytest.raises(ValueError, match=message):
            SynthConfig(**kwargs).validate()

    def test_default_is_valid(self):
        SynthConfig().validate()
