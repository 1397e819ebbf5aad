import numpy as np
import pytest

from glyphsim.dataset import (
    Dataset,
    DatasetError,
    SimilarityLevelTable,
    load_omniglot,
    load_tree,
    merge_datasets,
    parse_split_manifest,
    sample_class_pairs,
    sample_supervised_batch,
    split_dataset,
    write_dataset,
)
from glyphsim.glyphs import CANVAS, GlyphError, GlyphImage, load_glyph_png, save_glyph_png

from synthcorpus import ScriptSpec, make_dataset, write_corpus


def manifest_file(tmp_path, lines):
    path = tmp_path / "manifest.tsv"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


class TestGlyphIO:
    def test_png_round_trip(self, tmp_path, toy_dataset):
        g = toy_dataset.glyphs[0]
        path = tmp_path / "glyph.png"
        save_glyph_png(g.pixels, path)
        back = load_glyph_png(path)
        assert np.array_equal(back, g.pixels)

    def test_rejects_wrong_shape(self):
        with pytest.raises(GlyphError, match="105x105"):
            GlyphImage(
                pixels=np.ones((50, 50), dtype=np.uint8),
                class_id=0,
                script_id="s",
                instance_id=0,
            )

    def test_rejects_empty_raster(self):
        with pytest.raises(GlyphError, match="no ink"):
            GlyphImage(
                pixels=np.zeros((CANVAS, CANVAS), dtype=np.uint8),
                class_id=0,
                script_id="s",
                instance_id=0,
            )

    def test_unreadable_file(self, tmp_path):
        bad = tmp_path / "bad.png"
        bad.write_bytes(b"not a png")
        with pytest.raises(GlyphError, match="unreadable"):
            load_glyph_png(bad)


class TestLoadCorpus:
    def test_toy_corpus_counts(self, corpus_root, tmp_path):
        manifest = manifest_file(
            tmp_path, ["first\tsupervised_invented", "second\tevaluation"]
        )
        ds = load_omniglot(corpus_root, manifest)
        assert len(ds.glyphs) == 120  # 2 scripts x 3 classes x 20 instances
        assert ds.class_count == 6
        assert ds.script_ids == ["first", "second"]

    def test_class_ids_lexicographic_and_manifest_independent(self, corpus_root, tmp_path):
        m1 = manifest_file(tmp_path, ["first\tsupervised_invented", "second\tevaluation"])
        ds1 = load_omniglot(corpus_root, m1)
        m2 = manifest_file(tmp_path, ["second\tsupervised_invented", "first\tevaluation"])
        ds2 = load_omniglot(corpus_root, m2)
        key1 = {(g.script_id, g.char_name, g.instance_id): g.class_id for g in ds1.glyphs}
        key2 = {(g.script_id, g.char_name, g.instance_id): g.class_id for g in ds2.glyphs}
        assert key1 == key2

    def test_script_in_manifest_missing_from_root(self, corpus_root, tmp_path):
        manifest = manifest_file(
            tmp_path,
            ["first\tsupervised_invented", "second\tevaluation", "ghost\tevaluation"],
        )
        with pytest.raises(DatasetError, match="missing from root"):
            load_omniglot(corpus_root, manifest)

    def test_empty_manifest_means_unassigned_scripts(self, corpus_root, tmp_path):
        manifest = manifest_file(tmp_path, [""])
        with pytest.raises(DatasetError, match="script assigned to no split"):
            load_omniglot(corpus_root, manifest)

    def test_script_in_two_splits(self, corpus_root, tmp_path):
        manifest = manifest_file(
            tmp_path,
            ["first\tsupervised_invented", "first\tevaluation", "second\tevaluation"],
        )
        with pytest.raises(DatasetError, match="two splits"):
            load_omniglot(corpus_root, manifest)

    def test_unknown_split_name(self, corpus_root, tmp_path):
        manifest = manifest_file(tmp_path, ["first\ttraining", "second\tevaluation"])
        with pytest.raises(DatasetError, match="unknown split"):
            parse_split_manifest(manifest)

    def test_split_projection_disjoint(self, corpus_root, tmp_path):
        manifest = manifest_file(
            tmp_path, ["first\tsupervised_invented", "second\tevaluation"]
        )
        ds = load_omniglot(corpus_root, manifest)
        sup = split_dataset(ds, "supervised_invented")
        ev = split_dataset(ds, "evaluation")
        assert set(sup.script_ids) == {"first"}
        assert set(ev.script_ids) == {"second"}
        assert not set(sup.script_ids) & set(ev.script_ids)
        assert split_dataset(ds, "unsupervised_historical").class_count == 0

    def test_write_and_reload_round_trip(self, tmp_path, toy_dataset):
        out = tmp_path / "tree"
        write_dataset(toy_dataset, out)
        back = load_tree(out)
        assert len(back.glyphs) == len(toy_dataset.glyphs)
        orig = {(g.script_id, g.char_name, g.instance_id): g.pixels for g in toy_dataset.glyphs}
        for g in back.glyphs:
            assert np.array_equal(g.pixels, orig[(g.script_id, g.char_name, g.instance_id)])

    def test_provenance_survives_round_trip(self, tmp_path, toy_dataset):
        from glyphsim.augment import AugmentationParams, generate_augmented_set

        aug = generate_augmented_set(toy_dataset, AugmentationParams(), seed=2)
        out = tmp_path / "tree"
        write_dataset(aug, out)
        back = load_tree(out)
        n_aug = sum(1 for g in back.glyphs if g.is_augmented)
        assert n_aug == 8 * len(toy_dataset.glyphs)

    def test_class_to_script_unique(self):
        g1 = GlyphImage(
            pixels=np.eye(CANVAS, dtype=np.uint8), class_id=0, script_id="a", instance_id=0
        )
        g2 = GlyphImage(
            pixels=np.eye(CANVAS, dtype=np.uint8), class_id=0, script_id="b", instance_id=1
        )
        with pytest.raises(DatasetError, match="mapped to scripts"):
            Dataset([g1, g2])


class TestMergeDatasets:
    def test_rekeys_classes(self):
        a = make_dataset([ScriptSpec("aa", 2, 2)], seed=1)
        b = make_dataset([ScriptSpec("bb", 3, 2)], seed=2)
        merged = merge_datasets([a, b])
        assert merged.class_count == 5
        assert merged.script_ids == ["aa", "bb"]

    def test_rejects_script_overlap(self):
        a = make_dataset([ScriptSpec("aa", 2, 2)], seed=1)
        with pytest.raises(DatasetError, match="two merged datasets"):
            merge_datasets([a, a])


class TestSupervisedBatch:
    def test_every_label_appears_twice(self, two_script_dataset):
        images, labels = sample_supervised_batch(
            two_script_dataset, 128, np.random.default_rng(0)
        )
        assert images.shape == (128, CANVAS, CANVAS)
        counts = np.bincount(labels)
        assert all(c >= 2 for c in counts[counts > 0])

    def test_b4_two_classes(self):
        ds = make_dataset([ScriptSpec("s", 2, 5)], seed=4)
        images, labels = sample_supervised_batch(ds, 4, np.random.default_rng(1))
        assert sorted(np.bincount(labels)[np.bincount(labels) > 0].tolist()) == [2, 2]

    def test_singleton_classes_rejected(self):
        ds = make_dataset([ScriptSpec("s", 3, 1)], seed=5)
        with pytest.raises(DatasetError, match="2 instances"):
            sample_supervised_batch(ds, 8, np.random.default_rng(0))

    def test_small_batch_rejected(self, toy_dataset):
        with pytest.raises(DatasetError, match=">= 4"):
            sample_supervised_batch(toy_dataset, 3, np.random.default_rng(0))

    def test_reproducible_for_fixed_seed(self, two_script_dataset):
        a = sample_supervised_batch(two_script_dataset, 16, np.random.default_rng(7))
        b = sample_supervised_batch(two_script_dataset, 16, np.random.default_rng(7))
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


class TestClassPairs:
    def test_pair_uses_both_instances_of_two_instance_class(self):
        ds = make_dataset([ScriptSpec("s", 1, 2)], seed=6)
        pairs = sample_class_pairs(ds, 1, np.random.default_rng(0))
        assert len(pairs) == 1
        v1, v2 = pairs[0]
        assert {v1.source_instance_id, v2.source_instance_id} == {0, 1}

    def test_zero_count_empty(self, toy_dataset):
        assert sample_class_pairs(toy_dataset, 0, np.random.default_rng(0)) == []

    def test_fixed_seed_reproducible(self, toy_dataset):
        a = sample_class_pairs(toy_dataset, 3, np.random.default_rng(3))
        b = sample_class_pairs(toy_dataset, 3, np.random.default_rng(3))
        for (a1, a2), (b1, b2) in zip(a, b):
            assert np.array_equal(a1.pixels, b1.pixels)
            assert np.array_equal(a2.pixels, b2.pixels)

    def test_views_are_distinct_genuine_instances(self, toy_dataset):
        pairs = sample_class_pairs(toy_dataset, 5, np.random.default_rng(1))
        assert len(pairs) == 5
        for v1, v2 in pairs:
            assert v1.class_id == v2.class_id
            assert v1.source_instance_id != v2.source_instance_id

    def test_singleton_class_excluded_with_warning(self, caplog):
        import logging

        ds = make_dataset([ScriptSpec("s", 3, 2)], seed=8)
        singleton = [g for g in ds.glyphs if not (g.class_id == 0 and g.instance_id == 1)]
        ds2 = Dataset(singleton)
        with caplog.at_level(logging.WARNING, logger="glyphsim.dataset"):
            pairs = sample_class_pairs(ds2, 3, np.random.default_rng(0))
        assert len(pairs) == 2
        assert any("single-instance" in r.message for r in caplog.records)


class TestSimilarityLevelTable:
    def test_parse_and_symmetry(self, tmp_path):
        path = tmp_path / "levels.tsv"
        path.write_text("alpha\tbeta\t1\nbeta\tgamma\t3\n", encoding="utf-8")
        table = SimilarityLevelTable.from_file(path)
        assert table.level("alpha", "beta") == 1
        assert table.level("beta", "alpha") == 1
        assert table.level("beta", "gamma") == 3
        assert table.level("alpha", "gamma") == 4  # unlisted -> unrelated

    def test_rejects_self_pairs(self):
        table = SimilarityLevelTable()
        with pytest.raises(DatasetError, match="self-pair"):
            table.set_level("x", "x", 1)

    def test_rejects_bad_level(self):
        table = SimilarityLevelTable()
        with pytest.raises(DatasetError, match="level must be"):
            table.set_level("x", "y", 4)

    def test_conflicting_duplicate_rejected(self):
        table = SimilarityLevelTable()
        table.set_level("x", "y", 1)
        table.set_level("y", "x", 1)  # same value is fine
        with pytest.raises(DatasetError, match="conflicting"):
            table.set_level("x", "y", 2)

    def test_self_level_query_rejected(self):
        table = SimilarityLevelTable()
        with pytest.raises(DatasetError, match="undefined"):
            table.level("x", "x")
