import hashlib
import json
import shutil
from pathlib import Path

import numpy as np
import pytest
from matplotlib import font_manager

from glyphsim.cli import load_run_config, main

from synthcorpus import ScriptSpec, write_corpus


def tree_digest(root: Path) -> dict:
    """Relative path -> sha256 of every file under root."""
    out = {}
    for path in sorted(root.rglob("*")):
        if path.is_file():
            out[str(path.relative_to(root))] = hashlib.sha256(path.read_bytes()).hexdigest()
    return out


@pytest.fixture(scope="module")
def pipeline_corpus(tmp_path_factory):
    """Corpus with all three splits plus manifest, small enough for tiny_cnn."""
    root = tmp_path_factory.mktemp("pipeline") / "corpus"
    specs = [
        ScriptSpec("inv_a", 6, 3),
        ScriptSpec("inv_b", 6, 3, style="angular"),
        ScriptSpec("hist_a", 5, 4),
        ScriptSpec("hist_b", 5, 4, parent="hist_a", deformation=0.3),
        ScriptSpec("eval_a", 5, 3),
        ScriptSpec("eval_b", 5, 3, parent="eval_a", deformation=0.3),
        ScriptSpec("eval_c", 5, 3, style="angular"),
    ]
    write_corpus(root, specs, seed=31)
    manifest = root.parent / "manifest.tsv"
    manifest.write_text(
        "\n".join(
            [
                "inv_a\tsupervised_invented",
                "inv_b\tsupervised_invented",
                "hist_a\tunsupervised_historical",
                "hist_b\tunsupervised_historical",
                "eval_a\tevaluation",
                "eval_b\tevaluation",
                "eval_c\tevaluation",
            ]
        )
        + "\n",
        encoding="utf-8",
    )
    return root, manifest


@pytest.fixture(scope="module")
def tiny_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "config.json"
    path.write_text(
        json.dumps(
            {
                "encoder": {"architecture": "tiny_cnn", "embedding_dim": 16, "seed": 0},
                "stage1": {
                    "batch_size": 8,
                    "base_lr": 3e-3,
                    "warmup_epochs": 1,
                    "epochs": 3,
                    "temperature": 0.1,
                    "seed": 0,
                    "val_episodes": 5,
                },
                "stage2": {
                    "batch_size": 6,
                    "base_lr": 1e-3,
                    "warmup_epochs": 1,
                    "epochs": 2,
                    "ema_decay": 0.99,
                    "predictor_hidden": 32,
                    "seed": 0,
                },
                "eval": {"n_way": 10, "episodes": 40, "ndcg_k": 10, "seed": 0},
                "augment": {"augmentations_per_instance": 2},
            }
        ),
        encoding="utf-8",
    )
    return path


def run(*argv):
    return main([str(a) for a in argv])


class TestRunConfig:
    def test_defaults_without_file(self):
        cfg = load_run_config(None)
        assert cfg.stage1.batch_size == 256
        assert cfg.eval.episodes == 400

    def test_seed_override_applies_everywhere(self, tiny_config):
        cfg = load_run_config(str(tiny_config), seed=777)
        assert cfg.encoder.seed == 777
        assert cfg.stage1.seed == 777
        assert cfg.stage2.seed == 777
        assert cfg.eval.seed == 777

    def test_unknown_field_rejected(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text('{"stage1": {"velocity": 3}}', encoding="utf-8")
        with pytest.raises(ValueError, match="velocity"):
            load_run_config(str(bad))

    def test_hash_stable_and_sensitive(self, tiny_config):
        a = load_run_config(str(tiny_config))
        b = load_run_config(str(tiny_config))
        c = load_run_config(str(tiny_config), seed=9)
        assert a.hash == b.hash
        assert a.hash != c.hash


class TestPrepare:
    def test_materializes_three_splits(self, pipeline_corpus, tiny_config, tmp_path):
        root, manifest = pipeline_corpus
        out = tmp_path / "prepared"
        code = run("--config", tiny_config, "prepare", "--data-root", root, "--manifest", manifest, "--out", out)
        assert code == 0
        for split in ("supervised_invented", "unsupervised_historical", "evaluation"):
            assert (out / split).is_dir()
        assert (out / "manifest.tsv").read_text() == manifest.read_text()
        meta = json.loads((out / "meta.json").read_text())
        assert meta["counts"]["supervised_invented"]["glyphs"] == 12 * 3 * 3  # originals x (1+2 augs)

    def test_idempotent_rerun(self, pipeline_corpus, tiny_config, tmp_path):
        root, manifest = pipeline_corpus
        out = tmp_path / "prepared"
        run("--config", tiny_config, "prepare", "--data-root", root, "--manifest", manifest, "--out", out)
        first = tree_digest(out)
        run("--config", tiny_config, "prepare", "--data-root", root, "--manifest", manifest, "--out", out)
        assert tree_digest(out) == first

    def test_bad_manifest_nonzero_exit(self, pipeline_corpus, tmp_path, capsys):
        root, _ = pipeline_corpus
        manifest = tmp_path / "manifest.tsv"
        manifest.write_text("ghost_script\tevaluation\n", encoding="utf-8")
        code = run("prepare", "--data-root", root, "--manifest", manifest, "--out", tmp_path / "x")
        assert code != 0
        assert "ghost_script" in capsys.readouterr().err


class TestRenderUnicodeCommand:
    def test_renders_and_reports(self, tmp_path, capsys):
        fonts = tmp_path / "fonts"
        fonts.mkdir()
        shutil.copyfile(font_manager.findfont("DejaVu Sans"), fonts / "f.ttf")
        ranges = tmp_path / "ranges.tsv"
        ranges.write_text("Greek\t0391-03A9\tf.ttf\n", encoding="utf-8")
        out = tmp_path / "rendered"
        assert run("render-unicode", "--ranges", ranges, "--fonts", fonts, "--out", out) == 0
        assert (out / "omissions.json").exists()
        assert "24 glyphs" in capsys.readouterr().out


@pytest.fixture(scope="module")
def prepared(pipeline_corpus, tiny_config, tmp_path_factory):
    root, manifest = pipeline_corpus
    out = tmp_path_factory.mktemp("work") / "prepared"
    assert run("--config", tiny_config, "prepare", "--data-root", root, "--manifest", manifest, "--out", out) == 0
    return out


@pytest.fixture(scope="module")
def teacher_dir(prepared, tiny_config, tmp_path_factory):
    out = tmp_path_factory.mktemp("work") / "teacher"
    code = run(
        "--config", tiny_config, "train-teacher",
        "--data", prepared / "supervised_invented", "--out", out,
    )
    assert code == 0
    return out


class TestTrainCommands:
    def test_teacher_artifacts(self, teacher_dir):
        assert (teacher_dir / "teacher.ckpt").exists()
        assert (teacher_dir / "stage1_log.csv").exists()
        summary = json.loads((teacher_dir / "stage1_summary.json").read_text())
        assert summary["stage"] == "stage1"

    def test_student_teacher_init(self, prepared, teacher_dir, tiny_config, tmp_path):
        out = tmp_path / "student"
        code = run(
            "--config", tiny_config, "train-student",
            "--data", prepared, "--init", teacher_dir / "teacher.ckpt", "--out", out,
        )
        assert code == 0
        assert (out / "student.ckpt").exists() and (out / "target.ckpt").exists()
        summary = json.loads((out / "stage2_summary.json").read_text())
        assert summary["init_mode"] == "teacher"

    def test_student_random_init_uses_combined_pool(self, prepared, tiny_config, tmp_path):
        out = tmp_path / "scratch"
        code = run(
            "--config", tiny_config, "train-student",
            "--data", prepared, "--init", "random", "--out", out,
        )
        assert code == 0
        log = (out / "stage2_log.csv").read_text().splitlines()
        # combined pool has 12 + 10 = 22 classes; batch 6 -> 4 steps/epoch
        assert len(log) - 1 == 2 * 4
        summary = json.loads((out / "stage2_summary.json").read_text())
        assert summary["init_mode"] == "random"

    def test_missing_checkpoint_nonzero_exit(self, prepared, tiny_config, tmp_path):
        code = run(
            "--config", tiny_config, "train-student",
            "--data", prepared, "--init", tmp_path / "nope.ckpt", "--out", tmp_path / "x",
        )
        assert code != 0


class TestEmbedCommand:
    def test_stores_round_trip(self, prepared, teacher_dir, tiny_config, tmp_path):
        from glyphsim.similarity import read_embedding_store

        out = tmp_path / "emb"
        code = run(
            "--config", tiny_config, "embed",
            "--checkpoint", teacher_dir / "teacher.ckpt",
            "--data", prepared / "evaluation", "--out", out,
        )
        assert code == 0
        stores = sorted(out.glob("*.emb"))
        assert [s.stem for s in stores] == ["eval_a", "eval_b", "eval_c"]
        ss = read_embedding_store(stores[0])
        assert np.allclose(np.linalg.norm(ss.embeddings, axis=1), 1.0, atol=1e-5)
        assert (out / "embeddings.csv").exists()

    def test_identical_checkpoints_identical_stores(self, prepared, teacher_dir, tiny_config, tmp_path):
        out1, out2 = tmp_path / "e1", tmp_path / "e2"
        for out in (out1, out2):
            run(
                "--config", tiny_config, "embed",
                "--checkpoint", teacher_dir / "teacher.ckpt",
                "--data", prepared / "evaluation", "--out", out,
            )
        assert tree_digest(out1) == tree_digest(out2)

    def test_dim_mismatch_rejected(self, prepared, teacher_dir, tiny_config, tmp_path):
        code = run(
            "--config", tiny_config, "embed",
            "--checkpoint", teacher_dir / "teacher.ckpt",
            "--data", prepared / "evaluation", "--out", tmp_path / "x",
            "--expect-dim", "999",
        )
        assert code != 0


class TestEvalCommand:
    @pytest.fixture(scope="class")
    def levels(self, tmp_path_factory):
        path = tmp_path_factory.mktemp("levels") / "levels.tsv"
        path.write_text("eval_a\teval_b\t1\n", encoding="utf-8")
        return path

    def test_full_report(self, prepared, teacher_dir, tiny_config, levels, tmp_path, capsys):
        out = tmp_path / "eval"
        code = run(
            "--config", tiny_config, "eval",
            "--checkpoint", teacher_dir / "teacher.ckpt",
            "--data", prepared / "evaluation",
            "--levels", levels,
            "--separability", "eval_a,eval_b,eval_c",
            "--out", out,
        )
        assert code == 0
        report = json.loads((out / "report_teacher.json").read_text())
        for key in ("n20r1", "n20r5", "ndcg10", "spearman_rho", "separability", "config_hash", "seed"):
            assert key in report
        assert report["n_way"] == 10
        assert report["separability"]["eval_a|eval_b|eval_c"] > 0
        assert (out / "report.txt").exists()
        assert (out / "distances_teacher.csv").exists()

    def test_missing_levels_glyph_metrics_only(self, prepared, teacher_dir, tiny_config, tmp_path, capsys):
        out = tmp_path / "eval2"
        code = run(
            "--config", tiny_config, "eval",
            "--checkpoint", teacher_dir / "teacher.ckpt",
            "--data", prepared / "evaluation",
            "--out", out,
        )
        assert code == 0
        assert "skipped" in capsys.readouterr().err
        report = json.loads((out / "report_teacher.json").read_text())
        assert report["n20r1"] is not None
        assert report["ndcg10"] is None

    def test_random_embedding_checkpoint_near_chance(self, prepared, tiny_config, tmp_path):
        from glyphsim.checkpoint import save_checkpoint
        from glyphsim.encoder import EncoderConfig, init_encoder

        ckpt = tmp_path / "random.ckpt"
        save_checkpoint(
            ckpt, init_encoder(EncoderConfig(architecture="tiny_cnn", embedding_dim=16, seed=42))
        )
        out = tmp_path / "eval3"
        code = run(
            "--config", tiny_config, "eval",
            "--checkpoint", ckpt, "--data", prepared / "evaluation", "--out", out,
        )
        assert code == 0

    def test_report_merge_command(self, prepared, teacher_dir, tiny_config, tmp_path, capsys):
        out = tmp_path / "eval4"
        run(
            "--config", tiny_config, "eval",
            "--checkpoint", teacher_dir / "teacher.ckpt",
            "--data", prepared / "evaluation", "--out", out,
        )
        capsys.readouterr()
        code = run("report", "--inputs", out / "report_teacher.json")
        assert code == 0
        assert "N20R1" in capsys.readouterr().out


class TestDeterminism:
    def test_two_tiny_pipeline_runs_bit_identical(self, pipeline_corpus, tiny_config, tmp_path):
        root, manifest = pipeline_corpus
        digests = []
        for run_dir in (tmp_path / "runA", tmp_path / "runB"):
            prepared = run_dir / "prepared"
            assert run(
                "--config", tiny_config, "--threads", "1",
                "prepare", "--data-root", root, "--manifest", manifest, "--out", prepared,
            ) == 0
            teacher = run_dir / "teacher"
            assert run(
                "--config", tiny_config, "--threads", "1",
                "train-teacher", "--data", prepared / "supervised_invented", "--out", teacher,
            ) == 0
            student = run_dir / "student"
            assert run(
                "--config", tiny_config, "--threads", "1",
                "train-student", "--data", prepared, "--init", teacher / "teacher.ckpt",
                "--out", student,
            ) == 0
            emb = run_dir / "emb"
            assert run(
                "--config", tiny_config, "--threads", "1",
                "embed", "--checkpoint", student / "student.ckpt",
                "--data", prepared / "evaluation", "--out", emb,
            ) == 0
            digest = {}
            digest.update({f"prep/{k}": v for k, v in tree_digest(prepared).items()})
            digest["teacher.ckpt"] = tree_digest(teacher)["teacher.ckpt"]
            digest["student.ckpt"] = tree_digest(student)["student.ckpt"]
            digest["target.ckpt"] = tree_digest(student)["target.ckpt"]
            digest.update({f"emb/{k}": v for k, v in tree_digest(emb).items()})
            digests.append(digest)
        assert digests[0] == digests[1]
