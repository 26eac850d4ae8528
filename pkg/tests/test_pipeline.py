"""Pipeline: config handling, stage orchestration, artifact reproducibility."""
import json

import numpy as np
import pytest

from poolrank.classify import evaluate_splits
from poolrank.errors import DataError, UsageError
from poolrank.pipeline import (
    RunConfig,
    build_config,
    load_config_file,
    pool_manifest,
    run_pipeline,
)
from poolrank.retrieval import load_index
from poolrank.tensor_store import load_manifest
from poolrank.whitening import DEFAULT_EPSILON


def test_defaults_are_the_headline_configuration():
    config = RunConfig(manifest="m.json", out_dir="out")
    assert config.strategy == "avg"
    assert config.whiten == "pca"
    assert config.metric == "cosine"
    assert config.rotations == "all"
    assert config.vote_mode == "argmax"
    assert config.epsilon == DEFAULT_EPSILON
    assert (config.epochs, config.lam, config.lr0, config.seed) == (100, 1e-5, 0.2, 42)
    assert config.threads is None


def test_validate_rejects_before_touching_files(tmp_path):
    missing = tmp_path / "never_created"
    bad = {
        "strategy": "median",
        "whiten": "zca",
        "metric": "manhattan",
        "rotations": "some",
        "vote_mode": "borda",
        "epsilon": 0.0,
        "epochs": 0,
    }
    for field, value in bad.items():
        config = RunConfig(manifest=str(missing / "m.json"), out_dir=str(missing), **{field: value})
        with pytest.raises(UsageError):
            run_pipeline(config)
        assert not missing.exists()


def test_config_file_flat_and_sectioned_keys(tmp_path):
    p = tmp_path / "run.toml"
    p.write_text(
        'manifest = "m.json"\n'
        "[run]\n"
        'out = "outdir"\n'
        'strategy = "max"\n'
        "lambda = 0.5\n"
        "lr = 0.1\n"
        "epochs = 7\n",
        encoding="utf-8",
    )
    values = load_config_file(p)
    assert values == {
        "manifest": "m.json",
        "out_dir": "outdir",
        "strategy": "max",
        "lam": 0.5,
        "lr0": 0.1,
        "epochs": 7,
    }


def test_config_file_rejects_unknown_key_and_bad_toml(tmp_path):
    p = tmp_path / "run.toml"
    p.write_text('wat = 3\n', encoding="utf-8")
    with pytest.raises(UsageError, match="wat"):
        load_config_file(p)
    p.write_text("not = [toml", encoding="utf-8")
    with pytest.raises(UsageError):
        load_config_file(p)
    with pytest.raises(UsageError):
        load_config_file(tmp_path / "missing.toml")


def test_build_config_overrides_file_values(tmp_path):
    p = tmp_path / "run.toml"
    p.write_text('manifest = "m.json"\nout = "o"\nstrategy = "max"\nseed = 9\n', encoding="utf-8")
    config = build_config(p, strategy="hybrid", epochs=None)
    assert config.strategy == "hybrid"  # flag beats file
    assert config.seed == 9  # file survives a None override
    assert config.epochs == 100
    with pytest.raises(UsageError):
        build_config(None, out_dir="o")  # manifest is mandatory
    with pytest.raises(UsageError):
        build_config(None, manifest="m.json")


def test_retrieval_run_produces_artifacts_and_perfect_map(retrieval_corpus, tmp_path):
    manifest = retrieval_corpus()
    out = tmp_path / "run_out"
    report = run_pipeline(RunConfig(manifest=str(manifest), out_dir=str(out)))
    assert report["mode"] == "retrieval"
    assert [s["stage"] for s in report["stages"]] == [
        "validate",
        "pool",
        "fit-whitener",
        "index",
        "eval-map",
    ]
    assert report["metrics"]["map"] == 1.0
    assert report["metrics"]["n_queries"] == 3
    assert report["config"]["strategy"] == "avg"
    for key in ("descriptors", "whitener", "index", "per_query_ap", "metrics"):
        assert key in report["artifacts"]
    assert (out / "whitener.pwm").is_file()
    assert (out / "index.pri").is_file()
    assert (out / "run_report.json").is_file()
    lines = (out / "per_query_ap.tsv").read_text(encoding="utf-8").splitlines()
    assert lines[0] == "query_id\tap"
    assert len(lines) == 4
    assert json.loads((out / "metrics.json").read_text(encoding="utf-8")) == report["metrics"]


def test_rerun_is_byte_identical(retrieval_corpus, tmp_path):
    manifest = retrieval_corpus()
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        run_pipeline(RunConfig(manifest=str(manifest), out_dir=str(out)))
        outs.append(out)
    for artifact in ("metrics.json", "per_query_ap.tsv", "index.pri", "whitener.pwm"):
        assert (outs[0] / artifact).read_bytes() == (outs[1] / artifact).read_bytes()


def test_rot0_policy_drops_rotated_reference_views(retrieval_corpus, tmp_path):
    manifest = retrieval_corpus()
    out = tmp_path / "r0"
    run_pipeline(RunConfig(manifest=str(manifest), out_dir=str(out), rotations="rot0"))
    index = load_index(out / "index.pri")
    assert all(e.views == ("rot0",) for e in index.entries)


def test_whiten_none_skips_whitener_artifact(retrieval_corpus, tmp_path):
    manifest = retrieval_corpus()
    out = tmp_path / "nw"
    report = run_pipeline(RunConfig(manifest=str(manifest), out_dir=str(out), whiten="none"))
    assert "whitener" not in report["artifacts"]
    assert not (out / "whitener.pwm").exists()
    assert report["metrics"]["map"] == 1.0


def test_stage_failures_name_the_stage(retrieval_corpus, tmp_path):
    manifest = retrieval_corpus()
    victim = next((manifest.parent / "tensors").glob("*.fms"))
    victim.unlink()
    with pytest.raises(DataError) as exc:
        run_pipeline(RunConfig(manifest=str(manifest), out_dir=str(tmp_path / "x")))
    assert str(exc.value).startswith("stage validate: ")
    assert exc.value.code == "dangling_path"


def test_classification_run_matches_split_protocol(classification_corpus, tmp_path):
    manifest = classification_corpus()
    out = tmp_path / "cls_out"
    report = run_pipeline(RunConfig(manifest=str(manifest), out_dir=str(out)))
    assert report["mode"] == "classification"
    assert [s["stage"] for s in report["stages"]] == [
        "validate",
        "pool",
        "fit-whitener",
        "train",
        "eval-classify",
    ]
    metrics = report["metrics"]
    assert metrics["n_classes"] == 3
    assert metrics["n_test_images"] == 9
    assert (out / "clf.plc").is_file()
    lines = (out / "per_class_accuracy.tsv").read_text(encoding="utf-8").splitlines()
    assert lines[0] == "split\tclass\taccuracy"
    assert len(lines) == 4
    assert all(line.startswith("split1\t") for line in lines[1:])
    protocol = evaluate_splits([load_manifest(manifest)])
    assert metrics["mean_per_class_accuracy"] == pytest.approx(
        protocol.mean_accuracy, abs=1e-9
    )


def test_pool_manifest_order_and_view_tags(retrieval_corpus):
    manifest = load_manifest(retrieval_corpus(n_groups=1, dupes=1, distractors=0))
    pairs = pool_manifest(manifest, "avg")
    keys = [(e.role, d.image_id, d.view) for e, d in pairs]
    assert keys == [
        ("query", "img000", "rot0"),
        ("reference", "img001", "rot0"),
        ("reference", "img001", "rot90"),
        ("reference", "img001", "rot180"),
        ("reference", "img001", "rot270"),
    ]
    assert all(np.isfinite(d.values).all() for _, d in pairs)
