"""Command line: exit codes, output formats, and stage-command composition."""
import json
import re

import pytest

from poolrank.cli import main
from poolrank.errors import UsageError
from poolrank.util import THREADS_ENV, resolve_threads

DIST_LINE = re.compile(r"^\S+\t\d+\t\S+\t\d+\.\d{10}$")


def run_cli(*argv):
    return main(list(argv))


def test_validate_ok_and_exit_zero(retrieval_corpus, capsys):
    manifest = retrieval_corpus()
    assert run_cli("validate", "--manifest", str(manifest)) == 0
    out = capsys.readouterr().out
    assert out.strip().endswith("result: OK")


def test_validate_broken_corpus_exit_three(retrieval_corpus, capsys):
    manifest = retrieval_corpus()
    victim = next((manifest.parent / "tensors").glob("*.fms"))
    victim.write_bytes(b"FMS9 garbage")
    assert run_cli("validate", "--manifest", str(manifest)) == 3
    assert "result: INVALID" in capsys.readouterr().out


def test_usage_errors_exit_two(tmp_path):
    with pytest.raises(SystemExit) as exc:
        run_cli("pool", "--manifest", "m.json", "--strategy", "median", "--out", str(tmp_path))
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        run_cli("pool")  # required flags missing
    assert exc.value.code == 2


def test_pool_writes_role_directories(retrieval_corpus, tmp_path, capsys):
    manifest = retrieval_corpus(n_groups=2, dupes=1, distractors=1)
    out = tmp_path / "desc"
    assert run_cli("pool", "--manifest", str(manifest), "--strategy", "avg", "--out", str(out)) == 0
    assert "pooled" in capsys.readouterr().out
    query_files = sorted(p.name for p in (out / "query").glob("*.fms"))
    ref_files = sorted(p.name for p in (out / "reference").glob("*.fms"))
    assert len(query_files) == 2  # rot0 only
    assert len(ref_files) == 3 * 4  # every reference carries four rotation views
    assert all("__rot" in name for name in query_files + ref_files)


def stage_retrieval(manifest, root):
    """pool + fit + index via the CLI; returns (desc_dir, model, index) paths."""
    desc = root / "desc"
    model = root / "white.pwm"
    index = root / "index.pri"
    assert main(["pool", "--manifest", str(manifest), "--strategy", "avg", "--out", str(desc)]) == 0
    assert (
        main(
            [
                "fit-whitener",
                "--descriptors",
                str(desc / "reference"),
                "--pca",
                "--out",
                str(model),
            ]
        )
        == 0
    )
    assert (
        main(
            [
                "index",
                "--descriptors",
                str(desc / "reference"),
                "--manifest",
                str(manifest),
                "--model",
                str(model),
                "--out",
                str(index),
            ]
        )
        == 0
    )
    return desc, model, index


def test_stage_commands_compose_to_perfect_map(retrieval_corpus, tmp_path, capsys):
    manifest = retrieval_corpus()
    desc, model, index = stage_retrieval(manifest, tmp_path)
    capsys.readouterr()
    ap_out = tmp_path / "ap.tsv"
    code = run_cli(
        "eval-map",
        "--index",
        str(index),
        "--queries",
        str(desc / "query"),
        "--manifest",
        str(manifest),
        "--model",
        str(model),
        "--out",
        str(ap_out),
    )
    assert code == 0
    out_lines = capsys.readouterr().out.strip().splitlines()
    assert out_lines[0] == "query_id\tap"
    assert out_lines[-1] == f"mAP\t{1.0:.10f}"
    assert ap_out.read_text(encoding="utf-8").splitlines() == out_lines[:-1]


def test_stage_commands_match_run_pipeline(retrieval_corpus, tmp_path, capsys):
    manifest = retrieval_corpus(n_groups=4, dupes=2, distractors=3, sigma=0.4)
    desc, model, index = stage_retrieval(manifest, tmp_path)
    capsys.readouterr()
    assert (
        run_cli(
            "eval-map",
            "--index",
            str(index),
            "--queries",
            str(desc / "query"),
            "--manifest",
            str(manifest),
            "--model",
            str(model),
        )
        == 0
    )
    staged_map = float(capsys.readouterr().out.strip().splitlines()[-1].split("\t")[1])
    out = tmp_path / "pipe"
    assert run_cli("run", "--manifest", str(manifest), "--out", str(out)) == 0
    capsys.readouterr()
    metrics = json.loads((out / "metrics.json").read_text(encoding="utf-8"))
    assert staged_map == pytest.approx(metrics["map"], abs=1e-9)


def test_query_topk_and_distance_format(retrieval_corpus, tmp_path, capsys):
    manifest = retrieval_corpus()
    desc, model, index = stage_retrieval(manifest, tmp_path)
    capsys.readouterr()
    code = run_cli(
        "query",
        "--index",
        str(index),
        "--query-descriptors",
        str(desc / "query"),
        "--model",
        str(model),
        "--topk",
        "2",
    )
    assert code == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "query_id\trank\timage_id\tdistance"
    assert len(lines) == 1 + 3 * 2  # three queries, two rows each
    assert all(DIST_LINE.match(line) for line in lines[1:])


def test_unwhitened_queries_against_whitened_index_rejected(retrieval_corpus, tmp_path, capsys):
    manifest = retrieval_corpus()
    desc, model, index = stage_retrieval(manifest, tmp_path)
    capsys.readouterr()
    code = run_cli(
        "query", "--index", str(index), "--query-descriptors", str(desc / "query")
    )
    assert code == 3
    assert "poolrank: error:" in capsys.readouterr().err


def test_run_config_file_with_flag_override(retrieval_corpus, tmp_path, capsys):
    manifest = retrieval_corpus()
    config = tmp_path / "run.toml"
    out = tmp_path / "out"
    config.write_text(
        f'manifest = "{manifest}"\nout = "{out}"\nstrategy = "max"\n', encoding="utf-8"
    )
    assert run_cli("run", "--config", str(config), "--strategy", "avg") == 0
    stdout = capsys.readouterr().out
    assert "mode: retrieval" in stdout
    assert f"map: {1.0:.10f}" in stdout
    report = json.loads((out / "run_report.json").read_text(encoding="utf-8"))
    assert report["config"]["strategy"] == "avg"


def test_train_writes_sibling_artifacts(classification_corpus, tmp_path, capsys):
    manifest = classification_corpus()
    clf = tmp_path / "model.plc"
    code = run_cli(
        "train", "--manifest", str(manifest), "--epochs", "20", "--out", str(clf)
    )
    assert code == 0
    assert "trained 3-class classifier" in capsys.readouterr().out
    assert clf.is_file()
    assert clf.with_suffix(".pwm").is_file()
    meta = json.loads(clf.with_suffix(".meta.json").read_text(encoding="utf-8"))
    assert meta["strategy"] == "avg"
    assert meta["whiten"] == "pca"
    assert meta["whitener"] == "model.pwm"
    assert meta["classes"] == ["beach", "city", "forest"]


def test_eval_classify_replays_training_setup(classification_corpus, tmp_path, capsys):
    split1 = classification_corpus(seed=11, name="one")
    split2 = classification_corpus(seed=23, name="two")
    clf = tmp_path / "model.plc"
    assert run_cli("train", "--manifest", str(split1), "--epochs", "20", "--out", str(clf)) == 0
    capsys.readouterr()
    tsv = tmp_path / "acc.tsv"
    code = run_cli(
        "eval-classify",
        "--manifest",
        str(split1),
        "--manifest",
        str(split2),
        "--clf",
        str(clf),
        "--out",
        str(tsv),
    )
    assert code == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "split\tclass\taccuracy"
    assert sum(line.startswith("split1\t") for line in lines) == 3
    assert sum(line.startswith("split2\t") for line in lines) == 3
    assert lines[-1].startswith("mean_per_class_accuracy\t")
    # same-split test images classify perfectly on this separable corpus
    split1_acc = [float(l.split("\t")[2]) for l in lines if l.startswith("split1\t")]
    assert split1_acc == [1.0, 1.0, 1.0]
    assert tsv.read_text(encoding="utf-8").splitlines() == lines[:-1]


def test_eval_classify_without_meta_needs_strategy(classification_corpus, tmp_path, capsys):
    manifest = classification_corpus()
    clf = tmp_path / "model.plc"
    assert run_cli("train", "--manifest", str(manifest), "--epochs", "5", "--out", str(clf)) == 0
    clf.with_suffix(".meta.json").unlink()
    clf.with_suffix(".pwm").unlink()
    capsys.readouterr()
    code = run_cli("eval-classify", "--manifest", str(manifest), "--clf", str(clf))
    assert code == 2
    assert "--strategy" in capsys.readouterr().err


def test_threads_env_fallback(monkeypatch):
    monkeypatch.delenv(THREADS_ENV, raising=False)
    assert resolve_threads(None) == 1
    monkeypatch.setenv(THREADS_ENV, "3")
    assert resolve_threads(None) == 3
    assert resolve_threads(8) == 8
    monkeypatch.setenv(THREADS_ENV, "zero")
    with pytest.raises(UsageError):
        resolve_threads(None)
    with pytest.raises(UsageError):
        resolve_threads(0)


def test_pool_respects_threads_env(retrieval_corpus, tmp_path, monkeypatch, capsys):
    manifest = retrieval_corpus()
    monkeypatch.setenv(THREADS_ENV, "4")
    out = tmp_path / "desc_mt"
    assert run_cli("pool", "--manifest", str(manifest), "--strategy", "max", "--out", str(out)) == 0
    capsys.readouterr()
    assert sorted(out.rglob("*.fms"))
