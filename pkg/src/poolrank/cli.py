"""poolrank command line.

Subcommands mirror the pipeline stages: validate, pool, fit-whitener,
index, query, eval-map, train, eval-classify, and run (all stages from
one config). Exit codes: 0 success, 2 usage error, 3 data error, 4
numeric failure. POOLRANK_THREADS sets the default worker count.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import classify, pipeline, pooling, retrieval, tensor_store, whitening
from .errors import DataError, PoolrankError, UsageError
from .util import THREADS_ENV, resolve_threads


def _fmt(value: float) -> str:
    return f"{value:.10f}"


def _read_descriptor_dir(directory) -> list:
    files = pooling.iter_descriptor_files(directory)
    if not files:
        raise DataError(f"no descriptor files under {directory}", code="no_descriptors")
    return [pooling.read_descriptor(p) for p in files]


def _check_provenance(index: retrieval.RetrievalIndex, model) -> None:
    """Queries must be whitened exactly like the indexed references."""
    want = model.provenance if model is not None else "none"
    if index.normalization != want:
        raise DataError(
            f"index normalization {index.normalization!r} does not match "
            f"query whitening {want!r}; pass the matching --model",
            code="mixed_normalization",
        )


def cmd_validate(args) -> int:
    report = tensor_store.validate_manifest(args.manifest)
    for line in report.lines():
        print(line)
    return 0 if report.ok else 3


def cmd_pool(args) -> int:
    manifest = tensor_store.load_manifest(args.manifest)
    pairs = pipeline.pool_manifest(manifest, args.strategy, resolve_threads(args.threads))
    pipeline.persist_descriptors(pairs, args.out)
    print(f"pooled {len(pairs)} descriptors ({args.strategy}) -> {args.out}")
    return 0


def cmd_fit_whitener(args) -> int:
    descriptors = _read_descriptor_dir(args.descriptors)
    model = whitening.fit_whitener(
        descriptors,
        use_pca=args.pca,
        epsilon=args.epsilon,
        l2_normalize_input=args.l2_input,
    )
    whitening.save_model(model, args.out)
    print(
        f"fit {model.mode} whitener on {model.fit_count} descriptors "
        f"(dim {model.dim}) -> {args.out}"
    )
    return 0


def cmd_index(args) -> int:
    manifest = tensor_store.load_manifest(args.manifest)
    if manifest.mode != "retrieval":
        raise DataError(f"manifest mode {manifest.mode!r} is not retrieval", code="bad_mode")
    reference_ids = {e.image_id for e in manifest.references()}
    descriptors = [
        d
        for d in _read_descriptor_dir(args.descriptors)
        if d.image_id in reference_ids and tensor_store.is_rotation(d.view)
    ]
    if args.rotations == "rot0":
        descriptors = [d for d in descriptors if d.view == "rot0"]
    if args.model:
        model = whitening.load_model(args.model)
        descriptors = whitening.apply_whitener_batch(model, descriptors)
    index = retrieval.build_index(descriptors, manifest)
    retrieval.save_index(index, args.out)
    print(
        f"indexed {len(index)} references ({index.matrix.shape[0]} rows, "
        f"dim {index.dim}) -> {args.out}"
    )
    return 0


def _load_queries(args, index: retrieval.RetrievalIndex) -> list:
    queries = [d for d in _read_descriptor_dir(args.queries) if d.view == "rot0"]
    if not queries:
        raise DataError(f"no rot0 descriptors under {args.queries}", code="no_queries")
    model = whitening.load_model(args.model) if args.model else None
    _check_provenance(index, model)
    if model is not None:
        queries = whitening.apply_whitener_batch(model, queries)
    return queries


def cmd_query(args) -> int:
    index = retrieval.load_index(args.index)
    queries = _load_queries(args, index)
    rankings = retrieval.query_batch(
        index,
        queries,
        metric=args.metric,
        include_self=args.include_self,
        threads=resolve_threads(args.threads),
    )
    print("query_id\trank\timage_id\tdistance")
    for ranking in rankings:
        for rank, (image_id, distance) in enumerate(ranking.items[: args.topk], start=1):
            print(f"{ranking.query_id}\t{rank}\t{image_id}\t{_fmt(distance)}")
    return 0


def cmd_eval_map(args) -> int:
    index = retrieval.load_index(args.index)
    manifest = tensor_store.load_manifest(args.manifest)
    if manifest.mode != "retrieval":
        raise DataError(f"manifest mode {manifest.mode!r} is not retrieval", code="bad_mode")
    queries = _load_queries(args, index)
    groups = {e.image_id: e.group_id for e in manifest.queries()}
    queries = [d for d in queries if d.image_id in groups]
    missing = sorted(set(groups) - {d.image_id for d in queries})
    if missing:
        raise DataError(f"queries without descriptors: {missing}", code="no_queries")
    result = retrieval.evaluate_map(
        index,
        [(d, groups[d.image_id]) for d in queries],
        metric=args.metric,
        include_self=args.include_self,
        threads=resolve_threads(args.threads),
    )
    lines = ["query_id\tap"]
    for query_id in sorted(result.per_query_ap):
        lines.append(f"{query_id}\t{_fmt(result.per_query_ap[query_id])}")
    for line in lines:
        print(line)
    print(f"mAP\t{_fmt(result.map)}")
    if args.out:
        Path(args.out).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return 0


def cmd_train(args) -> int:
    manifest = tensor_store.load_manifest(args.manifest)
    if manifest.mode != "classification":
        raise DataError(
            f"manifest mode {manifest.mode!r} is not classification", code="bad_mode"
        )
    threads = resolve_threads(args.threads)
    train_imgs, train_labels = classify.pool_role_crops(manifest, "train", args.strategy, threads)
    descriptors = [d for image_id in sorted(train_imgs) for d in train_imgs[image_id]]

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    whitener_path = None
    if args.whiten != "none":
        model = whitening.fit_whitener(
            descriptors, use_pca=(args.whiten == "pca"), epsilon=args.epsilon
        )
        descriptors = whitening.apply_whitener_batch(model, descriptors)
        whitener_path = out.with_suffix(".pwm")
        whitening.save_model(model, whitener_path)

    hp = classify.Hyperparams(args.epochs, args.lam, args.lr, args.seed)
    samples = [(d, train_labels[d.image_id]) for d in descriptors]
    clf = classify.train(samples, hp)
    classify.save_classifier(clf, out)

    meta = {
        "strategy": args.strategy,
        "whiten": args.whiten,
        "epsilon": args.epsilon,
        "whitener": whitener_path.name if whitener_path else None,
        "classes": list(clf.classes),
        "trained_on": str(Path(args.manifest).resolve()),
    }
    out.with_suffix(".meta.json").write_text(
        json.dumps(meta, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    print(
        f"trained {clf.n_classes}-class classifier on {len(samples)} samples "
        f"(dim {clf.dim}) -> {out}"
    )
    return 0


def cmd_eval_classify(args) -> int:
    clf_path = Path(args.clf)
    clf = classify.load_classifier(clf_path)
    meta = {}
    meta_path = clf_path.with_suffix(".meta.json")
    if meta_path.is_file():
        meta = json.loads(meta_path.read_text(encoding="utf-8"))

    strategy = args.strategy or meta.get("strategy")
    if strategy is None:
        raise UsageError("no .meta.json next to the classifier; pass --strategy")
    model = None
    if args.model:
        model = whitening.load_model(args.model)
    elif meta.get("whitener"):
        model = whitening.load_model(clf_path.parent / meta["whitener"])
    threads = resolve_threads(args.threads)

    lines = ["split\tclass\taccuracy"]
    split_means = []
    for split_no, manifest_path in enumerate(args.manifest, start=1):
        manifest = tensor_store.load_manifest(manifest_path)
        if manifest.mode != "classification":
            raise DataError(
                f"{manifest_path}: mode {manifest.mode!r} is not classification",
                code="bad_mode",
            )
        test_imgs, test_labels = classify.pool_role_crops(manifest, "test", strategy, threads)
        unknown = sorted(set(test_labels.values()) - set(clf.classes))
        if unknown:
            raise DataError(f"test labels never trained: {unknown}", code="unknown_label")
        hits = {c: 0 for c in clf.classes}
        totals = {c: 0 for c in clf.classes}
        for image_id in sorted(test_imgs):
            crops = test_imgs[image_id]
            if model is not None:
                crops = whitening.apply_whitener_batch(model, crops)
            vote = classify.classify_image(clf, crops, args.vote_mode)
            label = test_labels[image_id]
            totals[label] += 1
            if vote.decision == label:
                hits[label] += 1
        per_class = {c: hits[c] / totals[c] for c in clf.classes if totals[c]}
        for label in sorted(per_class):
            lines.append(f"split{split_no}\t{label}\t{_fmt(per_class[label])}")
        split_means.append(float(np.mean(list(per_class.values()))))

    for line in lines:
        print(line)
    print(f"mean_per_class_accuracy\t{_fmt(float(np.mean(split_means)))}")
    if args.out:
        Path(args.out).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return 0


def cmd_run(args) -> int:
    config = pipeline.build_config(
        args.config,
        manifest=args.manifest,
        out_dir=args.out,
        strategy=args.strategy,
        whiten=args.whiten,
        epsilon=args.epsilon,
        metric=args.metric,
        rotations=args.rotations,
        vote_mode=args.vote_mode,
        epochs=args.epochs,
        lam=args.lam,
        lr0=args.lr,
        seed=args.seed,
        threads=args.threads,
    )
    report = pipeline.run_pipeline(config)
    print(f"mode: {report['mode']}")
    for stage in report["stages"]:
        print(f"stage {stage['stage']}: {stage['seconds']:.3f}s")
    for key in sorted(report["metrics"]):
        value = report["metrics"][key]
        print(f"{key}: {_fmt(value) if isinstance(value, float) else value}")
    print(f"report: {Path(config.out_dir) / 'run_report.json'}")
    return 0


def _add_threads(p) -> None:
    p.add_argument(
        "--threads",
        type=int,
        default=None,
        help=f"worker count (default: ${THREADS_ENV} or 1)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="poolrank",
        description="Pooled CNN-map descriptors: whitening, retrieval, classification.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a manifest and every tensor it references")
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("pool", help="pool feature-map stacks into descriptor files")
    p.add_argument("--manifest", required=True)
    p.add_argument("--strategy", required=True, choices=pooling.STRATEGIES)
    p.add_argument("--out", required=True, help="descriptor output directory")
    _add_threads(p)
    p.set_defaults(func=cmd_pool)

    p = sub.add_parser("fit-whitener", help="fit whitening statistics on descriptors")
    p.add_argument("--descriptors", required=True, help="descriptor directory (fit corpus)")
    p.add_argument("--pca", action="store_true", help="PCA-whitening instead of plain")
    p.add_argument("--epsilon", type=float, default=whitening.DEFAULT_EPSILON)
    p.add_argument("--l2-input", action="store_true", dest="l2_input")
    p.add_argument("--out", required=True, help="model file (.pwm)")
    p.set_defaults(func=cmd_fit_whitener)

    p = sub.add_parser("index", help="pack reference descriptors into an index")
    p.add_argument("--descriptors", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", default=None, help="whitening model to apply (.pwm)")
    p.add_argument("--rotations", choices=pipeline.ROTATION_POLICIES, default="all")
    p.add_argument("--out", required=True, help="index file (.pri)")
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("query", help="rank references for query descriptors")
    p.add_argument("--index", required=True)
    p.add_argument("--query-descriptors", dest="queries", required=True)
    p.add_argument("--model", default=None, help="whitening model applied to queries")
    p.add_argument("--metric", choices=retrieval.METRICS, default="cosine")
    p.add_argument("--topk", type=int, default=10)
    p.add_argument("--include-self", action="store_true", dest="include_self")
    _add_threads(p)
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("eval-map", help="mean average precision on a retrieval manifest")
    p.add_argument("--index", required=True)
    p.add_argument("--queries", required=True, help="query descriptor directory")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", default=None, help="whitening model applied to queries")
    p.add_argument("--metric", choices=retrieval.METRICS, default="cosine")
    p.add_argument("--include-self", action="store_true", dest="include_self")
    p.add_argument("--out", default=None, help="also write the per-query AP TSV here")
    _add_threads(p)
    p.set_defaults(func=cmd_eval_map)

    p = sub.add_parser("train", help="train the linear classifier on a split manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--strategy", choices=pooling.STRATEGIES, default="avg")
    p.add_argument("--whiten", choices=pipeline.WHITEN_MODES, default="pca")
    p.add_argument("--pca", action="store_const", const="pca", dest="whiten")
    p.add_argument("--epsilon", type=float, default=whitening.DEFAULT_EPSILON)
    p.add_argument("--epochs", type=int, default=classify.DEFAULT_EPOCHS)
    p.add_argument("--lambda", dest="lam", type=float, default=classify.DEFAULT_LAMBDA)
    p.add_argument("--lr", type=float, default=classify.DEFAULT_LR0)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out", required=True, help="classifier file (.plc)")
    _add_threads(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval-classify", help="10-crop vote accuracy of a saved classifier")
    p.add_argument("--manifest", action="append", required=True, help="repeatable, one per split")
    p.add_argument("--clf", required=True)
    p.add_argument("--strategy", choices=pooling.STRATEGIES, default=None)
    p.add_argument("--model", default=None, help="whitening model (default: classifier's)")
    p.add_argument("--vote-mode", dest="vote_mode", choices=classify.VOTE_MODES, default="argmax")
    p.add_argument("--out", default=None, help="also write the per-class accuracy TSV here")
    _add_threads(p)
    p.set_defaults(func=cmd_eval_classify)

    p = sub.add_parser("run", help="full pipeline from one config")
    p.add_argument("--config", default=None, help="TOML config; flags override it")
    p.add_argument("--manifest", default=None)
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--strategy", choices=pooling.STRATEGIES, default=None)
    p.add_argument("--whiten", choices=pipeline.WHITEN_MODES, default=None)
    p.add_argument("--epsilon", type=float, default=None)
    p.add_argument("--metric", choices=retrieval.METRICS, default=None)
    p.add_argument("--rotations", choices=pipeline.ROTATION_POLICIES, default=None)
    p.add_argument("--vote-mode", dest="vote_mode", choices=classify.VOTE_MODES, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=cmd_run)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except PoolrankError as exc:
        print(f"poolrank: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
