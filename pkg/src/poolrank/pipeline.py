"""End-to-end orchestration: validate, pool, whiten, index or train, evaluate.

A run is driven by one RunConfig whose defaults reproduce the headline
configuration (avg pooling, PCA-whitening, cosine distance, all four
reference rotations). Every intermediate artifact is persisted under the
output directory and a run report records the config echo, stage
timings, and metric summary. Metric outputs are byte-identical across
re-runs with the same config and seed.
"""
from __future__ import annotations

import json
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import classify, pooling, retrieval, tensor_store, whitening
from .errors import DataError, PoolrankError, UsageError
from .util import resolve_threads

WHITEN_MODES = ("none", "plain", "pca")
ROTATION_POLICIES = ("all", "rot0")


@dataclass(frozen=True)
class RunConfig:
    """One reproducible run. Defaults match the headline configuration.

    The classifier shuffle is the only random consumer; it draws from
    ``seed`` directly.
    """

    manifest: str
    out_dir: str
    strategy: str = "avg"
    whiten: str = "pca"
    epsilon: float = whitening.DEFAULT_EPSILON
    metric: str = "cosine"
    rotations: str = "all"
    vote_mode: str = "argmax"
    epochs: int = classify.DEFAULT_EPOCHS
    lam: float = classify.DEFAULT_LAMBDA
    lr0: float = classify.DEFAULT_LR0
    seed: int = 42
    threads: int | None = None

    def validate(self) -> None:
        """Reject bad values before any file is touched."""
        if not self.manifest:
            raise UsageError("config needs a manifest path")
        if not self.out_dir:
            raise UsageError("config needs an output directory")
        if self.strategy not in pooling.STRATEGIES:
            raise UsageError(
                f"unknown strategy {self.strategy!r}, expected one of {pooling.STRATEGIES}"
            )
        if self.whiten not in WHITEN_MODES:
            raise UsageError(
                f"unknown whitening mode {self.whiten!r}, expected one of {WHITEN_MODES}"
            )
        if self.metric not in retrieval.METRICS:
            raise UsageError(
                f"unknown metric {self.metric!r}, expected one of {retrieval.METRICS}"
            )
        if self.rotations not in ROTATION_POLICIES:
            raise UsageError(
                f"unknown rotation policy {self.rotations!r}, "
                f"expected one of {ROTATION_POLICIES}"
            )
        if self.vote_mode not in classify.VOTE_MODES:
            raise UsageError(
                f"unknown vote mode {self.vote_mode!r}, expected one of {classify.VOTE_MODES}"
            )
        if not self.epsilon > 0.0:
            raise UsageError(f"epsilon must be positive, got {self.epsilon}")
        try:
            classify.Hyperparams(self.epochs, self.lam, self.lr0, self.seed)
        except DataError as exc:
            raise UsageError(str(exc)) from exc

    def hyperparams(self) -> classify.Hyperparams:
        return classify.Hyperparams(self.epochs, self.lam, self.lr0, self.seed)


_CONFIG_KEYS = {
    "manifest": ("manifest", str),
    "out": ("out_dir", str),
    "strategy": ("strategy", str),
    "whiten": ("whiten", str),
    "epsilon": ("epsilon", float),
    "metric": ("metric", str),
    "rotations": ("rotations", str),
    "vote_mode": ("vote_mode", str),
    "epochs": ("epochs", int),
    "lambda": ("lam", float),
    "lr": ("lr0", float),
    "seed": ("seed", int),
    "threads": ("threads", int),
}


def load_config_file(path) -> dict:
    """Parse a TOML config into RunConfig field values.

    Keys mirror the CLI flags; sections are namespacing only (their keys
    are read as if top-level). Unknown keys are usage errors.
    """
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise UsageError(f"bad config {path}: {exc}") from exc
    flat = {}
    for key, value in doc.items():
        if isinstance(value, dict):
            flat.update(value)
        else:
            flat[key] = value
    values = {}
    for key, value in flat.items():
        if key not in _CONFIG_KEYS:
            raise UsageError(f"unknown config key {key!r} in {path}")
        name, cast = _CONFIG_KEYS[key]
        try:
            values[name] = cast(value)
        except (TypeError, ValueError) as exc:
            raise UsageError(f"bad value for config key {key!r}: {value!r}") from exc
    return values


def build_config(config_path=None, **overrides) -> RunConfig:
    """File values under CLI overrides; None overrides mean 'not given'."""
    values = load_config_file(config_path) if config_path else {}
    values.update({k: v for k, v in overrides.items() if v is not None})
    unknown = set(values) - {f for f, _ in _CONFIG_KEYS.values()}
    if unknown:
        raise UsageError(f"unknown config fields: {sorted(unknown)}")
    if "manifest" not in values:
        raise UsageError("config needs a manifest path")
    if "out_dir" not in values:
        raise UsageError("config needs an output directory")
    config = RunConfig(**values)
    config.validate()
    return config


@contextmanager
def _stage(name: str, timings: list):
    start = time.perf_counter()
    try:
        yield
    except PoolrankError as exc:
        if isinstance(exc, DataError):
            raise DataError(f"stage {name}: {exc}", code=exc.code) from exc
        raise exc.__class__(f"stage {name}: {exc}") from exc
    timings.append({"stage": name, "seconds": round(time.perf_counter() - start, 6)})


def _fmt(value: float) -> str:
    return f"{value:.10f}"


def pool_manifest(manifest: tensor_store.DatasetManifest, strategy: str, threads=None):
    """Pool every (image, view) in the manifest; (entry, descriptor) pairs.

    One pair per view; the descriptor's own view tag identifies it, the
    entry supplies role, group, and label. Order is stable: by role, then
    image id, then view tag.
    """
    entries = sorted(manifest.entries, key=lambda e: (e.role, e.image_id))
    owners = []
    stacks = []
    for e in entries:
        for tag in sorted(e.views, key=tensor_store.VIEW_TAGS.index):
            owners.append(e)
            stacks.append(tensor_store.read_stack(e.views[tag], e.image_id, tag))
    descriptors = pooling.pool_batch(stacks, strategy, threads=threads)
    return list(zip(owners, descriptors))


def persist_descriptors(pairs, root) -> None:
    """Write descriptors under root/<role>/<id>__<view>.fms."""
    root = Path(root)
    for entry, descriptor in pairs:
        target = root / entry.role / pooling.descriptor_filename(
            descriptor.image_id, descriptor.view
        )
        target.parent.mkdir(parents=True, exist_ok=True)
        pooling.write_descriptor(descriptor, target)


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _json_text(payload) -> str:
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def run_pipeline(config: RunConfig) -> dict:
    """Execute all stages for the manifest's mode; returns the run report."""
    config.validate()
    out = Path(config.out_dir)
    threads = resolve_threads(config.threads)
    timings = []
    artifacts = {}

    with _stage("validate", timings):
        manifest = tensor_store.load_manifest(config.manifest)
        report = tensor_store.validate_manifest(config.manifest)
        if not report.ok:
            raise DataError(
                "manifest failed validation:\n" + "\n".join(report.lines()),
                code="invalid_manifest",
            )

    with _stage("pool", timings):
        pairs = pool_manifest(manifest, config.strategy, threads)
        persist_descriptors(pairs, out / "descriptors")
        artifacts["descriptors"] = str(out / "descriptors")

    if manifest.mode == "retrieval":
        metrics = _run_retrieval(config, manifest, pairs, out, threads, timings, artifacts)
    else:
        metrics = _run_classification(config, manifest, pairs, out, threads, timings, artifacts)

    metrics_path = out / "metrics.json"
    _write_text(metrics_path, _json_text(metrics))
    artifacts["metrics"] = str(metrics_path)

    run_report = {
        "config": asdict(config),
        "mode": manifest.mode,
        "stages": timings,
        "metrics": metrics,
        "artifacts": artifacts,
    }
    _write_text(out / "run_report.json", _json_text(run_report))
    return run_report


def _fit_and_apply(config, fit_descriptors, apply_groups, out, artifacts):
    """Optionally fit a whitener on fit_descriptors and map it over groups."""
    if config.whiten == "none":
        return apply_groups
    model = whitening.fit_whitener(
        fit_descriptors, use_pca=(config.whiten == "pca"), epsilon=config.epsilon
    )
    path = out / "whitener.pwm"
    whitening.save_model(model, path)
    artifacts["whitener"] = str(path)
    return [whitening.apply_whitener_batch(model, group) for group in apply_groups]


def _run_retrieval(config, manifest, pairs, out, threads, timings, artifacts):
    with _stage("fit-whitener", timings):
        reference_pairs = [(e, d) for e, d in pairs if e.role == "reference"]
        if config.rotations == "rot0":
            reference_pairs = [(e, d) for e, d in reference_pairs if d.view == "rot0"]
        query_pairs = [(e, d) for e, d in pairs if e.role == "query" and d.view == "rot0"]
        query_ids = {e.image_id for e, _ in pairs if e.role == "query"}
        missing = sorted(query_ids - {e.image_id for e, _ in query_pairs})
        if missing:
            raise DataError(f"queries without rot0 view: {missing}", code="missing_rot0")
        refs = [d for _, d in reference_pairs]
        queries = [d for _, d in query_pairs]
        groups = {e.image_id: e.group_id for e, _ in query_pairs}
        refs, queries = _fit_and_apply(config, refs, (refs, queries), out, artifacts)

    with _stage("index", timings):
        index = retrieval.build_index(refs, manifest)
        index_path = out / "index.pri"
        retrieval.save_index(index, index_path)
        artifacts["index"] = str(index_path)

    with _stage("eval-map", timings):
        result = retrieval.evaluate_map(
            index,
            [(q, groups[q.image_id]) for q in queries],
            metric=config.metric,
            threads=threads,
        )
        tsv = ["query_id\tap"]
        for query_id in sorted(result.per_query_ap):
            tsv.append(f"{query_id}\t{_fmt(result.per_query_ap[query_id])}")
        ap_path = out / "per_query_ap.tsv"
        _write_text(ap_path, "\n".join(tsv) + "\n")
        artifacts["per_query_ap"] = str(ap_path)
    return {"map": result.map, "n_queries": len(queries)}


def _run_classification(config, manifest, pairs, out, threads, timings, artifacts):
    with _stage("fit-whitener", timings):
        train_pairs = [(e, d) for e, d in pairs if e.role == "train"]
        test_pairs = [(e, d) for e, d in pairs if e.role == "test"]
        overlap = sorted(
            {e.image_id for e, _ in train_pairs} & {e.image_id for e, _ in test_pairs}
        )
        if overlap:
            raise DataError(f"image ids in both roles: {overlap}", code="split_overlap")
        train_descriptors = [d for _, d in train_pairs]
        test_descriptors = [d for _, d in test_pairs]
        train_descriptors, test_descriptors = _fit_and_apply(
            config, train_descriptors, (train_descriptors, test_descriptors), out, artifacts
        )

    with _stage("train", timings):
        labels = {e.image_id: e.class_label for e, _ in train_pairs}
        samples = [(d, labels[d.image_id]) for d in train_descriptors]
        clf = classify.train(samples, config.hyperparams())
        clf_path = out / "clf.plc"
        classify.save_classifier(clf, clf_path)
        artifacts["classifier"] = str(clf_path)

    with _stage("eval-classify", timings):
        test_labels = {e.image_id: e.class_label for e, _ in test_pairs}
        by_image = {}
        for d in test_descriptors:
            by_image.setdefault(d.image_id, []).append(d)
        unknown = sorted(set(test_labels.values()) - set(clf.classes))
        if unknown:
            raise DataError(f"test labels never trained: {unknown}", code="unknown_label")
        hits = {c: 0 for c in clf.classes}
        totals = {c: 0 for c in clf.classes}
        for image_id in sorted(by_image):
            vote = classify.classify_image(clf, by_image[image_id], config.vote_mode)
            label = test_labels[image_id]
            totals[label] += 1
            if vote.decision == label:
                hits[label] += 1
        per_class = {c: hits[c] / totals[c] for c in clf.classes if totals[c]}
        accuracy = sum(per_class.values()) / len(per_class)
        tsv = ["split\tclass\taccuracy"]
        for label in sorted(per_class):
            tsv.append(f"split1\t{label}\t{_fmt(per_class[label])}")
        acc_path = out / "per_class_accuracy.tsv"
        _write_text(acc_path, "\n".join(tsv) + "\n")
        artifacts["per_class_accuracy"] = str(acc_path)
    return {
        "mean_per_class_accuracy": accuracy,
        "n_classes": clf.n_classes,
        "n_test_images": len(by_image),
    }
