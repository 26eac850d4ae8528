"""Linear scene classification over pooled descriptors.

One-vs-rest hinge-loss models trained by plain SGD with inverse-time
learning-rate decay, then a 10-crop vote at image level: a class wins
outright when at least 6 of the 10 crops pick it, otherwise the summed
crop scores decide. Training is deterministic for a fixed seed; all
one-vs-rest models share one shuffle stream so serial and vectorized
training produce the same weights.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor_store, whitening
from .errors import DataError, NumericError
from .pooling import Descriptor, pool_batch
from .util import resolve_threads

PLC_MAGIC = b"PLC1"
PLC_VERSION = 1
_PLC_HEADER = struct.Struct("<4sB3xIIIQdd")

DEFAULT_EPOCHS = 100
DEFAULT_LAMBDA = 1e-5
DEFAULT_LR0 = 0.2
VOTE_THRESHOLD = 6
VOTE_MODES = ("argmax", "ovr-sign")


@dataclass(frozen=True)
class Hyperparams:
    epochs: int = DEFAULT_EPOCHS
    lam: float = DEFAULT_LAMBDA
    lr0: float = DEFAULT_LR0
    seed: int = 42

    def __post_init__(self):
        if self.epochs < 1:
            raise DataError(f"epochs must be >= 1, got {self.epochs}", code="bad_hyperparam")
        if not (self.lam > 0.0 and np.isfinite(self.lam)):
            raise DataError(f"lambda must be positive, got {self.lam}", code="bad_hyperparam")
        if not (self.lr0 > 0.0 and np.isfinite(self.lr0)):
            raise DataError(f"lr0 must be positive, got {self.lr0}", code="bad_hyperparam")
        if self.seed < 0:
            raise DataError(f"seed must be non-negative, got {self.seed}", code="bad_hyperparam")


@dataclass(frozen=True)
class LinearClassifier:
    classes: tuple
    weights: np.ndarray  # (C, D) float64
    biases: np.ndarray  # (C,) float64
    hyperparams: Hyperparams = field(default_factory=Hyperparams)

    def __post_init__(self):
        w = np.ascontiguousarray(self.weights, dtype=np.float64)
        b = np.ascontiguousarray(self.biases, dtype=np.float64)
        classes = tuple(str(c) for c in self.classes)
        if len(classes) < 2:
            raise DataError("classifier needs at least 2 classes", code="single_class")
        if len(set(classes)) != len(classes):
            raise DataError("duplicate class labels", code="duplicate_label")
        if w.ndim != 2 or w.shape[0] != len(classes):
            raise DataError(
                f"weights shape {w.shape} does not match {len(classes)} classes",
                code="bad_dims",
            )
        if b.shape != (len(classes),):
            raise DataError(f"biases shape {b.shape} != ({len(classes)},)", code="bad_dims")
        if not (np.isfinite(w).all() and np.isfinite(b).all()):
            raise NumericError("non-finite classifier parameters")
        w.flags.writeable = False
        b.flags.writeable = False
        object.__setattr__(self, "classes", classes)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "biases", b)

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def __eq__(self, other) -> bool:
        if not isinstance(other, LinearClassifier):
            return NotImplemented
        return (
            self.classes == other.classes
            and self.hyperparams == other.hyperparams
            and self.weights.shape == other.weights.shape
            and self.weights.tobytes() == other.weights.tobytes()
            and self.biases.tobytes() == other.biases.tobytes()
        )


@dataclass(frozen=True)
class CropVote:
    classes: tuple
    scores: np.ndarray  # (10, C) float64, one row per crop
    positive_counts: np.ndarray  # (C,) int64
    decision: str
    by_threshold: bool  # True when the >=6 rule decided, False on fallback


def _sample_matrix(samples):
    """(Descriptor, label) pairs -> x (N, D) float64, label list."""
    xs = []
    labels = []
    dim = None
    for d, label in samples:
        if dim is None:
            dim = d.dim
        elif d.dim != dim:
            raise DataError(
                f"descriptor dim {d.dim} for {d.image_id!r} != {dim}", code="dim_mismatch"
            )
        xs.append(np.asarray(d.values, dtype=np.float64))
        labels.append(str(label))
    if not xs:
        raise DataError("no training samples", code="no_samples")
    return np.stack(xs), labels


def train(samples, hyperparams: Hyperparams | None = None, classes=None) -> LinearClassifier:
    """Train one-vs-rest hinge-loss linear models by SGD.

    ``samples`` is a sequence of (Descriptor, label) pairs; every sample
    (typically one crop of a training image) carries its image's label.
    Per epoch the sample order is reshuffled with the seeded generator;
    per sample, each class model takes the update
    w <- (1 - lr*lam) w (+ lr*y*x on margin violation) with
    lr = lr0 / (1 + lr0*lam*t) and t the global step counter. The one
    shuffle stream is shared by all classes, so training the classes
    together (as done here, vectorized) or one at a time gives
    bit-identical weights.
    """
    hp = hyperparams or Hyperparams()
    x, labels = _sample_matrix(samples)
    n, dim = x.shape
    if classes is None:
        classes = sorted(set(labels))
    else:
        classes = sorted(str(c) for c in classes)
        missing = set(labels) - set(classes)
        if missing:
            raise DataError(f"labels outside class list: {sorted(missing)}", code="unknown_label")
    if len(classes) < 2:
        raise DataError("training needs at least 2 classes", code="single_class")
    counts = {c: 0 for c in classes}
    for label in labels:
        counts[label] += 1
    empty = [c for c, k in counts.items() if k == 0]
    if empty:
        raise DataError(f"classes with zero samples: {empty}", code="empty_class")

    class_pos = {c: i for i, c in enumerate(classes)}
    y = np.full((len(classes), n), -1.0)
    for j, label in enumerate(labels):
        y[class_pos[label], j] = 1.0

    w = np.zeros((len(classes), dim))
    b = np.zeros(len(classes))
    rng = np.random.default_rng(hp.seed)
    t = 0
    for _ in range(hp.epochs):
        for j in rng.permutation(n):
            lr = hp.lr0 / (1.0 + hp.lr0 * hp.lam * t)
            xj = x[j]
            yj = y[:, j]
            margin = yj * (w @ xj + b)
            w *= 1.0 - lr * hp.lam
            viol = margin < 1.0
            if viol.any():
                w[viol] += np.outer(lr * yj[viol], xj)
                b[viol] += lr * yj[viol]
            t += 1
    if not (np.isfinite(w).all() and np.isfinite(b).all()):
        raise NumericError("SGD diverged to non-finite weights")
    return LinearClassifier(tuple(classes), w, b, hp)


def predict_crop(clf: LinearClassifier, d: Descriptor) -> np.ndarray:
    """Per-class scores w_c . x + b_c for one crop descriptor."""
    x = np.asarray(d.values, dtype=np.float64)
    if x.shape[0] != clf.dim:
        raise DataError(
            f"descriptor dim {x.shape[0]} != classifier dim {clf.dim}", code="dim_mismatch"
        )
    return clf.weights @ x + clf.biases


def _argmax_label(classes, values) -> str:
    # classes are sorted, argmax takes the first maximum: lexicographic ties.
    return classes[int(np.argmax(values))]


def classify_image(clf: LinearClassifier, crops, vote_mode: str = "argmax") -> CropVote:
    """Vote an image's class from its 10 crop descriptors.

    Default mode counts per-crop argmax winners; "ovr-sign" counts crops
    with a positive one-vs-rest score per class instead. A class owning
    at least 6 of the 10 crops wins outright; otherwise the argmax of the
    scores summed over crops decides. Label ties break lexicographically.
    """
    if vote_mode not in VOTE_MODES:
        raise DataError(f"unknown vote mode {vote_mode!r}", code="bad_vote_mode")
    crops = list(crops)
    if len(crops) != 10:
        raise DataError(f"expected 10 crop descriptors, got {len(crops)}", code="bad_crop_count")
    scores = np.stack([predict_crop(clf, d) for d in crops])
    if vote_mode == "argmax":
        winners = np.argmax(scores, axis=1)
        counts = np.bincount(winners, minlength=clf.n_classes)
    else:
        counts = (scores > 0.0).sum(axis=0)
    counts = counts.astype(np.int64)
    top = int(np.argmax(counts))
    if counts[top] >= VOTE_THRESHOLD:
        decision = clf.classes[top]
        by_threshold = True
    else:
        decision = _argmax_label(clf.classes, scores.sum(axis=0))
        by_threshold = False
    counts.flags.writeable = False
    scores.flags.writeable = False
    return CropVote(clf.classes, scores, counts, decision, by_threshold)


@dataclass(frozen=True)
class SplitResult:
    name: str
    accuracy: float  # mean per-class accuracy on the test role
    per_class: dict  # label -> accuracy
    n_test_images: int


@dataclass(frozen=True)
class SplitEvalResult:
    splits: tuple
    mean_accuracy: float


def pool_role_crops(manifest: tensor_store.DatasetManifest, role: str, strategy: str, threads=None):
    """Pool every (image, view) of a role; per-image descriptor and label dicts."""
    entries = sorted(manifest.with_role(role), key=lambda e: e.image_id)
    if not entries:
        raise DataError(f"manifest has no {role} entries", code="no_samples")
    stacks = []
    for e in entries:
        for tag in sorted(e.views, key=tensor_store.VIEW_TAGS.index):
            stacks.append(tensor_store.read_stack(e.views[tag], e.image_id, tag))
    descriptors = pool_batch(stacks, strategy, threads=threads)
    per_image = {}
    labels = {e.image_id: e.class_label for e in entries}
    for d in descriptors:
        per_image.setdefault(d.image_id, []).append(d)
    return per_image, labels


def evaluate_splits(
    manifests,
    strategy: str = "avg",
    pca: bool = True,
    epsilon: float = whitening.DEFAULT_EPSILON,
    hyperparams: Hyperparams | None = None,
    vote_mode: str = "argmax",
    threads: int | None = None,
) -> SplitEvalResult:
    """Full train/test protocol over one or more split manifests.

    Per split: pool crops, fit the whitener on the training descriptors
    only, whiten both roles, train the classifier, and vote every test
    image. A split's score is the mean over classes of per-class test
    accuracy; the headline number is the mean over splits.
    """
    manifests = list(manifests)
    if not manifests:
        raise DataError("no split manifests", code="no_samples")
    workers = resolve_threads(threads)
    results = []
    for split_no, manifest in enumerate(manifests, start=1):
        if manifest.mode != "classification":
            raise DataError(
                f"split {split_no}: manifest mode {manifest.mode!r} is not classification",
                code="bad_mode",
            )
        train_imgs, train_labels = pool_role_crops(manifest, "train", strategy, workers)
        test_imgs, test_labels = pool_role_crops(manifest, "test", strategy, workers)
        overlap = sorted(set(train_imgs) & set(test_imgs))
        if overlap:
            raise DataError(
                f"split {split_no}: image ids in both roles: {overlap}", code="split_overlap"
            )
        train_descriptors = [d for image_id in sorted(train_imgs) for d in train_imgs[image_id]]
        model = whitening.fit_whitener(train_descriptors, use_pca=pca, epsilon=epsilon)
        samples = [
            (d, train_labels[d.image_id])
            for d in whitening.apply_whitener_batch(model, train_descriptors)
        ]
        clf = train(samples, hyperparams)
        unknown = sorted(set(test_labels.values()) - set(clf.classes))
        if unknown:
            raise DataError(
                f"split {split_no}: test labels never trained: {unknown}", code="unknown_label"
            )
        hits = {c: 0 for c in clf.classes}
        totals = {c: 0 for c in clf.classes}
        for image_id in sorted(test_imgs):
            crops = whitening.apply_whitener_batch(model, test_imgs[image_id])
            vote = classify_image(clf, crops, vote_mode)
            label = test_labels[image_id]
            totals[label] += 1
            if vote.decision == label:
                hits[label] += 1
        per_class = {c: hits[c] / totals[c] for c in clf.classes if totals[c]}
        accuracy = float(np.mean(list(per_class.values())))
        results.append(SplitResult(f"split{split_no}", accuracy, per_class, len(test_imgs)))
    mean_accuracy = float(np.mean([r.accuracy for r in results]))
    return SplitEvalResult(tuple(results), mean_accuracy)


def save_classifier(clf: LinearClassifier, path) -> None:
    hp = clf.hyperparams
    parts = [
        _PLC_HEADER.pack(
            PLC_MAGIC, PLC_VERSION, clf.n_classes, clf.dim, hp.epochs, hp.seed, hp.lam, hp.lr0
        )
    ]
    for label in clf.classes:
        raw = label.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise DataError(f"label too long ({len(raw)} bytes)", code="bad_name")
        parts.append(struct.pack("<H", len(raw)) + raw)
    parts.append(clf.weights.astype("<f8").tobytes(order="C"))
    parts.append(clf.biases.astype("<f8").tobytes(order="C"))
    try:
        Path(path).write_bytes(b"".join(parts))
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}", code="io") from exc


def load_classifier(path) -> LinearClassifier:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}", code="io") from exc
    if len(data) < _PLC_HEADER.size:
        raise DataError(f"{path}: truncated header", code="truncated")
    magic, version, n_classes, dim, epochs, seed, lam, lr0 = _PLC_HEADER.unpack_from(data)
    if magic != PLC_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}", code="bad_magic")
    if version != PLC_VERSION:
        raise DataError(f"{path}: unsupported version {version}", code="bad_version")
    cursor = _PLC_HEADER.size
    labels = []
    for _ in range(n_classes):
        if cursor + 2 > len(data):
            raise DataError(f"{path}: truncated labels", code="truncated")
        (length,) = struct.unpack_from("<H", data, cursor)
        cursor += 2
        if cursor + length > len(data):
            raise DataError(f"{path}: truncated labels", code="truncated")
        labels.append(data[cursor : cursor + length].decode("utf-8"))
        cursor += length
    expected = cursor + 8 * (n_classes * dim + n_classes)
    if len(data) < expected:
        raise DataError(f"{path}: truncated parameters", code="truncated")
    if len(data) > expected:
        raise DataError(f"{path}: {len(data) - expected} trailing bytes", code="trailing_bytes")
    weights = np.frombuffer(data, "<f8", count=n_classes * dim, offset=cursor)
    cursor += 8 * n_classes * dim
    biases = np.frombuffer(data, "<f8", count=n_classes, offset=cursor)
    return LinearClassifier(
        tuple(labels),
        weights.reshape(n_classes, dim).copy(),
        biases.copy(),
        Hyperparams(epochs=epochs, lam=lam, lr0=lr0, seed=seed),
    )
