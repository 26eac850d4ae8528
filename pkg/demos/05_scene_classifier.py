"""Scene classification walkthrough: SGD training and the 10-crop vote.

A linear one-vs-rest classifier is trained on whitened crop descriptors
with plain SGD (hinge loss, decaying learning rate, seeded shuffle). At
test time an image contributes ten crops; a class that wins at least 6
of them takes the image outright, otherwise the summed scores decide.
"""
import tempfile
from pathlib import Path

import numpy as np

from poolrank import (
    Descriptor,
    Hyperparams,
    classify_image,
    load_classifier,
    predict_crop,
    save_classifier,
    train,
)

rng = np.random.default_rng(4)
DIM = 8
CLASSES = ("beach", "city", "forest")
centers = {c: 3.0 * rng.standard_normal(DIM) for c in CLASSES}


def crop(label, jitter=0.6):
    values = centers[label] + jitter * rng.standard_normal(DIM)
    return Descriptor("x", "crop_center", values.astype(np.float32), "avg", "none")


samples = [(crop(label), label) for label in CLASSES for _ in range(60)]
hp = Hyperparams(epochs=30, lam=1e-4, lr0=0.2, seed=42)
clf = train(samples, hp)
print(f"trained {clf.n_classes} one-vs-rest models, dim {clf.dim}")

train_hits = sum(
    clf.classes[int(np.argmax(predict_crop(clf, d)))] == label for d, label in samples
)
print(f"train crop accuracy: {train_hits}/{len(samples)}")

# Same data, same seed: training is exactly reproducible.
again = train(samples, hp)
print("retrain is bit-identical:", clf.weights.tobytes() == again.weights.tobytes())

# Ten crops of one clean beach image: the vote is unanimous.
print()
crops = [crop("beach", jitter=0.3) for _ in range(10)]
vote = classify_image(clf, crops)
print("clean image   counts:", dict(zip(vote.classes, vote.positive_counts.tolist())))
print(f"  -> {vote.decision} (by >=6 rule: {vote.by_threshold})")

# An ambiguous image: most crops look like city, two stray. As long as
# one class holds 6 of the 10 crops it wins without consulting scores.
crops = [crop("city", 0.3) for _ in range(7)] + [crop("forest", 0.3) for _ in range(3)]
vote = classify_image(clf, crops)
print("mixed image   counts:", dict(zip(vote.classes, vote.positive_counts.tolist())))
print(f"  -> {vote.decision} (by >=6 rule: {vote.by_threshold})")

# With no majority the summed scores break the stalemate.
crops = [crop("beach", 2.5) for _ in range(5)] + [crop("forest", 2.5) for _ in range(5)]
vote = classify_image(clf, crops)
print("noisy image   counts:", dict(zip(vote.classes, vote.positive_counts.tolist())))
print(f"  -> {vote.decision} (by >=6 rule: {vote.by_threshold})")

path = Path(tempfile.mkdtemp(prefix="poolrank_demo_")) / "scenes.plc"
save_classifier(clf, path)
assert load_classifier(path) == clf
print()
print(f"classifier saved to {path} and re-loaded identical")
