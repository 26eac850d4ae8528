"""Shared corpus builders: synthetic manifests with FMS1 tensors on disk."""
import numpy as np
import pytest

from manifest_util import write_manifest
from poolrank.tensor_store import (
    FeatureMapStack,
    ROTATION_TAGS,
    TEN_CROP_TAGS,
    write_stack,
)


@pytest.fixture
def retrieval_corpus(tmp_path):
    """Factory for retrieval manifests: groups of near-duplicates + distractors.

    Per group: one query plus `dupes` reference near-copies of a shared
    centroid stack (gaussian perturbation sigma). References carry all
    four rotation views (each its own perturbation), queries rot0 only.
    """

    def build(
        n_groups=3,
        dupes=2,
        distractors=2,
        k=8,
        h=3,
        w=3,
        sigma=0.05,
        seed=7,
        rotations=True,
    ):
        root = tmp_path / f"retr_{n_groups}g_{seed}_{sigma}"
        tensors = root / "tensors"
        tensors.mkdir(parents=True)
        rng = np.random.default_rng(seed)
        entries = []
        img_no = 0

        def add_image(role, group, base, noise_scale):
            nonlocal img_no
            image_id = f"img{img_no:03d}"
            img_no += 1
            tags = ROTATION_TAGS if (rotations and role == "reference") else ("rot0",)
            views = {}
            for tag in tags:
                maps = base + noise_scale * rng.standard_normal(base.shape)
                p = tensors / f"{image_id}_{tag}.fms"
                write_stack(FeatureMapStack(image_id, tag, maps.astype(np.float32)), p)
                views[tag] = str(p.relative_to(root))
            entry = {"id": image_id, "role": role, "views": views}
            if group is not None:
                entry["group"] = group
            entries.append(entry)
            return image_id

        for g in range(n_groups):
            centroid = rng.standard_normal((k, h, w))
            add_image("query", f"g{g}", centroid, sigma)
            for _ in range(dupes):
                add_image("reference", f"g{g}", centroid, sigma)
        for _ in range(distractors):
            add_image("reference", None, rng.standard_normal((k, h, w)), 0.0)
        return write_manifest(root, "retrieval", entries)

    return build


@pytest.fixture
def classification_corpus(tmp_path):
    """Factory for one train/test split: per class, 10-crop images near a center."""

    def build(
        classes=("beach", "city", "forest"),
        n_train=4,
        n_test=3,
        k=8,
        spread=0.3,
        crop_noise=0.1,
        seed=11,
        name="split",
    ):
        root = tmp_path / f"cls_{name}_{seed}"
        tensors = root / "tensors"
        tensors.mkdir(parents=True)
        rng = np.random.default_rng(seed)
        centers = {c: 3.0 * rng.standard_normal(k) for c in classes}
        entries = []
        img_no = 0
        for label in classes:
            for role, count in (("train", n_train), ("test", n_test)):
                for _ in range(count):
                    image_id = f"im{img_no:03d}"
                    img_no += 1
                    base = centers[label] + spread * rng.standard_normal(k)
                    views = {}
                    for tag in TEN_CROP_TAGS:
                        vec = base + crop_noise * rng.standard_normal(k)
                        p = tensors / f"{image_id}_{tag}.fms"
                        write_stack(
                            FeatureMapStack(
                                image_id, tag, vec.reshape(k, 1, 1).astype(np.float32)
                            ),
                            p,
                        )
                        views[tag] = str(p.relative_to(root))
                    entries.append(
                        {"id": image_id, "role": role, "views": views, "label": label}
                    )
        return write_manifest(root, "classification", entries)

    return build
