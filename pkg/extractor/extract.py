#!/usr/bin/env python3
"""Dump CNN feature-map stacks from images into FMS1 tensor files.

Feeds each image view (rotations for retrieval, ten crops for
classification) through a pre-trained AlexNet-style network once and
writes the pool5 stack (256 x H x W) or the fc7 vector (4096 x 1 x 1)
per view. Alongside the tensors it emits fragment.json: a manifest
fragment linking image ids to tensor paths, which is itself a loadable
dataset manifest and records the full preprocessing recipe.

This tool is deliberately a thin adapter. It does no pooling, no
whitening, no ranking; everything downstream consumes only the FMS1
files and the fragment. Inference is deterministic for fixed weights:
single-image forward passes on one CPU thread.

    python3 extract.py --images list.tsv --weights alexnet.pt \
        --layer pool5 --policy retrieval --out out_dir

The image list is one image per line: path<TAB>role, with an optional
third column read as the group id (retrieval) or class label
(classification). Paths are relative to the list file.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import struct
import sys
from pathlib import Path

import numpy as np
import torch
import torchvision
from PIL import Image, UnidentifiedImageError

FMS_MAGIC = b"FMS1"
FMS_VERSION = 1
_FMS_HEADER = struct.Struct("<4sB3xIII")

ROTATION_TAGS = ("rot0", "rot90", "rot180", "rot270")
CROP_POSITIONS = ("center", "tl", "tr", "bl", "br")
TEN_CROP_TAGS = tuple(f"crop_{p}" for p in CROP_POSITIONS) + tuple(
    f"crop_{p}_m" for p in CROP_POSITIONS
)

POLICIES = ("retrieval", "classification")
LAYERS = ("pool5", "fc7")
NETWORKS = ("places", "imagenet")
_POLICY_ROLES = {"retrieval": ("query", "reference"), "classification": ("train", "test")}

RESIZE_TO = 256
CROP_TO = 224
MEAN = (0.485, 0.456, 0.406)
STD = (0.229, 0.224, 0.225)

_ROTATE = {
    "rot90": Image.Transpose.ROTATE_90,
    "rot180": Image.Transpose.ROTATE_180,
    "rot270": Image.Transpose.ROTATE_270,
}


class ExtractError(Exception):
    """Anything that should stop the run with a data-error exit."""


def write_fms(maps: np.ndarray, path: Path) -> None:
    maps = np.ascontiguousarray(maps, dtype="<f4")
    if maps.ndim != 3:
        raise ExtractError(f"stack must be 3-D, got shape {maps.shape}")
    if not np.isfinite(maps).all():
        raise ExtractError(f"non-finite activations for {path.name}")
    k, h, w = maps.shape
    path.write_bytes(_FMS_HEADER.pack(FMS_MAGIC, FMS_VERSION, k, h, w) + maps.tobytes())


def load_network(weights_path: Path):
    """Build AlexNet sized to the supplied weights and load them strictly."""
    try:
        state = torch.load(weights_path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise ExtractError(f"cannot load weights {weights_path}: {exc}") from exc
    if not isinstance(state, dict) or "features.0.weight" not in state:
        raise ExtractError(f"{weights_path} is not an alexnet state dict")
    head = state.get("classifier.6.weight")
    num_classes = int(head.shape[0]) if head is not None else 1000
    model = torchvision.models.alexnet(weights=None, num_classes=num_classes)
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise ExtractError(f"weights do not fit the alexnet architecture: {exc}") from exc
    model.eval()
    return model


def read_image(path: Path) -> Image.Image:
    try:
        with Image.open(path) as img:
            return img.convert("RGB")
    except (UnidentifiedImageError, OSError) as exc:
        raise ExtractError(f"cannot decode image {path}: {exc}") from exc


def resize_shorter(img: Image.Image, target: int) -> Image.Image:
    w, h = img.size
    if w <= h:
        size = (target, max(1, round(h * target / w)))
    else:
        size = (max(1, round(w * target / h)), target)
    return img.resize(size, Image.Resampling.BILINEAR)


def center_crop(img: Image.Image, side: int) -> Image.Image:
    w, h = img.size
    left = (w - side) // 2
    top = (h - side) // 2
    return img.crop((left, top, left + side, top + side))


def five_crops(img: Image.Image, side: int):
    """center, tl, tr, bl, br crops, in the canonical tag order."""
    w, h = img.size
    if w < side or h < side:
        raise ExtractError(f"image {w}x{h} too small for {side}x{side} crops")
    return (
        center_crop(img, side),
        img.crop((0, 0, side, side)),
        img.crop((w - side, 0, w, side)),
        img.crop((0, h - side, side, h)),
        img.crop((w - side, h - side, w, h)),
    )


def to_tensor(img: Image.Image) -> torch.Tensor:
    arr = np.asarray(img, dtype=np.float32) / 255.0
    arr = (arr - np.float32(MEAN)) / np.float32(STD)
    return torch.from_numpy(arr.transpose(2, 0, 1)).unsqueeze(0)


def rotation_views(img: Image.Image, tags, rotate_after_crop: bool):
    """(tag, network input image) per rotation, rotating losslessly."""
    out = []
    for tag in tags:
        if rotate_after_crop:
            view = center_crop(resize_shorter(img, RESIZE_TO), CROP_TO)
            if tag != "rot0":
                view = view.transpose(_ROTATE[tag])
        else:
            view = img if tag == "rot0" else img.transpose(_ROTATE[tag])
            view = center_crop(resize_shorter(view, RESIZE_TO), CROP_TO)
        out.append((tag, view))
    return out


def crop_views(img: Image.Image):
    """The ten (tag, crop) pairs: five positions, then their mirrors."""
    resized = resize_shorter(img, RESIZE_TO)
    mirrored = resized.transpose(Image.Transpose.FLIP_LEFT_RIGHT)
    out = list(zip(TEN_CROP_TAGS[:5], five_crops(resized, CROP_TO)))
    out += list(zip(TEN_CROP_TAGS[5:], five_crops(mirrored, CROP_TO)))
    return out


def forward(model, batch: torch.Tensor, layer: str) -> np.ndarray:
    with torch.no_grad():
        maps = model.features(batch)
        if layer == "pool5":
            return maps.squeeze(0).numpy()
        x = torch.flatten(model.avgpool(maps), 1)
        x = model.classifier[:5](x)  # fc7 activations, before the ReLU
        return x.squeeze(0).numpy().reshape(-1, 1, 1)


def parse_image_list(path: Path, policy: str):
    """(image path, role, extra) rows from the TSV list."""
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ExtractError(f"cannot read image list {path}: {exc}") from exc
    roles = _POLICY_ROLES[policy]
    rows = []
    seen = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) not in (2, 3):
            raise ExtractError(
                f"{path}:{lineno}: expected 'path<TAB>role[<TAB>group-or-label]'"
            )
        img_path = (path.parent / parts[0]).resolve()
        role = parts[1].strip()
        if role not in roles:
            raise ExtractError(
                f"{path}:{lineno}: role {role!r} not valid for policy {policy!r} "
                f"(expected one of {roles})"
            )
        image_id = img_path.stem
        if image_id in seen:
            raise ExtractError(f"{path}:{lineno}: duplicate image id {image_id!r}")
        seen.add(image_id)
        extra = parts[2].strip() if len(parts) == 3 else None
        rows.append((img_path, role, extra))
    if not rows:
        raise ExtractError(f"image list {path} has no entries")
    return rows


def views_for(img: Image.Image, role: str, policy: str, rotate_after_crop: bool):
    if policy == "classification":
        return crop_views(img)
    tags = ROTATION_TAGS if role == "reference" else ("rot0",)
    return rotation_views(img, tags, rotate_after_crop)


def extract(rows, model, layer, policy, out_dir: Path, rotate_after_crop=False):
    """Run every (image, view) through the network; returns the fragment dict."""
    tensors = out_dir / "tensors"
    tensors.mkdir(parents=True, exist_ok=True)
    entries = []
    dims = None
    for img_path, role, extra in rows:
        img = read_image(img_path)
        image_id = img_path.stem
        views = {}
        for tag, view in views_for(img, role, policy, rotate_after_crop):
            maps = forward(model, to_tensor(view), layer)
            if dims is None:
                dims = maps.shape
            elif maps.shape != dims:
                raise ExtractError(
                    f"{image_id}/{tag}: stack shape {maps.shape} != {dims}"
                )
            rel = f"tensors/{image_id}_{tag}.fms"
            write_fms(maps, out_dir / rel)
            views[tag] = rel
        entry = {"id": image_id, "role": role, "views": views}
        if extra is not None:
            entry["group" if policy == "retrieval" else "label"] = extra
        entries.append(entry)
    return entries, dims


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def build_fragment(entries, dims, args) -> dict:
    k, h, w = dims
    geometry = (
        "resize, center crop, then rotate the crop"
        if args.rotate_after_crop
        else "rotate the full image, then resize and crop"
    )
    recipe = [
        "decode to RGB",
        f"views: {'10 crops (5 positions x 2 mirrors)' if args.policy == 'classification' else geometry}",
        f"resize shorter side to {RESIZE_TO} (bilinear)",
        f"crop {CROP_TO}x{CROP_TO}",
        "scale to [0, 1]",
        f"normalize mean={list(MEAN)} std={list(STD)}",
    ]
    return {
        "mode": args.policy,
        "entries": entries,
        "preprocess": {
            "network": args.network,
            "layer": args.layer,
            "stack_dims": {"k": k, "h": h, "w": w},
            "weights": str(Path(args.weights).resolve()),
            "weights_sha256": sha256_file(Path(args.weights)),
            "recipe": recipe,
        },
    }


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Extract FMS1 feature-map stacks from images with a pre-trained CNN."
    )
    parser.add_argument("--images", required=True, help="TSV list: path, role[, group/label]")
    parser.add_argument("--weights", required=True, help="alexnet state dict (.pt)")
    parser.add_argument("--network", choices=NETWORKS, default="places")
    parser.add_argument("--layer", choices=LAYERS, default="pool5")
    parser.add_argument("--policy", choices=POLICIES, default="retrieval")
    parser.add_argument(
        "--rotate-after-crop",
        action="store_true",
        dest="rotate_after_crop",
        help="rotate the center crop instead of the full image",
    )
    parser.add_argument("--out", required=True, help="output directory")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    torch.set_num_threads(1)  # view-by-view inference, reproducible results
    try:
        rows = parse_image_list(Path(args.images), args.policy)
        model = load_network(Path(args.weights))
        out_dir = Path(args.out)
        entries, dims = extract(
            rows, model, args.layer, args.policy, out_dir, args.rotate_after_crop
        )
        fragment = build_fragment(entries, dims, args)
        fragment_path = out_dir / "fragment.json"
        fragment_path.write_text(
            json.dumps(fragment, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
    except ExtractError as exc:
        print(f"extract: error: {exc}", file=sys.stderr)
        return 3
    n_files = sum(len(e["views"]) for e in entries)
    k, h, w = dims
    print(f"wrote {n_files} stacks ({k}x{h}x{w}) for {len(entries)} images -> {out_dir}")
    print(f"fragment: {fragment_path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
