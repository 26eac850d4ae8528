"""Bit-exact tensor files and dataset manifests.

Stack files ("FMS1") are fixed little-endian regardless of host: 4-byte
magic, 1-byte version, 3 reserved zero bytes, three u32 dims (K, H, W),
then K*H*W float32 values, map-major and row-major within each map.

Manifests are UTF-8 JSON binding image ids to tensor files per view, with
relevance groups (retrieval) or class labels (classification).
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError

FMS_MAGIC = b"FMS1"
FMS_VERSION = 1
_FMS_HEADER = struct.Struct("<4sB3xIII")

# Declared element count is capped so a corrupt header cannot trigger a
# absurd allocation before the size check runs.
MAX_ELEMENTS = 1 << 31

ROTATION_TAGS = ("rot0", "rot90", "rot180", "rot270")
CROP_POSITIONS = ("center", "tl", "tr", "bl", "br")
# Canonical 10-crop order: five positions, then their horizontal mirrors.
TEN_CROP_TAGS = tuple(f"crop_{p}" for p in CROP_POSITIONS) + tuple(
    f"crop_{p}_m" for p in CROP_POSITIONS
)
VIEW_TAGS = ROTATION_TAGS + TEN_CROP_TAGS

ROLES = ("query", "reference", "train", "test")
MODES = ("retrieval", "classification")
_MODE_ROLES = {"retrieval": ("query", "reference"), "classification": ("train", "test")}


def is_rotation(view: str) -> bool:
    return view in ROTATION_TAGS


def require_view(view: str) -> str:
    if view not in VIEW_TAGS:
        raise DataError(f"unknown view tag {view!r}", code="bad_view")
    return view


@dataclass(frozen=True, eq=False)
class FeatureMapStack:
    """K feature maps of H x W activations for one image view.

    ``maps`` is coerced to a read-only, C-contiguous little-endian float32
    array of shape (K, H, W). Values must be finite; negatives are allowed
    (fc7 vectors) but surfaced by validation reports.
    """

    image_id: str
    view: str
    maps: np.ndarray

    def __post_init__(self):
        require_view(self.view)
        maps = np.ascontiguousarray(self.maps, dtype="<f4")
        if maps.ndim != 3:
            raise DataError(
                f"stack must be K x H x W, got shape {maps.shape}", code="bad_dims"
            )
        if min(maps.shape) < 1:
            raise DataError(
                f"stack dims must all be >= 1, got {maps.shape}", code="bad_dims"
            )
        if not np.isfinite(maps).all():
            raise DataError("stack contains non-finite values", code="non_finite")
        maps.flags.writeable = False
        object.__setattr__(self, "maps", maps)

    @property
    def k(self) -> int:
        return self.maps.shape[0]

    @property
    def has_negatives(self) -> bool:
        return bool((self.maps < 0).any())

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeatureMapStack):
            return NotImplemented
        return (
            self.image_id == other.image_id
            and self.view == other.view
            and self.maps.shape == other.maps.shape
            and self.maps.tobytes() == other.maps.tobytes()
        )


def write_stack(stack: FeatureMapStack, path) -> None:
    """Serialize a stack; output bytes depend only on the stack contents."""
    k, h, w = stack.maps.shape
    header = _FMS_HEADER.pack(FMS_MAGIC, FMS_VERSION, k, h, w)
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(stack.maps.tobytes(order="C"))
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}", code="io") from exc


def read_stack(path, image_id: str = "", view: str = "rot0") -> FeatureMapStack:
    """Parse and validate an FMS1 file.

    Identity is not part of the format, so ``image_id``/``view`` are
    supplied by the caller (usually from a manifest).
    """
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}", code="io") from exc
    if len(data) < _FMS_HEADER.size:
        raise DataError(f"{path}: truncated header", code="truncated")
    magic, version, k, h, w = _FMS_HEADER.unpack_from(data)
    if magic != FMS_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}", code="bad_magic")
    if version != FMS_VERSION:
        raise DataError(f"{path}: unsupported version {version}", code="bad_version")
    if min(k, h, w) < 1:
        raise DataError(f"{path}: zero dimension in header", code="bad_dims")
    count = k * h * w
    if count > MAX_ELEMENTS:
        raise DataError(f"{path}: dimensions overflow ({k}x{h}x{w})", code="dim_overflow")
    expected = _FMS_HEADER.size + 4 * count
    if len(data) < expected:
        raise DataError(
            f"{path}: truncated payload ({len(data)} of {expected} bytes)",
            code="truncated",
        )
    if len(data) > expected:
        raise DataError(
            f"{path}: {len(data) - expected} trailing bytes", code="trailing_bytes"
        )
    values = np.frombuffer(data, "<f4", count=count, offset=_FMS_HEADER.size)
    if not np.isfinite(values).all():
        raise DataError(f"{path}: non-finite values in payload", code="non_finite")
    return FeatureMapStack(image_id, view, values.reshape(k, h, w).copy())


@dataclass(frozen=True)
class ManifestEntry:
    image_id: str
    role: str
    views: dict  # view tag -> absolute path
    group_id: str | None = None
    class_label: str | None = None


@dataclass(frozen=True)
class DatasetManifest:
    mode: str
    entries: tuple

    def with_role(self, role: str) -> tuple:
        return tuple(e for e in self.entries if e.role == role)

    def queries(self) -> tuple:
        return self.with_role("query")

    def references(self) -> tuple:
        return self.with_role("reference")

    def entry(self, image_id: str) -> ManifestEntry:
        for e in self.entries:
            if e.image_id == image_id:
                return e
        raise KeyError(image_id)


def _manifest_error(path, msg, code="bad_manifest"):
    raise DataError(f"{path}: {msg}", code=code)


def load_manifest(path) -> DatasetManifest:
    """Load, validate, and normalize a manifest; view paths become absolute.

    Checks: unique ids, known roles compatible with the mode, resolvable
    tensor paths, non-empty query groups (retrieval), labels on every
    entry (classification). Loading is pure: same file, same result.
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}", code="io") from exc
    except json.JSONDecodeError as exc:
        _manifest_error(path, f"invalid JSON: {exc}")
    if not isinstance(raw, dict):
        _manifest_error(path, "top level must be an object")
    mode = raw.get("mode")
    if mode not in MODES:
        _manifest_error(path, f"mode must be one of {MODES}, got {mode!r}")
    items = raw.get("entries")
    if not isinstance(items, list) or not items:
        _manifest_error(path, "entries must be a non-empty array")

    base = path.resolve().parent
    entries = []
    seen = set()
    for i, item in enumerate(items):
        if not isinstance(item, dict):
            _manifest_error(path, f"entry {i} is not an object")
        image_id = item.get("id")
        if not isinstance(image_id, str) or not image_id:
            _manifest_error(path, f"entry {i} has no id")
        if image_id in seen:
            _manifest_error(path, f"duplicate image id {image_id!r}", code="duplicate_id")
        seen.add(image_id)
        role = item.get("role")
        if role not in _MODE_ROLES[mode]:
            _manifest_error(
                path,
                f"entry {image_id!r}: role {role!r} not valid for mode {mode!r}",
                code="bad_role",
            )
        views_raw = item.get("views")
        if not isinstance(views_raw, dict) or not views_raw:
            _manifest_error(path, f"entry {image_id!r}: views must be a non-empty object")
        views = {}
        for tag, rel in views_raw.items():
            if tag not in VIEW_TAGS:
                _manifest_error(
                    path, f"entry {image_id!r}: unknown view {tag!r}", code="bad_view"
                )
            if not isinstance(rel, str) or not rel:
                _manifest_error(path, f"entry {image_id!r}: view {tag!r} has no path")
            resolved = (base / rel).resolve()
            if not resolved.is_file():
                _manifest_error(
                    path,
                    f"entry {image_id!r}: view {tag!r} points at missing file {resolved}",
                    code="dangling_path",
                )
            views[tag] = str(resolved)
        group = item.get("group")
        if group is not None and (not isinstance(group, str) or not group):
            _manifest_error(path, f"entry {image_id!r}: group must be a non-empty string")
        label = item.get("label")
        if label is not None and (not isinstance(label, str) or not label):
            _manifest_error(path, f"entry {image_id!r}: label must be a non-empty string")
        entries.append(ManifestEntry(image_id, role, views, group, label))

    if mode == "retrieval":
        members = {}
        for e in entries:
            if e.role != "query" and e.group_id is not None:
                members.setdefault(e.group_id, 0)
                members[e.group_id] += 1
        for e in entries:
            if e.role == "query":
                if e.group_id is None:
                    _manifest_error(
                        path, f"query {e.image_id!r} has no group", code="missing_group"
                    )
                if members.get(e.group_id, 0) < 1:
                    _manifest_error(
                        path,
                        f"query {e.image_id!r}: group {e.group_id!r} has no non-query member",
                        code="empty_group",
                    )
    else:
        for e in entries:
            if e.class_label is None:
                _manifest_error(
                    path, f"entry {e.image_id!r} has no class label", code="missing_label"
                )

    return DatasetManifest(mode=mode, entries=tuple(entries))


@dataclass
class ValidationReport:
    manifest_path: str
    mode: str = ""
    n_entries: int = 0
    n_tensors: int = 0
    issues: list = field(default_factory=list)
    negatives: list = field(default_factory=list)  # (image_id, view) with values < 0

    @property
    def ok(self) -> bool:
        return not self.issues

    def lines(self) -> list:
        out = [
            f"manifest: {self.manifest_path}",
            f"mode: {self.mode}",
            f"entries: {self.n_entries}",
            f"tensors validated: {self.n_tensors}",
        ]
        for image_id, view in self.negatives:
            out.append(f"note: negative activations in {image_id} [{view}]")
        for issue in self.issues:
            out.append(f"error: {issue}")
        out.append("result: " + ("OK" if self.ok else "INVALID"))
        return out


def validate_manifest(path) -> ValidationReport:
    """Full validation pass: manifest integrity plus every referenced tensor."""
    report = ValidationReport(manifest_path=str(path))
    manifest = load_manifest(path)
    report.mode = manifest.mode
    report.n_entries = len(manifest.entries)
    for e in manifest.entries:
        for tag, tensor_path in sorted(e.views.items()):
            try:
                stack = read_stack(tensor_path, image_id=e.image_id, view=tag)
            except DataError as exc:
                report.issues.append(f"{e.image_id} [{tag}]: {exc}")
                continue
            report.n_tensors += 1
            if stack.has_negatives:
                report.negatives.append((e.image_id, tag))
    return report
