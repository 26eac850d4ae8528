"""Collapse feature-map stacks into compact descriptors.

Each of the K maps reduces to one scalar (max or mean over its H*W cells);
hybrid concatenates max first, then avg, giving 2K dims. Means accumulate
in float64 and round once to float32 so results do not depend on batch
partitioning or thread count.
"""
from __future__ import annotations

import urllib.parse
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor_store
from .errors import DataError, UsageError
from .util import resolve_threads

STRATEGIES = ("max", "avg", "hybrid")


def require_strategy(strategy: str) -> str:
    if strategy not in STRATEGIES:
        raise UsageError(f"unknown pooling strategy {strategy!r}, expected one of {STRATEGIES}")
    return strategy


@dataclass(frozen=True, eq=False)
class Descriptor:
    """Fixed-length float32 vector pooled from one image view.

    ``strategy`` and ``normalization`` record provenance: which pooling
    produced the values and which whitening (if any) was applied.
    """

    image_id: str
    view: str
    values: np.ndarray
    strategy: str = "unknown"
    normalization: str = "none"

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype="<f4").reshape(-1)
        if values.size < 1:
            raise DataError("descriptor must have at least one value", code="bad_dims")
        if not np.isfinite(values).all():
            raise DataError("descriptor contains non-finite values", code="non_finite")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Descriptor):
            return NotImplemented
        return (
            self.image_id == other.image_id
            and self.view == other.view
            and self.strategy == other.strategy
            and self.normalization == other.normalization
            and self.values.tobytes() == other.values.tobytes()
        )


def pool(stack: tensor_store.FeatureMapStack, strategy: str) -> Descriptor:
    """Pool one stack: element i comes from map i (maps 1x1 pass through)."""
    require_strategy(strategy)
    if strategy in ("max", "hybrid"):
        mx = stack.maps.max(axis=(1, 2))
    if strategy in ("avg", "hybrid"):
        av = stack.maps.mean(axis=(1, 2), dtype=np.float64).astype(np.float32)
    if strategy == "max":
        values = mx
    elif strategy == "avg":
        values = av
    else:
        values = np.concatenate([mx, av])
    return Descriptor(stack.image_id, stack.view, values, strategy=strategy)


def pool_batch(stacks, strategy: str, threads: int | None = None) -> list:
    """Pool a sequence of stacks, order-preserving and thread-count invariant."""
    require_strategy(strategy)
    stacks = list(stacks)
    if not stacks:
        return []
    k0 = stacks[0].k
    for s in stacks:
        if s.k != k0:
            raise DataError(
                f"mixed map counts in batch: {k0} vs {s.k} ({s.image_id})",
                code="mixed_k",
            )
    workers = resolve_threads(threads)
    if workers <= 1 or len(stacks) == 1:
        return [pool(s, strategy) for s in stacks]
    with ThreadPoolExecutor(max_workers=workers) as pool_exec:
        return list(pool_exec.map(lambda s: pool(s, strategy), stacks))


def descriptor_filename(image_id: str, view: str) -> str:
    """Filesystem-safe name; ids are percent-encoded, views never contain '__'."""
    return f"{urllib.parse.quote(image_id, safe='')}__{view}.fms"


def parse_descriptor_filename(name: str) -> tuple:
    stem = name[: -len(".fms")] if name.endswith(".fms") else name
    encoded_id, sep, view = stem.rpartition("__")
    if not sep or view not in tensor_store.VIEW_TAGS:
        raise DataError(f"cannot parse descriptor filename {name!r}", code="bad_name")
    return urllib.parse.unquote(encoded_id), view


def write_descriptor(descriptor: Descriptor, path) -> None:
    """Store a descriptor as an FMS1 file of shape D x 1 x 1."""
    stack = tensor_store.FeatureMapStack(
        descriptor.image_id, descriptor.view, descriptor.values.reshape(-1, 1, 1)
    )
    tensor_store.write_stack(stack, path)


def read_descriptor(
    path,
    image_id: str | None = None,
    view: str | None = None,
    strategy: str = "unknown",
    normalization: str = "none",
) -> Descriptor:
    """Load a descriptor file; identity defaults to the filename encoding."""
    if image_id is None or view is None:
        parsed_id, parsed_view = parse_descriptor_filename(Path(path).name)
        image_id = parsed_id if image_id is None else image_id
        view = parsed_view if view is None else view
    stack = tensor_store.read_stack(path, image_id=image_id, view=view)
    if stack.maps.shape[1:] != (1, 1):
        raise DataError(
            f"{path}: descriptor file must be D x 1 x 1, got {stack.maps.shape}",
            code="bad_dims",
        )
    return Descriptor(
        image_id, view, stack.maps.reshape(-1), strategy=strategy, normalization=normalization
    )


def iter_descriptor_files(directory) -> list:
    """All .fms files under a directory, sorted for deterministic ordering."""
    return sorted(Path(directory).rglob("*.fms"))
