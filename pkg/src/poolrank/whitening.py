"""Per-dimension whitening and full-dimension PCA-whitening of descriptors.

Plain mode subtracts the corpus mean and scales each dimension by the
inverse population standard deviation (clamped at epsilon). PCA mode
rotates into the covariance eigenbasis and scales by inverse root
eigenvalue; no dimensions are dropped. The two transforms are mutually
exclusive per model. Fit statistics come from the reference/training
corpus only; queries are transformed with the fitted model.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, NumericError, UsageError
from .pooling import Descriptor
from .util import l2_normalize_rows

DEFAULT_EPSILON = 1e-6
ORTHOGONALITY_TOL = 1e-5

PWM_MAGIC = b"PWM1"
PWM_VERSION = 1
_PWM_HEADER = struct.Struct("<4sB3xIIQd")
_FLAG_PCA = 1
_FLAG_L2_INPUT = 2


@dataclass(frozen=True, eq=False)
class WhiteningModel:
    """Affine descriptor transform fitted on a corpus.

    ``rotation`` (rows = principal axes, descending eigenvalue) and
    ``inv_singular`` are both present for PCA models and both None for
    plain ones. All arrays are float64.
    """

    dim: int
    mean: np.ndarray
    inv_std: np.ndarray
    rotation: np.ndarray | None
    inv_singular: np.ndarray | None
    epsilon: float
    fit_count: int
    l2_normalize_input: bool = False

    def __post_init__(self):
        if (self.rotation is None) != (self.inv_singular is None):
            raise DataError("rotation and inv_singular must be present together")
        if self.mean.shape != (self.dim,) or self.inv_std.shape != (self.dim,):
            raise DataError(
                f"mean/inv_std must have shape ({self.dim},)", code="bad_dims"
            )
        if not (np.isfinite(self.inv_std).all() and (self.inv_std > 0).all()):
            raise DataError("inv_std must be positive and finite", code="non_finite")
        if self.rotation is not None:
            if self.rotation.shape != (self.dim, self.dim) or self.inv_singular.shape != (
                self.dim,
            ):
                raise DataError(
                    f"rotation must be {self.dim}x{self.dim} with matching inv_singular",
                    code="bad_dims",
                )
            if not (
                np.isfinite(self.inv_singular).all() and (self.inv_singular > 0).all()
            ):
                raise DataError(
                    "inv_singular must be positive and finite", code="non_finite"
                )

    @property
    def mode(self) -> str:
        return "pca" if self.rotation is not None else "plain"

    def digest(self) -> str:
        """Short content hash identifying this exact model."""
        return hashlib.sha256(_model_bytes(self)).hexdigest()[:12]

    @property
    def provenance(self) -> str:
        return f"{self.mode}@{self.digest()}"

    def __eq__(self, other) -> bool:
        if not isinstance(other, WhiteningModel):
            return NotImplemented
        return _model_bytes(self) == _model_bytes(other)


def _as_matrix(descriptors) -> np.ndarray:
    vectors = [np.asarray(d.values, dtype=np.float64) for d in descriptors]
    if len(vectors) < 2:
        raise DataError(
            f"whitening needs at least 2 descriptors, got {len(vectors)}",
            code="too_few",
        )
    dim = vectors[0].shape[0]
    for v in vectors:
        if v.shape[0] != dim:
            raise DataError(
                f"mixed descriptor dimensions: {dim} vs {v.shape[0]}",
                code="dim_mismatch",
            )
    return np.stack(vectors)


def fit_whitener(
    descriptors,
    use_pca: bool = False,
    epsilon: float = DEFAULT_EPSILON,
    l2_normalize_input: bool = False,
) -> WhiteningModel:
    """Fit whitening statistics on a corpus of descriptors.

    Standard deviations and covariance are population estimates (divide by
    N). Eigenvector signs are fixed by making each row's largest-magnitude
    component positive, so models are identical across runs and platforms.
    """
    if not np.isfinite(epsilon) or epsilon <= 0.0:
        raise UsageError(f"epsilon must be a positive real, got {epsilon}")
    x = _as_matrix(descriptors)
    if l2_normalize_input:
        x = l2_normalize_rows(x)
    n, dim = x.shape
    mean = x.mean(axis=0)
    sigma = x.std(axis=0)
    if not (np.isfinite(mean).all() and np.isfinite(sigma).all()):
        raise NumericError("non-finite whitening statistics")
    inv_std = 1.0 / np.maximum(sigma, epsilon)

    rotation = None
    inv_singular = None
    if use_pca:
        centered = x - mean
        cov = centered.T @ centered / n
        if not np.isfinite(cov).all():
            raise NumericError("non-finite covariance")
        eigvals, eigvecs = np.linalg.eigh(cov)
        order = np.argsort(eigvals)[::-1]
        eigvals = np.maximum(eigvals[order], 0.0)
        rotation = np.ascontiguousarray(eigvecs[:, order].T)
        # Deterministic sign: largest-magnitude component of each axis positive.
        for row in rotation:
            if row[np.argmax(np.abs(row))] < 0:
                row *= -1.0
        gram_err = np.abs(rotation @ rotation.T - np.eye(dim)).max()
        if gram_err > ORTHOGONALITY_TOL:
            raise NumericError(f"rotation not orthogonal (max deviation {gram_err:.2e})")
        inv_singular = 1.0 / np.sqrt(eigvals + epsilon)

    if not np.isfinite(inv_std).all() or (
        inv_singular is not None and not np.isfinite(inv_singular).all()
    ):
        raise NumericError("non-finite whitening scales")
    return WhiteningModel(
        dim=dim,
        mean=mean,
        inv_std=inv_std,
        rotation=rotation,
        inv_singular=inv_singular,
        epsilon=float(epsilon),
        fit_count=n,
        l2_normalize_input=l2_normalize_input,
    )


def transform_matrix(model: WhiteningModel, x: np.ndarray) -> np.ndarray:
    """Apply the model to rows of a float array; returns float64 rows."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.dim:
        raise DataError(
            f"descriptor dim {x.shape[-1]} != model dim {model.dim}", code="dim_mismatch"
        )
    if model.l2_normalize_input:
        x = l2_normalize_rows(np.atleast_2d(x)).reshape(x.shape)
    centered = x - model.mean
    if model.rotation is not None:
        out = (centered @ model.rotation.T) * model.inv_singular
    else:
        out = centered * model.inv_std
    if not np.isfinite(out).all():
        raise NumericError("non-finite whitened output")
    return out


def apply_whitener(model: WhiteningModel, descriptor: Descriptor) -> Descriptor:
    """Transform one descriptor; provenance records mode and model digest."""
    out = transform_matrix(model, descriptor.values[None, :])[0]
    return Descriptor(
        descriptor.image_id,
        descriptor.view,
        out.astype(np.float32),
        strategy=descriptor.strategy,
        normalization=model.provenance,
    )


def apply_whitener_batch(model: WhiteningModel, descriptors) -> list:
    descriptors = list(descriptors)
    if not descriptors:
        return []
    rows = transform_matrix(model, np.stack([d.values for d in descriptors]))
    return [
        Descriptor(
            d.image_id,
            d.view,
            row.astype(np.float32),
            strategy=d.strategy,
            normalization=model.provenance,
        )
        for d, row in zip(descriptors, rows)
    ]


def _model_bytes(model: WhiteningModel) -> bytes:
    flags = 0
    if model.rotation is not None:
        flags |= _FLAG_PCA
    if model.l2_normalize_input:
        flags |= _FLAG_L2_INPUT
    parts = [
        _PWM_HEADER.pack(
            PWM_MAGIC, PWM_VERSION, model.dim, flags, model.fit_count, model.epsilon
        ),
        np.ascontiguousarray(model.mean, dtype="<f8").tobytes(),
        np.ascontiguousarray(model.inv_std, dtype="<f8").tobytes(),
    ]
    if model.rotation is not None:
        parts.append(np.ascontiguousarray(model.rotation, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(model.inv_singular, dtype="<f8").tobytes())
    return b"".join(parts)


def save_model(model: WhiteningModel, path) -> None:
    try:
        Path(path).write_bytes(_model_bytes(model))
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}", code="io") from exc


def load_model(path) -> WhiteningModel:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}", code="io") from exc
    if len(data) < _PWM_HEADER.size:
        raise DataError(f"{path}: truncated header", code="truncated")
    magic, version, dim, flags, fit_count, epsilon = _PWM_HEADER.unpack_from(data)
    if magic != PWM_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}", code="bad_magic")
    if version != PWM_VERSION:
        raise DataError(f"{path}: unsupported version {version}", code="bad_version")
    if flags & ~(_FLAG_PCA | _FLAG_L2_INPUT):
        raise DataError(f"{path}: unknown flags {flags:#x}", code="bad_flags")
    if dim < 1:
        raise DataError(f"{path}: zero dimension", code="bad_dims")
    use_pca = bool(flags & _FLAG_PCA)
    n_values = 2 * dim + (dim * dim + dim if use_pca else 0)
    expected = _PWM_HEADER.size + 8 * n_values
    if len(data) < expected:
        raise DataError(
            f"{path}: truncated payload ({len(data)} of {expected} bytes)",
            code="truncated",
        )
    if len(data) > expected:
        raise DataError(f"{path}: {len(data) - expected} trailing bytes", code="trailing_bytes")
    values = np.frombuffer(data, "<f8", count=n_values, offset=_PWM_HEADER.size)
    mean = values[:dim].copy()
    inv_std = values[dim : 2 * dim].copy()
    rotation = None
    inv_singular = None
    if use_pca:
        rotation = values[2 * dim : 2 * dim + dim * dim].reshape(dim, dim).copy()
        inv_singular = values[2 * dim + dim * dim :].copy()
    return WhiteningModel(
        dim=dim,
        mean=mean,
        inv_std=inv_std,
        rotation=rotation,
        inv_singular=inv_singular,
        epsilon=epsilon,
        fit_count=fit_count,
        l2_normalize_input=bool(flags & _FLAG_L2_INPUT),
    )
