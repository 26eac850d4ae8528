"""Pooled CNN feature-map descriptors for retrieval and scene classification.

Pre-extracted convolutional feature-map stacks are pooled per map into
compact descriptors (max, avg, or their concatenation), optionally
whitened or PCA-whitened on the reference corpus, then either ranked by
rotation-min cosine distance and scored with mean average precision, or
fed to a one-vs-rest SGD linear classifier with a 10-crop vote.
"""

from .classify import (
    CropVote,
    Hyperparams,
    LinearClassifier,
    classify_image,
    evaluate_splits,
    load_classifier,
    predict_crop,
    save_classifier,
    train,
)
from .errors import DataError, NumericError, PoolrankError, UsageError
from .pipeline import RunConfig, build_config, run_pipeline
from .pooling import (
    Descriptor,
    pool,
    pool_batch,
    read_descriptor,
    write_descriptor,
)
from .retrieval import (
    EvalResult,
    Ranking,
    RetrievalIndex,
    average_precision,
    build_index,
    cosine_distance,
    euclidean_distance,
    evaluate_map,
    load_index,
    query,
    query_batch,
    save_index,
)
from .tensor_store import (
    DatasetManifest,
    FeatureMapStack,
    ManifestEntry,
    ROTATION_TAGS,
    TEN_CROP_TAGS,
    VIEW_TAGS,
    load_manifest,
    read_stack,
    validate_manifest,
    write_stack,
)
from .whitening import (
    WhiteningModel,
    apply_whitener,
    apply_whitener_batch,
    fit_whitener,
    load_model,
    save_model,
)

__version__ = "0.1.0"

__all__ = [
    "CropVote",
    "DataError",
    "DatasetManifest",
    "Descriptor",
    "EvalResult",
    "FeatureMapStack",
    "Hyperparams",
    "LinearClassifier",
    "ManifestEntry",
    "NumericError",
    "PoolrankError",
    "ROTATION_TAGS",
    "Ranking",
    "RetrievalIndex",
    "RunConfig",
    "TEN_CROP_TAGS",
    "UsageError",
    "VIEW_TAGS",
    "WhiteningModel",
    "apply_whitener",
    "apply_whitener_batch",
    "average_precision",
    "build_config",
    "build_index",
    "classify_image",
    "cosine_distance",
    "euclidean_distance",
    "evaluate_map",
    "evaluate_splits",
    "fit_whitener",
    "load_classifier",
    "load_index",
    "load_manifest",
    "load_model",
    "pool",
    "pool_batch",
    "predict_crop",
    "query",
    "query_batch",
    "read_descriptor",
    "read_stack",
    "run_pipeline",
    "save_classifier",
    "save_index",
    "save_model",
    "train",
    "validate_manifest",
    "write_descriptor",
    "write_stack",
]
