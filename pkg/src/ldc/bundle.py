"""Feature-bundle container (.ldcf) and few-shot episode sampling.

A bundle holds everything one classification task needs, with encoders
already applied offline: per-image multi-level feature vectors, labels,
class names, one text embedding per class, and optionally precomputed
final image embeddings plus the frozen projector.

On-disk layout (all integers little-endian, arrays row-major float64):

    bytes 0..3   magic b"LDCF"
    bytes 4..7   u32 container version (currently 1)
    bytes 8..11  u32 manifest byte length
    manifest     UTF-8 JSON (schema below)
    payload      the arrays named in manifest["arrays"], concatenated raw

Manifest schema (all keys required unless marked optional):

    class_count        int, C
    class_names        list of C strings
    level_count        int, number of feature levels (4)
    level_dims         list of per-level feature dims
    embedding_dim      int, dim of text/image embeddings
    temperature        float, softmax scale for zero-shot logits
    record_count       int, N
    record_ids         list of N strings
    labels             list of N ints in [0, C)
    has_image_embeddings  bool
    projector          {"identity": true} or
                       {"identity": false, "in_dim": int, "out_dim": int}
    test_indices       optional list of record indices forming a fixed
                       test partition; null means "everything not sampled
                       for training is test"
    metadata           free-form dict (creation info, pooling choice, ...)
    arrays             ordered list of {"name": str, "shape": [ints]}
                       describing the payload; names are level_1..level_L,
                       image_embeddings (optional), text_embeddings,
                       projector_weight / projector_bias (optional)

Features are stored un-normalized; L2 normalization happens where cosine
similarity needs it. Bundles are immutable after load and safe to share
across threads read-only.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    BundleFormatError,
    BundleValidationError,
    FormatVersionError,
    InsufficientDataError,
    TrailingDataError,
    TruncatedError,
)
from .nn import LinearLayer

MAGIC = b"LDCF"
FORMAT_VERSION = 1

# Philox stream tag for episode sampling (seed goes in the other key word).
_SAMPLE_STREAM = 0x5A3C6B01


@dataclass
class FeatureBundle:
    """In-memory form of one .ldcf container. Treat as immutable."""

    class_names: list[str]
    level_dims: tuple[int, ...]
    embedding_dim: int
    temperature: float
    record_ids: list[str]
    labels: np.ndarray                      # (N,) int64
    levels: list[np.ndarray]                # L arrays, each (N, level_dims[l])
    text_embeddings: np.ndarray             # (C, embedding_dim)
    image_embeddings: np.ndarray | None = None   # (N, embedding_dim)
    projector: LinearLayer | None = None    # None means identity
    test_indices: np.ndarray | None = None  # explicit test partition
    metadata: dict = field(default_factory=dict)

    @property
    def class_count(self) -> int:
        return len(self.class_names)

    @property
    def level_count(self) -> int:
        return len(self.level_dims)

    @property
    def record_count(self) -> int:
        return len(self.record_ids)

    def validate(self) -> None:
        c = self.class_count
        n = self.record_count
        if c < 2:
            raise BundleValidationError(f"need at least 2 classes, got {c}")
        if len(self.level_dims) != len(self.levels):
            raise BundleValidationError(
                f"{len(self.levels)} level arrays for {len(self.level_dims)} dims"
            )
        if self.labels.shape != (n,):
            raise BundleValidationError(
                f"labels shape {self.labels.shape} != ({n},)"
            )
        for idx in range(n):
            label = int(self.labels[idx])
            if not 0 <= label < c:
                raise BundleValidationError(
                    f"record {self.record_ids[idx]!r} has label {label} "
                    f"outside [0, {c})"
                )
        for lvl, (arr, dim) in enumerate(zip(self.levels, self.level_dims), start=1):
            if arr.shape != (n, dim):
                raise BundleValidationError(
                    f"level {lvl} array shape {arr.shape} != ({n}, {dim})"
                )
        if self.text_embeddings.shape != (c, self.embedding_dim):
            raise BundleValidationError(
                f"text embeddings shape {self.text_embeddings.shape} != "
                f"({c}, {self.embedding_dim})"
            )
        norms = np.linalg.norm(self.text_embeddings, axis=1)
        if np.any(norms == 0.0):
            bad = self.class_names[int(np.argmin(norms))]
            raise BundleValidationError(f"text embedding for class {bad!r} is all-zero")
        if self.image_embeddings is not None and self.image_embeddings.shape != (
            n, self.embedding_dim,
        ):
            raise BundleValidationError(
                f"image embeddings shape {self.image_embeddings.shape} != "
                f"({n}, {self.embedding_dim})"
            )
        if self.projector is not None and self.projector.out_dim != self.embedding_dim:
            raise BundleValidationError(
                f"projector output dim {self.projector.out_dim} != "
                f"embedding dim {self.embedding_dim}"
            )
        if self.test_indices is not None:
            t = np.asarray(self.test_indices)
            if t.size and (t.min() < 0 or t.max() >= n):
                raise BundleValidationError("test_indices out of record range")
            if len(np.unique(t)) != t.size:
                raise BundleValidationError("test_indices contains duplicates")
        for name, arr in self._payload_arrays():
            if not np.isfinite(arr).all():
                raise BundleValidationError(f"array {name!r} has non-finite values")

    def _payload_arrays(self) -> list[tuple[str, np.ndarray]]:
        arrays = [(f"level_{lvl}", arr) for lvl, arr in enumerate(self.levels, start=1)]
        if self.image_embeddings is not None:
            arrays.append(("image_embeddings", self.image_embeddings))
        arrays.append(("text_embeddings", self.text_embeddings))
        if self.projector is not None:
            arrays.append(("projector_weight", self.projector.weight))
            arrays.append(("projector_bias", self.projector.bias))
        return arrays

    def manifest(self) -> dict:
        if self.projector is None:
            projector = {"identity": True}
        else:
            projector = {
                "identity": False,
                "in_dim": self.projector.in_dim,
                "out_dim": self.projector.out_dim,
            }
        return {
            "class_count": self.class_count,
            "class_names": list(self.class_names),
            "level_count": self.level_count,
            "level_dims": list(self.level_dims),
            "embedding_dim": self.embedding_dim,
            "temperature": self.temperature,
            "record_count": self.record_count,
            "record_ids": list(self.record_ids),
            "labels": [int(v) for v in self.labels],
            "has_image_embeddings": self.image_embeddings is not None,
            "projector": projector,
            "test_indices": None if self.test_indices is None
            else [int(v) for v in self.test_indices],
            "metadata": self.metadata,
            "arrays": [
                {"name": name, "shape": list(arr.shape)}
                for name, arr in self._payload_arrays()
            ],
        }

    def indices_of_class(self, label: int, pool: np.ndarray | None = None) -> np.ndarray:
        idx = np.flatnonzero(self.labels == label)
        if pool is not None:
            idx = idx[np.isin(idx, pool)]
        return idx


@dataclass
class EpisodeSplit:
    """Few-shot episode: exactly K train records per class, rest for test."""

    train_indices: np.ndarray
    test_indices: np.ndarray
    shots: int

    def validate(self, bundle: FeatureBundle) -> None:
        counts = np.bincount(bundle.labels[self.train_indices],
                             minlength=bundle.class_count)
        if not np.all(counts == self.shots):
            raise BundleValidationError(
                f"per-class train counts {counts.tolist()} != shots {self.shots}"
            )
        if np.intersect1d(self.train_indices, self.test_indices).size:
            raise BundleValidationError("train and test indices overlap")


def write_bundle(bundle: FeatureBundle, path) -> None:
    """Serialize to .ldcf. Round trip is byte-exact including float bits."""
    bundle.validate()
    manifest_bytes = json.dumps(
        bundle.manifest(), sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(manifest_bytes)))
        fh.write(manifest_bytes)
        for _, arr in bundle._payload_arrays():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_bundle(path) -> FeatureBundle:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    if len(blob) < 12:
        raise TruncatedError(f"{path}: header truncated at {len(blob)} bytes")
    version = struct.unpack_from("<I", blob, 4)[0]
    if version != FORMAT_VERSION:
        raise FormatVersionError(
            f"{path}: container version {version}, reader supports {FORMAT_VERSION}"
        )
    manifest_len = struct.unpack_from("<I", blob, 8)[0]
    offset = 12
    if len(blob) < offset + manifest_len:
        raise TruncatedError(f"{path}: manifest truncated")
    try:
        manifest = json.loads(blob[offset:offset + manifest_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BundleFormatError(f"{path}: manifest is not valid JSON: {exc}") from exc
    offset += manifest_len

    arrays: dict[str, np.ndarray] = {}
    for entry in manifest.get("arrays", []):
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape)) * 8
        if len(blob) < offset + nbytes:
            raise TruncatedError(
                f"{path}: payload array {entry['name']!r} truncated "
                f"(need {nbytes} bytes at offset {offset})"
            )
        flat = np.frombuffer(blob, dtype="<f8", count=int(np.prod(shape)),
                             offset=offset)
        arrays[entry["name"]] = flat.reshape(shape).copy()
        offset += nbytes
    if offset != len(blob):
        raise TrailingDataError(
            f"{path}: {len(blob) - offset} unexpected bytes after payload"
        )

    try:
        level_count = manifest["level_count"]
        levels = [arrays[f"level_{lvl}"] for lvl in range(1, level_count + 1)]
        projector = None
        if not manifest["projector"]["identity"]:
            projector = LinearLayer(arrays["projector_weight"],
                                    arrays["projector_bias"])
        test_indices = manifest["test_indices"]
        bundle = FeatureBundle(
            class_names=manifest["class_names"],
            level_dims=tuple(manifest["level_dims"]),
            embedding_dim=manifest["embedding_dim"],
            temperature=manifest["temperature"],
            record_ids=manifest["record_ids"],
            labels=np.asarray(manifest["labels"], dtype=np.int64),
            levels=levels,
            text_embeddings=arrays["text_embeddings"],
            image_embeddings=arrays.get("image_embeddings")
            if manifest["has_image_embeddings"] else None,
            projector=projector,
            test_indices=None if test_indices is None
            else np.asarray(test_indices, dtype=np.int64),
            metadata=manifest.get("metadata", {}),
        )
    except KeyError as exc:
        raise BundleFormatError(f"{path}: manifest missing field {exc}") from exc
    bundle.validate()
    return bundle


def sample_few_shot(bundle: FeatureBundle, shots: int, seed: int) -> EpisodeSplit:
    """Draw exactly ``shots`` train records per class, deterministically.

    The train pool excludes any explicit test partition the bundle declares;
    without one, every record not sampled for training becomes test.
    """
    if shots < 1:
        raise InsufficientDataError(f"shots must be >= 1, got {shots}")
    n = bundle.record_count
    if bundle.test_indices is not None:
        pool_mask = np.ones(n, dtype=bool)
        pool_mask[bundle.test_indices] = False
    else:
        pool_mask = np.ones(n, dtype=bool)

    rng = np.random.Generator(
        np.random.Philox(key=np.array([seed, _SAMPLE_STREAM], dtype=np.uint64))
    )
    picked: list[np.ndarray] = []
    for label in range(bundle.class_count):
        candidates = np.flatnonzero((bundle.labels == label) & pool_mask)
        if candidates.size < shots:
            raise InsufficientDataError(
                f"class {bundle.class_names[label]!r} has {candidates.size} "
                f"train-pool records, needs {shots}"
            )
        picked.append(np.sort(rng.choice(candidates, size=shots, replace=False)))
    train = np.sort(np.concatenate(picked))
    if bundle.test_indices is not None:
        test = np.sort(np.asarray(bundle.test_indices, dtype=np.int64))
    else:
        test_mask = np.ones(n, dtype=bool)
        test_mask[train] = False
        test = np.flatnonzero(test_mask)
    split = EpisodeSplit(train_indices=train, test_indices=test, shots=shots)
    split.validate(bundle)
    return split
