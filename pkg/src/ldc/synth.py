"""Synthetic bundles with a planted inter-class confusion pattern.

The generator builds a task where ground truth is known exactly:

* Per level, class prototypes are orthonormal directions scaled to the
  separation margin; records are prototypes plus Gaussian feature noise.
* Image embeddings are unit class directions plus scaled Gaussian noise.
* Text embeddings are constructed so that the cosine similarity of a
  clean class-c image to the class-j text equals kappa * (margin * 1[c=j]
  + confusion[c, j]): the planted confusion lives in the text-embedding
  geometry and flows through the zero-shot path exactly as real encoder
  confusion would.

kappa is the largest global scale (at most 1) that lets every text
embedding be unit-norm: each is the class-basis combination above padded
to length one with a dedicated orthogonal direction, which requires
embed_dim >= 2 * classes. A global scale preserves every argmax, so a
confusion entry above the margin still flips its class. kappa and the
expected similarity matrix are recorded in the ground truth.

Alongside the generator live brute-force oracles: nearest-prototype
classification (ignores the planted confusion entirely) and the
recovered-vs-planted confusion correlation for a trained model.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bundle import FeatureBundle
from .errors import ConfigError, UndefinedCorrelationError, shape_check
from .model import LdcModel, forward_batch
from .training import _bundle_tensors, _zs_for
from .zeroshot import TextEmbeddingSet, zs_logits_batch

# Philox stream tags for the independent generator draws.
_BASIS_STREAM = 0x5E0001
_PROTO_STREAM = 0x5E0002
_FEAT_STREAM = 0x5E0003
_EMB_STREAM = 0x5E0004

DEFAULT_LEVEL_DIMS = (32, 32, 32, 32)


def default_confusion(classes: int, margin: float = 1.0) -> np.ndarray:
    """Default planted pattern: up to four argmax-flipping pairs (strength
    1.5 * margin) plus one softer non-flipping pair when room allows."""
    m = np.zeros((classes, classes))
    half = classes // 2
    for i in range(min(4, half)):
        m[i, half + i] = 1.5 * margin
    if classes >= 10:
        m[4, classes - 1] = 0.6 * margin
        m[classes - 1, 4] = 0.6 * margin
    return m


@dataclass
class SynthSpec:
    classes: int = 10
    level_dims: tuple[int, ...] = DEFAULT_LEVEL_DIMS
    embed_dim: int = 32
    samples_per_class: int = 100
    margin: float = 1.0
    confusion: np.ndarray | None = None   # None: default_confusion
    noise_sigma: float = 0.3
    seed: int = 0
    temperature: float = 10.0
    class_names: list[str] | None = None

    def resolved_confusion(self) -> np.ndarray:
        if self.confusion is None:
            return default_confusion(self.classes, self.margin)
        return np.asarray(self.confusion, dtype=np.float64)

    def validate(self) -> None:
        if self.classes < 2:
            raise ConfigError("need at least 2 classes")
        if self.samples_per_class < 1:
            raise ConfigError("need at least 1 sample per class")
        if self.margin <= 0:
            raise ConfigError(f"margin must be positive, got {self.margin}")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise sigma must be >= 0, got {self.noise_sigma}")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.seed < 0:
            raise ConfigError("seed must be >= 0")
        if self.embed_dim < 2 * self.classes:
            raise ConfigError(
                f"embed_dim must be >= 2 * classes ({2 * self.classes}) so text "
                f"embeddings can be padded to unit norm, got {self.embed_dim}"
            )
        for dim in self.level_dims:
            if dim < self.classes:
                raise ConfigError(
                    f"every level dim must be >= classes for orthonormal "
                    f"prototypes, got {dim} < {self.classes}"
                )
        m = self.resolved_confusion()
        if m.shape != (self.classes, self.classes):
            raise ConfigError(
                f"confusion matrix shape {m.shape} != "
                f"({self.classes}, {self.classes})"
            )
        if np.any(np.diag(m) != 0.0):
            raise ConfigError("confusion matrix diagonal must be zero")
        if np.any(m < 0.0):
            raise ConfigError("confusion matrix entries must be nonnegative")
        if self.class_names is not None and len(self.class_names) != self.classes:
            raise ConfigError("class_names length != classes")

    def to_dict(self) -> dict:
        return {
            "classes": self.classes,
            "level_dims": list(self.level_dims),
            "embed_dim": self.embed_dim,
            "samples_per_class": self.samples_per_class,
            "margin": self.margin,
            "confusion": self.resolved_confusion().tolist(),
            "noise_sigma": self.noise_sigma,
            "seed": self.seed,
            "temperature": self.temperature,
            "class_names": self.class_names,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SynthSpec":
        known = {
            "classes", "level_dims", "embed_dim", "samples_per_class", "margin",
            "confusion", "noise_sigma", "seed", "temperature", "class_names",
        }
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown synthetic-spec fields: {sorted(unknown)}")
        spec = cls(
            classes=data.get("classes", 10),
            level_dims=tuple(data.get("level_dims", DEFAULT_LEVEL_DIMS)),
            embed_dim=data.get("embed_dim", 32),
            samples_per_class=data.get("samples_per_class", 100),
            margin=data.get("margin", 1.0),
            confusion=None if data.get("confusion") is None
            else np.asarray(data["confusion"], dtype=np.float64),
            noise_sigma=data.get("noise_sigma", 0.3),
            seed=data.get("seed", 0),
            temperature=data.get("temperature", 10.0),
            class_names=data.get("class_names"),
        )
        return spec

    @classmethod
    def from_json(cls, path) -> "SynthSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class GroundTruth:
    """What the generator planted, for the oracles to check against."""

    confusion: np.ndarray                 # (C, C), the planted pattern
    kappa: float                          # global similarity scale actually used
    expected_similarities: np.ndarray     # (C, C): kappa*(margin*I + confusion)
    expected_zs_argmax: list[int]         # noiseless zero-shot prediction per class
    prototypes: list[np.ndarray]          # per level, (C, level_dim)
    class_basis: np.ndarray               # (C, embed_dim) unit rows
    spec: dict = field(default_factory=dict)

    def flipped_classes(self) -> list[int]:
        return [c for c, pred in enumerate(self.expected_zs_argmax) if pred != c]

    def to_dict(self) -> dict:
        return {
            "confusion": self.confusion.tolist(),
            "kappa": self.kappa,
            "expected_similarities": self.expected_similarities.tolist(),
            "expected_zs_argmax": self.expected_zs_argmax,
            "flipped_classes": self.flipped_classes(),
            "prototypes": [p.tolist() for p in self.prototypes],
            "class_basis": self.class_basis.tolist(),
            "spec": self.spec,
        }


def _orthonormal(rng: np.random.Generator, dim: int, count: int) -> np.ndarray:
    """(dim, count) matrix with orthonormal columns, sign-fixed."""
    gauss = rng.normal(size=(dim, count))
    q, r = np.linalg.qr(gauss)
    return q * np.sign(np.diag(r))[None, :]


def _stream(seed: int, tag: int) -> np.random.Generator:
    return np.random.Generator(
        np.random.Philox(key=np.array([seed, tag], dtype=np.uint64))
    )


def gen_synthetic(spec: SynthSpec) -> tuple[FeatureBundle, GroundTruth]:
    """Deterministic bundle + ground truth for the given spec."""
    spec.validate()
    c = spec.classes
    confusion = spec.resolved_confusion()
    names = spec.class_names or [f"class_{i:02d}" for i in range(c)]
    n = c * spec.samples_per_class

    basis = _orthonormal(_stream(spec.seed, _BASIS_STREAM), spec.embed_dim, 2 * c)
    class_dirs = basis[:, :c]        # u_c columns
    pad_dirs = basis[:, c:]

    desired = spec.margin * np.eye(c) + confusion
    col_norms = np.linalg.norm(desired, axis=0)
    kappa = min(1.0, 1.0 / col_norms.max())
    scaled = kappa * desired
    pad = np.sqrt(np.maximum(0.0, 1.0 - (kappa * col_norms) ** 2))
    text_embeddings = (class_dirs @ scaled + pad_dirs * pad[None, :]).T

    # Prototype norm grows with sqrt(dim) like real encoder features;
    # cosine-based consumers are scale-invariant, trainable heads are not.
    proto_rng = _stream(spec.seed, _PROTO_STREAM)
    prototypes = [
        spec.margin * np.sqrt(dim) * _orthonormal(proto_rng, dim, c).T
        for dim in spec.level_dims
    ]

    labels = np.repeat(np.arange(c, dtype=np.int64), spec.samples_per_class)
    feat_rng = _stream(spec.seed, _FEAT_STREAM)
    levels = []
    for lvl, dim in enumerate(spec.level_dims):
        clean = prototypes[lvl][labels]
        levels.append(clean + spec.noise_sigma * feat_rng.normal(size=(n, dim)))

    emb_rng = _stream(spec.seed, _EMB_STREAM)
    emb_noise = (spec.noise_sigma / np.sqrt(spec.embed_dim)) * emb_rng.normal(
        size=(n, spec.embed_dim)
    )
    image_embeddings = class_dirs.T[labels] + emb_noise

    record_ids = [
        f"{names[label]}/{k:04d}"
        for label in range(c)
        for k in range(spec.samples_per_class)
    ]
    bundle = FeatureBundle(
        class_names=names,
        level_dims=tuple(spec.level_dims),
        embedding_dim=spec.embed_dim,
        temperature=spec.temperature,
        record_ids=record_ids,
        labels=labels,
        levels=levels,
        text_embeddings=text_embeddings,
        image_embeddings=image_embeddings,
        projector=None,
        test_indices=None,
        metadata={
            "creator": "ldc-synth",
            "pooling": "synthetic-prepooled",
            "kappa": kappa,
            "margin": spec.margin,
            "noise_sigma": spec.noise_sigma,
            "seed": spec.seed,
        },
    )
    bundle.validate()
    truth = GroundTruth(
        confusion=confusion,
        kappa=kappa,
        expected_similarities=scaled,
        expected_zs_argmax=[int(v) for v in np.argmax(scaled, axis=1)],
        prototypes=prototypes,
        class_basis=class_dirs.T,
        spec=spec.to_dict(),
    )
    return bundle, truth


@dataclass
class OracleReport:
    """Brute-force reference numbers for a synthetic bundle."""

    prototype_accuracy: float
    zs_accuracy: float
    recovery_correlation: float | None = None

    def to_dict(self) -> dict:
        return {
            "prototype_accuracy": self.prototype_accuracy,
            "zs_accuracy": self.zs_accuracy,
            "recovery_correlation": self.recovery_correlation,
        }


def nearest_prototype_oracle(bundle: FeatureBundle, prototypes,
                             indices: np.ndarray | None = None) -> float:
    """Max-cosine nearest prototype over the concatenated levels.

    No learning, and no dependence on the planted confusion: features are
    untouched by it, so this bounds what any feature-based classifier
    could see.
    """
    for lvl, (proto, dim) in enumerate(zip(prototypes, bundle.level_dims), start=1):
        shape_check(proto.shape == (bundle.class_count, dim),
                    f"prototype level {lvl} shape {proto.shape} != "
                    f"({bundle.class_count}, {dim})")
    if indices is None:
        indices = np.arange(bundle.record_count)
    feats = np.concatenate([lvl[indices] for lvl in bundle.levels], axis=1)
    protos = np.concatenate(list(prototypes), axis=1)
    feats = feats / np.linalg.norm(feats, axis=1, keepdims=True)
    protos = protos / np.linalg.norm(protos, axis=1, keepdims=True)
    preds = np.argmax(feats @ protos.T, axis=1)
    return float(np.mean(preds == bundle.labels[indices]))


def zs_accuracy(bundle: FeatureBundle, indices: np.ndarray | None = None) -> float:
    """Zero-shot argmax accuracy straight from the bundle contents."""
    if indices is None:
        indices = np.arange(bundle.record_count)
    texts = TextEmbeddingSet(bundle.text_embeddings, bundle.class_names)
    scores = zs_logits_batch(bundle.image_embeddings[indices], texts,
                             bundle.temperature)
    preds = np.argmax(scores.logits, axis=1)
    return float(np.mean(preds == bundle.labels[indices]))


def recovered_confusion(model: LdcModel, bundle: FeatureBundle,
                        indices: np.ndarray | None = None) -> np.ndarray:
    """(C, C) matrix: negated per-class mean of the learned deconfusion term.

    Row c is the pattern the model removes from class-c images' zero-shot
    scores; a positive entry (c, j) means mass was being taken away from
    class j.
    """
    if indices is None:
        indices = np.arange(bundle.record_count)
    levels, labels, embeddings = _bundle_tensors(bundle, indices)
    zs = _zs_for(bundle, embeddings, model.temperature)
    cache = forward_batch(model, levels, zs)
    c = bundle.class_count
    pattern = np.zeros((c, c))
    for label in range(c):
        mask = labels == label
        if mask.any():
            pattern[label] = -cache.icd_term[mask].mean(axis=0)
    return pattern


def confusion_recovery_score(model: LdcModel, bundle: FeatureBundle,
                             planted: np.ndarray,
                             indices: np.ndarray | None = None) -> float:
    """Pearson correlation between planted and recovered off-diagonal
    confusion. Raises if either side is constant (e.g. an untrained model
    whose deconfusion term is identically zero)."""
    planted = np.asarray(planted, dtype=np.float64)
    recovered = recovered_confusion(model, bundle, indices)
    shape_check(planted.shape == recovered.shape,
                f"planted shape {planted.shape} != recovered {recovered.shape}")
    mask = ~np.eye(planted.shape[0], dtype=bool)
    a = planted[mask]
    b = recovered[mask]
    if np.ptp(a) == 0.0 or np.ptp(b) == 0.0:
        raise UndefinedCorrelationError(
            "correlation undefined: constant off-diagonal pattern"
        )
    return float(np.corrcoef(a, b)[0, 1])


def pearson(a, b) -> float:
    """Plain Pearson correlation with the same degeneracy contract."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    shape_check(a.shape == b.shape, "pearson: length mismatch")
    if np.ptp(a) == 0.0 or np.ptp(b) == 0.0:
        raise UndefinedCorrelationError("correlation undefined: constant input")
    return float(np.corrcoef(a, b)[0, 1])
