"""Zero-shot logits from cosine similarity against class text embeddings.

The zero-shot score vector for an image is the softmax of its
temperature-scaled cosine similarities to the C class text embeddings.
This path has no trainable parameters; downstream modules treat its
output as a fixed prior.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateVectorError, shape_check
from .nn import as_f64, softmax


@dataclass
class TextEmbeddingSet:
    """One embedding per class; rows must be L2-normalizable (nonzero)."""

    embeddings: np.ndarray          # (C, d)
    class_names: list[str] | None = None

    def __post_init__(self):
        self.embeddings = as_f64(self.embeddings)
        if self.embeddings.ndim != 2:
            raise ConfigError("text embeddings must be a (classes, dim) matrix")
        norms = np.linalg.norm(self.embeddings, axis=1)
        if np.any(norms == 0.0):
            idx = int(np.argmin(norms))
            name = self.class_names[idx] if self.class_names else f"#{idx}"
            raise DegenerateVectorError(
                f"text embedding for class {name} has zero norm"
            )

    @property
    def class_count(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]


@dataclass
class ZeroShotScores:
    """Raw cosine similarities and their softmax(tau * sim) normalization."""

    similarities: np.ndarray
    logits: np.ndarray


def cosine_sim(u, v) -> float:
    u = as_f64(u)
    v = as_f64(v)
    shape_check(u.shape == v.shape and u.ndim == 1,
                f"cosine_sim: vector shapes {u.shape} vs {v.shape}")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise DegenerateVectorError("cosine similarity of a zero-norm vector")
    return float(np.dot(u, v) / (nu * nv))


def _similarities(image_embs: np.ndarray, texts: TextEmbeddingSet) -> np.ndarray:
    norms = np.linalg.norm(image_embs, axis=1)
    if np.any(norms == 0.0):
        raise DegenerateVectorError(
            f"image embedding {int(np.argmin(norms))} has zero norm"
        )
    unit_img = image_embs / norms[:, None]
    unit_txt = texts.embeddings / np.linalg.norm(texts.embeddings, axis=1)[:, None]
    return unit_img @ unit_txt.T


def zs_logits(image_emb, texts: TextEmbeddingSet, tau: float) -> ZeroShotScores:
    """Zero-shot scores for one image embedding.

    logits = softmax(tau * cos(image, text_c) over classes c); argmax is
    invariant to tau > 0 and to positive rescaling of either embedding.
    """
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    emb = as_f64(image_emb)
    shape_check(emb.ndim == 1 and emb.shape[0] == texts.dim,
                f"zs_logits: embedding dim {emb.shape} != text dim {texts.dim}")
    sims = _similarities(emb[None, :], texts)[0]
    return ZeroShotScores(similarities=sims, logits=softmax(tau * sims))


def zs_logits_batch(image_embs, texts: TextEmbeddingSet, tau: float) -> ZeroShotScores:
    """Vectorized zs_logits over rows of (N, d) image embeddings."""
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    embs = as_f64(image_embs)
    shape_check(embs.ndim == 2 and embs.shape[1] == texts.dim,
                f"zs_logits_batch: embeddings {embs.shape} vs text dim {texts.dim}")
    sims = _similarities(embs, texts)
    return ZeroShotScores(similarities=sims, logits=softmax(tau * sims))
