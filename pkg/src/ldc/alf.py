"""Adaptive logits fusion.

A per-image weight alpha in (0,1), produced by a single linear layer with
a sigmoid over the enhanced feature, convexly combines the adapter-fusion
scores with the deconfused scores. Fixed-weight, sum, and single-stream
strategies cover the fusion ablation variants.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ConfigError, ContractError, shape_check
from .nn import LinearLayer

# Sigmoid saturates to exactly 0.0 / 1.0 in float64 around |x| ~ 37; clamp
# keeps alpha representable inside the open interval the fusion requires.
_ALPHA_MARGIN = 1e-12

STRATEGIES = ("adaptive", "fixed", "icd-only", "maf-only", "sum")


@dataclass
class AlphaGenerator:
    """Per-image fusion weight: sigmoid of a linear map of the feature."""

    linear: LinearLayer

    def __post_init__(self):
        if self.linear.out_dim != 1:
            raise ConfigError("alpha generator must map to a single scalar")

    @property
    def embed_dim(self) -> int:
        return self.linear.in_dim

    def parameters(self, prefix: str = "alpha") -> dict[str, np.ndarray]:
        return {f"{prefix}.weight": self.linear.weight,
                f"{prefix}.bias": self.linear.bias}


def alpha_gen(z_e, generator: AlphaGenerator):
    """Returns (alpha (B,), cache). alpha is clamped into (0, 1) strictly."""
    z_e = np.atleast_2d(np.asarray(z_e, dtype=np.float64))
    shape_check(z_e.shape[1] == generator.embed_dim,
                f"alpha_gen: feature dim {z_e.shape[1]} != "
                f"{generator.embed_dim}")
    pre = kernels.linear_forward(z_e, generator.linear.weight,
                                 generator.linear.bias)[:, 0]
    alpha = np.clip(kernels.sigmoid(pre), _ALPHA_MARGIN, 1.0 - _ALPHA_MARGIN)
    return alpha, (z_e, alpha)


def alpha_backward(cache, generator: AlphaGenerator, grad_alpha: np.ndarray):
    """Returns (grad_z_e, grads) through the sigmoid and linear map."""
    z_e, alpha = cache
    g_pre = (grad_alpha * alpha * (1.0 - alpha))[:, None]
    g_z_e, g_w, g_b = kernels.linear_backward(z_e, generator.linear.weight, g_pre)
    return g_z_e, {"weight": g_w, "bias": g_b}


def _check_alpha(alpha: np.ndarray) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=np.float64)
    if np.any(alpha <= 0.0) or np.any(alpha >= 1.0):
        raise ContractError(
            f"fusion weight must lie strictly in (0, 1), got "
            f"[{alpha.min()}, {alpha.max()}]"
        )
    return alpha


def alf_fuse(maf_scores, icd_scores, alpha) -> np.ndarray:
    """alpha * maf + (1 - alpha) * icd, per image.

    ``alpha`` is a scalar for a single pair of vectors or a (B,) vector
    for batches; every output coordinate lies between the two inputs.
    """
    maf_scores = np.asarray(maf_scores, dtype=np.float64)
    icd_scores = np.asarray(icd_scores, dtype=np.float64)
    shape_check(maf_scores.shape == icd_scores.shape,
                f"alf_fuse: shapes {maf_scores.shape} vs {icd_scores.shape}")
    alpha = _check_alpha(alpha)
    if maf_scores.ndim == 2 and alpha.ndim == 1:
        alpha = alpha[:, None]
    return alpha * maf_scores + (1.0 - alpha) * icd_scores


def alf_fuse_backward(maf_scores, icd_scores, alpha, grad_out):
    """Gradients (g_maf, g_icd, g_alpha) of the convex combination."""
    alpha = np.asarray(alpha, dtype=np.float64)
    weights = alpha[:, None] if grad_out.ndim == 2 and alpha.ndim == 1 else alpha
    g_maf = weights * grad_out
    g_icd = (1.0 - weights) * grad_out
    diff = np.asarray(maf_scores) - np.asarray(icd_scores)
    g_alpha = (grad_out * diff).sum(axis=-1)
    return g_maf, g_icd, g_alpha


def parse_strategy(text: str) -> tuple[str, float | None]:
    """Parse "adaptive", "fixed:<v>", "icd-only", "maf-only", or "sum"."""
    name = text.strip().lower()
    if name.startswith("fixed:"):
        try:
            value = float(name.split(":", 1)[1])
        except ValueError:
            raise ConfigError(f"bad fixed fusion weight in {text!r}") from None
        if not 0.0 < value < 1.0:
            raise ConfigError(
                f"fixed fusion weight must lie strictly in (0, 1), got {value}"
            )
        return "fixed", value
    if name in ("adaptive", "icd-only", "maf-only", "sum"):
        return name, None
    raise ConfigError(
        f"unknown fusion strategy {text!r}; expected adaptive, fixed:<v>, "
        f"icd-only, maf-only, or sum"
    )
