"""Multi-level adapter fusion.

Each feature level passes through its own bottleneck adapter; the adapted
features are fused (preset-weighted mean or a learnable concat adapter),
projected by the frozen projector into the embedding space, and scored by
a linear head. The projector never receives gradient updates; gradients
pass through it to the adapters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ConfigError, shape_check
from .nn import LinearLayer, init_linear

FUSION_MODES = ("wf", "lf")


@dataclass
class Adapter:
    """Bottleneck block: down-projection, ReLU, up-projection."""

    down: LinearLayer
    up: LinearLayer

    def __post_init__(self):
        if self.up.in_dim != self.down.out_dim:
            raise ConfigError(
                f"adapter bottleneck mismatch: down out {self.down.out_dim} "
                f"!= up in {self.up.in_dim}"
            )

    @property
    def in_dim(self) -> int:
        return self.down.in_dim

    @property
    def out_dim(self) -> int:
        return self.up.out_dim

    def copy(self) -> "Adapter":
        return Adapter(self.down.copy(), self.up.copy())


def init_adapter(rng: np.random.Generator, in_dim: int, out_dim: int,
                 ratio: int = 4, zero_up: bool = False) -> Adapter:
    """Adapter with bottleneck max(1, in_dim // ratio).

    ``zero_up`` zeroes the up-projection so the block starts as the zero
    map (used where a residual connection should begin as the identity).
    """
    hidden = max(1, in_dim // ratio)
    down = init_linear(rng, in_dim, hidden)
    up = init_linear(rng, hidden, out_dim, scale="zero" if zero_up else "glorot")
    return Adapter(down, up)


def adapter_forward(x, adapter: Adapter) -> np.ndarray:
    out, _ = adapter_forward_cached(np.atleast_2d(np.asarray(x, dtype=np.float64)),
                                    adapter)
    return out[0] if np.asarray(x).ndim == 1 else out


def adapter_forward_cached(x: np.ndarray, adapter: Adapter):
    """Batch forward keeping what the backward pass needs."""
    shape_check(x.shape[1] == adapter.in_dim,
                f"adapter: input dim {x.shape[1]} != {adapter.in_dim}")
    pre = kernels.linear_forward(x, adapter.down.weight, adapter.down.bias)
    hidden = kernels.relu(pre)
    out = kernels.linear_forward(hidden, adapter.up.weight, adapter.up.bias)
    return out, (x, pre, hidden)


def adapter_backward(cache, adapter: Adapter, grad_out: np.ndarray):
    """Returns (grad_input, grads) with grads keyed down/up weight/bias."""
    x, pre, hidden = cache
    grad_out = np.ascontiguousarray(grad_out)
    g_hidden, g_up_w, g_up_b = kernels.linear_backward(hidden, adapter.up.weight,
                                                       grad_out)
    g_pre = kernels.relu_backward(pre, g_hidden)
    g_x, g_down_w, g_down_b = kernels.linear_backward(x, adapter.down.weight, g_pre)
    grads = {
        "down.weight": g_down_w,
        "down.bias": g_down_b,
        "up.weight": g_up_w,
        "up.bias": g_up_b,
    }
    return g_x, grads


def adapter_parameters(adapter: Adapter, prefix: str) -> dict[str, np.ndarray]:
    return {
        f"{prefix}.down.weight": adapter.down.weight,
        f"{prefix}.down.bias": adapter.down.bias,
        f"{prefix}.up.weight": adapter.up.weight,
        f"{prefix}.up.bias": adapter.up.bias,
    }


def weighted_fusion(z_levels, betas) -> np.ndarray:
    """(sum_l beta_l z_l) / sum_l beta_l, elementwise over equal-shaped inputs."""
    betas = np.asarray(betas, dtype=np.float64)
    shape_check(len(z_levels) == betas.shape[0],
                f"weighted_fusion: {len(z_levels)} inputs, {betas.shape[0]} weights")
    total = float(betas.sum())
    if total <= 0.0:
        raise ConfigError(f"fusion weights must sum to a positive value, got {total}")
    first = np.asarray(z_levels[0], dtype=np.float64)
    fused = np.zeros_like(first)
    for beta, z in zip(betas, z_levels):
        z = np.asarray(z, dtype=np.float64)
        shape_check(z.shape == first.shape, "weighted_fusion: input shapes differ")
        fused += beta * z
    return fused / total


def weighted_fusion_backward(grad_out: np.ndarray, betas) -> list[np.ndarray]:
    betas = np.asarray(betas, dtype=np.float64)
    total = float(betas.sum())
    return [(beta / total) * grad_out for beta in betas]


def learnable_fusion(z_levels, fusion_adapter: Adapter) -> np.ndarray:
    """Adapter over the channel-concatenation of the level features (1..L order)."""
    out, _ = learnable_fusion_cached(
        [np.atleast_2d(np.asarray(z, dtype=np.float64)) for z in z_levels],
        fusion_adapter,
    )
    return out[0] if np.asarray(z_levels[0]).ndim == 1 else out


def learnable_fusion_cached(z_levels: list[np.ndarray], fusion_adapter: Adapter):
    concat = np.concatenate(z_levels, axis=1)
    shape_check(
        concat.shape[1] == fusion_adapter.in_dim,
        f"learnable_fusion: concatenated dim {concat.shape[1]} != "
        f"adapter input dim {fusion_adapter.in_dim}",
    )
    out, cache = adapter_forward_cached(concat, fusion_adapter)
    return out, (cache, [z.shape[1] for z in z_levels])


def learnable_fusion_backward(cache, fusion_adapter: Adapter, grad_out: np.ndarray):
    adapter_cache, dims = cache
    g_concat, grads = adapter_backward(adapter_cache, fusion_adapter, grad_out)
    splits = np.cumsum(dims)[:-1]
    return np.split(g_concat, splits, axis=1), grads


@dataclass
class MafHead:
    """Per-level adapters + fusion + frozen projector + linear scoring head."""

    adapters: list[Adapter]
    fusion: str                       # "wf" or "lf"
    betas: np.ndarray                 # used when fusion == "wf"
    fusion_adapter: Adapter | None    # used when fusion == "lf"
    projector: LinearLayer | None     # None = identity; never trained
    mlp: LinearLayer

    def __post_init__(self):
        if self.fusion not in FUSION_MODES:
            raise ConfigError(f"fusion mode {self.fusion!r} not in {FUSION_MODES}")
        self.betas = np.asarray(self.betas, dtype=np.float64)
        if self.fusion == "wf":
            if self.betas.shape[0] != len(self.adapters):
                raise ConfigError(
                    f"{self.betas.shape[0]} fusion weights for "
                    f"{len(self.adapters)} levels"
                )
            if np.any(self.betas <= 0.0):
                raise ConfigError("weighted fusion requires strictly positive betas")
        if self.fusion == "lf" and self.fusion_adapter is None:
            raise ConfigError("learnable fusion requires a fusion adapter")
        fused = self.fused_dim
        for lvl, adapter in enumerate(self.adapters, start=1):
            if adapter.out_dim != fused:
                raise ConfigError(
                    f"level {lvl} adapter emits {adapter.out_dim}, expected {fused}"
                )

    @property
    def fused_dim(self) -> int:
        if self.projector is not None:
            return self.projector.in_dim
        return self.mlp.in_dim

    @property
    def embed_dim(self) -> int:
        return self.mlp.in_dim

    def parameters(self, prefix: str = "maf") -> dict[str, np.ndarray]:
        """Trainable arrays only; the projector is deliberately absent."""
        params: dict[str, np.ndarray] = {}
        for lvl, adapter in enumerate(self.adapters, start=1):
            params.update(adapter_parameters(adapter, f"{prefix}.adapter{lvl}"))
        if self.fusion == "lf":
            params.update(adapter_parameters(self.fusion_adapter, f"{prefix}.fusion"))
        params[f"{prefix}.mlp.weight"] = self.mlp.weight
        params[f"{prefix}.mlp.bias"] = self.mlp.bias
        return params


def maf_forward(levels: list[np.ndarray], head: MafHead):
    """Returns (z_e, scores, cache) for a batch of per-level features."""
    shape_check(len(levels) == len(head.adapters),
                f"maf_forward: {len(levels)} levels for {len(head.adapters)} adapters")
    adapted = []
    adapter_caches = []
    for x, adapter in zip(levels, head.adapters):
        out, cache = adapter_forward_cached(np.ascontiguousarray(x, dtype=np.float64),
                                            adapter)
        adapted.append(out)
        adapter_caches.append(cache)
    if head.fusion == "wf":
        fused = weighted_fusion(adapted, head.betas)
        fusion_cache = None
    else:
        fused, fusion_cache = learnable_fusion_cached(adapted, head.fusion_adapter)
    if head.projector is not None:
        z_e = kernels.linear_forward(fused, head.projector.weight,
                                     head.projector.bias)
    else:
        z_e = fused
    scores = kernels.linear_forward(z_e, head.mlp.weight, head.mlp.bias)
    cache = {
        "adapter_caches": adapter_caches,
        "fusion_cache": fusion_cache,
        "fused": fused,
        "z_e": z_e,
    }
    return z_e, scores, cache


def maf_backward(cache, head: MafHead, grad_scores: np.ndarray,
                 grad_z_e: np.ndarray | None = None) -> dict[str, np.ndarray]:
    """Parameter gradients given upstream gradients on the scores and,
    optionally, on z_e directly (the deconfusion and fusion-weight paths
    both consume z_e)."""
    z_e = cache["z_e"]
    g_z_e, g_mlp_w, g_mlp_b = kernels.linear_backward(z_e, head.mlp.weight,
                                                      grad_scores)
    if grad_z_e is not None:
        g_z_e = g_z_e + grad_z_e
    if head.projector is not None:
        g_fused = g_z_e @ head.projector.weight
    else:
        g_fused = g_z_e
    grads: dict[str, np.ndarray] = {}
    if head.fusion == "wf":
        g_adapted = weighted_fusion_backward(g_fused, head.betas)
    else:
        g_adapted, fusion_grads = learnable_fusion_backward(
            cache["fusion_cache"], head.fusion_adapter, g_fused
        )
        for key, val in fusion_grads.items():
            grads[f"fusion.{key}"] = val
    for lvl, (a_cache, adapter, g_out) in enumerate(
        zip(cache["adapter_caches"], head.adapters, g_adapted), start=1
    ):
        _, a_grads = adapter_backward(a_cache, adapter, g_out)
        for key, val in a_grads.items():
            grads[f"adapter{lvl}.{key}"] = val
    grads["mlp.weight"] = g_mlp_w
    grads["mlp.bias"] = g_mlp_b
    return grads
