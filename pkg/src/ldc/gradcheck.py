"""Finite-difference verification of every analytic gradient.

Builds small fully-randomized model instances (both fusion modes, all
deconfusion branches, adaptive fusion weight, every loss term on), then
compares the analytic gradient of the total loss against central finite
differences for every trainable coordinate.

Instances are resampled until they sit safely away from the two
non-smooth spots (ReLU pre-activations and L1 terms at zero) where finite
differences are mathematically invalid; the guards reject the instance,
never the gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError
from .model import LdcModel, ModelConfig, backward_batch, forward_batch, init_model
from .nn import LinearLayer, relative_error, softmax
from .training import PROB_NLL_EPS, LossToggles, total_loss

# Small, deliberately mismatched dims so transposition bugs cannot cancel.
_LEVEL_DIMS = (4, 5, 6, 7)
_EMBED_DIM = 4
_FUSED_DIM = 5
_CLASSES = 3
_BATCH = 2
_HIDDEN = 6
_RATIO = 2

_KINK_MARGIN = 1e-3
_MAX_RESAMPLES = 50

GROUPS = ("maf_adapters", "fusion_adapter", "mlp_head", "icd_a1", "icd_a2",
          "icd_a3", "alpha_generator")


def param_group(name: str) -> str:
    if name.startswith("maf.adapter"):
        return "maf_adapters"
    if name.startswith("maf.fusion"):
        return "fusion_adapter"
    if name.startswith("maf.mlp"):
        return "mlp_head"
    if name.startswith("icd.a1"):
        return "icd_a1"
    if name.startswith("icd.a2"):
        return "icd_a2"
    if name.startswith("icd.a3"):
        return "icd_a3"
    if name.startswith("alpha."):
        return "alpha_generator"
    raise ValueError(f"no gradient-check group for parameter {name!r}")


@dataclass
class GradcheckInstance:
    model: LdcModel
    levels: list[np.ndarray]
    zs: np.ndarray
    labels: np.ndarray
    lam: float


def _smooth_enough(model: LdcModel, levels, zs) -> bool:
    """Reject states close to a ReLU, L1, or clamp kink at the eval point."""
    cache = forward_batch(model, levels, zs)
    pre_acts = [c[1] for c in cache.maf_cache["adapter_caches"]]
    if cache.maf_cache["fusion_cache"] is not None:
        pre_acts.append(cache.maf_cache["fusion_cache"][0][1])
    pre_acts.extend(c[1] for c in cache.icd_cache.values())
    for pre in pre_acts:
        if np.min(np.abs(pre)) < _KINK_MARGIN:
            return False
    if np.min(np.abs(cache.maf_scores - cache.zs)) < _KINK_MARGIN:
        return False
    if np.min(np.abs(cache.icd_scores - cache.zs)) < _KINK_MARGIN:
        return False
    if np.min(np.abs(cache.icd_scores - PROB_NLL_EPS)) < _KINK_MARGIN:
        return False
    return True


def make_instance(seed: int, fusion: str) -> GradcheckInstance:
    """Random model + batch, resampled away from non-smooth points."""
    for attempt in range(_MAX_RESAMPLES):
        sub_seed = seed * _MAX_RESAMPLES + attempt
        rng = np.random.Generator(
            np.random.Philox(key=np.array([sub_seed, 0x6C], dtype=np.uint64))
        )
        config = ModelConfig(fusion=fusion, betas=(0.1, 0.2, 0.3, 0.4),
                             adapter_ratio=_RATIO, icd_hidden=_HIDDEN,
                             alf_strategy="adaptive")
        projector = LinearLayer(rng.normal(size=(_EMBED_DIM, _FUSED_DIM)),
                                rng.normal(size=_EMBED_DIM) * 0.1)
        model = init_model(sub_seed, _CLASSES, _LEVEL_DIMS, _EMBED_DIM,
                           config=config, projector=projector,
                           temperature=10.0, init="gradcheck")
        levels = [rng.normal(size=(_BATCH, d)) for d in _LEVEL_DIMS]
        zs = softmax(rng.normal(size=(_BATCH, _CLASSES)))
        labels = rng.integers(0, _CLASSES, size=_BATCH)
        if _smooth_enough(model, levels, zs):
            return GradcheckInstance(model=model, levels=levels, zs=zs,
                                     labels=labels, lam=1.0)
    raise NumericError(
        f"could not sample a kink-free gradient-check instance for seed {seed}"
    )


def _loss_of(instance: GradcheckInstance) -> float:
    cache = forward_batch(instance.model, instance.levels, instance.zs)
    loss, _, _, _, _ = total_loss(cache.maf_scores, cache.icd_scores,
                                  cache.alf_scores, cache.zs, instance.labels,
                                  instance.lam, LossToggles())
    return loss


def analytic_grads(instance: GradcheckInstance) -> dict[str, np.ndarray]:
    cache = forward_batch(instance.model, instance.levels, instance.zs)
    _, _, g_maf, g_icd, g_alf = total_loss(cache.maf_scores, cache.icd_scores,
                                           cache.alf_scores, cache.zs,
                                           instance.labels, instance.lam,
                                           LossToggles())
    return backward_batch(instance.model, cache, g_maf, g_icd, g_alf)


def fd_grads(instance: GradcheckInstance, eps: float = 1e-5) -> dict[str, np.ndarray]:
    """Central differences of the total loss over every parameter coordinate."""
    out: dict[str, np.ndarray] = {}
    for name, param in instance.model.trainable_parameters().items():
        grad = np.zeros_like(param)
        flat_p = param.reshape(-1)
        flat_g = grad.reshape(-1)
        for i in range(flat_p.shape[0]):
            orig = flat_p[i]
            flat_p[i] = orig + eps
            up = _loss_of(instance)
            flat_p[i] = orig - eps
            down = _loss_of(instance)
            flat_p[i] = orig
            flat_g[i] = (up - down) / (2.0 * eps)
        out[name] = grad
    return out


@dataclass
class GradcheckReport:
    seeds: int
    eps: float
    max_rel_err: dict[str, float]       # per group
    worst: float
    checked_params: int

    def passed(self, tol: float = 1e-4) -> bool:
        return self.worst < tol

    def to_dict(self) -> dict:
        return {
            "seeds": self.seeds,
            "eps": self.eps,
            "max_rel_err": self.max_rel_err,
            "worst": self.worst,
            "checked_params": self.checked_params,
        }


def run_gradcheck(seeds: int = 50, eps: float = 1e-5) -> GradcheckReport:
    """Check both fusion modes for each seed; report per-group worst error."""
    worst: dict[str, float] = {group: 0.0 for group in GROUPS}
    checked = 0
    for seed in range(seeds):
        for fusion in ("wf", "lf"):
            instance = make_instance(seed, fusion)
            analytic = analytic_grads(instance)
            numeric = fd_grads(instance, eps=eps)
            for name, a_grad in analytic.items():
                group = param_group(name)
                err = relative_error(a_grad, numeric[name])
                worst[group] = max(worst[group], err)
                checked += a_grad.size
    return GradcheckReport(
        seeds=seeds,
        eps=eps,
        max_rel_err=worst,
        worst=max(worst.values()),
        checked_params=checked,
    )
