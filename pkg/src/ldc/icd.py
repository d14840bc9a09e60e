"""Inter-class deconfusion head.

Learns the systematic confusion pattern present in the zero-shot scores,
using the enhanced visual feature as a prior, and removes it through a
residual connection: one adapter reads the zero-shot scores, a second
reads the enhanced feature, their outputs are summed and mapped back to
class space by a third adapter, and the result is added to the zero-shot
scores. With the final up-projection initialized to zero the whole head
starts as the identity on the zero-shot scores.

Branch toggles reproduce the ablation axes: either input adapter, the
joint adapter, and the residual connection can each be disabled. When the
joint adapter is off, the input adapters emit class-dimensional outputs
directly; whichever adapters produce the final term get the zero
initialization when the residual is on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, shape_check
from .maf import (
    Adapter,
    adapter_backward,
    adapter_forward_cached,
    adapter_parameters,
    init_adapter,
)

BRANCHES = ("a1", "a2", "a3", "res")


def normalize_branches(branches) -> tuple[str, ...]:
    names = tuple(str(b).strip().lower() for b in branches)
    for name in names:
        if name not in BRANCHES:
            raise ConfigError(f"unknown deconfusion branch {name!r}, "
                              f"expected subset of {BRANCHES}")
    if "a1" not in names and "a2" not in names:
        raise ConfigError("deconfusion head needs at least one of a1, a2")
    return tuple(b for b in BRANCHES if b in names)


@dataclass
class IcdHead:
    """Three-adapter deconfusion block; disabled branches are None."""

    a1: Adapter | None            # reads zero-shot scores
    a2: Adapter | None            # reads the enhanced feature
    a3: Adapter | None            # joint map back to class space
    use_residual: bool
    class_count: int
    embed_dim: int

    def __post_init__(self):
        if self.a1 is None and self.a2 is None:
            raise ConfigError("deconfusion head needs at least one input adapter")
        inner = self.a3.in_dim if self.a3 is not None else self.class_count
        for name, adapter in (("a1", self.a1), ("a2", self.a2)):
            if adapter is not None and adapter.out_dim != inner:
                raise ConfigError(
                    f"{name} emits {adapter.out_dim}, expected {inner}"
                )
        out = self.a3.out_dim if self.a3 is not None else inner
        if out != self.class_count:
            raise ConfigError(
                f"deconfusion output dim {out} != class count {self.class_count}"
            )

    @property
    def branches(self) -> tuple[str, ...]:
        names = [name for name, a in (("a1", self.a1), ("a2", self.a2),
                                      ("a3", self.a3)) if a is not None]
        if self.use_residual:
            names.append("res")
        return tuple(names)

    def parameters(self, prefix: str = "icd") -> dict[str, np.ndarray]:
        params: dict[str, np.ndarray] = {}
        for name, adapter in (("a1", self.a1), ("a2", self.a2), ("a3", self.a3)):
            if adapter is not None:
                params.update(adapter_parameters(adapter, f"{prefix}.{name}"))
        return params


def init_icd_head(rng: np.random.Generator, class_count: int, embed_dim: int,
                  hidden_dim: int = 256, ratio: int = 4,
                  branches=BRANCHES, zero_start: bool = True) -> IcdHead:
    """Build the head for the given branch set.

    ``zero_start`` zeroes the up-projection of the output-producing
    adapter(s) so a residual head starts as the identity map; it is
    ignored when the residual is disabled (an all-zero score vector is a
    useless starting point there).
    """
    names = normalize_branches(branches)
    use_res = "res" in names
    has_a3 = "a3" in names
    inner = hidden_dim if has_a3 else class_count
    zero_inputs = zero_start and use_res and not has_a3
    a1 = a2 = a3 = None
    if "a1" in names:
        a1 = init_adapter(rng, class_count, inner, ratio, zero_up=zero_inputs)
    if "a2" in names:
        a2 = init_adapter(rng, embed_dim, inner, ratio, zero_up=zero_inputs)
    if has_a3:
        a3 = init_adapter(rng, hidden_dim, class_count, ratio,
                          zero_up=zero_start and use_res)
    return IcdHead(a1=a1, a2=a2, a3=a3, use_residual=use_res,
                   class_count=class_count, embed_dim=embed_dim)


def icd_forward(zs_scores: np.ndarray, z_e: np.ndarray, head: IcdHead):
    """Returns (deconfused scores, learned term, cache).

    scores = zs_scores + term when the residual is on, otherwise the term
    alone; the term is what the head learned to add (its negation is the
    estimated confusion pattern).
    """
    zs_scores = np.ascontiguousarray(zs_scores, dtype=np.float64)
    z_e = np.ascontiguousarray(z_e, dtype=np.float64)
    shape_check(zs_scores.shape[1] == head.class_count,
                f"icd_forward: {zs_scores.shape[1]} classes, head expects "
                f"{head.class_count}")
    shape_check(z_e.shape == (zs_scores.shape[0], head.embed_dim),
                f"icd_forward: z_e shape {z_e.shape} != "
                f"({zs_scores.shape[0]}, {head.embed_dim})")
    caches = {}
    joint = None
    if head.a1 is not None:
        out1, caches["a1"] = adapter_forward_cached(zs_scores, head.a1)
        joint = out1
    if head.a2 is not None:
        out2, caches["a2"] = adapter_forward_cached(z_e, head.a2)
        joint = out2 if joint is None else joint + out2
    if head.a3 is not None:
        term, caches["a3"] = adapter_forward_cached(joint, head.a3)
    else:
        term = joint
    scores = zs_scores + term if head.use_residual else term
    return scores, term, caches


def icd_backward(caches, head: IcdHead, grad_scores: np.ndarray):
    """Returns (grad_z_e, grads); the zero-shot input is a constant."""
    if head.a3 is not None:
        g_joint, a3_grads = adapter_backward(caches["a3"], head.a3, grad_scores)
    else:
        g_joint, a3_grads = grad_scores, {}
    grads = {f"a3.{k}": v for k, v in a3_grads.items()}
    if head.a1 is not None:
        _, a1_grads = adapter_backward(caches["a1"], head.a1, g_joint)
        grads.update({f"a1.{k}": v for k, v in a1_grads.items()})
    if head.a2 is not None:
        g_z_e, a2_grads = adapter_backward(caches["a2"], head.a2, g_joint)
        grads.update({f"a2.{k}": v for k, v in a2_grads.items()})
    else:
        g_z_e = np.zeros((grad_scores.shape[0], head.embed_dim))
    return g_z_e, grads
