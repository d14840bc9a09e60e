"""The full deconfusion model: adapter-fusion head, deconfusion head, and
fusion-weight generator around a frozen projector.

Holds every learnable parameter, exposes them as a flat name -> array
dict for the optimizer, and implements the joint forward/backward over a
batch. The backward pass receives the loss gradients with respect to the
three score streams and distributes them through the fusion strategy, the
deconfusion head, and the adapter stack; the projector and the zero-shot
scores never receive updates.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .alf import (
    AlphaGenerator,
    alf_fuse,
    alf_fuse_backward,
    alpha_backward,
    alpha_gen,
    parse_strategy,
)
from .errors import (
    BadMagicError,
    BundleFormatError,
    ConfigError,
    FormatVersionError,
    TruncatedError,
)
from .icd import IcdHead, icd_backward, icd_forward, init_icd_head, normalize_branches
from .maf import Adapter, MafHead, init_adapter, maf_backward, maf_forward
from .nn import LinearLayer, init_linear

MODEL_MAGIC = b"LDCM"
MODEL_VERSION = 1

# Philox stream tag for parameter initialization.
INIT_STREAM = 0x1D2C0001

DEFAULT_BETAS = (0.1, 0.2, 0.3, 0.4)


@dataclass
class ModelConfig:
    """Architecture knobs; everything an init needs besides the data dims."""

    fusion: str = "wf"
    betas: tuple[float, ...] = DEFAULT_BETAS
    adapter_ratio: int = 4
    icd_hidden: int = 256
    icd_branches: tuple[str, ...] = ("a1", "a2", "a3", "res")
    alf_strategy: str = "adaptive"

    def validate(self) -> None:
        if self.fusion not in ("wf", "lf"):
            raise ConfigError(f"fusion must be wf or lf, got {self.fusion!r}")
        if self.adapter_ratio < 1:
            raise ConfigError("adapter ratio must be >= 1")
        if self.icd_hidden < 1:
            raise ConfigError("deconfusion hidden dim must be >= 1")
        normalize_branches(self.icd_branches)
        parse_strategy(self.alf_strategy)

    def to_dict(self) -> dict:
        return {
            "fusion": self.fusion,
            "betas": list(self.betas),
            "adapter_ratio": self.adapter_ratio,
            "icd_hidden": self.icd_hidden,
            "icd_branches": list(self.icd_branches),
            "alf_strategy": self.alf_strategy,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        return cls(
            fusion=data.get("fusion", "wf"),
            betas=tuple(data.get("betas", DEFAULT_BETAS)),
            adapter_ratio=data.get("adapter_ratio", 4),
            icd_hidden=data.get("icd_hidden", 256),
            icd_branches=tuple(data.get("icd_branches", ("a1", "a2", "a3", "res"))),
            alf_strategy=data.get("alf_strategy", "adaptive"),
        )


@dataclass
class LdcModel:
    maf: MafHead
    icd: IcdHead
    alpha: AlphaGenerator
    config: ModelConfig
    class_count: int
    level_dims: tuple[int, ...]
    embed_dim: int
    temperature: float

    def trainable_parameters(self) -> dict[str, np.ndarray]:
        """Flat view of every learnable array, in a fixed order.

        The projector is excluded by construction; the fusion-weight
        generator is included only when the strategy actually uses it.
        """
        params = self.maf.parameters("maf")
        params.update(self.icd.parameters("icd"))
        if parse_strategy(self.config.alf_strategy)[0] == "adaptive":
            params.update(self.alpha.parameters("alpha"))
        return params


@dataclass
class ForwardCache:
    """Everything one batch forward produced, for the loss and backward."""

    zs: np.ndarray
    maf_scores: np.ndarray
    icd_scores: np.ndarray
    alf_scores: np.ndarray
    z_e: np.ndarray
    alpha: np.ndarray | None
    icd_term: np.ndarray
    maf_cache: dict = field(repr=False, default_factory=dict)
    icd_cache: dict = field(repr=False, default_factory=dict)
    alpha_cache: tuple | None = field(repr=False, default=None)


def init_model(seed: int, class_count: int, level_dims, embed_dim: int,
               config: ModelConfig | None = None,
               projector: LinearLayer | None = None,
               temperature: float = 100.0,
               init: str = "train") -> LdcModel:
    """Seeded model construction.

    ``init="train"`` gives the training start state: random adapters, a
    zero fusion-weight generator (alpha starts at 0.5), and a zero
    deconfusion up-projection so the deconfused stream starts exactly at
    the zero-shot scores. ``init="gradcheck"`` randomizes everything so
    gradient checks exercise all paths.
    """
    config = config or ModelConfig()
    config.validate()
    if init not in ("train", "gradcheck"):
        raise ConfigError(f"unknown init mode {init!r}")
    rng = np.random.Generator(
        np.random.Philox(key=np.array([seed, INIT_STREAM], dtype=np.uint64))
    )
    level_dims = tuple(int(d) for d in level_dims)
    fused_dim = projector.in_dim if projector is not None else embed_dim

    adapters = [
        init_adapter(rng, d, fused_dim, config.adapter_ratio) for d in level_dims
    ]
    fusion_adapter = None
    if config.fusion == "lf":
        fusion_adapter = init_adapter(rng, fused_dim * len(level_dims), fused_dim,
                                      config.adapter_ratio)
    mlp = init_linear(rng, embed_dim, class_count)
    maf = MafHead(adapters=adapters, fusion=config.fusion,
                  betas=np.asarray(config.betas, dtype=np.float64),
                  fusion_adapter=fusion_adapter, projector=projector, mlp=mlp)
    icd = init_icd_head(rng, class_count, embed_dim,
                        hidden_dim=config.icd_hidden, ratio=config.adapter_ratio,
                        branches=config.icd_branches,
                        zero_start=(init == "train"))
    if init == "train":
        alpha_linear = init_linear(rng, embed_dim, 1, scale="zero")
    else:
        alpha_linear = init_linear(rng, embed_dim, 1)
    return LdcModel(
        maf=maf,
        icd=icd,
        alpha=AlphaGenerator(alpha_linear),
        config=config,
        class_count=class_count,
        level_dims=level_dims,
        embed_dim=embed_dim,
        temperature=temperature,
    )


def forward_batch(model: LdcModel, levels: list[np.ndarray],
                  zs_scores: np.ndarray) -> ForwardCache:
    """Run all streams for a batch; zs_scores are treated as constants."""
    zs_scores = np.ascontiguousarray(zs_scores, dtype=np.float64)
    z_e, maf_scores, maf_cache = maf_forward(levels, model.maf)
    icd_scores, icd_term, icd_cache = icd_forward(zs_scores, z_e, model.icd)
    kind, fixed = parse_strategy(model.config.alf_strategy)
    alpha = None
    alpha_cache = None
    if kind == "adaptive":
        alpha, alpha_cache = alpha_gen(z_e, model.alpha)
        alf_scores = alf_fuse(maf_scores, icd_scores, alpha)
    elif kind == "fixed":
        alf_scores = alf_fuse(maf_scores, icd_scores,
                              np.full(maf_scores.shape[0], fixed))
    elif kind == "sum":
        alf_scores = maf_scores + icd_scores
    elif kind == "icd-only":
        alf_scores = icd_scores.copy()
    else:  # maf-only
        alf_scores = maf_scores.copy()
    return ForwardCache(
        zs=zs_scores,
        maf_scores=maf_scores,
        icd_scores=icd_scores,
        alf_scores=alf_scores,
        z_e=z_e,
        alpha=alpha,
        icd_term=icd_term,
        maf_cache=maf_cache,
        icd_cache=icd_cache,
        alpha_cache=alpha_cache,
    )


def backward_batch(model: LdcModel, cache: ForwardCache, g_maf: np.ndarray,
                   g_icd: np.ndarray, g_alf: np.ndarray) -> dict[str, np.ndarray]:
    """Parameter gradients given loss gradients on the three score streams."""
    kind, fixed = parse_strategy(model.config.alf_strategy)
    grads: dict[str, np.ndarray] = {}
    g_z_e_extra = np.zeros_like(cache.z_e)

    if kind == "adaptive":
        g_maf_part, g_icd_part, g_alpha = alf_fuse_backward(
            cache.maf_scores, cache.icd_scores, cache.alpha, g_alf
        )
        g_maf_total = g_maf + g_maf_part
        g_icd_total = g_icd + g_icd_part
        g_z_e_alpha, alpha_grads = alpha_backward(cache.alpha_cache, model.alpha,
                                                  g_alpha)
        g_z_e_extra += g_z_e_alpha
        grads["alpha.weight"] = alpha_grads["weight"]
        grads["alpha.bias"] = alpha_grads["bias"]
    elif kind == "fixed":
        g_maf_total = g_maf + fixed * g_alf
        g_icd_total = g_icd + (1.0 - fixed) * g_alf
    elif kind == "sum":
        g_maf_total = g_maf + g_alf
        g_icd_total = g_icd + g_alf
    elif kind == "icd-only":
        g_maf_total = g_maf
        g_icd_total = g_icd + g_alf
    else:  # maf-only
        g_maf_total = g_maf + g_alf
        g_icd_total = g_icd

    g_z_e_icd, icd_grads = icd_backward(cache.icd_cache, model.icd, g_icd_total)
    for key, val in icd_grads.items():
        grads[f"icd.{key}"] = val
    maf_grads = maf_backward(cache.maf_cache, model.maf, g_maf_total,
                             grad_z_e=g_z_e_extra + g_z_e_icd)
    for key, val in maf_grads.items():
        grads[f"maf.{key}"] = val
    return grads


def _model_arrays(model: LdcModel) -> list[tuple[str, np.ndarray]]:
    arrays = list(model.maf.parameters("maf").items())
    arrays += list(model.icd.parameters("icd").items())
    arrays += list(model.alpha.parameters("alpha").items())
    if model.maf.projector is not None:
        arrays.append(("projector.weight", model.maf.projector.weight))
        arrays.append(("projector.bias", model.maf.projector.bias))
    return arrays


def save_model(model: LdcModel, path) -> None:
    """Serialize to the .ldcm container (same framing as feature bundles)."""
    arrays = _model_arrays(model)
    header = {
        "config": model.config.to_dict(),
        "class_count": model.class_count,
        "level_dims": list(model.level_dims),
        "embed_dim": model.embed_dim,
        "temperature": model.temperature,
        "has_projector": model.maf.projector is not None,
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<I", MODEL_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_model(path) -> LdcModel:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 4 or blob[:4] != MODEL_MAGIC:
        raise BadMagicError(f"{path}: bad magic {blob[:4]!r}, expected {MODEL_MAGIC!r}")
    version = struct.unpack_from("<I", blob, 4)[0]
    if version != MODEL_VERSION:
        raise FormatVersionError(f"{path}: model version {version} unsupported")
    header_len = struct.unpack_from("<I", blob, 8)[0]
    offset = 12
    if len(blob) < offset + header_len:
        raise TruncatedError(f"{path}: header truncated")
    try:
        header = json.loads(blob[offset:offset + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BundleFormatError(f"{path}: header is not valid JSON: {exc}") from exc
    offset += header_len
    arrays: dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape))
        if len(blob) < offset + count * 8:
            raise TruncatedError(f"{path}: array {entry['name']!r} truncated")
        arrays[entry["name"]] = (
            np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
            .reshape(shape).copy()
        )
        offset += count * 8

    config = ModelConfig.from_dict(header["config"])
    config.validate()
    level_dims = tuple(header["level_dims"])
    embed_dim = header["embed_dim"]
    class_count = header["class_count"]

    def linear(prefix: str) -> LinearLayer:
        return LinearLayer(arrays[f"{prefix}.weight"], arrays[f"{prefix}.bias"])

    def adapter(prefix: str) -> Adapter:
        return Adapter(linear(f"{prefix}.down"), linear(f"{prefix}.up"))

    projector = linear("projector") if header["has_projector"] else None
    adapters = [adapter(f"maf.adapter{lvl}") for lvl in range(1, len(level_dims) + 1)]
    fusion_adapter = adapter("maf.fusion") if config.fusion == "lf" else None
    maf = MafHead(adapters=adapters, fusion=config.fusion,
                  betas=np.asarray(config.betas, dtype=np.float64),
                  fusion_adapter=fusion_adapter, projector=projector,
                  mlp=linear("maf.mlp"))
    branch_names = normalize_branches(config.icd_branches)
    icd = IcdHead(
        a1=adapter("icd.a1") if "a1" in branch_names else None,
        a2=adapter("icd.a2") if "a2" in branch_names else None,
        a3=adapter("icd.a3") if "a3" in branch_names else None,
        use_residual="res" in branch_names,
        class_count=class_count,
        embed_dim=embed_dim,
    )
    return LdcModel(
        maf=maf,
        icd=icd,
        alpha=AlphaGenerator(linear("alpha")),
        config=config,
        class_count=class_count,
        level_dims=level_dims,
        embed_dim=embed_dim,
        temperature=header["temperature"],
    )
