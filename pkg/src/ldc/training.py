"""Joint training and evaluation.

The objective sums three classification losses (one per score stream) and
two L1 similarity penalties that anchor the adapter-fusion and deconfused
streams to the zero-shot scores, weighted by a trade-off factor. Each term
can be toggled off, which removes its gradient contribution exactly.

The adapter-fusion and fused streams are raw scores, so their
classification terms apply log-softmax. The deconfused stream is the
zero-shot probability vector plus a learned term, and its classification
term treats it that way by default: negative log of the (clamped)
linearly-normalized true-class coordinate. The distinction matters. In
probability space the confused coordinates carry most of the partition
mass, so training is driven to remove exactly that mass (deconfusion);
under a second log-softmax the score differences are capped at one, the
C - 2 background classes dominate the partition function, and removing
confusion mass never pays — the stream degenerates into an ordinary
classifier head. ``icd_ce="logsoftmax"`` selects the degenerate uniform
variant for sensitivity comparisons.

The similarity terms are normalized per class coordinate (mean absolute
deviation). A sum-reduced L1 has subgradient entries of magnitude lam,
which at lam = 1 always dominates the cross-entropy gradient (bounded by
1 in every coordinate) and pins the streams at the zero-shot scores;
per-coordinate normalization gives the anchor a slope of lam / C, so
classification evidence can move a score until its confidence reaches
1 - lam / C.

Shuffling uses a counter-based generator keyed on (seed, epoch), so a run
is bitwise reproducible from its config alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .alf import parse_strategy
from .bundle import EpisodeSplit, FeatureBundle
from .errors import ConfigError, DataError, NumericError, shape_check
from .model import (
    ForwardCache,
    LdcModel,
    ModelConfig,
    backward_batch,
    forward_batch,
    init_model,
)
from .nn import init_adamw, adamw_step
from .zeroshot import TextEmbeddingSet, zs_logits_batch

STREAMS = ("zs", "maf", "icd", "alf")
ICD_CE_MODES = ("prob", "logsoftmax")

# Clamp floor for probability-space NLL; deconfused coordinates driven
# below it are treated as empty and stop receiving classification gradient.
PROB_NLL_EPS = 1e-6

# Philox stream tags; epoch shuffles use _SHUFFLE_BASE + epoch.
_SHUFFLE_BASE = 0x0E70C000


@dataclass(frozen=True)
class LossToggles:
    """Which of the five objective terms are active."""

    ce_maf: bool = True
    ce_icd: bool = True
    ce_alf: bool = True
    sim_maf: bool = True
    sim_icd: bool = True

    NAMES = ("ce_maf", "ce_icd", "ce_alf", "sim_maf", "sim_icd")

    @classmethod
    def from_names(cls, names) -> "LossToggles":
        wanted = [str(n).strip().lower() for n in names]
        for name in wanted:
            if name not in cls.NAMES:
                raise ConfigError(f"unknown loss term {name!r}, "
                                  f"expected subset of {cls.NAMES}")
        return cls(**{name: name in wanted for name in cls.NAMES})

    def names(self) -> list[str]:
        return [name for name in self.NAMES if getattr(self, name)]


@dataclass
class TrainConfig:
    shots: int = 16
    epochs: int = 50
    batch_size: int = 64
    lr: float = 1e-3
    lam: float = 1.0
    seed: int = 0
    fusion: str = "wf"
    betas: tuple[float, ...] = (0.1, 0.2, 0.3, 0.4)
    alf_strategy: str = "adaptive"
    icd_branches: tuple[str, ...] = ("a1", "a2", "a3", "res")
    icd_hidden: int = 256
    adapter_ratio: int = 4
    toggles: LossToggles = field(default_factory=LossToggles)
    icd_ce: str = "prob"
    temperature: float | None = None   # None: use the bundle's
    weight_decay: float = 1e-2
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def validate(self) -> None:
        if self.shots < 1:
            raise ConfigError(f"shots must be >= 1, got {self.shots}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if self.lam < 0:
            raise ConfigError(f"similarity weight must be >= 0, got {self.lam}")
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")
        if self.temperature is not None and self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.weight_decay < 0:
            raise ConfigError("weight decay must be >= 0")
        if self.icd_ce not in ICD_CE_MODES:
            raise ConfigError(f"icd_ce must be one of {ICD_CE_MODES}, "
                              f"got {self.icd_ce!r}")
        self.model_config().validate()

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            fusion=self.fusion,
            betas=tuple(self.betas),
            adapter_ratio=self.adapter_ratio,
            icd_hidden=self.icd_hidden,
            icd_branches=tuple(self.icd_branches),
            alf_strategy=self.alf_strategy,
        )

    def to_dict(self) -> dict:
        return {
            "shots": self.shots,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "lambda": self.lam,
            "seed": self.seed,
            "fusion": self.fusion,
            "betas": list(self.betas),
            "alf_strategy": self.alf_strategy,
            "icd_branches": list(self.icd_branches),
            "icd_hidden": self.icd_hidden,
            "adapter_ratio": self.adapter_ratio,
            "losses": self.toggles.names(),
            "icd_ce": self.icd_ce,
            "temperature": self.temperature,
            "weight_decay": self.weight_decay,
            "adam_beta1": self.adam_beta1,
            "adam_beta2": self.adam_beta2,
            "adam_eps": self.adam_eps,
        }


def total_loss(maf_scores, icd_scores, alf_scores, zs_scores, labels,
               lam: float, toggles: LossToggles = LossToggles(),
               icd_ce: str = "prob"):
    """Joint objective over a batch (or single vectors).

    Returns (loss, terms, g_maf, g_icd, g_alf): the batch-mean loss, the
    per-term means, and gradients w.r.t. each score stream treated as an
    independent input. Disabled terms contribute exactly zero to both.
    """
    if icd_ce not in ICD_CE_MODES:
        raise ConfigError(f"icd_ce must be one of {ICD_CE_MODES}, got {icd_ce!r}")
    single = np.asarray(maf_scores).ndim == 1
    maf_s = np.atleast_2d(np.ascontiguousarray(maf_scores, dtype=np.float64))
    icd_s = np.atleast_2d(np.ascontiguousarray(icd_scores, dtype=np.float64))
    alf_s = np.atleast_2d(np.ascontiguousarray(alf_scores, dtype=np.float64))
    zs_s = np.atleast_2d(np.ascontiguousarray(zs_scores, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n = maf_s.shape[0]
    for name, arr in (("icd", icd_s), ("alf", alf_s), ("zs", zs_s)):
        shape_check(arr.shape == maf_s.shape,
                    f"total_loss: {name} scores shape {arr.shape} != {maf_s.shape}")
    if np.any((labels < 0) | (labels >= maf_s.shape[1])):
        raise IndexError(f"label out of range for {maf_s.shape[1]} classes")

    g_maf = np.zeros_like(maf_s)
    g_icd = np.zeros_like(icd_s)
    g_alf = np.zeros_like(alf_s)
    terms: dict[str, float] = {}
    loss = 0.0

    def ce(scores, grad_acc, key, prob_space=False):
        nonlocal loss
        if prob_space:
            losses, grad = kernels.prob_nll_rows(scores, labels, PROB_NLL_EPS)
        else:
            losses, grad = kernels.cross_entropy_rows(scores, labels)
        value = float(losses.mean())
        terms[key] = value
        loss += value
        grad_acc += grad / n

    if toggles.ce_maf:
        ce(maf_s, g_maf, "ce_maf")
    if toggles.ce_icd:
        ce(icd_s, g_icd, "ce_icd", prob_space=(icd_ce == "prob"))
    if toggles.ce_alf:
        ce(alf_s, g_alf, "ce_alf")

    c = maf_s.shape[1]

    def sim(scores, grad_acc, key):
        nonlocal loss
        losses, grad = kernels.l1_rows(scores, zs_s)
        value = float(losses.mean()) / c
        terms[key] = value
        loss += lam * value
        grad_acc += (lam / (n * c)) * grad

    if toggles.sim_maf:
        sim(maf_s, g_maf, "sim_maf")
    if toggles.sim_icd:
        sim(icd_s, g_icd, "sim_icd")

    if single:
        return loss, terms, g_maf[0], g_icd[0], g_alf[0]
    return loss, terms, g_maf, g_icd, g_alf


@dataclass
class TrainResult:
    model: LdcModel
    loss_trace: list[dict]
    backend: str
    config: TrainConfig


def _bundle_tensors(bundle: FeatureBundle, indices: np.ndarray):
    if bundle.image_embeddings is None:
        raise DataError(
            "bundle has no precomputed image embeddings; the zero-shot and "
            "deconfusion paths need them"
        )
    levels = [np.ascontiguousarray(lvl[indices]) for lvl in bundle.levels]
    labels = np.ascontiguousarray(bundle.labels[indices])
    return levels, labels, bundle.image_embeddings[indices]


def _zs_for(bundle: FeatureBundle, embeddings: np.ndarray,
            temperature: float | None) -> np.ndarray:
    texts = TextEmbeddingSet(bundle.text_embeddings, bundle.class_names)
    tau = bundle.temperature if temperature is None else temperature
    return zs_logits_batch(embeddings, texts, tau).logits


def train(bundle: FeatureBundle, split: EpisodeSplit,
          config: TrainConfig) -> TrainResult:
    """Fit the learnable heads on the episode's train records.

    Deterministic given the seed: fixed init, fixed per-epoch shuffles,
    fixed batch reduction order. The projector and text embeddings are
    never touched.
    """
    config.validate()
    levels, labels, embeddings = _bundle_tensors(bundle, split.train_indices)
    zs_all = _zs_for(bundle, embeddings, config.temperature)

    tau = bundle.temperature if config.temperature is None else config.temperature
    model = init_model(config.seed, bundle.class_count, bundle.level_dims,
                       bundle.embedding_dim, config=config.model_config(),
                       projector=bundle.projector, temperature=tau)
    params = model.trainable_parameters()
    state = init_adamw(params, lr=config.lr, beta1=config.adam_beta1,
                       beta2=config.adam_beta2, eps=config.adam_eps,
                       weight_decay=config.weight_decay)

    n = len(split.train_indices)
    trace: list[dict] = []
    for epoch in range(config.epochs):
        rng = np.random.Generator(np.random.Philox(
            key=np.array([config.seed, _SHUFFLE_BASE + epoch], dtype=np.uint64)
        ))
        order = rng.permutation(n)
        epoch_loss = 0.0
        term_sums: dict[str, float] = {}
        for start in range(0, n, config.batch_size):
            batch = order[start:start + config.batch_size]
            batch_levels = [lvl[batch] for lvl in levels]
            cache = forward_batch(model, batch_levels, zs_all[batch])
            loss, terms, g_maf, g_icd, g_alf = total_loss(
                cache.maf_scores, cache.icd_scores, cache.alf_scores,
                cache.zs, labels[batch], config.lam, config.toggles,
                icd_ce=config.icd_ce,
            )
            if not np.isfinite(loss):
                raise NumericError(
                    f"non-finite loss at epoch {epoch}, batch offset {start}"
                )
            grads = backward_batch(model, cache, g_maf, g_icd, g_alf)
            adamw_step(params, grads, state)
            epoch_loss += loss * len(batch)
            for key, val in terms.items():
                term_sums[key] = term_sums.get(key, 0.0) + val * len(batch)
        entry = {"epoch": epoch, "loss": epoch_loss / n}
        entry.update({key: val / n for key, val in term_sums.items()})
        trace.append(entry)
    return TrainResult(model=model, loss_trace=trace, backend=kernels.BACKEND,
                       config=config)


@dataclass
class EvalReport:
    """Accuracy, per-class accuracy, confusion counts, and confusion score.

    The confusion matrix is counts with true classes as rows. The
    confusion score is the mean off-diagonal probability mass of the
    per-class averaged predicted distributions (softmax of the evaluated
    stream; the zero-shot stream already is one).
    """

    stream: str
    accuracy: float
    per_class_accuracy: np.ndarray
    confusion: np.ndarray
    confusion_score: float
    n_evaluated: int
    stream_accuracies: dict[str, float]

    def to_dict(self) -> dict:
        per_class = [None if np.isnan(v) else float(v)
                     for v in self.per_class_accuracy]
        return {
            "stream": self.stream,
            "accuracy": self.accuracy,
            "per_class_accuracy": per_class,
            "confusion": self.confusion.tolist(),
            "confusion_score": self.confusion_score,
            "n_evaluated": self.n_evaluated,
            "stream_accuracies": self.stream_accuracies,
        }


def confusion_csv(confusion: np.ndarray, class_names: list[str]) -> str:
    lines = ["true\\pred," + ",".join(class_names)]
    for name, row in zip(class_names, confusion):
        lines.append(name + "," + ",".join(str(int(v)) for v in row))
    return "\n".join(lines) + "\n"


def _stream_scores(cache: ForwardCache, stream: str) -> np.ndarray:
    if stream == "zs":
        return cache.zs
    if stream == "maf":
        return cache.maf_scores
    if stream == "icd":
        return cache.icd_scores
    if stream == "alf":
        return cache.alf_scores
    raise ConfigError(f"unknown stream {stream!r}, expected one of {STREAMS}")


def evaluate(bundle: FeatureBundle, split: EpisodeSplit, model: LdcModel,
             stream: str = "alf", partition: str = "test") -> EvalReport:
    """Argmax evaluation of one stream; ties go to the lowest class index."""
    if partition == "test":
        indices = split.test_indices
    elif partition == "train":
        indices = split.train_indices
    else:
        raise ConfigError(f"partition must be test or train, got {partition!r}")
    if len(indices) == 0:
        raise DataError(f"{partition} partition is empty")
    if stream not in STREAMS:
        raise ConfigError(f"unknown stream {stream!r}, expected one of {STREAMS}")

    levels, labels, embeddings = _bundle_tensors(bundle, indices)
    zs = _zs_for(bundle, embeddings, model.temperature)
    cache = forward_batch(model, levels, zs)

    c = bundle.class_count
    stream_acc = {}
    for name in STREAMS:
        preds = np.argmax(_stream_scores(cache, name), axis=1)
        stream_acc[name] = float(np.mean(preds == labels))

    scores = _stream_scores(cache, stream)
    preds = np.argmax(scores, axis=1)
    confusion = np.zeros((c, c), dtype=np.int64)
    np.add.at(confusion, (labels, preds), 1)
    row_sums = confusion.sum(axis=1)
    with np.errstate(invalid="ignore"):
        per_class = np.where(row_sums > 0, np.diag(confusion) / row_sums, np.nan)
    accuracy = float(np.trace(confusion) / len(indices))

    probs = scores if stream == "zs" else kernels.softmax_rows(scores)
    present = np.flatnonzero(row_sums > 0)
    off_diag = []
    for label in present:
        mean_dist = probs[labels == label].mean(axis=0)
        off_diag.append(1.0 - mean_dist[label])
    confusion_score = float(np.mean(off_diag))

    return EvalReport(
        stream=stream,
        accuracy=accuracy,
        per_class_accuracy=per_class,
        confusion=confusion,
        confusion_score=confusion_score,
        n_evaluated=len(indices),
        stream_accuracies=stream_acc,
    )


def with_strategy(model: LdcModel, strategy: str) -> LdcModel:
    """Same parameters, different fusion strategy (for ablation rows)."""
    parse_strategy(strategy)
    return replace(model, config=replace(model.config, alf_strategy=strategy))
