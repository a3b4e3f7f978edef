"""Pretraining loops, linear-probe evaluation, metrics and the budget sweep."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from . import autodiff as ad
from . import losses
from .autodiff import ParamStore, Tensor
from .data import (
    LabeledDataset,
    SyntheticSpec,
    generate_synthetic,
    load_dataset,
    split_dataset,
)
from .networks import (
    EncoderNet,
    GeneratorNet,
    encoder_forward,
    generator_forward,
    load_checkpoint,
    prefixed_state,
    save_checkpoint,
    unprefixed_state,
)
from .views import VIEW_RANGE, ChannelStats, PerturbationDelta, expert_batch, make_view, project_l1

logger = logging.getLogger(__name__)

GENERATOR_METHODS = ("viewmaker", "divmaker")
EXPERT_METHODS = ("expert_basic", "expert_full")
# "none" feeds clamp(x) as both views: the zero-perturbation, no-augmentation control
METHODS = GENERATOR_METHODS + EXPERT_METHODS + ("none",)
METRICS_HEADER = ("epoch", "encoder_loss", "generator_loss", "view_anchor_cos", "view_view_cos")


class ConfigError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class ExperimentConfig:
    method: str
    dataset: Union[str, dict]
    budget: float = 0.05
    temperature: float = losses.DEFAULT_TEMPERATURE
    num_views: int = 2
    lr: float = 0.005
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 30
    seed: int = 0
    embed_dim: int = 64
    generator_width: int = 16
    generator_seed: Optional[int] = None
    adversarial_mode: str = "reversal"
    normalize: bool = True
    split_fractions: tuple = (0.8, 0.1, 0.1)
    probe_epochs: int = 100
    probe_lr: float = 0.005
    f1_average: str = "micro"
    precision: str = "float32"

    REQUIRED = ("method", "dataset")

    def __post_init__(self):
        self.split_fractions = tuple(self.split_fractions)
        self.validate()

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"method: must be one of {METHODS}, got {self.method!r}")
        if self.method in GENERATOR_METHODS and not self.budget > 0:
            raise ConfigError(f"budget: must be positive for {self.method}, got {self.budget}")
        if self.method == "divmaker" and self.num_views < 2:
            raise ConfigError(f"num_views: divmaker needs K >= 2, got {self.num_views}")
        if not self.lr > 0 or not self.probe_lr > 0:
            raise ConfigError("lr: learning rates must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum: must lie in [0, 1), got {self.momentum}")
        if not self.temperature > 0:
            raise ConfigError(f"temperature: must be positive, got {self.temperature}")
        if self.batch_size < 2:
            raise ConfigError("batch_size: needs at least 2 samples for negatives")
        if self.epochs < 0 or self.probe_epochs < 0:
            raise ConfigError("epochs: must be non-negative")
        if self.adversarial_mode not in ("reversal", "alternating"):
            raise ConfigError(f"adversarial_mode: unknown mode {self.adversarial_mode!r}")
        if self.f1_average not in ("micro", "macro"):
            raise ConfigError(f"f1_average: must be 'micro' or 'macro', got {self.f1_average!r}")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision: must be float32 or float64, got {self.precision!r}")

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split_fractions"] = list(self.split_fractions)
        return d

    def replace(self, **changes) -> "ExperimentConfig":
        d = self.to_dict()
        d.update(changes)
        return config_from_dict(d)


_FIELD_TYPES = {
    "method": str, "dataset": (str, dict), "budget": (int, float), "temperature": (int, float),
    "num_views": int, "lr": (int, float), "momentum": (int, float), "batch_size": int,
    "epochs": int, "seed": int, "embed_dim": int, "generator_width": int,
    "generator_seed": (int, type(None)), "adversarial_mode": str, "normalize": bool,
    "split_fractions": (list, tuple), "probe_epochs": int, "probe_lr": (int, float),
    "f1_average": str, "precision": str,
}


def config_from_dict(d: dict) -> ExperimentConfig:
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    names = {f.name for f in fields(ExperimentConfig)}
    for key in d:
        if key not in names:
            raise ConfigError(f"{key}: unknown config key")
    for key in ExperimentConfig.REQUIRED:
        if key not in d:
            raise ConfigError(f"{key}: required config key missing")
    for key, value in d.items():
        allowed = _FIELD_TYPES[key] if isinstance(_FIELD_TYPES[key], tuple) else (_FIELD_TYPES[key],)
        if (isinstance(value, bool) and bool not in allowed) or not isinstance(value, allowed):
            names = "/".join(t.__name__ for t in allowed)
            raise ConfigError(f"{key}: expected {names}, got {type(value).__name__}")
    return ExperimentConfig(**d)


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary printable parts."""
    digest = hashlib.sha256(":".join(repr(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFFFFFFFFFFFFFF


# ---------------------------------------------------------------------------
# data plumbing
# ---------------------------------------------------------------------------

@dataclass
class PreparedData:
    train: LabeledDataset
    val: LabeledDataset
    test: LabeledDataset
    stats: Optional[ChannelStats]


def prepare_data(config: ExperimentConfig, dataset: Optional[LabeledDataset] = None,
                 meta: Optional[dict] = None, stats: Optional[ChannelStats] = None) -> PreparedData:
    """Load or synthesise the dataset, split it and z-score it.

    The z-scoring uses ``stats`` when given (e.g. the ones a checkpoint was
    trained with), otherwise moments of the train split.
    """
    if dataset is None:
        if isinstance(config.dataset, dict):
            dataset = generate_synthetic(SyntheticSpec.from_dict(config.dataset))
            meta = {}
        else:
            dataset, meta = load_dataset(config.dataset)
    meta = meta or {}
    split_info = meta.get("split", {})
    fractions = split_info.get("fractions", config.split_fractions)
    split_seed = split_info.get("seed", config.seed)
    train, val, test = split_dataset(dataset, fractions, split_seed)
    if not config.normalize:
        stats = None
    else:
        stats = stats if stats is not None else ChannelStats.compute(train.images)
        train, val, test = (
            LabeledDataset(stats.apply(d.images), d.labels, d.num_classes, d.split, d.class_names)
            for d in (train, val, test)
        )
    dtype = config.dtype
    for d in (train, val, test):
        d.images = d.images.astype(dtype, copy=False)
    return PreparedData(train, val, test, stats)


# ---------------------------------------------------------------------------
# pretraining
# ---------------------------------------------------------------------------

@dataclass
class EpochMetrics:
    epoch: int
    encoder_loss: float
    generator_loss: Optional[float]
    view_anchor_cos: float
    view_view_cos: float


@dataclass
class PretrainResult:
    config: ExperimentConfig
    encoder: EncoderNet
    generator: Optional[GeneratorNet]
    history: list = field(default_factory=list)
    stats: Optional[ChannelStats] = None

    def checkpoint_params(self) -> dict[str, np.ndarray]:
        params = prefixed_state("encoder", self.encoder.params)
        if self.generator is not None:
            params.update(prefixed_state("generator", self.generator.params))
        return params

    def save_checkpoint(self, path) -> None:
        payload = {"config": self.config.to_dict(),
                   "channel_stats": self.stats.to_dict() if self.stats is not None else None,
                   "in_channels": self.encoder.in_channels}
        save_checkpoint(path, payload, self.checkpoint_params())

    def metrics_csv(self) -> str:
        return metrics_to_csv(self.history)


def metrics_to_csv(history: Sequence[EpochMetrics]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRICS_HEADER)
    for m in history:
        writer.writerow([m.epoch, repr(m.encoder_loss),
                         "" if m.generator_loss is None else repr(m.generator_loss),
                         repr(m.view_anchor_cos), repr(m.view_view_cos)])
    return buf.getvalue()


def metrics_from_csv(text: str) -> list[EpochMetrics]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != METRICS_HEADER:
        raise ValueError("metrics CSV has an unexpected header")
    out = []
    for r in rows[1:]:
        out.append(EpochMetrics(int(r[0]), float(r[1]), None if r[2] == "" else float(r[2]),
                                float(r[3]), float(r[4])))
    return out


def build_networks(config: ExperimentConfig, in_channels: int) -> tuple[EncoderNet, Optional[GeneratorNet]]:
    enc = EncoderNet(in_channels, config.embed_dim, seed=derive_seed(config.seed, "encoder"), dtype=config.dtype)
    gen = None
    if config.method in GENERATOR_METHODS:
        gseed = config.seed if config.generator_seed is None else config.generator_seed
        gen = GeneratorNet(in_channels, config.generator_width, seed=derive_seed(gseed, "generator"),
                           dtype=config.dtype)
    return enc, gen


StepHook = Callable[[str, str, "Trainer"], None]


class Trainer:
    """Holds the networks and runs one method's per-batch update."""

    def __init__(self, config: ExperimentConfig, in_channels: int, hook: Optional[StepHook] = None):
        self.config = config
        self.encoder, self.generator = build_networks(config, in_channels)
        gseed = config.seed if config.generator_seed is None else config.generator_seed
        self.noise_rng = np.random.default_rng(derive_seed(gseed, "noise"))
        self.aug_rng = np.random.default_rng(derive_seed(config.seed, "augment"))
        self.hook = hook
        self.emitted_views: Optional[Callable[[np.ndarray], None]] = None

    def _notify(self, stage: str, phase: str) -> None:
        if self.hook is not None:
            self.hook(stage, phase, self)

    def _noise_seed(self) -> int:
        return int(self.noise_rng.integers(0, 2 ** 63 - 1))

    def generate_views(self, x: Tensor, copies: int) -> tuple[Tensor, PerturbationDelta]:
        """``copies`` budgeted, clamped views of every sample, stacked copy-major."""
        stacked = ad.concat([x] * copies, axis=0) if copies > 1 else x
        raw = generator_forward(self.generator, stacked, self._noise_seed())
        delta = project_l1(PerturbationDelta(raw, self.config.budget))
        views = make_view(stacked, delta)
        if self.emitted_views is not None:
            self.emitted_views(views.data)
        return views, delta

    def _cosines(self, anchor: np.ndarray, views: Sequence[np.ndarray]) -> tuple[float, float]:
        a = anchor / np.linalg.norm(anchor, axis=1, keepdims=True)
        vs = [v / np.linalg.norm(v, axis=1, keepdims=True) for v in views]
        va = float(np.mean([np.sum(v * a, axis=1).mean() for v in vs]))
        pairs = [np.sum(vs[i] * vs[j], axis=1).mean() for i in range(len(vs)) for j in range(i + 1, len(vs))]
        return va, float(np.mean(pairs))

    def _anchor_embedding(self, x: Tensor) -> np.ndarray:
        return encoder_forward(self.encoder, Tensor(x.data), frozen=True).data

    def step(self, batch: np.ndarray) -> tuple[float, Optional[float], float, float]:
        x = Tensor(batch)
        method = self.config.method
        if method == "viewmaker":
            if self.config.adversarial_mode == "reversal":
                return self._viewmaker_reversal_step(x)
            return self._viewmaker_alternating_step(x)
        if method == "divmaker":
            return self._divmaker_step(x)
        return self._encoder_only_step(x, method)

    def _viewmaker_reversal_step(self, x: Tensor):
        cfg = self.config
        B = x.shape[0]
        self._notify("joint", "before")
        views, _ = self.generate_views(x, 2)
        emb = encoder_forward(self.encoder, ad.gradient_reversal(views))
        loss = losses.ntxent_loss(emb, cfg.temperature)
        ad.backward(loss)
        ad.sgd_step(self.encoder.params, cfg.lr, cfg.momentum)
        ad.sgd_step(self.generator.params, cfg.lr, cfg.momentum)
        self._notify("joint", "after")
        gen_loss = losses.viewmaker_generator_loss(loss).item()
        va, vv = self._cosines(self._anchor_embedding(x), [emb.data[:B], emb.data[B:]])
        return loss.item(), gen_loss, va, vv

    def _viewmaker_alternating_step(self, x: Tensor):
        cfg = self.config
        B = x.shape[0]
        self._notify("generator", "before")
        views, _ = self.generate_views(x, 2)
        g_loss = ad.neg(losses.ntxent_loss(encoder_forward(self.encoder, views, frozen=True), cfg.temperature))
        ad.backward(g_loss)
        ad.sgd_step(self.generator.params, cfg.lr, cfg.momentum)
        self._notify("generator", "after")
        self._notify("encoder", "before")
        emb = encoder_forward(self.encoder, Tensor(views.data))
        loss = losses.ntxent_loss(emb, cfg.temperature)
        ad.backward(loss)
        ad.sgd_step(self.encoder.params, cfg.lr, cfg.momentum)
        self._notify("encoder", "after")
        va, vv = self._cosines(self._anchor_embedding(x), [emb.data[:B], emb.data[B:]])
        return loss.item(), g_loss.item(), va, vv

    def _divmaker_step(self, x: Tensor):
        cfg = self.config
        B, K = x.shape[0], cfg.num_views
        self._notify("generator", "before")
        views, _ = self.generate_views(x, K)
        anchor = encoder_forward(self.encoder, Tensor(x.data), frozen=True)
        view_emb = encoder_forward(self.encoder, views, frozen=True)
        per_view = [view_emb[k * B:(k + 1) * B] for k in range(K)]
        g_loss = losses.divmaker_loss(anchor, per_view, cfg.temperature)
        ad.backward(g_loss)
        ad.sgd_step(self.generator.params, cfg.lr, cfg.momentum)
        self._notify("generator", "after")

        self._notify("encoder", "before")
        emb = encoder_forward(self.encoder, Tensor(views.data[:2 * B]))
        loss = losses.ntxent_loss(emb, cfg.temperature)
        ad.backward(loss)
        ad.sgd_step(self.encoder.params, cfg.lr, cfg.momentum)
        self._notify("encoder", "after")
        va, vv = self._cosines(anchor.data, [v.data for v in per_view])
        return loss.item(), g_loss.item(), va, vv

    def _encoder_only_step(self, x: Tensor, method: str):
        cfg = self.config
        B = x.shape[0]
        if method == "none":
            # a zero perturbation passed through the same clamp generated views get
            same = np.clip(x.data, *VIEW_RANGE)
            pair = np.concatenate([same, same])
        else:
            flip = method == "expert_full"
            pair = np.concatenate([expert_batch(x.data, self.aug_rng, flip),
                                   expert_batch(x.data, self.aug_rng, flip)])
        self._notify("encoder", "before")
        emb = encoder_forward(self.encoder, Tensor(pair.astype(x.dtype, copy=False)))
        loss = losses.ntxent_loss(emb, cfg.temperature)
        ad.backward(loss)
        ad.sgd_step(self.encoder.params, cfg.lr, cfg.momentum)
        self._notify("encoder", "after")
        va, vv = self._cosines(self._anchor_embedding(x), [emb.data[:B], emb.data[B:]])
        return loss.item(), None, va, vv


def pretrain(config: ExperimentConfig, data: Optional[PreparedData] = None,
             hook: Optional[StepHook] = None,
             view_monitor: Optional[Callable[[np.ndarray], None]] = None) -> PretrainResult:
    """Train encoder (and generator) for ``config.epochs`` epochs.

    ``hook(stage, phase, trainer)`` is called around every parameter update
    with ``stage`` in {"joint", "generator", "encoder"} and ``phase`` in
    {"before", "after"}. ``view_monitor`` receives every generated view batch.
    """
    data = data or prepare_data(config)
    train = data.train
    trainer = Trainer(config, train.chw[0], hook)
    trainer.emitted_views = view_monitor
    order_rng = np.random.default_rng(derive_seed(config.seed, "order"))
    n = len(train)
    bs = config.batch_size
    n_batches = n // bs
    if config.epochs > 0 and n_batches == 0:
        raise TrainingError(f"training split has {n} samples, fewer than one batch of {bs}")
    history = []
    for epoch in range(config.epochs):
        perm = order_rng.permutation(n)
        sums = np.zeros(4)
        gen_seen = False
        for b in range(n_batches):
            idx = np.sort(perm[b * bs:(b + 1) * bs])
            try:
                enc_loss, gen_loss, va, vv = trainer.step(train.images[idx])
            except ad.NonFiniteError as exc:
                raise TrainingError(f"non-finite value at epoch {epoch}, batch {b}: {exc}") from exc
            if not all(math.isfinite(v) for v in (enc_loss, va, vv)) or (
                    gen_loss is not None and not math.isfinite(gen_loss)):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            sums += (enc_loss, 0.0 if gen_loss is None else gen_loss, va, vv)
            gen_seen = gen_seen or gen_loss is not None
        means = sums / n_batches
        row = EpochMetrics(epoch, float(means[0]), float(means[1]) if gen_seen else None,
                           float(means[2]), float(means[3]))
        logger.info("%s epoch %d: encoder=%.4f generator=%s va=%.4f vv=%.4f", config.method, epoch,
                    row.encoder_loss, row.generator_loss, row.view_anchor_cos, row.view_view_cos)
        history.append(row)
    return PretrainResult(config, trainer.encoder, trainer.generator, history, data.stats)


def restore_networks(path) -> tuple[ExperimentConfig, EncoderNet, Optional[GeneratorNet], Optional[ChannelStats]]:
    payload, params = load_checkpoint(path)
    config = config_from_dict(payload["config"])
    enc, gen = build_networks(config, int(payload["in_channels"]))
    enc.params.load(unprefixed_state("encoder", params))
    if gen is not None:
        gen.params.load(unprefixed_state("generator", params))
    stats = payload.get("channel_stats")
    return config, enc, gen, ChannelStats.from_dict(stats) if stats else None


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def accuracy(preds, labels) -> float:
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.shape != labels.shape:
        raise ValueError(f"accuracy: {preds.shape[0] if preds.ndim else 0} predictions vs "
                         f"{labels.shape[0] if labels.ndim else 0} labels")
    if preds.size == 0:
        raise ValueError("accuracy of an empty set is undefined")
    return float(np.mean(preds == labels))


def _check_binary(a: np.ndarray, what: str) -> None:
    if not np.isin(a, (0, 1)).all():
        raise ValueError(f"{what} must contain only 0/1 entries")


def f1_micro(preds, labels) -> float:
    """Micro F1 pooled over every (sample, class) cell."""
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.shape != labels.shape:
        raise ValueError(f"f1: shape mismatch {preds.shape} vs {labels.shape}")
    _check_binary(preds, "predictions")
    _check_binary(labels, "labels")
    tp = int(np.sum((preds == 1) & (labels == 1)))
    fp = int(np.sum((preds == 1) & (labels == 0)))
    fn = int(np.sum((preds == 0) & (labels == 1)))
    if tp + fp + fn == 0:
        return 1.0
    return 2 * tp / (2 * tp + fp + fn)


def f1_macro(preds, labels) -> float:
    """Unweighted mean of per-class F1 (columns), using the same empty-class rule."""
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.shape != labels.shape or preds.ndim != 2:
        raise ValueError(f"f1: shape mismatch {preds.shape} vs {labels.shape}")
    return float(np.mean([f1_micro(preds[:, j], labels[:, j]) for j in range(preds.shape[1])]))


def predict_classes(logits: np.ndarray) -> np.ndarray:
    return np.argmax(logits, axis=1)  # first maximum wins ties


# ---------------------------------------------------------------------------
# linear probe
# ---------------------------------------------------------------------------

@dataclass
class ProbeResult:
    metric: str
    test_score: float
    train_score: float
    losses: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"metric": self.metric, "test": self.test_score, "train": self.train_score,
                "final_probe_loss": self.losses[-1] if self.losses else None}


def embed(encoder: EncoderNet, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = [encoder_forward(encoder, Tensor(images[i:i + batch_size]), frozen=True).data
           for i in range(0, len(images), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, encoder.embed_dim), dtype=encoder.dtype)


def fit_linear_probe(train_x: np.ndarray, train_y: np.ndarray, test_x: np.ndarray, test_y: np.ndarray,
                     num_classes: int, epochs: int = 100, lr: float = 0.005, momentum: float = 0.9,
                     batch_size: int = 32, seed: int = 0, f1_average: str = "micro",
                     standardize: bool = False) -> ProbeResult:
    """Train a single linear layer on fixed features and score it on the test split.

    With ``standardize`` the features are z-scored with train-split moments first.
    """
    multi = train_y.ndim == 2
    if multi and train_y.shape[1] != num_classes:
        raise ValueError(f"probe head has {num_classes} outputs but labels have width {train_y.shape[1]}")
    if not multi and (train_y.max() >= num_classes or (len(test_y) and test_y.max() >= num_classes)):
        raise ValueError(f"labels exceed probe head size {num_classes}")
    xtr, xte = train_x, test_x
    if standardize:
        mu = train_x.mean(axis=0)
        sd = train_x.std(axis=0)
        sd = np.where(sd > 1e-12, sd, 1.0)
        xtr = ((train_x - mu) / sd).astype(train_x.dtype)
        xte = ((test_x - mu) / sd).astype(train_x.dtype)

    D = xtr.shape[1]
    store = ParamStore(seed)
    rng = np.random.default_rng(derive_seed(seed, "probe"))
    store.add("weight", np.zeros((D, num_classes), dtype=xtr.dtype))
    store.add("bias", np.zeros(num_classes, dtype=xtr.dtype))
    n = len(xtr)
    history = []

    def logits_of(x: Tensor) -> Tensor:
        out = ad.matmul(x, store["weight"])
        return ad.add(out, ad.broadcast_to(ad.reshape(store["bias"], (1, -1)), out.shape))

    for _ in range(epochs):
        perm = rng.permutation(n)
        total = 0.0
        for i in range(0, n, batch_size):
            idx = perm[i:i + batch_size]
            logits = logits_of(Tensor(xtr[idx]))
            if multi:
                loss = losses.sigmoid_binary_cross_entropy(logits, train_y[idx])
            else:
                loss = losses.softmax_cross_entropy(logits, train_y[idx])
            ad.backward(loss)
            ad.sgd_step(store, lr, momentum)
            total += loss.item() * len(idx)
        history.append(total / n)

    def score(x, y) -> float:
        lg = x @ store["weight"].data + store["bias"].data
        if multi:
            preds = (lg > 0).astype(np.int64)  # sigmoid > 0.5
            return f1_micro(preds, y) if f1_average == "micro" else f1_macro(preds, y)
        return accuracy(predict_classes(lg), y)

    metric = ("f1_" + f1_average) if multi else "accuracy"
    return ProbeResult(metric, score(xte, test_y), score(xtr, train_y), history)


def linear_probe(encoder: EncoderNet, train: LabeledDataset, test: LabeledDataset,
                 config: ExperimentConfig) -> ProbeResult:
    """Linear transfer evaluation of a frozen encoder."""
    if train.multi_label != test.multi_label or train.num_classes != test.num_classes:
        raise ValueError("train and test splits disagree on label arity")
    return fit_linear_probe(embed(encoder, train.images), train.labels, embed(encoder, test.images), test.labels,
                            train.num_classes, config.probe_epochs, config.probe_lr, config.momentum,
                            config.batch_size, config.seed, config.f1_average)


def probe_checkpoint(path, data: Optional[PreparedData] = None) -> tuple[ExperimentConfig, ProbeResult]:
    config, enc, _, _ = restore_networks(path)
    data = data or prepare_data(config)
    return config, linear_probe(enc, data.train, data.test, config)


# ---------------------------------------------------------------------------
# budget sweep
# ---------------------------------------------------------------------------

SWEEP_HEADER = ("budget", "method", "metric", "score", "status")


@dataclass
class SweepRow:
    budget: float
    method: str
    metric: str
    score: Optional[float]
    status: str = "ok"


def _sweep_cell(config: ExperimentConfig, data: Optional[PreparedData]) -> ProbeResult:
    data = data or prepare_data(config)
    result = pretrain(config, data)
    return linear_probe(result.encoder, data.train, data.test, config)


def sweep_config(config: ExperimentConfig, method: str, budget: float) -> ExperimentConfig:
    # encoder init and batch order stay on the base seed; the generator stream is per cell
    return config.replace(method=method, budget=float(budget),
                          generator_seed=derive_seed(config.seed, float(budget), method))


def budget_sweep(config: ExperimentConfig, budgets: Sequence[float], methods=GENERATOR_METHODS,
                 data: Optional[PreparedData] = None, workers: int = 1) -> list[SweepRow]:
    """One pretrain + probe per (method, budget); failed cells are marked, not fatal."""
    budgets = [float(b) for b in budgets]
    if any(b <= 0 for b in budgets):
        raise ValueError("budgets must be positive")
    if len(set(budgets)) != len(budgets):
        raise ValueError("budgets must be distinct")
    cells = [(b, m) for b in sorted(budgets) for m in methods]
    configs = [sweep_config(config, m, b) for b, m in cells]
    data = data or prepare_data(config)

    def row(cell, outcome) -> SweepRow:
        b, m = cell
        if isinstance(outcome, Exception):
            logger.warning("sweep cell budget=%s method=%s failed: %s", b, m, outcome)
            return SweepRow(b, m, "", None, f"failed: {type(outcome).__name__}: {outcome}")
        return SweepRow(b, m, outcome.metric, outcome.test_score)

    outcomes: list = []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_sweep_cell, c, data) for c in configs]
            for f in futures:
                try:
                    outcomes.append(f.result())
                except Exception as exc:  # noqa: BLE001 - a failed cell must not abort the sweep
                    outcomes.append(exc)
    else:
        for c in configs:
            try:
                outcomes.append(_sweep_cell(c, data))
            except Exception as exc:  # noqa: BLE001
                outcomes.append(exc)
    return [row(cell, out) for cell, out in zip(cells, outcomes)]


def sweep_to_csv(rows: Sequence[SweepRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SWEEP_HEADER)
    for r in rows:
        writer.writerow([repr(r.budget), r.method, r.metric, "" if r.score is None else repr(r.score), r.status])
    return buf.getvalue()


def sweep_from_csv(text: str) -> list[SweepRow]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != SWEEP_HEADER:
        raise ValueError("sweep CSV has an unexpected header")
    return [SweepRow(float(r[0]), r[1], r[2], None if r[3] == "" else float(r[3]), r[4]) for r in rows[1:]]


def results_json(config: ExperimentConfig, probe: ProbeResult) -> str:
    return json.dumps({"config": config.to_dict(), "probe": probe.to_dict(),
                       probe.metric: probe.test_score}, indent=2, sort_keys=True) + "\n"
