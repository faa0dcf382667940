"""Weakly supervised training with an optional contrastive alignment term."""
from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import numgrad as ng
from .core import Dataset
from .losses import FULL, LITERAL, PART, SQUARED, LossConfig, mtsc_loss, nt_xent_loss, weighted_nt_xent_loss
from .model import ATTENTION, ModelDims, bce_loss, finalize_projection, forward_batch, init_model

log = logging.getLogger(__name__)

OBJECTIVES = ("none", "ntxent", "wntxent", "mtsc")
BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    epochs: int = 40
    lr0: float = 3e-4
    decay: float = 0.1
    decay_every: int = 10
    lambda_mtsc: float = 1.0
    objective: str = "mtsc"
    loss: LossConfig = LossConfig()
    hidden: int = 32
    proj: int | None = None
    shared_projection: bool = True
    tied_adapters: bool = False
    pooling: str = ATTENTION
    preserve_audio_g: bool = False
    early_stop: bool = False
    patience: int = 5
    min_delta: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        for name in ("batch_size", "decay_every", "hidden", "patience"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if not self.lr0 > 0 or not 0 < self.decay <= 1:
            raise ValueError("lr0 must be positive and decay in (0, 1]")
        if self.lambda_mtsc < 0:
            raise ValueError("lambda_mtsc must be non-negative")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")

    def dims(self, dataset: Dataset) -> ModelDims:
        return ModelDims(dataset.D_audio, dataset.D_visual, self.hidden, dataset.C, self.proj, self.shared_projection, self.tied_adapters)


LOSS_PRESETS: dict[str, tuple[str, LossConfig | None]] = {
    "none": ("none", None),
    "ntxent": ("ntxent", None),
    "wntxent": ("wntxent", None),
    "mtsc": ("mtsc", LossConfig(mode=SQUARED, scope=FULL)),
    "mtsc-part": ("mtsc", LossConfig(mode=SQUARED, scope=PART)),
    "mtsc-literal": ("mtsc", LossConfig(mode=LITERAL, scope=FULL)),
}


def lr_schedule(epoch: int, config: TrainConfig = TrainConfig()) -> float:
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return config.lr0 * config.decay ** (epoch // config.decay_every)


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Mapping[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState, lr: float):
    """One bias-corrected Adam update; returns new params and the advanced state."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
    t = state.step + 1
    new_params, m_new, v_new = {}, {}, {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            new_params[name], m_new[name], v_new[name] = p, state.m[name], state.v[name]
            continue
        m = BETA1 * state.m[name] + (1 - BETA1) * g
        v = BETA2 * state.v[name] + (1 - BETA2) * g * g
        m_hat = m / (1 - BETA1**t)
        v_hat = v / (1 - BETA2**t)
        new_params[name] = p - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        m_new[name], v_new[name] = m, v
    return new_params, AdamState(m_new, v_new, t)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    bce: float
    mtsc: float
    total: float
    seconds: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    stopped_early: bool = False

    def __len__(self) -> int:
        return len(self.records)

    def to_csv(self, with_seconds: bool = True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        header = ["epoch", "lr", "bce", "mtsc", "total"] + (["seconds"] if with_seconds else [])
        w.writerow(header)
        for r in self.records:
            row = [r.epoch, repr(r.lr), f"{r.bce:.9g}", f"{r.mtsc:.9g}", f"{r.total:.9g}"]
            if with_seconds:
                row.append(f"{r.seconds:.3f}")
            w.writerow(row)
        return buf.getvalue()


def contrastive_term(out, config: TrainConfig) -> ng.Tensor:
    za, zv = out.projected_audio, out.projected_visual
    if config.objective == "mtsc":
        return mtsc_loss(za, zv, config.loss)
    if config.objective == "ntxent":
        return nt_xent_loss(za, zv, config.loss.temperature)
    if config.objective == "wntxent":
        return weighted_nt_xent_loss(za, zv, config.loss.temperature, config.loss.kernel)
    raise ValueError(config.objective)


def batch_loss(params: Mapping[str, ng.Tensor], xa, xv, targets, config: TrainConfig):
    """(total, bce, contrastive) tensors for one minibatch."""
    out = forward_batch(params, xa, xv, config.pooling)
    bce = bce_loss(out.video_probs, targets)
    if config.objective == "none" or config.lambda_mtsc == 0:
        return bce, bce, None
    aux = contrastive_term(out, config)
    return bce + aux * config.lambda_mtsc, bce, aux


def loss_and_grads(params: Mapping[str, np.ndarray], xa, xv, targets, config: TrainConfig):
    leaves = {k: ng.parameter(v) for k, v in params.items()}
    total, bce, aux = batch_loss(leaves, xa, xv, targets, config)
    total.backward()
    grads = {k: t.grad for k, t in leaves.items() if t.grad is not None}
    return float(total.value), float(bce.value), (0.0 if aux is None else float(aux.value)), grads


EpochCallback = Callable[[int, dict[str, np.ndarray]], None]


def train(
    dataset: Dataset,
    config: TrainConfig = TrainConfig(),
    params: dict[str, np.ndarray] | None = None,
    on_epoch: EpochCallback | None = None,
) -> tuple[dict[str, np.ndarray], TrainHistory]:
    """Minibatch Adam on mean BCE plus the weighted contrastive term.

    ``on_epoch(epoch, params)`` is called after every epoch with the current
    (full) parameters. The returned parameters drop the audio projection head
    unless ``preserve_audio_g`` is set; a shared head is kept for the visual
    branch.
    """
    if len(dataset) == 0:
        raise TrainingError("cannot train on an empty split")
    if params is None:
        params = init_model(config.dims(dataset), config.seed)
    params = {k: np.array(v, copy=True) for k, v in params.items()}
    xa_all, xv_all = dataset.arrays()
    y_all = dataset.video_targets()
    n = len(dataset)
    rng = np.random.default_rng([config.seed, 1])
    state = AdamState.zeros_like(params)
    history = TrainHistory()
    best, stale = np.inf, 0

    for epoch in range(config.epochs):
        start = time.perf_counter()
        lr = lr_schedule(epoch, config)
        perm = rng.permutation(n)
        sums = np.zeros(3)
        for b, lo in enumerate(range(0, n, config.batch_size)):
            idx = np.sort(perm[lo:lo + config.batch_size])
            total, bce, aux, grads = loss_and_grads(params, xa_all[idx], xv_all[idx], y_all[idx], config)
            if not np.isfinite(total):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            params, state = adam_step(params, grads, state, lr)
            sums += np.array([total, bce, aux]) * len(idx)
        total, bce, aux = sums / n
        history.records.append(EpochRecord(epoch, lr, bce, aux, total, time.perf_counter() - start))
        log.debug("epoch %d lr %.2e total %.5f bce %.5f aux %.5f", epoch, lr, total, bce, aux)
        if on_epoch is not None:
            on_epoch(epoch, params)
        if config.early_stop:
            if total < best - config.min_delta:
                best, stale = total, 0
            else:
                stale += 1
                if stale >= config.patience:
                    history.stopped_early = True
                    break

    return finalize_projection(params, config.preserve_audio_g), history


def predict(params: Mapping[str, np.ndarray], dataset: Dataset, pooling: str = ATTENTION, batch_size: int = 64):
    """Segment probabilities (V, T, C, 2) plus encoded features per modality."""
    xa, xv = dataset.arrays()
    probs, enc_a, enc_v = [], [], []
    for lo in range(0, len(dataset), batch_size):
        out = forward_batch(params, xa[lo:lo + batch_size], xv[lo:lo + batch_size], pooling)
        probs.append(np.stack([out.segment_probs_audio.value, out.segment_probs_visual.value], axis=-1))
        enc_a.append(out.encoded_audio.value)
        enc_v.append(out.encoded_visual.value)
    return np.concatenate(probs), np.concatenate(enc_a), np.concatenate(enc_v)


def evaluate(params: Mapping[str, np.ndarray], dataset: Dataset, pooling: str = ATTENTION, symmetric: bool = False):
    """Parsing report on thresholded segment probabilities and alignment report on encoded features."""
    from .metrics import alignment_metrics, flatten_corpus, parsing_report

    probs, enc_a, enc_v = predict(params, dataset, pooling)
    parsing = parsing_report(probs, dataset.label_masks())
    ids = [s.id for s in dataset.samples]
    audio = flatten_corpus(ids, list(enc_a), [s.seg_labels_audio for s in dataset.samples])
    visual = flatten_corpus(ids, list(enc_v), [s.seg_labels_visual for s in dataset.samples])
    alignment = alignment_metrics(audio, visual, symmetric) if audio.labeled.any() else None
    return parsing, alignment
