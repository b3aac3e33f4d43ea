"""Supervised training: weighted cross-entropy + hop penalty, Adam, metrics."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .augment import NO_NOISE, NoiseSpec, apply_plan, sample_plan
from .data import VideoSample
from .errors import ConfigError, InputError, NumericError
from .model import Model
from .tensor import Rng, Tensor, as_tensor, backward, gradcheck, log_softmax, zero_grad

log = logging.getLogger(__name__)

NUM_CLASSES = 7


def class_weights(counts: Sequence[int]) -> np.ndarray:
    """Inverse-frequency weights ``N / (K * N_c)``; sum(w_c * N_c) == N."""
    counts = np.asarray(counts, dtype=np.float64)
    if counts.ndim != 1 or len(counts) == 0:
        raise ConfigError("class counts must be a non-empty 1-D sequence")
    if np.any(counts < 1):
        raise ConfigError(f"every class needs at least one sample, got counts {counts.astype(int).tolist()}")
    return counts.sum() / (len(counts) * counts)


def lr_at(epoch: int, base_lr: float = 1e-5, decay: float = 0.6, every: int = 30) -> float:
    """Step schedule: base_lr * decay ** (epoch // every).

    The product is formed exactly and rounded once, so 1e-5 * 0.6**2 comes
    out as the float nearest 3.6e-6 rather than carrying pow() rounding.
    """
    if every < 1:
        raise ConfigError(f"lr_decay_every must be >= 1, got {every}")
    return float(Fraction(base_lr) * Fraction(decay) ** (epoch // every))


def loss(logits: Tensor, label: int, weights, spatial_penalty=0.0, lambda_f: float = 1.0) -> Tensor:
    """weights[label] * -log softmax(logits)[label] + lambda_f * penalty, one video."""
    logits = as_tensor(logits)
    k = logits.shape[-1]
    if not isinstance(label, (int, np.integer)) or not 0 <= label < k:
        raise InputError(f"label {label!r} outside [0, {k})")
    ce = -log_softmax(logits.reshape(1, k))[0, int(label)] * float(np.asarray(weights)[label])
    return ce + as_tensor(spatial_penalty) * lambda_f


def batch_loss(logits: Tensor, labels: Sequence[int], weights, penalty: Tensor, lambda_f: float) -> Tensor:
    """Mean over the batch of the per-video loss."""
    b, k = logits.shape
    labels = np.asarray(labels, dtype=int)
    if labels.shape != (b,) or np.any(labels < 0) or np.any(labels >= k):
        raise InputError(f"labels {labels.tolist()} invalid for logits of shape {logits.shape}")
    w = np.asarray(weights, dtype=np.float64)[labels]
    onehot = np.zeros((b, k))
    onehot[np.arange(b), labels] = 1.0
    ce = -(log_softmax(logits) * Tensor(onehot * w[:, None])).sum()
    total = ce + penalty.sum() * lambda_f
    return total * (1.0 / b)


# -- optimizer ---------------------------------------------------------------


class Adam:
    """Bias-corrected Adam keyed by parameter name."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, named_params: Iterable[tuple[str, Tensor]], lr: float) -> None:
        named_params = list(named_params)
        for name, p in named_params:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NumericError(f"non-finite gradient for {name} at optimizer step {self.t + 1}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in named_params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m.get(name, np.zeros_like(p.data))
            v = self.v.get(name, np.zeros_like(p.data))
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * g * g
            self.m[name], self.v[name] = m, v
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(named_params, state: Adam, lr: float) -> None:
    state.step(named_params, lr)


# -- metrics -----------------------------------------------------------------


@dataclass
class MetricsReport:
    accuracy: float
    macro_f1: float
    confusion: np.ndarray  # rows = truth, cols = prediction

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "macro_f1": self.macro_f1, "confusion": self.confusion.tolist()}


def metrics_from_predictions(truth, pred, num_classes: int = NUM_CLASSES) -> MetricsReport:
    truth = np.asarray(truth, dtype=int)
    pred = np.asarray(pred, dtype=int)
    if truth.size == 0:
        raise InputError("cannot compute metrics on an empty set")
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(conf, (truth, pred), 1)
    tp = np.diag(conf).astype(np.float64)
    support = conf.sum(axis=1)
    predicted = conf.sum(axis=0)
    f1 = np.zeros(num_classes)
    for c in range(num_classes):
        denom = support[c] + predicted[c]
        if support[c] > 0 and denom > 0:
            f1[c] = 2.0 * tp[c] / denom
    return MetricsReport(float(tp.sum() / truth.size), float(f1.mean()), conf)


def predict(model: Model, videos: Sequence[VideoSample], batch_size: int = 64) -> np.ndarray:
    """Argmax class per video in inference mode."""
    out = []
    for i in range(0, len(videos), batch_size):
        out.append(model.forward(videos[i : i + batch_size]).logits.data.argmax(axis=1))
    return np.concatenate(out)


def evaluate(model: Model, dataset: Sequence[VideoSample], batch_size: int = 64) -> MetricsReport:
    if len(dataset) == 0:
        raise InputError("evaluate needs a non-empty dataset")
    truth = [v.target for v in dataset]
    return metrics_from_predictions(truth, predict(model, dataset, batch_size), model.config.num_classes)


# -- training loop -----------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 16
    base_lr: float = 1e-5
    lr_decay: float = 0.6
    lr_decay_every: int = 30
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lambda_f: float = 1.0
    seed: int = 0
    noise: NoiseSpec = field(default_factory=lambda: NO_NOISE)

    def lr(self, epoch: int) -> float:
        return lr_at(epoch, self.base_lr, self.lr_decay, self.lr_decay_every)


@dataclass
class TrainResult:
    model: Model
    history: list[dict]
    best_epoch: int | None
    best_accuracy: float | None


def shuffled_batches(samples: Sequence[VideoSample], batch_size: int, rng: Rng) -> Iterator[list[VideoSample]]:
    order = rng.permutation(len(samples))
    for i in range(0, len(order), batch_size):
        yield [samples[j] for j in order[i : i + batch_size]]


def noisy_view(batch: Sequence[VideoSample], noise: NoiseSpec, rng: Rng) -> list[VideoSample]:
    """Apply a fresh augmentation plan to each video when augmentation is active."""
    if not noise.augment_active:
        return list(batch)
    return [apply_plan(v, sample_plan(noise, rng)) for v in batch]


def fit(
    model: Model,
    batch_source: Callable[[int, Rng], Iterable[list[VideoSample]]],
    weights: np.ndarray,
    config: TrainConfig,
    validation: Sequence[VideoSample],
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Generic epoch loop; ``batch_source(epoch, rng)`` yields lists of samples.

    Keeps the parameters of the epoch with the best validation accuracy
    (earliest epoch on ties).
    """
    rng = Rng(config.seed)
    opt = Adam(config.beta1, config.beta2, config.adam_eps)
    history: list[dict] = []
    best_state, best_acc, best_epoch = None, None, None
    named = model.named_parameters()
    for epoch in range(config.epochs):
        lr = config.lr(epoch)
        losses = []
        for step, batch in enumerate(batch_source(epoch, rng)):
            views = noisy_view(batch, config.noise, rng)
            zero_grad(model.parameters())
            res = model.forward(views, training=True, noise=config.noise, rng=rng)
            total = batch_loss(res.logits, [v.target for v in batch], weights, res.penalty, config.lambda_f)
            value = total.item()
            if not np.isfinite(value):
                raise NumericError(f"non-finite loss at epoch {epoch}, step {step}")
            backward(total)
            opt.step(named, lr)
            losses.append(value)
        report = evaluate(model, validation)
        record = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": float(np.mean(losses)) if losses else float("nan"),
            "val_accuracy": report.accuracy,
            "val_macro_f1": report.macro_f1,
        }
        history.append(record)
        log.debug("epoch %d lr %.3g loss %.4f acc %.4f", epoch, lr, record["train_loss"], report.accuracy)
        if on_epoch is not None:
            on_epoch(record)
        if best_acc is None or report.accuracy > best_acc:
            best_acc, best_epoch, best_state = report.accuracy, epoch, model.state_dict()
    if best_state is not None:
        model.load_state_dict(best_state)
    return TrainResult(model, history, best_epoch, best_acc)


def train(
    model: Model,
    labelled: Sequence[VideoSample],
    config: TrainConfig,
    validation: Sequence[VideoSample] | None = None,
    weights: np.ndarray | None = None,
    on_epoch=None,
) -> TrainResult:
    """Supervised training on ``labelled``; selection uses ``validation`` (or ``labelled``)."""
    if len(labelled) == 0:
        raise InputError("train needs a non-empty labelled set")
    if weights is None:
        counts = np.bincount([v.target for v in labelled], minlength=model.config.num_classes)
        weights = class_weights(np.maximum(counts, 1))
    val = validation if validation is not None and len(validation) else labelled

    def source(epoch, rng):
        return shuffled_batches(labelled, config.batch_size, rng)

    return fit(model, source, weights, config, val, on_epoch)


def model_gradcheck(
    model: Model,
    video: np.ndarray,
    label: int,
    weights=None,
    lambda_f: float = 1.0,
    n_coords: int = 100,
    h: float = 1e-6,
    seed: int = 0,
    jitter: float = 0.1,
    floor: float = 1e-5,
) -> dict:
    """Finite-difference check of the full loss on one video.

    Shift parameters start at exactly zero, which puts many ReLU inputs on the
    kink, and the zero gate vectors hide every gradient of the gate matrices;
    both are jittered by N(0, jitter) on a private copy first. With
    h = 1e-6 the difference quotient carries ~1e-9 of rounding noise, so
    relative errors use max(|a|, |n|, floor) as denominator.
    """
    m = model.copy()
    rng = Rng(seed)
    for name, p in m.named_parameters():
        if ".shift" in name or name in ("channel.w", "frame.w"):
            p.data = p.data + rng.normal(0.0, jitter, p.shape)
    w = np.ones(m.config.num_classes) if weights is None else np.asarray(weights)

    def f():
        res = m.forward([video])
        return loss(res.logits[0], label, w, res.penalty[0], lambda_f)

    return gradcheck(f, m.parameters(), n_coords=n_coords, h=h, rng=rng, floor=floor)
