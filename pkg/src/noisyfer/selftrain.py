"""Noisy-student self-training.

One generation: the current teacher labels the unlabelled pool in inference
mode, the pseudo-labels are rebalanced towards the labelled class
distribution, and a fresh student is trained on concatenated batches of
``b`` labelled + ``r*b`` pseudo-labelled videos with augmentation and
dropout. The student then becomes the teacher.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from typing import Callable, Iterator, Sequence

import numpy as np

from .augment import NoiseSpec
from .data import VideoSample
from .errors import ConfigError, InputError
from .model import Model, ModelConfig
from .tensor import Rng
from .training import MetricsReport, TrainConfig, class_weights, evaluate, fit, train

log = logging.getLogger(__name__)

# class indices in data.CLASSES order
PAPER_MINORITY = (3, 6, 4)  # fear, disgust, surprise: duplicated
PAPER_MAJORITY = (0, 5, 1)  # anger, happiness, neutral: confidence-filtered


@dataclass
class PseudoLabelSet:
    video_ids: list[str]
    labels: np.ndarray
    confidences: np.ndarray
    generation: int = 0

    def __len__(self):
        return len(self.video_ids)

    def histogram(self, num_classes: int = 7) -> list[int]:
        return np.bincount(self.labels, minlength=num_classes).tolist()

    def __eq__(self, other):
        return (
            isinstance(other, PseudoLabelSet)
            and self.video_ids == other.video_ids
            and np.array_equal(self.labels, other.labels)
            and self.confidences.tobytes() == other.confidences.tobytes()
            and self.generation == other.generation
        )


def pseudo_label(teacher: Model, unlabelled: Sequence[VideoSample], generation: int = 0, batch_size: int = 64) -> PseudoLabelSet:
    """Hard argmax labels and max-softmax confidences, no dropout, no augmentation."""
    if len(unlabelled) == 0:
        raise InputError("pseudo_label needs a non-empty unlabelled set")
    probs = teacher.predict_proba(list(unlabelled), batch_size)
    labels = probs.argmax(axis=1)
    conf = probs[np.arange(len(labels)), labels]
    return PseudoLabelSet([v.video_id for v in unlabelled], labels.astype(int), conf, generation)


# -- balancing ---------------------------------------------------------------


@dataclass(frozen=True)
class BalanceSpec:
    """Target class distribution plus which classes may grow or shrink.

    ``minority`` classes may be duplicated, ``majority`` classes are confidence
    filtered and trimmed. ``None`` derives both from the pseudo-label
    distribution: classes under their target fraction are minority, the rest
    majority.
    """

    target_counts: tuple[int, ...]
    minority: tuple[int, ...] | None = None
    majority: tuple[int, ...] | None = None
    threshold: float = 0.5

    def __post_init__(self):
        if not self.target_counts or sum(self.target_counts) <= 0 or min(self.target_counts) < 0:
            raise ConfigError(f"invalid target counts {self.target_counts}")
        if self.minority is not None and self.majority is not None and set(self.minority) & set(self.majority):
            raise ConfigError("a class cannot be both minority and majority")

    @property
    def fractions(self) -> list[Fraction]:
        total = sum(self.target_counts)
        return [Fraction(c, total) for c in self.target_counts]


@dataclass
class BalanceResult:
    entries: list[tuple[str, int, float]]  # (video_id, label, confidence), duplicates repeated
    before: list[int]
    after: list[int]
    warnings: list[str] = field(default_factory=list)
    total: int = 0


def _apportion(fracs: Sequence[Fraction], total: int, classes: Sequence[int]) -> dict[int, int]:
    """Largest-remainder apportionment of ``total`` over ``classes``."""
    quotas = {c: fracs[c] * total for c in classes}
    floors = {c: int(q) for c, q in quotas.items()}
    left = total - sum(floors.values())
    order = sorted(classes, key=lambda c: (-(quotas[c] - floors[c]), c))
    for c in order[:left]:
        floors[c] += 1
    return floors


def balance(pseudo: PseudoLabelSet, spec: BalanceSpec) -> BalanceResult:
    """Duplicate minority classes and trim majority classes to the target mix.

    Majority classes first lose every video below ``threshold``. The output
    size is the smallest total that needs no minority video dropped. Within a
    class videos are ranked by confidence (then id); duplication is round-robin
    over that ranking and trimming drops from the bottom. A majority class left
    short by the filter is topped up from its surviving videos.
    """
    K = len(spec.target_counts)
    fracs = spec.fractions
    labels = np.asarray(pseudo.labels, dtype=int)
    before = np.bincount(labels, minlength=K)[:K].tolist()
    n_total = len(labels)
    warnings: list[str] = []

    if spec.minority is None or spec.majority is None:
        raw = [Fraction(before[c], max(n_total, 1)) for c in range(K)]
        auto_min = tuple(c for c in range(K) if raw[c] < fracs[c])
        auto_maj = tuple(c for c in range(K) if raw[c] >= fracs[c])
    minority = set(spec.minority if spec.minority is not None else auto_min)
    majority = set(spec.majority if spec.majority is not None else auto_maj)

    ranked: dict[int, list[int]] = {}
    for c in range(K):
        idx = [i for i in range(n_total) if labels[i] == c]
        if c in majority:
            idx = [i for i in idx if pseudo.confidences[i] >= spec.threshold]
        idx.sort(key=lambda i: (-float(pseudo.confidences[i]), pseudo.video_ids[i]))
        ranked[c] = idx
    avail = {c: len(ranked[c]) for c in range(K)}

    present = [c for c in range(K) if avail[c] > 0 and fracs[c] > 0]
    for c in range(K):
        if avail[c] == 0 and fracs[c] > 0:
            warnings.append(f"class {c} has no usable pseudo-labels; it stays empty")
    if not present:
        return BalanceResult([], before, [0] * K, warnings, 0)

    # majority classes may be trimmed, and topped up from their confident
    # survivors when the filter undershoots; minority classes only grow;
    # classes in neither list keep their count
    fixed = [c for c in present if c not in minority and c not in majority]
    lowers = [Fraction(avail[c]) / fracs[c] for c in present if c not in majority]
    uppers = [Fraction(avail[c]) / fracs[c] for c in fixed]
    if uppers:
        T = min(uppers)
        if lowers and max(lowers) > T:
            warnings.append("target distribution unreachable with the allowed duplication/filtering")
    elif lowers:
        T = max(lowers)
    else:
        T = Fraction(sum(avail[c] for c in present))
    total = int(T)  # floor
    want = _apportion(fracs, total, present)
    for c in present:
        if c in fixed:
            want[c] = avail[c]
        elif c in minority:
            want[c] = max(want[c], avail[c])

    entries = []
    after = [0] * K
    for c in present:
        order = ranked[c]
        t = want[c]
        if t >= len(order):
            full, extra = divmod(t, len(order))
            picks = order * full + order[:extra]
        else:
            picks = order[:t]
        for i in picks:
            entries.append((pseudo.video_ids[i], c, float(pseudo.confidences[i])))
        after[c] = len(picks)
    for w in warnings:
        log.warning(w)
    return BalanceResult(entries, before, after, warnings, total)


def unbalanced(pseudo: PseudoLabelSet) -> BalanceResult:
    entries = [(vid, int(c), float(p)) for vid, c, p in zip(pseudo.video_ids, pseudo.labels, pseudo.confidences)]
    hist = pseudo.histogram()
    return BalanceResult(entries, hist, hist, [], len(entries))


def materialize(result: BalanceResult, pool: Sequence[VideoSample]) -> list[VideoSample]:
    """Turn balanced (id, label) entries into pseudo-labelled samples."""
    by_id = {v.video_id: v for v in pool}
    return [replace(by_id[vid], label=None, pseudo_label=c, confidence=p) for vid, c, p in result.entries]


# -- combined batches ----------------------------------------------------------


@dataclass
class MixedBatch:
    labelled: list
    pseudo: list

    @property
    def samples(self) -> list:
        return list(self.labelled) + list(self.pseudo)


class CombinedScheduler:
    """Concatenate ``b`` labelled and ``r*b`` pseudo samples per step.

    One epoch is one pass over the pseudo set in a fresh random order; the
    final step carries whatever pseudo samples remain. The labelled side
    cycles through reshuffled passes and keeps its position across epochs.
    """

    def __init__(self, labelled: Sequence, pseudo: Sequence, ratio: int, batch_b: int, rng: Rng, recycle: bool = True):
        if int(ratio) != ratio or ratio < 1:
            raise ConfigError(f"batch ratio must be an integer >= 1, got {ratio}")
        if batch_b < 1:
            raise ConfigError(f"labelled batch size must be >= 1, got {batch_b}")
        if len(labelled) == 0 or len(pseudo) == 0:
            raise InputError("combined batches need non-empty labelled and pseudo-labelled sets")
        if not recycle and (batch_b > len(labelled) or ratio * batch_b > len(pseudo)):
            raise ConfigError(
                f"batch {batch_b}+{ratio * batch_b} exceeds set sizes {len(labelled)}/{len(pseudo)} with recycling disabled"
            )
        self.labelled, self.pseudo = list(labelled), list(pseudo)
        self.ratio, self.b, self.rng, self.recycle = int(ratio), batch_b, rng, recycle
        self._lab_order = rng.permutation(len(self.labelled))
        self._lab_pos = 0

    def steps_per_epoch(self) -> int:
        return -(-len(self.pseudo) // (self.ratio * self.b))

    def _take_labelled(self) -> list[int] | None:
        out = []
        while len(out) < self.b:
            if self._lab_pos == len(self._lab_order):
                if not self.recycle:
                    return None
                self._lab_order = self.rng.permutation(len(self.labelled))
                self._lab_pos = 0
            take = min(self.b - len(out), len(self._lab_order) - self._lab_pos)
            out.extend(int(i) for i in self._lab_order[self._lab_pos : self._lab_pos + take])
            self._lab_pos += take
        return out

    def epoch_indices(self) -> Iterator[tuple[list[int], list[int]]]:
        """Yield (labelled indices, pseudo indices) for one epoch."""
        order = self.rng.permutation(len(self.pseudo))
        step = self.ratio * self.b
        for lo in range(0, len(order), step):
            lab = self._take_labelled()
            if lab is None:
                return
            yield lab, [int(i) for i in order[lo : lo + step]]

    def epoch(self) -> Iterator[MixedBatch]:
        for lab, ps in self.epoch_indices():
            yield MixedBatch([self.labelled[i] for i in lab], [self.pseudo[i] for i in ps])


def combined_batches(labelled, balanced_pseudo, ratio: int, batch_b: int, rng: Rng, recycle: bool = True) -> Iterator[MixedBatch]:
    """One scheduler epoch of mixed batches."""
    return CombinedScheduler(labelled, balanced_pseudo, ratio, batch_b, rng, recycle).epoch()


# -- student training and iteration ------------------------------------------------


@dataclass
class SelfTrainConfig:
    teacher_model: ModelConfig = field(default_factory=ModelConfig)
    student_model: ModelConfig | None = None  # None: same as teacher
    teacher_train: TrainConfig = field(default_factory=TrainConfig)
    student_train: TrainConfig = field(default_factory=TrainConfig)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    ratio: int = 3
    batch_b: int = 8
    max_generations: int = 4
    eps_sat: float = 0.1  # percentage points; negative disables the saturation stop
    balance: bool = True
    threshold: float = 0.5
    minority: tuple[int, ...] | None = None
    majority: tuple[int, ...] | None = None
    seed: int = 0

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def train_student(
    teacher: Model,
    labelled: Sequence[VideoSample],
    pseudo: Sequence[VideoSample],
    noise: NoiseSpec,
    config: TrainConfig,
    student_config: ModelConfig | None = None,
    validation: Sequence[VideoSample] | None = None,
    ratio: int = 3,
    batch_b: int = 8,
    seed: int = 0,
    on_epoch=None,
):
    """Train a freshly initialized student on labelled + pseudo-labelled videos.

    With no pseudo-labelled videos this is exactly ``train`` with the same
    noise settings.
    """
    student_config = student_config or teacher.config
    if not student_config.backbone.covers(teacher.config.backbone):
        raise ConfigError("student backbone must be at least as large as the teacher's")
    student = Model(student_config, seed=seed)
    cfg = replace(config, noise=noise)
    counts = np.bincount([v.target for v in labelled], minlength=student_config.num_classes)
    weights = class_weights(np.maximum(counts, 1))
    if len(pseudo) == 0:
        return train(student, labelled, cfg, validation, weights=weights, on_epoch=on_epoch)
    val = validation if validation is not None and len(validation) else labelled
    sched: list[CombinedScheduler] = []

    def source(epoch, rng):
        if not sched:
            sched.append(CombinedScheduler(labelled, pseudo, ratio, batch_b, rng))
        return (mb.samples for mb in sched[0].epoch())

    return fit(student, source, weights, cfg, val, on_epoch)


@dataclass
class IterationState:
    generation: int
    teacher: Model
    student: Model | None
    history: list[float]
    best_accuracy: float
    best_generation: int
    best_state: dict
    reports: list[dict] = field(default_factory=list)
    epoch_logs: list[list[dict]] = field(default_factory=list)

    def best_model(self) -> Model:
        cfg = self.student.config if self.best_generation > 0 and self.student is not None else self.teacher.config
        m = Model(cfg, seed=0)
        m.load_state_dict(self.best_state)
        return m


def _report(gen: int, pl: PseudoLabelSet | None, bal: BalanceResult | None, metrics: MetricsReport, digest: str, truth=None) -> dict:
    rep = {
        "generation": gen,
        "pseudo_hist_before": bal.before if bal else None,
        "pseudo_hist_after": bal.after if bal else None,
        "val_accuracy": metrics.accuracy,
        "val_macro_f1": metrics.macro_f1,
        "val_confusion": metrics.confusion.tolist(),
        "config_hash": digest,
    }
    if pl is not None and truth:
        hits = [truth[v] == int(c) for v, c in zip(pl.video_ids, pl.labels) if v in truth]
        rep["pseudo_label_accuracy"] = float(np.mean(hits)) if hits else None
    return rep


def iterate(
    labelled: Sequence[VideoSample],
    unlabelled: Sequence[VideoSample],
    validation: Sequence[VideoSample],
    config: SelfTrainConfig,
    teacher: Model | None = None,
    truth: dict | None = None,
    on_generation: Callable[[dict, Model], None] | None = None,
) -> IterationState:
    """Teacher, then up to ``max_generations`` noisy students.

    ``teacher`` may be supplied pre-trained; otherwise generation 0 trains one
    on ``labelled``. Stops early when a generation improves validation
    accuracy by less than ``eps_sat`` percentage points.
    """
    if config.max_generations < 1:
        raise ConfigError("max_generations must be >= 1")
    digest = config.digest()
    root = Rng(config.seed)
    logs: list[list[dict]] = []
    if teacher is None:
        teacher = Model(config.teacher_model, seed=int(root.spawn(0).integers(0, 2**31)))
        res = train(teacher, labelled, replace(config.teacher_train, noise=config.noise.disabled()), validation)
        teacher = res.model
        logs.append(res.history)
    else:
        logs.append([])
    metrics = evaluate(teacher, validation)
    history = [metrics.accuracy]
    rep0 = _report(0, None, None, metrics, digest)
    reports = [rep0]
    if on_generation:
        on_generation(rep0, teacher)
    state = IterationState(0, teacher, None, history, metrics.accuracy, 0, teacher.state_dict(), reports, logs)
    target = np.bincount([v.target for v in labelled], minlength=config.teacher_model.num_classes)
    bspec = BalanceSpec(tuple(int(c) for c in target), config.minority, config.majority, config.threshold)
    unl = list(unlabelled)
    for gen in range(1, config.max_generations + 1):
        if unl:
            pl = pseudo_label(state.teacher, unl, generation=gen)
            bal = balance(pl, bspec) if config.balance else unbalanced(pl)
            pseudo = materialize(bal, unl)
        else:
            pl, bal, pseudo = None, None, []
        student_seed = int(root.spawn(gen).integers(0, 2**31))
        st_cfg = replace(config.student_train, seed=config.student_train.seed + gen)
        res = train_student(
            state.teacher,
            labelled,
            pseudo,
            config.noise,
            st_cfg,
            config.student_model,
            validation,
            config.ratio,
            config.batch_b,
            student_seed,
        )
        student = res.model
        metrics = evaluate(student, validation)
        history.append(metrics.accuracy)
        logs.append(res.history)
        rep = _report(gen, pl, bal, metrics, digest, truth)
        reports.append(rep)
        if on_generation:
            on_generation(rep, student)
        if metrics.accuracy > state.best_accuracy:
            state.best_accuracy, state.best_generation, state.best_state = metrics.accuracy, gen, student.state_dict()
        state.generation, state.student, state.teacher = gen, student, student
        log.info("generation %d: val accuracy %.4f", gen, metrics.accuracy)
        if config.eps_sat >= 0 and (history[-1] - history[-2]) * 100.0 < config.eps_sat:
            break
    return state
