from collections import Counter
from dataclasses import replace
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from noisyfer.augment import NO_NOISE
from noisyfer.data import AFEW_TRAIN_COUNTS, VideoSample
from noisyfer.errors import ConfigError, InputError
from noisyfer.model import DESK_MODEL, Model
from noisyfer.selftrain import (
    PAPER_MAJORITY,
    PAPER_MINORITY,
    BalanceSpec,
    CombinedScheduler,
    PseudoLabelSet,
    SelfTrainConfig,
    balance,
    combined_batches,
    iterate,
    materialize,
    pseudo_label,
    train_student,
)
from noisyfer.tensor import Rng
from noisyfer.training import TrainConfig, evaluate, train

from conftest import random_video


def make_pseudo(hist, rng, conf_low=0.55, conf_high=1.0):
    labels = np.concatenate([np.full(n, c) for c, n in enumerate(hist)]).astype(int)
    ids = [f"p{i:05d}" for i in range(len(labels))]
    conf = rng.uniform(conf_low, conf_high, len(labels))
    return PseudoLabelSet(ids, labels, conf)


def counting_oracle(entries, K=7):
    counts = Counter(label for _, label, _ in entries)
    return [counts.get(c, 0) for c in range(K)]


# -- pseudo-labelling ----------------------------------------------------------


def test_pseudo_label_deterministic_and_matches_evaluate(tiny_data):
    lab, unl, val, truth = tiny_data
    teacher = Model(DESK_MODEL, seed=2)
    a = pseudo_label(teacher, unl.entries)
    b = pseudo_label(teacher, unl.entries)
    assert a == b
    # with labels restored, evaluate accuracy equals pseudo-label agreement with truth
    restored = [replace(e, label=truth[e.video_id]) for e in unl.entries]
    acc = np.mean([truth[v] == c for v, c in zip(a.video_ids, a.labels)])
    assert acc == evaluate(teacher, restored).accuracy
    assert np.all((a.confidences > 1 / 7 - 1e-12) & (a.confidences <= 1))


def test_pseudo_label_saturated_teacher(tiny_data):
    teacher = Model(DESK_MODEL, seed=2)
    teacher.params["head.W"].data[:] = 0.0
    teacher.params["head.b"].data[:] = [0, 0, 0, 200.0, 0, 0, 0]
    pl = pseudo_label(teacher, tiny_data[1].entries)
    assert np.all(pl.labels == 3) and np.allclose(pl.confidences, 1.0, atol=1e-12)


def test_pseudo_label_empty():
    with pytest.raises(InputError):
        pseudo_label(Model(DESK_MODEL), [])


# -- balancing -----------------------------------------------------------------------


def test_balance_fixed_point(rng):
    target = (20, 10, 10)
    pl = make_pseudo(target, rng)
    res = balance(pl, BalanceSpec(target))
    assert sorted(res.entries) == sorted(zip(pl.video_ids, pl.labels.tolist(), pl.confidences.tolist()))


def test_balance_round_robin_duplication(rng):
    # fear (3) needs doubling; every fear video appears twice before any appears three times
    target = (10, 10, 10, 10)
    pl = make_pseudo((10, 10, 10, 5), rng)
    res = balance(pl, BalanceSpec(target, minority=(3,), majority=()))
    fear = Counter(v for v, c, _ in res.entries if c == 3)
    assert res.after[3] == 10 and set(fear.values()) == {2}
    pl = make_pseudo((10, 10, 10, 4), rng)
    res = balance(pl, BalanceSpec(target, minority=(3,), majority=()))
    fear = Counter(v for v, c, _ in res.entries if c == 3)
    assert sorted(fear.values()) == [2, 2, 3, 3]
    # the extra copies go to the most confident videos
    ranked = sorted((v for v, c, _ in res.entries if c == 3), key=lambda v: -pl.confidences[pl.video_ids.index(v)])
    assert fear[ranked[0]] == 3


def test_balance_filters_majority_below_threshold(rng):
    pl = make_pseudo((60, 10, 10), rng, conf_low=0.2, conf_high=0.9)
    res = balance(pl, BalanceSpec((10, 10, 10), minority=(), majority=(0,), threshold=0.5))
    conf = dict(zip(pl.video_ids, pl.confidences))
    assert all(conf[v] >= 0.5 for v, c, _ in res.entries if c == 0)
    assert res.after == [10, 10, 10]
    # trimming keeps the most confident
    kept = {v for v, c, _ in res.entries if c == 0}
    dropped = [conf[v] for v, c in zip(pl.video_ids, pl.labels) if c == 0 and v not in kept]
    assert min(conf[v] for v in kept) >= max(dropped)


def test_balance_paper_lists_against_afew_target(rng):
    # 700 skewed pseudo-labels, paper's duplicate/filter class lists
    hist = (180, 150, 120, 40, 30, 150, 30)
    pl = make_pseudo(hist, rng)
    res = balance(pl, BalanceSpec(AFEW_TRAIN_COUNTS, PAPER_MINORITY, PAPER_MAJORITY))
    counts = counting_oracle(res.entries)
    assert counts == res.after
    total = sum(counts)
    N = sum(AFEW_TRAIN_COUNTS)
    for c in range(7):
        assert abs(counts[c] - Fraction(AFEW_TRAIN_COUNTS[c], N) * total) <= 1
    ids = {v for v, _, _ in res.entries}
    minority_ids = {v for v, c in zip(pl.video_ids, pl.labels) if c in PAPER_MINORITY}
    assert minority_ids <= ids


def test_balance_empty_class_warns(rng):
    res = balance(make_pseudo((10, 0, 10), rng), BalanceSpec((10, 10, 10)))
    assert res.after[1] == 0 and any("class 1" in w for w in res.warnings)


def test_balance_spec_validation():
    with pytest.raises(ConfigError):
        BalanceSpec((1, 2), minority=(0,), majority=(0,))
    with pytest.raises(ConfigError):
        BalanceSpec(())
    assert sum(BalanceSpec(AFEW_TRAIN_COUNTS).fractions) == 1


@settings(max_examples=80, deadline=None)
@given(st.lists(st.integers(1, 60), min_size=7, max_size=7), st.integers(0, 10_000))
def test_balance_auto_lists_properties(hist, seed):
    rng = Rng(seed)
    pl = make_pseudo(hist, rng, conf_low=0.3)
    spec = BalanceSpec(AFEW_TRAIN_COUNTS, threshold=0.5)
    res = balance(pl, spec)
    counts = counting_oracle(res.entries)
    assert counts == res.after
    conf = dict(zip(pl.video_ids, pl.confidences))
    N = sum(AFEW_TRAIN_COUNTS)
    total = sum(counts)
    before = np.bincount(pl.labels, minlength=7)
    for c in range(7):
        under = Fraction(int(before[c]), len(pl)) < Fraction(AFEW_TRAIN_COUNTS[c], N)
        ids = {v for v, k, _ in res.entries if k == c}
        if under:
            # minority: nothing dropped
            assert ids == {v for v, k in zip(pl.video_ids, pl.labels) if k == c}
        else:
            assert all(conf[v] >= 0.5 for v in ids)
        if counts[c]:
            assert abs(counts[c] - Fraction(AFEW_TRAIN_COUNTS[c], N) * total) <= 1 or under


def test_materialize_sets_pseudo_fields(rng):
    pool = [VideoSample(f"p{i:05d}", random_video(rng, 1)) for i in range(3)]
    pl = PseudoLabelSet([v.video_id for v in pool], np.array([0, 1, 1]), np.array([0.9, 0.8, 0.7]))
    res = balance(pl, BalanceSpec((1, 1), minority=(0, 1), majority=()))
    out = materialize(res, pool)
    # class 0 is duplicated up to the 1:1 target
    assert sorted((v.label, v.pseudo_label, v.video_id) for v in out) == [
        (None, 0, "p00000"), (None, 0, "p00000"), (None, 1, "p00001"), (None, 1, "p00002")
    ]
    assert out[0].confidence == 0.9


# -- combined batches ------------------------------------------------------------------


def test_scheduler_composition_and_coverage():
    lab, pseudo = list(range(48)), [f"p{i}" for i in range(192)]
    sched = CombinedScheduler(lab, pseudo, 3, 8, Rng(0))
    batches = list(sched.epoch())
    assert len(batches) == sched.steps_per_epoch() == -(-192 // 24)
    assert all(len(b.labelled) == 8 and len(b.pseudo) == 24 for b in batches)
    assert Counter(p for b in batches for p in b.pseudo) == Counter(pseudo)


def test_scheduler_short_final_batch():
    batches = list(combined_batches(list(range(10)), list(range(50)), 3, 8, Rng(0)))
    assert [len(b.pseudo) for b in batches] == [24, 24, 2]
    assert all(len(b.labelled) == 8 for b in batches)


def test_scheduler_labelled_seen_twice_with_r2():
    # |pseudo| = 4 |labelled|, r = 2: the labelled set is consumed exactly twice
    lab, pseudo = list(range(16)), list(range(64))
    batches = list(combined_batches(lab, pseudo, 2, 8, Rng(1)))
    seen = Counter(i for b in batches for i in b.labelled)
    assert set(seen.values()) == {2} and len(seen) == 16


def test_scheduler_r1_equal_sizes_finish_together():
    lab, pseudo = list(range(24)), list(range(100, 124))
    batches = list(combined_batches(lab, pseudo, 1, 8, Rng(2)))
    assert sorted(i for b in batches for i in b.labelled) == lab
    assert sorted(i for b in batches for i in b.pseudo) == pseudo


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 40), st.integers(1, 200), st.integers(1, 5), st.integers(1, 9), st.integers(0, 99))
def test_scheduler_properties(n_lab, n_pseudo, r, b, seed):
    batches = list(combined_batches(list(range(n_lab)), list(range(n_pseudo)), r, b, Rng(seed)))
    assert len(batches) == -(-n_pseudo // (r * b))
    assert sorted(i for mb in batches for i in mb.pseudo) == list(range(n_pseudo))
    assert all(len(mb.labelled) == b for mb in batches)
    assert all(len(mb.pseudo) == r * b for mb in batches[:-1])


def test_scheduler_errors():
    with pytest.raises(ConfigError):
        CombinedScheduler([1], [1], 0, 8, Rng(0))
    with pytest.raises(ConfigError):
        CombinedScheduler([1], [1], 1.5, 8, Rng(0))
    with pytest.raises(InputError):
        CombinedScheduler([], [1], 1, 8, Rng(0))
    with pytest.raises(ConfigError):
        CombinedScheduler([1, 2], list(range(40)), 3, 8, Rng(0), recycle=False)


# -- students and iteration -------------------------------------------------------------


FAST = TrainConfig(epochs=2, batch_size=8, base_lr=3e-3)


def test_student_without_pseudo_reduces_to_train(tiny_data):
    lab, _, val, _ = tiny_data
    teacher = Model(DESK_MODEL, seed=0)
    a = train_student(teacher, lab.entries, [], NO_NOISE, FAST, validation=val.entries, seed=5)
    b = train(Model(DESK_MODEL, seed=5), lab.entries, FAST, val.entries)
    assert a.history == b.history
    assert all(np.array_equal(x, a.model.state_dict()[k]) for k, x in b.model.state_dict().items())


def test_student_smaller_than_teacher_rejected(tiny_data):
    big = replace(DESK_MODEL, backbone=replace(DESK_MODEL.backbone, channels_per_block=(12, 48)))
    teacher = Model(big, seed=0)
    with pytest.raises(ConfigError):
        train_student(teacher, tiny_data[0].entries, [], NO_NOISE, FAST, student_config=DESK_MODEL)


def test_iterate_loop_bound_and_history(tiny_data):
    lab, unl, val, _ = tiny_data
    cfg = SelfTrainConfig(DESK_MODEL, teacher_train=FAST, student_train=FAST, max_generations=1, eps_sat=-1)
    seen = []
    state = iterate(lab.entries, unl.entries, val.entries, cfg, on_generation=lambda rep, m: seen.append(rep["generation"]))
    assert state.generation == 1 and len(state.history) == 2 and seen == [0, 1]
    rep = state.reports[1]
    assert sum(rep["pseudo_hist_before"]) == len(unl)
    assert set(rep) >= {"generation", "pseudo_hist_after", "val_accuracy", "config_hash"}
    assert state.best_accuracy == max(state.history)


def test_iterate_saturation_stop(tiny_data):
    lab, unl, val, _ = tiny_data
    cfg = SelfTrainConfig(DESK_MODEL, teacher_train=FAST, student_train=FAST, max_generations=4, eps_sat=1000.0)
    state = iterate(lab.entries, unl.entries, val.entries, cfg)
    assert state.generation == 1


def test_iterate_best_model_is_retained(tiny_data):
    lab, unl, val, _ = tiny_data
    cfg = SelfTrainConfig(DESK_MODEL, teacher_train=FAST, student_train=FAST, max_generations=2, eps_sat=-1)
    state = iterate(lab.entries, unl.entries, val.entries, cfg)
    assert len(state.history) == 3
    best = state.best_model()
    assert evaluate(best, val.entries).accuracy == max(state.history)


def test_iterate_rejects_zero_generations(tiny_data):
    with pytest.raises(ConfigError):
        iterate(tiny_data[0].entries, [], [], SelfTrainConfig(max_generations=0))
