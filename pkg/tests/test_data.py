import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtrseg.data import (
    BACKGROUND,
    Sample,
    SynthSpec,
    build_schedule,
    class_counts,
    filter_step,
    generate_dataset,
    load_corpus,
    rle_decode,
    rle_encode,
    save_corpus,
)
from mtrseg.errors import ConfigError, ScheduleError


@pytest.fixture(scope="module")
def corpus():
    return generate_dataset(SynthSpec(num_classes=8, samples_train=500, samples_eval=40))


def test_single_class_degenerate_case():
    train, evals = generate_dataset(SynthSpec(num_classes=1, shapes_per_image=(1, 1), samples_train=20, samples_eval=5))
    for s in train + evals:
        assert s.classes.tolist() == [0]
        assert s.masks.shape[0] == 1


def test_generation_is_deterministic():
    spec = SynthSpec(samples_train=30, samples_eval=10, rng_seed=11)
    a, b = generate_dataset(spec), generate_dataset(spec)
    for x, y in zip(a[0] + a[1], b[0] + b[1]):
        assert x.image.tobytes() == y.image.tobytes()
        assert x.masks.tobytes() == y.masks.tobytes()
        assert x.classes.tobytes() == y.classes.tobytes()
    other = generate_dataset(SynthSpec(samples_train=30, samples_eval=10, rng_seed=12))
    assert any(x.image.tobytes() != y.image.tobytes() for x, y in zip(a[0], other[0]))


def test_every_class_in_at_least_twenty_training_samples(corpus):
    train, _ = corpus
    counts = [0] * 8
    for s in train:
        seen = set()
        for c in s.classes:
            if int(c) not in seen:
                seen.add(int(c))
                counts[int(c)] += 1
    assert min(counts) >= 20
    assert counts == class_counts(train, 8)


def test_sample_invariants(corpus):
    for s in corpus[0] + corpus[1]:
        assert s.image.dtype == np.float32 and s.image.shape == (3, 64, 64)
        assert 0.0 <= s.image.min() and s.image.max() <= 1.0
        assert s.masks.sum(axis=(1, 2)).min() >= 1
        assert s.masks.sum(axis=0).max() <= 1  # disjoint after occlusion
        assert all(0 <= c < 8 for c in s.classes)


@pytest.mark.parametrize("bad", [
    dict(num_classes=0),
    dict(image_size=16),
    dict(shapes_per_image=(0, 2)),
    dict(shapes_per_image=(3, 2)),
])
def test_invalid_spec_is_a_configuration_error(bad):
    with pytest.raises(ConfigError):
        generate_dataset(SynthSpec(**bad))


@pytest.mark.parametrize("n,b,i,steps", [
    (20, 15, 1, 6), (20, 19, 1, 2), (150, 100, 5, 11), (20, 15, 5, 2), (150, 50, 50, 3), (8, 8, 1, 1),
])
def test_schedule_step_counts(n, b, i, steps):
    s = build_schedule(n, b, i)
    assert s.steps == steps
    assert len(s.step_classes[0]) == b
    assert all(len(cs) == i for cs in s.step_classes[1:])
    flat = [c for cs in s.step_classes for c in cs]
    assert flat == list(range(n))


def test_schedule_errors():
    with pytest.raises(ScheduleError):
        build_schedule(20, 15, 2)
    with pytest.raises(ScheduleError):
        build_schedule(20, 0, 1)
    with pytest.raises(ScheduleError):
        build_schedule(8, 4, 1).classes_at(6)


def test_filter_step_out_of_range(corpus):
    with pytest.raises(ScheduleError):
        filter_step(corpus[0], build_schedule(8, 4, 1), 0, "overlapped")


def test_sequential_final_step_keeps_all_labels(corpus):
    sched = build_schedule(8, 4, 1)
    out = filter_step(corpus[0], sched, sched.steps, "sequential")
    labels = set()
    for s in out:
        labels |= s.label_set
    assert labels == set(range(8))
    assert sum(len(s.classes) for s in out) > sum(1 for s in out)


def _toy(classes, size=32):
    masks = np.zeros((len(classes), size, size), dtype=bool)
    for k in range(len(classes)):
        masks[k, k * 4:(k + 1) * 4, :] = True
    return Sample(np.zeros((3, size, size), np.float32), masks, np.asarray(classes))


def test_overlapped_strips_old_labels():
    sched = build_schedule(4, 2, 1)
    out = filter_step([_toy([0, 2])], sched, 2, "overlapped")
    assert len(out) == 1
    assert out[0].classes.tolist() == [2]
    assert out[0].masks[0].sum() == 4 * 32


def test_disjoint_matches_per_image_refilter():
    rng = np.random.default_rng(0)
    corpus = [_toy(sorted(rng.choice(6, size=int(rng.integers(1, 4)), replace=False).tolist())) for _ in range(10)]
    sched = build_schedule(6, 2, 2)
    for t in range(1, sched.steps + 1):
        current, future = set(sched.classes_at(t)), set(sched.classes_after(t))
        expected = []
        for s in corpus:
            labels = {int(c) for c in s.classes}
            if labels & current and not labels & future:
                expected.append([int(c) for c in s.classes if int(c) in current])
        got = [s.classes.tolist() for s in filter_step(corpus, sched, t, "disjoint")]
        assert got == expected


@settings(max_examples=25, deadline=None)
@given(st.sampled_from([(8, 4, 1), (8, 4, 2), (8, 2, 2), (8, 8, 1), (8, 5, 3)]),
       st.sampled_from(["sequential", "disjoint", "overlapped"]))
def test_no_label_outside_allowed_set(corpus, cfg, protocol):
    sched = build_schedule(*cfg)
    for t in range(1, sched.steps + 1):
        allowed = set(sched.classes_upto(t) if protocol == "sequential" else sched.classes_at(t))
        for s in filter_step(corpus[0][:120], sched, t, protocol):
            assert s.label_set <= allowed
            assert s.label_set & set(sched.classes_at(t))


def test_overlapped_union_recovers_full_corpus_labels(corpus):
    sched = build_schedule(8, 4, 2)
    train = corpus[0]
    total = sum(len(s.classes) for s in train)
    per_step = sum(len(s.classes) for t in range(1, sched.steps + 1) for s in filter_step(train, sched, t, "overlapped"))
    assert per_step == total


def test_rle_round_trip_and_convention():
    m = np.array([[1, 1, 0], [0, 1, 1]], dtype=bool)
    runs = rle_encode(m)
    assert runs == [0, 2, 2, 2]
    assert (rle_decode(runs, (2, 3)) == m).all()
    assert rle_encode(np.zeros((2, 2), bool)) == [4]
    rng = np.random.default_rng(1)
    for _ in range(20):
        x = rng.random((7, 9)) > 0.5
        assert (rle_decode(rle_encode(x), x.shape) == x).all()


def test_corpus_round_trip(tmp_path):
    spec = SynthSpec(samples_train=12, samples_eval=4)
    train, evals = generate_dataset(spec)
    manifest = save_corpus(str(tmp_path), spec, train, evals)
    assert manifest["classes"] == list(range(8))
    t2, e2, m2 = load_corpus(str(tmp_path))
    assert m2 == manifest
    for a, b in zip(train + evals, t2 + e2):
        assert a.image.tobytes() == b.image.tobytes()
        assert (a.masks == b.masks).all() and (a.classes == b.classes).all()


def test_label_map_and_flip():
    s = _toy([3, 5])
    lm = s.label_map()
    assert set(np.unique(lm)) == {BACKGROUND, 3, 5}
    f = s.flipped()
    assert (f.label_map() == lm[:, ::-1]).all()
