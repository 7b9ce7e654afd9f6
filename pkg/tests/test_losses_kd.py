import logging
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from mtrseg.losses_kd import (
    TERMS,
    KDConfig,
    LossWeights,
    class_kl,
    kd_class_matched,
    kd_class_unmatched,
    kd_mask,
    kd_objectness_score,
    kd_position,
    objectness_weights,
    select_high_objectness,
    total_loss,
)
from mtrseg.losses_seg import mask_loss, segmentation_loss
from mtrseg.model import ModelConfig, Segmenter


@pytest.fixture(autouse=True)
def float64():
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(prev)


@pytest.fixture
def tiny_model():
    torch.manual_seed(0)
    m = Segmenter(ModelConfig(image_size=32, dim=16, num_queries=6, decoder_layers=1, heads=2, ffn_dim=32))
    g = torch.Generator().manual_seed(1)
    m.add_task(3, g)
    m.add_task(2, g)
    return m.double()


class TestObjectnessScoreKD:
    def test_value(self):
        got = float(kd_objectness_score(torch.tensor([0.5]), torch.tensor([0.9])))
        assert got == pytest.approx(0.9 * math.log(0.9 / 0.5) + 0.1 * math.log(0.1 / 0.5), abs=1e-12)
        assert got == pytest.approx(0.368064, abs=1e-6)

    def test_zero_point_and_gradient(self):
        s_t = torch.tensor([0.2, 0.6, 0.95])
        s = s_t.clone().requires_grad_(True)
        loss = kd_objectness_score(s, s_t)
        (g,) = torch.autograd.grad(loss, s)
        assert abs(loss.item()) < 1e-15
        assert float(g.abs().max()) < 1e-12

    def test_matches_oracle(self):
        rng = np.random.default_rng(0)
        s, s_t = rng.uniform(0.05, 0.95, 7), rng.uniform(0.05, 0.95, 7)
        got = float(kd_objectness_score(torch.from_numpy(s), torch.from_numpy(s_t)))
        assert got == pytest.approx(oracles.binary_kl_eq(s.tolist(), s_t.tolist()), abs=1e-12)

    def test_nonnegative_on_random_pairs(self):
        rng = np.random.default_rng(1)
        s = torch.from_numpy(rng.uniform(1e-4, 1 - 1e-4, (1000, 1)))
        s_t = torch.from_numpy(rng.uniform(1e-4, 1 - 1e-4, (1000, 1)))
        vals = [float(kd_objectness_score(a, b)) for a, b in zip(s, s_t)]
        assert min(vals) >= 0

    def test_empty(self):
        assert float(kd_objectness_score(torch.zeros(0), torch.zeros(0))) == 0.0


class TestMaskKD:
    def test_weights(self):
        w = objectness_weights(torch.tensor([0.9, 0.5, 0.1]), 2.0)
        want = torch.tensor([0.81, 0.25, 0.01]) / 1.07
        assert torch.allclose(w, want, atol=1e-15)
        assert float(w.sum()) == pytest.approx(1.0, abs=1e-15)

    def test_weighted_sum_oracle(self):
        rng = np.random.default_rng(2)
        m = rng.uniform(0.05, 0.95, (3, 6, 6))
        m_t = rng.uniform(0.05, 0.95, (3, 6, 6))
        s_t = [0.9, 0.5, 0.1]
        loss, _ = kd_mask(torch.from_numpy(m), torch.from_numpy(m_t), torch.tensor(s_t))
        omega = [s**2 for s in s_t]
        want = sum(o / sum(omega) * oracles.mask_loss(m[i], m_t[i]) for i, o in enumerate(omega))
        assert float(loss) == pytest.approx(want, abs=1e-10)

    def test_identical_masks_reach_floor(self):
        rng = np.random.default_rng(3)
        m_t = torch.from_numpy(rng.uniform(0.05, 0.95, (4, 5, 5)))
        s_t = torch.from_numpy(rng.uniform(0.1, 0.9, 4))
        loss, floor = kd_mask(m_t.clone(), m_t, s_t)
        assert float(loss) == pytest.approx(float(floor), abs=1e-9)
        # the floor is the soft-target entropy plus the soft Dice self-term
        w = (s_t**2 / (s_t**2).sum()).tolist()
        assert float(floor) == pytest.approx(sum(w[i] * oracles.mask_loss(m_t[i].numpy(), m_t[i].numpy()) for i in range(4)), abs=1e-10)

    def test_beta_zero_is_plain_mean(self):
        rng = np.random.default_rng(4)
        m = torch.from_numpy(rng.uniform(0.05, 0.95, (3, 4, 4)))
        m_t = torch.from_numpy(rng.uniform(0.05, 0.95, (3, 4, 4)))
        loss, _ = kd_mask(m, m_t, torch.tensor([0.9, 0.5, 0.1]), KDConfig(beta=0.0))
        assert float(loss) == pytest.approx(float(mask_loss(m, m_t).mean()), abs=1e-12)

    def test_all_zero_teacher_scores_warn(self, caplog):
        with caplog.at_level(logging.WARNING):
            loss, _ = kd_mask(torch.rand(2, 3, 3), torch.rand(2, 3, 3), torch.zeros(2))
        assert float(loss) == 0.0
        assert "zero" in caplog.text


class TestPositionKD:
    def test_identical_and_opposite(self):
        e = torch.randn(4, 8)
        s_t = torch.tensor([0.9, 0.2, 0.5, 0.7])
        assert abs(float(kd_position(e.clone(), e, s_t))) < 1e-12
        assert float(kd_position(-e, e, s_t)) == pytest.approx(2.0, abs=1e-12)

    def test_cosine_oracle(self):
        rng = np.random.default_rng(5)
        e, e_t = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
        s_t = rng.uniform(0.1, 0.9, 5)
        omega = s_t**2 / (s_t**2).sum()
        want = sum(omega[i] * (1 - oracles.cosine(e[i].tolist(), e_t[i].tolist())) for i in range(5))
        got = float(kd_position(torch.from_numpy(e), torch.from_numpy(e_t), torch.from_numpy(s_t)))
        assert got == pytest.approx(want, abs=1e-10)

    def test_zero_vector_is_orthogonal(self, caplog):
        e = torch.tensor([[0.0, 0.0], [1.0, 0.0]])
        e_t = torch.tensor([[1.0, 0.0], [1.0, 0.0]])
        with caplog.at_level(logging.WARNING):
            val = float(kd_position(e, e_t, torch.tensor([0.5, 0.5]), KDConfig(beta=0.0)))
        assert val == pytest.approx(0.5)
        assert "norm floor" in caplog.text


class TestSelection:
    def test_threshold(self):
        assert select_high_objectness(torch.tensor([0.9, 0.79, 0.81]), 0.8).tolist() == [0, 2]

    def test_empty_and_vacuous(self):
        assert select_high_objectness(torch.tensor([0.1, 0.5]), 0.8).numel() == 0
        assert select_high_objectness(torch.tensor([0.1, 0.5, 0.99]), 0.0).tolist() == [0, 1, 2]


class TestClassKD:
    def test_two_class_value(self):
        # p = (0.5, 0.5) from equal logits, p~ = (0.9, 0.1)
        z = torch.zeros(1, 2)
        z_t = torch.tensor([[math.log(9.0), 0.0]])
        want = 0.5 * math.log(0.5 / 0.9) + 0.5 * math.log(0.5 / 0.1)
        assert float(class_kl(z, z_t)) == pytest.approx(want, abs=1e-12)
        assert want == pytest.approx(0.510826, abs=1e-6)

    def test_direction_flag(self):
        z, z_t = torch.tensor([[0.3, -1.0, 2.0]]), torch.tensor([[1.0, 0.5, -0.5]])
        p, q = oracles.softmax(z[0].tolist()), oracles.softmax(z_t[0].tolist())
        assert float(class_kl(z, z_t)) == pytest.approx(oracles.kl(p, q), abs=1e-12)
        assert float(class_kl(z, z_t, forward=True)) == pytest.approx(oracles.kl(q, p), abs=1e-12)

    def test_zero_point_gradient(self):
        z_t = torch.randn(3, 4)
        z = z_t.clone().requires_grad_(True)
        loss = class_kl(z, z_t)
        (g,) = torch.autograd.grad(loss, z)
        assert abs(loss.item()) < 1e-14 and float(g.abs().max()) < 1e-12

    def test_nonnegative(self):
        rng = np.random.default_rng(6)
        for _ in range(1000):
            z, z_t = torch.from_numpy(rng.normal(size=(1, 3)) * 3), torch.from_numpy(rng.normal(size=(1, 3)) * 3)
            assert float(class_kl(z, z_t)) >= -1e-15

    def test_matched_uses_teacher_on_student_embeddings(self, tiny_model):
        teacher = tiny_model.frozen_copy()
        e = torch.randn(1, 16)
        pix = torch.randn(1, 16, 8, 8)
        z_s = torch.tensor([[0.2, -0.4, 1.1]])
        z_t = teacher.classify(e, pix, [0]).logits
        # teacher was built with two tasks; restrict to the first as "old"
        teacher.classifiers = teacher.classifiers[:1]
        teacher.task_queries = teacher.task_queries[:1]
        got = float(kd_class_matched(z_s, teacher, e, pix))
        want = oracles.kl(oracles.softmax(z_s[0].tolist()), oracles.softmax(z_t[0].tolist()))
        assert got == pytest.approx(want, abs=1e-10)

    def test_matched_and_unmatched_empty(self, tiny_model):
        teacher = tiny_model.frozen_copy()
        empty = torch.zeros(0, 16)
        pix = torch.zeros(0, 16, 8, 8)
        assert float(kd_class_matched(torch.zeros(0, 5), teacher, empty, pix)) == 0.0
        assert float(kd_class_unmatched(tiny_model, teacher, empty, empty, pix, pix)) == 0.0

    def test_unmatched_zero_when_teacher_equals_student(self, tiny_model):
        teacher = tiny_model.frozen_copy()
        e = torch.randn(3, 16, requires_grad=True)
        pix = torch.randn(3, 16, 8, 8)
        loss = kd_class_unmatched(tiny_model, teacher, e, e.detach(), pix, pix)
        (g,) = torch.autograd.grad(loss, e)
        assert abs(loss.item()) < 1e-12
        assert float(g.norm()) < 1e-6


class TestTotal:
    def test_recomposition(self):
        rng = np.random.default_rng(7)
        comps = {k: torch.tensor(float(v)) for k, v in zip(TERMS, rng.uniform(0, 3, len(TERMS)))}
        assert float(total_loss(comps)) == pytest.approx(sum(float(v) for v in comps.values()), abs=1e-12)

    def test_only_segmentation_terms(self):
        comps = {k: torch.tensor(1.0 + i) for i, k in enumerate(TERMS)}
        weights = LossWeights(enabled={k: k in ("obj", "cls") for k in TERMS})
        assert float(total_loss(comps, weights)) == float(segmentation_loss(comps["obj"], comps["cls"]))

    def test_disabled_nan_term_does_not_leak(self):
        comps = {k: torch.tensor(1.0) for k in TERMS}
        comps["aux"] = torch.tensor(float("nan"))
        weights = LossWeights(enabled={k: k != "aux" for k in TERMS})
        assert float(total_loss(comps, weights)) == len(TERMS) - 1

    def test_custom_weights(self):
        comps = {"obj": torch.tensor(2.0), "os_kd": torch.tensor(3.0)}
        weights = LossWeights(weights={"obj": 1.0, "os_kd": 10.0})
        assert float(total_loss(comps, weights)) == 32.0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 100_000))
def test_weights_sum_to_one(seed):
    rng = np.random.default_rng(seed)
    s = torch.from_numpy(rng.uniform(0.01, 1.0, int(rng.integers(1, 10))))
    beta = float(rng.uniform(0, 4))
    assert float(objectness_weights(s, beta).sum()) == pytest.approx(1.0, abs=1e-12)


class TestGradients:
    def test_objectness_score(self):
        rng = np.random.default_rng(8)
        s_t = torch.from_numpy(rng.uniform(0.1, 0.9, 4))
        fn = lambda z: kd_objectness_score(z.sigmoid(), s_t)
        assert oracles.finite_difference_check(fn, torch.from_numpy(rng.normal(size=4))) <= 1e-4

    def test_mask(self):
        rng = np.random.default_rng(9)
        m_t = torch.from_numpy(rng.uniform(0.1, 0.9, (3, 4, 4)))
        s_t = torch.from_numpy(rng.uniform(0.1, 0.9, 3))
        fn = lambda z: kd_mask(z.sigmoid(), m_t, s_t)[0]
        assert oracles.finite_difference_check(fn, torch.from_numpy(rng.normal(size=(3, 4, 4)))) <= 1e-4

    def test_position(self):
        rng = np.random.default_rng(10)
        e_t = torch.from_numpy(rng.normal(size=(3, 4)))
        s_t = torch.from_numpy(rng.uniform(0.1, 0.9, 3))
        fn = lambda e: kd_position(e, e_t, s_t)
        assert oracles.finite_difference_check(fn, torch.from_numpy(rng.normal(size=(3, 4)))) <= 1e-4

    @pytest.mark.parametrize("forward", [False, True])
    def test_class(self, forward):
        rng = np.random.default_rng(11)
        z_t = torch.from_numpy(rng.normal(size=(2, 3)))
        fn = lambda z: class_kl(z, z_t, forward)
        assert oracles.finite_difference_check(fn, torch.from_numpy(rng.normal(size=(2, 3)))) <= 1e-4
