import numpy as np
import pytest

from evadapt.autodiff import Tensor
from evadapt.distill import (DistillConfig, affinity_loss, distill_loss,
                             mix_tokens, weighted_layer_loss)
from evadapt.encoder import EmbeddingCapture
from evadapt.significance import token_significance, transition_stack


def random_capture(rng, k=4, c=8, depth=3):
    attns = []
    for _ in range(depth):
        a = rng.random((k, k)) + 1e-3
        attns.append(a / a.sum(axis=1, keepdims=True))
    embeds = [Tensor(rng.standard_normal((k, c))) for _ in range(depth + 1)]
    return EmbeddingCapture(embeddings=embeds, attentions=attns)


class TestMixTokens:
    def test_ratio_zero(self):
        ev = Tensor(np.arange(32.0).reshape(4, 8))
        im = Tensor(np.zeros((4, 8)))
        m = mix_tokens(ev, im, 0.0, seed=0)
        assert np.array_equal(m.tokens.data, ev.data)
        assert m.replaced_positions.size == 0

    def test_ratio_one(self):
        ev = Tensor(np.arange(32.0).reshape(4, 8))
        im = Tensor(np.ones((4, 8)))
        m = mix_tokens(ev, im, 1.0, seed=0)
        assert np.array_equal(m.tokens.data, im.data)

    def test_quarter_replaces_exactly_one(self):
        ev = Tensor(np.zeros((4, 8)))
        im = Tensor(np.arange(32.0).reshape(4, 8))
        m = mix_tokens(ev, im, 0.25, seed=3)
        assert m.replaced_positions.size == 1
        pos = m.replaced_positions[0]
        assert m.tokens.data[pos].tobytes() == im.data[pos].tobytes()
        other = [i for i in range(4) if i != pos]
        assert np.array_equal(m.tokens.data[other], np.zeros((3, 8)))

    def test_seed_determinism_and_count(self):
        ev = Tensor(np.zeros((16, 4)))
        im = Tensor(np.ones((16, 4)))
        a = mix_tokens(ev, im, 0.5, seed=7)
        b = mix_tokens(ev, im, 0.5, seed=7)
        c = mix_tokens(ev, im, 0.5, seed=8)
        assert np.array_equal(a.replaced_positions, b.replaced_positions)
        assert a.replaced_positions.size == c.replaced_positions.size == 8

    def test_ratio_out_of_range(self):
        t = Tensor(np.zeros((4, 4)))
        with pytest.raises(ValueError):
            mix_tokens(t, t, 1.5, seed=0)


class TestWeightedLayerLoss:
    def test_equal_inputs_zero(self):
        x = Tensor(np.random.default_rng(0).random((4, 8)))
        assert weighted_layer_loss(x, Tensor(x.data.copy()), None).item() == 0.0

    def test_scalar_case(self):
        x_m = Tensor([[2.0]])
        x_e = Tensor([[0.0]])
        out = weighted_layer_loss(x_m, x_e, np.array([1.5]))
        assert out.item() == pytest.approx(3.0, abs=1e-15)

    def test_uniform_weights_equal_plain_l1(self):
        rng = np.random.default_rng(1)
        a, b = Tensor(rng.random((5, 6))), Tensor(rng.random((5, 6)))
        w = np.ones(5)
        assert weighted_layer_loss(a, b, w).item() == pytest.approx(
            np.abs(a.data - b.data).mean(), abs=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            weighted_layer_loss(Tensor(np.zeros((2, 2))),
                                Tensor(np.zeros((3, 2))), None)


class TestDistillLoss:
    def test_identical_captures_zero(self):
        rng = np.random.default_rng(2)
        cap = random_capture(rng)
        cfg = DistillConfig(layers=(0, 1, 3), gammas=(0.5, 1.0))
        total, breakdown = distill_loss(cap, cap, cfg)
        assert total.item() == 0.0
        assert all(v == 0.0 for v in breakdown.values())

    def test_uniform_source_reduction_identity(self):
        rng = np.random.default_rng(3)
        t, s = random_capture(rng), random_capture(rng)
        cfg = DistillConfig(layers=(0, 1, 2, 3), gammas=(0.1, 0.4, 1.0),
                            gamma0=1.0, attention_source="uniform")
        total, _ = distill_loss(t, s, cfg)
        want = sum(
            cfg.gamma_for(l) * np.abs(t.embeddings[l].data
                                      - s.embeddings[l].data).mean()
            for l in cfg.layers)
        assert total.item() == pytest.approx(want, abs=1e-12)

    def test_teacher_source_matches_compositional_oracle(self):
        rng = np.random.default_rng(4)
        t, s = random_capture(rng), random_capture(rng)
        cfg = DistillConfig(layers=(0, 1, 2), gammas=(0.4, 0.7), beta=0.5)
        total, _ = distill_loss(t, s, cfg)
        stack = transition_stack(t.attentions)
        want = cfg.gamma0 * np.abs(
            t.embeddings[0].data - s.embeddings[0].data).mean()
        for l, gamma in ((1, 0.4), (2, 0.7)):
            w = token_significance(stack, l + 1, cfg.beta).values
            diff = np.abs(t.embeddings[l].data - s.embeddings[l].data)
            want += gamma * (w[:, None] * diff).mean()
        assert total.item() == pytest.approx(want, rel=1e-12)

    def test_layer_beyond_depth_rejected(self):
        rng = np.random.default_rng(5)
        cap = random_capture(rng, depth=2)
        cfg = DistillConfig(layers=(0, 5), gammas=(1.0,))
        with pytest.raises(ValueError, match="depth"):
            distill_loss(cap, cap, cfg)

    def test_monotone_sensitivity(self):
        rng = np.random.default_rng(6)
        a = Tensor(rng.random((4, 3)))
        b = Tensor(rng.random((4, 3)))
        w = np.ones(4)
        base = weighted_layer_loss(a, b, w).item()
        w2 = w.copy()
        w2[1] += 0.5
        assert weighted_layer_loss(a, b, w2).item() > base

    def test_no_gradient_into_teacher(self):
        rng = np.random.default_rng(7)
        t, s = random_capture(rng), random_capture(rng)
        for e in t.embeddings:
            e.requires_grad = True
        for e in s.embeddings:
            e.requires_grad = True
        cfg = DistillConfig(layers=(0, 2), gammas=(1.0,))
        total, _ = distill_loss(t, s, cfg)
        total.backward()
        assert all(e.grad is None for e in t.embeddings)
        assert s.embeddings[0].grad is not None

    def test_student_source_runs(self):
        rng = np.random.default_rng(8)
        t, s = random_capture(rng), random_capture(rng)
        cfg = DistillConfig(layers=(0, 1), gammas=(1.0,),
                            attention_source="student")
        total, _ = distill_loss(t, s, cfg)
        assert total.item() > 0

    def test_single_layer_source_runs(self):
        rng = np.random.default_rng(9)
        t, s = random_capture(rng), random_capture(rng)
        cfg = DistillConfig(layers=(0, 1), gammas=(1.0,),
                            attention_source="teacher_single_layer")
        total, _ = distill_loss(t, s, cfg)
        assert total.item() > 0


class TestDistillConfig:
    def test_gamma_count_checked(self):
        with pytest.raises(ValueError, match="gammas"):
            DistillConfig(layers=(0, 3, 6), gammas=(1.0,))

    def test_default_matches_reference_settings(self):
        cfg = DistillConfig()
        assert cfg.layers == (0, 3, 6, 9, 12)
        assert cfg.gammas == (0.1, 0.4, 0.7, 1.0)
        assert cfg.beta == 0.5

    def test_unknown_source(self):
        with pytest.raises(ValueError, match="attention source"):
            DistillConfig(attention_source="oracle")


class TestAffinityLoss:
    def test_identical_zero(self):
        rng = np.random.default_rng(10)
        cap = random_capture(rng)
        assert affinity_loss(cap, cap, (0, 2)).item() == 0.0

    def test_uniform_scaling_cancels(self):
        rng = np.random.default_rng(11)
        t = random_capture(rng)
        s = EmbeddingCapture(
            embeddings=[Tensor(2.0 * e.data) for e in t.embeddings],
            attentions=t.attentions)
        assert affinity_loss(t, s, (0, 1, 2)).item() == pytest.approx(0.0, abs=1e-20)

    def test_distinct_positive(self):
        rng = np.random.default_rng(12)
        t, s = random_capture(rng), random_capture(rng)
        assert affinity_loss(t, s, (1,)).item() > 0
