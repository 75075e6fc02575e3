import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from setmatch.distill import (
    ChainWeights,
    binary_chain,
    chain_kl_grad,
    chain_weights,
    decomposed_kl,
    ema_update,
    kl,
    pretrain_losses,
    soft_divergence_fn,
    softmax_probs,
    tempered_chain_kl,
    uniform_chain_kl,
)

finite_logits = st.lists(
    st.floats(-10, 10, allow_nan=False), min_size=2, max_size=12
).map(np.array)


class TestSoftmax:
    def test_uniform_logits(self):
        for temp in (0.5, 1.0, 64.0):
            np.testing.assert_allclose(
                softmax_probs(np.full(4, 1.7), temp), 0.25, atol=1e-15
            )

    def test_arithmetic(self):
        np.testing.assert_allclose(
            softmax_probs([math.log(2.0), 0.0]), [2 / 3, 1 / 3], rtol=1e-14
        )

    def test_high_temperature_flattens(self):
        rng = np.random.default_rng(0)
        z = rng.normal(scale=3.0, size=10)
        p = softmax_probs(z, temperature=1e6)
        assert p.max() - p.min() <= 1e-5

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError, match="NaN or Inf"):
            softmax_probs([1.0, np.nan])

    def test_rejects_bad_temperature(self):
        with pytest.raises(ValueError, match="temperature"):
            softmax_probs([1.0, 2.0], temperature=0.0)


class TestBinaryChain:
    def test_two_classes_single_pair(self):
        z = np.array([0.3, -1.2])
        chain = binary_chain(z)
        assert chain.shape == (1, 2)
        np.testing.assert_allclose(chain[0], softmax_probs(z), rtol=1e-14)

    def test_three_uniform_classes(self):
        chain = binary_chain(np.zeros(3))
        np.testing.assert_allclose(chain, [[1 / 3, 2 / 3], [1 / 2, 1 / 2]], rtol=1e-14)

    def test_pairs_sum_to_one(self):
        rng = np.random.default_rng(1)
        chain = binary_chain(rng.normal(size=8))
        np.testing.assert_allclose(chain.sum(axis=1), 1.0, atol=1e-12)

    def test_suffix_product_identity(self):
        # The running product of "not this class" probabilities equals the
        # softmax suffix mass.
        rng = np.random.default_rng(2)
        z = rng.normal(size=5)
        probs = softmax_probs(z)
        chain = binary_chain(z)
        for i in range(5):
            product = np.prod(chain[:i, 1])
            assert product == pytest.approx(probs[i:].sum(), abs=1e-12)

    def test_probabilities_recoverable(self):
        rng = np.random.default_rng(3)
        z = rng.normal(size=7)
        probs = softmax_probs(z)
        chain = binary_chain(z)
        for i in range(6):
            rebuilt = chain[i, 0] * np.prod(chain[:i, 1])
            assert rebuilt == pytest.approx(probs[i], abs=1e-12)


class TestChainWeights:
    def test_limit_closed_form_five_classes(self):
        w = chain_weights(np.random.default_rng(4).normal(size=5))
        np.testing.assert_array_equal(w.limit, [1.0, 0.8, 0.6, 0.4])

    def test_limit_exact_ratio_of_integers(self):
        for n_classes in (2, 3, 10, 137, 1000):
            w = chain_weights(np.zeros(n_classes))
            expected = np.array(
                [(n_classes - i + 1) / n_classes for i in range(1, n_classes)]
            )
            assert np.array_equal(w.limit, expected)

    def test_uniform_teacher_collapses_raw_onto_limit(self):
        w = chain_weights(np.full(6, 0.123))
        np.testing.assert_allclose(w.raw, w.limit, atol=1e-15)

    def test_raw_is_nonincreasing(self):
        w = chain_weights(np.random.default_rng(5).normal(size=9))
        assert np.all(np.diff(w.raw) <= 1e-15)

    def test_high_temperature_spread_shrinks(self):
        rng = np.random.default_rng(6)
        z = rng.normal(size=8)
        spreads = []
        for temp in (1.0, 10.0, 100.0, 1e3, 1e6):
            w = chain_weights(z, temperature=temp).normalized
            spreads.append(w.max() - w.min())
        assert all(a >= b - 1e-15 for a, b in zip(spreads, spreads[1:]))
        assert spreads[-1] <= 1e-6


class TestKl:
    def test_identical_is_zero(self):
        p = softmax_probs(np.random.default_rng(7).normal(size=5))
        assert kl(p, p.copy()) == 0.0

    def test_hard_p_convention(self):
        q = np.array([0.25, 0.75])
        assert kl([1.0, 0.0], q) == pytest.approx(math.log(1 / 0.25))

    def test_matches_summation_oracle(self):
        rng = np.random.default_rng(8)
        p = softmax_probs(rng.normal(size=6))
        q = softmax_probs(rng.normal(size=6))
        oracle = sum(p[i] * math.log(p[i] / q[i]) for i in range(6))
        assert kl(p, q) == pytest.approx(oracle, rel=1e-12)

    def test_zero_q_rejected(self):
        with pytest.raises(ValueError, match="zero"):
            kl([0.5, 0.5], [1.0, 0.0])

    @settings(max_examples=50, deadline=None)
    @given(zt=finite_logits, zs=finite_logits)
    def test_nonnegative(self, zt, zs):
        size = min(zt.size, zs.size)
        p = softmax_probs(zt[:size])
        q = softmax_probs(zs[:size])
        assert kl(p, q) >= 0.0


class TestDecomposedKl:
    def test_identical_logits_zero(self):
        z = np.random.default_rng(9).normal(size=6)
        assert decomposed_kl(z, z.copy()) == pytest.approx(0.0, abs=1e-15)

    def test_two_classes_reduces_to_kl(self):
        rng = np.random.default_rng(10)
        zt, zs = rng.normal(size=2), rng.normal(size=2)
        direct = kl(softmax_probs(zt), softmax_probs(zs))
        assert decomposed_kl(zt, zs) == pytest.approx(direct, abs=1e-12)

    def test_identity_against_full_kl(self):
        rng = np.random.default_rng(11)
        for n_classes in (3, 5, 50):
            for _ in range(100):
                zt = rng.normal(scale=2.0, size=n_classes)
                zs = rng.normal(scale=2.0, size=n_classes)
                direct = kl(softmax_probs(zt), softmax_probs(zs))
                assert abs(decomposed_kl(zt, zs) - direct) <= 1e-10

    def test_identity_survives_class_reordering(self):
        # Reordering classes changes every chain term but not either side
        # of the identity.
        rng = np.random.default_rng(12)
        zt = rng.normal(size=7)
        zs = rng.normal(size=7)
        perm = rng.permutation(7)
        direct = kl(softmax_probs(zt), softmax_probs(zs))
        permuted = decomposed_kl(zt[perm], zs[perm])
        assert permuted == pytest.approx(direct, abs=1e-10)
        assert not np.allclose(binary_chain(zt)[0], binary_chain(zt[perm])[0])


class TestUniformChainKl:
    def test_identical_zero(self):
        z = np.random.default_rng(13).normal(size=5)
        assert uniform_chain_kl(z, z.copy()) == pytest.approx(0.0, abs=1e-15)

    def test_two_classes_equals_kl(self):
        rng = np.random.default_rng(14)
        zt, zs = rng.normal(size=2), rng.normal(size=2)
        assert uniform_chain_kl(zt, zs) == pytest.approx(
            kl(softmax_probs(zt), softmax_probs(zs)), abs=1e-12
        )

    def test_shift_invariance(self):
        rng = np.random.default_rng(15)
        zt = rng.normal(size=6)
        assert uniform_chain_kl(zt, zt + 3.7) == pytest.approx(0.0, abs=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(zt=finite_logits, zs=finite_logits)
    def test_nonnegative(self, zt, zs):
        size = min(zt.size, zs.size)
        assert uniform_chain_kl(zt[:size], zs[:size]) >= -1e-15


class TestTemperedChainKl:
    def test_unit_temperature_is_classical_kl(self):
        rng = np.random.default_rng(16)
        zt, zs = rng.normal(size=8), rng.normal(size=8)
        direct = kl(softmax_probs(zt), softmax_probs(zs))
        assert tempered_chain_kl(zt, zs, 1.0) == pytest.approx(direct, abs=1e-10)

    def test_high_temperature_approaches_uniform_weights(self):
        rng = np.random.default_rng(17)
        zt, zs = rng.normal(size=8), rng.normal(size=8)
        hot = tempered_chain_kl(zt, zs, 1e8)
        assert hot == pytest.approx(uniform_chain_kl(zt, zs), rel=1e-6)


class TestChainGradients:
    def test_classical_weights_give_softmax_difference(self):
        # With raw suffix weights at temperature 1 the chain divergence IS
        # the classical KL, whose student-logit gradient is p_s - p_t.
        rng = np.random.default_rng(18)
        zt, zs = rng.normal(size=7), rng.normal(size=7)
        grad = chain_kl_grad(zt, zs, chain_weights(zt).raw)
        expected = softmax_probs(zs) - softmax_probs(zt)
        np.testing.assert_allclose(grad, expected, atol=1e-12)

    @pytest.mark.parametrize("scheme,temperature", [("uniform", 1.0), ("tempered", 4.0)])
    def test_matches_central_differences(self, scheme, temperature):
        rng = np.random.default_rng(19)
        divergence, gradient = soft_divergence_fn(scheme, temperature)
        zt = rng.normal(size=6)
        zs = rng.normal(size=6)
        grad = gradient(zt, zs)
        step = 1e-6
        fd = np.zeros_like(zs)
        for k in range(6):
            zs[k] += step
            up = divergence(zt, zs)
            zs[k] -= 2 * step
            down = divergence(zt, zs)
            zs[k] += step
            fd[k] = (up - down) / (2 * step)
        np.testing.assert_allclose(grad, fd, rtol=1e-6, atol=1e-9)


class TestPretrainLosses:
    def _stacks(self, rng, n_patches=4, n_classes=6):
        student = rng.normal(size=(n_patches, n_classes))
        teacher = rng.normal(size=(n_patches, n_classes))
        label = np.zeros(n_classes)
        label[2] = 1.0
        return student, teacher, label

    def test_zero_weight_total_is_cross_entropy(self):
        student, teacher, label = self._stacks(np.random.default_rng(20))
        losses = pretrain_losses(student, teacher, label, 1, 4, soft_weight=0.0)
        assert losses.total == losses.cross_entropy

    def test_matching_teacher_zeroes_soft_loss(self):
        student, _, label = self._stacks(np.random.default_rng(21))
        losses = pretrain_losses(student, student.copy(), label, 1, 4, soft_weight=0.5)
        assert losses.soft == pytest.approx(0.0, abs=1e-12)

    def test_composition_oracle(self):
        rng = np.random.default_rng(22)
        student, teacher, label = self._stacks(rng)
        losses = pretrain_losses(student, teacher, label, 1, 4, soft_weight=0.1)

        probs = softmax_probs(student[0])
        expected_ce = -math.log(probs[2])
        expected_soft = np.mean(
            [uniform_chain_kl(teacher[p], student[p]) for p in (1, 2, 3)]
        )
        assert losses.cross_entropy == pytest.approx(expected_ce, rel=1e-12)
        assert losses.soft == pytest.approx(expected_soft, rel=1e-12)
        assert losses.total == pytest.approx(expected_ce + 0.1 * expected_soft, rel=1e-12)

    def test_hard_count_bounds(self):
        student, teacher, label = self._stacks(np.random.default_rng(23))
        for bad in (0, 4, 7):
            with pytest.raises(ValueError, match="hard patch count"):
                pretrain_losses(student, teacher, label, bad, 4, soft_weight=0.1)

    def test_mean_of_hard_logits(self):
        rng = np.random.default_rng(24)
        student, teacher, label = self._stacks(rng)
        losses = pretrain_losses(student, teacher, label, 2, 4, soft_weight=0.0)
        probs = softmax_probs(student[:2].mean(axis=0))
        assert losses.cross_entropy == pytest.approx(-math.log(probs[2]), rel=1e-12)


class TestEmaUpdate:
    def test_zero_momentum_returns_student(self):
        teacher = np.array([1.0, 2.0])
        student = np.array([-3.0, 5.0])
        np.testing.assert_array_equal(ema_update(teacher, student, 0.0), student)

    def test_standard_momentum(self):
        out = ema_update(np.zeros(3), np.ones(3), 0.999)
        np.testing.assert_allclose(out, 0.001, rtol=1e-12)

    def test_fixed_point(self):
        params = np.random.default_rng(25).normal(size=4)
        np.testing.assert_array_equal(ema_update(params, params.copy(), 0.9), params)

    def test_momentum_range(self):
        with pytest.raises(ValueError, match="momentum"):
            ema_update(np.zeros(2), np.zeros(2), 1.0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape mismatch"):
            ema_update(np.zeros(2), np.zeros(3), 0.5)
