import math

import numpy as np
import pytest

from setmatch.features import (
    DegenerateGeometryError,
    adaptive_score,
    adaptive_score_with_grad,
    build_prototype,
    cosine_cost_matrix,
    node_weights,
    validate_feature_set,
)
from setmatch.transport import SinkhornConfig, sinkhorn_solve

CFG = SinkhornConfig(epsilon=0.1)


class TestCosineCosts:
    def test_parallel_zero_cost(self):
        u = np.array([[1.0, 0.0], [2.0, 0.0]])
        costs = cosine_cost_matrix(u, u)
        np.testing.assert_allclose(np.diag(costs), 0.0, atol=1e-12)

    def test_antiparallel_max_cost(self):
        u = np.array([[1.0, 0.0]])
        v = np.array([[-3.0, 0.0]])
        assert cosine_cost_matrix(u, v)[0, 0] == pytest.approx(2.0)

    def test_orthogonal_unit_cost(self):
        u = np.array([[1.0, 0.0]])
        v = np.array([[0.0, 5.0]])
        assert cosine_cost_matrix(u, v)[0, 0] == pytest.approx(1.0)

    def test_range(self):
        rng = np.random.default_rng(0)
        costs = cosine_cost_matrix(rng.normal(size=(6, 4)), rng.normal(size=(6, 4)))
        assert np.all(costs >= 0.0) and np.all(costs <= 2.0)

    def test_zero_vector_rejected(self):
        with pytest.raises(ValueError, match="zero vector"):
            cosine_cost_matrix(np.array([[0.0, 0.0]]), np.array([[1.0, 0.0]]))

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="dimensions differ"):
            cosine_cost_matrix(np.ones((2, 3)), np.ones((2, 4)))

    def test_cardinality_mismatch(self):
        with pytest.raises(ValueError, match="cardinalities differ"):
            cosine_cost_matrix(np.ones((2, 3)), np.ones((3, 3)))


class TestNodeWeights:
    def test_identical_nodes_uniform(self):
        u = np.tile([1.0, 2.0], (4, 1))
        v = np.random.default_rng(1).normal(size=(4, 2)) + 3.0
        row, _ = node_weights(u, v)
        np.testing.assert_allclose(row, 0.25, atol=1e-12)

    def test_softmax_arithmetic(self):
        # Pre-softmax cosines are exactly [1, 0] for the first set.
        u = np.array([[1.0, 0.0], [0.0, 1.0]])
        v = np.array([[1.0, 0.0], [1.0, 0.0]])
        row, _ = node_weights(u, v)
        expected = [math.e / (1 + math.e), 1 / (1 + math.e)]
        np.testing.assert_allclose(row, expected, rtol=1e-12)
        assert row[0] == pytest.approx(0.7311, abs=1e-4)

    def test_zero_mean_rejected(self):
        u = np.array([[1.0, 0.0], [0.0, 1.0]])
        v = np.array([[1.0, 0.0], [-1.0, 0.0]])
        with pytest.raises(DegenerateGeometryError):
            node_weights(u, v)

    def test_same_set_symmetric(self):
        u = np.random.default_rng(2).normal(size=(5, 3))
        row, col = node_weights(u, u)
        np.testing.assert_allclose(row, col, atol=1e-15)

    def test_sums_to_one(self):
        rng = np.random.default_rng(3)
        row, col = node_weights(rng.normal(size=(7, 4)), rng.normal(size=(7, 4)))
        assert row.sum() == pytest.approx(1.0, abs=1e-12)
        assert col.sum() == pytest.approx(1.0, abs=1e-12)


class TestAdaptiveScore:
    def test_identical_unit_vectors_score_one(self):
        u = np.tile([0.6, 0.8], (3, 1))
        assert adaptive_score(u, u.copy(), 0.1, CFG) == pytest.approx(1.0, abs=1e-9)

    def test_orthogonal_sets_score_zero(self):
        u = np.tile([1.0, 0.0, 0.0], (3, 1))
        v = np.tile([0.0, 1.0, 0.0], (3, 1))
        assert adaptive_score(u, v, 0.1, CFG) == pytest.approx(0.0, abs=1e-9)

    def test_matches_elementwise_oracle(self):
        rng = np.random.default_rng(7)
        u = rng.normal(size=(3, 5))
        v = rng.normal(size=(3, 5))
        score = adaptive_score(u, v, 0.2, CFG)

        costs = cosine_cost_matrix(u, v)
        row, col = node_weights(u, v)
        plan = sinkhorn_solve(row, col, costs, SinkhornConfig(epsilon=0.2)).plan
        oracle = sum(
            (1.0 - costs[i, j]) * plan[i, j] for i in range(3) for j in range(3)
        )
        assert score == pytest.approx(oracle, rel=1e-12)

    def test_scale_invariance(self):
        rng = np.random.default_rng(8)
        u = rng.normal(size=(4, 6))
        v = rng.normal(size=(4, 6))
        base_costs = cosine_cost_matrix(u, v)
        base_weights = node_weights(u, v)
        base_score = adaptive_score(u, v, 0.1, CFG)
        for scale in (1e-3, 7.0, 1e4):
            np.testing.assert_allclose(
                cosine_cost_matrix(u * scale, v), base_costs, atol=1e-10
            )
            np.testing.assert_allclose(
                node_weights(u * scale, v)[0], base_weights[0], atol=1e-10
            )
            assert adaptive_score(u * scale, v, 0.1, CFG) == pytest.approx(
                base_score, abs=1e-10
            )

    def test_bounded(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            u = rng.normal(size=(4, 3))
            v = rng.normal(size=(4, 3))
            score = adaptive_score(u, v, float(rng.uniform(0.05, 2.0)), CFG)
            assert -1.0 <= score <= 1.0

    def test_permuted_self_beats_random(self):
        # Permuted copies yield a near-diagonal kernel that mixes slowly, so
        # relax the marginal tolerance; score differences here are O(0.5).
        cfg = SinkhornConfig(epsilon=0.1, tolerance=1e-6, max_iterations=20_000)
        rng = np.random.default_rng(10)
        wins = 0
        for _ in range(100):
            u = rng.normal(size=(5, 8))
            v = u[rng.permutation(5)]
            w = rng.normal(size=(5, 8))
            if adaptive_score(u, v, 0.1, cfg) >= adaptive_score(u, w, 0.1, cfg):
                wins += 1
        assert wins >= 95

    def test_invalid_epsilon(self):
        u = np.ones((2, 2))
        with pytest.raises(ValueError, match="positive"):
            adaptive_score(u, u, 0.0, CFG)


class TestScoreGradients:
    def test_matches_central_differences(self):
        step = 1e-6
        cfg = SinkhornConfig(epsilon=0.3, tolerance=1e-12, max_iterations=20_000)
        for seed in range(6):
            rng = np.random.default_rng(500 + seed)
            u = rng.normal(size=(3, 4))
            v = rng.normal(size=(3, 4))
            eps = float(rng.uniform(0.2, 0.5))
            _, grads = adaptive_score_with_grad(u, v, eps, cfg)

            for array, grad in ((u, grads.first), (v, grads.second)):
                fd = np.zeros_like(array)
                for i in range(array.shape[0]):
                    for j in range(array.shape[1]):
                        array[i, j] += step
                        up = adaptive_score(u, v, eps, cfg)
                        array[i, j] -= 2 * step
                        down = adaptive_score(u, v, eps, cfg)
                        array[i, j] += step
                        fd[i, j] = (up - down) / (2 * step)
                np.testing.assert_allclose(grad, fd, rtol=2e-4, atol=1e-7)

            fd_eps = (
                adaptive_score(u, v, eps + step, cfg)
                - adaptive_score(u, v, eps - step, cfg)
            ) / (2 * step)
            assert grads.epsilon == pytest.approx(fd_eps, rel=2e-4, abs=1e-7)


class TestPrototypes:
    def test_single_shot_identity(self):
        rng = np.random.default_rng(20)
        support = [rng.normal(size=(4, 3)), rng.normal(size=(4, 3))]
        proto = build_prototype(support, labels=[2, 5], class_id=5, shots=1)
        np.testing.assert_array_equal(proto, support[1])

    def test_cancellation_flagged(self):
        a = np.random.default_rng(21).normal(size=(3, 4))
        with pytest.raises(ValueError, match="zero vector"):
            build_prototype([a, -a], labels=[0, 0], class_id=0, shots=2)

    def test_positional_mean_oracle(self):
        rng = np.random.default_rng(22)
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(3, 4))
        proto = build_prototype([a, b], labels=[1, 1], class_id=1, shots=2)
        for m in range(3):
            np.testing.assert_allclose(proto[m], (a[m] + b[m]) / 2.0, rtol=1e-15)

    def test_missing_class(self):
        with pytest.raises(ValueError, match="no support set"):
            build_prototype([np.ones((2, 2))], labels=[0], class_id=3, shots=1)

    def test_wrong_shot_count(self):
        sets = [np.ones((2, 2)), np.ones((2, 2))]
        with pytest.raises(ValueError, match="expected 1 support sets"):
            build_prototype(sets, labels=[0, 0], class_id=0, shots=1)


class TestValidation:
    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError, match="NaN or Inf"):
            validate_feature_set([[1.0, np.inf]])

    def test_rejects_empty(self):
        with pytest.raises(ValueError, match="feature set"):
            validate_feature_set(np.zeros((0, 3)))
