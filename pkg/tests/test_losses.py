import math
import warnings

import numpy as np
import pytest

from tdec import cluster_head as ch
from tdec import diffcore as dc
from tdec import losses
from tdec.diffcore import Tape, Tensor, grad_check

import oracles


class TestReconstruction:
    def test_perfect_reconstruction(self):
        x = np.random.default_rng(0).random((3, 1, 4, 4))
        assert losses.reconstruction_loss(x, x).values == 0.0

    def test_all_ones_error(self):
        x = np.zeros((1, 1, 4, 4))
        assert losses.reconstruction_loss(x, np.ones_like(x)).values == 16.0

    def test_batch_repetition_invariant(self):
        rng = np.random.default_rng(1)
        x = rng.random((4, 1, 4, 4))
        y = rng.random((4, 1, 4, 4))
        single = losses.reconstruction_loss(x, y).values
        doubled = losses.reconstruction_loss(
            np.concatenate([x, x]), np.concatenate([y, y])).values
        assert doubled == pytest.approx(single, rel=1e-15)

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            losses.reconstruction_loss(np.zeros((0, 1, 4, 4)), np.zeros((0, 1, 4, 4)))

    def test_shape_mismatch(self):
        with pytest.raises(dc.ShapeError):
            losses.reconstruction_loss(np.zeros((2, 4)), np.zeros((2, 5)))


class TestSigmaSearch:
    def test_equal_distances_entropy_exact(self):
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            sigma = losses.sigma_search(np.array([4.0, 4.0]), perplexity=2.0)
        assert oracles.row_perplexity([4.0, 4.0], sigma) == pytest.approx(2.0)

    def test_matches_grid_scan(self):
        d2 = np.array([1.0, 4.0, 9.0])
        sigma = losses.sigma_search(d2, perplexity=2.0, tol=1e-8)
        ref = oracles.grid_scan_sigma(d2, 2.0, lo=1e-2, hi=1e2, steps=20000)
        assert sigma == pytest.approx(ref, rel=1e-3)

    def test_converges_on_random_rows(self):
        rng = np.random.default_rng(2)
        z = rng.normal(size=(100, 10))
        d2 = ((z[:1] - z[1:]) ** 2).sum(axis=1)
        sigma = losses.sigma_search(d2, perplexity=30.0)
        assert oracles.row_perplexity(d2, sigma) == pytest.approx(30.0, abs=1e-3)

    def test_zero_distances_fall_back(self):
        with pytest.warns(UserWarning, match="sigma = 1"):
            assert losses.sigma_search(np.zeros(5), perplexity=3.0) == 1.0

    def test_perplexity_bound(self):
        with pytest.raises(ValueError, match="perplexity"):
            losses.sigma_search(np.ones(3), perplexity=4.0)


class TestAffinities:
    def test_phi_total_mass(self):
        rng = np.random.default_rng(3)
        z = rng.normal(size=(12, 5))
        phi, _ = losses.high_affinities(z, perplexity=3.0)
        assert phi.values.sum() == pytest.approx(1.0, abs=1e-9)
        np.testing.assert_allclose(phi.values, phi.values.T, atol=1e-15)
        assert np.all(np.diag(phi.values) == 0.0)

    def test_two_points(self):
        # Each conditional row is the single value 1, so the symmetrized
        # entry is (1 + 1) / (2n) = 0.5 and the total mass is 1.
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")  # perplexity unattainable at n=2
            phi, _ = losses.high_affinities(np.array([[0.0], [1.0]]), perplexity=1.5)
        np.testing.assert_allclose(phi.values, [[0.0, 0.5], [0.5, 0.0]], atol=1e-12)
        assert phi.values.sum() == pytest.approx(1.0, abs=1e-12)

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(4)
        z = rng.normal(size=(10, 4))
        phi, sigmas = losses.high_affinities(z, perplexity=3.0)
        np.testing.assert_allclose(
            phi.values, oracles.naive_phi(z, sigmas), rtol=1e-12, atol=1e-15)

    def test_omega_two_points(self):
        omega = losses.low_affinities(np.array([[0.0, 0.0], [2.5, 0.0]]))
        np.testing.assert_allclose(
            omega.values, [[0.0, 0.5], [0.5, 0.0]], atol=1e-15)

    def test_omega_equilateral(self):
        z = np.array([[0.0, 0.0], [1.0, 0.0], [0.5, math.sqrt(3) / 2]])
        omega = losses.low_affinities(z).values
        off = omega[~np.eye(3, dtype=bool)]
        np.testing.assert_allclose(off, np.full(6, 1 / 6), atol=1e-12)

    def test_omega_matches_naive_oracle(self):
        rng = np.random.default_rng(5)
        z = rng.normal(size=(10, 2))
        np.testing.assert_allclose(
            losses.low_affinities(z).values, oracles.naive_omega(z),
            rtol=1e-12, atol=1e-15)

    def test_needs_two_points(self):
        with pytest.raises(ValueError, match="2 points"):
            losses.low_affinities(np.zeros((1, 2)))
        with pytest.raises(ValueError, match="2 points"):
            losses.high_affinities(np.zeros((1, 3)), perplexity=0.5)


class TestDimLoss:
    def test_identity_is_zero(self):
        rng = np.random.default_rng(6)
        z = rng.normal(size=(8, 2))
        omega = losses.low_affinities(z)
        assert losses.dim_loss(omega, omega).values == 0.0

    def test_nonnegative(self):
        rng = np.random.default_rng(7)
        for _ in range(25):
            phi, _ = losses.high_affinities(rng.normal(size=(7, 3)), 2.0)
            omega = losses.low_affinities(rng.normal(size=(7, 2)))
            assert losses.dim_loss(phi, omega).values >= -1e-15

    def test_hand_summed_value(self):
        # pair masses 0.3/0.3 plus 0.2/0.2 on a second pair, uniform omega
        phi = np.array([
            [0.0, 0.3, 0.2],
            [0.3, 0.0, 0.0],
            [0.2, 0.0, 0.0],
        ])
        omega = np.full((3, 3), 1 / 6)
        np.fill_diagonal(omega, 0.0)
        expected = 0.6 * math.log(0.3 / (1 / 6)) + 0.4 * math.log(0.2 / (1 / 6))
        got = losses.dim_loss(phi, omega).values
        assert got == pytest.approx(expected, rel=1e-12)
        assert got == pytest.approx(oracles.naive_kl(phi, omega), rel=1e-12)

    def test_support_violation(self):
        phi = np.array([[0.0, 1.0], [0.0, 0.0]])
        omega = np.array([[0.0, 0.0], [0.5, 0.0]])
        with pytest.raises(dc.DomainError, match="dim_loss"):
            losses.dim_loss(phi, omega)

    def test_gradient_through_affinities(self):
        rng = np.random.default_rng(8)
        z_hi = rng.normal(size=(5, 4))
        z_lo = rng.normal(size=(5, 2))
        _, sigmas = losses.high_affinities(z_hi, 1.3)

        def loss(p):
            phi, _ = losses.high_affinities(p["hi"], 1.3, sigmas=sigmas)
            omega = losses.low_affinities(p["lo"])
            return losses.dim_loss(phi, omega)

        params = {"hi": Tensor(z_hi), "lo": Tensor(z_lo)}
        assert grad_check(loss, params, fd_step=1e-5) <= 1e-4


class TestTargetDistribution:
    def test_one_hot_fixed_point(self):
        q = np.eye(3)[[0, 1, 2, 1, 0]]
        np.testing.assert_array_equal(losses.target_distribution(q), q)

    def test_uniform_stays_uniform(self):
        q = np.full((5, 2), 0.5)
        np.testing.assert_allclose(losses.target_distribution(q), q)

    def test_frozen_example(self):
        q = np.array([[0.8, 0.2], [0.4, 0.6]])
        p = losses.target_distribution(q)
        np.testing.assert_allclose(
            p, [[0.914285714285714, 0.085714285714286],
                [0.228571428571429, 0.771428571428571]], atol=1e-12)
        np.testing.assert_allclose(p, oracles.naive_target(q), atol=1e-15)

    def test_sharpens(self):
        rng = np.random.default_rng(9)
        q = rng.dirichlet(np.ones(4), size=1000)
        p = losses.target_distribution(q)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)
        # sharpening: the dominant entry never shrinks
        assert np.all(p.max(axis=1) >= q.max(axis=1) - 1e-12)

    def test_empty_cluster_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            losses.target_distribution(np.array([[1.0, 0.0], [1.0, 0.0]]))


class TestClusteringLoss:
    def test_identity_zero(self):
        p = np.array([[0.3, 0.7], [0.9, 0.1]])
        assert losses.clustering_loss(p, p).values == 0.0

    def test_log_two(self):
        got = losses.clustering_loss([[1.0, 0.0]], [[0.5, 0.5]]).values
        assert got == pytest.approx(math.log(2.0), rel=1e-12)

    def test_nonnegative_random_rows(self):
        rng = np.random.default_rng(10)
        for _ in range(100):
            p = rng.dirichlet(np.ones(3), size=6)
            q = rng.dirichlet(np.ones(3), size=6)
            assert losses.clustering_loss(p, q).values >= -1e-12

    def test_support_violation(self):
        with pytest.raises(dc.DomainError, match="clustering_loss"):
            losses.clustering_loss([[1.0, 0.0]], [[0.0, 1.0]])


class TestCombine:
    def test_pretraining_mode(self):
        b = losses.combine(1.5, 2.0, 99.0, alpha=0.0, beta=0.001)
        assert b.l_total == b.l_stru

    def test_arithmetic(self):
        b = losses.combine(1.0, 2.0, 3.0, alpha=0.1, beta=0.001)
        assert b.l_stru == 1.0 + 0.001 * 2.0
        assert b.l_total == b.l_stru + 0.1 * 3.0

    def test_tensor_inputs_keep_graph(self):
        x = Tensor(2.0)
        with Tape() as tape:
            bundle = losses.combine(dc.square(x), dc.scale(x, 3.0), dc.square(x),
                                    alpha=0.1, beta=0.5)
        g = tape.gradients(bundle.l_total, [x])[0]
        # d/dx [x^2 + 0.5 * 3x + 0.1 * x^2] = 2.2x + 1.5
        assert float(g) == pytest.approx(2.2 * 2.0 + 1.5)

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            losses.combine(1.0, 1.0, 1.0, alpha=-0.1, beta=0.0)


class TestNeighborhoodAssignments:
    def test_matches_cluster_head(self):
        rng = np.random.default_rng(11)
        z = rng.normal(size=(20, 2)) * 2
        centers = rng.normal(size=(3, 2)) * 2
        knn = ch.knn_indices(z, 5)
        theta = ch.neighbor_weights(z, knn)
        q_head = ch.soft_assign(z, centers, knn, theta)
        q_tape = losses.neighborhood_assignments(z, centers, knn).values
        np.testing.assert_allclose(q_tape, q_head, rtol=1e-12, atol=1e-14)

    def test_gradient_with_fixed_centers(self):
        rng = np.random.default_rng(12)
        z = rng.normal(size=(8, 2)) * 2
        centers = rng.normal(size=(3, 2))
        knn = ch.knn_indices(z, 3)
        p = rng.dirichlet(np.ones(3), size=8)

        def loss(params):
            q = losses.neighborhood_assignments(params["z"], centers, knn)
            return losses.clustering_loss(dc.constant(p), q)

        assert grad_check(loss, {"z": Tensor(z)}, fd_step=1e-5) <= 1e-4
