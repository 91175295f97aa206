import itertools

import numpy as np
import pytest

from tdec.metrics import accuracy, contingency, hungarian, nmi


def brute_force_assignment_cost(cost):
    """Exhaustive minimum over all permutations."""
    n = cost.shape[0]
    return min(
        sum(cost[i, p[i]] for i in range(n))
        for p in itertools.permutations(range(n))
    )


class TestHungarian:
    def test_identity_favoring(self):
        cost = np.ones((4, 4)) - np.eye(4)
        np.testing.assert_array_equal(hungarian(cost), np.arange(4))

    def test_two_by_two_antidiagonal(self):
        cost = np.array([[2.0, 1.0], [1.0, 2.0]])
        assign = hungarian(cost)
        np.testing.assert_array_equal(assign, [1, 0])
        assert cost[0, assign[0]] + cost[1, assign[1]] == 2.0

    def test_matches_brute_force_random_6x6(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            cost = rng.uniform(-5, 5, size=(6, 6))
            assign = hungarian(cost)
            got = sum(cost[i, assign[i]] for i in range(6))
            assert got == pytest.approx(brute_force_assignment_cost(cost), abs=1e-9)

    def test_matches_brute_force_all_sizes(self):
        rng = np.random.default_rng(8)
        for n in range(1, 9):
            for _ in range(12):
                cost = rng.uniform(0, 10, size=(n, n))
                assign = hungarian(cost)
                assert sorted(assign) == list(range(n))
                got = sum(cost[i, assign[i]] for i in range(n))
                assert got == pytest.approx(brute_force_assignment_cost(cost), abs=1e-9)

    def test_rejects_non_square(self):
        with pytest.raises(ValueError, match="square"):
            hungarian(np.ones((2, 3)))


class TestAccuracy:
    def test_exact_match(self):
        y = np.array([0, 1, 2, 1, 0])
        assert accuracy(y, y) == 1.0

    def test_relabeling_invariant(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            truth = rng.integers(0, 4, size=50)
            perm = rng.permutation(4)
            assert accuracy(perm[truth], truth) == 1.0

    def test_frozen_example(self):
        # truth=[0,0,1,1], pred=[1,1,1,0]: mapping 1->0, 0->1 matches i=0,1,3.
        assert accuracy([1, 1, 1, 0], [0, 0, 1, 1]) == pytest.approx(0.75)

    def test_differing_cluster_counts(self):
        truth = np.array([0, 0, 1, 1, 2, 2])
        pred = np.array([0, 0, 1, 1, 1, 1])
        assert accuracy(pred, truth) == pytest.approx(4 / 6)

    def test_beats_chance_floor(self):
        # Holds whenever the prediction uses at most as many clusters as the
        # truth has classes (the usual case: K is given by the categories).
        # With more predicted clusters than classes a one-to-one mapping can
        # leave most points unmatched and the floor does not apply.
        rng = np.random.default_rng(10)
        for _ in range(30):
            kt = rng.integers(2, 5)
            truth = rng.integers(0, kt, size=60)
            pred = rng.integers(0, rng.integers(1, kt + 1), size=60)
            assert accuracy(pred, truth) >= 1.0 / kt - 1e-12

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="length"):
            accuracy([0, 1], [0, 1, 2])


class TestNmi:
    def test_identical_labels(self):
        assert nmi([0, 0, 1, 1, 2], [0, 0, 1, 1, 2]) == pytest.approx(1.0)

    def test_constant_prediction(self):
        assert nmi([1, 1, 1, 1], [0, 1, 0, 1]) == 0.0

    def test_independent_partitions(self):
        assert nmi([0, 1, 0, 1], [0, 0, 1, 1]) == pytest.approx(0.0, abs=1e-12)

    def test_relabeling_invariant(self):
        rng = np.random.default_rng(11)
        truth = rng.integers(0, 3, size=40)
        pred = rng.integers(0, 3, size=40)
        perm = np.array([2, 0, 1])
        assert nmi(pred, truth) == pytest.approx(nmi(perm[pred], truth))
        assert nmi(pred, truth) == pytest.approx(nmi(pred, perm[truth]))

    def test_bounded(self):
        rng = np.random.default_rng(12)
        for _ in range(50):
            a = rng.integers(0, 6, size=30)
            b = rng.integers(0, 6, size=30)
            v = nmi(a, b)
            assert 0.0 <= v <= 1.0

    def test_both_constant(self):
        assert nmi([3, 3, 3], [7, 7, 7]) == 1.0

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="length"):
            nmi([0], [0, 1])


def test_contingency_counts():
    w = contingency([0, 0, 1, 1], [5, 5, 5, 9])
    np.testing.assert_array_equal(w, [[2, 0], [1, 1]])
