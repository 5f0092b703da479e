"""Tests for the limit-process samplers and generators."""
import math
from fractions import Fraction

import numpy as np
import pytest

from genealogies.harness import dkw_band, ks_statistic
from genealogies.limits import (ConstantTestFunction,
                                ExponentialTestFunction, LinearCombination,
                                apply_generator_B, apply_generator_Bhat,
                                apply_generator_C,
                                one_step_generator_estimate,
                                pair_exponential, sample_coalescent_tree,
                                sample_limit_mark)
from genealogies.measures import (LimitMeasure, MassPartition,
                                  moran_law,
                                  pairwise_coalescence_probability)
from genealogies.partitions import (apply_partition, enumerate_partitions,
                                    limit_rates_partitions)
from genealogies.trees import (DistanceMatrix, MarkedDistanceMatrix,
                               TreeState, validate)

KINGMAN = LimitMeasure.kingman()
HALF_ATOM = LimitMeasure.single_atom(MassPartition([Fraction(1, 2)]))


class TestTestFunctions:
    def test_exponential_value(self):
        phi = pair_exponential()
        d = np.array([[0.0, 1.5], [1.5, 0.0]])
        assert phi(d) == pytest.approx(math.exp(-3.0))

    def test_symbolic_gradients_match_finite_differences(self):
        a = np.array([[0.0, 1.0, 0.5],
                      [0.25, 0.0, 2.0],
                      [0.0, 1.0, 0.0]])
        b = np.array([0.5, 1.0, 0.25])
        phi = ExponentialTestFunction(a, b)
        rng = np.random.default_rng(0)
        d = rng.random((3, 3))
        d = d + d.T
        np.fill_diagonal(d, 0.0)
        v = rng.random(3)
        assert phi.grad_distance_sum(d, v) == pytest.approx(
            phi.fd_grad_distance_sum(d, v), rel=1e-6)
        assert phi.grad_mark_sum(d, v) == pytest.approx(
            phi.fd_grad_mark_sum(d, v), rel=1e-6)

    def test_rejects_negative_coefficients(self):
        with pytest.raises(ValueError):
            ExponentialTestFunction(np.array([[0.0, -1.0], [0.0, 0.0]]))

    def test_linear_combination(self):
        phi = pair_exponential()
        one = ConstantTestFunction(2)
        comb = LinearCombination([(2.0, phi), (3.0, one)])
        d = np.zeros((2, 2))
        assert comb(d) == pytest.approx(5.0)
        assert comb.grad_distance_sum(d) == pytest.approx(
            2.0 * phi.grad_distance_sum(d))


class TestGeneratorB:
    def test_point_state_kingman(self):
        val = apply_generator_B(KINGMAN, TreeState.point(1),
                                pair_exponential())
        assert val == pytest.approx(-4.0, abs=1e-12)

    def test_linearity(self):
        chi = TreeState(DistanceMatrix(np.array([[0.0, 2.0, 2.0],
                                                 [2.0, 0.0, 2.0],
                                                 [2.0, 2.0, 0.0]])))
        phi = pair_exponential()
        a = np.zeros((2, 2))
        a[0, 1] = 0.5
        psi = ExponentialTestFunction(a)
        comb = LinearCombination([(2.0, phi), (-1.0, psi)])
        lhs = apply_generator_B(KINGMAN, chi, comb)
        rhs = (2.0 * apply_generator_B(KINGMAN, chi, phi)
               - apply_generator_B(KINGMAN, chi, psi))
        assert lhs == pytest.approx(rhs, abs=1e-10)

    def test_against_independent_expectation(self):
        """Recompute the generator action with a direct loop over sampled
        pairs: growth term plus rate-weighted reshuffle differences."""
        d = np.array([[0.0, 2.0, 6.0],
                      [2.0, 0.0, 6.0],
                      [6.0, 6.0, 0.0]])
        chi = TreeState(DistanceMatrix(d))
        phi = pair_exponential()
        rates = limit_rates_partitions(KINGMAN, 2)
        acc = 0.0
        for i in range(3):
            for j in range(3):
                sub = d[np.ix_([i, j], [i, j])]
                val = -4.0 * math.exp(-2.0 * sub[0, 1])
                for pi, lam in rates.entries.items():
                    moved = apply_partition(pi, sub).d
                    val += float(lam) * (math.exp(-2.0 * moved[0, 1])
                                         - math.exp(-2.0 * sub[0, 1]))
                acc += val
        expected = acc / 9.0
        assert apply_generator_B(KINGMAN, chi, phi) == pytest.approx(
            expected, abs=1e-12)

    def test_constant_functions_are_harmonic(self):
        chi = TreeState(DistanceMatrix.zeros(3))
        for xi in (KINGMAN, HALF_ATOM):
            assert apply_generator_B(xi, chi, ConstantTestFunction(2)) == 0.0

    def test_rejects_marked_phi(self):
        phi = ExponentialTestFunction(np.zeros((2, 2)), np.zeros(2))
        with pytest.raises(ValueError):
            apply_generator_B(KINGMAN, TreeState.point(1), phi)


class TestGeneratorBhat:
    def test_pure_mark_decay_under_kingman(self):
        # no atoms: only the mark-growth term acts
        phi = ExponentialTestFunction(np.zeros((2, 2)), np.array([1.0, 2.0]))
        chi = TreeState.point(2, marked=True)
        val = apply_generator_Bhat(KINGMAN, chi, phi)
        assert val == pytest.approx(-3.0, abs=1e-12)

    def test_constant_is_harmonic(self):
        chi = TreeState.point(2, marked=True)
        phi = ConstantTestFunction(2, marked=True)
        assert apply_generator_Bhat(HALF_ATOM, chi, phi) == pytest.approx(
            0.0, abs=1e-12)

    def test_single_mark_reset_rate(self):
        """For a one-point marked polynomial, the atomic part recolors the
        lineage at rate 2 and resets its mark to zero."""
        phi = ExponentialTestFunction(np.zeros((1, 1)), np.array([1.0]))
        v0 = 0.7
        chi = TreeState(MarkedDistanceMatrix(np.zeros((1, 1)),
                                             np.array([v0])))
        val = apply_generator_Bhat(HALF_ATOM, chi, phi)
        expected = -math.exp(-v0) + 2.0 * (1.0 - math.exp(-v0))
        assert val == pytest.approx(expected, abs=1e-12)


class TestGeneratorC:
    def test_single_matrix_matches_plain_term(self):
        d = np.array([[0.0, 3.0], [3.0, 0.0]])
        phi = pair_exponential()
        val_c = apply_generator_C(KINGMAN, [DistanceMatrix(d)], phi)
        expected = -4.0 * math.exp(-6.0) + (1.0 - math.exp(-6.0))
        assert val_c == pytest.approx(expected, abs=1e-12)

    def test_weights_average(self):
        d1 = np.zeros((2, 2))
        d2 = np.array([[0.0, 3.0], [3.0, 0.0]])
        phi = pair_exponential()
        a = apply_generator_C(KINGMAN, [d1], phi)
        b = apply_generator_C(KINGMAN, [d2], phi)
        both = apply_generator_C(KINGMAN, [d1, d2], phi,
                                 weights=[0.25, 0.75])
        assert both == pytest.approx(0.25 * a + 0.75 * b, abs=1e-12)


class TestCoalescentSampler:
    def test_pair_distance_law_kingman(self):
        t, reps = 1.0, 20000
        rng = np.random.default_rng(23)
        draws = np.empty(reps)
        for k in range(reps):
            rv = sample_coalescent_tree(KINGMAN, 2, t, rng=rng)
            draws[k] = (rv.r + rv.v[:, None] + rv.v[None, :])[0, 1]

        def cdf(x):
            if x >= 2.0 * t:
                return 1.0
            return 1.0 - math.exp(-max(x, 0.0) / 2.0)

        def cdf_left(x):
            return 1.0 - math.exp(-max(min(x, 2.0 * t), 0.0) / 2.0)

        assert ks_statistic(draws, cdf, cdf_left) <= dkw_band(reps)

    def test_outputs_are_valid_marked_matrices(self):
        rng = np.random.default_rng(24)
        for xi in (KINGMAN, HALF_ATOM):
            for _ in range(20):
                rv = sample_coalescent_tree(xi, 5, 0.8, rng=rng)
                assert validate(rv) is None

    def test_marks_below_external_branches(self):
        """First colored participation happens no later than the first
        coalescence, so v(i) is at most half the minimal distance."""
        rng = np.random.default_rng(25)
        t = 1.5
        for _ in range(40):
            rv = sample_coalescent_tree(HALF_ATOM, 3, t, rng=rng)
            rho = rv.r + rv.v[:, None] + rv.v[None, :]
            np.fill_diagonal(rho, np.inf)
            assert np.all(rv.v <= 0.5 * rho.min(axis=1) + 1e-12)
            assert np.all(rv.v <= t + 1e-12)

    def test_initial_state_extends_distances(self):
        base = np.array([[0.0, 4.0], [4.0, 0.0]])
        initial = TreeState(DistanceMatrix(base))
        rng = np.random.default_rng(26)
        t = 0.25
        saw_extension = False
        for _ in range(50):
            rv = sample_coalescent_tree(KINGMAN, 2, t, initial=initial,
                                        rng=rng)
            rho01 = rv.v[0] + rv.r[0, 1] + rv.v[1]
            assert rho01 <= 2.0 * t + 4.0 + 1e-12
            if rho01 > 2.0 * t + 1e-12:
                saw_extension = True
        assert saw_extension

    def test_mark_law_matches_exponential(self):
        t, reps = 1.0, 20000
        rng = np.random.default_rng(27)
        marks = sample_limit_mark(HALF_ATOM, t, rng, size=reps)
        # reset rate = weight * |x|_1 / |x|_2^2 = 2

        def cdf(x):
            if x >= t:
                return 1.0
            return 1.0 - math.exp(-2.0 * max(x, 0.0))

        def cdf_left(x):
            return 1.0 - math.exp(-2.0 * max(min(x, t), 0.0))

        assert ks_statistic(marks, cdf, cdf_left) <= dkw_band(reps)


class TestOneStepEstimate:
    def test_moran_point_state_closed_form(self):
        """From a point state every pair ends one generation apart after a
        single step, so each replicate contributes the same value
        (exp(-4 c_N) - 1) / c_N and the estimate is exact."""
        law = moran_law()
        N, reps = 64, 500
        c = float(pairwise_coalescence_probability(law, N))
        rng = np.random.default_rng(28)
        res = one_step_generator_estimate(law, N, TreeState.point(1),
                                          pair_exponential(), reps, rng)
        exact = (math.exp(-4.0 * c) - 1.0) / c
        assert res.estimate == pytest.approx(exact, abs=1e-12)
        assert res.stderr == 0.0
        assert res.ci_low <= res.estimate <= res.ci_high

    def test_requires_large_enough_population(self):
        with pytest.raises(ValueError):
            one_step_generator_estimate(moran_law(), 1, TreeState.point(1),
                                        pair_exponential(), 10,
                                        np.random.default_rng(0))
