import numpy as np
import pytest

from rsa_detect.capacity import MixtureSolution, SolverConfig, minimax_regret_oracle, solve
from rsa_detect.info import kl_divergence
from rsa_detect.validation import ValidationError

from conftest import random_channel

BSC_CAPACITY = 0.5310044064107188  # 1 - H_b(0.1)
Z_ROWS = np.array([[1.0, 0.0], [0.5, 0.5]])
Z_CAPACITY = 0.32192809488736235  # log2(1/0.8) at weights [0.6, 0.4]

# Runs every update to the solver's floating-point fixed point; used where a
# test checks optimality conditions rather than the default stopping rule.
FIXED_POINT = SolverConfig(tolerance=1e-300, max_iterations=500_000)


class TestClosedForms:
    def test_identity_two(self):
        sol = solve(np.eye(2))
        assert sol.converged
        np.testing.assert_allclose(sol.weights, [0.5, 0.5], atol=1e-12)
        assert sol.capacity_bits == pytest.approx(1.0, abs=1e-12)

    @pytest.mark.parametrize("m", [2, 3, 4, 8])
    def test_identity_m(self, m):
        sol = solve(np.eye(m))
        assert sol.capacity_bits == pytest.approx(np.log2(m), abs=1e-9)

    def test_identical_rows(self):
        sol = solve(np.array([[0.3, 0.7], [0.3, 0.7]]))
        np.testing.assert_allclose(sol.weights, [0.5, 0.5], atol=1e-12)
        assert sol.capacity_bits == pytest.approx(0.0, abs=1e-12)
        assert sol.converged

    def test_binary_symmetric(self):
        sol = solve(np.array([[0.9, 0.1], [0.1, 0.9]]))
        np.testing.assert_allclose(sol.weights, [0.5, 0.5], atol=1e-9)
        assert sol.capacity_bits == pytest.approx(BSC_CAPACITY, abs=1e-9)

    def test_z_channel(self):
        sol = solve(Z_ROWS)
        assert sol.capacity_bits == pytest.approx(Z_CAPACITY, abs=1e-6)
        np.testing.assert_allclose(sol.weights, [0.6, 0.4], atol=1e-4)
        np.testing.assert_allclose(sol.mixture, [0.8, 0.2], atol=1e-4)
        # both rows' divergences to the mixture equal the capacity
        for row in Z_ROWS:
            assert kl_divergence(row, sol.mixture) == pytest.approx(
                sol.capacity_bits, abs=1e-4
            )


class TestSolutionContract:
    def test_mixture_consistency_and_weight_sum(self, rng):
        for _ in range(30):
            rows = random_channel(rng, int(rng.integers(2, 5)), int(rng.integers(2, 7)))
            sol = solve(rows)
            np.testing.assert_allclose(sol.mixture, sol.weights @ rows, atol=1e-9)
            assert abs(sol.weights.sum() - 1.0) <= 1e-9
            assert sol.capacity_bits >= 0.0

    def test_single_model_short_circuit(self):
        sol = solve(np.array([[0.2, 0.8]]))
        assert sol.weights.tolist() == [1.0]
        np.testing.assert_array_equal(sol.mixture, [0.2, 0.8])
        assert sol.capacity_bits == 0.0
        assert sol.iterations == 0
        assert sol.converged

    def test_zero_column_skipped(self):
        rows = np.array([[0.5, 0.5, 0.0], [0.9, 0.1, 0.0]])
        sol = solve(rows)
        assert np.isfinite(sol.capacity_bits)
        assert sol.mixture[2] == 0.0

    def test_non_stochastic_rejected(self):
        with pytest.raises(ValidationError):
            solve(np.array([[0.5, 0.6], [0.5, 0.5]]))

    def test_non_convergence_flagged_not_raised(self):
        sol = solve(Z_ROWS, SolverConfig(tolerance=1e-15, max_iterations=3))
        assert not sol.converged
        assert sol.iterations == 3
        assert np.isfinite(sol.capacity_bits)

    def test_initial_weights_respected(self):
        # identical rows: any initial distribution is a fixed point
        init = np.array([0.25, 0.75])
        sol = solve(np.array([[0.3, 0.7], [0.3, 0.7]]), SolverConfig(initial_weights=init))
        np.testing.assert_allclose(sol.weights, init, atol=1e-12)

    def test_initial_weights_size_checked(self):
        with pytest.raises(ValidationError):
            solve(np.eye(3), SolverConfig(initial_weights=np.array([0.5, 0.5])))

    def test_config_validation(self):
        with pytest.raises(ValidationError):
            SolverConfig(tolerance=0.0)
        with pytest.raises(ValidationError):
            SolverConfig(max_iterations=0)


class TestAscentAndOptimality:
    def test_monotone_ascent(self, rng):
        # capacity as a function of the iteration budget never decreases
        for _ in range(20):
            rows = random_channel(rng, int(rng.integers(2, 5)), int(rng.integers(2, 7)))
            caps = [
                solve(rows, SolverConfig(tolerance=1e-300, max_iterations=k)).capacity_bits
                for k in range(1, 25)
            ]
            for a, b in zip(caps, caps[1:]):
                assert b >= a - 1e-12

    def test_kl_equalization(self, rng):
        for _ in range(40):
            m = int(rng.integers(2, 5))
            rows = random_channel(rng, m, int(rng.integers(2, 7)))
            sol = solve(rows, FIXED_POINT)
            for k in range(m):
                kl = kl_divergence(rows[k], sol.mixture)
                if sol.weights[k] > 1e-6:
                    assert kl == pytest.approx(sol.capacity_bits, abs=1e-6)
                else:
                    assert kl <= sol.capacity_bits + 1e-6

    def test_minimax_optimality_over_members(self, rng):
        # the mixture beats any single member used as the code
        for _ in range(25):
            m = int(rng.integers(2, 5))
            rows = random_channel(rng, m, int(rng.integers(2, 7)))
            sol = solve(rows, FIXED_POINT)
            worst_mix = max(kl_divergence(rows[k], sol.mixture) for k in range(m))
            for j in range(m):
                worst_j = max(kl_divergence(rows[k], rows[j]) for k in range(m))
                assert worst_mix <= worst_j + 1e-9

    def test_permutation_equivariance(self, rng):
        rows = random_channel(rng, 4, 6)
        perm = rng.permutation(4)
        base = solve(rows, FIXED_POINT)
        permuted = solve(rows[perm], FIXED_POINT)
        np.testing.assert_allclose(permuted.weights, base.weights[perm], atol=1e-12)
        np.testing.assert_allclose(permuted.mixture, base.mixture, atol=1e-12)
        assert permuted.capacity_bits == pytest.approx(base.capacity_bits, abs=1e-12)

    def test_duplication_leaves_mixture_and_capacity(self, rng):
        for _ in range(10):
            rows = random_channel(rng, 3, 6)
            dup = np.vstack([rows, rows[1]])
            base = solve(rows, FIXED_POINT)
            extended = solve(dup, FIXED_POINT)
            assert extended.capacity_bits == pytest.approx(base.capacity_bits, abs=1e-9)
            np.testing.assert_allclose(extended.mixture, base.mixture, atol=1e-9)


class TestOracle:
    def test_bsc_grid(self):
        cap, _ = minimax_regret_oracle(np.array([[0.9, 0.1], [0.1, 0.9]]), 0.01)
        assert cap == pytest.approx(BSC_CAPACITY, abs=1e-3)

    def test_identity_three(self):
        cap, _ = minimax_regret_oracle(np.eye(3), 0.01)
        assert cap == pytest.approx(np.log2(3), abs=1e-3)

    def test_z_channel_fine_grid(self):
        cap, weights = minimax_regret_oracle(Z_ROWS, 0.001)
        assert cap == pytest.approx(Z_CAPACITY, abs=1e-3)
        np.testing.assert_allclose(weights, [0.6, 0.4], atol=1e-3)

    def test_refinement_tightens(self, rng):
        rows = random_channel(rng, 3, 5)
        coarse, _ = minimax_regret_oracle(rows, 0.05)
        fine, _ = minimax_regret_oracle(rows, 0.05, refine_to=1e-4)
        assert fine >= coarse - 1e-15
        assert abs(fine - solve(rows, FIXED_POINT).capacity_bits) <= 1e-4

    def test_refuses_large_families(self):
        with pytest.raises(ValidationError):
            minimax_regret_oracle(np.eye(6), 0.1)

    def test_agreement_with_solver(self, rng):
        for _ in range(25):
            rows = random_channel(rng, int(rng.integers(2, 5)), int(rng.integers(2, 7)))
            sol = solve(rows, FIXED_POINT)
            cap, _ = minimax_regret_oracle(rows, 0.01, refine_to=1e-4)
            assert abs(sol.capacity_bits - cap) <= 1e-3
