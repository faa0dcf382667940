import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avalign import numgrad as ng
from avalign.losses import (
    FULL,
    LITERAL,
    PART,
    SQUARED,
    LossConfig,
    TimeLagKernel,
    mtsc,
    mtsc_loss,
    nt_xent,
    time_lag_kernel,
    weighted_nt_xent,
)

ONES = TimeLagKernel(exponent=0.0)  # K == 1 everywhere


def with_sims(S):
    """Unit rows z1, z2 in R^(2n) whose pairwise cosine table is exactly S (entries in [0, 1])."""
    n = S.shape[0]
    z1 = np.zeros((n, 2 * n))
    z1[np.arange(n), np.arange(n)] = 1.0
    z2 = np.zeros((n, 2 * n))
    z2[:, :n] = S.T
    z2[:, n:] = np.diag(np.sqrt(1.0 - np.sum(S.T**2, axis=1)))
    return z1, z2


class TestKernel:
    def test_lag_one(self):
        assert time_lag_kernel(3, 4) == 1.0

    def test_lag_two(self):
        assert time_lag_kernel(0, 2) == 0.03125

    def test_diagonal(self):
        assert time_lag_kernel(5, 5) == 1.0

    def test_outer_factor(self):
        k = TimeLagKernel(outer=lambda d: 2.0 if d > 0 else 1.0)
        assert (k(0, 2), k(2, 0)) == (2 / 32, 1 / 32)

    def test_negative_index(self):
        with pytest.raises(ValueError):
            time_lag_kernel(-1, 0)

    @given(st.integers(0, 20), st.integers(0, 20), st.integers(0, 20))
    def test_symmetric_and_non_increasing(self, i, j, k):
        K = TimeLagKernel()
        assert K(i, j) == K(j, i)
        if abs(i - j) <= abs(i - k):
            assert K(i, j) >= K(i, k)


class TestNtXent:
    def test_orthogonal_pairs(self):
        assert nt_xent(*with_sims(np.zeros((2, 2))), 1.0).loss == pytest.approx(0.0, abs=1e-15)

    def test_positive_pair_aligned(self):
        assert nt_xent(*with_sims(np.eye(2)), 1.0).loss == pytest.approx(-1.0, abs=1e-14)

    def test_half_temperature(self):
        assert nt_xent(*with_sims(np.eye(2)), 0.5).loss == pytest.approx(-2.0, abs=1e-14)

    def test_needs_two_rows(self):
        with pytest.raises(ValueError):
            nt_xent(np.ones((1, 2)), np.ones((1, 2)))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000))
    def test_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        n, tau = int(rng.integers(2, 6)), float(rng.uniform(0.1, 2))
        z1, z2 = rng.standard_normal((n, 3)), rng.standard_normal((n, 3))
        cos = lambda u, v: float(u @ v / (np.linalg.norm(u) * np.linalg.norm(v)))
        terms = []
        for i in range(n):
            denom = math.fsum(math.exp(cos(z1[i], z2[k]) / tau) for k in range(n) if k != i)
            terms.append(-math.log(math.exp(cos(z1[i], z2[i]) / tau) / denom))
        assert nt_xent(z1, z2, tau).loss == pytest.approx(sum(terms) / n, rel=1e-12)


class TestWeightedNtXent:
    def test_unit_kernel_reduces_exactly(self):
        rng = np.random.default_rng(0)
        z1, z2 = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
        a, b = nt_xent(z1, z2, 0.7), weighted_nt_xent(z1, z2, 0.7, ONES)
        assert a.loss == b.loss
        assert np.array_equal(a.grad_1, b.grad_1) and np.array_equal(a.grad_2, b.grad_2)

    @pytest.mark.parametrize("kernel", [TimeLagKernel(), TimeLagKernel(exponent=1.0, diagonal_value=3.0), ONES])
    def test_zero_sims_any_kernel(self, kernel):
        assert weighted_nt_xent(*with_sims(np.zeros((2, 2))), 1.0, kernel).loss == pytest.approx(0.0, abs=1e-15)
        # each denominator holds N - 1 unit terms
        assert weighted_nt_xent(*with_sims(np.zeros((4, 4))), 1.0, kernel).loss == pytest.approx(np.log(3.0), rel=1e-14)

    def test_all_sims_one(self):
        z = np.ones((3, 2))
        K = TimeLagKernel().matrix(3)
        expected = -1.0 + np.mean([math.log(sum(math.exp(K[i, k]) for k in range(3) if k != i)) for i in range(3)])
        assert weighted_nt_xent(z, z, 1.0).loss == pytest.approx(expected, rel=1e-14)


class TestMtsc:
    z = np.tile([[0.6, 0.8]], (3, 1))

    def test_squared_full(self):
        assert mtsc(self.z, self.z, LossConfig(mode=SQUARED)).loss == pytest.approx(2 / 9 * (31 / 32) ** 2, rel=1e-14)

    def test_literal_full(self):
        assert mtsc(self.z, self.z, LossConfig(mode=LITERAL)).loss == pytest.approx(2 / 9 * (31 / 32), rel=1e-14)

    def test_part_literal_zero(self):
        assert mtsc(self.z, self.z, LossConfig(mode=LITERAL, scope=PART)).loss == pytest.approx(0.0, abs=1e-15)

    def test_zero_row(self):
        with pytest.raises(ng.ZeroNormError):
            mtsc(np.array([[1.0, 0.0], [0.0, 0.0]]), np.ones((2, 2)))

    def test_target_blocks_gradient_to_first_input(self):
        # with phi2 fixed, only the cross term moves phi1
        rng = np.random.default_rng(3)
        a, b = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
        r = mtsc(a, b, LossConfig(mode=SQUARED))
        target = ng.similarity_matrix(a, a).value * TimeLagKernel().matrix(4)
        p = ng.parameter(a)
        ng.mean((ng.similarity_matrix(p, b) - target) ** 2).backward()
        assert np.allclose(r.grad_1, p.grad, atol=1e-15)

    def test_literal_gradient_is_mean_cross_similarity(self):
        rng = np.random.default_rng(4)
        a, b = rng.standard_normal((5, 3)), rng.standard_normal((5, 3))
        r = mtsc(a, b, LossConfig(mode=LITERAL))
        q = ng.parameter(b)
        ng.mean(ng.similarity_matrix(a, q)).backward()
        assert np.allclose(r.grad_2, q.grad, atol=1e-15)

    def test_part_is_diagonal_of_full(self):
        # with a zero off-diagonal kernel the full scope still averages the
        # off-diagonal cross similarities, so compare per-pair residuals instead
        rng = np.random.default_rng(5)
        a, b = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
        part = mtsc(a, b, LossConfig(mode=SQUARED, scope=PART)).loss
        S = ng.similarity_matrix(a, b).value
        assert part == pytest.approx(np.mean((np.diag(S) - 1.0) ** 2), rel=1e-13)

    def test_batched_is_mean_of_items(self):
        rng = np.random.default_rng(6)
        a, b = rng.standard_normal((3, 4, 2)), rng.standard_normal((3, 4, 2))
        each = [mtsc(a[k], b[k]).loss for k in range(3)]
        assert mtsc(a, b).loss == pytest.approx(np.mean(each), rel=1e-13)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.sampled_from([FULL, PART]))
    def test_squared_non_negative_zero_iff_matched(self, seed, scope):
        rng = np.random.default_rng(seed)
        a, b = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
        assert mtsc(a, b, LossConfig(mode=SQUARED, scope=scope)).loss >= 0.0
        # identical rows everywhere make every residual vanish under a unit kernel
        same = np.tile(a[:1], (4, 1))
        zero = mtsc(same, same, LossConfig(mode=SQUARED, scope=scope, kernel=ONES)).loss
        assert zero == pytest.approx(0.0, abs=1e-14)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            LossConfig(temperature=0.0)
        with pytest.raises(ValueError):
            LossConfig(mode="cubic")
        with pytest.raises(ValueError):
            LossConfig(scope="half")

    @pytest.mark.parametrize("mode", [LITERAL, SQUARED])
    @pytest.mark.parametrize("scope", [FULL, PART])
    def test_gradients(self, mode, scope):
        rng = np.random.default_rng(7)
        params = {"a": rng.standard_normal((2, 4, 3)), "b": rng.standard_normal((2, 4, 3))}
        cfg = LossConfig(mode=mode, scope=scope)
        r = ng.grad_check(lambda p: mtsc_loss(p["a"], p["b"], cfg), params, eps=1e-4, order=4, numeric_dtype=np.longdouble)
        assert r.max_rel_error <= 1e-5
