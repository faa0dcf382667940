import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from avalign import numgrad as ng


def finite(shape, lo=-2.0, hi=2.0):
    return arrays(np.float64, shape, elements=st.floats(lo, hi, allow_nan=False, allow_infinity=False))


def nonzero_rows(shape):
    return finite(shape).filter(lambda a: np.all(np.linalg.norm(a, axis=-1) > 0.1))


class TestCosine:
    def test_self(self):
        u = np.array([0.3, -1.2, 2.0])
        assert ng.cosine_sim(u, u).item() == pytest.approx(1.0, abs=1e-15)

    def test_orthogonal(self):
        assert ng.cosine_sim([1.0, 0.0], [0.0, 1.0]).item() == 0.0

    def test_positive_scale(self):
        u = np.array([0.3, -1.2, 2.0])
        assert ng.cosine_sim(2 * u, u).item() == pytest.approx(1.0, abs=1e-15)

    def test_zero_vector(self):
        with pytest.raises(ng.ZeroNormError):
            ng.cosine_sim([0.0, 0.0], [1.0, 0.0])

    @given(nonzero_rows((4,)), nonzero_rows((4,)), st.floats(0.01, 100))
    def test_symmetric_and_scale_invariant(self, u, v, k):
        a = ng.cosine_sim(u, v).item()
        assert a == pytest.approx(ng.cosine_sim(v, u).item(), abs=1e-14)
        assert a == pytest.approx(ng.cosine_sim(k * u, v).item(), abs=1e-12)
        assert -1 - 1e-12 <= a <= 1 + 1e-12


class TestSimilarityMatrix:
    def test_identity_rows(self):
        assert np.allclose(ng.similarity_matrix(np.eye(3), np.eye(3)).value, np.eye(3))

    def test_hand_example(self):
        a = np.array([[1.0, 0.0], [1.0, 1.0]]) / np.array([[1.0], [np.sqrt(2)]])
        s = ng.similarity_matrix(a, np.array([[0.0, 1.0]])).value
        assert s[:, 0] == pytest.approx([0.0, 0.70710678], abs=1e-8)

    def test_zero_row_named(self):
        with pytest.raises(ng.ZeroNormError, match=r"\(1,\)"):
            ng.similarity_matrix(np.array([[1.0, 0.0], [0.0, 0.0]]), np.eye(2))

    @given(nonzero_rows((3, 4)))
    def test_self_similarity_symmetric(self, a):
        s = ng.similarity_matrix(a, a).value
        assert np.allclose(s, s.T, atol=1e-14)
        assert np.all(np.abs(s) <= 1 + 1e-12)


class TestDetach:
    def test_constant_factor_rule(self):
        x = ng.parameter(3.0)
        (ng.detach(x) * x).backward()
        assert x.grad == 3.0

    def test_value_preserved(self):
        x = ng.parameter([1.5, -2.0])
        assert np.array_equal(ng.detach(x).value, x.value)

    def test_replacing_by_constant_keeps_gradients(self):
        rng = np.random.default_rng(0)
        a0, b0 = rng.standard_normal((3, 2)), rng.standard_normal((3, 2))

        def loss(a, b, target):
            return ng.tsum((ng.similarity_matrix(a, b) - target) ** 2)

        a, b = ng.parameter(a0), ng.parameter(b0)
        loss(a, b, ng.detach(ng.similarity_matrix(a, a))).backward()
        a2, b2 = ng.parameter(a0), ng.parameter(b0)
        const = ng.similarity_matrix(a0, a0).value
        loss(a2, b2, const).backward()
        assert np.array_equal(a.grad, a2.grad) and np.array_equal(b.grad, b2.grad)


class TestBackward:
    def test_diamond_visits_shared_node_once(self):
        x = ng.parameter(2.0)
        y = x * x  # shared by both branches
        (y + y * 3.0).backward()
        assert x.grad == pytest.approx(4 * 2.0 * 2.0)

    def test_deterministic(self):
        rng = np.random.default_rng(1)
        a0 = rng.standard_normal((2, 3, 4))

        def grad():
            a = ng.parameter(a0)
            ng.mean(ng.softmax(a @ ng.swapaxes(a)) * ng.tanh(a @ np.ones((4, 3)))).backward()
            return a.grad

        assert np.array_equal(grad(), grad())

    def test_broadcast_adjoint_summed(self):
        a = ng.parameter(np.ones((2, 3)))
        b = ng.parameter(np.ones(3))
        ng.tsum(a * b).backward()
        assert np.array_equal(b.grad, [2.0, 2.0, 2.0])


# scalar-valued probes of each exported op, checked against finite differences
OPS = {
    "add": lambda p: ng.tsum((p["a"] + p["b"]) ** 2),
    "sub": lambda p: ng.tsum((p["a"] - p["b"]) ** 3),
    "mul": lambda p: ng.tsum(p["a"] * p["b"] * p["a"]),
    "div": lambda p: ng.tsum(p["a"] / (p["b"] * p["b"] + 1.0)),
    "matmul": lambda p: ng.tsum(ng.tanh(p["a"] @ ng.swapaxes(p["b"]))),
    "exp_log": lambda p: ng.tsum(ng.log(ng.exp(p["a"]) + ng.exp(p["b"]))),
    "sqrt": lambda p: ng.tsum(ng.sqrt(p["a"] * p["a"] + 1.0) * p["b"]),
    "sigmoid": lambda p: ng.tsum(ng.sigmoid(p["a"] * 3.0) * p["b"]),
    "softmax": lambda p: ng.tsum(ng.softmax(p["a"], axis=-1) * p["b"]),
    "mean_reshape": lambda p: ng.mean(ng.reshape(p["a"], (-1,)) * ng.reshape(p["b"], (-1,))),
    "concat_getitem": lambda p: ng.tsum(ng.concat([p["a"], p["b"]], axis=0)[1:4] ** 2),
    "amax": lambda p: ng.tsum(ng.amax(p["a"] + p["b"], axis=1)),
    "cosine": lambda p: ng.cosine_sim(ng.reshape(p["a"], (-1,)), ng.reshape(p["b"], (-1,))),
    "similarity": lambda p: ng.tsum(ng.similarity_matrix(p["a"], p["b"]) ** 2),
}


class TestGradCheck:
    def test_square(self):
        r = ng.grad_check(lambda p: p["x"] * p["x"], np.array(1.0), eps=1e-5)
        assert r.max_rel_error < 1e-8

    def test_detached_only(self):
        r = ng.grad_check(lambda p: ng.tsum(ng.detach(p["x"]) * 2.0), np.array([1.0, 2.0]))
        assert np.all(r.analytic["x"] == 0) and np.all(r.numeric["x"] == 0)

    def test_mtsc_squared(self):
        from avalign.losses import LossConfig, mtsc_loss

        rng = np.random.default_rng(5)
        params = {"a": rng.standard_normal((2, 3, 4)), "b": rng.standard_normal((2, 3, 4))}
        r = ng.grad_check(lambda p: mtsc_loss(p["a"], p["b"], LossConfig()), params)
        assert r.max_rel_error < 1e-5

    def test_non_finite_raises(self):
        with pytest.raises(FloatingPointError):
            ng.grad_check(lambda p: ng.tsum(ng.log(p["x"])), np.array([0.0, 1.0]), eps=1e-3)

    def test_extended_precision_matches_double(self):
        rng = np.random.default_rng(2)
        params = {"a": rng.standard_normal((2, 3)), "b": rng.standard_normal((2, 3))}
        wide = ng.grad_check(OPS["softmax"], params, eps=1e-4, order=4, numeric_dtype=np.longdouble)
        narrow = ng.grad_check(OPS["softmax"], params, eps=1e-4, order=4)
        assert wide.max_rel_error < 1e-9
        assert np.allclose(wide.numeric["a"], narrow.numeric["a"], rtol=1e-8, atol=1e-10)

    def test_precision_context_restores(self):
        with ng.precision(np.longdouble):
            assert ng.as_tensor(1.0).value.dtype == np.longdouble
        assert ng.as_tensor(1.0).value.dtype == np.float64

    @pytest.mark.parametrize("name", sorted(OPS))
    @settings(max_examples=10, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_op_gradients(self, name, seed):
        rng = np.random.default_rng(seed)
        params = {"a": rng.uniform(0.2, 1.5, (3, 4)) * rng.choice([-1, 1], (3, 4)), "b": rng.uniform(0.2, 1.5, (3, 4))}
        r = ng.grad_check(OPS[name], params, eps=1e-4, order=4, numeric_dtype=np.longdouble)
        assert r.max_rel_error <= 1e-5, r.worst
