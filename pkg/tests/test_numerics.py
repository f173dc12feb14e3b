import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from retgan import numerics as nx
from retgan.numerics import AdamState, Rng, Tensor, adam_step, backward, grad_check


def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for p in range(k):
                s += a[i, p] * b[p, j]
            out[i, j] = s
    return out


def central_diff(f, x, eps=1e-5):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + eps
        fp = f(x)
        x[idx] = old - eps
        fm = f(x)
        x[idx] = old
        g[idx] = (fp - fm) / (2 * eps)
    return g


class TestMatmul:
    def test_identity(self):
        out = nx.matmul(np.eye(2), np.array([[1.0, 2], [3, 4]]))
        np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])

    def test_projector(self):
        out = nx.matmul(np.array([[1.0, 0], [0, 0]]), np.array([[5.0, 6], [7, 8]]))
        np.testing.assert_array_equal(out.data, [[5, 6], [0, 0]])

    def test_against_triple_loop(self):
        rng = Rng(3)
        a, b = rng.normal((3, 4)), rng.normal((4, 2))
        np.testing.assert_allclose(nx.matmul(a, b).data, naive_matmul(a, b), atol=1e-12, rtol=0)

    def test_shape_mismatch_names_shapes(self):
        with pytest.raises(nx.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            nx.matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_batched_gradients(self):
        rng = Rng(4)
        a, b = rng.normal((2, 1, 3)), rng.normal((2, 3, 4))
        err = grad_check(lambda p: nx.sum(nx.square(nx.matmul(p["a"], p["b"]))), {"a": a, "b": b})
        assert err < 1e-6


class TestElementwise:
    def test_relu(self):
        np.testing.assert_array_equal(nx.relu(np.array([-1.0, 0.0, 2.0])).data, [0, 0, 2])

    def test_relu_grad_at_zero_is_zero(self):
        x = Tensor(np.array([0.0, 1.0]), requires_grad=True, name="x")
        g = backward(nx.sum(nx.relu(x)), {"x": x})["x"]
        np.testing.assert_array_equal(g, [0.0, 1.0])

    def test_sigmoid_at_zero(self):
        assert nx.sigmoid(0.0).item() == 0.5

    def test_sigmoid_extremes_finite(self):
        out = nx.sigmoid(np.array([-800.0, 800.0])).data
        np.testing.assert_array_equal(out, [0.0, 1.0])

    def test_tanh_gradient_matches_central_differences(self):
        x = Rng(5).uniform(7) * 4 - 2
        t = Tensor(x.copy(), requires_grad=True, name="x")
        analytic = backward(nx.sum(nx.tanh(t)), {"x": t})["x"]
        numeric = central_diff(lambda v: float(np.sum(np.tanh(v))), x.copy())
        np.testing.assert_allclose(analytic, numeric, rtol=1e-6)

    def test_log_domain_error(self):
        with pytest.raises(nx.DomainError):
            nx.log(np.array([1.0, 0.0]))

    def test_no_implicit_broadcasting(self):
        with pytest.raises(nx.ShapeError):
            nx.add(np.ones((2, 3)), np.ones((3,)))

    def test_scalar_broadcast_allowed(self):
        np.testing.assert_array_equal((Tensor(np.ones(3)) * 2.0 + 1.0).data, [3, 3, 3])

    def test_dispatch(self):
        np.testing.assert_array_equal(nx.elementwise("square", np.array([3.0])).data, [9.0])
        np.testing.assert_array_equal(nx.elementwise("sub", np.array([3.0]), np.array([1.0])).data, [2.0])
        with pytest.raises(ValueError):
            nx.elementwise("cube", np.array([1.0]))

    @pytest.mark.parametrize("kind", ["relu", "tanh", "sigmoid", "log", "square", "exp", "abs", "sqrt"])
    def test_unary_gradients(self, kind):
        rng = Rng(11)
        x = rng.uniform((3, 4)) * 4 - 2
        if kind in ("log", "sqrt"):
            x = np.abs(x) + 0.1
        err = grad_check(lambda p: nx.sum(nx.elementwise(kind, p["x"])), {"x": x})
        assert err < 1e-4

    @pytest.mark.parametrize("kind", ["add", "sub", "mul", "div"])
    def test_binary_gradients(self, kind):
        rng = Rng(12)
        a = rng.uniform((3, 2)) * 4 - 2
        b = rng.uniform((3, 2)) * 2 + 0.5
        err = grad_check(lambda p: nx.sum(nx.square(nx.elementwise(kind, p["a"], p["b"]))), {"a": a, "b": b})
        assert err < 1e-4


class TestReduce:
    def test_mean(self):
        assert nx.mean(np.array([1.0, 2.0, 3.0])).item() == 2.0

    def test_sum_axis0(self):
        np.testing.assert_array_equal(nx.reduce("sum", np.array([[1.0, 2], [3, 4]]), axis=0).data, [4, 6])

    def test_mean_gradient(self):
        x = Tensor(np.arange(5.0), requires_grad=True, name="x")
        np.testing.assert_allclose(backward(nx.mean(x), {"x": x})["x"], np.full(5, 0.2))

    def test_axis_out_of_range(self):
        with pytest.raises(nx.ShapeError):
            nx.sum(np.ones((2, 2)), axis=2)

    def test_log_softmax_gradient(self):
        x = Rng(2).normal((3, 5))
        w = Rng(3).normal((3, 5))
        err = grad_check(lambda p: nx.sum(nx.mul(nx.log_softmax(p["x"], axis=1), w)), {"x": x})
        assert err < 1e-6

    def test_shape_ops_gradients(self):
        rng = Rng(9)
        a, b, c = rng.normal((2, 3)), rng.normal((2, 2)), rng.normal((1, 3))

        def f(p):
            cat = nx.concat([p["a"], p["b"]], axis=1)
            tiled = nx.expand(p["c"], (2, 3))
            mixed = nx.concat([nx.add(p["a"], tiled), p["b"]], axis=1)
            return nx.sum(nx.square(nx.mul(nx.reshape(cat, (5, 2)), nx.reshape(mixed, (5, 2)))))
        assert grad_check(f, {"a": a, "b": b, "c": c}) < 1e-6


class TestBackward:
    def test_square(self):
        x = Tensor(np.array(3.0), requires_grad=True, name="x")
        assert backward(nx.square(x), {"x": x})["x"] == pytest.approx(6.0)

    def test_linear_columnwise_sums(self):
        a = Rng(1).normal((4, 3))
        x = Tensor(Rng(2).normal((3, 1)), requires_grad=True, name="x")
        g = backward(nx.sum(nx.matmul(a, x)), {"x": x})["x"]
        np.testing.assert_allclose(g[:, 0], a.sum(axis=0), atol=1e-14)

    def test_unreached_parameter_gets_zero(self):
        x = Tensor(np.ones(2), requires_grad=True, name="x")
        y = Tensor(np.ones(3), requires_grad=True, name="y")
        g = backward(nx.sum(x), {"x": x, "y": y})
        np.testing.assert_array_equal(g["y"], np.zeros(3))

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            backward(nx.square(x))

    def test_shared_subexpression_visited_once(self):
        x = Tensor(np.array([2.0]), requires_grad=True, name="x")
        y = nx.square(x)
        g = backward(nx.sum(nx.add(y, y)), {"x": x})["x"]
        assert g[0] == pytest.approx(8.0)

    def test_mlp_against_independent_fd(self):
        rng = Rng(21)
        shapes = {"w0": (5, 8), "b0": (8,), "w1": (8, 6), "b1": (6,), "w2": (6, 1), "b2": (1,)}
        params = {k: rng.uniform(s) * 4 - 2 for k, s in shapes.items()}
        x = rng.uniform((4, 5)) * 4 - 2

        def forward_np(p):
            h = np.maximum(x @ p["w0"] + p["b0"], 0)
            h = np.maximum(h @ p["w1"] + p["b1"], 0)
            return float(np.sum(np.tanh(h @ p["w2"] + p["b2"])))

        graph = nx.Graph()
        t = graph.leaves(params)
        h = nx.relu(nx.linear(x, t["w0"], t["b0"]))
        h = nx.relu(nx.linear(h, t["w1"], t["b1"]))
        loss = nx.sum(nx.tanh(nx.linear(h, t["w2"], t["b2"])))
        assert loss.item() == pytest.approx(forward_np(params), abs=1e-12)
        grads = graph.backward(loss)
        for name in shapes:
            def f(v, name=name):
                return forward_np({**params, name: v})
            numeric = central_diff(f, params[name].copy())
            denom = np.maximum(np.maximum(np.abs(numeric), np.abs(grads[name])), 1e-6)
            assert np.max(np.abs(grads[name] - numeric) / denom) < 1e-4, name

    def test_linearity(self):
        rng = Rng(8)
        x0 = rng.normal(6)
        x = Tensor(x0, requires_grad=True, name="x")
        f = nx.sum(nx.tanh(x))
        g = nx.sum(nx.square(x))
        gf = backward(f, {"x": x})["x"]
        gg = backward(g, {"x": x})["x"]
        combo = backward(nx.add(nx.mul(nx.sum(nx.tanh(x)), 2.5), nx.mul(nx.sum(nx.square(x)), -0.75)), {"x": x})["x"]
        np.testing.assert_allclose(combo, 2.5 * gf - 0.75 * gg, atol=1e-13)

    def test_determinism(self):
        rng = Rng(8)
        w = rng.normal((10, 10))
        x = rng.normal((3, 10))
        a = nx.tanh(nx.matmul(x, w)).data
        b = nx.tanh(nx.matmul(x, w)).data
        assert a.tobytes() == b.tobytes()


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_backward_matches_fd_property(seed):
    rng = Rng(seed)
    a = rng.uniform((3, 4)) * 4 - 2
    b = rng.uniform((4, 2)) * 4 - 2

    def f(p):
        return nx.mean(nx.sigmoid(nx.mul(nx.tanh(nx.matmul(p["a"], p["b"])), 1.5)))
    assert grad_check(f, {"a": a, "b": b}) < 1e-4


class TestAdam:
    def test_first_step_is_lr_sign(self):
        p = {"x": np.array([1.0, -2.0, 3.0])}
        g = {"x": np.array([0.3, -5.0, 1e-3])}
        st_ = AdamState(lr=0.01, eps=1e-12)
        adam_step(p, g, st_)
        np.testing.assert_allclose(p["x"], np.array([1.0, -2.0, 3.0]) - 0.01 * np.sign(g["x"]), atol=1e-9)
        assert st_.step == 1

    def test_zero_gradient_identity_any_state(self):
        p = {"x": np.array([1.0, 2.0])}
        st_ = AdamState(lr=0.1)
        adam_step(p, {"x": np.array([1.0, 1.0])}, st_)
        before = p["x"].copy()
        adam_step(p, {"x": np.zeros(2)}, st_)
        np.testing.assert_array_equal(p["x"], before)
        assert st_.step == 2

    def test_nan_rejected_naming_parameter(self):
        p = {"w": np.ones(2), "b": np.ones(1)}
        st_ = AdamState()
        with pytest.raises(nx.NonFiniteGradient, match="'b'"):
            adam_step(p, {"w": np.ones(2), "b": np.array([np.nan])}, st_)
        np.testing.assert_array_equal(p["w"], np.ones(2))
        assert st_.step == 0

    def test_scalar_oracle_quadratic(self):
        # hand-rolled scalar Adam on f(x) = x^2
        lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
        x, m, v = 1.0, 0.0, 0.0
        for t in range(1, 6):
            g = 2 * x
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            x -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)

        p = {"x": np.array([1.0])}
        st_ = AdamState(lr=lr, beta1=b1, beta2=b2, eps=eps)
        for _ in range(5):
            adam_step(p, {"x": 2 * p["x"]}, st_)
        assert abs(p["x"][0] - x) < 1e-12


class TestGradCheck:
    def test_quadratic_form(self):
        rng = Rng(0)
        a = rng.normal((4, 4))
        q = a @ a.T
        err = grad_check(lambda p: nx.sum(nx.mul(p["x"], nx.matmul(q, p["x"]))), {"x": rng.normal((4, 1))})
        assert err < 1e-8

    def test_constant_function(self):
        rep = nx.grad_check_report(lambda p: nx.Tensor(np.array(3.0)), {"x": np.ones(3)})
        assert rep.max_rel_err == 0.0

    def test_large_param_subsampled(self):
        rep = nx.grad_check_report(lambda p: nx.sum(nx.tanh(p["x"])), {"x": Rng(1).normal(1000)}, max_coords=10)
        assert rep.checked == 10
        assert rep.max_rel_err < 1e-6


class TestRng:
    def test_reproducible_and_named(self):
        assert Rng(7, "a").uniform(5).tobytes() == Rng(7, "a").uniform(5).tobytes()
        assert Rng(7, "a").uniform(5).tobytes() != Rng(7, "b").uniform(5).tobytes()

    def test_state_roundtrip(self):
        r = Rng(3)
        r.normal(11)
        key, ctr = r.state()
        expect = r.uniform(4)
        r2 = Rng(0, key=key, counter=ctr)
        assert r2.uniform(4).tobytes() == expect.tobytes()

    def test_normal_moments(self):
        z = Rng(5).normal(200_000)
        assert abs(z.mean()) < 0.01
        assert abs(z.std() - 1) < 0.01

    def test_integers_in_range(self):
        x = Rng(5).integers(7, 10_000)
        assert x.min() == 0 and x.max() == 6


class TestSerialize:
    def test_roundtrip(self, tmp_path):
        data = {"a/w": Rng(0).normal((3, 4)), "meta/step": np.array([5], dtype=np.uint32),
                "s": np.array(2.5)}
        nx.save_tensors(tmp_path / "x.ntck", data)
        back = nx.load_tensors(tmp_path / "x.ntck")
        assert list(back) == list(data)
        for k in data:
            np.testing.assert_array_equal(back[k], data[k])
        raw = (tmp_path / "x.ntck").read_bytes()
        assert raw[:4] == b"NTCK"
