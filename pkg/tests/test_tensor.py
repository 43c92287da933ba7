import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from hqbackdoor import tensor as T
from hqbackdoor.gradcheck import check_function

from conftest import numeric_grad, rel_err


def naive_conv(x, k, b, stride=1, padding=0):
    c_in, h, w = x.shape
    c_out, _, kh, kw = k.shape
    xp = np.zeros((c_in, h + 2 * padding, w + 2 * padding))
    xp[:, padding:padding + h, padding:padding + w] = x
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((c_out, ho, wo))
    for o in range(c_out):
        for i in range(ho):
            for j in range(wo):
                acc = b[o]
                for c in range(c_in):
                    for u in range(kh):
                        for v in range(kw):
                            acc += k[o, c, u, v] * xp[c, i * stride + u, j * stride + v]
                out[o, i, j] = acc
    return out


class TestConv2d:
    def test_ones_scaled(self):
        out = T.conv2d(np.ones((1, 3, 3)), np.full((1, 1, 1, 1), 2.0), np.zeros(1))
        np.testing.assert_array_equal(out.data, np.full((1, 3, 3), 2.0))

    def test_dot_product(self):
        out = T.conv2d(np.array([[[1.0, 2], [3, 4]]]), np.array([[[[1.0, 0], [0, 1]]]]), np.zeros(1))
        assert out.shape == (1, 1, 1)
        assert out.data[0, 0, 0] == 5.0

    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 0), (2, 1), (3, 2)])
    def test_matches_loop_oracle(self, rng, stride, padding):
        x = rng.normal(size=(3, 8, 8))
        k = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        out = T.conv2d(x, k, b, stride=stride, padding=padding)
        np.testing.assert_allclose(out.data, naive_conv(x, k, b, stride, padding), atol=1e-12, rtol=0)

    def test_batched_equals_per_sample(self, rng):
        x = rng.normal(size=(5, 2, 6, 6))
        k = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        batched = T.conv2d(x, k, b, padding=1).data
        for n in range(5):
            np.testing.assert_allclose(batched[n], naive_conv(x[n], k, b, 1, 1), atol=1e-12, rtol=0)

    def test_dimension_errors_name_axis(self):
        with pytest.raises(T.DimensionError, match="channels"):
            T.conv2d(np.ones((2, 4, 4)), np.ones((1, 3, 3, 3)), np.zeros(1))
        with pytest.raises(T.DimensionError):
            T.conv2d(np.ones((1, 2, 2)), np.ones((1, 1, 3, 3)), np.zeros(1))
        with pytest.raises(ValueError):
            T.conv2d(np.ones((1, 4, 4)), np.ones((1, 1, 3, 3)), np.zeros(1), stride=0)


class TestLinear:
    def test_identity(self, rng):
        x = rng.normal(size=5)
        np.testing.assert_array_equal(T.linear(x, np.eye(5), np.zeros(5)).data, x)

    def test_small(self):
        assert T.linear([2.0, 3.0], [[1.0, 1.0]], [0.0]).data.tolist() == [5.0]

    def test_matches_loop_oracle(self, rng):
        x = rng.normal(size=16)
        w = rng.normal(size=(10, 16))
        b = rng.normal(size=10)
        ref = np.array([sum(w[i, j] * x[j] for j in range(16)) + b[i] for i in range(10)])
        np.testing.assert_allclose(T.linear(x, w, b).data, ref, atol=1e-12, rtol=0)

    def test_mismatch(self):
        with pytest.raises(T.DimensionError):
            T.linear(np.ones(3), np.ones((2, 4)), np.zeros(2))
        with pytest.raises(T.DimensionError):
            T.linear(np.ones(4), np.ones((2, 4)), np.zeros(3))


class TestRelu:
    def test_values(self):
        assert T.relu([-1.0, 0.0, 2.0]).data.tolist() == [0.0, 0.0, 2.0]
        assert not np.any(T.relu(-np.arange(1.0, 6.0)).data)

    def test_gradient(self):
        x = T.Tensor([-1.0, 2.0], requires_grad=True)
        with T.GradientTape() as tape:
            loss = T.sum(T.relu(x))
        np.testing.assert_array_equal(T.backward(tape, loss, [x])[x], [0.0, 1.0])
        xs = np.array([-1.0, 2.0])
        fd = numeric_grad(lambda: float(np.maximum(xs, 0).sum()), xs, 1e-4)
        np.testing.assert_allclose(fd, [0.0, 1.0], atol=1e-9)

    def test_subgradient_at_zero(self):
        x = T.Tensor([0.0], requires_grad=True)
        with T.GradientTape() as tape:
            loss = T.sum(T.relu(x))
        assert T.backward(tape, loss, [x])[x][0] == 0.0


class TestMaxPool:
    def test_values(self):
        assert T.max_pool2([[[1.0, 2.0], [3.0, 4.0]]]).data.tolist() == [[[4.0]]]
        np.testing.assert_array_equal(T.max_pool2(np.full((2, 4, 6), 3.5)).data, np.full((2, 2, 3), 3.5))

    def test_gradient_routes_to_argmax(self, rng):
        x = T.Tensor(rng.permutation(16).reshape(1, 4, 4).astype(float), requires_grad=True)
        with T.GradientTape() as tape:
            loss = T.sum(T.max_pool2(x))
        g = T.backward(tape, loss, [x])[x]
        xs = x.data.copy()
        fd = numeric_grad(lambda: float(T.max_pool2(xs).data.sum()), xs, 1e-4)
        np.testing.assert_allclose(g, fd, atol=1e-9)
        assert g.sum() == 4 and set(np.unique(g)) == {0.0, 1.0}

    def test_tie_goes_to_first(self):
        x = T.Tensor(np.ones((1, 2, 2)), requires_grad=True)
        with T.GradientTape() as tape:
            loss = T.sum(T.max_pool2(x))
        np.testing.assert_array_equal(T.backward(tape, loss, [x])[x][0], [[1.0, 0.0], [0.0, 0.0]])

    def test_odd(self):
        with pytest.raises(T.DimensionError, match="height"):
            T.max_pool2(np.ones((1, 3, 4)))
        with pytest.raises(T.DimensionError, match="width"):
            T.max_pool2(np.ones((1, 4, 3)))


class TestCrossEntropy:
    def test_uniform(self):
        assert T.softmax_cross_entropy(np.zeros(10), 3).data == pytest.approx(np.log(10), abs=1e-12)
        assert float(T.softmax_cross_entropy(np.zeros(10), 3).data) == pytest.approx(2.302585, abs=1e-6)

    def test_stable(self):
        v = float(T.softmax_cross_entropy(np.array([1000.0, 0.0]), 0).data)
        assert np.isfinite(v) and v == pytest.approx(0.0, abs=1e-12)

    def test_gradient_formula(self, rng):
        z = rng.normal(size=7)
        t = T.Tensor(z, requires_grad=True)
        with T.GradientTape() as tape:
            loss = T.softmax_cross_entropy(t, 4)
        g = T.backward(tape, loss, [t])[t]
        expected = T.softmax(z) - np.eye(7)[4]
        np.testing.assert_allclose(g, expected, atol=1e-15)
        zs = z.copy()
        fd = numeric_grad(lambda: float(T.softmax_cross_entropy(zs, 4).data), zs, 1e-5)
        np.testing.assert_allclose(g, fd, atol=1e-6)

    def test_label_range(self):
        with pytest.raises(ValueError):
            T.softmax_cross_entropy(np.zeros(3), 3)
        with pytest.raises(ValueError):
            T.softmax_cross_entropy(np.zeros(3), -1)

    @given(arrays(np.float64, st.integers(2, 12), elements=st.floats(-50, 50)), st.data())
    def test_non_negative(self, z, data):
        y = data.draw(st.integers(0, len(z) - 1))
        assert float(T.softmax_cross_entropy(z, y).data) >= 0.0


class TestBackward:
    def test_identity(self):
        x = T.Tensor(3.0, requires_grad=True)
        with T.GradientTape() as tape:
            loss = T.mul(x, 1.0)
        assert T.backward(tape, loss, [x])[x] == 1.0

    def test_leaf_loss(self):
        x = T.Tensor(3.0, requires_grad=True)
        tape = T.GradientTape()
        assert T.backward(tape, x, [x])[x] == 1.0

    def test_outer_structure(self, rng):
        W = T.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        x = rng.normal(size=4)
        with T.GradientTape() as tape:
            loss = T.sum(T.linear(x, W, np.zeros(3)))
        g = T.backward(tape, loss, [W])[W]
        np.testing.assert_allclose(g, np.tile(x, (3, 1)), atol=1e-15)

    def test_non_participant_gets_zeros(self):
        a = T.Tensor([1.0, 2.0], requires_grad=True)
        b = T.Tensor([[5.0]], requires_grad=True)
        with T.GradientTape() as tape:
            loss = T.sum(T.mul(a, a))
        g = T.backward(tape, loss, [a, b])
        assert g[b].shape == (1, 1) and g[b][0, 0] == 0.0

    def test_non_scalar_and_reuse(self):
        a = T.Tensor([1.0, 2.0], requires_grad=True)
        with T.GradientTape() as tape:
            out = T.mul(a, 2.0)
            loss = T.sum(out)
        with pytest.raises(T.TapeError):
            T.backward(tape, out, [a])
        T.backward(tape, loss, [a])
        with pytest.raises(T.TapeError):
            T.backward(tape, loss, [a])

    def test_cycle_detected(self):
        a = T.Tensor([1.0], requires_grad=True)
        with T.GradientTape() as tape:
            b = T.mul(a, 2.0)
            c = T.mul(b, 3.0)
            loss = T.sum(c)
        # corrupt the order so a child precedes its parent
        tape.nodes[0], tape.nodes[1] = tape.nodes[1], tape.nodes[0]
        tape._index = {id(n.output): i for i, n in enumerate(tape.nodes)}
        with pytest.raises(T.TapeError, match="cyclic"):
            T.backward(tape, loss, [a])

    def test_topological_order(self, rng):
        x = T.Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        with T.GradientTape() as tape:
            y = T.tanh(T.mul(x, x))
            loss = T.mean(T.add(y, T.sigmoid(x)))
        seen = set()
        for node in tape.nodes:
            for p in node.parents:
                if p._recorded:
                    assert id(p) in seen
            seen.add(id(node.output))

    def test_deterministic(self, rng):
        data = rng.normal(size=(2, 3, 6, 6))
        k = rng.normal(size=(2, 3, 3, 3))
        grads = []
        for _ in range(2):
            kt = T.Tensor(k.copy(), requires_grad=True)
            with T.GradientTape() as tape:
                loss = T.mean(T.relu(T.conv2d(data, kt, np.zeros(2), padding=1)))
            grads.append(T.backward(tape, loss, [kt])[kt])
        assert grads[0].tobytes() == grads[1].tobytes()

    def test_two_conv_cnn_gradcheck(self, rng):
        """Small 2-conv CNN, every parameter against central differences with h = 1e-4."""
        x = rng.uniform(size=(2, 3, 8, 8))
        y = np.array([1, 3])
        arrays = [rng.normal(size=(4, 3, 3, 3)) * 0.5, rng.normal(size=4) * 0.1,
                  rng.normal(size=(4, 4, 3, 3)) * 0.3, rng.normal(size=4) * 0.1,
                  rng.normal(size=(5, 16)) * 0.3, rng.normal(size=5) * 0.1]

        def build(k1, b1, k2, b2, w, b):
            h = T.max_pool2(T.relu(T.conv2d(x, k1, b1, padding=1)))
            h = T.max_pool2(T.relu(T.conv2d(h, k2, b2, padding=1)))
            return T.softmax_cross_entropy(T.linear(T.reshape(h, (2, 16)), w, b), y)

        for err in check_function(build, arrays, h=1e-4):
            assert err <= 1e-3


class TestOpGradients:
    @pytest.mark.parametrize("seed", range(100))
    def test_random_inputs(self, seed):
        """Every primitive op against central differences (h = 1e-4), one seed per case."""
        rng = np.random.default_rng(seed)
        a = rng.normal(size=(2, 3))
        b = rng.normal(size=(2, 3))
        proj = rng.normal(size=(2, 3))
        away = rng.uniform(0.1, 1, size=(2, 3)) * rng.choice([-1, 1], size=(2, 3))
        cases = [
            (lambda u, v: T.sum(T.mul(T.add(u, v), proj)), [a, b]),
            (lambda u, v: T.sum(T.mul(T.sub(u, v), proj)), [a, b]),
            (lambda u, v: T.sum(T.mul(T.mul(u, v), proj)), [a, b]),
            (lambda u: T.sum(T.mul(T.tanh(u), proj)), [a]),
            (lambda u: T.sum(T.mul(T.sigmoid(u), proj)), [a]),
            (lambda u: T.sum(T.mul(T.relu(u), proj)), [away]),
            (lambda u: T.mean(T.mul(T.neg(u), proj)), [a]),
            (lambda u, w, c: T.sum(T.mul(T.linear(u, w, c), rng_proj)), [a, rng.normal(size=(4, 3)), rng.normal(size=4)]),
            (lambda z: T.softmax_cross_entropy(z, np.array([0, 2])), [a]),
            (lambda u, k: T.sum(T.mul(T.conv2d(u, k, np.zeros(2), padding=1), conv_proj)),
             [rng.normal(size=(1, 4, 4)), rng.normal(size=(2, 1, 3, 3))]),
            (lambda u: T.sum(T.mul(T.max_pool2(u), pool_proj)), [rng.permutation(16).reshape(1, 4, 4) / 4.0]),
        ]
        rng_proj = rng.normal(size=(2, 4))
        conv_proj = rng.normal(size=(2, 4, 4))
        pool_proj = rng.normal(size=(1, 2, 2))
        for build, arrs in cases:
            for err in check_function(build, arrs, h=1e-4):
                assert err <= 1e-3


class TestOptimizer:
    def test_zero_lr(self, rng):
        for method in ("sgd", "adam"):
            p = T.Tensor(rng.normal(size=3), requires_grad=True)
            before = p.data.copy()
            T.optimizer_step([p], [rng.normal(size=3)], T.OptimState(learning_rate=0.0, method=method))
            np.testing.assert_array_equal(p.data, before)

    def test_sgd(self):
        p = T.Tensor([1.0], requires_grad=True)
        T.optimizer_step([p], [np.array([2.0])], T.OptimState(learning_rate=0.1, method="sgd"))
        assert p.data[0] == pytest.approx(0.8, abs=1e-15)

    def test_adam_first_step(self):
        lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
        p = T.Tensor([0.5], requires_grad=True)
        state = T.OptimState(learning_rate=lr, method="adam", beta1=b1, beta2=b2, eps=eps)
        T.optimizer_step([p], [np.array([1.0])], state)
        m_hat = (1 - b1) * 1.0 / (1 - b1)
        v_hat = (1 - b2) * 1.0 / (1 - b2)
        expected = 0.5 - lr * m_hat / (np.sqrt(v_hat) + eps)
        assert p.data[0] == pytest.approx(expected, abs=1e-15)
        assert abs(0.5 - p.data[0]) == pytest.approx(lr, rel=1e-6)
        assert state.m[0].shape == p.shape and state.v[0].shape == p.shape

    def test_shape_mismatch(self):
        p = T.Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(T.DimensionError):
            T.optimizer_step([p], [np.ones(3)], T.OptimState())
        with pytest.raises(ValueError):
            T.OptimState(learning_rate=-1.0)
