import math

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.integrate import trapezoid

import tensor as T
from layers import MLP
from tensor import Tensor, grad, parameters, value_and_grad
from utils import NumericalError, ShapeError


class TestGrad:
    def test_square(self):
        x = Tensor(3.0, requires_grad=True)
        (g,) = grad(x * x, [x])
        assert float(g) == pytest.approx(6.0)

    def test_softplus_at_zero(self):
        x = Tensor(np.zeros(4), requires_grad=True)
        (g,) = grad(T.sum(T.softplus(x)), [x])
        assert_allclose(g, 0.5)

    def test_unreachable_param_gets_zeros(self):
        P = parameters({"a": np.ones(3), "b": np.ones((2, 2))})
        g = grad(T.sum(P["a"] * 2.0), P)
        assert_allclose(g["a"], 2.0)
        assert_allclose(g["b"], np.zeros((2, 2)))

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ShapeError):
            grad(x * 2.0, [x])

    def test_reused_node_accumulates(self):
        x = Tensor(2.0, requires_grad=True)
        y = x * x
        (g,) = grad(y + y * x, [x])
        # d/dx (x^2 + x^3) = 2x + 3x^2
        assert float(g) == pytest.approx(4.0 + 12.0)

    def test_nan_in_forward_reports_op(self):
        x = Tensor(-1.0, requires_grad=True)
        with pytest.raises(NumericalError) as info:
            T.log(x)
        assert info.value.op == "log"

    def test_mlp_matches_finite_differences(self, rng, fd, rel_err):
        mlp = MLP("net", 3, [5], 1)
        arrays = mlp.init(rng)
        x = rng.uniform(-2, 2, size=(4, 3))

        def loss(P):
            return T.sum(T.tanh(mlp(P, Tensor(x))))

        _, analytic = value_and_grad(loss, arrays)
        numeric = fd(lambda a: float(loss({k: Tensor(v) for k, v in a.items()}).data), arrays, eps=1e-5)
        for name in arrays:
            assert rel_err(analytic[name], numeric[name]) < 1e-4, name

    def test_deterministic(self, rng):
        arrays = {"w": rng.normal(size=(3, 3))}
        x = rng.normal(size=(2, 3))

        def loss(P):
            return T.sum(T.softmax(T.matmul(Tensor(x), P["w"])) * 3.0)

        assert value_and_grad(loss, arrays)[1]["w"].tobytes() == value_and_grad(loss, arrays)[1]["w"].tobytes()


OPS = {
    "exp": lambda a: T.exp(a),
    "tanh": lambda a: T.tanh(a),
    "sigmoid": lambda a: T.sigmoid(a),
    "softplus": lambda a: T.softplus(a),
    "relu": lambda a: T.relu(a + 0.05),
    "square": lambda a: T.square(a),
    "pow": lambda a: T.pow(a * a + 1.0, 1.5),
    "sqrt": lambda a: T.sqrt(a * a + 1.0),
    "log": lambda a: T.log(a * a + 1.0),
    "div": lambda a: a / (a * a + 1.0),
    "softmax": lambda a: T.softmax(a, axis=-1) * np.arange(1.0, 4.0),
    "log_softmax": lambda a: T.log_softmax(a, axis=-1) * np.arange(1.0, 4.0),
    "logsumexp": lambda a: T.logsumexp(a, axis=0),
    "cumsum": lambda a: T.square(T.cumsum(a, axis=-1)),
    "mean": lambda a: T.mean(T.square(a), axis=0),
    "swapaxes": lambda a: T.swapaxes(a, 0, 1) * np.arange(4.0),
    "concat_split": lambda a: T.square(T.concat(T.split(a, [1, 2], axis=-1)[::-1], axis=-1)),
    "getitem": lambda a: T.square(a[1:, ::2]),
    "take_along": lambda a: T.square(T.take_along(a, np.array([[0], [2], [1], [1]]), axis=-1)),
    "where": lambda a: T.where(a.data > 0, T.square(a), T.exp(a)),
    "matmul": lambda a: T.matmul(a, T.swapaxes(a, 0, 1)),
}


class TestOpGradients:
    @pytest.mark.parametrize("name", sorted(OPS))
    def test_matches_finite_differences(self, name, fd, rel_err):
        rng = np.random.default_rng(7)
        arrays = {"a": rng.uniform(-2, 2, size=(4, 3))}
        op = OPS[name]

        def loss(P):
            return T.sum(op(P["a"]))

        _, analytic = value_and_grad(loss, arrays)
        # the where mask is fixed by the unperturbed input
        if name == "where":
            mask = arrays["a"] > 0

            def loss_fixed(a):
                x = a["a"]
                return float(np.sum(np.where(mask, x * x, np.exp(x))))

            numeric = fd(loss_fixed, arrays, eps=1e-5)
        else:
            numeric = fd(lambda a: float(loss({k: Tensor(v) for k, v in a.items()}).data), arrays, eps=1e-5)
        assert rel_err(analytic["a"], numeric["a"]) < 1e-4

    def test_take_embedding_gradient_scatters(self):
        P = parameters({"table": np.arange(6.0).reshape(3, 2)})
        out = T.take(P["table"], np.array([[0, 2], [2, 2]]))
        assert out.shape == (2, 2, 2)
        g = grad(T.sum(out), P)["table"]
        assert_allclose(g, [[1, 1], [0, 0], [3, 3]])


class TestShapes:
    def test_matmul_shape(self):
        out = T.matmul(np.ones((2, 3)), np.ones((3, 4)))
        assert out.shape == (2, 4)

    def test_matmul_mismatch_raises(self):
        with pytest.raises(ShapeError):
            T.matmul(np.ones((2, 3)), np.ones((2, 4)))

    def test_matmul_vector_raises(self):
        with pytest.raises(ShapeError):
            T.matmul(np.ones(3), np.ones((3, 2)))

    def test_broadcast_mismatch_raises(self):
        with pytest.raises(ShapeError):
            T.add(np.ones((2, 3)), np.ones((4,)))

    def test_reshape_mismatch_raises(self):
        with pytest.raises(ShapeError):
            T.reshape(np.ones(6), (4, 2))

    def test_item(self):
        assert Tensor(np.array([[2.5]])).item() == 2.5
        with pytest.raises(ShapeError):
            Tensor(np.ones(3)).item()

    def test_tensor_is_read_only(self):
        t = Tensor(np.ones(3))
        with pytest.raises(ValueError):
            t.data[0] = 2.0


class TestGaussianLogDensity:
    def test_standard_normal_at_mode(self):
        out = T.gaussian_log_density(np.zeros(1), np.zeros(1), np.zeros(1))
        assert float(out.data) == pytest.approx(-0.5 * math.log(2 * math.pi))

    def test_two_dims(self):
        out = T.gaussian_log_density(np.zeros(2), np.zeros(2), np.zeros(2))
        assert float(out.data) == pytest.approx(-math.log(2 * math.pi))

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            T.gaussian_log_density(np.zeros(2), np.zeros(3), np.zeros(2))

    def test_integrates_to_one_per_dimension(self, rng):
        # separable: each of the 5 one-dimensional factors integrates to 1
        mean = rng.normal(size=5)
        log_std = rng.uniform(-0.5, 0.5, size=5)
        total = 1.0
        for j in range(5):
            grid = np.linspace(mean[j] - 12, mean[j] + 12, 20001)
            dens = np.exp(T.gaussian_log_density(grid[:, None], mean[j:j + 1], log_std[j:j + 1]).data)
            total *= trapezoid(dens, grid)
        assert total == pytest.approx(1.0, abs=1e-3)
