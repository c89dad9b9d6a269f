import numpy as np
import pytest

from cicsteer import numerics as nm
from cicsteer.numerics import (AdamState, GraphError, NonFiniteError,
                               ShapeError, Tensor, adam_step,
                               finite_difference_grad, load_checkpoint,
                               save_checkpoint)


def rel_err(a, b):
    return np.abs(a - b).max() / max(np.abs(b).max(), 1e-8)


class TestForwardOps:
    def test_softmax_symmetry(self):
        out = nm.softmax(Tensor([0.0, 0.0, 0.0]))
        assert np.allclose(out.data, 1.0 / 3.0)
        assert abs(out.data.sum() - 1.0) < 1e-12

    def test_softmax_rows_positive_and_normalized(self):
        rng = np.random.default_rng(3)
        out = nm.softmax(Tensor(rng.normal(size=(20, 9)) * 5))
        assert np.all(out.data > 0)
        assert np.all(np.abs(out.data.sum(axis=-1) - 1.0) < 1e-9)

    def test_analytic_points(self):
        assert nm.tanh(Tensor([0.0])).data[0] == 0.0
        assert nm.sigmoid(Tensor([0.0])).data[0] == 0.5
        assert nm.relu(Tensor([-1.0, 2.0])).data.tolist() == [0.0, 2.0]

    def test_conv_shape_arithmetic(self):
        x = Tensor(np.zeros((1, 1, 8, 8)))
        w = Tensor(np.zeros((1, 1, 3, 3)))
        assert nm.conv2d(x, w, stride=2).shape == (1, 1, 3, 3)

    def test_matmul_shape_error_names_shapes(self):
        with pytest.raises(ShapeError, match="matmul"):
            nm.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_conv_kernel_too_large(self):
        with pytest.raises(ShapeError):
            nm.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))

    def test_nonfinite_forward_raises(self):
        with pytest.raises(NonFiniteError):
            nm.add(Tensor([np.inf]), Tensor([1.0]))


class TestBackward:
    def test_sum_of_squares(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        nm.reduce_sum(nm.multiply(x, x)).backward()
        assert np.allclose(x.grad, [2.0, 4.0, 6.0])

    def test_constant_graph_has_empty_gradient_map(self):
        c = Tensor([1.0, 2.0])  # not a parameter
        grads = nm.reduce_sum(c).backward()
        assert grads == {}

    def test_nonscalar_root_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(GraphError):
            nm.multiply(x, x).backward()

    def test_graph_consumed_once(self):
        x = Tensor([1.0], requires_grad=True)
        root = nm.reduce_sum(nm.multiply(x, x))
        root.backward()
        with pytest.raises(GraphError):
            root.backward()

    def test_deterministic_repeat(self):
        def run():
            rng = np.random.default_rng(11)
            x = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
            w = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
            loss = nm.reduce_sum(nm.softmax(nm.tanh(nm.matmul(x, w))))
            loss.backward()
            return loss.data.copy(), x.grad.copy(), w.grad.copy()

        a = run()
        b = run()
        for u, v in zip(a, b):
            assert np.array_equal(u, v)


# central-difference oracle on every differentiable op
OP_CASES = [
    ("add", lambda p: nm.reduce_sum(nm.add(p["a"], p["b"])), {"a": (3, 4), "b": (3, 4)}),
    ("mul", lambda p: nm.reduce_sum(nm.multiply(p["a"], p["b"])), {"a": (3, 4), "b": (3, 4)}),
    ("scale", lambda p: nm.reduce_sum(nm.scale(p["a"], 2.5)), {"a": (5,)}),
    ("matmul", lambda p: nm.reduce_sum(nm.matmul(p["a"], p["b"])), {"a": (3, 4), "b": (4, 2)}),
    ("matmul3d", lambda p: nm.reduce_sum(nm.matmul(p["a"], p["b"])),
     {"a": (2, 3, 4), "b": (2, 4, 2)}),
    ("bias4d", lambda p: nm.reduce_sum(nm.bias_add(p["a"], p["b"])),
     {"a": (2, 3, 4, 4), "b": (3,)}),
    ("bias2d", lambda p: nm.reduce_sum(nm.bias_add(p["a"], p["b"])), {"a": (5, 3), "b": (3,)}),
    ("conv", lambda p: nm.reduce_sum(nm.tanh(nm.conv2d(p["x"], p["w"], stride=2))),
     {"x": (2, 2, 7, 9), "w": (3, 2, 3, 3)}),
    ("tanh", lambda p: nm.reduce_sum(nm.tanh(p["a"])), {"a": (4, 3)}),
    ("sigmoid", lambda p: nm.reduce_sum(nm.sigmoid(p["a"])), {"a": (4, 3)}),
    ("relu", lambda p: nm.reduce_sum(nm.relu(p["a"])), {"a": (7,)}),
    ("softmax", lambda p: nm.reduce_sum(nm.multiply(nm.softmax(p["a"]), p["b"])),
     {"a": (4, 5), "b": (4, 5)}),
    ("log", lambda p: nm.reduce_sum(nm.log(nm.sigmoid(p["a"]))), {"a": (6,)}),
    ("mean", lambda p: nm.reduce_mean(nm.multiply(p["a"], p["a"])), {"a": (3, 5)}),
    ("sum_axis", lambda p: nm.reduce_sum(nm.tanh(nm.reduce_sum(p["a"], axis=1))),
     {"a": (3, 5)}),
    ("reshape", lambda p: nm.reduce_sum(nm.tanh(nm.flatten(p["a"]))), {"a": (2, 3, 4)}),
]


@pytest.mark.parametrize("name,builder,shapes", OP_CASES, ids=[c[0] for c in OP_CASES])
def test_gradient_matches_finite_differences(name, builder, shapes):
    rng = np.random.default_rng(hash(name) % 2**32)
    params = {k: rng.normal(size=s) * 0.7 for k, s in shapes.items()}
    tensors = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
    root = builder(tensors)
    root.backward()
    fd = finite_difference_grad(lambda: builder(
        {k: Tensor(v) for k, v in params.items()}).item(), params, h=1e-5)
    for k, g in fd.items():
        denom = max(np.abs(g).max(), 1e-6)
        assert np.abs(tensors[k].grad - g).max() / denom < 1e-3, k


class TestFiniteDifferenceOracle:
    def test_square(self):
        x = np.array([3.0])
        g = finite_difference_grad(lambda: float(x[0] ** 2), {"x": x})
        assert abs(g["x"][0] - 6.0) < 1e-8

    def test_tanh_at_zero(self):
        x = np.array([0.0])
        g = finite_difference_grad(lambda: float(np.tanh(x[0])), {"x": x})
        assert abs(g["x"][0] - 1.0) < 1e-9

    def test_nonfinite_function_flagged(self):
        x = np.array([0.0])
        with np.errstate(invalid="ignore"):
            with pytest.raises(NonFiniteError):
                finite_difference_grad(lambda: float(np.log(x[0])), {"x": x})


class TestAdam:
    def test_zero_gradient_is_identity(self):
        params = {"w": np.array([1.0, -2.0, 3.0])}
        state = AdamState(params)
        adam_step(params, {"w": np.zeros(3)}, state)
        assert np.array_equal(params["w"], [1.0, -2.0, 3.0])
        assert state.t == 1

    def test_first_step_magnitude_is_lr(self):
        # bias-corrected moments cancel at t=1 when eps is negligible
        params = {"w": np.array([0.5])}
        state = AdamState(params)
        adam_step(params, {"w": np.array([1.0])}, state)
        assert abs((0.5 - params["w"][0]) - state.lr) < 1e-10

    def test_constant_gradient_monotone(self):
        params = {"w": np.array([0.5])}
        state = AdamState(params)
        history = [params["w"][0]]
        for _ in range(2):
            adam_step(params, {"w": np.array([1.0])}, state)
            history.append(params["w"][0])
        assert history[0] > history[1] > history[2]

    def test_shape_mismatch(self):
        params = {"w": np.zeros(3)}
        state = AdamState(params)
        with pytest.raises(ShapeError):
            adam_step(params, {"w": np.zeros(4)}, state)

    def test_nonfinite_gradient(self):
        params = {"w": np.zeros(2)}
        state = AdamState(params)
        with pytest.raises(NonFiniteError):
            adam_step(params, {"w": np.array([np.nan, 0.0])}, state)

    def test_paper_hyperparameters(self):
        state = AdamState({})
        assert state.beta1 == 0.70
        assert state.beta2 == 0.85
        assert state.lr == 2e-4


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(5)
        arrays = {"conv0.w": rng.normal(size=(4, 1, 3, 3)),
                  "shared.b": rng.normal(size=(16,))}
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, arrays)
        loaded = load_checkpoint(path)
        assert set(loaded) == set(arrays)
        for k in arrays:
            assert np.array_equal(loaded[k], arrays[k])

    def test_magic_string(self, tmp_path):
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, {"w": np.zeros(2)})
        assert open(path, "rb").read(9) == b"CICSTEER1"

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOTACKPT\n[]\n")
        with pytest.raises(ValueError):
            load_checkpoint(path)
