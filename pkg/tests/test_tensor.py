import numpy as np
import pytest
from hypothesis import given, strategies as st

from cpnet import tensor as T
from cpnet.tensor import Tensor

from oracles import fd_gradient, max_rel_error


def t64(values, requires_grad=False):
    return Tensor(np.asarray(values, dtype=np.float64), requires_grad=requires_grad)


class TestElementwise:
    def test_relu_sign_cases(self):
        out = T.relu(t64([-1.0, 2.0]))
        assert out.data.tolist() == [0.0, 2.0]

    def test_sigmoid_symmetry_point(self):
        assert T.sigmoid(t64([0.0])).data.tolist() == [0.5]

    def test_sigmoid_saturation_stays_strictly_inside_unit_interval(self):
        out = T.sigmoid(Tensor(np.array([-1e4, -50.0, 50.0, 1e4], dtype=np.float32)))
        assert np.all(out.data > 0.0)
        assert np.all(out.data < 1.0)

    def test_add_forward_and_backward(self):
        a = t64([1.0, 2.0], requires_grad=True)
        b = t64([3.0, 4.0], requires_grad=True)
        out = T.add(a, b)
        assert out.data.tolist() == [4.0, 6.0]
        T.reduce_sum(out).backward()
        assert a.grad.tolist() == [1.0, 1.0]
        assert b.grad.tolist() == [1.0, 1.0]

    def test_shape_mismatch_is_descriptive(self):
        with pytest.raises(ValueError, match="shape mismatch"):
            T.add(t64([1.0]), t64([1.0, 2.0]))

    def test_mixed_precision_rejected(self):
        a = Tensor(np.zeros(2, dtype=np.float32))
        b = Tensor(np.zeros(2, dtype=np.float64))
        with pytest.raises(ValueError, match="dtype"):
            T.mul(a, b)


class TestReductions:
    def test_sum(self):
        assert T.reduce_sum(t64([1.0, 2.0, 3.0])).item() == 6.0

    def test_empty_sum_is_zero(self):
        assert T.reduce_sum(Tensor(np.zeros((0,), dtype=np.float64))).item() == 0.0

    def test_sum_backward_broadcasts_ones(self):
        a = Tensor(np.arange(4.0).reshape(2, 2), requires_grad=True)
        T.reduce_sum(a).backward()
        assert a.grad.tolist() == [[1.0, 1.0], [1.0, 1.0]]

    def test_sum_per_sample(self):
        a = Tensor(np.arange(12.0).reshape(2, 3, 2), requires_grad=True)
        out = T.sum_per_sample(a)
        assert out.data.tolist() == [15.0, 51.0]
        T.reduce_sum(T.mul(out, t64([2.0, 3.0]))).backward()
        assert np.all(a.grad[0] == 2.0)
        assert np.all(a.grad[1] == 3.0)


class TestConcat:
    def test_shape_arithmetic(self):
        a = Tensor(np.zeros((1, 3, 4, 4)))
        b = Tensor(np.zeros((1, 3, 4, 4)))
        assert T.concat_channels([a, b]).shape == (1, 6, 4, 4)

    def test_self_concat_duplicates_blockwise(self, rng):
        a = Tensor(rng.normal(size=(2, 3, 2, 2)))
        out = T.concat_channels([a, a])
        assert np.array_equal(out.data[:, :3], a.data)
        assert np.array_equal(out.data[:, 3:], a.data)

    def test_backward_slices_gradient_to_parts(self, rng):
        a = Tensor(rng.normal(size=(1, 3, 2, 2)), requires_grad=True)
        b = Tensor(rng.normal(size=(1, 2, 2, 2)), requires_grad=True)
        out = T.concat_channels([a, b])
        weights = Tensor(np.zeros((1, 5, 2, 2)))
        weights.data[:, :3] = 1.0
        T.reduce_sum(T.mul(out, weights)).backward()
        assert np.all(a.grad == 1.0)
        assert np.all(b.grad == 0.0)

    def test_mismatched_spatial_dims_error(self):
        a = Tensor(np.zeros((1, 1, 4, 4)))
        b = Tensor(np.zeros((1, 1, 2, 2)))
        with pytest.raises(ValueError, match="mismatch"):
            T.concat_channels([a, b])

    @given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31 - 1))
    def test_concat_then_slice_recovers_parts(self, c1, c2, seed):
        rng = np.random.default_rng(seed)
        a = Tensor(rng.normal(size=(2, c1, 3, 3)))
        b = Tensor(rng.normal(size=(2, c2, 3, 3)))
        cat = T.concat_channels([a, b])
        assert np.array_equal(T.slice_channels(cat, 0, c1).data, a.data)
        assert np.array_equal(T.slice_channels(cat, c1, c1 + c2).data, b.data)


class TestBackwardSemantics:
    def test_linear_loss_gradient_is_input(self, rng):
        x = Tensor(rng.normal(size=(3, 4)))
        w = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        T.reduce_sum(T.mul(w, x)).backward()
        assert np.array_equal(w.grad, x.data)

    def test_relu_gradient_routing(self):
        w = t64([-1.0, 2.0], requires_grad=True)
        T.reduce_sum(T.relu(w)).backward()
        assert w.grad.tolist() == [0.0, 1.0]

    def test_non_scalar_loss_rejected(self):
        w = t64([1.0, 2.0], requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            T.relu(w).backward()

    def test_detached_tensor_rejected(self):
        with pytest.raises(RuntimeError, match="graph"):
            t64([1.0], requires_grad=True).backward()

    def test_second_backward_rejected(self):
        w = t64([1.0, 2.0], requires_grad=True)
        loss = T.reduce_sum(T.mul(w, w))
        loss.backward()
        with pytest.raises(RuntimeError, match="freed"):
            loss.backward()

    def test_two_consumers_accumulate_by_summation(self, rng):
        vals = rng.normal(size=5)
        a1 = Tensor(vals.copy(), requires_grad=True)
        loss1 = T.reduce_sum(T.mul(a1, a1))
        loss1.backward()

        a2 = Tensor(vals.copy(), requires_grad=True)
        b = Tensor(rng.normal(size=5))
        loss_mul = T.reduce_sum(T.mul(a2, a2))
        assert max_rel_error(a1.grad, 2 * vals) < 1e-12

        # same tensor feeding two ops: grad equals sum of isolated grads
        x = Tensor(vals.copy(), requires_grad=True)
        combined = T.add(T.reduce_sum(T.mul(x, x)), T.reduce_sum(T.mul(x, b)))
        combined.backward()
        assert max_rel_error(x.grad, 2 * vals + b.data) < 1e-12
        del loss_mul, a2

    def test_no_grad_blocks_recording(self, rng):
        w = Tensor(rng.normal(size=3), requires_grad=True)
        with T.no_grad():
            out = T.reduce_sum(T.relu(w))
        assert out._op is None and not out.requires_grad

    def test_two_layer_composition_matches_finite_differences(self, rng):
        w = Tensor(rng.uniform(0.3, 2.0, size=(4, 4)), requires_grad=True)
        x = Tensor(rng.uniform(0.3, 2.0, size=(4, 4)))
        coeff = Tensor(rng.uniform(0.5, 1.5, size=(4, 4)))

        def forward():
            h = T.relu(T.mul(w, x))
            return T.reduce_sum(T.mul(T.sigmoid(h), coeff))

        loss = forward()
        loss.backward()
        numeric = fd_gradient(lambda: forward().item(), w.data)
        assert max_rel_error(w.grad, numeric) < 1e-4


OPS_FOR_GRADCHECK = [
    ("add", lambda a, b: T.add(a, b), 2),
    ("sub", lambda a, b: T.sub(a, b), 2),
    ("mul", lambda a, b: T.mul(a, b), 2),
    ("div", lambda a, b: T.div(a, b), 2),
    ("scalar_mul", lambda a: T.scalar_mul(a, 1.7), 1),
    ("add_scalar", lambda a: T.add_scalar(a, -0.3), 1),
    ("relu", lambda a: T.relu(a), 1),
    ("sigmoid", lambda a: T.sigmoid(a), 1),
    ("sum_per_sample", lambda a: T.sum_per_sample(a), 1),
]


@pytest.mark.parametrize("name,op,arity", OPS_FOR_GRADCHECK, ids=[o[0] for o in OPS_FOR_GRADCHECK])
def test_gradcheck_elementwise_ops(name, op, arity):
    rng = np.random.default_rng(hash(name) % 2**32)
    for _ in range(20):
        shape = (2, 3)
        # keep sample points away from the relu kink and div singularities
        a_vals = rng.uniform(0.1, 2.0, shape) * rng.choice([-1.0, 1.0], shape)
        b_vals = rng.uniform(0.3, 2.0, shape) * rng.choice([-1.0, 1.0], shape)
        pool = rng.uniform(0.5, 1.5, 64)

        def forward():
            a = Tensor(a_vals, requires_grad=True)
            args = [a]
            if arity == 2:
                args.append(Tensor(b_vals, requires_grad=True))
            out = op(*args)
            if out.data.ndim:
                weights = Tensor(pool[: out.size].reshape(out.shape))
                out = T.reduce_sum(T.mul(out, weights))
            return args, out

        args, loss = forward()
        loss.backward()
        for idx, arr in enumerate([a_vals, b_vals][:arity]):
            numeric = fd_gradient(lambda: forward()[1].item(), arr)
            assert max_rel_error(args[idx].grad, numeric) < 1e-4, f"{name} arg{idx}"
