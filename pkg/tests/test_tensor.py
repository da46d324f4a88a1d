"""Autodiff core: forward semantics, exact gradients, tape discipline."""

import numpy as np
import pytest

from fpcr.errors import ShapeError, TapeError
from fpcr.optim import Adam
from fpcr.checkpoint import load_checkpoint, save_checkpoint
from fpcr.tensor import (Parameter, Tape, Tensor, apply_primitive, backward,
                         concat, gather_rows, scatter_rows)

from gradcheck import gradcheck


def _param(rng, shape, name="p", positive=False, dtype=np.float64):
    data = rng.uniform(0.1, 2.0, shape) if positive else rng.normal(0, 1.0, shape)
    return Parameter(name, data.astype(dtype))


class TestForwardSemantics:
    def test_sin_of_zero_is_zero(self):
        out = apply_primitive("sin", Tensor(np.zeros((2, 3))))
        np.testing.assert_array_equal(out.data, np.zeros((2, 3)))

    def test_hadamard_product(self):
        out = Tensor([2.0, 3.0]) * Tensor([4.0, 5.0])
        np.testing.assert_allclose(out.data, [8.0, 15.0])

    def test_instance_norm_constant_channel_is_zero(self):
        x = Tensor(np.full((4, 4, 2), 3.7, dtype=np.float32))
        gamma = Tensor(np.ones(2, dtype=np.float32))
        beta = Tensor(np.zeros(2, dtype=np.float32))
        out = apply_primitive("instnorm", x, gamma, beta)
        np.testing.assert_allclose(out.data, 0.0, atol=1e-6)

    def test_row_broadcast_multiply(self):
        x = Tensor(np.arange(6, dtype=np.float64).reshape(2, 3))
        w = Tensor(np.array([[2.0], [3.0]]))
        out = w * x
        np.testing.assert_allclose(out.data, [[0, 2, 4], [9, 12, 15]])

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError, match="unknown primitive"):
            apply_primitive("tanh", Tensor([1.0]))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))
        with pytest.raises(ShapeError):
            Tensor(np.ones((2, 3))) * Tensor(np.ones((3, 2)))

    def test_gather_scatter_roundtrip(self):
        x = np.arange(12, dtype=np.float64).reshape(4, 3)
        idx = np.array([2, 0])
        g = gather_rows(Tensor(x), idx)
        np.testing.assert_array_equal(g.data, x[idx])
        s = scatter_rows(g, idx, 4)
        expect = np.zeros_like(x)
        expect[idx] = x[idx]
        np.testing.assert_array_equal(s.data, expect)

    def test_log_requires_positive(self):
        with pytest.raises(ShapeError):
            apply_primitive("log", Tensor([0.0, 1.0]))


class TestBackwardBasics:
    def test_square_sum_gradient(self):
        tape = Tape()
        p = Parameter("x", np.array([1.0, 2.0]))
        x = tape.watch(p)
        loss = (x * x).sum()
        grads = tape.backward(loss)
        np.testing.assert_allclose(grads[p], [2.0, 4.0])

    def test_sin_gradient_at_zero(self):
        tape = Tape()
        p = Parameter("x", np.array([0.0]))
        loss = tape.watch(p).sin().sum()
        grads = tape.backward(loss)
        np.testing.assert_allclose(grads[p], [1.0])

    def test_unreachable_parameter_gets_zero(self):
        tape = Tape()
        p = Parameter("x", np.array([1.0, 2.0]))
        q = Parameter("unused", np.array([5.0]))
        x = tape.watch(p)
        tape.watch(q)
        grads = tape.backward((x * x).sum())
        np.testing.assert_array_equal(grads[q], [0.0])

    def test_backward_twice_rejected(self):
        tape = Tape()
        p = Parameter("x", np.array([1.0]))
        loss = tape.watch(p).sum()
        tape.backward(loss)
        with pytest.raises(TapeError, match="consumed"):
            tape.backward(loss)

    def test_recording_on_consumed_tape_rejected(self):
        tape = Tape()
        p = Parameter("x", np.array([1.0]))
        x = tape.watch(p)
        tape.backward(x.sum())
        with pytest.raises(TapeError):
            x * x

    def test_non_scalar_loss_rejected(self):
        tape = Tape()
        x = tape.watch(Parameter("x", np.ones(3)))
        with pytest.raises(TapeError, match="scalar"):
            tape.backward(x * x)

    def test_depth4_composition_matches_fd(self):
        rng = np.random.default_rng(7)
        for seed in range(6):
            case = np.random.default_rng(seed)
            p = _param(case, (3,), "x")

            def build(tape):
                x = tape.watch(p) if tape else Tensor(p.data)
                y = (x * x).sin()
                z = y.sigmoid() * x
                return z.square().sum()

            gradcheck(build, [p], tol=1e-6, rng=rng)


class TestPrimitiveGradients:
    """Every primitive against central finite differences, many seeds."""

    def test_elementwise_and_reductions(self):
        rng = np.random.default_rng(0)
        kinds = ["sin", "sigmoid", "square", "sum", "mean"]
        cases = 0
        for seed in range(12):
            case = np.random.default_rng(seed)
            shape = tuple(case.integers(1, 5, size=2))
            for kind in kinds:
                p = _param(case, shape, f"{kind}_{seed}")

                def build(tape, kind=kind, p=p):
                    x = tape.watch(p) if tape else Tensor(p.data)
                    out = apply_primitive(kind, x)
                    return out.sum() if out.data.ndim else out

                gradcheck(build, [p], rng=rng)
                cases += 1
        assert cases >= 50

    def test_log_gradient(self):
        rng = np.random.default_rng(1)
        for seed in range(8):
            case = np.random.default_rng(seed)
            p = _param(case, (3, 2), "logx", positive=True)

            def build(tape, p=p):
                x = tape.watch(p) if tape else Tensor(p.data)
                return apply_primitive("log", x).sum()

            gradcheck(build, [p], rng=rng)

    def test_leaky_relu_gradient(self):
        rng = np.random.default_rng(2)
        for seed in range(8):
            case = np.random.default_rng(seed)
            data = case.normal(0, 1, (4, 3))
            data[np.abs(data) < 0.05] += 0.2  # keep clear of the kink for FD
            p = Parameter("lr", data)

            def build(tape, p=p):
                x = tape.watch(p) if tape else Tensor(p.data)
                return apply_primitive("leaky_relu", x, slope=0.2).sum()

            gradcheck(build, [p], rng=rng)

    def test_matmul_add_mul_gradients(self):
        rng = np.random.default_rng(3)
        for seed in range(10):
            case = np.random.default_rng(100 + seed)
            a = _param(case, (3, 4), "a")
            b = _param(case, (4, 2), "b")
            bias = _param(case, (2,), "bias")
            scale = _param(case, (3, 1), "scale")

            def build(tape):
                at = tape.watch(a) if tape else Tensor(a.data)
                bt = tape.watch(b) if tape else Tensor(b.data)
                st = tape.watch(scale) if tape else Tensor(scale.data)
                ct = tape.watch(bias) if tape else Tensor(bias.data)
                return (st * ((at @ bt) + ct)).square().sum()

            gradcheck(build, [a, b, bias, scale], rng=rng)

    def test_concat_slice_reshape_gradients(self):
        rng = np.random.default_rng(4)
        for seed in range(8):
            case = np.random.default_rng(200 + seed)
            a = _param(case, (2, 3), "a")
            b = _param(case, (2, 2), "b")

            def build(tape):
                at = tape.watch(a) if tape else Tensor(a.data)
                bt = tape.watch(b) if tape else Tensor(b.data)
                c = concat(at, bt)
                s = c.slice_last(1, 4)
                return s.reshape((6, 1)).square().sum()

            gradcheck(build, [a, b], rng=rng)

    def test_conv_pool_upsample_instnorm_gradients(self):
        rng = np.random.default_rng(5)
        for seed in range(6):
            case = np.random.default_rng(300 + seed)
            x = _param(case, (4, 4, 2), "x")
            w = _param(case, (3, 3, 2, 3), "w")
            b = _param(case, (3,), "b")
            gamma = _param(case, (3,), "gamma", positive=True)
            beta = _param(case, (3,), "beta")

            def build(tape):
                xt = tape.watch(x) if tape else Tensor(x.data)
                wt = tape.watch(w) if tape else Tensor(w.data)
                bt = tape.watch(b) if tape else Tensor(b.data)
                gt = tape.watch(gamma) if tape else Tensor(gamma.data)
                et = tape.watch(beta) if tape else Tensor(beta.data)
                y = apply_primitive("conv2d", xt, wt, bt)
                y = apply_primitive("instnorm", y, gt, et)
                y = apply_primitive("avgpool2", y)
                y = apply_primitive("upsample2", y)
                return y.square().sum()

            gradcheck(build, [x, w, b, gamma, beta], samples=24, rng=rng)

    def test_gather_scatter_gradients(self):
        rng = np.random.default_rng(6)
        for seed in range(8):
            case = np.random.default_rng(400 + seed)
            x = _param(case, (5, 3), "x")
            idx = case.integers(0, 5, size=7)

            def build(tape):
                xt = tape.watch(x) if tape else Tensor(x.data)
                g = gather_rows(xt, idx)
                s = scatter_rows(g, np.arange(7) % 4, 4)
                return s.square().sum()

            gradcheck(build, [x], rng=rng)


class TestDeterminism:
    def test_forward_backward_bit_identical(self):
        def run():
            rng = np.random.default_rng(11)
            p = Parameter("w", rng.normal(0, 1, (8, 8)).astype(np.float32))
            x = Tensor(rng.normal(0, 1, (4, 8)).astype(np.float32))
            tape = Tape()
            loss = ((x @ tape.watch(p)).sin()).square().mean()
            g = tape.backward(loss)[p]
            return loss.data.copy(), g.copy()

        l1, g1 = run()
        l2, g2 = run()
        assert np.array_equal(l1, l2)
        assert np.array_equal(g1, g2)


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        p = Parameter("w", np.array([1.5, -0.5], dtype=np.float32))
        opt = Adam([p], lr=0.1)
        before = p.data.copy()
        opt.step({p: np.zeros_like(p.data)})
        np.testing.assert_array_equal(p.data, before)
        assert opt.step_count == 1

    def test_first_step_magnitude(self):
        # with g=1: m_hat = v_hat = 1, so the update is ~ -lr
        p = Parameter("w", np.array([0.0], dtype=np.float64))
        opt = Adam([p], lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8)
        opt.step({p: np.array([1.0])})
        np.testing.assert_allclose(p.data, [-0.1], atol=1e-8)

    def test_consecutive_steps_move_against_gradient(self):
        p = Parameter("w", np.array([0.0]))
        opt = Adam([p], lr=0.05)
        opt.step({p: np.array([1.0])})
        first = p.data.copy()
        opt.step({p: np.array([1.0])})
        assert p.data[0] < first[0] < 0.0

    def test_shape_mismatch(self):
        p = Parameter("w", np.zeros(3))
        opt = Adam([p])
        with pytest.raises(ShapeError):
            opt.step({p: np.zeros(4)})


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        tensors = {
            "a.w": rng.normal(0, 1, (3, 4)).astype(np.float32),
            "b.bias": rng.normal(0, 1, (7,)).astype(np.float32),
            "scalar": np.array([3.25], dtype=np.float32),
        }
        path = tmp_path / "model.fpcr"
        save_checkpoint(path, tensors)
        loaded = load_checkpoint(path)
        assert set(loaded) == set(tensors)
        for k in tensors:
            assert loaded[k].dtype == np.float32
            assert np.array_equal(loaded[k], tensors[k])

    def test_magic_and_version_enforced(self, tmp_path):
        path = tmp_path / "bad.fpcr"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        from fpcr.errors import DataError

        with pytest.raises(DataError, match="magic"):
            load_checkpoint(path)

    def test_rejects_non_float32(self, tmp_path):
        with pytest.raises(TypeError):
            save_checkpoint(tmp_path / "x.fpcr", {"a": np.zeros(3, dtype=np.float64)})


def test_module_level_backward_helper():
    p = Parameter("x", np.array([2.0]))
    tape = Tape()
    loss = tape.watch(p).square().sum()
    grads = backward(loss)
    np.testing.assert_allclose(grads[p], [4.0])
