"""Gradient and contract checks for the reverse-mode tape."""

import numpy as np
import pytest

from flowlab import autodiff as nd
from flowlab.autodiff import Tape, grads_of
from flowlab.rng import Rng

from util import FD_REL_TOL, fd_grad, max_rel_err


def run_fd_check(build, arrays, seed=0, rel_tol=FD_REL_TOL):
    """Check the tape gradient of scalar build(*tensors) for every input."""
    tape = Tape()
    tensors = [tape.leaf(a) for a in arrays]
    out = build(*tensors)
    tape.backward(out)
    for arr, tensor in zip(arrays, tensors):
        def f(arr=arr):
            t2 = Tape()
            others = [t2.leaf(a) for a in arrays]
            return float(nd.value_of(build(*others)))
        ref = fd_grad(f, arr)
        got = tensor.grad if tensor.grad is not None else np.zeros_like(arr)
        assert max_rel_err(got, ref) < rel_tol


def scalarize(x):
    return nd.reduce_sum(nd.mul(x, x)) if nd.value_of(x).size > 1 else nd.reduce_sum(x)


PRIMITIVES = {
    "add": (lambda a, b: scalarize(nd.add(a, b)), [(3, 4), (3, 4)]),
    "sub": (lambda a, b: scalarize(nd.sub(a, b)), [(3, 4), (3, 4)]),
    "mul": (lambda a, b: scalarize(nd.mul(a, b)), [(3, 4), (3, 4)]),
    "scale": (lambda a: scalarize(nd.scale(a, -1.7)), [(3, 4)]),
    "matmul": (lambda a, b: scalarize(nd.matmul(a, b)), [(3, 4), (4, 2)]),
    "matmul_batched": (lambda a, b: scalarize(nd.matmul(a, b)),
                       [(2, 3, 4), (2, 4, 2)]),
    "transpose": (lambda a, b: scalarize(nd.matmul(nd.transpose(a), b)),
                  [(4, 3), (4, 2)]),
    "affine": (lambda x, w, b: scalarize(nd.affine(x, w, b)),
               [(3, 4), (4, 2), (2,)]),
    "affine_batched": (lambda x, w, b: scalarize(nd.affine(x, w, b)),
                       [(2, 3, 4), (2, 4, 2), (2, 1, 2)]),
    "silu": (lambda a: scalarize(nd.silu(a)), [(3, 4)]),
    "layer_norm": (lambda x, g, b: scalarize(nd.layer_norm(x, g, b)),
                   [(3, 4), (4,), (4,)]),
    "reduce_mean": (lambda a: nd.reduce_mean(nd.mul(a, a)), [(3, 4)]),
    "reduce_sum": (lambda a: nd.reduce_sum(nd.mul(a, a)), [(3, 4)]),
    "batch_mean": (lambda a: scalarize(nd.batch_mean(a)), [(2, 5, 3)]),
    "mse": (lambda a, b: nd.mse(a, b), [(3, 4), (3, 4)]),
    "softplus": (lambda a: scalarize(nd.softplus(a)), [(3, 4)]),
    "log_sigmoid": (lambda a: scalarize(nd.log_sigmoid(a)), [(3, 4)]),
    "sin": (lambda a: scalarize(nd.sin(a)), [(3, 4)]),
    "cos": (lambda a: scalarize(nd.cos(a)), [(3, 4)]),
    "concat_cols": (lambda a, b: scalarize(nd.concat_cols([a, b])),
                    [(3, 2), (3, 4)]),
    "take_cols": (lambda a: scalarize(nd.take_cols(a, 1, 3)), [(3, 5)]),
    "stack_parts": (lambda a, b: scalarize(nd.stack_parts([a, b])),
                    [(3, 2), (3, 2)]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name):
    build, shapes = PRIMITIVES[name]
    for seed in range(10):
        rng = Rng(seed).substream(name)
        arrays = [rng.normal(s) for s in shapes]
        run_fd_check(build, arrays)


def test_embed_rows_gradient():
    rng = Rng(0)
    table = rng.normal((5, 3))
    idx = np.array([0, 2, 2, 4])

    tape = Tape()
    t = tape.leaf(table)
    out = nd.reduce_sum(nd.mul(nd.embed_rows(t, idx), nd.embed_rows(t, idx)))
    tape.backward(out)

    def f():
        return float(nd.value_of(
            nd.reduce_sum(nd.mul(table[idx], table[idx]))))

    ref = fd_grad(f, table)
    assert max_rel_err(t.grad, ref) < FD_REL_TOL


# -- forward values ---------------------------------------------------------

def test_matmul_identity():
    a = Rng(1).normal((3, 5))
    np.testing.assert_array_equal(nd.matmul(np.eye(3), a), a)


def test_silu_values():
    assert nd.silu(np.zeros((1, 1)))[0, 0] == 0.0
    # derivative at 0 is sigma(0) = 0.5
    tape = Tape()
    x = tape.leaf(np.zeros((1, 1)))
    tape.backward(nd.reduce_sum(nd.silu(x)))
    assert abs(x.grad[0, 0] - 0.5) < 1e-12


def test_layer_norm_constant_row_is_zero():
    x = np.full((2, 6), 3.7)
    out = nd.layer_norm(x, np.ones(6), np.zeros(6))
    np.testing.assert_allclose(out, 0.0, atol=1e-12)


def test_shape_mismatch_raises():
    with pytest.raises(ValueError):
        nd.add(np.zeros((2, 3)), np.zeros((3, 2)))
    with pytest.raises(ValueError):
        nd.matmul(np.zeros((2, 3)), np.zeros((2, 3)))


# -- backward contract ------------------------------------------------------

def test_backward_sum_gives_ones():
    tape = Tape()
    x = tape.leaf(Rng(2).normal((4, 3)))
    tape.backward(nd.reduce_sum(x))
    np.testing.assert_array_equal(x.grad, np.ones((4, 3)))


def test_backward_mse_single_element():
    tape = Tape()
    x = tape.leaf(np.array([[3.0]]))
    tape.backward(nd.mse(x, np.zeros((1, 1))))
    assert x.grad[0, 0] == 6.0


def test_backward_requires_scalar_root():
    tape = Tape()
    x = tape.leaf(np.ones((2, 2)))
    y = nd.add(x, x)
    with pytest.raises(ValueError):
        tape.backward(y)


def test_backward_twice_raises():
    tape = Tape()
    x = tape.leaf(np.ones((2, 2)))
    loss = nd.reduce_sum(x)
    tape.backward(loss)
    with pytest.raises(RuntimeError):
        tape.backward(loss)


def test_mixed_tapes_raise():
    t1, t2 = Tape(), Tape()
    a = t1.leaf(np.ones((2, 2)))
    b = t2.leaf(np.ones((2, 2)))
    with pytest.raises(ValueError):
        nd.add(a, b)


def test_non_finite_root_raises():
    tape = Tape()
    x = tape.leaf(np.array([[np.inf]]))
    with pytest.raises(FloatingPointError):
        tape.backward(nd.reduce_sum(x))


def test_untouched_leaf_reports_zero_grad():
    tape = Tape()
    x = tape.leaf(np.ones((2, 2)))
    y = tape.leaf(np.ones((2, 2)))
    tape.backward(nd.reduce_sum(x))
    grads = grads_of({"x": x, "y": y})
    np.testing.assert_array_equal(grads["y"], 0.0)


def test_gradient_accumulates_over_reuse():
    tape = Tape()
    x = tape.leaf(np.full((1, 1), 2.0))
    y = nd.add(nd.mul(x, x), nd.mul(x, x))  # 2 x^2 -> d/dx = 4x = 8
    tape.backward(nd.reduce_sum(y))
    assert x.grad[0, 0] == 8.0


def test_deterministic_replay():
    def run():
        rng = Rng(7)
        tape = Tape()
        x = tape.leaf(rng.normal((4, 4)))
        w = tape.leaf(rng.normal((4, 4)))
        out = nd.mse(nd.silu(nd.matmul(x, w)), np.ones((4, 4)))
        tape.backward(out)
        return float(out.data), x.grad.copy(), w.grad.copy()

    v1, g1, h1 = run()
    v2, g2, h2 = run()
    assert v1 == v2
    np.testing.assert_array_equal(g1, g2)
    np.testing.assert_array_equal(h1, h2)


def test_random_mlp_matches_finite_differences():
    rng = Rng(5)
    params = {
        "w1": rng.normal((4, 8)) / 2, "b1": rng.normal((8,)) / 4,
        "w2": rng.normal((8, 8)) / 3, "b2": rng.normal((8,)) / 4,
        "w3": rng.normal((8, 1)) / 3, "b3": rng.normal((1,)) / 4,
    }
    x = rng.normal((5, 4))

    def loss_value():
        h = nd.silu(nd.affine(x, params["w1"], params["b1"]))
        h = nd.silu(nd.affine(h, params["w2"], params["b2"]))
        return float(nd.value_of(nd.reduce_mean(
            nd.affine(h, params["w3"], params["b3"]))))

    tape = Tape()
    wrapped = tape.wrap(params)
    h = nd.silu(nd.affine(x, wrapped["w1"], wrapped["b1"]))
    h = nd.silu(nd.affine(h, wrapped["w2"], wrapped["b2"]))
    tape.backward(nd.reduce_mean(nd.affine(h, wrapped["w3"], wrapped["b3"])))
    got = grads_of(wrapped)
    for name, arr in params.items():
        ref = fd_grad(loss_value, arr)
        assert max_rel_err(got[name], ref) < FD_REL_TOL, name
