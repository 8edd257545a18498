import numpy as np
import pytest

from greenvae.autodiff import (NonFiniteError, ShapeError, Tape, Tensor, backward, gradient_check,
                               no_tape, ops, shadow64)
from greenvae.autodiff import ops as ops_module


def test_matmul_identity():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    out = ops.matmul(a, np.eye(2, dtype=np.float32))
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_exp_of_zero():
    np.testing.assert_array_equal(ops.exp(np.zeros((3, 2), np.float32)).data, np.ones((3, 2)))


def test_identity_conv_kernel():
    x = np.random.default_rng(0).normal(size=(2, 5, 7, 1)).astype(np.float32)
    w = np.ones((1, 1, 1, 1), np.float32)
    np.testing.assert_array_equal(ops.conv2d(x, w, 1).data, x)


def test_square_gradient():
    x = Tensor(3.0, requires_grad=True)
    with Tape() as t:
        loss = ops.square(x)
    g = backward(t, loss)
    assert g[x] == pytest.approx(6.0)


def test_constant_loss_gives_zero_grads():
    x = Tensor(np.ones(4, np.float32), requires_grad=True)
    with Tape() as t:
        loss = ops.sum(Tensor(np.ones(4, np.float32)))
    backward(t, loss, [x])
    np.testing.assert_array_equal(x.grad, 0)


def test_untracked_tensors_untouched():
    x = Tensor(np.ones(3, np.float32), requires_grad=True)
    c = Tensor(np.full(3, 2.0, np.float32))
    with Tape() as t:
        loss = ops.sum(ops.mul(x, c))
    backward(t, loss)
    assert c.grad is None
    np.testing.assert_array_equal(x.grad, 2.0)


def test_non_scalar_loss_rejected():
    x = Tensor(np.ones(3, np.float32), requires_grad=True)
    with Tape() as t:
        y = ops.mul(x, 2.0)
    with pytest.raises(ShapeError):
        backward(t, y)


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        ops.matmul(np.ones((2, 3), np.float32), np.ones((4, 5), np.float32))
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4,\)"):
        ops.add(np.ones((2, 3), np.float32), np.ones(4, np.float32))


def test_non_finite_input_rejected():
    with pytest.raises(NonFiniteError):
        ops.exp(np.array([1.0, np.nan], np.float32))


def test_sigmoid_dense_against_shadow_differences():
    rng = np.random.default_rng(1)
    w = rng.normal(size=(6, 4)).astype(np.float32)
    x = rng.normal(size=(3, 6)).astype(np.float32)
    rep = gradient_check(lambda p: ops.sum(ops.sigmoid(ops.matmul(p[1], p[0]))), [w, x], eps=1e-3, tol=1e-4)
    assert rep.passed, str(rep)


def test_sum_of_squares_passes_tight():
    v = np.random.default_rng(2).normal(size=(5, 3))
    rep = gradient_check(lambda p: ops.sum(ops.square(p[0])), [v], tol=1e-6)
    assert rep.passed, str(rep)


def test_conv_relu_dense_chain():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 6, 6, 2)).astype(np.float32)
    w = rng.normal(size=(3, 3, 2, 3)).astype(np.float32) * 0.5
    d = rng.normal(size=(3 * 3 * 3, 4)).astype(np.float32) * 0.3

    def f(p):
        h = ops.relu(ops.conv2d(p[0], p[1], 2))
        return ops.sum(ops.square(ops.matmul(ops.flatten(h), p[2])))

    rep = gradient_check(f, [x, w, d], tol=1e-4)
    assert rep.passed, str(rep)


def test_corrupted_backward_is_caught(monkeypatch):
    good = ops_module.REGISTRY["square"]

    def bad(x):
        out, vjp = good(x)
        return out, lambda g: tuple(1.5 * gi for gi in vjp(g))

    monkeypatch.setitem(ops_module.REGISTRY, "square", bad)
    v = np.random.default_rng(4).normal(size=6)
    rep = gradient_check(lambda p: ops.sum(ops.square(p[0])), [v], tol=1e-4)
    assert not rep.passed


# --- every op kind against finite differences -------------------------------------

def _unary(name, lo=-2.0, hi=2.0):
    def build(rng, shape):
        x = rng.uniform(lo, hi, size=shape)
        w = rng.normal(size=shape)
        return [x], lambda p: ops.sum(ops.mul(getattr(ops, name)(p[0]), w))
    return build


def _positive(name):
    def build(rng, shape):
        x = rng.uniform(0.5, 2.0, size=shape)
        w = rng.normal(size=shape)
        return [x], lambda p: ops.sum(ops.mul(getattr(ops, name)(p[0]), w))
    return build


def _away_from_kink(name):
    def build(rng, shape):
        x = rng.uniform(0.2, 2.0, size=shape) * rng.choice([-1, 1], size=shape)
        w = rng.normal(size=shape)
        return [x], lambda p: ops.sum(ops.mul(getattr(ops, name)(p[0]), w))
    return build


def _binary(name):
    def build(rng, shape):
        a = rng.normal(size=shape)
        b = rng.uniform(0.5, 2.0, size=shape[-1:])  # broadcast on the trailing axis
        w = rng.normal(size=shape)
        return [a, b], lambda p: ops.sum(ops.mul(getattr(ops, name)(p[0], p[1]), w))
    return build


def _clip(rng, shape):
    x = rng.uniform(0.05, 0.9, size=shape) * rng.choice([-2, 2], size=shape)
    x = np.where(np.abs(np.abs(x) - 1.0) < 0.1, 0.5, x)
    w = rng.normal(size=shape)
    return [x], lambda p: ops.sum(ops.mul(ops.clip(p[0], -1.0, 1.0), w))


def _power(rng, shape):
    x = rng.uniform(0.5, 2.0, size=shape)
    w = rng.normal(size=shape)
    return [x], lambda p: ops.sum(ops.mul(ops.power(p[0], 1.7), w))


def _reductions(rng, shape):
    x = rng.normal(size=shape)
    w = rng.normal(size=shape[1:])
    return [x], lambda p: ops.add(ops.sum(ops.mul(ops.mean(p[0], axis=0), w)), ops.sum(ops.square(ops.sum(p[0], axis=-1))))


def _shape_ops(rng, shape):
    x = rng.normal(size=shape)
    w = rng.normal(size=shape[::-1])
    flat = int(np.prod(shape))

    def f(p):
        t = ops.transpose(p[0])
        r = ops.reshape(p[0], (flat,))
        b = ops.broadcast_to(ops.reshape(p[0], (1,) + shape), (2,) + shape)
        return ops.add(ops.add(ops.sum(ops.mul(t, w)), ops.sum(ops.square(r))), ops.sum(ops.mul(b, 0.5)))
    return [x], f


def _slice_concat(rng, shape):
    a = rng.normal(size=shape)
    b = rng.normal(size=shape)
    w = rng.normal(size=shape[:-1] + (2 * shape[-1],))

    def f(p):
        c = ops.concat([p[0], p[1]], axis=-1)
        s = ops.slice(p[0], (slice(None), slice(0, 1)))
        return ops.add(ops.sum(ops.mul(c, w)), ops.sum(ops.square(s)))
    return [a, b], f


def _matmul(rng, shape):
    a = rng.normal(size=shape)
    b = rng.normal(size=(shape[-1], 3))
    return [a, b], lambda p: ops.sum(ops.square(ops.matmul(p[0], p[1])))


def _conv_builder(kind, stride):
    def build(rng, shape):
        n, c = 2, 2
        side = 4 + shape[0] % 3
        x = rng.normal(size=(n, side, side, c))
        k = 3 if shape[-1] % 2 else 2
        cout = 3
        if kind == "conv":
            w = rng.normal(size=(k, k, c, cout)) * 0.5
            return [x, w], lambda p: ops.sum(ops.square(ops.conv2d(p[0], p[1], stride)))
        w = rng.normal(size=(k, k, cout, c)) * 0.5
        return [x, w], lambda p: ops.sum(ops.square(ops.conv_transpose2d(p[0], p[1], stride)))
    return build


def _upsample(rng, shape):
    x = rng.normal(size=(1, 3, 2, 2))
    w = rng.normal(size=(1, 6, 4, 2))
    return [x], lambda p: ops.sum(ops.mul(ops.upsample(p[0], 2), w))


OP_CASES = {
    "exp": _unary("exp"), "sigmoid": _unary("sigmoid", -4, 4), "swish": _unary("swish", -4, 4),
    "square": _unary("square"), "neg": _unary("neg"), "log": _positive("log"), "sqrt": _positive("sqrt"),
    "relu": _away_from_kink("relu"), "abs": _away_from_kink("abs"), "clip": _clip, "power": _power,
    "add": _binary("add"), "sub": _binary("sub"), "mul": _binary("mul"), "div": _binary("div"),
    "reductions": _reductions, "shape": _shape_ops, "slice-concat": _slice_concat, "matmul": _matmul,
    "conv-s1": _conv_builder("conv", 1), "conv-s2": _conv_builder("conv", 2),
    "convT-s1": _conv_builder("convT", 1), "convT-s2": _conv_builder("convT", 2), "upsample": _upsample,
}


@pytest.mark.parametrize("kind", sorted(OP_CASES))
def test_op_gradients_32bit(kind):
    # 5 random shapes/seeds per kind; > 100 cases over all kinds
    for seed in range(5):
        rng = np.random.default_rng(1000 + seed)
        shape = tuple(int(s) for s in rng.integers(2, 5, size=2))
        values, f = OP_CASES[kind](rng, shape)
        values = [v.astype(np.float32) for v in values]
        rep = gradient_check(f, values, eps=1e-3, tol=1e-4, max_entries=40, seed=seed)
        assert rep.passed, f"{kind} seed {seed}: {rep}"


@pytest.mark.parametrize("kind", sorted(OP_CASES))
def test_op_gradients_64bit(kind):
    rng = np.random.default_rng(7)
    values, f = OP_CASES[kind](rng, (3, 4))
    with shadow64():
        rep = gradient_check(f, values, eps=1e-6, tol=1e-7, max_entries=40)
    assert rep.passed, f"{kind}: {rep}"


def test_replay_is_bit_identical():
    def run():
        rng = np.random.default_rng(11)
        x = Tensor(rng.normal(size=(4, 8, 8, 2)).astype(np.float32), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 3, 2, 4)).astype(np.float32), requires_grad=True)
        with Tape() as t:
            loss = ops.sum(ops.swish(ops.conv2d(x, w, 2)))
        backward(t, loss)
        return loss.data.copy(), x.grad.copy(), w.grad.copy()

    a, b = run(), run()
    for u, v in zip(a, b):
        assert np.array_equal(u, v)


def test_chain_rule_matches_analytic():
    # d/dx exp(sin-free) composition: g(f(x)) = log(1 + x^2), derivative 2x / (1 + x^2)
    xs = np.random.default_rng(5).normal(size=50)
    x = Tensor(xs, requires_grad=True)
    with Tape() as t:
        loss = ops.sum(ops.log(ops.add(ops.square(x), 1.0)))
    backward(t, loss)
    np.testing.assert_allclose(x.grad, 2 * xs / (1 + xs ** 2), rtol=1e-12)


def test_no_tape_records_nothing():
    x = Tensor(np.ones(3, np.float32), requires_grad=True)
    with Tape() as t:
        with no_tape():
            ops.exp(x)
    assert len(t) == 0


def test_operator_sugar_records():
    x = Tensor(np.array([1.0, 2.0], np.float32), requires_grad=True)
    with Tape() as t:
        loss = ((x * 3.0 + 1.0) ** 2).sum()
    backward(t, loss)
    np.testing.assert_allclose(x.grad, 2 * (3 * x.data + 1) * 3)
