import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from remind.autodiff import (AdamW, GradientDescent, NondeterministicFunctionError,
                             Parameter, ShapeError, Tape, finite_diff_check)


def test_matmul_shape_rule():
    tape = Tape()
    a = tape.constant(np.ones((2, 3)))
    b = tape.constant(np.ones((3, 4)))
    assert tape.matmul(a, b).value.shape == (2, 4)


def test_matmul_shape_mismatch_names_dims():
    tape = Tape()
    a = tape.constant(np.ones((2, 3)))
    b = tape.constant(np.ones((4, 5)))
    with pytest.raises(ShapeError, match="2x3 @ 4x5"):
        tape.matmul(a, b)


def test_row_softmax_equal_logits_uniform():
    tape = Tape()
    y = tape.row_softmax(tape.constant([[2.0, 2.0, 2.0, 2.0]]))
    assert np.allclose(y.value, 0.25, atol=1e-15)


def test_unit_row_normalize_hand_value():
    # L2 by hand: (3,4)/5 = (0.6, 0.8)
    tape = Tape()
    y = tape.unit_row_normalize(tape.constant([[3.0, 4.0]]))
    assert np.allclose(y.value, [[0.6, 0.8]], atol=1e-15)


def test_unit_row_normalize_zero_row_guard():
    tape = Tape()
    y = tape.unit_row_normalize(tape.constant([[0.0, 0.0], [3.0, 4.0]]))
    assert y.flag == "zero-row-guard"
    assert np.allclose(y.value[0], 1.0 / math.sqrt(2))
    assert np.allclose(y.value[1], [0.6, 0.8])


def test_record_forward_generic_surface():
    tape = Tape()
    a = tape.constant([[1.0, 2.0], [3.0, 4.0]])
    nid = tape.record_forward("transpose", [a])
    assert np.array_equal(tape.value(nid), [[1.0, 3.0], [2.0, 4.0]])
    with pytest.raises(ValueError, match="unknown op kind"):
        tape.record_forward("conv2d", [a])


def test_backward_square_scalar():
    # loss = x^2 at x = 3 -> gradient 6
    p = Parameter("x", [[3.0]])
    tape = Tape()
    x = tape.leaf(p)
    loss = tape.mul(x, x)
    tape.backward(loss)
    assert p.grad[0, 0] == pytest.approx(6.0, abs=1e-12)


def test_backward_matmul_rule():
    # loss = sum(A @ B): dL/dA = ones @ B^T, dL/dB = A^T @ ones
    rng = np.random.default_rng(0)
    av, bv = rng.normal(size=(2, 3)), rng.normal(size=(3, 4))
    pa, pb = Parameter("a", av), Parameter("b", bv)
    tape = Tape()
    loss = tape.sum(tape.matmul(tape.leaf(pa), tape.leaf(pb)))
    tape.backward(loss)
    ones = np.ones((2, 4))
    assert np.allclose(pa.grad, ones @ bv.T, atol=1e-12)
    assert np.allclose(pb.grad, av.T @ ones, atol=1e-12)


def test_backward_rejects_non_scalar_loss():
    tape = Tape()
    a = tape.constant(np.ones((2, 2)))
    with pytest.raises(ShapeError, match="1x1"):
        tape.backward(a)


def test_backward_unreachable_parameter_zero_grad():
    p = Parameter("unused", np.ones((2, 2)))
    q = Parameter("used", [[2.0]])
    tape = Tape()
    tape.leaf(p)
    loss = tape.mul(tape.leaf(q), tape.leaf(q))
    tape.backward(loss)
    assert np.array_equal(p.grad, np.zeros((2, 2)))
    assert q.grad[0, 0] == pytest.approx(4.0)


def _mlp_loss(params):
    w1, b1, w2, x, target = params

    def build():
        tape = Tape()
        h = tape.gelu(tape.add(tape.matmul(tape.leaf(x), tape.leaf(w1)),
                               tape.leaf(b1)))
        out = tape.matmul(h, tape.leaf(w2))
        diff = tape.add(out, tape.scalar_mul(tape.constant(target), -1.0))
        return tape, tape.mean(tape.mul(diff, diff))

    return build


def test_two_layer_mlp_matches_finite_differences():
    rng = np.random.default_rng(42)
    params = [
        Parameter("w1", rng.normal(size=(3, 5))),
        Parameter("b1", rng.normal(size=(1, 5))),
        Parameter("w2", rng.normal(size=(5, 2))),
        Parameter("x", rng.normal(size=(4, 3))),
    ]
    target = rng.normal(size=(4, 2))
    build = _mlp_loss(params + [target])
    err = finite_diff_check(build, params, h=1e-4)
    assert err < 1e-4


def test_softmax_cross_entropy_matches_finite_differences():
    rng = np.random.default_rng(7)
    w = Parameter("w", rng.normal(size=(3, 4)))
    x = rng.normal(size=(2, 3))
    onehot = np.zeros((2, 4))
    onehot[0, 1] = onehot[1, 3] = 1.0

    def build():
        tape = Tape()
        probs = tape.row_softmax(tape.matmul(tape.constant(x), tape.leaf(w)))
        picked = tape.sum(tape.mul(probs, tape.constant(onehot)))
        return tape, tape.scalar_mul(tape.log(picked), -1.0)

    assert finite_diff_check(build, [w], h=1e-4) < 1e-4


def test_finite_diff_linear_is_machine_precision():
    p = Parameter("p", [[1.0, -2.0, 3.0]])
    c = np.array([[2.0], [0.5], [-1.0]])

    def build():
        tape = Tape()
        return tape, tape.matmul(tape.leaf(p), tape.constant(c))

    assert finite_diff_check(build, [p], h=1e-4) < 1e-9


def test_finite_diff_constant_function_zero_both_ways():
    p = Parameter("p", [[1.0, 2.0]])

    def build():
        tape = Tape()
        tape.leaf(p)
        return tape, tape.constant([[5.0]])

    assert finite_diff_check(build, [p], h=1e-4) == 0.0


def test_finite_diff_rejects_nondeterministic_fn():
    p = Parameter("p", [[1.0]])
    state = {"n": 0}

    def build():
        state["n"] += 1
        tape = Tape()
        return tape, tape.scalar_mul(tape.leaf(p), float(state["n"]))

    with pytest.raises(NondeterministicFunctionError):
        finite_diff_check(build, [p], h=1e-4)


def test_concat_and_slice_round_trip_gradients():
    a = Parameter("a", np.arange(6, dtype=float).reshape(2, 3))
    b = Parameter("b", np.arange(9, dtype=float).reshape(3, 3))
    tape = Tape()
    cat = tape.concat_rows([tape.leaf(a), tape.leaf(b)])
    # only the middle slice (rows 1..3) feeds the loss
    loss = tape.sum(tape.slice_rows(cat, 1, 4))
    tape.backward(loss)
    assert np.array_equal(a.grad, [[0, 0, 0], [1, 1, 1]])
    assert np.array_equal(b.grad, [[1, 1, 1], [1, 1, 1], [0, 0, 0]])


@given(st.integers(0, 2 ** 32 - 1))
@settings(max_examples=25, deadline=None)
def test_row_softmax_rows_are_simplexes(seed):
    rng = np.random.default_rng(seed)
    tape = Tape()
    y = tape.row_softmax(tape.constant(rng.normal(size=(5, 7)) * 10)).value
    assert np.abs(y.sum(axis=1) - 1.0).max() < 1e-9
    assert ((y > 0) & (y < 1)).all()


@given(st.integers(0, 2 ** 32 - 1),
       st.floats(-3, 3).filter(lambda v: abs(v) > 1e-3),
       st.floats(-3, 3).filter(lambda v: abs(v) > 1e-3))
@settings(max_examples=25, deadline=None)
def test_backward_linearity(seed, alpha, beta):
    # backward(a*f + b*g) == a*backward(f) + b*backward(g)
    rng = np.random.default_rng(seed)
    value = rng.normal(size=(3, 3))
    x = Parameter("x", value)
    c = rng.normal(size=(3, 3))

    def grad_of(build):
        x.zero_grad()
        tape = Tape()
        tape.backward(build(tape))
        return x.grad.copy()

    def f(tape):
        return tape.sum(tape.mul(tape.leaf(x), tape.leaf(x)))

    def g(tape):
        return tape.sum(tape.mul(tape.leaf(x), tape.constant(c)))

    def combo(tape):
        return tape.add(tape.scalar_mul(f(tape), alpha),
                        tape.scalar_mul(g(tape), beta))

    lhs = grad_of(combo)
    rhs = alpha * grad_of(f) + beta * grad_of(g)
    assert np.abs(lhs - rhs).max() < 1e-9


def test_determinism_bit_identical():
    rng = np.random.default_rng(3)
    w = Parameter("w", rng.normal(size=(4, 4)))
    x = rng.normal(size=(2, 4))

    def run():
        w.zero_grad()
        tape = Tape()
        loss = tape.mean(tape.gelu(tape.matmul(tape.constant(x), tape.leaf(w))))
        tape.backward(loss)
        return loss.value.copy(), w.grad.copy()

    v1, g1 = run()
    v2, g2 = run()
    assert np.array_equal(v1, v2) and np.array_equal(g1, g2)


def test_gradient_descent_step():
    p = Parameter("p", [[1.0, 2.0]])
    p.grad[...] = [[0.5, -0.5]]
    GradientDescent(lr=0.1).step([p])
    assert np.allclose(p.value, [[0.95, 2.05]], atol=1e-15)


def test_adamw_state_round_trip_resumes_identically():
    rng = np.random.default_rng(1)
    grads = [rng.normal(size=(2, 2)) for _ in range(6)]

    def run(split):
        p = Parameter("p", np.ones((2, 2)))
        opt = AdamW(lr=0.01, weight_decay=0.01)
        for i, g in enumerate(grads):
            if i == split:
                fresh = AdamW(lr=0.01, weight_decay=0.01)
                fresh.load_state_dict(opt.state_dict())
                opt = fresh
            p.grad[...] = g
            opt.step([p])
            p.zero_grad()
        return p.value.copy()

    assert np.array_equal(run(split=-1), run(split=3))


def test_pow_const_gradient():
    p = Parameter("p", [[0.3]])

    def build():
        tape = Tape()
        return tape, tape.pow_const(tape.leaf(p), 2.5)

    assert finite_diff_check(build, [p], h=1e-5) < 1e-4


def test_col_softmax_matches_transposed_row_softmax():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(4, 3))
    t1, t2 = Tape(), Tape()
    a = t1.col_softmax(t1.constant(x)).value
    b = t2.row_softmax(t2.constant(x.T)).value.T
    assert np.allclose(a, b, atol=1e-15)
