import io

import numpy as np
import pytest

from cslab.tensorcore import (
    NonFinite,
    NotScalar,
    ShapeMismatch,
    Tape,
    Tensor,
    finite_diff_check,
    read_tensors,
    write_tensors,
)


def matmul_oracle(a, b):
    """Independent triple-loop scalar matmul."""
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = [[0.0] * m for _ in range(n)]
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += a[i][t] * b[t][j]
            out[i][j] = s
    return np.array(out)


def test_matmul_identity():
    t = Tape()
    a = t.constant(Tensor([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]))
    i3 = t.constant(Tensor(np.eye(3)))
    out = t.apply_primitive("matmul", [a, i3])
    assert np.array_equal(out.data, a.data)


def test_matmul_derived_case():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    b = np.array([[5.0, 6.0], [7.0, 8.0]])
    t = Tape()
    out = t.apply_primitive("matmul", [t.constant(Tensor(a)), t.constant(Tensor(b))])
    expect = matmul_oracle(a, b)
    assert np.array_equal(out.data, np.array([[19.0, 22.0], [43.0, 50.0]]))
    assert np.array_equal(out.data, expect)


def test_matmul_random_vs_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 2))
        t = Tape()
        out = t.apply_primitive("matmul", [t.constant(Tensor(a)), t.constant(Tensor(b))])
        assert np.allclose(out.data, matmul_oracle(a, b), atol=1e-12)


def test_matmul_shape_mismatch():
    t = Tape()
    with pytest.raises(ShapeMismatch):
        t.apply_primitive("matmul", [t.constant(Tensor(np.ones((2, 3)))),
                                     t.constant(Tensor(np.ones((2, 3))))])


def test_softmax_symmetry_and_simplex():
    t = Tape()
    out = t.apply_primitive("softmax_last_dim", [t.constant(Tensor([0.0, 0.0]))])
    assert np.allclose(out.data, [0.5, 0.5], atol=0)
    rng = np.random.default_rng(1)
    for _ in range(50):
        x = rng.normal(scale=5.0, size=(4, 7))
        t = Tape()
        s = t.apply_primitive("softmax_last_dim", [t.constant(Tensor(x))])
        assert (s.data >= 0).all()
        assert np.abs(s.data.sum(axis=-1) - 1.0).max() < 1e-12


def test_concat_split_identity():
    rng = np.random.default_rng(2)
    a = rng.normal(size=(5, 3))
    b = rng.normal(size=(5, 4))
    t = Tape()
    cat = t.apply_primitive("concat_last_dim",
                            [t.constant(Tensor(a)), t.constant(Tensor(b))])
    left = t.apply_primitive("split_last_dim", [cat], {"start": 0, "stop": 3})
    right = t.apply_primitive("split_last_dim", [cat], {"start": 3, "stop": 7})
    assert np.array_equal(left.data, a)
    assert np.array_equal(right.data, b)


def test_backward_sum_gives_ones():
    t = Tape()
    x = t.leaf(Tensor(np.arange(12, dtype=float).reshape(3, 4)))
    loss = t.apply_primitive("sum", [x])
    grads = t.backward(loss)
    assert np.array_equal(t.grad(grads, x).data, np.ones((3, 4)))


def test_backward_mean_of_square():
    # loss = mean(x*x), x = [1, 2] -> gradient 2x/2 = [1, 2]
    t = Tape()
    x = t.leaf(Tensor([1.0, 2.0]))
    sq = t.apply_primitive("mul", [x, x])
    loss = t.apply_primitive("mean", [sq])
    grads = t.backward(loss)
    assert np.allclose(t.grad(grads, x).data, [1.0, 2.0], atol=1e-15)


def test_backward_log_softmax_pick_matches_fd():
    rng = np.random.default_rng(3)
    x0 = rng.normal(size=4)
    pick = Tensor(np.array([0.0, 0.0, 1.0, 0.0]))

    def f(tape, params):
        (x,) = params
        lp = tape.apply_primitive("log_softmax_last_dim", [x])
        picked = tape.apply_primitive("mul", [lp, tape.constant(pick)])
        return tape.apply_primitive("sum", [picked])

    assert finite_diff_check(f, [Tensor(x0)], h=1e-5) < 1e-6


def test_backward_requires_scalar():
    t = Tape()
    x = t.leaf(Tensor([1.0, 2.0]))
    y = t.apply_primitive("relu", [x])
    with pytest.raises(NotScalar):
        t.backward(y)


def test_backward_unreachable_leaf_is_zero():
    t = Tape()
    x = t.leaf(Tensor([1.0, 2.0]))
    y = t.leaf(Tensor([[3.0, 4.0]]))
    loss = t.apply_primitive("sum", [x])
    grads = t.backward(loss)
    assert np.array_equal(t.grad(grads, y).data, np.zeros((1, 2)))


def test_nonfinite_detection():
    t = Tape()
    x = t.constant(Tensor([1.0, 2.0]))
    with pytest.raises(NonFinite):
        t.apply_primitive("scale", [x], {"factor": float("inf")})


def test_replay_is_bit_exact():
    rng = np.random.default_rng(4)
    t = Tape()
    x = t.leaf(Tensor(rng.normal(size=(6, 8))))
    w = t.leaf(Tensor(rng.normal(size=(8, 8))))
    g = t.leaf(Tensor(np.ones(8)))
    b = t.leaf(Tensor(np.zeros(8)))
    h = t.apply_primitive("matmul", [x, w])
    h = t.apply_primitive("layer_norm", [h, g, b])
    h = t.apply_primitive("relu", [h])
    h = t.apply_primitive("softmax_last_dim", [h])
    t.apply_primitive("sum", [h])
    assert t.replay()


# -- per-primitive gradient fidelity -----------------------------------------
# Each case reduces the primitive output to a scalar through a fixed random
# cotangent, so the finite-difference check covers the full VJP.

def _reduce_with(tape, y, cot):
    prod = tape.apply_primitive("mul", [y, tape.constant(cot)])
    return tape.apply_primitive("sum", [prod])


PRIM_CASES = []


def _case(name, make_inputs, build):
    PRIM_CASES.append(pytest.param(make_inputs, build, id=name))


_case("matmul",
      lambda rng: [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))],
      lambda t, ps: t.apply_primitive("matmul", ps))
_case("add_same",
      lambda rng: [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))],
      lambda t, ps: t.apply_primitive("add", ps))
_case("add_bias_broadcast",
      lambda rng: [rng.normal(size=(3, 4)), rng.normal(size=4)],
      lambda t, ps: t.apply_primitive("add", ps))
_case("mul_same",
      lambda rng: [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))],
      lambda t, ps: t.apply_primitive("mul", ps))
_case("mul_column_broadcast",
      lambda rng: [rng.normal(size=(3, 1)), rng.normal(size=(3, 4))],
      lambda t, ps: t.apply_primitive("mul", ps))
_case("scale",
      lambda rng: [rng.normal(size=(2, 3))],
      lambda t, ps: t.apply_primitive("scale", ps, {"factor": -1.7}))
_case("concat_last_dim",
      lambda rng: [rng.normal(size=(3, 2)), rng.normal(size=(3, 5))],
      lambda t, ps: t.apply_primitive("concat_last_dim", ps))
_case("split_last_dim",
      lambda rng: [rng.normal(size=(3, 6))],
      lambda t, ps: t.apply_primitive("split_last_dim", ps, {"start": 1, "stop": 4}))
_case("softmax_last_dim",
      lambda rng: [rng.normal(size=(3, 5))],
      lambda t, ps: t.apply_primitive("softmax_last_dim", ps))
_case("log_softmax_last_dim",
      lambda rng: [rng.normal(size=(3, 5))],
      lambda t, ps: t.apply_primitive("log_softmax_last_dim", ps))
_case("layer_norm",
      lambda rng: [rng.normal(size=(3, 6)), rng.normal(size=6), rng.normal(size=6)],
      lambda t, ps: t.apply_primitive("layer_norm", ps))
_case("relu",
      lambda rng: [rng.normal(size=(3, 4)) + 0.05],  # keep entries off the kink
      lambda t, ps: t.apply_primitive("relu", ps))
_case("transpose_last_two",
      lambda rng: [rng.normal(size=(3, 4))],
      lambda t, ps: t.apply_primitive("transpose_last_two", ps))
_case("embedding_lookup",
      lambda rng: [rng.normal(size=(5, 3))],
      lambda t, ps: t.apply_primitive("embedding_lookup", ps,
                                      {"indices": [0, 2, 2, 4]}))
_case("sum",
      lambda rng: [rng.normal(size=(2, 3))],
      lambda t, ps: t.apply_primitive("sum", ps))
_case("mean",
      lambda rng: [rng.normal(size=(2, 3))],
      lambda t, ps: t.apply_primitive("mean", ps))


@pytest.mark.parametrize("make_inputs,build", PRIM_CASES)
def test_primitive_gradients_match_finite_differences(make_inputs, build):
    rng = np.random.default_rng(11)
    raw = make_inputs(rng)
    cot_shape_probe = None

    def f(tape, params):
        y = build(tape, params)
        nonlocal cot_shape_probe
        if cot_shape_probe is None:
            cot_shape_probe = Tensor(rng.normal(size=y.shape))
        if y.data.ndim == 0:
            return y
        return _reduce_with(tape, y, cot_shape_probe)

    err = finite_diff_check(f, [Tensor(a) for a in raw], h=1e-5)
    assert err < 1e-6, f"gradient error {err}"


def test_finite_diff_check_constant_and_linear():
    def const(tape, params):
        z = tape.apply_primitive("scale", [params[0]], {"factor": 0.0})
        return tape.apply_primitive("sum", [z])

    assert finite_diff_check(const, [Tensor([1.0, -2.0])]) == 0.0

    w = Tensor(np.array([0.5, -1.5, 2.0]))

    def linear(tape, params):
        prod = tape.apply_primitive("mul", [params[0], tape.constant(w)])
        return tape.apply_primitive("sum", [prod])

    assert finite_diff_check(linear, [Tensor([1.0, 2.0, 3.0])]) < 1e-9


def test_tensor_serialization_round_trip():
    rng = np.random.default_rng(5)
    tensors = {
        "input.w": Tensor(rng.normal(size=(4, 3))),
        "gate.b": Tensor(rng.normal(size=2)),
        "scalar": Tensor(np.asarray(3.14159)),
    }
    buf = io.BytesIO()
    write_tensors(buf, tensors)
    buf.seek(0)
    back = read_tensors(buf)
    assert set(back) == set(tensors)
    for name in tensors:
        assert back[name].shape == tensors[name].shape
        assert np.array_equal(back[name].data, tensors[name].data)


def test_tensor_immutable():
    t = Tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        t.data[0] = 5.0
