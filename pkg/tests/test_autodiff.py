import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gudrl.autodiff import (
    AdamState,
    GradientError,
    PRIMITIVE_KINDS,
    ShapeError,
    Tape,
    Tensor,
    adam_step,
    apply_primitive,
    cross_entropy_loss,
    finite_difference_gradient,
    parameter,
)

FD_TOL = 1e-4


def rel_err(a, b):
    return abs(a - b) / max(1.0, abs(a), abs(b))


def check_grads(build, params, coords_per_tensor=8, seed=0):
    """Compare reverse-mode grads of build() against central differences."""
    tape = Tape()
    loss = build(tape)
    tape.backward(loss)
    rng = np.random.default_rng(seed)
    for p in params:
        assert p.grad is not None, f"no gradient reached {p.name}"
        size = p.values.size
        coords = rng.choice(size, size=min(coords_per_tensor, size), replace=False)
        fd = finite_difference_gradient(lambda: float(build(Tape()).values), p, coords=coords)
        for k in coords:
            a, b = p.grad.reshape(-1)[k], fd.reshape(-1)[k]
            assert rel_err(a, b) <= FD_TOL, f"{p.name}[{k}]: ad={a} fd={b}"
        p.grad = None


# -- spec examples -----------------------------------------------------------


def test_sigmoid_at_zero():
    out = apply_primitive(Tape(), "sigmoid", [Tensor([0.0])])
    assert out.values[0] == 0.5


def test_max_over_set_elementwise():
    out = apply_primitive(Tape(), "max_over_set", [Tensor([1.0, 2.0]), Tensor([2.0, 1.0])])
    assert np.array_equal(out.values, [2.0, 2.0])


def test_matmul_dot_product():
    out = apply_primitive(Tape(), "matmul", [Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])])
    assert out.values[0, 0] == 11.0  # 1*3 + 2*4


def test_cross_entropy_uniform_two_way():
    loss = cross_entropy_loss(Tape(), Tensor([0.0, 0.0]), 0)
    assert math.isclose(float(loss.values), math.log(2.0), rel_tol=1e-12)


def test_cross_entropy_hand_softmax():
    # softmax(ln 3, 0) = (0.75, 0.25)
    loss0 = cross_entropy_loss(Tape(), Tensor([math.log(3.0), 0.0]), 0)
    loss1 = cross_entropy_loss(Tape(), Tensor([math.log(3.0), 0.0]), 1)
    assert math.isclose(float(loss0.values), math.log(4.0 / 3.0), rel_tol=1e-12)
    assert math.isclose(float(loss1.values), math.log(4.0), rel_tol=1e-12)


def test_cross_entropy_target_out_of_range():
    with pytest.raises(IndexError):
        cross_entropy_loss(Tape(), Tensor([0.0, 0.0]), 2)


def test_backward_sigmoid_derivative():
    x = parameter([0.0], "x")
    tape = Tape()
    loss = tape.mean_all(tape.sigmoid(x))
    tape.backward(loss)
    assert math.isclose(x.grad[0], 0.25, rel_tol=1e-12)


def test_backward_identity():
    x = parameter(1.7, "x")
    tape = Tape()
    loss = tape.mean_all(x)
    tape.backward(loss)
    assert x.grad == 1.0


def test_backward_product_rule():
    x = parameter([2.0], "x")
    y = parameter([3.0], "y")
    tape = Tape()
    loss = tape.mean_all(tape.multiply(x, y))
    tape.backward(loss)
    assert x.grad[0] == 3.0 and y.grad[0] == 2.0


def test_backward_rejects_non_scalar():
    x = parameter([1.0, 2.0], "x")
    tape = Tape()
    out = tape.relu(x)
    with pytest.raises(ValueError, match="scalar"):
        tape.backward(out)


def test_adam_single_step_hand_value():
    w = parameter([1.0], "w")
    w.grad = np.array([1.0])
    state = AdamState()
    adam_step([w], state)
    # m_hat = 1, v_hat = 1 -> w = 1 - lr / (1 + eps)
    assert abs(w.values[0] - 0.999) < 1e-9
    assert state.step == 1
    assert w.grad is None


def test_adam_two_steps_hand_value():
    w = parameter([1.0], "w")
    state = AdamState()
    for _ in range(2):
        w.grad = np.array([1.0])
        adam_step([w], state)
    assert abs(w.values[0] - 0.998) < 1e-6


def test_adam_zero_gradient_fixed_point():
    w = parameter([[1.0, -2.0], [0.5, 3.0]], "w")
    w.grad = np.zeros((2, 2))
    before = w.values.copy()
    adam_step([w], AdamState())
    assert np.array_equal(w.values, before)


def test_adam_missing_grad_names_parameter():
    w = parameter([1.0], "my_weight")
    with pytest.raises(GradientError, match="my_weight"):
        adam_step([w], AdamState())


def test_adam_clips_global_norm():
    w = parameter(np.zeros(4), "w")
    w.grad = np.full(4, 100.0)  # norm 200 > 10
    state = AdamState()
    adam_step([w], state, clip_norm=10.0)
    # clipped gradient direction is the same, so update equals the unit case
    w2 = parameter(np.zeros(4), "w")
    w2.grad = np.full(4, 5.0)  # norm 10, on the clip boundary
    adam_step([w2], AdamState(), clip_norm=10.0)
    assert np.allclose(w.values, w2.values, rtol=0, atol=1e-15)


# -- shape diagnostics --------------------------------------------------------


def test_shape_error_names_kind_and_shapes():
    with pytest.raises(ShapeError) as err:
        apply_primitive(Tape(), "matmul", [Tensor(np.ones((1, 3))), Tensor(np.ones((2, 1)))])
    assert "matmul" in str(err.value)
    assert "(1, 3)" in str(err.value) and "(2, 1)" in str(err.value)


def test_max_over_set_rejects_mixed_shapes():
    with pytest.raises(ShapeError, match="max_over_set"):
        apply_primitive(Tape(), "max_over_set", [Tensor([1.0]), Tensor([1.0, 2.0])])


def test_add_rejects_incompatible():
    with pytest.raises(ShapeError, match="add"):
        apply_primitive(Tape(), "add", [Tensor(np.ones(3)), Tensor(np.ones(4))])


def test_unknown_kind_rejected():
    with pytest.raises(ValueError, match="unknown primitive"):
        apply_primitive(Tape(), "convolve", [Tensor([1.0])])


# -- gradient checks for every primitive --------------------------------------


def _rand(rng, *shape):
    return parameter(rng.uniform(-2.0, 2.0, size=shape), f"p{shape}")


def test_gradients_add_broadcast():
    rng = np.random.default_rng(0)
    a, b = _rand(rng, 3, 4), _rand(rng, 4)
    check_grads(lambda t: t.mean_all(t.tanh(t.add(a, b))), [a, b])


def test_gradients_multiply():
    rng = np.random.default_rng(1)
    a, b = _rand(rng, 3, 4), _rand(rng, 3, 4)
    check_grads(lambda t: t.mean_all(t.multiply(a, b)), [a, b])


def test_gradients_matmul_2d():
    rng = np.random.default_rng(2)
    a, b = _rand(rng, 3, 4), _rand(rng, 4, 5)
    check_grads(lambda t: t.mean_all(t.tanh(t.matmul(a, b))), [a, b])


def test_gradients_matmul_batched_transpose():
    rng = np.random.default_rng(3)
    a, b = _rand(rng, 2, 3, 5, 4), _rand(rng, 2, 3, 6, 4)
    check_grads(lambda t: t.mean_all(t.tanh(t.matmul(a, b, transpose_b=True))), [a, b])


def test_gradients_concat():
    rng = np.random.default_rng(4)
    a, b, c = _rand(rng, 2, 3), _rand(rng, 2, 2), _rand(rng, 2, 4)
    check_grads(lambda t: t.mean_all(t.sigmoid(t.concat([a, b, c], axis=1))), [a, b, c])


@pytest.mark.parametrize("kind", ["sigmoid", "tanh", "relu", "softmax"])
def test_gradients_unary(kind):
    rng = np.random.default_rng(hash(kind) % 2**31)
    x = _rand(rng, 4, 5)
    check_grads(lambda t: t.mean_all(apply_primitive(t, kind, [x])), [x])


def test_gradients_max_over_set():
    rng = np.random.default_rng(6)
    xs = [_rand(rng, 3, 4) for _ in range(4)]
    check_grads(lambda t: t.mean_all(t.max_over_set(xs)), xs)


def test_gradients_embed_lookup():
    rng = np.random.default_rng(7)
    table = _rand(rng, 5, 3)
    idx = [0, 2, 2, 4]  # repeated row accumulates
    check_grads(lambda t: t.mean_all(t.tanh(t.embed_lookup(table, idx))), [table])


def test_gradients_layer_norm():
    rng = np.random.default_rng(8)
    x, g, b = _rand(rng, 4, 6), _rand(rng, 6), _rand(rng, 6)
    check_grads(lambda t: t.mean_all(t.layer_norm(x, g, b)), [x, g, b])


def test_gradients_cross_entropy_batch():
    rng = np.random.default_rng(9)
    logits = _rand(rng, 5, 3)
    targets = rng.integers(0, 3, size=5)
    check_grads(lambda t: t.mean_all(t.cross_entropy(logits, targets)), [logits])


def test_gradients_lstm_cell():
    rng = np.random.default_rng(10)
    h = 4
    x4, wh = _rand(rng, 3, 4 * h), _rand(rng, h, 4 * h)
    h0 = parameter(rng.uniform(-0.5, 0.5, (3, h)), "h0")
    c0 = parameter(rng.uniform(-0.5, 0.5, (3, h)), "c0")
    check_grads(lambda t: t.mean_all(t.lstm_cell(x4, wh, h0, c0)), [x4, wh, h0, c0])


def test_gradients_lstm_sequence():
    rng = np.random.default_rng(11)
    h, T, B = 3, 5, 4
    x4, wh = _rand(rng, T, B, 4 * h), _rand(rng, h, 4 * h)
    h0 = parameter(np.zeros((B, h)), "h0")
    c0 = parameter(np.zeros((B, h)), "c0")
    lengths = np.array([5, 4, 2, 1])

    def build(t):
        seq = t.lstm_sequence(x4, wh, h0, c0, lengths)
        return t.mean_all(seq)

    check_grads(build, [x4, wh, h0, c0], coords_per_tensor=12)


def test_lstm_sequence_matches_unrolled_cells():
    """The fused recurrence must agree with step-by-step cell applications."""
    rng = np.random.default_rng(12)
    h, T, B = 4, 6, 3
    x4 = parameter(rng.uniform(-1, 1, (T, B, 4 * h)), "x4")
    wh = parameter(rng.uniform(-0.5, 0.5, (h, 4 * h)), "wh")
    lengths = np.array([T, T, T])
    tape = Tape()
    zeros = tape.constant(np.zeros((B, h)))
    seq = tape.lstm_sequence(x4, wh, zeros, zeros, lengths)
    t2 = Tape()
    hh = t2.constant(np.zeros((B, h)))
    cc = t2.constant(np.zeros((B, h)))
    for t_i in range(T):
        step = t2.take(x4, t_i, axis=0)
        hc = t2.lstm_cell(step, wh, hh, cc)
        hh = t2.slice_axis(hc, 1, 0, h)
        cc = t2.slice_axis(hc, 1, h, 2 * h)
        assert np.array_equal(seq.values[t_i], hh.values)


def test_gradients_gather_scatter_roundtrip():
    rng = np.random.default_rng(13)
    x = _rand(rng, 6, 3)
    idx = np.array([0, 2, 3, 5, 8, 9])

    def build(t):
        spread = t.scatter_rows(x, idx, 10)
        back = t.gather_rows(spread, idx)
        return t.mean_all(t.sigmoid(back))

    check_grads(build, [x])


def test_full_chain_gradient():
    """A composite expression through most primitives at once."""
    rng = np.random.default_rng(14)
    x = _rand(rng, 4, 6)
    w = _rand(rng, 6, 6)
    g, b = _rand(rng, 6), _rand(rng, 6)

    def build(t):
        y = t.layer_norm(t.matmul(x, w), g, b)
        z = t.max_over_set([t.relu(y), t.tanh(y), t.sigmoid(y)])
        return t.mean_all(t.softmax(z))

    check_grads(build, [x, w, g, b])


# -- invariants ----------------------------------------------------------------


def test_accumulation_linearity():
    """Gradients of f + g are the sums of the separate gradients."""
    rng = np.random.default_rng(15)
    vals = rng.uniform(-2, 2, (3, 3))

    def grads(combine):
        x = parameter(vals.copy(), "x")
        tape = Tape()
        f = tape.mean_all(tape.sigmoid(x))
        g = tape.mean_all(tape.tanh(tape.matmul(x, x)))
        tape.backward(combine(tape, f, g))
        return x.grad

    both = grads(lambda t, f, g: t.add(f, g))
    f_only = grads(lambda t, f, g: f)
    g_only = grads(lambda t, f, g: g)
    assert np.allclose(both, f_only + g_only, rtol=0, atol=1e-12)


def test_determinism_bit_identical():
    def run():
        rng = np.random.default_rng(99)
        x = parameter(rng.uniform(-2, 2, (4, 4)), "x")
        w = parameter(rng.uniform(-2, 2, (4, 4)), "w")
        tape = Tape()
        loss = tape.mean_all(tape.softmax(tape.matmul(tape.tanh(x), w)))
        tape.backward(loss)
        return loss.values.copy(), x.grad.copy(), w.grad.copy()

    l1, gx1, gw1 = run()
    l2, gx2, gw2 = run()
    assert np.array_equal(l1, l2)
    assert np.array_equal(gx1, gx2) and np.array_equal(gw1, gw2)


def test_tape_replay_reproduces_outputs():
    rng = np.random.default_rng(16)
    x = parameter(rng.uniform(-2, 2, (3, 5)), "x")
    w = parameter(rng.uniform(-2, 2, (5, 4)), "w")
    tape = Tape()
    y = tape.softmax(tape.matmul(x, w))
    z = tape.mean_all(tape.relu(y))
    replayed = tape.replay()
    for node, values in zip(tape.nodes, replayed):
        assert np.array_equal(node.output.values, np.asarray(values))
    assert len(tape.nodes) >= 4 and z.values.shape == ()


def test_tape_topological_order():
    x = parameter([1.0, 2.0], "x")
    tape = Tape()
    tape.mean_all(tape.tanh(tape.sigmoid(x)))
    seen = {x.id}
    for node in tape.nodes:
        for tid in node.input_ids:
            assert tid in seen or tid < node.output_id
        seen.add(node.output_id)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8))
def test_softmax_is_probability_vector(logits):
    out = apply_primitive(Tape(), "softmax", [Tensor(logits)])
    assert np.all(out.values >= 0.0)
    assert abs(out.values.sum() - 1.0) <= 1e-9


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_outputs_finite_on_finite_inputs(seed):
    rng = np.random.default_rng(seed)
    x = parameter(rng.uniform(-2, 2, (3, 4)), "x")
    w = parameter(rng.uniform(-2, 2, (4, 4)), "w")
    g, b = parameter(rng.uniform(-2, 2, 4), "g"), parameter(rng.uniform(-2, 2, 4), "b")
    tape = Tape()
    y = tape.layer_norm(tape.matmul(tape.sigmoid(x), w), g, b)
    loss = tape.mean_all(tape.softmax(y))
    tape.backward(loss)
    for t in (x, w, g, b, y, loss):
        assert np.all(np.isfinite(t.values))
        if t.grad is not None:
            assert np.all(np.isfinite(t.grad))


def test_grad_accumulates_across_reuse():
    x = parameter([1.5], "x")
    tape = Tape()
    y = tape.multiply(x, x)  # x used twice: dy/dx = 2x
    tape.backward(tape.mean_all(y))
    assert math.isclose(x.grad[0], 3.0, rel_tol=1e-12)


def test_all_primitive_kinds_dispatch():
    rng = np.random.default_rng(17)
    t = Tape()
    x = Tensor(rng.uniform(-1, 1, (2, 4)))
    args = {
        "add": ([x, Tensor(np.ones((2, 4)))], {}),
        "multiply": ([x, x], {}),
        "matmul": ([x, Tensor(np.ones((4, 2)))], {}),
        "concat": ([x, x], {"axis": 0}),
        "sigmoid": ([x], {}),
        "tanh": ([x], {}),
        "relu": ([x], {}),
        "max_over_set": ([x, x], {}),
        "embed_lookup": ([Tensor(np.eye(4))], {"indices": [1, 3]}),
        "layer_norm": ([x, Tensor(np.ones(4)), Tensor(np.zeros(4))], {}),
        "softmax": ([x], {}),
    }
    assert set(args) == set(PRIMITIVE_KINDS)
    for kind, (inputs, attrs) in args.items():
        out = apply_primitive(t, kind, inputs, **attrs)
        assert np.all(np.isfinite(out.values))
