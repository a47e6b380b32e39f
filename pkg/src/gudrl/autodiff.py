"""Minimal reverse-mode differentiation on float64 numpy arrays.

A Tape records every operation of a forward pass in execution order, so the
node list is topologically sorted by construction.  backward() walks the list
in reverse and accumulates exact derivatives into Tensor.grad.  Tapes are
rebuilt per forward pass; there is no static graph.

The public primitive set (see PRIMITIVE_KINDS / apply_primitive) covers the
operations the policy architecture is built from.  A few extra internal ops
exist for efficiency: shape plumbing (reshape / transpose / gather / scatter),
reductions, and a fused LSTM step/sequence with a hand-written backward pass
so the recurrence does not pay per-timestep tape overhead.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

_TENSOR_IDS = itertools.count()

PRIMITIVE_KINDS = (
    "add",
    "multiply",
    "matmul",
    "concat",
    "sigmoid",
    "tanh",
    "relu",
    "max_over_set",
    "embed_lookup",
    "layer_norm",
    "softmax",
)


class ShapeError(ValueError):
    """Raised when operand shapes do not conform to an op."""


class GradientError(RuntimeError):
    """Raised when a gradient is missing or malformed."""


class Tensor:
    """Dense float64 array with an optional gradient slot."""

    __slots__ = ("values", "grad", "requires_grad", "name", "id")

    def __init__(self, values, requires_grad=False, name=None):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self.id = next(_TENSOR_IDS)

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self):
        return self.values.size

    def item(self):
        return float(self.values)

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.values.shape})"


def parameter(values, name):
    """A named leaf tensor that collects gradients."""
    return Tensor(values, requires_grad=True, name=name)


class Node:
    """One recorded op: kind, operands, output and saved activations."""

    __slots__ = ("kind", "inputs", "output", "attrs", "aux")

    def __init__(self, kind, inputs, output, attrs=None, aux=None):
        self.kind = kind
        self.inputs = inputs
        self.output = output
        self.attrs = attrs or {}
        self.aux = aux

    @property
    def input_ids(self):
        return [t.id for t in self.inputs]

    @property
    def output_id(self):
        return self.output.id


def _unbroadcast(grad, shape):
    """Reduce a broadcasted gradient back to the operand's shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _sigmoid(x):
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def _softmax(x):
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _swap(a):
    return np.swapaxes(a, -1, -2)


def _lstm_gates(pre, hidden):
    """Activate a (n, 4H) gate pre-activation laid out as [i, f, o | g]."""
    h = hidden
    s = _sigmoid(pre[:, : 3 * h])
    g = np.tanh(pre[:, 3 * h :])
    return s[:, :h], s[:, h : 2 * h], g, s[:, 2 * h :]


class Tape:
    """Ordered record of one forward pass."""

    def __init__(self):
        self.nodes = []

    # -- recording ---------------------------------------------------------

    def _emit(self, kind, inputs, values, attrs=None, aux=None):
        out = Tensor(values, requires_grad=any(t.requires_grad for t in inputs))
        self.nodes.append(Node(kind, list(inputs), out, attrs, aux))
        return out

    def constant(self, values):
        return Tensor(values, requires_grad=False)

    # -- spec primitives ---------------------------------------------------

    def add(self, a, b):
        try:
            values = a.values + b.values
        except ValueError:
            raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")
        return self._emit("add", [a, b], values)

    def multiply(self, a, b):
        try:
            values = a.values * b.values
        except ValueError:
            raise ShapeError(f"multiply: incompatible shapes {a.shape} and {b.shape}")
        return self._emit("multiply", [a, b], values)

    def matmul(self, a, b, transpose_b=False):
        av, bv = a.values, b.values
        if av.ndim < 2 or bv.ndim < 2:
            raise ShapeError(f"matmul: operands must be >=2-D, got {a.shape} and {b.shape}")
        inner_b = bv.shape[-1] if transpose_b else bv.shape[-2]
        if av.shape[-1] != inner_b:
            raise ShapeError(f"matmul: inner dimensions differ, {a.shape} and {b.shape}")
        if bv.ndim > 2 and av.shape[:-2] != bv.shape[:-2]:
            raise ShapeError(f"matmul: batch dimensions differ, {a.shape} and {b.shape}")
        values = av @ (_swap(bv) if transpose_b else bv)
        return self._emit("matmul", [a, b], values, attrs={"transpose_b": transpose_b})

    def concat(self, tensors, axis=0):
        shapes = [t.shape for t in tensors]
        base = list(shapes[0])
        for s in shapes[1:]:
            if len(s) != len(base) or any(
                i != axis % len(base) and s[i] != base[i] for i in range(len(base))
            ):
                raise ShapeError(f"concat: incompatible shapes {shapes} along axis {axis}")
        values = np.concatenate([t.values for t in tensors], axis=axis)
        sizes = [t.shape[axis] for t in tensors]
        return self._emit("concat", list(tensors), values, attrs={"axis": axis, "sizes": sizes})

    def sigmoid(self, x):
        return self._emit("sigmoid", [x], _sigmoid(x.values))

    def tanh(self, x):
        return self._emit("tanh", [x], np.tanh(x.values))

    def relu(self, x):
        return self._emit("relu", [x], np.maximum(x.values, 0.0))

    def max_over_set(self, tensors):
        shapes = {t.shape for t in tensors}
        if len(shapes) != 1:
            raise ShapeError(f"max_over_set: inputs must share one shape, got {sorted(shapes)}")
        stacked = np.stack([t.values for t in tensors])
        winner = np.argmax(stacked, axis=0)  # first max wins on ties
        values = np.take_along_axis(stacked, winner[None], axis=0)[0]
        return self._emit("max_over_set", list(tensors), values, aux=winner)

    def embed_lookup(self, table, indices):
        idx = np.asarray(indices, dtype=np.intp)
        if table.values.ndim != 2:
            raise ShapeError(f"embed_lookup: table must be 2-D, got {table.shape}")
        if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
            raise ShapeError(
                f"embed_lookup: index out of range for table of {table.shape[0]} rows"
            )
        return self._emit("embed_lookup", [table], table.values[idx], attrs={"indices": idx})

    def layer_norm(self, x, gain, bias, eps=1e-5):
        d = x.shape[-1]
        if gain.shape != (d,) or bias.shape != (d,):
            raise ShapeError(
                f"layer_norm: gain/bias must have shape ({d},), got {gain.shape} and {bias.shape}"
            )
        mu = x.values.mean(axis=-1, keepdims=True)
        var = x.values.var(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.values - mu) * inv
        values = xhat * gain.values + bias.values
        return self._emit("layer_norm", [x, gain, bias], values, attrs={"eps": eps}, aux=(xhat, inv))

    def softmax(self, x):
        return self._emit("softmax", [x], _softmax(x.values))

    # -- loss --------------------------------------------------------------

    def cross_entropy(self, logits, targets):
        """Per-row -log softmax(logits)[target]; scalar for a single vector."""
        lv = logits.values
        single = lv.ndim == 1
        l2 = lv[None] if single else lv
        t = np.atleast_1d(np.asarray(targets, dtype=np.intp))
        if t.shape[0] != l2.shape[0]:
            raise ShapeError(
                f"cross_entropy: {t.shape[0]} targets for {l2.shape[0]} logit rows"
            )
        if t.size and (t.min() < 0 or t.max() >= l2.shape[-1]):
            raise IndexError(
                f"cross_entropy: target action out of range for {l2.shape[-1]} actions"
            )
        m = l2.max(axis=-1, keepdims=True)
        lse = m[:, 0] + np.log(np.exp(l2 - m).sum(axis=-1))
        losses = lse - l2[np.arange(l2.shape[0]), t]
        values = losses[0] if single else losses
        probs = _softmax(l2)
        return self._emit(
            "cross_entropy", [logits], values, attrs={"targets": t, "single": single}, aux=probs
        )

    # -- internal plumbing ops ----------------------------------------------

    def reshape(self, x, shape):
        return self._emit("reshape", [x], x.values.reshape(shape), attrs={"shape": shape})

    def transpose(self, x, axes):
        return self._emit("transpose", [x], np.transpose(x.values, axes), attrs={"axes": axes})

    def take(self, x, index, axis):
        values = np.take(x.values, index, axis=axis)
        return self._emit("take", [x], values, attrs={"index": index, "axis": axis})

    def slice_axis(self, x, axis, start, stop):
        sl = [slice(None)] * x.values.ndim
        sl[axis] = slice(start, stop)
        return self._emit(
            "slice_axis", [x], x.values[tuple(sl)], attrs={"axis": axis, "start": start, "stop": stop}
        )

    def gather_rows(self, x, indices):
        idx = np.asarray(indices, dtype=np.intp)
        return self._emit("gather_rows", [x], x.values[idx], attrs={"indices": idx})

    def scatter_rows(self, x, indices, n_rows):
        idx = np.asarray(indices, dtype=np.intp)
        values = np.zeros((n_rows,) + x.shape[1:])
        values[idx] = x.values
        return self._emit("scatter_rows", [x], values, attrs={"indices": idx, "n_rows": n_rows})

    def scale(self, x, s):
        return self._emit("scale", [x], x.values * s, attrs={"s": float(s)})

    def sum_all(self, x):
        return self._emit("sum_all", [x], np.float64(x.values.sum()))

    def mean_all(self, x):
        return self._emit("mean_all", [x], np.float64(x.values.mean()))

    def lstm_cell(self, x4, w_h, h, c):
        """One LSTM step; returns concat(h', c') of shape (n, 2H)."""
        hidden = w_h.shape[0]
        if x4.shape[-1] != 4 * hidden:
            raise ShapeError(f"lstm_cell: expected (n, {4 * hidden}) inputs, got {x4.shape}")
        pre = x4.values + h.values @ w_h.values
        i, f, g, o = _lstm_gates(pre, hidden)
        c_new = f * c.values + i * g
        tc = np.tanh(c_new)
        h_new = o * tc
        values = np.concatenate([h_new, c_new], axis=1)
        return self._emit("lstm_cell", [x4, w_h, h, c], values, aux=(i, f, g, o, tc))

    def lstm_sequence(self, x4, w_h, h0, c0, lengths):
        """Run an LSTM over (T, B, 4H) gate pre-activations.

        Sequences are head-aligned and padded at the tail; `lengths` must be
        sorted in descending order so that at each step the active batch is a
        prefix.  Returns hidden states (T, B, H); padded slots stay zero.
        """
        T, B, H4 = x4.shape
        hidden = H4 // 4
        lengths = np.asarray(lengths, dtype=np.intp)
        if lengths.shape != (B,) or np.any(np.diff(lengths) > 0):
            raise ShapeError("lstm_sequence: lengths must be one per column, descending")
        if lengths[0] != T:
            raise ShapeError(f"lstm_sequence: longest length {lengths[0]} != {T} steps")
        counts = (lengths[None, :] > np.arange(T)[:, None]).sum(axis=1)
        h = h0.values.copy()
        c = c0.values.copy()
        whv = w_h.values
        h_seq = np.zeros((T, B, hidden))
        # per-step cache: [sigmoid block i,f,o | g | tanh(c) | c_prev]
        saved = np.zeros((T, B, 6 * hidden))
        for t in range(T):
            n = counts[t]
            pre = x4.values[t, :n] + h[:n] @ whv
            saved[t, :n, : 3 * hidden] = _sigmoid(pre[:, : 3 * hidden])
            saved[t, :n, 3 * hidden : 4 * hidden] = np.tanh(pre[:, 3 * hidden :])
            s = saved[t, :n]
            i, f, o, g = (
                s[:, :hidden],
                s[:, hidden : 2 * hidden],
                s[:, 2 * hidden : 3 * hidden],
                s[:, 3 * hidden : 4 * hidden],
            )
            s[:, 5 * hidden :] = c[:n]
            c[:n] = f * c[:n] + i * g
            tc = np.tanh(c[:n])
            s[:, 4 * hidden : 5 * hidden] = tc
            h[:n] = o * tc
            h_seq[t, :n] = h[:n]
        return self._emit(
            "lstm_sequence", [x4, w_h, h0, c0], h_seq, attrs={"counts": counts}, aux=saved
        )

    # -- reverse pass --------------------------------------------------------

    def backward(self, loss):
        """Populate .grad with d loss / d tensor for every reachable tensor."""
        if loss.values.shape != ():
            raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
        loss.grad = np.ones(())
        # A tensor's first contribution is stored as-is (it may alias another
        # node's gradient, e.g. through add/reshape); only when a second
        # contribution arrives is an owned buffer made and accumulated into.
        owned = set()
        for node in reversed(self.nodes):
            g = node.output.grad
            if g is None:
                continue
            grads = _BACKWARD[node.kind](node, g)
            for tensor, dg in zip(node.inputs, grads):
                if dg is None or not tensor.requires_grad:
                    continue
                if tensor.grad is None:
                    tensor.grad = dg
                elif tensor.id in owned:
                    tensor.grad += dg
                else:
                    tensor.grad = tensor.grad + dg
                    owned.add(tensor.id)

    def replay(self):
        """Recompute every node's forward from its recorded inputs."""
        return [
            _FORWARD[node.kind]([t.values for t in node.inputs], node.attrs)
            for node in self.nodes
        ]


def backward(tape, loss):
    tape.backward(loss)


def apply_primitive(tape, kind, inputs, **attrs):
    """Dispatch one of the public primitives by name.

    `inputs` is a list of Tensors.  concat takes an `axis` keyword and
    embed_lookup an `indices` keyword; layer_norm expects [x, gain, bias].
    """
    if kind not in PRIMITIVE_KINDS:
        raise ValueError(f"unknown primitive kind {kind!r}")
    if kind == "add":
        return tape.add(*inputs)
    if kind == "multiply":
        return tape.multiply(*inputs)
    if kind == "matmul":
        return tape.matmul(*inputs, **attrs)
    if kind == "concat":
        return tape.concat(inputs, **attrs)
    if kind == "sigmoid":
        return tape.sigmoid(*inputs)
    if kind == "tanh":
        return tape.tanh(*inputs)
    if kind == "relu":
        return tape.relu(*inputs)
    if kind == "max_over_set":
        return tape.max_over_set(inputs)
    if kind == "embed_lookup":
        return tape.embed_lookup(inputs[0], attrs["indices"])
    if kind == "layer_norm":
        return tape.layer_norm(*inputs)
    return tape.softmax(*inputs)


def cross_entropy_loss(tape, logits, target_action):
    """-log softmax(logits)[target_action], differentiable through logits."""
    return tape.cross_entropy(logits, target_action)


# -- backward rules ---------------------------------------------------------


def _bw_add(node, g):
    a, b = node.inputs
    return [_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)]


def _bw_multiply(node, g):
    a, b = node.inputs
    return [_unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)]


def _bw_matmul(node, g):
    a, b = node.inputs
    av, bv = a.values, b.values
    tb = node.attrs["transpose_b"]
    if tb:
        da = g @ bv
    else:
        da = g @ _swap(bv)
    if bv.ndim == 2:
        a2 = av.reshape(-1, av.shape[-1])
        g2 = g.reshape(-1, g.shape[-1])
        db = (g2.T @ a2) if tb else (a2.T @ g2)
    else:
        db = (_swap(g) @ av) if tb else (_swap(av) @ g)
    return [da, db]


def _bw_concat(node, g):
    axis = node.attrs["axis"]
    offsets = np.cumsum(node.attrs["sizes"])[:-1]
    return list(np.split(g, offsets, axis=axis))


def _bw_sigmoid(node, g):
    y = node.output.values
    return [g * y * (1.0 - y)]


def _bw_tanh(node, g):
    y = node.output.values
    return [g * (1.0 - y * y)]


def _bw_relu(node, g):
    return [g * (node.inputs[0].values > 0.0)]


def _bw_max_over_set(node, g):
    winner = node.aux
    return [g * (winner == k) for k in range(len(node.inputs))]


def _bw_embed_lookup(node, g):
    table = node.inputs[0]
    dt = np.zeros_like(table.values)
    np.add.at(dt, node.attrs["indices"], g)
    return [dt]


def _bw_layer_norm(node, g):
    x, gain, _ = node.inputs
    xhat, inv = node.aux
    dxhat = g * gain.values
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - m1 - xhat * m2)
    axes = tuple(range(g.ndim - 1))
    return [dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)]


def _bw_softmax(node, g):
    y = node.output.values
    dot = (g * y).sum(axis=-1, keepdims=True)
    return [y * (g - dot)]


def _bw_cross_entropy(node, g):
    probs = node.aux
    t = node.attrs["targets"]
    d = probs.copy()
    d[np.arange(d.shape[0]), t] -= 1.0
    if node.attrs["single"]:
        d = d[0] * g
    else:
        d = d * np.asarray(g)[:, None]
    return [d]


def _bw_reshape(node, g):
    return [g.reshape(node.inputs[0].shape)]


def _bw_transpose(node, g):
    return [np.transpose(g, np.argsort(node.attrs["axes"]))]


def _bw_take(node, g):
    x = node.inputs[0]
    dx = np.zeros_like(x.values)
    sl = [slice(None)] * x.values.ndim
    sl[node.attrs["axis"]] = node.attrs["index"]
    dx[tuple(sl)] = g
    return [dx]


def _bw_slice_axis(node, g):
    x = node.inputs[0]
    dx = np.zeros_like(x.values)
    sl = [slice(None)] * x.values.ndim
    sl[node.attrs["axis"]] = slice(node.attrs["start"], node.attrs["stop"])
    dx[tuple(sl)] = g
    return [dx]


def _bw_gather_rows(node, g):
    dx = np.zeros_like(node.inputs[0].values)
    np.add.at(dx, node.attrs["indices"], g)
    return [dx]


def _bw_scatter_rows(node, g):
    return [g[node.attrs["indices"]]]


def _bw_scale(node, g):
    return [g * node.attrs["s"]]


def _bw_sum_all(node, g):
    return [np.full_like(node.inputs[0].values, g)]


def _bw_mean_all(node, g):
    x = node.inputs[0]
    return [np.full_like(x.values, g / x.values.size)]


def _bw_lstm_cell(node, g):
    x4, w_h, h, c = node.inputs
    hidden = w_h.shape[0]
    i, f, gg, o, tc = node.aux
    dh = g[:, :hidden]
    dc = g[:, hidden:] + dh * o * (1.0 - tc * tc)
    do = dh * tc
    dgates = np.concatenate(
        [
            dc * gg * i * (1.0 - i),
            dc * c.values * f * (1.0 - f),
            do * o * (1.0 - o),
            dc * i * (1.0 - gg * gg),
        ],
        axis=1,
    )
    return [dgates, h.values.T @ dgates, dgates @ w_h.values.T, dc * f]


def _bw_lstm_sequence(node, g):
    x4, w_h, h0, c0 = node.inputs
    counts = node.attrs["counts"]
    saved = node.aux
    h_seq = node.output.values
    T, B, hidden = h_seq.shape
    whv = w_h.values
    dx4 = np.zeros_like(x4.values)
    dwh = np.zeros_like(whv)
    dh = np.zeros((B, hidden))
    dc = np.zeros((B, hidden))
    for t in range(T - 1, -1, -1):
        n = counts[t]
        s = saved[t, :n]
        i = s[:, :hidden]
        f = s[:, hidden : 2 * hidden]
        o = s[:, 2 * hidden : 3 * hidden]
        gg = s[:, 3 * hidden : 4 * hidden]
        tc = s[:, 4 * hidden : 5 * hidden]
        c_prev = s[:, 5 * hidden :]
        dht = g[t, :n] + dh[:n]
        dct = dc[:n] + dht * o * (1.0 - tc * tc)
        dgates = dx4[t, :n]  # write gate grads straight into the input slot
        dgates[:, :hidden] = dct * gg * i * (1.0 - i)
        dgates[:, hidden : 2 * hidden] = dct * c_prev * f * (1.0 - f)
        dgates[:, 2 * hidden : 3 * hidden] = dht * tc * o * (1.0 - o)
        dgates[:, 3 * hidden :] = dct * i * (1.0 - gg * gg)
        h_prev = h_seq[t - 1, :n] if t > 0 else h0.values[:n]
        dwh += h_prev.T @ dgates
        dh[:n] = dgates @ whv.T
        dc[:n] = dct * f
    return [dx4, dwh, dh, dc]


_BACKWARD = {
    "add": _bw_add,
    "multiply": _bw_multiply,
    "matmul": _bw_matmul,
    "concat": _bw_concat,
    "sigmoid": _bw_sigmoid,
    "tanh": _bw_tanh,
    "relu": _bw_relu,
    "max_over_set": _bw_max_over_set,
    "embed_lookup": _bw_embed_lookup,
    "layer_norm": _bw_layer_norm,
    "softmax": _bw_softmax,
    "cross_entropy": _bw_cross_entropy,
    "reshape": _bw_reshape,
    "transpose": _bw_transpose,
    "take": _bw_take,
    "slice_axis": _bw_slice_axis,
    "gather_rows": _bw_gather_rows,
    "scatter_rows": _bw_scatter_rows,
    "scale": _bw_scale,
    "sum_all": _bw_sum_all,
    "mean_all": _bw_mean_all,
    "lstm_cell": _bw_lstm_cell,
    "lstm_sequence": _bw_lstm_sequence,
}


# -- forward replay rules ----------------------------------------------------


def _f_layer_norm(vals, attrs):
    x, gain, bias = vals
    mu = x.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(x.var(axis=-1, keepdims=True) + attrs["eps"])
    return (x - mu) * inv * gain + bias


def _f_cross_entropy(vals, attrs):
    lv = vals[0]
    l2 = lv[None] if attrs["single"] else lv
    t = attrs["targets"]
    m = l2.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(l2 - m).sum(axis=-1))
    losses = lse - l2[np.arange(l2.shape[0]), t]
    return losses[0] if attrs["single"] else losses


def _f_take(vals, attrs):
    return np.take(vals[0], attrs["index"], axis=attrs["axis"])


def _f_slice_axis(vals, attrs):
    sl = [slice(None)] * vals[0].ndim
    sl[attrs["axis"]] = slice(attrs["start"], attrs["stop"])
    return vals[0][tuple(sl)]


def _f_scatter_rows(vals, attrs):
    out = np.zeros((attrs["n_rows"],) + vals[0].shape[1:])
    out[attrs["indices"]] = vals[0]
    return out


def _f_max_over_set(vals, attrs):
    stacked = np.stack(vals)
    winner = np.argmax(stacked, axis=0)
    return np.take_along_axis(stacked, winner[None], axis=0)[0]


def _f_lstm_cell(vals, attrs):
    x4, whv, h, c = vals
    hidden = whv.shape[0]
    i, f, g, o = _lstm_gates(x4 + h @ whv, hidden)
    c_new = f * c + i * g
    return np.concatenate([o * np.tanh(c_new), c_new], axis=1)


def _f_lstm_sequence(vals, attrs):
    x4, whv, h0, c0 = vals
    counts = attrs["counts"]
    T, B, H4 = x4.shape
    hidden = H4 // 4
    h = h0.copy()
    c = c0.copy()
    h_seq = np.zeros((T, B, hidden))
    for t in range(T):
        n = counts[t]
        i, f, g, o = _lstm_gates(x4[t, :n] + h[:n] @ whv, hidden)
        c[:n] = f * c[:n] + i * g
        h[:n] = o * np.tanh(c[:n])
        h_seq[t, :n] = h[:n]
    return h_seq


_FORWARD = {
    "add": lambda v, a: v[0] + v[1],
    "multiply": lambda v, a: v[0] * v[1],
    "matmul": lambda v, a: v[0] @ (_swap(v[1]) if a["transpose_b"] else v[1]),
    "concat": lambda v, a: np.concatenate(v, axis=a["axis"]),
    "sigmoid": lambda v, a: _sigmoid(v[0]),
    "tanh": lambda v, a: np.tanh(v[0]),
    "relu": lambda v, a: np.maximum(v[0], 0.0),
    "max_over_set": _f_max_over_set,
    "embed_lookup": lambda v, a: v[0][a["indices"]],
    "layer_norm": _f_layer_norm,
    "softmax": lambda v, a: _softmax(v[0]),
    "cross_entropy": _f_cross_entropy,
    "reshape": lambda v, a: v[0].reshape(a["shape"]),
    "transpose": lambda v, a: np.transpose(v[0], a["axes"]),
    "take": _f_take,
    "slice_axis": _f_slice_axis,
    "gather_rows": lambda v, a: v[0][a["indices"]],
    "scatter_rows": _f_scatter_rows,
    "scale": lambda v, a: v[0] * a["s"],
    "sum_all": lambda v, a: np.float64(v[0].sum()),
    "mean_all": lambda v, a: np.float64(v[0].mean()),
    "lstm_cell": _f_lstm_cell,
    "lstm_sequence": _f_lstm_sequence,
}


# -- optimiser ---------------------------------------------------------------


@dataclass
class AdamState:
    """Per-parameter first/second moment estimates plus the shared step count."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def global_grad_norm(params):
    return float(np.sqrt(sum(float((p.grad * p.grad).sum()) for p in params)))


def adam_step(params, state, clip_norm=10.0):
    """One Adam update with bias correction; clears grads afterwards.

    Gradients are first clipped by global norm (recurrent unrolls can spike).
    """
    for p in params:
        if p.grad is None:
            raise GradientError(f"adam_step: parameter {p.name!r} has no gradient")
        if p.grad.shape != p.values.shape:
            raise GradientError(f"adam_step: gradient shape mismatch on {p.name!r}")
    norm = global_grad_norm(params)
    scale = clip_norm / norm if clip_norm is not None and norm > clip_norm else 1.0
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for p in params:
        g = p.grad if scale == 1.0 else p.grad * scale
        key = p.name if p.name is not None else f"#{p.id}"
        m = state.m.get(key)
        if m is None:
            m = np.zeros_like(p.values)
            state.m[key] = m
            state.v[key] = np.zeros_like(p.values)
        v = state.v[key]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.values -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.grad = None
    return params, state


def finite_difference_gradient(fn, tensor, h=1e-5, coords=None):
    """Central finite differences of scalar fn() w.r.t. entries of `tensor`.

    `fn` must rebuild its forward pass from current tensor values on each
    call.  If `coords` is given, only those flat indices are probed (the rest
    are returned as NaN); otherwise all entries are probed.
    """
    flat = tensor.values.reshape(-1)
    out = np.full(flat.shape, np.nan)
    idx = range(flat.size) if coords is None else coords
    for k in idx:
        orig = flat[k]
        flat[k] = orig + h
        up = fn()
        flat[k] = orig - h
        down = fn()
        flat[k] = orig
        out[k] = (up - down) / (2.0 * h)
    return out.reshape(tensor.values.shape)
