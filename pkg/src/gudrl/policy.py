"""Command-conditioned recurrent policy.

The network maps (observation, command tokens, hidden state) to logits over
the two push actions:

  observation --- linear ----------------------------.
                                                      >-- gated fusion -- LSTM -- linear -- logits
  command tokens -- embed + encoding -- transformer -'
                    (set, max-aggregated)

Each present token (desired horizon, desired return, goal, previous action /
reward / terminal flag) is a scalar mapped affinely into an embedding and
concatenated with a learnable per-token encoding vector.  The token set is
processed by one self-attention encoder layer and aggregated with an
elementwise max, so the context is invariant to token order, and an empty
set (pure behavioural cloning) contributes a zero context.  The fused
features gate the observation pathway through a sigmoid before the LSTM.

Tokens are keyed by name: a token is either present once or absent, and the
encoder never reads a disabled token's value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .autodiff import Tape, _lstm_gates, _softmax, parameter
from .autodiff import _f_layer_norm, _sigmoid, _swap

TOKEN_NAMES = ("d_h", "d_r", "goal", "prev_action", "prev_reward", "prev_terminal")
TOKEN_INDEX = {name: i for i, name in enumerate(TOKEN_NAMES)}

CHECKPOINT_MAGIC = "GUDRL-CKPT"
CHECKPOINT_VERSION = "v1"


class CheckpointFormatError(ValueError):
    """A checkpoint file that cannot be parsed or does not match the config."""


@dataclass(frozen=True)
class PolicyConfig:
    obs_dim: int = 4
    embed_dim: int = 16
    enc_dim: int = 16
    n_heads: int = 2
    ffn_dim: int = 64
    feat_dim: int = 64
    lstm_hidden: int = 64
    n_actions: int = 2
    horizon_scale: float = 1.0 / 500.0
    return_scale: float = 1.0 / 500.0

    @property
    def token_dim(self):
        return self.embed_dim + self.enc_dim

    def token_scale(self, name):
        if name == "d_h":
            return self.horizon_scale
        if name == "d_r":
            return self.return_scale
        return 1.0


@dataclass(frozen=True)
class TokenMask:
    """Which tokens a setting feeds to the policy."""

    d_h: bool = True
    d_r: bool = True
    goal: bool = False
    prev_action: bool = True
    prev_reward: bool = True
    prev_terminal: bool = True

    def enabled(self):
        return tuple(name for name in TOKEN_NAMES if getattr(self, name))


BC_MASK = TokenMask(False, False, False, False, False, False)


@dataclass(frozen=True)
class CommandTokenSet:
    """The token values actually fed on one step, keyed by token name."""

    values: dict

    def __post_init__(self):
        for name in self.values:
            if name not in TOKEN_INDEX:
                raise ValueError(f"unknown token {name!r}")

    @classmethod
    def build(cls, command, hidden, mask):
        """Assemble the per-step token set from the live command and state."""
        vals = {}
        if mask.d_h and command.mask.d_h:
            vals["d_h"] = float(command.d_h)
        if mask.d_r and command.mask.d_r:
            vals["d_r"] = float(command.d_r)
        if mask.goal and command.mask.goal and command.goal is not None:
            vals["goal"] = float(command.goal)
        if mask.prev_action:
            vals["prev_action"] = float(hidden.prev_action)
        if mask.prev_reward:
            vals["prev_reward"] = float(hidden.prev_reward)
        if mask.prev_terminal:
            vals["prev_terminal"] = float(hidden.prev_terminal)
        return cls(vals)

    def ordered_names(self):
        return tuple(name for name in TOKEN_NAMES if name in self.values)


@dataclass
class HiddenState:
    """LSTM state plus the previous-step tokens the next forward will see."""

    h: np.ndarray
    c: np.ndarray
    prev_action: float
    prev_reward: float
    prev_terminal: float

    @classmethod
    def initial(cls, config):
        # prev_terminal=1 is the start-of-episode marker
        return cls(
            h=np.zeros((1, config.lstm_hidden)),
            c=np.zeros((1, config.lstm_hidden)),
            prev_action=0.0,
            prev_reward=0.0,
            prev_terminal=1.0,
        )

    def observed(self, action, reward):
        """Fold the action just taken and reward just seen into the state."""
        return replace(self, prev_action=float(action), prev_reward=float(reward), prev_terminal=0.0)


@dataclass(frozen=True)
class ActionDistribution:
    logits: np.ndarray
    probabilities: np.ndarray

    @classmethod
    def from_logits(cls, logits):
        return cls(logits=logits, probabilities=_softmax(logits))


def _param_shapes(c):
    td = c.token_dim
    return (
        ("tok_embed_w", (len(TOKEN_NAMES), c.embed_dim)),
        ("tok_embed_b", (len(TOKEN_NAMES), c.embed_dim)),
        ("tok_encoding", (len(TOKEN_NAMES), c.enc_dim)),
        ("attn_wq", (td, td)),
        ("attn_bq", (td,)),
        ("attn_wk", (td, td)),
        ("attn_bk", (td,)),
        ("attn_wv", (td, td)),
        ("attn_bv", (td,)),
        ("attn_wo", (td, td)),
        ("attn_bo", (td,)),
        ("ln1_g", (td,)),
        ("ln1_b", (td,)),
        ("ffn_w1", (td, c.ffn_dim)),
        ("ffn_b1", (c.ffn_dim,)),
        ("ffn_w2", (c.ffn_dim, td)),
        ("ffn_b2", (td,)),
        ("ln2_g", (td,)),
        ("ln2_b", (td,)),
        ("obs_w", (c.obs_dim, c.feat_dim)),
        ("obs_b", (c.feat_dim,)),
        ("val_w", (c.feat_dim, c.feat_dim)),
        ("val_b", (c.feat_dim,)),
        ("gate_w", (td, c.feat_dim)),
        ("gate_b", (c.feat_dim,)),
        ("lstm_wx", (c.feat_dim, 4 * c.lstm_hidden)),
        ("lstm_wh", (c.lstm_hidden, 4 * c.lstm_hidden)),
        ("lstm_b", (4 * c.lstm_hidden,)),
        ("head_w", (c.lstm_hidden, c.n_actions)),
        ("head_b", (c.n_actions,)),
    )

# Parameters that live entirely inside the token encoder: they are reachable
# only when at least one token is present.
_TOKEN_ENCODER_PARAMS = frozenset(
    {
        "tok_embed_w", "tok_embed_b", "tok_encoding",
        "attn_wq", "attn_bq", "attn_wk", "attn_bk", "attn_wv", "attn_bv",
        "attn_wo", "attn_bo", "ln1_g", "ln1_b",
        "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2", "ln2_g", "ln2_b",
    }
)


class PolicyParams:
    """Named parameter tensors for one policy instance."""

    def __init__(self, config, tensors):
        self.config = config
        self.tensors = tensors

    @classmethod
    def initialize(cls, config, seed):
        rng = np.random.default_rng(seed)
        tensors = {}
        for name, shape in _param_shapes(config):
            if name.startswith("ln") and name.endswith("_g"):
                values = np.ones(shape)
            elif len(shape) == 1 or name.endswith("_b"):
                values = np.zeros(shape)
            elif name == "tok_encoding":
                values = rng.uniform(-0.5, 0.5, size=shape)
            elif name == "tok_embed_w":
                values = rng.uniform(-1.0, 1.0, size=shape)
            else:
                bound = 1.0 / math.sqrt(shape[0])
                values = rng.uniform(-bound, bound, size=shape)
            tensors[name] = parameter(values, name)
        # standard LSTM trick: start with an open forget gate
        tensors["lstm_b"].values[config.lstm_hidden : 2 * config.lstm_hidden] = 1.0
        return cls(config, tensors)

    def __getitem__(self, name):
        return self.tensors[name]

    def names(self):
        return tuple(name for name, _ in _param_shapes(self.config))

    def all(self):
        return [self.tensors[name] for name in self.names()]

    def trainable(self, mask):
        """Parameters reached by a forward pass under the given token mask."""
        if mask.enabled():
            return self.all()
        return [self.tensors[n] for n in self.names() if n not in _TOKEN_ENCODER_PARAMS]

    def copy(self):
        tensors = {
            name: parameter(t.values.copy(), name) for name, t in self.tensors.items()
        }
        return PolicyParams(self.config, tensors)


# -- forward pieces ----------------------------------------------------------


def _token_context(tape, params, order, values, n):
    """Embed, encode and aggregate the token set for n rows at once.

    Rows with identical token values produce identical contexts, so the
    encoder runs on the unique rows only and the result is gathered back;
    with unit rewards most steps share a handful of token patterns.
    """
    c = params.config
    if not order:
        return tape.constant(np.zeros((n, c.token_dim)))
    if n > 1:
        rows = np.stack([np.asarray(values[name], dtype=np.float64) for name in order], axis=1)
        uniq, inverse = np.unique(rows, axis=0, return_inverse=True)
        if uniq.shape[0] < n:
            u_values = {name: uniq[:, j] for j, name in enumerate(order)}
            ctx = _token_context_core(tape, params, order, u_values, uniq.shape[0])
            return tape.gather_rows(ctx, inverse.reshape(-1))
    return _token_context_core(tape, params, order, values, n)


def _token_context_core(tape, params, order, values, n):
    c = params.config
    tokens = []
    ones = tape.constant(np.ones((n, 1)))
    for name in order:
        k = TOKEN_INDEX[name]
        raw = np.asarray(values[name], dtype=np.float64).reshape(n, 1)
        v = tape.constant(raw * c.token_scale(name))
        emb = tape.add(
            tape.multiply(v, tape.embed_lookup(params["tok_embed_w"], [k])),
            tape.embed_lookup(params["tok_embed_b"], [k]),
        )
        enc = tape.multiply(ones, tape.embed_lookup(params["tok_encoding"], [k]))
        tok = tape.concat([emb, enc], axis=1)
        tokens.append(tape.reshape(tok, (n, 1, c.token_dim)))
    x = tokens[0] if len(tokens) == 1 else tape.concat(tokens, axis=1)
    x = _transformer_layer(tape, params, x)
    slices = [tape.take(x, k, axis=1) for k in range(len(order))]
    return tape.max_over_set(slices)


def _transformer_layer(tape, params, x):
    """One post-norm self-attention encoder layer over the token axis."""
    c = params.config
    n, k, td = x.shape
    heads, dh = c.n_heads, c.token_dim // c.n_heads

    def proj(name):
        return tape.add(tape.matmul(x, params[f"attn_w{name}"]), params[f"attn_b{name}"])

    def split(t):
        return tape.transpose(tape.reshape(t, (n, k, heads, dh)), (0, 2, 1, 3))

    qh, kh, vh = split(proj("q")), split(proj("k")), split(proj("v"))
    scores = tape.scale(tape.matmul(qh, kh, transpose_b=True), 1.0 / math.sqrt(dh))
    mixed = tape.matmul(tape.softmax(scores), vh)
    merged = tape.reshape(tape.transpose(mixed, (0, 2, 1, 3)), (n, k, td))
    attended = tape.add(tape.matmul(merged, params["attn_wo"]), params["attn_bo"])
    x1 = tape.layer_norm(tape.add(x, attended), params["ln1_g"], params["ln1_b"])
    inner = tape.relu(tape.add(tape.matmul(x1, params["ffn_w1"]), params["ffn_b1"]))
    f = tape.add(tape.matmul(inner, params["ffn_w2"]), params["ffn_b2"])
    return tape.layer_norm(tape.add(x1, f), params["ln2_g"], params["ln2_b"])


def _fused_features(tape, params, obs, ctx):
    """Observation features gated by a sigmoid of the token context."""
    obs_feat = tape.add(tape.matmul(obs, params["obs_w"]), params["obs_b"])
    value = tape.add(tape.matmul(obs_feat, params["val_w"]), params["val_b"])
    gate = tape.sigmoid(tape.add(tape.matmul(ctx, params["gate_w"]), params["gate_b"]))
    return tape.multiply(value, gate)


def encode_tokens(token_set, params, tape=None):
    """Context vector for one token set; zero vector for the empty set."""
    tape = Tape() if tape is None else tape
    order = token_set.ordered_names()
    values = {name: np.array([token_set.values[name]]) for name in order}
    ctx = _token_context(tape, params, order, values, 1)
    return tape.reshape(ctx, (params.config.token_dim,))


def _fast_forward(observation, token_set, hidden, params):
    """Tape-free twin of the recorded forward pass, for acting loops.

    Mirrors the recorded path operation for operation so logits and hidden
    state match it bit for bit (asserted by the test suite); it just skips
    tape bookkeeping, since action selection never needs gradients.
    """
    c = params.config
    p = {name: t.values for name, t in params.tensors.items()}
    order = token_set.ordered_names()
    if order:
        k = len(order)
        x = np.empty((1, k, c.token_dim))
        for j, name in enumerate(order):
            i = TOKEN_INDEX[name]
            v = token_set.values[name] * c.token_scale(name)
            x[0, j, : c.embed_dim] = v * p["tok_embed_w"][i] + p["tok_embed_b"][i]
            x[0, j, c.embed_dim :] = p["tok_encoding"][i]
        heads, dh = c.n_heads, c.token_dim // c.n_heads

        def split(t):
            return np.transpose(t.reshape(1, k, heads, dh), (0, 2, 1, 3))

        qh = split(np.matmul(x, p["attn_wq"]) + p["attn_bq"])
        kh = split(np.matmul(x, p["attn_wk"]) + p["attn_bk"])
        vh = split(np.matmul(x, p["attn_wv"]) + p["attn_bv"])
        scores = (qh @ _swap(kh)) * (1.0 / math.sqrt(dh))
        mixed = _softmax(scores) @ vh
        merged = np.transpose(mixed, (0, 2, 1, 3)).reshape(1, k, c.token_dim)
        attended = np.matmul(merged, p["attn_wo"]) + p["attn_bo"]
        x1 = _f_layer_norm([x + attended, p["ln1_g"], p["ln1_b"]], {"eps": 1e-5})
        inner = np.maximum(np.matmul(x1, p["ffn_w1"]) + p["ffn_b1"], 0.0)
        f = np.matmul(inner, p["ffn_w2"]) + p["ffn_b2"]
        x2 = _f_layer_norm([x1 + f, p["ln2_g"], p["ln2_b"]], {"eps": 1e-5})
        ctx = x2.max(axis=1)
    else:
        ctx = np.zeros((1, c.token_dim))
    obs = np.asarray(observation, dtype=np.float64).reshape(1, c.obs_dim)
    obs_feat = obs @ p["obs_w"] + p["obs_b"]
    value = obs_feat @ p["val_w"] + p["val_b"]
    gate = _sigmoid(ctx @ p["gate_w"] + p["gate_b"])
    fused = value * gate
    pre = fused @ p["lstm_wx"] + p["lstm_b"] + hidden.h @ p["lstm_wh"]
    i, f, g, o = _lstm_gates(pre, c.lstm_hidden)
    c_new = f * hidden.c + i * g
    h_new = o * np.tanh(c_new)
    logits = (h_new @ p["head_w"] + p["head_b"])[0]
    dist = ActionDistribution.from_logits(logits)
    return dist, replace(hidden, h=h_new, c=c_new)


def policy_forward(observation, token_set, hidden, params, tape=None):
    """One acting step: returns the action distribution and advanced state.

    The returned HiddenState carries the new LSTM vectors; its prev_* fields
    still describe the step that produced this forward, and are folded in by
    the caller (via HiddenState.observed) once the action and reward exist.

    With no tape, a recording-free twin of the same computation runs instead
    (acting does not need gradients); pass a Tape to record the step.
    """
    c = params.config
    if hidden.h.shape != (1, c.lstm_hidden):
        raise ValueError(f"policy_forward: hidden shape {hidden.h.shape} does not match config")
    if tape is None:
        return _fast_forward(observation, token_set, hidden, params)
    obs = tape.constant(np.asarray(observation, dtype=np.float64).reshape(1, c.obs_dim))
    order = token_set.ordered_names()
    values = {name: np.array([token_set.values[name]]) for name in order}
    ctx = _token_context(tape, params, order, values, 1)
    fused = _fused_features(tape, params, obs, ctx)
    x4 = tape.add(tape.matmul(fused, params["lstm_wx"]), params["lstm_b"])
    hc = tape.lstm_cell(x4, params["lstm_wh"], tape.constant(hidden.h), tape.constant(hidden.c))
    h_new = tape.slice_axis(hc, 1, 0, c.lstm_hidden)
    c_new = tape.slice_axis(hc, 1, c.lstm_hidden, 2 * c.lstm_hidden)
    logits = tape.add(tape.matmul(h_new, params["head_w"]), params["head_b"])
    dist = ActionDistribution.from_logits(logits.values[0].copy())
    new_hidden = replace(hidden, h=h_new.values.copy(), c=c_new.values.copy())
    return dist, new_hidden


def act(dist, rng, mode="sample"):
    """Pick an action: draw from the categorical, or argmax (ties -> 0)."""
    if mode == "greedy":
        return int(np.argmax(dist.probabilities))
    if mode != "sample":
        raise ValueError(f"act: unknown mode {mode!r}")
    u = rng.random()
    return int(np.searchsorted(np.cumsum(dist.probabilities), u, side="right").clip(
        0, len(dist.probabilities) - 1
    ))


def loss_batch(batch, mask, params, tape=None):
    """Mean cross-entropy of the policy over every step of every suffix.

    Suffixes start from a zero hidden state with the start-of-episode marker;
    the LSTM threads the state along each suffix.  Sequences are packed
    tail-padded in descending length order so the recurrence can run on
    shrinking active prefixes.
    """
    if not batch:
        raise ValueError("loss_batch: empty batch")
    c = params.config
    tape = Tape() if tape is None else tape
    order = list(mask.enabled())
    if mask.goal and any(s.goal is None for s in batch):
        raise ValueError("loss_batch: goal token enabled but a sample has no goal")
    by_len = sorted(range(len(batch)), key=lambda i: -batch[i].length)
    batch = [batch[i] for i in by_len]
    lengths = np.array([s.length for s in batch], dtype=np.intp)
    t_max, b = int(lengths[0]), len(batch)
    obs = tape.constant(np.concatenate([s.observations for s in batch], axis=0))
    actions = np.concatenate([s.actions for s in batch])
    flat = {}
    for name in order:
        if name == "goal":
            flat[name] = np.concatenate([np.full(s.length, s.goal) for s in batch])
        else:
            flat[name] = np.concatenate([getattr(s, name) for s in batch])
    pad_index = np.concatenate(
        [np.arange(s.length, dtype=np.intp) * b + i for i, s in enumerate(batch)]
    )
    n = obs.shape[0]
    ctx = _token_context(tape, params, order, flat, n)
    fused = _fused_features(tape, params, obs, ctx)
    x4 = tape.add(tape.matmul(fused, params["lstm_wx"]), params["lstm_b"])
    padded = tape.reshape(
        tape.scatter_rows(x4, pad_index, t_max * b), (t_max, b, 4 * c.lstm_hidden)
    )
    zeros = tape.constant(np.zeros((b, c.lstm_hidden)))
    h_seq = tape.lstm_sequence(padded, params["lstm_wh"], zeros, zeros, lengths)
    h_flat = tape.gather_rows(tape.reshape(h_seq, (t_max * b, c.lstm_hidden)), pad_index)
    logits = tape.add(tape.matmul(h_flat, params["head_w"]), params["head_b"])
    return tape.mean_all(tape.cross_entropy(logits, actions))


# -- checkpoint io -----------------------------------------------------------


def save_checkpoint(params, path):
    """Text checkpoint: named blocks with shape and full-precision values."""
    names = params.names()
    with open(path, "w") as f:
        f.write(f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION} {len(names)}\n")
        for name in names:
            v = params[name].values
            dims = " ".join(str(d) for d in v.shape)
            f.write(f"P {name} {v.ndim} {dims}\n")
            flat = v.reshape(-1)
            for i in range(0, flat.size, 8):
                f.write(" ".join(f"{x:.17g}" for x in flat[i : i + 8]) + "\n")


def load_checkpoint(path, config=None):
    config = PolicyConfig() if config is None else config
    expected = dict(_param_shapes(config))
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines:
        raise CheckpointFormatError(f"{path}: empty file, missing checkpoint header")
    head = lines[0].split()
    if len(head) != 3 or head[0] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: malformed header {lines[0]!r}")
    if head[1] != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported checkpoint version {head[1]!r}")
    n_params = int(head[2])
    tensors = {}
    pos = 1
    for _ in range(n_params):
        if pos >= len(lines):
            raise CheckpointFormatError(f"{path}: truncated file inside parameter table")
        fields = lines[pos].split()
        if len(fields) < 3 or fields[0] != "P":
            raise CheckpointFormatError(f"{path}: line {pos + 1}: malformed parameter block")
        name, ndim = fields[1], int(fields[2])
        shape = tuple(int(d) for d in fields[3 : 3 + ndim])
        if name not in expected:
            raise CheckpointFormatError(f"{path}: unknown parameter {name!r}")
        if shape != expected[name]:
            raise CheckpointFormatError(
                f"{path}: parameter {name!r} has shape {shape}, config expects {expected[name]}"
            )
        pos += 1
        size = int(np.prod(shape)) if shape else 1
        flat = []
        while len(flat) < size:
            if pos >= len(lines):
                raise CheckpointFormatError(f"{path}: truncated values for parameter {name!r}")
            flat.extend(float(x) for x in lines[pos].split())
            pos += 1
        if len(flat) != size:
            raise CheckpointFormatError(f"{path}: wrong value count for parameter {name!r}")
        tensors[name] = parameter(np.array(flat).reshape(shape), name)
    missing = set(expected) - set(tensors)
    if missing:
        raise CheckpointFormatError(f"{path}: missing parameters {sorted(missing)}")
    return PolicyParams(config, tensors)
