"""Neural layers shared by the three labeler families.

Embedding lookup, LSTM cell and bidirectional runner, linear projection,
and pre-norm multi-head self-attention blocks with key padding masks.
All parameters are float64 Tensors initialized uniformly in
[-1/sqrt(fan_in), +1/sqrt(fan_in)] from a caller-supplied generator;
biases and norm offsets start at zero, norm gains at one.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from tokconf import autodiff as ad
from tokconf.autodiff import Tensor


def _uniform(rng: np.random.Generator, fan_in: int, shape: tuple) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)


class Embedding:
    """Token id -> row of a (vocab_size x dim) table."""

    def __init__(self, vocab_size: int, dim: int, rng: np.random.Generator):
        if vocab_size < 1 or dim < 1:
            raise ValueError(f"embedding needs positive sizes, got ({vocab_size}, {dim})")
        self.vocab_size = vocab_size
        self.dim = dim
        self.weights = _uniform(rng, dim, (vocab_size, dim))

    def __call__(self, ids) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 1:
            raise ValueError(f"embedding expects a 1-d id sequence, got shape {ids.shape}")
        for pos, token_id in enumerate(ids):
            if not 0 <= token_id < self.vocab_size:
                raise ValueError(
                    f"token id {int(token_id)} at position {pos} outside "
                    f"[0, {self.vocab_size})"
                )
        if ids.size == 0:
            return Tensor(np.zeros((0, self.dim)))
        return ad.gather_rows(self.weights, ids)

    def params(self) -> list[Tensor]:
        return [self.weights]


def embed(table: Embedding, tokens) -> Tensor:
    """Functional alias for table(tokens)."""
    return table(tokens)


class Linear:
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        self.weight = _uniform(rng, in_dim, (in_dim, out_dim))
        self.bias = Tensor(np.zeros(out_dim), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, self.weight), self.bias)

    def params(self) -> list[Tensor]:
        return [self.weight, self.bias]


class LSTMCell:
    """Single LSTM cell; gate order along the packed axis is i, f, g, o."""

    def __init__(self, input_dim: int, hidden_dim: int, rng: np.random.Generator):
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.w_x = _uniform(rng, input_dim, (input_dim, 4 * hidden_dim))
        self.w_h = _uniform(rng, hidden_dim, (hidden_dim, 4 * hidden_dim))
        self.bias = Tensor(np.zeros(4 * hidden_dim), requires_grad=True)

    def initial_state(self, batch: int) -> tuple[Tensor, Tensor]:
        zeros = np.zeros((batch, self.hidden_dim))
        return Tensor(zeros), Tensor(zeros.copy())

    def step(self, x: Tensor, h_prev: Tensor, c_prev: Tensor) -> tuple[Tensor, Tensor]:
        pre = ad.add(ad.add(ad.matmul(x, self.w_x), ad.matmul(h_prev, self.w_h)), self.bias)
        hd = self.hidden_dim
        i = ad.sigmoid(ad.narrow(pre, 1, 0, hd))
        f = ad.sigmoid(ad.narrow(pre, 1, hd, 2 * hd))
        g = ad.tanh(ad.narrow(pre, 1, 2 * hd, 3 * hd))
        o = ad.sigmoid(ad.narrow(pre, 1, 3 * hd, 4 * hd))
        c = ad.add(ad.mul(f, c_prev), ad.mul(i, g))
        h = ad.mul(o, ad.tanh(c))
        return h, c

    def params(self) -> list[Tensor]:
        return [self.w_x, self.w_h, self.bias]


def lstm_step(cell: LSTMCell, x: Tensor, h_prev: Tensor, c_prev: Tensor):
    return cell.step(x, h_prev, c_prev)


class StepMask:
    """Per-timestep keep/carry gates for padded batches.

    At a padded step the recurrent state is carried through unchanged, so a
    batch padded to a longer length produces, at every real position, the
    exact states of the unpadded run.
    """

    def __init__(self, mask: np.ndarray):
        # mask: (batch, steps) booleans, True where the position is real.
        m = np.asarray(mask, dtype=np.float64)
        self.keep = [Tensor(m[:, t:t + 1]) for t in range(m.shape[1])]
        self.carry = [Tensor(1.0 - m[:, t:t + 1]) for t in range(m.shape[1])]


def _run_direction(cell: LSTMCell, xs: Sequence[Tensor], order, step_mask):
    batch = xs[0].shape[0]
    h, c = cell.initial_state(batch)
    states = [None] * len(xs)
    for t in order:
        h_new, c_new = cell.step(xs[t], h, c)
        if step_mask is not None:
            keep, carry = step_mask.keep[t], step_mask.carry[t]
            h = ad.add(ad.mul(keep, h_new), ad.mul(carry, h))
            c = ad.add(ad.mul(keep, c_new), ad.mul(carry, c))
        else:
            h, c = h_new, c_new
        states[t] = h
    return states


class BiLSTMLayer:
    """One bidirectional layer; output width is 2 x hidden_dim."""

    def __init__(self, input_dim: int, hidden_dim: int, rng: np.random.Generator):
        self.hidden_dim = hidden_dim
        self.fwd = LSTMCell(input_dim, hidden_dim, rng)
        self.bwd = LSTMCell(input_dim, hidden_dim, rng)

    def run(self, xs: Sequence[Tensor], step_mask: StepMask | None = None) -> list[Tensor]:
        if not xs:
            raise ValueError("bilstm: empty sequence")
        steps = len(xs)
        fwd = _run_direction(self.fwd, xs, range(steps), step_mask)
        bwd = _run_direction(self.bwd, xs, range(steps - 1, -1, -1), step_mask)
        return [ad.concat([fwd[t], bwd[t]], axis=1) for t in range(steps)]

    def params(self) -> list[Tensor]:
        return self.fwd.params() + self.bwd.params()


def bilstm(params_fwd: LSTMCell, params_bwd: LSTMCell, x: Tensor) -> Tensor:
    """Run one sequence (T x d) through a forward/backward cell pair.

    Row t of the result concatenates the forward state after consuming
    x[0..t] with the backward state after consuming x[T-1..t]; both
    directions start from zero states.
    """
    if x.data.ndim != 2 or x.shape[0] < 1:
        raise ValueError(f"bilstm: expected a (T, d) input with T >= 1, got {x.shape}")
    steps = x.shape[0]
    xs = [ad.narrow(x, 0, t, t + 1) for t in range(steps)]
    fwd = _run_direction(params_fwd, xs, range(steps), None)
    bwd = _run_direction(params_bwd, xs, range(steps - 1, -1, -1), None)
    rows = [ad.concat([fwd[t], bwd[t]], axis=1) for t in range(steps)]
    return ad.concat(rows, axis=0)


# ---------------------------------------------------------------------------
# Self-attention encoder
# ---------------------------------------------------------------------------

_MASKED_SCORE = -1e30  # finite stand-in for -inf; exp underflows to exactly 0


def layer_norm_rows(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = ad.mean_axis(x, 1, keepdims=True)
    centered = ad.sub(x, mu)
    var = ad.mean_axis(ad.mul(centered, centered), 1, keepdims=True)
    normed = ad.div(centered, ad.sqrt(ad.add(var, Tensor(eps))))
    return ad.add(ad.mul(normed, gain), bias)


class AttentionBlock:
    """Pre-norm residual block: x + MHA(LN(x)) then x + FF(LN(x))."""

    def __init__(self, model_dim: int, num_heads: int, ff_dim: int,
                 rng: np.random.Generator):
        if model_dim % num_heads != 0:
            raise ValueError(
                f"model_dim {model_dim} not divisible by num_heads {num_heads}"
            )
        self.model_dim = model_dim
        self.num_heads = num_heads
        self.head_dim = model_dim // num_heads
        self.wq = Linear(model_dim, model_dim, rng)
        self.wk = Linear(model_dim, model_dim, rng)
        self.wv = Linear(model_dim, model_dim, rng)
        self.wo = Linear(model_dim, model_dim, rng)
        self.ff1 = Linear(model_dim, ff_dim, rng)
        self.ff2 = Linear(ff_dim, model_dim, rng)
        self.ln1_gain = Tensor(np.ones(model_dim), requires_grad=True)
        self.ln1_bias = Tensor(np.zeros(model_dim), requires_grad=True)
        self.ln2_gain = Tensor(np.ones(model_dim), requires_grad=True)
        self.ln2_bias = Tensor(np.zeros(model_dim), requires_grad=True)

    def __call__(self, x: Tensor, key_bias: Tensor) -> Tensor:
        inner = layer_norm_rows(x, self.ln1_gain, self.ln1_bias)
        q, k, v = self.wq(inner), self.wk(inner), self.wv(inner)
        hd = self.head_dim
        heads = []
        for h in range(self.num_heads):
            qh = ad.narrow(q, 1, h * hd, (h + 1) * hd)
            kh = ad.narrow(k, 1, h * hd, (h + 1) * hd)
            vh = ad.narrow(v, 1, h * hd, (h + 1) * hd)
            scores = ad.scale(ad.matmul(qh, ad.transpose(kh)), 1.0 / math.sqrt(hd))
            weights = ad.softmax_rows(ad.add(scores, key_bias))
            heads.append(ad.matmul(weights, vh))
        x = ad.add(x, self.wo(ad.concat(heads, axis=1)))
        inner = layer_norm_rows(x, self.ln2_gain, self.ln2_bias)
        return ad.add(x, self.ff2(ad.relu(self.ff1(inner))))

    def attention_weights(self, x: Tensor, key_bias: Tensor) -> list[np.ndarray]:
        """Per-head attention matrices of the first sub-layer (inspection only)."""
        inner = layer_norm_rows(x, self.ln1_gain, self.ln1_bias)
        q, k = self.wq(inner), self.wk(inner)
        hd = self.head_dim
        out = []
        for h in range(self.num_heads):
            qh = ad.narrow(q, 1, h * hd, (h + 1) * hd)
            kh = ad.narrow(k, 1, h * hd, (h + 1) * hd)
            scores = ad.scale(ad.matmul(qh, ad.transpose(kh)), 1.0 / math.sqrt(hd))
            out.append(ad.softmax_rows(ad.add(scores, key_bias)).data)
        return out

    def params(self) -> list[Tensor]:
        out = []
        for lin in (self.wq, self.wk, self.wv, self.wo, self.ff1, self.ff2):
            out.extend(lin.params())
        out.extend([self.ln1_gain, self.ln1_bias, self.ln2_gain, self.ln2_bias])
        return out


def key_padding_bias(mask) -> Tensor:
    """Additive score bias (1 x T) that zeroes attention to padded keys."""
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 1:
        raise ValueError(f"mask must be 1-d, got shape {mask.shape}")
    if not mask.any():
        raise ValueError("all positions masked")
    return Tensor(np.where(mask, 0.0, _MASKED_SCORE)[None, :])


def self_attention_encode(blocks: Sequence[AttentionBlock], x: Tensor, mask) -> Tensor:
    """Run (T x d) features through a stack of attention blocks.

    ``mask`` is a length-T boolean array, True at real positions. Padded
    positions get attention weight exactly 0 from every query; their own
    output rows are meaningless and must be ignored downstream.
    """
    mask = np.asarray(mask, dtype=bool)
    if x.data.ndim != 2 or mask.shape != (x.shape[0],):
        raise ValueError(
            f"self_attention_encode: input {x.shape} does not match mask {mask.shape}"
        )
    bias = key_padding_bias(mask)
    for block in blocks:
        x = block(x, bias)
    return x


def sinusoidal_positions(steps: int, dim: int) -> np.ndarray:
    """Standard sine/cosine positional table, shape (steps, dim)."""
    pos = np.arange(steps)[:, None].astype(np.float64)
    idx = np.arange(dim // 2)[None, :].astype(np.float64)
    angles = pos / np.power(10000.0, 2.0 * idx / dim)
    table = np.zeros((steps, dim))
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)
    return table
