"""Neural building blocks assembled from the autodiff ops.

All layers work on batched inputs of shape (batch, length, width) and expose
``parameters()`` in a stable order for checkpointing.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor

ATTENTION_MASK_FILL = -1e30


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    """Scaled uniform init, bound 1/sqrt(fan_in)."""
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def normal_init(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    return rng.normal(0.0, std, size=shape)


class Linear:
    def __init__(self, in_width: int, out_width: int, name: str,
                 rng: np.random.Generator, init: str = "uniform"):
        if init == "uniform":
            w = uniform_init(rng, (in_width, out_width), in_width)
        else:
            w = normal_init(rng, (in_width, out_width))
        self.W = Parameter(w, f"{name}.W")
        self.b = Parameter(np.zeros(out_width), f"{name}.b")

    def __call__(self, x: Tensor) -> Tensor:
        return T.matmul(x, self.W) + self.b

    def parameters(self):
        return [self.W, self.b]


class LayerNorm:
    def __init__(self, width: int, name: str):
        self.gamma = Parameter(np.ones(width), f"{name}.gamma")
        self.beta = Parameter(np.zeros(width), f"{name}.beta")

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta)

    def parameters(self):
        return [self.gamma, self.beta]


def attention_bias(valid: np.ndarray | None, length: int) -> np.ndarray | None:
    """Additive key mask of shape (batch, 1, 1, length); None when all valid."""
    if valid is None:
        return None
    if valid.shape[-1] != length:
        raise T.ShapeError(f"attention mask length {valid.shape[-1]} != sequence length {length}")
    bias = np.where(valid, 0.0, ATTENTION_MASK_FILL)
    return bias[:, None, None, :]


class MultiHeadAttention:
    """Scaled dot-product attention; returns per-head weights for analysis."""

    def __init__(self, width: int, n_heads: int, name: str, rng: np.random.Generator,
                 init: str = "uniform"):
        if width % n_heads != 0:
            raise T.ShapeError(f"attention width {width} not divisible by {n_heads} heads")
        self.width = width
        self.n_heads = n_heads
        self.head_width = width // n_heads
        self.wq = Linear(width, width, f"{name}.wq", rng, init)
        self.wk = Linear(width, width, f"{name}.wk", rng, init)
        self.wv = Linear(width, width, f"{name}.wv", rng, init)
        self.wo = Linear(width, width, f"{name}.wo", rng, init)

    def _split_heads(self, x: Tensor, batch: int, length: int) -> Tensor:
        x = T.reshape(x, (batch, length, self.n_heads, self.head_width))
        return T.swapaxes(x, 1, 2)  # (B, h, L, hw)

    def __call__(self, x: Tensor, valid: np.ndarray | None = None,
                 train: bool = False, rng=None, dropout_rate: float = 0.0):
        batch, length, _ = x.data.shape
        q = self._split_heads(self.wq(x), batch, length)
        k = self._split_heads(self.wk(x), batch, length)
        v = self._split_heads(self.wv(x), batch, length)
        scores = T.matmul(q, T.swapaxes(k, 2, 3)) * (1.0 / np.sqrt(self.head_width))
        bias = attention_bias(valid, length)
        if bias is not None:
            scores = scores + Tensor(bias)
        weights = T.softmax(scores, axis=-1)  # (B, h, L, L)
        mixed = T.dropout(weights, dropout_rate, train, rng)
        ctx = T.matmul(mixed, v)  # (B, h, L, hw)
        ctx = T.reshape(T.swapaxes(ctx, 1, 2), (batch, length, self.width))
        return self.wo(ctx), weights

    def parameters(self):
        return self.wq.parameters() + self.wk.parameters() + self.wv.parameters() + self.wo.parameters()


class TransformerBlock:
    """Attention and feed-forward sublayers, each with residual + layer norm."""

    def __init__(self, width: int, n_heads: int, ff_width: int, name: str,
                 rng: np.random.Generator, dropout: float = 0.1, init: str = "uniform"):
        self.attn = MultiHeadAttention(width, n_heads, f"{name}.attn", rng, init)
        self.ln1 = LayerNorm(width, f"{name}.ln1")
        self.ff1 = Linear(width, ff_width, f"{name}.ff1", rng, init)
        self.ff2 = Linear(ff_width, width, f"{name}.ff2", rng, init)
        self.ln2 = LayerNorm(width, f"{name}.ln2")
        self.dropout = dropout

    def __call__(self, x: Tensor, valid: np.ndarray | None = None,
                 train: bool = False, rng=None):
        attn_out, weights = self.attn(x, valid, train, rng, self.dropout)
        x = self.ln1(x + T.dropout(attn_out, self.dropout, train, rng))
        ff = self.ff2(T.gelu(self.ff1(x)))
        x = self.ln2(x + T.dropout(ff, self.dropout, train, rng))
        return x, weights

    def parameters(self):
        return (self.attn.parameters() + self.ln1.parameters()
                + self.ff1.parameters() + self.ff2.parameters() + self.ln2.parameters())


class LSTMLayer:
    """Single-direction LSTM over (batch, length, width) inputs.

    Timestep inputs are sliced from the raw sequence, so a constant input
    (e.g. cached frozen-encoder features) adds no backward work per step.
    """

    def __init__(self, in_width: int, hidden: int, name: str, rng: np.random.Generator):
        self.hidden = hidden
        self.W = Parameter(uniform_init(rng, (in_width, 4 * hidden), in_width), f"{name}.W")
        self.U = Parameter(uniform_init(rng, (hidden, 4 * hidden), hidden), f"{name}.U")
        bias = np.zeros(4 * hidden)
        bias[hidden:2 * hidden] = 1.0  # forget gate opens at init
        self.b = Parameter(bias, f"{name}.b")

    def __call__(self, x: Tensor, reverse: bool = False) -> Tensor:
        batch, length, _ = x.data.shape
        h = self.hidden
        steps = range(length - 1, -1, -1) if reverse else range(length)
        if x.requires_grad:
            inputs = {t: x[:, t, :] for t in steps}
        else:
            inputs = {t: Tensor(x.data[:, t, :]) for t in steps}
        h_t = Tensor(np.zeros((batch, h)))
        c_t = Tensor(np.zeros((batch, h)))
        outputs: list = [None] * length
        for t in steps:
            g = T.matmul(inputs[t], self.W) + T.matmul(h_t, self.U) + self.b
            i = T.sigmoid(g[:, :h])
            f = T.sigmoid(g[:, h:2 * h])
            cand = T.tanh(g[:, 2 * h:3 * h])
            o = T.sigmoid(g[:, 3 * h:])
            c_t = f * c_t + i * cand
            h_t = o * T.tanh(c_t)
            outputs[t] = T.reshape(h_t, (batch, 1, h))
        return T.concat(outputs, axis=1)

    def parameters(self):
        return [self.W, self.U, self.b]


class BLSTM:
    """Stack of bidirectional LSTM layers; output width is 2 x hidden."""

    def __init__(self, in_width: int, hidden: int, n_layers: int, name: str,
                 rng: np.random.Generator):
        self.layers = []
        width = in_width
        for i in range(n_layers):
            fwd = LSTMLayer(width, hidden, f"{name}.l{i}.fwd", rng)
            bwd = LSTMLayer(width, hidden, f"{name}.l{i}.bwd", rng)
            self.layers.append((fwd, bwd))
            width = 2 * hidden
        self.out_width = width

    def __call__(self, x: Tensor) -> Tensor:
        for fwd, bwd in self.layers:
            x = T.concat([fwd(x), bwd(x, reverse=True)], axis=2)
        return x

    def parameters(self):
        params = []
        for fwd, bwd in self.layers:
            params += fwd.parameters() + bwd.parameters()
        return params
