"""Neural layer vocabulary used by the stage estimators.

Layers hold their parameters as autodiff leaf nodes and rebuild the forward
graph on every call (dynamic tape). Sequence inputs are batch-first:
``[batch, steps, features]``. Layers are immutable during inference and may
be shared read-only; training mutates parameter values through the optimizer
and is single-writer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node, ShapeError

LSTM_HIDDEN = 64
ATTENTION_HEADS = 2
ATTENTION_KEY_DIM = 40
DROPOUT_RATE = 0.2

ACTIVATIONS = {
    "linear": lambda x: x,
    "sigmoid": ad.sigmoid,
    "tanh": ad.tanh,
}


def glorot_uniform(rng: np.random.Generator, n_in: int, n_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-limit, limit, (n_in, n_out))


def orthogonal(rng: np.random.Generator, n: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


class DenseLayer:
    """Affine map plus pointwise activation: ``act(x @ w + b)``."""

    def __init__(self, weights: np.ndarray, bias: np.ndarray, activation: str = "linear"):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        weights = np.asarray(weights, dtype=np.float64)
        bias = np.asarray(bias, dtype=np.float64)
        if weights.ndim != 2 or bias.shape != (weights.shape[1],):
            raise ShapeError("dense layer needs weights [in, out] and bias [out]")
        self.w = ad.parameter(weights)
        self.b = ad.parameter(bias)
        self.activation = activation

    @classmethod
    def create(cls, n_in: int, n_out: int, activation: str,
               rng: np.random.Generator) -> "DenseLayer":
        return cls(glorot_uniform(rng, n_in, n_out), np.zeros(n_out), activation)

    def forward(self, x: Node) -> Node:
        if x.value.shape[-1] != self.w.value.shape[0]:
            raise ShapeError(
                f"dense input width {x.value.shape[-1]} != {self.w.value.shape[0]}"
            )
        return ACTIVATIONS[self.activation](ad.add(ad.matmul(x, self.w), self.b))

    def params(self, prefix: str) -> dict[str, Node]:
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


class LstmLayer:
    """Single LSTM with input/forget/candidate/output gates and 64 hidden units.

    Gate parameters are stored separately per gate (w_* for inputs, u_* for
    the recurrent path, b_* biases) and concatenated once per forward pass so
    each step costs two matrix products. The forget-gate bias starts at 1.
    """

    GATES = ("i", "f", "c", "o")

    def __init__(self, w: dict[str, np.ndarray], u: dict[str, np.ndarray],
                 b: dict[str, np.ndarray]):
        hidden = b["i"].shape[0]
        for g in self.GATES:
            if w[g].shape[1] != hidden or u[g].shape != (hidden, hidden):
                raise ShapeError("inconsistent LSTM gate shapes")
        self.w = {g: ad.parameter(w[g]) for g in self.GATES}
        self.u = {g: ad.parameter(u[g]) for g in self.GATES}
        self.b = {g: ad.parameter(b[g]) for g in self.GATES}
        self.hidden = hidden

    @classmethod
    def create(cls, n_in: int, hidden: int = LSTM_HIDDEN,
               rng: np.random.Generator | None = None) -> "LstmLayer":
        rng = rng if rng is not None else np.random.default_rng(0)
        w = {g: glorot_uniform(rng, n_in, hidden) for g in cls.GATES}
        u = {g: orthogonal(rng, hidden) for g in cls.GATES}
        b = {g: np.zeros(hidden) for g in cls.GATES}
        b["f"] = np.ones(hidden)
        return cls(w, u, b)

    def forward(self, seq: Node, return_sequence: bool = False) -> Node:
        if seq.value.ndim < 3:
            raise ShapeError("LSTM expects [batch, steps, features]")
        n_steps = seq.value.shape[-2]
        if n_steps < 1:
            raise ShapeError("LSTM sequence must have at least one step")
        batch = seq.value.shape[0]

        w_cat = ad.concat([self.w[g] for g in self.GATES], axis=-1)
        u_cat = ad.concat([self.u[g] for g in self.GATES], axis=-1)
        b_cat = ad.concat([self.b[g] for g in self.GATES], axis=-1)

        h = ad.constant(np.zeros((batch, self.hidden)))
        c = ad.constant(np.zeros((batch, self.hidden)))
        outputs = []
        for t in range(n_steps):
            x_t = ad.take_step(seq, t, axis=-2)
            gates = ad.add(ad.add(ad.matmul(x_t, w_cat), ad.matmul(h, u_cat)), b_cat)
            i = ad.sigmoid(ad.narrow(gates, -1, 0, self.hidden))
            f = ad.sigmoid(ad.narrow(gates, -1, self.hidden, self.hidden))
            cand = ad.tanh(ad.narrow(gates, -1, 2 * self.hidden, self.hidden))
            o = ad.sigmoid(ad.narrow(gates, -1, 3 * self.hidden, self.hidden))
            c = ad.add(ad.mul(f, c), ad.mul(i, cand))
            h = ad.mul(o, ad.tanh(c))
            if return_sequence:
                outputs.append(h)
        return ad.stack(outputs, axis=-2) if return_sequence else h

    def params(self, prefix: str) -> dict[str, Node]:
        out: dict[str, Node] = {}
        for g in self.GATES:
            out[f"{prefix}.w_{g}"] = self.w[g]
            out[f"{prefix}.u_{g}"] = self.u[g]
            out[f"{prefix}.b_{g}"] = self.b[g]
        return out


class SelfAttention:
    """Multi-head scaled dot-product self-attention over a sequence.

    Per head, queries/keys/values are projections of the same input; scores
    are scaled by 1/sqrt(key_dim), row-softmaxed, and applied to the values.
    Head outputs are concatenated and projected back to the input width.
    No positional encoding: inputs are already time-indexed features.
    """

    def __init__(self, d_model: int, n_heads: int = ATTENTION_HEADS,
                 key_dim: int = ATTENTION_KEY_DIM,
                 rng: np.random.Generator | None = None):
        if n_heads < 1 or key_dim < 1:
            raise ValueError("need at least one head and key_dim >= 1")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.d_model = d_model
        self.n_heads = n_heads
        self.key_dim = key_dim
        self.heads = []
        for _ in range(n_heads):
            self.heads.append({
                "wq": ad.parameter(glorot_uniform(rng, d_model, key_dim)),
                "bq": ad.parameter(np.zeros(key_dim)),
                "wk": ad.parameter(glorot_uniform(rng, d_model, key_dim)),
                "bk": ad.parameter(np.zeros(key_dim)),
                "wv": ad.parameter(glorot_uniform(rng, d_model, key_dim)),
                "bv": ad.parameter(np.zeros(key_dim)),
            })
        self.w_out = ad.parameter(glorot_uniform(rng, n_heads * key_dim, d_model))
        self.b_out = ad.parameter(np.zeros(d_model))

    def forward(self, seq: Node, weights_out: list | None = None) -> Node:
        if seq.value.shape[-1] != self.d_model:
            raise ShapeError(
                f"attention input width {seq.value.shape[-1]} != {self.d_model}"
            )
        contexts = []
        for head in self.heads:
            q = ad.add(ad.matmul(seq, head["wq"]), head["bq"])
            k = ad.add(ad.matmul(seq, head["wk"]), head["bk"])
            v = ad.add(ad.matmul(seq, head["wv"]), head["bv"])
            scores = ad.scale(ad.matmul(q, ad.transpose_last(k)),
                              1.0 / math.sqrt(self.key_dim))
            attn = ad.softmax(scores, axis=-1)
            if weights_out is not None:
                weights_out.append(attn.value.copy())
            contexts.append(ad.matmul(attn, v))
        return ad.add(ad.matmul(ad.concat(contexts, axis=-1), self.w_out), self.b_out)

    def params(self, prefix: str) -> dict[str, Node]:
        out: dict[str, Node] = {}
        for idx, head in enumerate(self.heads):
            for name, node in head.items():
                out[f"{prefix}.h{idx}.{name}"] = node
        out[f"{prefix}.w_out"] = self.w_out
        out[f"{prefix}.b_out"] = self.b_out
        return out


@dataclass
class DropoutSpec:
    rate: float = DROPOUT_RATE
    train: bool = False

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")


def dropout_apply(spec: DropoutSpec, x: Node,
                  rng: np.random.Generator | None = None) -> Node:
    """Inverted dropout: zero units with p=rate and rescale survivors so the
    expected activation is unchanged. Identity in eval mode or at rate 0."""
    if not spec.train or spec.rate == 0.0:
        return x
    if rng is None:
        raise ValueError("train-mode dropout needs an rng")
    keep = (rng.random(x.value.shape) >= spec.rate) / (1.0 - spec.rate)
    return ad.mul(x, ad.constant(keep))


class StageHead:
    """Final dense 128 -> 6 map with a softmax over the six growth stages."""

    def __init__(self, rng: np.random.Generator, n_in: int = 128, n_stages: int = 6):
        self.dense = DenseLayer.create(n_in, n_stages, "linear", rng)

    def forward(self, x: Node) -> tuple[Node, Node]:
        """Return (logits, stage distribution)."""
        logits = self.dense.forward(x)
        return logits, ad.softmax(logits, axis=-1)

    def params(self, prefix: str) -> dict[str, Node]:
        return self.dense.params(prefix)


def stage_head_forward(head: StageHead, x: Node) -> Node:
    """Stage distribution for a [batch, 128] activation block."""
    return head.forward(x)[1]
