"""Small network building blocks on top of :mod:`odesplat.autodiff`.

Parameters live outside the graph as a flat ``dict[str, np.ndarray]``; every
training step binds them as leaves of a fresh graph (see :func:`bind`).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, Var

ACTIVATIONS = {"relu": ad.relu, "tanh": ad.tanh, "sigmoid": ad.sigmoid}


def bind(graph: Graph, params: dict[str, np.ndarray], trainable=None) -> dict[str, Var]:
    """Register parameters as graph leaves.  ``trainable`` filters which need gradients."""
    out = {}
    for name, arr in params.items():
        rg = True if trainable is None else trainable(name)
        out[name] = graph.leaf(arr, name=name, requires_grad=rg)
    return out


def linear(x: Var, w: Var, b: Var | None = None) -> Var:
    y = ad.matmul(x, w)
    return y if b is None else y + b


@dataclass
class MLP:
    """Fully connected network; ``depth`` counts hidden layers."""

    prefix: str
    in_dim: int
    width: int
    out_dim: int
    depth: int = 1
    activation: str = "relu"
    zero_last: bool = False

    @property
    def dims(self) -> list[int]:
        return [self.in_dim] + [self.width] * self.depth + [self.out_dim]

    def init(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        params = {}
        dims = self.dims
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            last = i == len(dims) - 2
            if last and self.zero_last:
                w = np.zeros((a, b))
            else:
                # He init for relu stacks, Glorot otherwise
                scale = np.sqrt(2.0 / a) if self.activation == "relu" else np.sqrt(1.0 / a)
                w = rng.normal(0.0, scale, size=(a, b))
            params[f"{self.prefix}.{i}.w"] = w
            params[f"{self.prefix}.{i}.b"] = np.zeros(b)
        return params

    def __call__(self, p: dict[str, Var], x: Var) -> Var:
        act = ACTIVATIONS[self.activation]
        n = len(self.dims) - 1
        for i in range(n):
            x = linear(x, p[f"{self.prefix}.{i}.w"], p[f"{self.prefix}.{i}.b"])
            if i < n - 1:
                x = act(x)
        return x


def layer_norm(x: Var, gain: Var, bias: Var, eps: float = 1e-5) -> Var:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / ad.sqrt(var + eps) * gain + bias


@dataclass
class TransformerBlock:
    """Pre-norm self-attention block with a two-layer feed-forward part."""

    prefix: str
    dim: int
    heads: int = 4
    ff_mult: int = 2

    def init(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        d, p = self.dim, self.prefix
        s = np.sqrt(1.0 / d)
        return {
            f"{p}.ln1.g": np.ones(d),
            f"{p}.ln1.b": np.zeros(d),
            f"{p}.qkv.w": rng.normal(0, s, (d, 3 * d)),
            f"{p}.qkv.b": np.zeros(3 * d),
            f"{p}.out.w": rng.normal(0, s, (d, d)),
            f"{p}.out.b": np.zeros(d),
            f"{p}.ln2.g": np.ones(d),
            f"{p}.ln2.b": np.zeros(d),
            f"{p}.ff1.w": rng.normal(0, np.sqrt(2.0 / d), (d, self.ff_mult * d)),
            f"{p}.ff1.b": np.zeros(self.ff_mult * d),
            f"{p}.ff2.w": rng.normal(0, s / np.sqrt(self.ff_mult), (self.ff_mult * d, d)),
            f"{p}.ff2.b": np.zeros(d),
        }

    def __call__(self, p: dict[str, Var], x: Var) -> Var:
        """``x`` has shape (tokens, dim).  No positional encoding is added."""
        pre = self.prefix
        n, d = x.shape
        h = self.heads
        dh = d // h
        y = layer_norm(x, p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"])
        qkv = linear(y, p[f"{pre}.qkv.w"], p[f"{pre}.qkv.b"])  # (n, 3d)
        qkv = ad.transpose(qkv.reshape(n, 3, h, dh), (1, 2, 0, 3))  # (3, h, n, dh)
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = ad.softmax(ad.matmul(q, ad.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(dh)), axis=-1)
        o = ad.matmul(att, v)  # (h, n, dh)
        o = ad.transpose(o, (1, 0, 2)).reshape(n, d)
        x = x + linear(o, p[f"{pre}.out.w"], p[f"{pre}.out.b"])
        y = layer_norm(x, p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"])
        y = linear(ad.relu(linear(y, p[f"{pre}.ff1.w"], p[f"{pre}.ff1.b"])), p[f"{pre}.ff2.w"], p[f"{pre}.ff2.b"])
        return x + y
