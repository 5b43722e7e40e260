"""Network building blocks on the autodiff engine: layers, attention, Adam."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .autodiff import DimensionError, Tensor, concat, matmul, softmax

LOG_2PI = math.log(2.0 * math.pi)


class Module:
    """Parameter container. Any Tensor/Module attribute (or list of them)
    assigned in __init__ is discovered by parameters()/named_parameters()."""

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = []
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    out.append((full, value))
            elif isinstance(value, Module):
                out.extend(value.named_parameters(f"{full}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{full}.{i}."))
                    elif isinstance(item, Tensor) and item.requires_grad:
                        out.append((f"{full}.{i}", item))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, list]:
        return {name: p.data.tolist() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict) -> None:
        params = dict(self.named_parameters())
        if set(state) != set(params):
            missing = sorted(set(params) - set(state))
            extra = sorted(set(state) - set(params))
            raise DimensionError(
                f"state dict mismatch: missing={missing[:4]} extra={extra[:4]}"
            )
        for name, value in state.items():
            arr = np.asarray(value, dtype=np.float64)
            if arr.shape != params[name].shape:
                raise DimensionError(
                    f"parameter {name}: stored shape {arr.shape} != {params[name].shape}"
                )
            params[name].data[...] = arr


def _init_weight(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Tensor(_init_weight(rng, d_in, d_out), requires_grad=True)
        if bias:
            bound = 1.0 / math.sqrt(d_in)
            self.bias = Tensor(rng.uniform(-bound, bound, size=d_out), requires_grad=True)
        else:
            self.bias = None

    def __call__(self, x: Tensor) -> Tensor:
        squeeze = x.ndim == 1
        if squeeze:
            x = x.reshape(1, -1)
        y = matmul(x, self.weight)
        if self.bias is not None:
            y = y + self.bias
        return y.reshape(y.shape[1:]) if squeeze else y


class MLP(Module):
    """Linear stack with ReLU between layers, none after the last."""

    def __init__(self, dims: Sequence[int], rng: np.random.Generator):
        if len(dims) < 2:
            raise DimensionError("MLP needs at least input and output dims")
        self.layers = [Linear(dims[i], dims[i + 1], rng) for i in range(len(dims) - 1)]

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers[:-1]:
            x = layer(x).relu()
        return self.layers[-1](x)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(d), requires_grad=True)
        self.beta = Tensor(np.zeros(d), requires_grad=True)
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        mu = x.mean(axis=-1, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=-1, keepdims=True)
        normed = centered / (var + self._eps).sqrt()
        return normed * self.gamma + self.beta


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    """(..., T, d) -> (..., h, T, d/h)."""
    *batch, t, d = x.shape
    if d % n_heads:
        raise DimensionError(f"width {d} not divisible by {n_heads} heads")
    x = x.reshape(*batch, t, n_heads, d // n_heads)
    axes = list(range(x.ndim))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    return x.transpose(axes)


def merge_heads(x: Tensor) -> Tensor:
    """(..., h, T, d/h) -> (..., T, h*(d/h))."""
    axes = list(range(x.ndim))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    x = x.transpose(axes)
    *batch, t, h, dk = x.shape
    return x.reshape(*batch, t, h * dk)


def attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int = 1) -> Tensor:
    """Scaled dot-product attention over the last two axes.

    q: (..., Tq, d); k, v: (..., Tk, d). The multi-head variant splits d into
    n_heads slices and concatenates the per-head outputs (no output projection).
    """
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError("query/key widths disagree")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError("key/value row counts disagree")
    if n_heads > 1:
        q, k, v = split_heads(q, n_heads), split_heads(k, n_heads), split_heads(v, n_heads)
    d_k = q.shape[-1]
    scores = matmul(q, k.swap_last()) * (1.0 / math.sqrt(d_k))
    out = matmul(softmax(scores, axis=-1), v)
    return merge_heads(out) if n_heads > 1 else out


class MultiHeadAttention(Module):
    """Projected multi-head attention with output projection."""

    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator,
                 d_q_in: int | None = None, d_kv_in: int | None = None):
        self.n_heads = n_heads
        self.wq = Linear(d_q_in or d_model, d_model, rng)
        self.wk = Linear(d_kv_in or d_model, d_model, rng)
        self.wv = Linear(d_kv_in or d_model, d_model, rng)
        self.wo = Linear(d_model, d_model, rng)

    def __call__(self, q_in: Tensor, kv_in: Tensor) -> Tensor:
        out = attention(self.wq(q_in), self.wk(kv_in), self.wv(kv_in), self.n_heads)
        return self.wo(out)


class FeedForward(Module):
    def __init__(self, d_model: int, rng: np.random.Generator, expansion: int = 4):
        self.lin1 = Linear(d_model, expansion * d_model, rng)
        self.lin2 = Linear(expansion * d_model, d_model, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.lin2(self.lin1(x).relu())


class TransformerEncoderLayer(Module):
    """Pre-norm self-attention block: x + MHA(LN(x)), then x + FF(LN(x))."""

    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, n_heads, rng)
        self.norm2 = LayerNorm(d_model)
        self.ff = FeedForward(d_model, rng)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h)
        x = x + self.ff(self.norm2(x))
        return x


class CrossAttentionLayer(Module):
    """Pre-norm cross-attention block: q + MHA(LN(q), ctx), then q + FF(LN(q))."""

    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator):
        self.norm_q = LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, n_heads, rng)
        self.norm2 = LayerNorm(d_model)
        self.ff = FeedForward(d_model, rng)

    def __call__(self, q: Tensor, context: Tensor) -> Tensor:
        q = q + self.attn(self.norm_q(q), context)
        q = q + self.ff(self.norm2(q))
        return q

    def feed_forward_only(self, q: Tensor) -> Tensor:
        """Context-free path for empty key/value sets."""
        return q + self.ff(self.norm2(q))


def gaussian_log_prob(x: Tensor, mean: Tensor, std: Tensor) -> Tensor:
    """Elementwise diagonal-Gaussian log density; differentiable in all args."""
    z = (x - mean) / std
    return z * z * -0.5 - std.log() - 0.5 * LOG_2PI


def gaussian_entropy(std: Tensor) -> Tensor:
    """Elementwise entropy of a diagonal Gaussian: 0.5*log(2*pi*e) + log(std)."""
    return std.log() + 0.5 * (LOG_2PI + 1.0)


class Adam:
    """Adam with bias correction over a fixed parameter list."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()
