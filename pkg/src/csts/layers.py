"""Parameter containers and the transformer building blocks shared by the
encoders, the fusion branches, and the decoder."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import Tensor


class Module:
    """Plain parameter container; submodules and parameters are discovered by
    walking instance attributes in definition order."""

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}

        def walk(value, key: str) -> None:
            if isinstance(value, Tensor):
                if value.requires_grad:
                    out[key] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(f"{key}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    walk(item, f"{key}.{i}")

        for name, value in self.__dict__.items():
            walk(value, f"{prefix}{name}")
        return out

    def num_parameters(self) -> int:
        return sum(p.size for p in self.named_parameters().values())

    def zero_grads(self) -> None:
        for p in self.named_parameters().values():
            p.zero_grad()


def xavier_uniform(rng: np.random.Generator, shape: tuple[int, ...],
                   fan_in: int, fan_out: int) -> Tensor:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    data = rng.uniform(-limit, limit, size=shape).astype(T.default_dtype())
    return Tensor(data, requires_grad=True)


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 bias: bool = True):
        self.weight = xavier_uniform(rng, (in_dim, out_dim), in_dim, out_dim)
        self.bias = T.zeros((out_dim,), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = T.matmul(x, self.weight)
        if self.bias is not None:
            out = out + self.bias
        return out


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = T.zeros((dim,), requires_grad=True)
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, eps=self._eps)


def gelu(x: Tensor) -> Tensor:
    # tanh form; smooth, so gradient checks stay clean
    c = math.sqrt(2.0 / math.pi)
    return x * 0.5 * (T.tanh((x + x * x * x * 0.044715) * c) + 1.0)


class Mlp(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


# sequences longer than this only occur in no-grad shape traces; stream the
# attention row-block by row-block there to bound peak memory
_STREAM_SEQ_LEN = 2048
_STREAM_BLOCK = 512


class SelfAttentionBlock(Module):
    """Pre-norm self-attention followed by a residual MLP.

    Works on (..., S, D) token sequences. ``mask`` is an additive (S, S)
    array (0 or -1e30) applied to the attention logits; -1e30 underflows to an
    exactly zero attention weight after the softmax.
    """

    def __init__(self, dim: int, heads: int, mlp_ratio: float, rng: np.random.Generator):
        if dim % heads != 0:
            raise ConfigError(f"head count {heads} must divide channel dim {dim}")
        self.norm1 = LayerNorm(dim)
        self.q = Linear(dim, dim, rng)
        # a key bias shifts every logit of a softmax row equally, so it can
        # never affect the output; omit it rather than carry a dead parameter
        self.k = Linear(dim, dim, rng, bias=False)
        self.v = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio), rng)
        self._dim = dim
        self._heads = heads

    def _attend(self, x: Tensor, mask: np.ndarray | None, capture: bool):
        lead = x.shape[:-2]
        s, d = x.shape[-2:]
        h = self._heads
        dh = d // h
        q, k, v = self.q(x), self.k(x), self.v(x)
        if not q.requires_grad and not capture and s > _STREAM_SEQ_LEN:
            return Tensor(_streamed_attention(
                q.data, k.data, v.data, mask, h)), None
        # (..., S, D) -> (..., h, S, Dh)
        perm = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
        q = q.reshape(lead + (s, h, dh)).permute(perm)
        k = k.reshape(lead + (s, h, dh)).permute(perm)
        v = v.reshape(lead + (s, h, dh)).permute(perm)
        scores = T.matmul(q, k.permute(tuple(range(len(lead) + 1)) +
                                       (len(lead) + 2, len(lead) + 1)))
        scores = scores * (1.0 / math.sqrt(dh))
        if mask is not None:
            scores = scores + Tensor(mask)
        probs = T.softmax_last(scores)  # (..., h, S, S)
        ctx = T.matmul(probs, v)
        inv = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
        ctx = ctx.permute(inv).reshape(lead + (s, d))
        return ctx, (probs.data.copy() if capture else None)

    def __call__(self, x: Tensor, mask: np.ndarray | None = None,
                 capture: bool = False):
        ctx, probs = self._attend(self.norm1(x), mask, capture)
        x = x + self.out(ctx)
        x = x + self.mlp(self.norm2(x))
        return (x, probs) if capture else x


def _streamed_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray,
                        mask: np.ndarray | None, heads: int) -> np.ndarray:
    lead = q.shape[:-2]
    s, d = q.shape[-2:]
    dh = d // heads
    q = q.reshape(-1, s, heads, dh).transpose(0, 2, 1, 3)
    k = k.reshape(-1, s, heads, dh).transpose(0, 2, 1, 3)
    v = v.reshape(-1, s, heads, dh).transpose(0, 2, 1, 3)
    out = np.empty_like(q)
    scale = 1.0 / math.sqrt(dh)
    for b in range(q.shape[0]):
        for h in range(heads):
            kt = k[b, h].T
            for lo in range(0, s, _STREAM_BLOCK):
                hi = min(lo + _STREAM_BLOCK, s)
                scores = q[b, h, lo:hi] @ kt * scale
                if mask is not None:
                    scores += mask[lo:hi]
                scores -= scores.max(axis=-1, keepdims=True)
                np.exp(scores, out=scores)
                scores /= scores.sum(axis=-1, keepdims=True)
                out[b, h, lo:hi] = scores @ v[b, h]
    return out.transpose(0, 2, 1, 3).reshape(lead + (s, d))


def mean_pool_2x2(x: Tensor) -> Tensor:
    """2x2 spatial mean pool over (..., T, H, W, D)."""
    *lead, t, h, w, d = x.shape
    x = x.reshape(tuple(lead) + (t, h // 2, 2, w // 2, 2, d))
    return x.mean(axis=(-4, -2))


def interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Linear-interpolation matrix (n_out, n_in) with endpoints aligned."""
    m = np.zeros((n_out, n_in), dtype=T.default_dtype())
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    pos = np.linspace(0.0, n_in - 1.0, n_out)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    m[np.arange(n_out), lo] += 1.0 - frac
    m[np.arange(n_out), hi] += frac
    return m


def repeat_matrix(n_in: int, factor: int) -> np.ndarray:
    """Nearest-neighbour upsampling matrix (n_in*factor, n_in)."""
    m = np.zeros((n_in * factor, n_in), dtype=T.default_dtype())
    m[np.arange(n_in * factor), np.arange(n_in * factor) // factor] = 1.0
    return m


def apply_axis_matrix(x: Tensor, m: np.ndarray, axis: int) -> Tensor:
    """Resample one axis of ``x`` by the linear map ``m`` (n_out, n_in)."""
    axis = axis % x.ndim
    last = x.ndim - 1
    order = [i for i in range(x.ndim) if i != axis] + [axis]
    moved = x.permute(tuple(order))
    lead = moved.shape[:-1]
    flat = moved.reshape((-1, moved.shape[-1])) if len(lead) != 1 else moved
    out = T.matmul(flat, Tensor(m.T))
    out = out.reshape(lead + (m.shape[0],))
    inv = [0] * x.ndim
    for i, o in enumerate(order):
        inv[o] = i
    return out.permute(tuple(inv))


def trilinear_resize(x: Tensor, out_shape: tuple[int, int, int]) -> Tensor:
    """Trilinear interpolation of the trailing (T, H, W) axes."""
    t, h, w = x.shape[-3:]
    ot, oh, ow = out_shape
    if t != ot:
        x = apply_axis_matrix(x, interp_matrix(t, ot), axis=-3)
    if h != oh:
        x = apply_axis_matrix(x, interp_matrix(h, oh), axis=-2)
    if w != ow:
        x = apply_axis_matrix(x, interp_matrix(w, ow), axis=-1)
    return x
