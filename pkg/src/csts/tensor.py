"""Minimal N-d tensor library with reverse-mode automatic differentiation.

Everything the model computes goes through the ops in this module, so the
whole forward/backward path can be cross-checked against the finite-difference
oracle at the bottom of the file.

Conventions:
  - ops never mutate a tensor that is already part of a graph; each op
    returns a fresh tensor,
  - every forward result is NaN-checked and aborts naming the op,
  - gradients accumulate into ``.grad`` of graph leaves only.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, NumericsError, ShapeError

_DTYPES = {"f64": np.float64, "f32": np.float32}
_default_dtype: type = np.float64

# Test hook: when set to an op name, gradients flowing out of that op are
# negated. Lets verification tooling prove it actually detects a broken
# backward instead of passing vacuously.
SABOTAGE_OP: str | None = None

_grad_enabled = True


def set_precision(mode: str) -> None:
    """Select the float width ("f64" or "f32") for newly created tensors."""
    global _default_dtype
    if mode not in _DTYPES:
        raise ConfigError(f"unknown precision mode {mode!r}; expected one of {sorted(_DTYPES)}")
    _default_dtype = _DTYPES[mode]


def default_dtype() -> np.dtype:
    return np.dtype(_default_dtype)


class no_grad:
    """Context manager that turns off graph recording (evaluation paths)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=_default_dtype)
        self.requires_grad = requires_grad
        # leaves that want gradients start at zero so a backward pass that
        # never reaches them still leaves a well-defined value behind
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None
        self._op = "leaf"

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, _coerce(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _coerce(other, self))

    def __rsub__(self, other):
        return sub(_coerce(other, self), self)

    def __mul__(self, other):
        return mul(self, _coerce(other, self))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _coerce(other, self))

    def __rtruediv__(self, other):
        return div(_coerce(other, self), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- method aliases ----------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_default_dtype), requires_grad=requires_grad)


def _coerce(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    t = Tensor.__new__(Tensor)
    t.data = np.asarray(value, dtype=like.data.dtype)
    t.requires_grad = False
    t.grad = None
    t._parents = ()
    t._backward = None
    t._op = "const"
    return t


def _make(out_data: np.ndarray, parents: tuple[Tensor, ...], op: str,
          backward: Callable[[np.ndarray], tuple]) -> Tensor:
    if np.isnan(out_data).any():
        raise NumericsError(f"NaN produced by op '{op}'")
    t = Tensor.__new__(Tensor)
    t.data = out_data
    t.grad = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = parents
        t._backward = backward
        t._op = op
    else:
        t.requires_grad = False
        t._parents = ()
        t._backward = None
        t._op = op
    return t


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to ``shape`` after numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise arithmetic -----------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), "add", backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, (a, b), "sub", backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), "mul", backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make(out, (a, b), "div", backward)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), "neg", lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return _make(out, (a,), "exp", backward)


def log(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.log(a.data)

    def backward(g):
        return (g / a.data,)

    return _make(out, (a,), "log", backward)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def backward(g):
        return (g * (1.0 - out * out),)

    return _make(out, (a,), "tanh", backward)


# -- linear algebra ---------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul requires rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree for shapes {a.shape} and {b.shape}")
    try:
        out = a.data @ b.data
    except ValueError as e:  # leading dims not broadcastable
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not broadcastable") from e

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(out, (a, b), "matmul", backward)


# -- reductions --------------------------------------------------------------------


def _norm_axes(axis, ndim: int):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), "sum", backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = math.prod(a.shape[i] for i in axes) if a.ndim else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _make(np.asarray(out), (a,), "mean", backward)


# -- shape manipulation ----------------------------------------------------------------


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape
    out = a.data.reshape(shape)

    def backward(g):
        return (g.reshape(old),)

    return _make(out, (a,), "reshape", backward)


def permute(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"permute: axes {axes} are not a permutation for rank {a.ndim}")
    inv = tuple(np.argsort(axes))
    out = a.data.transpose(axes)

    def backward(g):
        return (g.transpose(inv),)

    return _make(out, (a,), "permute", backward)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(tensors))
        )

    return _make(out, tuple(tensors), "concat", backward)


def split(a: Tensor, sizes: Sequence[int], axis: int) -> list[Tensor]:
    axis = axis % a.ndim
    if sum(sizes) != a.shape[axis]:
        raise ShapeError(f"split sizes {tuple(sizes)} do not cover axis {axis} of shape {a.shape}")
    outs = []
    offset = 0
    for size in sizes:
        lo = offset
        offset += size
        idx = [slice(None)] * a.ndim
        idx[axis] = slice(lo, lo + size)
        idx = tuple(idx)
        piece = a.data[idx].copy()

        def backward(g, idx=idx):
            z = np.zeros_like(a.data)
            z[idx] = g
            return (z,)

        outs.append(_make(piece, (a,), "split", backward))
    return outs


# -- normalisation and attention helpers ------------------------------------------------


def softmax_last(a: Tensor) -> Tensor:
    if a.ndim < 1 or a.shape[-1] == 0:
        raise ShapeError(f"softmax_last needs a non-empty last dim, got shape {a.shape}")
    m = a.data.max(axis=-1, keepdims=True)
    e = np.exp(a.data - m)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (a,), "softmax_last", backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layer_norm: parameter shapes {gamma.shape}/{beta.shape} do not match last dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = gamma.data * xhat + beta.data

    def backward(g):
        ggamma = (g * xhat).reshape(-1, d).sum(axis=0)
        gbeta = g.reshape(-1, d).sum(axis=0)
        gh = g * gamma.data
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), "layer_norm", backward)


def l2_normalize_last(x: Tensor, eps: float = 1e-12) -> Tensor:
    # norm of an exact zero vector becomes eps instead of dividing by zero,
    # and the gradient stays finite everywhere
    q = (x.data * x.data).sum(axis=-1, keepdims=True)
    n = np.sqrt(q + eps * eps)
    out = x.data / n

    def backward(g):
        dot = (g * x.data).sum(axis=-1, keepdims=True)
        return (g / n - x.data * (dot / (n * n * n)),)

    return _make(out, (x,), "l2_normalize", backward)


# -- patch extraction (im2col for the token-embedding convolutions) --------------------------


def extract_patches(x: Tensor, kernel: tuple[int, int, int], stride: tuple[int, int, int],
                    pad: tuple[int, int, int] = (0, 0, 0)) -> Tensor:
    """Strided (T, H, W) patches over the trailing (T, H, W, C) dims.

    Output shape (..., To, Ho, Wo, kt*kh*kw*C); a linear layer on top of this
    is the same computation as a strided convolution.
    """
    if x.ndim < 4:
        raise ShapeError(f"extract_patches expects (..., T, H, W, C), got shape {x.shape}")
    t, h, w, c = x.shape[-4:]
    kt, kh, kw = kernel
    st, sh, sw = stride
    pt, ph, pw = pad
    for name, dim, s in (("T", t, st), ("H", h, sh), ("W", w, sw)):
        if dim % s != 0:
            raise ShapeError(f"extract_patches: {name}={dim} must be divisible by stride {s}")
    to = (t + 2 * pt - kt) // st + 1
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    if min(to, ho, wo) < 1:
        raise ShapeError(f"extract_patches: kernel {kernel} too large for padded input {x.shape}")

    lead = x.shape[:-4]
    pad_width = [(0, 0)] * len(lead) + [(pt, pt), (ph, ph), (pw, pw), (0, 0)]
    xp = np.pad(x.data, pad_width) if any(pad) else x.data
    out = np.empty(lead + (to, ho, wo, kt * kh * kw * c), dtype=x.data.dtype)
    for it in range(to):
        for ih in range(ho):
            for iw in range(wo):
                block = xp[..., it * st:it * st + kt, ih * sh:ih * sh + kh,
                           iw * sw:iw * sw + kw, :]
                out[..., it, ih, iw, :] = block.reshape(lead + (-1,))

    def backward(g):
        gp = np.zeros_like(xp)
        for it in range(to):
            for ih in range(ho):
                for iw in range(wo):
                    gp[..., it * st:it * st + kt, ih * sh:ih * sh + kh,
                       iw * sw:iw * sw + kw, :] += g[..., it, ih, iw, :].reshape(
                           lead + (kt, kh, kw, c))
        if any(pad):
            gp = gp[..., pt:pt + t, ph:ph + h, pw:pw + w, :]
        return (gp,)

    return _make(out, (x,), "extract_patches", backward)


# -- tape and reverse pass ----------------------------------------------------------------


class Tape:
    """Topologically ordered record of the ops reachable from a root tensor.

    Every node's parents appear before it; backward() walks the list in
    reverse exactly once.
    """

    __slots__ = ("nodes",)

    def __init__(self, root: Tensor):
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.nodes = order

    def __len__(self) -> int:
        return len(self.nodes)

    def ops(self) -> list[tuple[str, tuple[Tensor, ...], Tensor]]:
        return [(n._op, n._parents, n) for n in self.nodes if n._parents]


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires_grad leaf reachable from ``loss``."""
    if loss.data.shape != ():
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward on a tensor with requires_grad=False (nothing on tape)")
    tape = Tape(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        if SABOTAGE_OP is not None and node._op == SABOTAGE_OP:
            parent_grads = tuple(None if pg is None else -pg for pg in parent_grads)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            pid = id(parent)
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg


# -- finite-difference oracle ----------------------------------------------------------------


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5,
                      indices: Iterable[int] | None = None) -> float:
    """Max relative error between the analytic gradient of ``f`` at ``x`` and
    central differences.

    ``f`` must be deterministic. ``indices`` restricts the probe to a subset of
    flat components (all of them by default). NaN anywhere in ``f`` is reported
    as ``inf`` rather than raising.
    """
    if h <= 0:
        raise ContractError(f"finite_diff_check needs h > 0, got {h}")
    x.zero_grad()
    try:
        loss = f(x)
        backward(loss)
    except NumericsError:
        return math.inf
    analytic = x.grad.copy()

    flat = x.data.reshape(-1)
    probe = range(flat.size) if indices is None else indices
    worst = 0.0
    for i in probe:
        orig = flat[i]
        try:
            flat[i] = orig + h
            fp = float(f(x).data)
            flat[i] = orig - h
            fm = float(f(x).data)
        except NumericsError:
            flat[i] = orig
            return math.inf
        flat[i] = orig
        if math.isnan(fp) or math.isnan(fm):
            return math.inf
        numeric = (fp - fm) / (2.0 * h)
        a = float(analytic.reshape(-1)[i])
        rel = abs(a - numeric) / (abs(a) + abs(numeric) + 1e-12)
        worst = max(worst, rel)
    return worst
