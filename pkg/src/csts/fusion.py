"""Spatial and temporal audio-visual fusion, the reweight merge, and the four
joint-fusion baselines.

Spatial fusion runs one batched self-attention over all T*(N+1) tokens with an
additive -1e30 mask on every cross-frame pair, which is exactly equivalent to
independent per-frame attention. Temporal fusion attends over the 2T pooled
per-frame tokens of both modalities (visual rows first, audio rows second).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ShapeError, StateError
from .layers import Linear, Module, SelfAttentionBlock, gelu, xavier_uniform
from .tensor import Tensor

MASK_VALUE = -1e30  # underflows to an exactly zero attention weight


def cross_frame_mask(frames: int, tokens_per_frame: int) -> np.ndarray:
    """Additive (S, S) mask that removes every cross-frame attention pair."""
    s = frames * tokens_per_frame
    mask = np.full((s, s), MASK_VALUE, dtype=T.default_dtype())
    for t in range(frames):
        lo = t * tokens_per_frame
        mask[lo:lo + tokens_per_frame, lo:lo + tokens_per_frame] = 0.0
    return mask


class TokenPool(Module):
    """Learned map from all M tokens of a frame to a single token.

    Same computation as a full-grid convolution over the token grid: the M*D
    inputs of each time step feed one D-dimensional output. Pools that feed
    the multiplicative reweight merge set ``bias_init=1`` so the merge starts
    out as the identity instead of randomly rescaling channels.
    """

    def __init__(self, tokens: int, dim: int, rng: np.random.Generator,
                 bias_init: float = 0.0):
        self.proj = Linear(tokens * dim, dim, rng)
        if bias_init:
            self.proj.bias.data[:] = bias_init
        self._tokens = tokens
        self._dim = dim

    def __call__(self, tokens: Tensor) -> Tensor:
        *lead, t, m, d = tokens.shape
        if m != self._tokens or d != self._dim:
            raise ShapeError(f"token pool built for {self._tokens}x{self._dim} tokens, "
                             f"got {tokens.shape}")
        out = self.proj(tokens.reshape(tuple(lead) + (t, m * d)))
        return out.reshape(tuple(lead) + (t, 1, d))


class InFrameFusion(Module):
    """Masked self-attention over [visual tokens, audio token] of each frame."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float, rng: np.random.Generator):
        self.block = SelfAttentionBlock(dim, heads, mlp_ratio, rng)

    def __call__(self, visual: Tensor, z_as: Tensor, capture: bool = False
                 ) -> tuple[Tensor, np.ndarray | None]:
        *lead, t, n, d = visual.shape
        if z_as.shape[-3:] != (t, 1, d):
            raise ShapeError(f"audio token shape {z_as.shape} does not match "
                             f"visual frames {visual.shape}")
        z_s = T.concat([visual, z_as], axis=-2)            # (..., T, N+1, D)
        flat = z_s.reshape(tuple(lead) + (t * (n + 1), d))
        mask = cross_frame_mask(t, n + 1)
        if capture:
            out, probs = self.block(flat, mask=mask, capture=True)
            probs = _per_frame_blocks(probs, t, n + 1)
        else:
            out = self.block(flat, mask=mask)
            probs = None
        return out.reshape(tuple(lead) + (t, n + 1, d)), probs


def _per_frame_blocks(probs: np.ndarray, frames: int, width: int) -> np.ndarray:
    """(…, h, S, S) attention -> head-averaged per-frame blocks (…, T, w, w)."""
    probs = probs.mean(axis=-3)
    lead = probs.shape[:-2]
    out = np.empty(lead + (frames, width, width), dtype=probs.dtype)
    for t in range(frames):
        lo = t * width
        out[..., t, :, :] = probs[..., lo:lo + width, lo:lo + width]
    return out


class CrossFrameFusion(Module):
    """Full self-attention across the 2T per-frame tokens of both modalities."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float, rng: np.random.Generator):
        self.block = SelfAttentionBlock(dim, heads, mlp_ratio, rng)

    def __call__(self, z_vt: Tensor, z_at: Tensor) -> Tensor:
        *lead, t, one, d = z_vt.shape
        if z_at.shape != z_vt.shape:
            raise ShapeError(f"temporal tokens disagree: {z_vt.shape} vs {z_at.shape}")
        z_t = T.concat([z_vt, z_at], axis=-3)              # (..., 2T, 1, D)
        flat = z_t.reshape(tuple(lead) + (2 * t, d))
        out = self.block(flat)
        return out.reshape(tuple(lead) + (2 * t, 1, d))


def reweight(tokens: Tensor, weights: Tensor) -> Tensor:
    """Channel-wise broadcast multiply: every token of frame t is scaled by
    the frame's (1, D) weight vector."""
    return tokens * weights


@dataclass
class FusionBundle:
    """Intermediates the fusion stage produces, split per the layout contract:
    u_s rows 0..N-1 visual / row N audio; u_t rows 0..T-1 visual / rows
    T..2T-1 audio. Single-branch ablations fill only the fields they compute."""

    u_s: Tensor | None = None
    u_t: Tensor | None = None
    u_vs: Tensor | None = None
    u_as: Tensor | None = None
    u_vt: Tensor | None = None
    u_at: Tensor | None = None
    u_v: Tensor | None = None
    u_a: Tensor | None = None
    z_as: Tensor | None = None
    z_vt: Tensor | None = None
    z_at: Tensor | None = None
    spatial_probs: np.ndarray | None = None


def split_spatial(u_s: Tensor) -> tuple[Tensor, Tensor]:
    n_plus_1 = u_s.shape[-2]
    return tuple(T.split(u_s, [n_plus_1 - 1, 1], axis=-2))


def split_temporal(u_t: Tensor) -> tuple[Tensor, Tensor]:
    two_t = u_t.shape[-3]
    return tuple(T.split(u_t, [two_t // 2, two_t // 2], axis=-3))


def spatial_correlation_map(spatial_probs: np.ndarray | None,
                            grid: tuple[int, int]) -> np.ndarray:
    """Audio-query attention over the visual tokens, as (…, T, H, W) maps that
    each sum to one."""
    if spatial_probs is None:
        raise StateError("spatial attention weights were not captured; "
                         "run the fusion forward with capture enabled")
    h, w = grid
    rows = spatial_probs[..., -1, :-1]                     # (..., T, N)
    rows = rows / rows.sum(axis=-1, keepdims=True)
    return rows.reshape(rows.shape[:-1] + (h, w))


# -- joint-fusion baselines -------------------------------------------------------


class LinearFusion(Module):
    """Channel-concatenate per-position embeddings, then two linear layers."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.fc1 = Linear(2 * dim, dim, rng)
        self.fc2 = Linear(dim, dim, rng)

    def __call__(self, visual: Tensor, audio: Tensor) -> Tensor:
        if visual.shape[-2] != audio.shape[-2]:
            raise ShapeError(f"linear fusion needs matching token counts, got "
                             f"{visual.shape} and {audio.shape}")
        x = T.concat([visual, audio], axis=-1)             # (..., T, N, 2D)
        return self.fc2(gelu(self.fc1(x)))


class BilinearFusion(Module):
    """Reduce both token lists to a common length, then a bilinear layer."""

    def __init__(self, dim: int, tokens_visual: int, tokens_audio: int,
                 rng: np.random.Generator):
        length = tokens_visual
        self.reduce_v = Linear(tokens_visual, length, rng)
        self.reduce_a = Linear(tokens_audio, length, rng)
        self.weight = xavier_uniform(rng, (dim, dim * dim), dim, dim)
        self.bias = T.zeros((dim,), requires_grad=True)
        self._dim = dim
        self._length = length

    def _reduce(self, tokens: Tensor, layer: Linear) -> Tensor:
        *lead, length, d = tokens.shape
        swapped = tokens.permute(tuple(range(len(lead))) + (len(lead) + 1, len(lead)))
        out = layer(swapped)                               # (..., D, L')
        return out.permute(tuple(range(len(lead))) + (len(lead) + 1, len(lead)))

    def __call__(self, visual: Tensor, audio: Tensor) -> Tensor:
        *lead, t, n, d = visual.shape
        v = self._reduce(visual.reshape(tuple(lead) + (t * n, d)), self.reduce_v)
        ta, ma = audio.shape[-3], audio.shape[-2]
        a = self._reduce(audio.reshape(tuple(lead) + (ta * ma, d)), self.reduce_a)
        vw = T.matmul(v, self.weight)                      # (..., L, D*D)
        vw = vw.reshape(tuple(lead) + (self._length, d, d))
        out = (vw * a.reshape(tuple(lead) + (self._length, d, 1))).sum(axis=-2)
        out = out + self.bias
        return out.reshape(tuple(lead) + (t, n, d))


class ConcatFusion(Module):
    """Reshape the audio grid onto the visual grid and concatenate channels;
    the decoder consumes the doubled channel dim."""

    def __call__(self, visual: Tensor, audio: Tensor) -> Tensor:
        if visual.shape[-2] != audio.shape[-2]:
            raise ShapeError(f"concat fusion needs matching grids, got "
                             f"{visual.shape} and {audio.shape}")
        return T.concat([visual, audio], axis=-1)          # (..., T, N, 2D)


class VanillaSelfAttentionFusion(Module):
    """One standard self-attention layer over all T*(N+M) tokens jointly."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float, rng: np.random.Generator):
        self.block = SelfAttentionBlock(dim, heads, mlp_ratio, rng)

    def __call__(self, visual: Tensor, audio: Tensor,
                 mask: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
        *lead, t, n, d = visual.shape
        ta, m, _ = audio.shape[-3:]
        seq = T.concat([visual.reshape(tuple(lead) + (t * n, d)),
                        audio.reshape(tuple(lead) + (ta * m, d))], axis=-2)
        out = self.block(seq, mask=mask)
        new_v, new_a = T.split(out, [t * n, ta * m], axis=-2)
        return (new_v.reshape(tuple(lead) + (t, n, d)),
                new_a.reshape(tuple(lead) + (ta, m, d)))
