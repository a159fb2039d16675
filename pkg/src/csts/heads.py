"""Decoder from fused tokens to future gaze heatmaps, the Gaussian supervision
targets, the KL-divergence loss, and the contrastive head with its placement
variants."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import EncoderConfig
from .errors import ConfigError, ContractError, EvalError
from .layers import (Linear, Module, SelfAttentionBlock, apply_axis_matrix,
                     repeat_matrix, trilinear_resize)
from .tensor import Tensor

KLD_EPS = 1e-12


@dataclass
class GazeHeatmapStack:
    probs: np.ndarray                 # (T_out, H, W), each frame sums to 1
    frame_times: list[float] = field(default_factory=list)


# -- supervision targets -----------------------------------------------------------


def gaussian_heatmap(x: float, y: float, height: int, width: int,
                     kernel: int = 19, sigma: float = 3.0) -> np.ndarray:
    """Truncated Gaussian stamped at the gaze pixel, renormalised to sum 1."""
    if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
        raise ContractError(f"gaze ({x}, {y}) outside the unit square")
    cx = int(round(x * (width - 1)))
    cy = int(round(y * (height - 1)))
    r = kernel // 2
    out = np.zeros((height, width))
    y0, y1 = max(0, cy - r), min(height - 1, cy + r)
    x0, x1 = max(0, cx - r), min(width - 1, cx + r)
    yy, xx = np.mgrid[y0:y1 + 1, x0:x1 + 1]
    out[y0:y1 + 1, x0:x1 + 1] = np.exp(
        -((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma * sigma))
    return out / out.sum()


def gaussian_target(gazes: list[tuple[float, float, bool]], height: int, width: int,
                    kernel: int = 19, sigma: float = 3.0
                    ) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame target maps plus a validity mask; frames without a usable
    gaze sample stay all-zero and are excluded from the loss."""
    maps = np.zeros((len(gazes), height, width))
    valid = np.zeros(len(gazes), dtype=bool)
    for i, (x, y, ok) in enumerate(gazes):
        if not ok:
            continue
        maps[i] = gaussian_heatmap(x, y, height, width, kernel, sigma)
        valid[i] = True
    return maps, valid


# -- decoder --------------------------------------------------------------------------


class Decoder(Module):
    """Mirror of the encoder stages: nearest-neighbour 2x upsampling, additive
    per-stage skip connections, a transformer block per stage, and a 1-channel
    head. Time is upsampled to the anticipation frame count at the last stage."""

    def __init__(self, enc: EncoderConfig, in_dim: int, out_frames: int,
                 heads: int, mlp_ratio: float, head_grid_mult: int,
                 rng: np.random.Generator):
        dims = enc.stage_dims
        if out_frames % enc.token_time:
            raise ConfigError(f"out_frames {out_frames} must be a multiple of the "
                              f"token time {enc.token_time}")
        self.input_proj = Linear(in_dim, dims[-1], rng) if in_dim != dims[-1] else None
        self.blocks = [SelfAttentionBlock(dims[j], heads, mlp_ratio, rng)
                       for j in range(len(dims) - 1, -1, -1)]
        self.halve = [Linear(dims[j], dims[j - 1], rng)
                      for j in range(len(dims) - 1, 0, -1)]
        # a bias on the head (or a plain per-channel shift into it) would only
        # move every logit of the spatial softmax together; normalise with a
        # parameter-free layer norm and keep the head bias-free instead
        self.head = Linear(dims[0], 1, rng, bias=False)
        self._enc = enc
        self._out_frames = out_frames
        self._head_grid_mult = head_grid_mult

    @property
    def head_grid(self) -> int:
        return self._enc.grid0 * self._head_grid_mult

    def __call__(self, tokens: Tensor, skips: list[Tensor],
                 trace: dict | None = None) -> Tensor:
        enc = self._enc
        dims = enc.stage_dims
        n = len(dims)
        if len(skips) != n:
            raise ConfigError(f"decoder expects {n} skip features, got {len(skips)}")
        lead = tokens.shape[:-3]
        t, g = enc.token_time, enc.final_grid
        x = tokens.reshape(lead + (t, g, g, tokens.shape[-1]))
        if self.input_proj is not None:
            x = self.input_proj(x)
        up2 = None
        for step, j in enumerate(range(n - 1, 0, -1)):
            if up2 is None or up2.shape[0] != 2 * g:
                up2 = repeat_matrix(g, 2)
            x = apply_axis_matrix(x, up2, axis=-3)
            x = apply_axis_matrix(x, up2, axis=-2)
            g *= 2
            skip = skips[j]
            if skip.shape[-4:] != (t, g, g, dims[j]):
                raise ConfigError(f"skip feature {j} has shape {skip.shape}, expected "
                                  f"(..., {t}, {g}, {g}, {dims[j]})")
            x = x + skip
            x = self._run_block(self.blocks[step], x, lead, t, g, dims[j])
            x = self.halve[step](x)
        # final stage: upsample time, add the embedding-level skip, decode
        t_up = repeat_matrix(t, self._out_frames // t)
        x = apply_axis_matrix(x, t_up, axis=-4)
        skip0 = apply_axis_matrix(skips[0], t_up, axis=-4)
        x = x + skip0
        t = self._out_frames
        x = self._run_block(self.blocks[-1], x, lead, t, g, dims[0])
        if self._head_grid_mult > 1:
            up = repeat_matrix(g, self._head_grid_mult)
            x = apply_axis_matrix(x, up, axis=-3)
            x = apply_axis_matrix(x, up, axis=-2)
            g *= self._head_grid_mult
        d = dims[0]
        x = T.layer_norm(x, Tensor(np.ones(d)), Tensor(np.zeros(d)))
        logits = self.head(x)                              # (..., T_out, G, G, 1)
        if trace is not None:
            trace["decoder.head"] = logits.shape[-4:]
        return logits.reshape(lead + (t, g, g))

    @staticmethod
    def _run_block(block, x, lead, t, g, d):
        flat = x.reshape(lead + (t * g * g, d))
        return block(flat).reshape(lead + (t, g, g, d))


def decode_heatmaps(logits: Tensor, out_frames: int, image_size: int) -> Tensor:
    """Trilinear upsample of the head logits to the input resolution, then a
    per-frame spatial softmax."""
    lead = logits.shape[:-3]
    up = trilinear_resize(logits, (out_frames, image_size, image_size))
    flat = up.reshape(lead + (out_frames, image_size * image_size))
    probs = T.softmax_last(flat)
    return probs.reshape(lead + (out_frames, image_size, image_size))


# -- losses --------------------------------------------------------------------------


def kld_loss(pred: Tensor, target: np.ndarray, valid: np.ndarray) -> Tensor:
    """KL(target || pred), averaged over valid frames within each sample and
    then over the samples that have any valid frame."""
    if pred.shape != target.shape:
        raise ContractError(f"prediction shape {pred.shape} does not match "
                            f"target shape {target.shape}")
    if pred.ndim == 3:
        return kld_loss(pred.reshape((1,) + pred.shape), target[None], valid[None])
    sums = pred.data.sum(axis=(-2, -1))
    if np.any(np.abs(sums - 1.0) > 1e-3):
        raise ContractError("prediction frames are not normalised distributions")
    tsums = target.sum(axis=(-2, -1))
    if np.any(np.abs(tsums[valid] - 1.0) > 1e-3):
        raise ContractError("target frames are not normalised distributions")

    batch, frames = valid.shape
    per_sample = valid.sum(axis=1)
    live = per_sample > 0
    if not live.any():
        raise EvalError("no valid gaze frames in the batch")
    weight = np.zeros((batch, frames))
    weight[live] = valid[live] / per_sample[live, None]
    weight /= live.sum()

    wt = target * weight[..., None, None]
    const = float(np.sum(np.where(wt > 0, wt * np.log(target, where=target > 0,
                                                      out=np.zeros_like(target)), 0.0)))
    cross = (Tensor(wt) * T.log(pred + KLD_EPS)).sum()
    return const - cross


def total_loss(kld: Tensor, cntr: Tensor | None, alpha: float) -> Tensor:
    if alpha < 0:
        raise ConfigError(f"alpha must be nonnegative, got {alpha}")
    if cntr is None or alpha == 0.0:
        return kld
    return kld + alpha * cntr


# -- contrastive head ------------------------------------------------------------------


class ContrastiveProjector(Module):
    """Token-mean, bias-free linear map to the common space, L2 normalisation.

    Bias-free keeps the projection scale-invariant: scaling the inputs by any
    c > 0 leaves the projected unit vectors unchanged.
    """

    def __init__(self, dim: int, proj_dim: int, rng: np.random.Generator):
        self.f1 = Linear(dim, proj_dim, rng, bias=False)
        self.f2 = Linear(dim, proj_dim, rng, bias=False)

    def __call__(self, u_v: Tensor, u_a: Tensor) -> tuple[Tensor, Tensor]:
        return self._project(self.f1, u_v), self._project(self.f2, u_a)

    @staticmethod
    def _project(layer: Linear, tokens: Tensor) -> Tensor:
        pooled = tokens.mean(axis=(-3, -2))                # (..., D)
        if pooled.ndim == 1:
            return T.l2_normalize_last(layer(pooled.reshape(1, -1)).reshape(-1))
        return T.l2_normalize_last(layer(pooled))


def _nce_direction(sims: Tensor) -> Tensor:
    """Mean over rows of logsumexp(row) - diagonal."""
    n = sims.shape[-1]
    m = sims.data.max(axis=-1, keepdims=True)
    lse = T.log(T.exp(sims - Tensor(m)).sum(axis=-1)) + Tensor(m[..., 0])
    diag = (sims * Tensor(np.eye(n, dtype=sims.data.dtype))).sum(axis=-1)
    return (lse - diag).mean()


def info_nce(w_v: Tensor, w_a: Tensor, temperature: float) -> Tensor:
    """Symmetric InfoNCE over a batch of paired unit vectors."""
    if temperature <= 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    if w_v.ndim != 2 or w_v.shape != w_a.shape:
        raise ContractError(f"expected matching (batch, dim) inputs, got "
                            f"{w_v.shape} and {w_a.shape}")
    sims = T.matmul(w_v, w_a.permute(1, 0)) * (1.0 / temperature)
    return _nce_direction(sims) + _nce_direction(sims.permute(1, 0))


def contrastive_inputs(variant: str, phi: Tensor, psi: Tensor | None, bundle):
    """Select the token sets each placement variant feeds to the projector."""
    if variant == "vanilla":
        if psi is None:
            raise ConfigError("vanilla contrastive variant needs audio embeddings")
        return phi, psi
    if bundle is None:
        raise ConfigError(f"contrastive variant {variant!r} needs fusion intermediates "
                          "that this fusion strategy does not produce")
    if variant == "post":
        return bundle.u_v, bundle.u_a
    if variant == "s":
        return bundle.u_vs, bundle.u_as
    if variant == "t":
        return bundle.u_vt, bundle.u_at
    if variant == "cross":
        from .fusion import reweight
        return bundle.u_v, reweight(bundle.u_as, bundle.u_at)
    raise ConfigError(f"unknown contrastive variant {variant!r}")
