"""Token embedding and transformer encoders for the video and audio streams.

Both encoders share the same machinery: a strided patch embedding, factorised
positional embeddings, per-stage self-attention blocks over all space-time
tokens, and channel-doubling 2x2 mean-pool boundaries between stages. Stage
outputs after the channel expansion are retained as decoder skip features.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import EncoderConfig
from .errors import ShapeError
from .layers import Linear, Module, SelfAttentionBlock, mean_pool_2x2, xavier_uniform
from .tensor import Tensor


@dataclass
class TokenSet:
    tokens: Tensor          # (..., T, N, D)
    modality: str           # "video" | "audio"
    grid: tuple[int, int]   # (H, W) with N == H*W


class TokenEmbed(Module):
    """Strided space-time patches, linearly embedded, plus factorised
    positional embeddings (time + space for video, time + frequency for audio)."""

    def __init__(self, cfg: EncoderConfig, modality: str, rng: np.random.Generator):
        kt, kh, kw = cfg.patch_kernel
        patch_in = kt * kh * kw * cfg.in_channels
        self.proj = Linear(patch_in, cfg.stage_dims[0], rng)
        d0 = cfg.stage_dims[0]
        if cfg.use_pos_embed:
            self.pos_time = xavier_uniform(rng, (cfg.token_time, 1, 1, d0),
                                           cfg.token_time, d0)
            if modality == "video":
                self.pos_space = xavier_uniform(rng, (1, cfg.grid0, cfg.grid0, d0),
                                                cfg.grid0 * cfg.grid0, d0)
            else:
                self.pos_space = xavier_uniform(rng, (1, cfg.grid0, 1, d0), cfg.grid0, d0)
        else:
            self.pos_time = None
            self.pos_space = None
        self._cfg = cfg

    def __call__(self, x: Tensor) -> Tensor:
        cfg = self._cfg
        patches = T.extract_patches(x, cfg.patch_kernel, cfg.patch_stride, cfg.patch_pad)
        out = self.proj(patches)  # (..., T, g0, g0, d0)
        if self.pos_time is not None:
            out = out + self.pos_time + self.pos_space
        return out


class Encoder(Module):
    def __init__(self, cfg: EncoderConfig, modality: str, rng: np.random.Generator):
        self.embed = TokenEmbed(cfg, modality, rng)
        self.stages = [
            [SelfAttentionBlock(dim, cfg.heads, cfg.mlp_ratio, rng)
             for _ in range(depth)]
            for dim, depth in zip(cfg.stage_dims, cfg.stage_depths)
        ]
        self.boundaries = [
            Linear(cfg.stage_dims[i], cfg.stage_dims[i + 1], rng)
            for i in range(len(cfg.stage_dims) - 1)
        ]
        self.cfg = cfg
        self.modality = modality

    def __call__(self, x: Tensor, trace: dict | None = None
                 ) -> tuple[TokenSet, list[Tensor]]:
        """Encode (..., T_in, S, S, C) into tokens (..., T, N, D) plus the
        grid-shaped per-stage skip features."""
        cfg = self.cfg
        expected = (cfg.input_time, cfg.input_size, cfg.input_size, cfg.in_channels)
        if x.shape[-4:] != expected:
            raise ShapeError(f"{self.modality} encoder expects trailing dims {expected}, "
                             f"got {x.shape}")
        grid = self.embed(x)
        if trace is not None:
            trace[f"{self.modality}.token_embedding"] = grid.shape[-4:]
        skips = [grid]
        lead = grid.shape[:-4]
        g = cfg.grid0
        for i, blocks in enumerate(self.stages):
            t, d = cfg.token_time, cfg.stage_dims[i]
            flat = grid.reshape(lead + (t * g * g, d))
            for block in blocks:
                flat = block(flat)
            grid = flat.reshape(lead + (t, g, g, d))
            if i < len(self.stages) - 1:
                grid = self.boundaries[i](grid)
                if trace is not None:
                    trace[f"{self.modality}.stage{i + 1}"] = grid.shape[-4:]
                skips.append(grid)
                grid = mean_pool_2x2(grid)
                g //= 2
        tokens = grid.reshape(lead + (cfg.token_time, g * g, cfg.out_dim))
        if trace is not None:
            trace[f"{self.modality}.encoded"] = tokens.shape[-3:]
        return TokenSet(tokens=tokens, modality=self.modality, grid=(g, g)), skips
