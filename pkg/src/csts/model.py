"""The assembled gaze anticipation model.

Wires the two encoders, the configured fusion strategy, the decoder with its
encoder skip connections, and (when enabled) the contrastive projection head.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .encoders import Encoder
from .errors import ConfigError, ShapeError
from .fusion import (BilinearFusion, ConcatFusion, CrossFrameFusion, FusionBundle,
                     InFrameFusion, LinearFusion, TokenPool,
                     VanillaSelfAttentionFusion, reweight, spatial_correlation_map,
                     split_spatial, split_temporal)
from .heads import ContrastiveProjector, Decoder, contrastive_inputs, decode_heatmaps
from .layers import Module
from .tensor import Tensor


@dataclass
class ModelOutput:
    heatmaps: Tensor                      # (..., T_out, H_img, W_img)
    logits: Tensor                        # (..., T_out, G, G) pre-softmax head output
    phi: Tensor                           # visual tokens (..., T, N, D)
    psi: Tensor | None                    # audio tokens (..., T, M, D)
    bundle: FusionBundle | None
    w_v: Tensor | None = None
    w_a: Tensor | None = None
    visual_grid: tuple[int, int] = (0, 0)

    def correlation_maps(self) -> np.ndarray:
        probs = self.bundle.spatial_probs if self.bundle is not None else None
        return spatial_correlation_map(probs, self.visual_grid)


class GazeAnticipationModel(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.video_encoder = Encoder(cfg.video, "video", rng)
        d = cfg.video.out_dim
        n = cfg.video.tokens_per_frame
        t = cfg.video.token_time
        decoder_in = d

        if cfg.needs_audio:
            if cfg.audio.out_dim != d or cfg.audio.token_time != t:
                raise ConfigError("video and audio encoders must agree on token "
                                  "time and channel dim")
            self.audio_encoder = Encoder(cfg.audio, "audio", rng)
            m = cfg.audio.tokens_per_frame

        fusion = cfg.fusion
        if fusion in ("s_fusion", "sts"):
            self.audio_spatial_pool = TokenPool(m, d, rng)
            self.spatial_fusion = InFrameFusion(d, cfg.fusion_heads,
                                                cfg.fusion_mlp_ratio, rng)
        if fusion in ("t_fusion", "sts"):
            self.visual_temporal_pool = TokenPool(n, d, rng, bias_init=1.0)
            self.audio_temporal_pool = TokenPool(m, d, rng, bias_init=1.0)
            self.temporal_fusion = CrossFrameFusion(d, cfg.fusion_heads,
                                                    cfg.fusion_mlp_ratio, rng)
        if fusion == "linear":
            self.joint_fusion = LinearFusion(d, rng)
        elif fusion == "bilinear":
            self.joint_fusion = BilinearFusion(d, t * n, t * m, rng)
        elif fusion == "concat":
            self.joint_fusion = ConcatFusion()
            decoder_in = 2 * d
        elif fusion == "vanilla_sa":
            self.joint_fusion = VanillaSelfAttentionFusion(d, cfg.fusion_heads,
                                                           cfg.fusion_mlp_ratio, rng)

        self.decoder = Decoder(cfg.video, decoder_in, cfg.out_frames,
                               cfg.video.heads, cfg.video.mlp_ratio,
                               cfg.head_grid_mult, rng)
        if cfg.contrastive != "none":
            self.contrastive = ContrastiveProjector(d, cfg.proj_dim, rng)
        self.cfg = cfg

    def __call__(self, frames: Tensor, specs: Tensor | None = None,
                 capture: bool = False, trace: dict | None = None) -> ModelOutput:
        cfg = self.cfg
        phi_set, skips = self.video_encoder(frames, trace=trace)
        phi = phi_set.tokens
        psi = None
        if cfg.needs_audio:
            if specs is None:
                raise ShapeError(f"fusion strategy {cfg.fusion!r} needs spectrogram input")
            if specs.ndim == phi.ndim:
                specs = specs.reshape(specs.shape + (1,))
            psi_set, _ = self.audio_encoder(specs, trace=trace)
            psi = psi_set.tokens

        bundle = None
        if cfg.fusion == "vision":
            dec_in = phi
        elif cfg.fusion == "s_fusion":
            z_as = self.audio_spatial_pool(psi)
            u_s, probs = self.spatial_fusion(phi, z_as, capture=capture)
            u_vs, u_as = split_spatial(u_s)
            bundle = FusionBundle(u_s=u_s, u_vs=u_vs, u_as=u_as, z_as=z_as,
                                  spatial_probs=probs)
            dec_in = u_vs
        elif cfg.fusion == "t_fusion":
            z_vt = self.visual_temporal_pool(phi)
            z_at = self.audio_temporal_pool(psi)
            u_t = self.temporal_fusion(z_vt, z_at)
            u_vt, u_at = split_temporal(u_t)
            bundle = FusionBundle(u_t=u_t, u_vt=u_vt, u_at=u_at, z_vt=z_vt, z_at=z_at)
            dec_in = reweight(phi, u_vt)
        elif cfg.fusion == "sts":
            z_as = self.audio_spatial_pool(psi)
            u_s, probs = self.spatial_fusion(phi, z_as, capture=capture)
            z_vt = self.visual_temporal_pool(phi)
            z_at = self.audio_temporal_pool(psi)
            u_t = self.temporal_fusion(z_vt, z_at)
            u_vs, u_as = split_spatial(u_s)
            u_vt, u_at = split_temporal(u_t)
            u_v = reweight(u_vs, u_vt)
            u_a = reweight(psi, u_at)
            bundle = FusionBundle(u_s=u_s, u_t=u_t, u_vs=u_vs, u_as=u_as,
                                  u_vt=u_vt, u_at=u_at, u_v=u_v, u_a=u_a,
                                  z_as=z_as, z_vt=z_vt, z_at=z_at,
                                  spatial_probs=probs)
            dec_in = u_v
            if trace is not None:
                trace["fusion.audio_spatial_pool"] = z_as.shape[-3:]
                trace["fusion.visual_temporal_pool"] = z_vt.shape[-3:]
                trace["fusion.audio_temporal_pool"] = z_at.shape[-3:]
                trace["fusion.in_frame"] = u_s.shape[-3:]
                trace["fusion.cross_frame"] = u_t.shape[-3:]
                trace["fusion.reweighted_visual"] = u_v.shape[-3:]
                trace["fusion.reweighted_audio"] = u_a.shape[-3:]
        elif cfg.fusion == "vanilla_sa":
            new_v, new_a = self.joint_fusion(phi, psi)
            bundle = FusionBundle(u_v=new_v, u_a=new_a)
            dec_in = new_v
        else:  # linear | bilinear | concat
            dec_in = self.joint_fusion(phi, psi)

        logits = self.decoder(dec_in, skips, trace=trace)
        heatmaps = decode_heatmaps(logits, cfg.out_frames, cfg.image_size)
        if trace is not None:
            trace["heatmaps"] = heatmaps.shape[-3:]

        w_v = w_a = None
        if cfg.contrastive != "none":
            tok_v, tok_a = contrastive_inputs(cfg.contrastive, phi, psi, bundle)
            w_v, w_a = self.contrastive(tok_v, tok_a)

        return ModelOutput(heatmaps=heatmaps, logits=logits, phi=phi, psi=psi,
                           bundle=bundle, w_v=w_v, w_a=w_a,
                           visual_grid=phi_set.grid)


def shape_trace(cfg: ModelConfig, seed: int = 0) -> dict[str, tuple[int, ...]]:
    """Dry-run forward on zero inputs, recording every named intermediate shape."""
    rng = np.random.default_rng(seed)
    model = GazeAnticipationModel(cfg, rng)
    frames = T.zeros((cfg.video.input_time, cfg.video.input_size,
                      cfg.video.input_size, cfg.video.in_channels))
    specs = None
    if cfg.needs_audio:
        specs = T.zeros((cfg.audio.input_time, cfg.audio.input_size,
                         cfg.audio.input_size, cfg.audio.in_channels))
    trace: dict[str, tuple[int, ...]] = {}
    with T.no_grad():
        model(frames, specs, trace=trace)
    trace["parameters"] = (model.num_parameters(),)
    return trace
