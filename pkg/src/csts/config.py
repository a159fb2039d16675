"""Model and training configuration, with the paper-scale and desk-scale presets."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

FUSION_STRATEGIES = ("vision", "s_fusion", "t_fusion", "sts",
                     "linear", "bilinear", "concat", "vanilla_sa")
CONTRASTIVE_VARIANTS = ("none", "post", "vanilla", "s", "t", "cross")

# which contrastive variants each fusion strategy can feed
COMPATIBLE_VARIANTS = {
    "vision": ("none",),
    "s_fusion": ("none", "vanilla", "s"),
    "t_fusion": ("none", "vanilla", "t"),
    "sts": CONTRASTIVE_VARIANTS,
    "linear": ("none", "vanilla"),
    "bilinear": ("none", "vanilla"),
    "concat": ("none", "vanilla"),
    "vanilla_sa": ("none", "vanilla", "post"),
}


@dataclass(frozen=True)
class EncoderConfig:
    in_channels: int
    input_time: int
    input_size: int
    patch_kernel: tuple[int, int, int]
    patch_stride: tuple[int, int, int]
    patch_pad: tuple[int, int, int]
    stage_dims: tuple[int, ...]
    stage_depths: tuple[int, ...]
    heads: int = 1
    mlp_ratio: float = 4.0
    use_pos_embed: bool = True

    def __post_init__(self):
        if len(self.stage_dims) != len(self.stage_depths):
            raise ConfigError("stage_dims and stage_depths must have the same length")
        if self.input_time % self.patch_stride[0] or self.input_size % self.patch_stride[1]:
            raise ConfigError(
                f"input {self.input_time}x{self.input_size} must be divisible by "
                f"patch stride {self.patch_stride}")
        halvings = len(self.stage_dims) - 1
        if self.grid0 % (2 ** halvings):
            raise ConfigError(
                f"token grid {self.grid0} cannot be 2x2-pooled {halvings} times")
        for d in self.stage_dims:
            if d % self.heads:
                raise ConfigError(f"head count {self.heads} must divide stage dim {d}")

    @property
    def token_time(self) -> int:
        return self.input_time // self.patch_stride[0]

    @property
    def grid0(self) -> int:
        return self.input_size // self.patch_stride[1]

    @property
    def final_grid(self) -> int:
        return self.grid0 // (2 ** (len(self.stage_dims) - 1))

    @property
    def out_dim(self) -> int:
        return self.stage_dims[-1]

    @property
    def tokens_per_frame(self) -> int:
        return self.final_grid * self.final_grid


def video_encoder_paper() -> EncoderConfig:
    return EncoderConfig(in_channels=3, input_time=8, input_size=256,
                         patch_kernel=(3, 7, 7), patch_stride=(2, 4, 4), patch_pad=(1, 3, 3),
                         stage_dims=(96, 192, 384, 768), stage_depths=(1, 2, 11, 2),
                         heads=8, mlp_ratio=4.0)


def audio_encoder_paper() -> EncoderConfig:
    return EncoderConfig(in_channels=1, input_time=8, input_size=256,
                         patch_kernel=(3, 7, 7), patch_stride=(2, 4, 4), patch_pad=(1, 3, 3),
                         stage_dims=(96, 192, 384, 768), stage_depths=(1, 1, 1, 1),
                         heads=8, mlp_ratio=4.0)


def video_encoder_desk() -> EncoderConfig:
    return EncoderConfig(in_channels=3, input_time=8, input_size=32,
                         patch_kernel=(2, 4, 4), patch_stride=(2, 4, 4), patch_pad=(0, 0, 0),
                         stage_dims=(8, 32), stage_depths=(1, 1),
                         heads=1, mlp_ratio=2.0)


def audio_encoder_desk() -> EncoderConfig:
    return EncoderConfig(in_channels=1, input_time=8, input_size=32,
                         patch_kernel=(2, 4, 4), patch_stride=(2, 4, 4), patch_pad=(0, 0, 0),
                         stage_dims=(8, 32), stage_depths=(1, 1),
                         heads=1, mlp_ratio=2.0)


@dataclass(frozen=True)
class ModelConfig:
    video: EncoderConfig
    audio: EncoderConfig | None
    fusion: str = "sts"
    contrastive: str = "none"
    fusion_heads: int = 1
    fusion_mlp_ratio: float = 4.0
    proj_dim: int = 256
    temperature: float = 0.05
    alpha: float = 0.05
    out_frames: int = 8
    image_size: int = 256
    head_grid_mult: int = 1     # extra nearest upsample factor before the 1x1 head
    gaussian_kernel: int = 19
    gaussian_sigma: float = 3.0
    preset: str = "custom"

    def __post_init__(self):
        if self.fusion not in FUSION_STRATEGIES:
            raise ConfigError(f"unknown fusion strategy {self.fusion!r}; "
                              f"expected one of {FUSION_STRATEGIES}")
        if self.contrastive not in CONTRASTIVE_VARIANTS:
            raise ConfigError(f"unknown contrastive variant {self.contrastive!r}; "
                              f"expected one of {CONTRASTIVE_VARIANTS}")
        if self.contrastive not in COMPATIBLE_VARIANTS[self.fusion]:
            raise ConfigError(
                f"contrastive variant {self.contrastive!r} is incompatible with "
                f"fusion strategy {self.fusion!r} (needs intermediates it does not produce)")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.alpha < 0:
            raise ConfigError(f"alpha must be nonnegative, got {self.alpha}")
        if self.fusion != "vision" and self.audio is None:
            raise ConfigError(f"fusion strategy {self.fusion!r} needs an audio encoder config")

    @property
    def needs_audio(self) -> bool:
        return self.fusion != "vision"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        d = dict(d)
        for key in ("video", "audio"):
            sub = d.get(key)
            if sub is not None:
                for t in ("patch_kernel", "patch_stride", "patch_pad",
                          "stage_dims", "stage_depths"):
                    sub[t] = tuple(sub[t])
                d[key] = EncoderConfig(**sub)
        return ModelConfig(**d)


def model_config(preset: str, fusion: str = "sts", contrastive: str = "none",
                 alpha: float = 0.05, temperature: float = 0.05) -> ModelConfig:
    if preset == "paper":
        return ModelConfig(video=video_encoder_paper(), audio=audio_encoder_paper(),
                           fusion=fusion, contrastive=contrastive,
                           fusion_heads=1, fusion_mlp_ratio=4.0, proj_dim=256,
                           temperature=temperature, alpha=alpha,
                           out_frames=8, image_size=256, head_grid_mult=1,
                           preset="paper")
    if preset == "desk":
        return ModelConfig(video=video_encoder_desk(), audio=audio_encoder_desk(),
                           fusion=fusion, contrastive=contrastive,
                           fusion_heads=1, fusion_mlp_ratio=2.0, proj_dim=16,
                           temperature=temperature, alpha=alpha,
                           out_frames=8, image_size=32, head_grid_mult=2,
                           preset="desk")
    raise ConfigError(f"unknown model preset {preset!r}; expected 'desk' or 'paper'")


@dataclass
class TrainConfig:
    """Optimisation recipe; defaults follow the published training setup."""

    preset: str = "desk"
    fusion: str = "sts"
    contrastive: str = "none"
    epochs: int = 15
    batch_size: int = 8
    lr: float = 1e-4
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    alpha: float = 0.05
    temperature: float = 0.05
    seed: int = 0
    precision: str = "f64"
    eval_every: int = 0     # epochs between test evals, 0 = final only
    grad_clip: float = 0.0  # global-norm clip, 0 = off
    gamma: float = 0.5      # binarization threshold for evaluation

    def model_config(self) -> ModelConfig:
        contrastive = self.contrastive
        return model_config(self.preset, fusion=self.fusion, contrastive=contrastive,
                            alpha=self.alpha, temperature=self.temperature)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(TrainConfig)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return TrainConfig(**d)

    @staticmethod
    def from_json(path: Path | str) -> "TrainConfig":
        with open(path, "r", encoding="utf-8") as f:
            return TrainConfig.from_dict(json.load(f))

    def save_json(self, path: Path | str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")
