import numpy as np
import pytest

from csts import tensor as T
from csts.config import model_config
from csts.errors import ConfigError, ShapeError
from csts.model import GazeAnticipationModel, shape_trace
from csts.tensor import Tensor


def rng(seed=0):
    return np.random.default_rng(seed)


def desk_inputs(batch=None, seed=1):
    g = rng(seed)
    shape_f = (8, 32, 32, 3) if batch is None else (batch, 8, 32, 32, 3)
    shape_s = (8, 32, 32) if batch is None else (batch, 8, 32, 32)
    return Tensor(g.random(shape_f)), Tensor(g.random(shape_s))


@pytest.mark.parametrize("fusion", ["vision", "s_fusion", "t_fusion", "sts",
                                    "linear", "bilinear", "concat", "vanilla_sa"])
def test_every_strategy_produces_valid_heatmaps(fusion):
    cfg = model_config("desk", fusion=fusion)
    model = GazeAnticipationModel(cfg, rng(2))
    frames, specs = desk_inputs()
    out = model(frames, None if fusion == "vision" else specs)
    assert out.heatmaps.shape == (8, 32, 32)
    assert np.allclose(out.heatmaps.data.sum(axis=(-2, -1)), 1.0, atol=1e-5)
    assert np.all(out.heatmaps.data >= 0)


def test_batched_forward_with_contrastive():
    cfg = model_config("desk", fusion="sts", contrastive="post")
    model = GazeAnticipationModel(cfg, rng(3))
    frames, specs = desk_inputs(batch=2)
    out = model(frames, specs)
    assert out.heatmaps.shape == (2, 8, 32, 32)
    assert out.w_v.shape == (2, 16) and out.w_a.shape == (2, 16)
    assert np.allclose(np.linalg.norm(out.w_v.data, axis=-1), 1.0, atol=1e-6)


def test_vision_model_has_no_audio_parameters():
    cfg = model_config("desk", fusion="vision")
    model = GazeAnticipationModel(cfg, rng(4))
    names = model.named_parameters()
    assert not any("audio" in n for n in names)
    frames, _ = desk_inputs()
    out = model(frames, None)
    assert out.psi is None and out.bundle is None


def test_audio_needed_but_missing_rejected():
    cfg = model_config("desk", fusion="sts")
    model = GazeAnticipationModel(cfg, rng(5))
    frames, _ = desk_inputs()
    with pytest.raises(ShapeError):
        model(frames, None)


def test_incompatible_contrastive_variant_rejected():
    with pytest.raises(ConfigError, match="incompatible"):
        model_config("desk", fusion="linear", contrastive="post")


def test_capture_exposes_correlation_maps():
    cfg = model_config("desk", fusion="sts")
    model = GazeAnticipationModel(cfg, rng(6))
    frames, specs = desk_inputs()
    out = model(frames, specs, capture=True)
    maps = out.correlation_maps()
    assert maps.shape == (4, 4, 4)
    assert np.allclose(maps.sum(axis=(-2, -1)), 1.0, atol=1e-9)


def test_desk_parameter_budget():
    cfg = model_config("desk", fusion="sts", contrastive="post")
    model = GazeAnticipationModel(cfg, rng(7))
    assert model.num_parameters() <= 100_000


def test_desk_shape_trace():
    trace = shape_trace(model_config("desk", fusion="sts"))
    assert trace["video.token_embedding"] == (4, 8, 8, 8)
    assert trace["video.encoded"] == (4, 16, 32)
    assert trace["audio.encoded"] == (4, 16, 32)
    assert trace["fusion.audio_spatial_pool"] == (4, 1, 32)
    assert trace["fusion.cross_frame"] == (8, 1, 32)
    assert trace["decoder.head"] == (8, 16, 16, 1)
    assert trace["heatmaps"] == (8, 32, 32)


def test_gradients_reach_every_parameter_sts_post():
    cfg = model_config("desk", fusion="sts", contrastive="post")
    model = GazeAnticipationModel(cfg, rng(8))
    frames, specs = desk_inputs(batch=2, seed=9)
    out = model(frames, specs)
    loss = (out.heatmaps * out.heatmaps).sum() + (out.w_v * out.w_a).sum()
    model.zero_grads()
    T.backward(loss)
    for name, p in model.named_parameters().items():
        assert p.grad is not None and np.any(p.grad != 0.0), f"dead parameter {name}"
