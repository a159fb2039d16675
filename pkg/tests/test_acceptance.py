"""Acceptance suite: one test per criterion, each printing a PASS line with
the measured values (run with -s to see them inline)."""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from csts import data as D
from csts import tensor as T
from csts.config import TrainConfig, model_config
from csts.fusion import InFrameFusion
from csts.heads import gaussian_heatmap, info_nce, kld_loss
from csts.metrics import binarize_and_score, kernel_support
from csts.model import shape_trace
from csts.tensor import Tensor
from csts.training import ablate, ablation_cells, gradcheck_model, mean_f1, train


def report(name: str, detail: str) -> None:
    print(f"\nACCEPTANCE {name}: PASS ({detail})")


# -- criterion 1: gradient suite ------------------------------------------------------


def test_criterion_1_gradient_suite():
    t0 = time.time()
    passed, rows = gradcheck_model(tolerance=1e-4, seed=0)
    elapsed = time.time() - t0
    worst = max(rows, key=lambda r: r["worst"])
    for r in rows:
        assert r["worst"] < 1e-4, (f"module {r['module']} fails gradcheck: "
                                   f"{r['param']} rel err {r['worst']:.3e}")
    assert elapsed < 300, f"gradient suite took {elapsed:.0f}s (budget 300s)"
    report("1 gradient suite",
           f"9 modules, worst rel err {worst['worst']:.2e} at {worst['param']}, "
           f"{elapsed:.0f}s")


# -- criterion 2: mask oracle ----------------------------------------------------------


def test_criterion_2_mask_oracle():
    worst = 0.0
    g = np.random.default_rng(2024)
    for trial in range(100):
        t = int(g.integers(1, 4))
        n = int(g.integers(1, 5))
        d = int(g.choice([2, 4, 8]))
        sf = InFrameFusion(d, 1, 2.0, np.random.default_rng(trial))
        v = Tensor(g.standard_normal((t, n, d)))
        a = Tensor(g.standard_normal((t, 1, d)))
        u_s, _ = sf(v, a)
        for i in range(t):
            frame_out, _ = sf(Tensor(v.data[i:i + 1]), Tensor(a.data[i:i + 1]))
            worst = max(worst, float(np.max(np.abs(u_s.data[i] - frame_out.data[0]))))

        # perturbing one frame leaves every other frame bitwise unchanged
        if t > 1:
            j = int(g.integers(t))
            v2 = v.data.copy()
            v2[j] += g.standard_normal((n, d))
            pert, _ = sf(Tensor(v2), a)
            others = [i for i in range(t) if i != j]
            assert np.array_equal(u_s.data[others], pert.data[others])
    assert worst < 1e-10, f"mask oracle deviation {worst:.2e} exceeds 1e-10"
    report("2 mask oracle", f"100 instances, max |batched - per-frame| = {worst:.2e}, "
           "cross-frame sensitivity exactly 0")


# -- criterion 3: paper-config shape conformance ------------------------------------------


def test_criterion_3_shape_conformance():
    T.set_precision("f32")  # the dry run allocates ~140M parameters
    try:
        trace = shape_trace(model_config("paper", fusion="sts"))
    finally:
        T.set_precision("f64")
    expected = {
        "video.token_embedding": (4, 64, 64, 96),
        "video.stage1": (4, 64, 64, 192),
        "video.stage2": (4, 32, 32, 384),
        "video.stage3": (4, 16, 16, 768),
        "video.encoded": (4, 64, 768),          # (4x8x8) x 768
        "audio.encoded": (4, 64, 768),          # (4x64) x 768
        "fusion.audio_spatial_pool": (4, 1, 768),
        "fusion.visual_temporal_pool": (4, 1, 768),
        "fusion.audio_temporal_pool": (4, 1, 768),
        "fusion.in_frame": (4, 65, 768),        # 4 x (64+1) x 768
        "fusion.cross_frame": (8, 1, 768),
        "fusion.reweighted_visual": (4, 64, 768),
        "fusion.reweighted_audio": (4, 64, 768),
        "decoder.head": (8, 64, 64, 1),
        "heatmaps": (8, 256, 256),
    }
    for key, shape in expected.items():
        assert trace[key] == shape, f"{key}: got {trace[key]}, expected {shape}"
    report("3 shape conformance", f"{len(expected)} traced shapes match the "
           "architecture table at paper config")


# -- criterion 4: closed-form loss checks ---------------------------------------------------


def test_criterion_4_closed_form_losses():
    target = np.zeros((1, 64, 64))
    target[0, 31, 31] = 1.0
    uniform = Tensor(np.full((1, 64, 64), 1.0 / 4096))
    kld = kld_loss(uniform, target, np.array([True])).item()
    assert abs(kld - math.log(4096)) < 1e-6

    w = Tensor(np.array([[0.6, 0.8]]))
    single = info_nce(w, w, temperature=0.05).item()
    assert single == 0.0

    loss = info_nce(Tensor(np.eye(2)), Tensor(np.eye(2)), temperature=1.0).item()
    expected = 2.0 * math.log(1.0 + math.exp(-1.0))
    assert abs(loss - expected) < 1e-9
    report("4 closed-form losses",
           f"kld(one-hot, uniform)={kld:.6f} vs log(4096)={math.log(4096):.6f}; "
           f"nce(n=1)=0 exactly; nce(identity, T=1)={loss:.9f}")


# -- criterion 5: metric fixed points ---------------------------------------------------------


def test_criterion_5_metric_fixed_points():
    pred = gaussian_heatmap(0.5, 0.5, 64, 64)
    support = kernel_support(0.5, 0.5, 64, 64)
    gamma = pred[support].min() / pred.max()
    precision, recall = binarize_and_score(pred, (0.5, 0.5), gamma=gamma)
    f1 = 2 * precision * recall / (precision + recall)
    assert f1 == 1.0

    uniform = np.full((64, 64), 1.0 / 4096)
    up, ur = binarize_and_score(uniform, (0.5, 0.5))
    assert abs(up - 361 / 4096) < 1e-9 and ur == 1.0
    report("5 metric fixed points",
           f"perfect-prediction f1=1.0; uniform precision={up:.6f} = 361/4096")


# -- criterion 6: learning-trend reproduction ------------------------------------------------

TREND_SEEDS = [1, 2, 3]
TREND_RECIPE = dict(preset="desk", epochs=8, batch_size=8, lr=1e-3,
                    weight_decay=0.05, precision="f32", alpha=0.05,
                    temperature=0.05)


@pytest.fixture(scope="module")
def trend_rows(tmp_path_factory):
    root = tmp_path_factory.mktemp("trend")
    corpus = D.synth_generate(root / "corpus", 200, seed=7, cue_validity=0.9,
                              frames_format="packed")
    base = TrainConfig.from_dict(TREND_RECIPE)
    cells = ablation_cells("components", base) + [
        c for c in ablation_cells("fusion", base)
        if c[0] in ("linear", "bilinear", "concat", "vanilla_sa")]
    cells = [c for c in cells if c[0] in
             ("vision", "sts", "csts", "linear", "bilinear", "concat", "vanilla_sa")]
    t0 = time.time()
    rows = ablate(cells, corpus, root / "runs", seeds=TREND_SEEDS)
    assert all(r["error"] is None for r in rows), rows
    assert time.time() - t0 < 1800, "trend matrix exceeded the 30 min budget"
    return rows


@pytest.mark.slow
def test_criterion_6_learning_trend(trend_rows):
    means = {lab: mean_f1(trend_rows, lab)
             for lab in ("vision", "sts", "csts", "linear", "bilinear",
                         "concat", "vanilla_sa")}
    margin = 0.002
    assert means["csts"] - means["sts"] > margin, means
    assert means["sts"] - means["vision"] > margin, means
    for baseline in ("linear", "bilinear", "concat", "vanilla_sa"):
        assert means["sts"] - means[baseline] > margin, (baseline, means)
    detail = ", ".join(f"{k}={v:.4f}" for k, v in sorted(means.items(),
                                                         key=lambda kv: -kv[1]))
    report("6 learning trend", detail)


# -- criterion 7: overfit sanity -------------------------------------------------------------


@pytest.mark.slow
def test_criterion_7_overfit_sanity(tmp_path):
    corpus = D.synth_generate(tmp_path / "single", 1, seed=13,
                              missing_gaze_rate=0.0, frames_format="packed")
    cfg = TrainConfig.from_dict(dict(preset="desk", fusion="sts", epochs=200,
                                     batch_size=1, lr=3e-3, weight_decay=0.0,
                                     precision="f32", seed=0))
    result = train(cfg, corpus, tmp_path / "overfit")
    lines = [json.loads(line) for line in
             result.metrics_path.read_text().splitlines() if "step" in line]
    klds = [r["kld"] for r in lines]
    assert klds[-1] < 0.1 * klds[0], (klds[0], klds[-1])

    from csts.training import load_model_from_checkpoint, load_samples
    model, blob = load_model_from_checkpoint(result.checkpoint_path)
    T.set_precision("f32")
    try:
        manifests = D.load_manifest(corpus)
        sample = load_samples(manifests, model.cfg)[0]
        frames = Tensor(sample.frames.astype(np.float32))
        specs = Tensor(sample.spectrograms.astype(np.float32))
        with T.no_grad():
            heat = model(frames, specs).heatmaps.data
    finally:
        T.set_precision("f64")
    size = model.cfg.image_size
    worst_px = 0.0
    for k, (x, y, ok) in enumerate(sample.gazes):
        assert ok
        cy, cx = np.unravel_index(np.argmax(heat[k]), heat[k].shape)
        gx, gy = round(x * (size - 1)), round(y * (size - 1))
        dist = math.hypot(cx - gx, cy - gy)
        worst_px = max(worst_px, dist)
        assert dist <= 2.0, f"frame {k}: argmax ({cx},{cy}) vs gaze ({gx},{gy})"
    report("7 overfit sanity",
           f"kld {klds[0]:.3f} -> {klds[-1]:.3f} "
           f"({klds[-1] / klds[0]:.1%}), worst argmax error {worst_px:.2f} px")


# -- criterion 8: determinism -----------------------------------------------------------------


def test_criterion_8_determinism(tmp_path):
    corpus = D.synth_generate(tmp_path / "c", 6, seed=17, frames_format="packed")
    cfg = TrainConfig.from_dict(dict(preset="desk", fusion="sts", contrastive="post",
                                     epochs=2, batch_size=4, lr=1e-3,
                                     precision="f32", seed=11))
    r1 = train(cfg, corpus, tmp_path / "r1")
    r2 = train(cfg, corpus, tmp_path / "r2")
    assert r1.checkpoint_path.read_bytes() == r2.checkpoint_path.read_bytes()
    assert r1.metrics_path.read_text() == r2.metrics_path.read_text()
    report("8 determinism", "identical config+seed -> bitwise-identical "
           "checkpoint and metrics log")
