import json
import math

import numpy as np
import pytest

from csts import data as D
from csts import tensor as T
from csts import training as TR
from csts.config import TrainConfig
from csts.errors import ConfigError
from csts.tensor import Tensor


def desk_cfg(**kw):
    base = dict(preset="desk", fusion="sts", contrastive="none", epochs=1,
                batch_size=4, lr=1e-3, weight_decay=0.01, precision="f32",
                seed=0, alpha=0.05, temperature=0.05)
    base.update(kw)
    return TrainConfig.from_dict(base)


@pytest.fixture(scope="module")
def tiny_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    return D.synth_generate(out, 10, seed=11)


# -- optimizer --------------------------------------------------------------------


def test_adamw_zero_grad_zero_decay_is_identity():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = TR.AdamW({"p": p}, lr=0.1, weight_decay=0.0)
    p.zero_grad()
    opt.step()
    assert np.array_equal(p.data, [1.0, -2.0])


def test_adamw_first_step_hand_value():
    p = Tensor(np.array([0.0]), requires_grad=True)
    opt = TR.AdamW({"p": p}, lr=0.1, weight_decay=0.0)
    p.grad = np.array([1.0])
    opt.step()
    # bias-corrected m_hat = 1, v_hat = 1 -> update = lr * 1/(1 + eps)
    assert abs(p.data[0] + 0.1) < 1e-6


def test_adamw_decoupled_weight_decay():
    p = Tensor(np.array([2.0]), requires_grad=True)
    opt = TR.AdamW({"p": p}, lr=0.1, weight_decay=0.5)
    p.grad = np.array([0.0])
    opt.step()
    # pure decay: p -= lr * wd * p
    assert abs(p.data[0] - (2.0 - 0.1 * 0.5 * 2.0)) < 1e-12


def test_cosine_schedule_endpoints():
    assert TR.cosine_lr(1e-4, 0, 100) == 1e-4
    assert abs(TR.cosine_lr(1e-4, 100, 100)) < 1e-20
    assert abs(TR.cosine_lr(1e-4, 50, 100) - 0.5e-4) < 1e-12


def test_clip_global_norm():
    p = Tensor(np.zeros(4), requires_grad=True)
    p.grad = np.full(4, 3.0)
    norm = TR.clip_global_norm({"p": p}, max_norm=1.0)
    assert abs(norm - 6.0) < 1e-12
    assert abs(math.sqrt(float((p.grad ** 2).sum())) - 1.0) < 1e-9


# -- training loop -------------------------------------------------------------------


def test_train_writes_checkpoint_and_logs(tiny_corpus, tmp_path):
    res = TR.train(desk_cfg(), tiny_corpus, tmp_path / "run")
    assert res.checkpoint_path.exists()
    assert res.metrics_path.exists()
    lines = [json.loads(line) for line in res.metrics_path.read_text().splitlines()]
    steps = [r for r in lines if "step" in r]
    assert len(steps) == res.steps == 2  # 8 train clips, batch 4, 1 epoch
    assert "final_eval" in lines[-1]
    assert res.report is not None and 0.0 <= res.report.f1 <= 1.0


def test_loss_decomposition_logged_every_step(tiny_corpus, tmp_path):
    res = TR.train(desk_cfg(contrastive="post", epochs=2), tiny_corpus, tmp_path / "run")
    for line in res.metrics_path.read_text().splitlines():
        rec = json.loads(line)
        if "step" in rec:
            assert abs(rec["total"] - (rec["kld"] + 0.05 * rec["cntr"])) < 1e-9
            assert rec["cntr"] != 0.0


def test_alpha_zero_and_nonzero_diverge(tiny_corpus, tmp_path):
    a = TR.train(desk_cfg(contrastive="post", alpha=0.0), tiny_corpus, tmp_path / "a")
    b = TR.train(desk_cfg(contrastive="post", alpha=0.05), tiny_corpus, tmp_path / "b")
    ca = D.load_checkpoint(a.checkpoint_path)
    cb = D.load_checkpoint(b.checkpoint_path)
    assert any(not np.array_equal(ca.params[k], cb.params[k]) for k in ca.params)


def test_seed_determinism_bitwise(tiny_corpus, tmp_path):
    r1 = TR.train(desk_cfg(seed=5), tiny_corpus, tmp_path / "r1")
    r2 = TR.train(desk_cfg(seed=5), tiny_corpus, tmp_path / "r2")
    assert r1.checkpoint_path.read_bytes() == r2.checkpoint_path.read_bytes()
    assert r1.metrics_path.read_text() == r2.metrics_path.read_text()
    r3 = TR.train(desk_cfg(seed=6), tiny_corpus, tmp_path / "r3")
    assert r3.checkpoint_path.read_bytes() != r1.checkpoint_path.read_bytes()


def test_vision_cell_has_no_audio_state(tiny_corpus, tmp_path):
    res = TR.train(desk_cfg(fusion="vision"), tiny_corpus, tmp_path / "v")
    ck = D.load_checkpoint(res.checkpoint_path)
    assert not any("audio" in k for k in ck.params)
    assert not any("audio" in k for k in ck.state)
    assert any(k.startswith("m.") for k in ck.state)


def test_checkpoint_reload_reproduces_eval(tiny_corpus, tmp_path):
    cfg = desk_cfg(epochs=1)
    res = TR.train(cfg, tiny_corpus, tmp_path / "run")
    model, blob = TR.load_model_from_checkpoint(res.checkpoint_path)
    prev = T.default_dtype()
    T.set_precision(blob["train"]["precision"])
    try:
        manifests = D.load_manifest(tiny_corpus)
        _, test_m = D.split_manifests(manifests)
        samples = TR.load_samples(test_m, model.cfg)
        rep = TR.evaluate_model(model, samples, gamma=cfg.gamma)
    finally:
        T.set_precision("f64" if prev == np.float64 else "f32")
    assert abs(rep.f1 - res.report.f1) < 1e-12


def test_overfit_single_sample_reduces_kld(tiny_corpus, tmp_path):
    single = tmp_path / "single"
    mpath = D.synth_generate(single, 1, seed=3)
    res = TR.train(desk_cfg(epochs=60, batch_size=1, lr=3e-3, weight_decay=0.0,
                            fusion="sts"), mpath, tmp_path / "overfit")
    lines = [json.loads(line) for line in res.metrics_path.read_text().splitlines()]
    klds = [r["kld"] for r in lines if "step" in r]
    assert min(klds[-5:]) < 0.5 * klds[0]


# -- ablation ----------------------------------------------------------------------------


def test_ablation_cells_cover_grids():
    base = desk_cfg()
    labels = [lab for lab, _ in TR.ablation_cells("components", base)]
    assert labels == ["vision", "s_fusion", "t_fusion", "sts", "csts"]
    labels = [lab for lab, _ in TR.ablation_cells("fusion", base)]
    assert set(labels) >= {"linear", "bilinear", "concat", "vanilla_sa", "sts"}
    labels = [lab for lab, _ in TR.ablation_cells("contrastive", base)]
    assert set(labels) >= {"sts+vanilla", "sts+s", "sts+t", "sts+cross", "csts"}
    with pytest.raises(ConfigError):
        TR.ablation_cells("bogus", base)


def test_ablate_single_cell_table(tiny_corpus, tmp_path):
    rows = TR.ablate([("sts", desk_cfg())], tiny_corpus, tmp_path / "abl")
    assert len(rows) == 1
    assert rows[0]["error"] is None and rows[0]["f1"] is not None
    assert (tmp_path / "abl" / "ablation.csv").exists()
    assert (tmp_path / "abl" / "ablation.json").exists()
    csv_text = (tmp_path / "abl" / "ablation.csv").read_text()
    assert csv_text.splitlines()[0].startswith("label,seed,f1")


def test_ablate_records_cell_failures_and_continues(tiny_corpus, tmp_path):
    bad = desk_cfg()
    bad.batch_size = 0  # will crash inside train
    rows = TR.ablate([("bad", bad), ("sts", desk_cfg())], tiny_corpus, tmp_path / "abl2")
    assert rows[0]["error"] is not None
    assert rows[1]["error"] is None
    assert TR.mean_f1(rows, "sts") >= 0.0
