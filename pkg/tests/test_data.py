import hashlib
import json
import math
from pathlib import Path

import numpy as np
import pytest

from csts import data as D
from csts import tensor as T
from csts.config import model_config
from csts.errors import ContractError, DataError
from csts.model import GazeAnticipationModel
from csts.tensor import Tensor


def corpus(tmp_path, n=2, seed=0, **kw):
    out = tmp_path / f"corpus_{n}_{seed}"
    return D.synth_generate(out, n, seed, **kw)


# -- manifests -------------------------------------------------------------------


def test_empty_manifest_gives_empty_list(tmp_path):
    path = tmp_path / "m.json"
    path.write_text("[]")
    assert D.load_manifest(path) == []


def test_missing_manifest_rejected(tmp_path):
    with pytest.raises(DataError):
        D.load_manifest(tmp_path / "nope.json")


def test_out_of_range_gaze_names_clip(tmp_path):
    mpath = corpus(tmp_path, n=1)
    gaze = mpath.parent / "clips" / "clip_0000" / "gaze.csv"
    lines = gaze.read_text().splitlines()
    lines[1] = "0,1.2,0.5,1"
    gaze.write_text("\n".join(lines) + "\n")
    with pytest.raises(DataError, match="clip_0000"):
        D.load_manifest(mpath)


def test_dangling_path_names_clip(tmp_path):
    mpath = corpus(tmp_path, n=1)
    records = json.loads(mpath.read_text())
    records[0]["audio"] = "clips/clip_0000/missing.wav"
    mpath.write_text(json.dumps(records))
    with pytest.raises(DataError, match="clip_0000"):
        D.load_manifest(mpath)


def test_synth_round_trip_count(tmp_path):
    mpath = corpus(tmp_path, n=5, seed=3)
    manifests = D.load_manifest(mpath)
    assert len(manifests) == 5
    train, test = D.split_manifests(manifests)
    assert len(train) == 4 and len(test) == 1


# -- clip sampling arithmetic ---------------------------------------------------------


def test_uniform_indices_against_enumeration():
    got = D.uniform_indices(0, 59, 8)
    assert got == [0, 8, 17, 25, 34, 42, 51, 59]
    # independent oracle: nearest frame to each ideal uniform position
    for k, idx in enumerate(got):
        ideal = 0 + k * 59 / 7
        best = min(range(60), key=lambda j: (abs(j - ideal), j))
        assert idx == best


def test_future_indices_window():
    got = D.uniform_indices(60, 99, 8)
    assert got[0] == 60 and got[-1] == 99 and len(set(got)) == 8


def test_load_clip_contract(tmp_path):
    mpath = corpus(tmp_path, n=1, seed=1)
    m = D.load_manifest(mpath)[0]
    sample = D.load_clip(m, image_size=32, spec_size=32)
    assert sample.frames.shape == (8, 32, 32, 3)
    assert sample.frames.min() >= 0.0 and sample.frames.max() <= 1.0
    assert sample.spectrograms.shape == (8, 32, 32)
    assert np.all(np.isfinite(sample.spectrograms))
    assert sample.input_indices == [0, 8, 17, 25, 34, 42, 51, 59]
    assert sample.future_indices == [60, 66, 71, 77, 82, 88, 93, 99]
    assert len(sample.gazes) == 8


def test_load_clip_too_short_rejected(tmp_path):
    mpath = corpus(tmp_path, n=1, seed=2)
    m = D.load_manifest(mpath)[0]
    with pytest.raises(ContractError):
        D.load_clip(m, anchor=4.5)


def test_resize_identity_when_sizes_match():
    frames = np.random.default_rng(0).integers(0, 255, (2, 32, 32, 3), dtype=np.uint8)
    assert D.resize_frames(frames, 32) is frames


def test_pool_spectrogram_block_mean():
    spec = np.arange(16.0).reshape(4, 4)
    pooled = D.pool_spectrogram(spec, 2)
    assert pooled.shape == (2, 2)
    assert pooled[0, 0] == (0 + 1 + 4 + 5) / 4
    assert D.pool_spectrogram(spec, 4) is spec
    with pytest.raises(ContractError):
        D.pool_spectrogram(spec, 3)


# -- synthetic corpus properties --------------------------------------------------------


def dir_digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_same_seed_gives_byte_identical_corpora(tmp_path):
    a = D.synth_generate(tmp_path / "a", 3, seed=7)
    b = D.synth_generate(tmp_path / "b", 3, seed=7)
    assert dir_digest(a.parent) == dir_digest(b.parent)
    c = D.synth_generate(tmp_path / "c", 3, seed=8)
    assert dir_digest(c.parent) != dir_digest(a.parent)


def test_single_clip_directory_contract(tmp_path):
    mpath = corpus(tmp_path, n=1, seed=4)
    clip = mpath.parent / "clips" / "clip_0000"
    assert (clip / "frames" / "frame_00000.png").exists()
    assert (clip / "audio.wav").exists()
    assert (clip / "gaze.csv").exists()
    assert len(json.loads(mpath.read_text())) == 1


def test_packed_format_matches_png(tmp_path):
    a = D.synth_generate(tmp_path / "png", 1, seed=5, frames_format="png")
    b = D.synth_generate(tmp_path / "packed", 1, seed=5, frames_format="packed")
    ma, mb = D.load_manifest(a)[0], D.load_manifest(b)[0]
    sa = D.load_clip(ma)
    sb = D.load_clip(mb)
    assert np.array_equal(sa.frames, sb.frames)
    assert np.array_equal(sa.spectrograms, sb.spectrograms)


def test_tone_side_predicts_blob_side(tmp_path):
    mpath = corpus(tmp_path, n=60, seed=6)
    meta = [m.meta for m in D.load_manifest(mpath)]
    joint = np.zeros((2, 2))
    for rec in meta:
        joint[rec["tone_side"], rec["actual_side"]] += 1
    joint /= joint.sum()
    px = joint.sum(axis=1, keepdims=True)
    py = joint.sum(axis=0, keepdims=True)
    mi = float(np.nansum(joint * np.log(joint / (px * py + 1e-30) + 1e-30)))
    agree = joint[0, 0] + joint[1, 1]
    assert agree > 0.75
    assert mi > 0.1


def test_missing_gaze_frames_are_flagged(tmp_path):
    mpath = corpus(tmp_path, n=4, seed=9, missing_gaze_rate=0.3)
    manifests = D.load_manifest(mpath)
    flags = [v for m in manifests for (_, _, v) in m.gaze.values()]
    assert any(not v for v in flags) and any(v for v in flags)


# -- packed tensors and checkpoints ------------------------------------------------------


def test_packed_tensor_roundtrip(tmp_path):
    arr = np.random.default_rng(1).integers(0, 255, (7, 8, 8, 3), dtype=np.uint8)
    path = tmp_path / "x.raw"
    D.write_packed_frames(path, arr)
    assert np.array_equal(D.read_packed_frames(path), arr)


def test_packed_tensor_truncation_detected(tmp_path):
    arr = np.zeros((2, 4, 4, 3), dtype=np.uint8)
    path = tmp_path / "x.raw"
    D.write_packed_frames(path, arr)
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(DataError, match="truncated"):
        D.read_packed_frames(path)


def test_checkpoint_roundtrip_bitwise(tmp_path):
    g = np.random.default_rng(2)
    params = {"a.weight": g.standard_normal((3, 4)),
              "b.bias": g.standard_normal(5).astype(np.float32)}
    state = {"m.a.weight": np.zeros((3, 4))}
    p1 = tmp_path / "c1.bin"
    p2 = tmp_path / "c2.bin"
    D.save_checkpoint(p1, params, {"preset": "desk"}, step=17, state=state)
    ck = D.load_checkpoint(p1)
    assert ck.step == 17 and ck.config == {"preset": "desk"}
    assert np.array_equal(ck.params["a.weight"], params["a.weight"])
    D.save_checkpoint(p2, ck.params, ck.config, step=ck.step, state=ck.state)
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"NOTACKPT" + bytes(64))
    with pytest.raises(DataError, match="magic"):
        D.load_checkpoint(path)


def test_checkpoint_bad_version_rejected(tmp_path):
    path = tmp_path / "bad.bin"
    import struct
    path.write_bytes(D.CKPT_MAGIC + struct.pack("<I", 99) + bytes(32))
    with pytest.raises(DataError, match="version"):
        D.load_checkpoint(path)


def test_load_into_model_checks_names(tmp_path):
    cfg = model_config("desk", fusion="vision")
    model = GazeAnticipationModel(cfg, np.random.default_rng(3))
    params = {k: v.data for k, v in model.named_parameters().items()}
    bad = dict(params)
    bad.pop(next(iter(bad)))
    bad["ghost"] = np.zeros(3)
    with pytest.raises(DataError, match="ghost"):
        D.load_into_model(model, bad)


def test_loaded_model_reproduces_outputs_bitwise(tmp_path):
    cfg = model_config("desk", fusion="sts")
    g = np.random.default_rng(4)
    model = GazeAnticipationModel(cfg, g)
    frames = Tensor(g.random((8, 32, 32, 3)))
    specs = Tensor(g.random((8, 32, 32)))
    with T.no_grad():
        before = model(frames, specs).heatmaps.data.copy()

    path = tmp_path / "m.bin"
    D.save_checkpoint(path, {k: v.data for k, v in model.named_parameters().items()},
                      cfg.to_dict())
    ck = D.load_checkpoint(path)
    model2 = GazeAnticipationModel(cfg, np.random.default_rng(99))
    D.load_into_model(model2, ck.params)
    with T.no_grad():
        after = model2(frames, specs).heatmaps.data
    assert np.array_equal(before, after)
