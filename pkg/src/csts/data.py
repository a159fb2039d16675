"""Dataset manifests, clip loading, the synthetic audio-cued corpus generator,
and checkpoint serialisation.

A corpus is a JSON manifest listing clips; each clip has frames (a directory
of PNGs or one packed raw-tensor file), a 16-bit PCM WAV, and a gaze CSV
(frame_index,x,y,valid). The synthetic generator plants a moving bright blob
whose post-anchor drift direction is cued by an audio tone burst.
"""

from __future__ import annotations

import csv
import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import audio as A
from .errors import ContractError, DataError

TAU_OBSERVE = 3.0       # seconds of evidence
TAU_ANTICIPATE = 2.0    # seconds of future predicted
N_INPUT_FRAMES = 8
N_FUTURE_FRAMES = 8

PACKED_MAGIC = b"CSTSRAW1"
CKPT_MAGIC = b"CSTSCKPT"
CKPT_VERSION = 1
_DTYPE_CODES = {0: np.dtype("<f8"), 1: np.dtype("<f4"), 2: np.dtype("u1")}
_DTYPE_IDS = {v: k for k, v in _DTYPE_CODES.items()}


# -- manifests --------------------------------------------------------------------


@dataclass
class ClipManifest:
    clip_id: str
    frames_path: Path
    audio_path: Path
    gaze_path: Path
    fps: float
    split: str
    meta: dict = field(default_factory=dict)
    gaze: dict[int, tuple[float, float, bool]] = field(default_factory=dict)


def _load_gaze_csv(path: Path) -> dict[int, tuple[float, float, bool]]:
    records = {}
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        for row in reader:
            idx = int(row["frame_index"])
            valid = bool(int(row["valid"]))
            x, y = float(row["x"]), float(row["y"])
            if valid and not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
                raise DataError(f"gaze ({x}, {y}) at frame {idx} outside [0, 1]")
            records[idx] = (x, y, valid)
    return records


def load_manifest(path: Path | str) -> list[ClipManifest]:
    """Load and validate a corpus manifest; all per-record problems are
    collected and reported together with their clip ids."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest {path} does not exist")
    with open(path, encoding="utf-8") as f:
        try:
            records = json.load(f)
        except json.JSONDecodeError as e:
            raise DataError(f"manifest {path} is not valid JSON: {e}") from e
    if not isinstance(records, list):
        raise DataError(f"manifest {path} must be a JSON array of clip records")

    base = path.parent
    manifests: list[ClipManifest] = []
    errors: list[str] = []
    for i, rec in enumerate(records):
        clip_id = str(rec.get("id", f"<record {i}>"))
        try:
            frames = base / rec["frames"]
            wav = base / rec["audio"]
            gaze_path = base / rec["gaze"]
            fps = float(rec["fps"])
            split = rec.get("split", "train")
            if fps <= 0:
                raise DataError(f"fps must be positive, got {fps}")
            if split not in ("train", "test"):
                raise DataError(f"split must be 'train' or 'test', got {split!r}")
            for p, kind in ((frames, "frames"), (wav, "audio"), (gaze_path, "gaze")):
                if not p.exists():
                    raise DataError(f"{kind} path {p} does not exist")
            gaze = _load_gaze_csv(gaze_path)
            manifests.append(ClipManifest(
                clip_id=clip_id, frames_path=frames, audio_path=wav,
                gaze_path=gaze_path, fps=fps, split=split,
                meta=rec.get("meta", {}), gaze=gaze))
        except (KeyError, ValueError, DataError) as e:
            errors.append(f"clip {clip_id}: {e}")
    if errors:
        raise DataError("manifest validation failed:\n  " + "\n  ".join(errors))
    return manifests


def split_manifests(manifests: list[ClipManifest]
                    ) -> tuple[list[ClipManifest], list[ClipManifest]]:
    train = [m for m in manifests if m.split == "train"]
    test = [m for m in manifests if m.split == "test"]
    return train, test


# -- frame storage (png directory or packed raw tensor) -----------------------------


def write_packed_frames(path: Path, frames: np.ndarray) -> None:
    arr = np.ascontiguousarray(frames)
    with open(path, "wb") as f:
        f.write(PACKED_MAGIC)
        f.write(struct.pack("<BB", _DTYPE_IDS[np.dtype(arr.dtype.newbyteorder("<"))],
                            arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(arr.tobytes())


def read_packed_frames(path: Path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(len(PACKED_MAGIC))
        if magic != PACKED_MAGIC:
            raise DataError(f"{path}: bad packed-tensor magic {magic!r}")
        code, ndim = struct.unpack("<BB", f.read(2))
        if code not in _DTYPE_CODES:
            raise DataError(f"{path}: unknown dtype code {code}")
        shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
        data = f.read()
    expected = math.prod(shape) * _DTYPE_CODES[code].itemsize
    if len(data) != expected:
        raise DataError(f"{path}: truncated payload ({len(data)} of {expected} bytes)")
    return np.frombuffer(data, dtype=_DTYPE_CODES[code]).reshape(shape)


def frame_file(index: int) -> str:
    return f"frame_{index:05d}.png"


def count_frames(frames_path: Path) -> int:
    if frames_path.is_dir():
        return len(list(frames_path.glob("frame_*.png")))
    return int(read_packed_frames(frames_path).shape[0])


def read_frames(frames_path: Path, indices: list[int]) -> np.ndarray:
    """(k, H, W, 3) uint8 frames, from a PNG directory or a packed file."""
    if frames_path.is_dir():
        out = []
        for i in indices:
            p = frames_path / frame_file(i)
            if not p.exists():
                raise DataError(f"missing frame file {p}")
            out.append(np.asarray(Image.open(p).convert("RGB")))
        return np.stack(out)
    packed = read_packed_frames(frames_path)
    if max(indices) >= packed.shape[0]:
        raise DataError(f"frame index {max(indices)} out of range for {frames_path}")
    return packed[indices]


def resize_frames(frames: np.ndarray, size: int) -> np.ndarray:
    if frames.shape[1] == size and frames.shape[2] == size:
        return frames
    out = np.empty((frames.shape[0], size, size, 3), dtype=frames.dtype)
    for i, frame in enumerate(frames):
        out[i] = np.asarray(Image.fromarray(frame).resize((size, size),
                                                          Image.BILINEAR))
    return out


# -- clip loading --------------------------------------------------------------------


@dataclass
class ClipSample:
    clip_id: str
    frames: np.ndarray        # (8, H, W, 3) float in [0, 1]
    spectrograms: np.ndarray  # (8, F, F) log magnitudes
    gazes: list[tuple[float, float, bool]]  # one per future frame
    input_indices: list[int]
    future_indices: list[int]
    frame_times: list[float]
    meta: dict = field(default_factory=dict)


def uniform_indices(first: int, last: int, count: int) -> list[int]:
    return [int(round(v)) for v in np.linspace(first, last, count)]


def pool_spectrogram(spec: np.ndarray, size: int) -> np.ndarray:
    """Block-mean a (…, F, S) spectrogram down to (…, size, size)."""
    f = spec.shape[-1]
    if f == size:
        return spec
    if f % size:
        raise ContractError(f"cannot pool {f}-band spectrogram to {size}")
    k = f // size
    lead = spec.shape[:-2]
    return spec.reshape(lead + (size, k, size, k)).mean(axis=(-3, -1))


def load_clip(manifest: ClipManifest, anchor: float | None = None,
              image_size: int = 32, spec_size: int = 32) -> ClipSample:
    """Assemble one training/eval sample around the anchor time: 8 input
    frames uniformly over the observation window, 8 future gaze targets
    uniformly over the anticipation window, and one spectrogram per input
    frame."""
    fps = manifest.fps
    n_total = count_frames(manifest.frames_path)
    if anchor is None:
        anchor = TAU_OBSERVE
    anchor_frame = int(round(anchor * fps))
    obs = int(round(TAU_OBSERVE * fps))
    ant = int(round(TAU_ANTICIPATE * fps))
    if anchor_frame - obs < 0 or anchor_frame + ant > n_total:
        raise ContractError(
            f"clip {manifest.clip_id}: anchor {anchor}s does not leave room for "
            f"[{TAU_OBSERVE}s observation, {TAU_ANTICIPATE}s anticipation] "
            f"in {n_total} frames at {fps} fps")

    input_idx = uniform_indices(anchor_frame - obs, anchor_frame - 1, N_INPUT_FRAMES)
    future_idx = uniform_indices(anchor_frame, anchor_frame + ant - 1, N_FUTURE_FRAMES)

    frames = read_frames(manifest.frames_path, input_idx)
    frames = resize_frames(frames, image_size).astype(np.float64) / 255.0

    track = A.read_wav(manifest.audio_path)
    times = [i / fps for i in input_idx]
    stack = A.spectrogram_stack(track, times)
    specs = pool_spectrogram(stack.values, spec_size)

    gazes = [manifest.gaze.get(i, (0.0, 0.0, False)) for i in future_idx]
    gazes = [(x, y, bool(v)) for x, y, v in gazes]
    return ClipSample(clip_id=manifest.clip_id, frames=frames, spectrograms=specs,
                      gazes=gazes, input_indices=input_idx, future_indices=future_idx,
                      frame_times=times, meta=manifest.meta)


# -- synthetic corpus ---------------------------------------------------------------------


def _smoothstep(u: np.ndarray) -> np.ndarray:
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


def _splat(img: np.ndarray, x: float, y: float, sigma: float,
           color: tuple[float, float, float], gain: float) -> None:
    h, w, _ = img.shape
    yy, xx = np.mgrid[0:h, 0:w]
    blob = np.exp(-(((xx - x * (w - 1)) ** 2) + ((yy - y * (h - 1)) ** 2))
                  / (2 * sigma * sigma))
    img += gain * blob[..., None] * np.asarray(color)


def _wander(rng, tt: np.ndarray, lo: float = 0.18, hi: float = 0.82) -> np.ndarray:
    """Smooth quasi-periodic path covering [lo, hi]."""
    centre = rng.uniform(0.35, 0.65)
    amp = rng.uniform(0.18, 0.30)
    f1, f2 = rng.uniform(0.15, 0.45, size=2)
    p1, p2 = rng.uniform(0, 2 * np.pi, size=2)
    path = centre + amp * np.sin(2 * np.pi * f1 * tt + p1) \
        + 0.08 * np.sin(2 * np.pi * f2 * tt + p2)
    return np.clip(path, lo, hi)


def _bounce(rng, tt: np.ndarray, lo: float = 0.08, hi: float = 0.92
            ) -> tuple[np.ndarray, np.ndarray]:
    """Constant-velocity straight path reflecting off the box walls, so the
    future positions are exactly extrapolatable from the observed motion."""
    span = hi - lo
    speed = rng.uniform(0.12, 0.25)
    angle = rng.uniform(0, 2 * np.pi)
    out = []
    for v, p0 in ((speed * np.cos(angle), rng.uniform(lo, hi)),
                  (speed * np.sin(angle), rng.uniform(lo, hi))):
        m = np.mod(p0 - lo + v * tt, 2 * span)
        out.append(lo + np.where(m > span, 2 * span - m, m))
    return out[0], out[1]


def synth_generate(out_dir: Path | str, n_clips: int, seed: int,
                   cue_validity: float = 0.9, image_size: int = 32,
                   fps: float = 20.0, duration: float = 5.0,
                   frames_format: str = "png", train_fraction: float = 0.8,
                   tone_low: float = 600.0, tone_high: float = 4000.0,
                   missing_gaze_rate: float = 0.02) -> Path:
    """Write a deterministic synthetic corpus and return the manifest path.

    Each clip holds two equally bright blobs on straight bouncing
    trajectories: a warm-coloured one and a cool-coloured one. Tone bursts
    play during the observation window; the LAST burst before the anchor cues
    which blob the gaze tracks through the anticipation window (low tone =
    warm, high tone = cool). In multi-burst clips every earlier burst carries
    the opposite tone, so tone presence or counting points the wrong way and
    only the most recent burst is reliable. Cue validity controls how often
    the gaze obeys the final tone; a dim gray wandering blob adds clutter.
    Anticipating the gaze therefore takes (a) extrapolating blob motion,
    (b) selecting the most recent audio event, and (c) binding its identity
    to the right visual target.
    """
    if n_clips < 1:
        raise ContractError(f"need at least one clip, got {n_clips}")
    if frames_format not in ("png", "packed"):
        raise ContractError(f"frames_format must be 'png' or 'packed', got {frames_format!r}")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create corpus directory {out_dir}: {e}") from e

    rate = A.RATE
    n_frames = int(round(duration * fps))
    n_train = int(round(n_clips * train_fraction))
    tone_len = 0.35
    slots = np.array([0.5, 1.0, 1.5, 2.0, 2.5])   # burst onset grid (seconds)
    records = []
    for ci in range(n_clips):
        rng = np.random.default_rng([seed, ci])
        clip_id = f"clip_{ci:04d}"
        clip_dir = out_dir / "clips" / clip_id
        clip_dir.mkdir(parents=True, exist_ok=True)

        tt = np.arange(n_frames) / fps
        # single-burst clips keep the tone-to-target map easy to acquire; in
        # multi-burst clips every decoy carries the OPPOSITE tone, so burst
        # counting and mere tone presence point the wrong way and only the
        # most recent burst is reliable
        n_bursts = int(rng.choice([1, 2, 2, 3]))
        onsets = np.sort(rng.choice(slots, size=n_bursts, replace=False))
        cue_tone = int(rng.integers(2))                    # 0 = low, 1 = high
        tones = np.full(n_bursts, 1 - cue_tone)
        tones[-1] = cue_tone                               # the last burst decides
        side = cue_tone if rng.random() < cue_validity else 1 - cue_tone

        warm = _bounce(rng, tt)
        cool = _bounce(rng, tt)
        clutter = _wander(rng, tt, 0.1, 0.9), _wander(rng, tt, 0.1, 0.9)
        bx, by = warm if side == 0 else cool

        frames = np.zeros((n_frames, image_size, image_size, 3))
        for k in range(n_frames):
            img = frames[k]
            img += 0.05
            _splat(img, float(clutter[0][k]), float(clutter[1][k]),
                   sigma=1.4, color=(0.45, 0.45, 0.45), gain=0.4)
            _splat(img, float(warm[0][k]), float(warm[1][k]), sigma=1.8,
                   color=(1.0, 0.85, 0.45), gain=1.0)
            _splat(img, float(cool[0][k]), float(cool[1][k]), sigma=1.8,
                   color=(0.45, 0.75, 1.0), gain=1.0)
        frames = (np.clip(frames, 0.0, 1.0) * 255).round().astype(np.uint8)

        if frames_format == "png":
            fdir = clip_dir / "frames"
            fdir.mkdir(exist_ok=True)
            for k in range(n_frames):
                Image.fromarray(frames[k]).save(fdir / frame_file(k))
            frames_rel = f"clips/{clip_id}/frames"
        else:
            write_packed_frames(clip_dir / "frames.raw", frames)
            frames_rel = f"clips/{clip_id}/frames.raw"

        t_audio = np.arange(int(duration * rate)) / rate
        wave = 0.012 * rng.standard_normal(len(t_audio))
        for onset, tone in zip(onsets, tones):
            freq = tone_low if tone == 0 else tone_high
            burst = (t_audio >= onset) & (t_audio < onset + tone_len)
            env = np.zeros_like(t_audio)
            env[burst] = np.hanning(burst.sum())
            wave += 0.7 * env * np.sin(2 * np.pi * freq * t_audio)
            wave += 0.35 * env * np.sin(2 * np.pi * 2 * freq * t_audio)
        A.write_wav(clip_dir / "audio.wav", wave, rate)

        with open(clip_dir / "gaze.csv", "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["frame_index", "x", "y", "valid"])
            for k in range(n_frames):
                if rng.random() < missing_gaze_rate:
                    writer.writerow([k, 0.0, 0.0, 0])
                else:
                    gx = float(np.clip(bx[k] + rng.normal(0, 0.005), 0, 1))
                    gy = float(np.clip(by[k] + rng.normal(0, 0.005), 0, 1))
                    writer.writerow([k, repr(gx), repr(gy), 1])

        records.append({
            "id": clip_id,
            "frames": frames_rel,
            "audio": f"clips/{clip_id}/audio.wav",
            "gaze": f"clips/{clip_id}/gaze.csv",
            "fps": fps,
            "split": "train" if ci < n_train else "test",
            "meta": {"tone_side": cue_tone, "actual_side": side,
                     "onsets": onsets.tolist(), "tones": tones.tolist()},
        })

    manifest_path = out_dir / "manifest.json"
    with open(manifest_path, "w", encoding="utf-8") as f:
        json.dump(records, f, indent=2, sort_keys=True)
        f.write("\n")
    return manifest_path


# -- checkpoints -----------------------------------------------------------------------------


def _write_tensors(f, tensors: dict[str, np.ndarray]) -> None:
    f.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        dtype = np.dtype(arr.dtype.newbyteorder("<"))
        if dtype not in _DTYPE_IDS:
            raise ContractError(f"checkpoint cannot store dtype {arr.dtype}")
        raw = name.encode("utf-8")
        f.write(struct.pack("<H", len(raw)))
        f.write(raw)
        f.write(struct.pack("<BB", _DTYPE_IDS[dtype], arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(arr.astype(dtype).tobytes())


def _read_tensors(f, path) -> dict[str, np.ndarray]:
    def need(n: int) -> bytes:
        data = f.read(n)
        if len(data) != n:
            raise DataError(f"checkpoint {path} is truncated")
        return data

    (count,) = struct.unpack("<I", need(4))
    out = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", need(2))
        name = need(name_len).decode("utf-8")
        code, ndim = struct.unpack("<BB", need(2))
        if code not in _DTYPE_CODES:
            raise DataError(f"checkpoint {path}: unknown dtype code {code}")
        shape = struct.unpack(f"<{ndim}I", need(4 * ndim))
        dtype = _DTYPE_CODES[code]
        payload = need(math.prod(shape) * dtype.itemsize)
        out[name] = np.frombuffer(payload, dtype=dtype).reshape(shape)
    return out


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    config: dict
    step: int | None = None
    state: dict[str, np.ndarray] = field(default_factory=dict)


def save_checkpoint(path: Path | str, params: dict[str, np.ndarray], config: dict,
                    step: int | None = None,
                    state: dict[str, np.ndarray] | None = None) -> None:
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", CKPT_VERSION))
    cfg = json.dumps(config, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    _write_tensors(buf, params)
    if step is None and not state:
        buf.write(struct.pack("<B", 0))
    else:
        buf.write(struct.pack("<B", 1))
        buf.write(struct.pack("<q", -1 if step is None else step))
        _write_tensors(buf, state or {})
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: Path | str) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint {path} does not exist")
    with open(path, "rb") as f:
        magic = f.read(len(CKPT_MAGIC))
        if magic != CKPT_MAGIC:
            raise DataError(f"checkpoint {path}: bad magic {magic!r}, "
                            f"expected {CKPT_MAGIC!r}")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CKPT_VERSION:
            raise DataError(f"checkpoint {path}: version {version} is not "
                            f"supported (expected {CKPT_VERSION})")
        (cfg_len,) = struct.unpack("<I", f.read(4))
        config = json.loads(f.read(cfg_len).decode("utf-8"))
        params = _read_tensors(f, path)
        (has_state,) = struct.unpack("<B", f.read(1))
        step, state = None, {}
        if has_state:
            (raw_step,) = struct.unpack("<q", f.read(8))
            step = None if raw_step < 0 else raw_step
            state = _read_tensors(f, path)
    return Checkpoint(params=params, config=config, step=step, state=state)


def load_into_model(model, params: dict[str, np.ndarray]) -> None:
    """Copy checkpoint tensors into the model, failing loudly on any mismatch."""
    own = model.named_parameters()
    missing = sorted(set(own) - set(params))
    extra = sorted(set(params) - set(own))
    if missing or extra:
        raise DataError(f"checkpoint does not match the model: "
                        f"missing={missing}, unexpected={extra}")
    for name, p in own.items():
        value = params[name]
        if tuple(value.shape) != p.shape:
            raise DataError(f"checkpoint tensor {name} has shape {value.shape}, "
                            f"model expects {p.shape}")
        p.data = value.astype(p.data.dtype, copy=True)
