"""Waveform loading and the sliding-window log-spectrogram frontend.

Each sampled video frame gets a 1.28 s audio window centred on its timestamp;
every window becomes one 256x256 log-magnitude STFT.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, DataError

RATE = 24_000            # Hz after resampling
WINDOW_SECONDS = 1.28    # audio context per video frame
STFT_WINDOW = 240        # 10 ms at 24 kHz
STFT_HOP = 120           # 5 ms
STFT_NFFT = 512          # smallest power of two with >= 256 one-sided bins
BANDS = 256


@dataclass
class AudioTrack:
    samples: np.ndarray   # float64 in [-1, 1], mono
    rate: int

    @property
    def duration(self) -> float:
        return len(self.samples) / self.rate


@dataclass
class SpectrogramStack:
    values: np.ndarray    # (T_in, BANDS, BANDS) log magnitudes
    window_seconds: float
    frame_times: list[float] = field(default_factory=list)


def read_wav(path: Path | str) -> AudioTrack:
    """Read 16-bit PCM WAV; stereo is mean-mixed down to mono."""
    try:
        with wave.open(str(path), "rb") as w:
            if w.getcomptype() != "NONE" or w.getsampwidth() != 2:
                raise DataError(f"{path}: only 16-bit PCM WAV is supported "
                                f"(sampwidth={w.getsampwidth()}, comp={w.getcomptype()})")
            rate = w.getframerate()
            channels = w.getnchannels()
            raw = w.readframes(w.getnframes())
    except wave.Error as e:
        raise DataError(f"{path}: not a readable WAV file ({e})") from e
    data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if channels > 1:
        data = data.reshape(-1, channels).mean(axis=1)
    return AudioTrack(samples=data, rate=rate)


def write_wav(path: Path | str, samples: np.ndarray, rate: int) -> None:
    pcm = np.clip(np.round(samples * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(rate)
        w.writeframes(pcm.tobytes())


def resample(track: AudioTrack, target_rate: int) -> AudioTrack:
    """Linear-interpolation resampling; duration is preserved within one sample."""
    if target_rate <= 0:
        raise ContractError(f"target_rate must be positive, got {target_rate}")
    if len(track.samples) == 0:
        raise ContractError("cannot resample an empty track")
    if track.rate == target_rate:
        return AudioTrack(track.samples.copy(), target_rate)
    n_out = int(round(len(track.samples) * target_rate / track.rate))
    t_in = np.arange(len(track.samples)) / track.rate
    t_out = np.arange(n_out) / target_rate
    return AudioTrack(np.interp(t_out, t_in, track.samples), target_rate)


def _reflect_indices(idx: np.ndarray, n: int) -> np.ndarray:
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * n - 2
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - idx, idx)


def window_segments(track: AudioTrack, frame_times: list[float],
                    dt_w: float = WINDOW_SECONDS) -> list[np.ndarray]:
    """One fixed-length sample window per frame time, centred on it.

    Regions outside the track are filled by reflecting the waveform at its
    edges, so clip-boundary frames see a spectrally continuous signal.
    """
    if dt_w <= 0:
        raise ContractError(f"dt_w must be positive, got {dt_w}")
    if len(track.samples) == 0:
        raise ContractError("cannot window an empty track")
    length = int(round(dt_w * track.rate))
    windows = []
    for t in frame_times:
        if t > track.duration + dt_w or t < -dt_w:
            raise ContractError(
                f"frame time {t:.3f}s is more than {dt_w}s outside the "
                f"{track.duration:.3f}s track")
        start = int(round((t - dt_w / 2.0) * track.rate))
        idx = _reflect_indices(np.arange(start, start + length), len(track.samples))
        windows.append(track.samples[idx])
    return windows


def log_spectrogram(window: np.ndarray, rate: int = RATE) -> np.ndarray:
    """Magnitude STFT of one window -> (BANDS, BANDS) log(1+m) image.

    Hann window, 240-sample frames with 120-sample hop, 512-point transform;
    bins 1..256 are kept (DC dropped) and the time axis is centre-padded or
    cropped to exactly BANDS columns.
    """
    if len(window) < STFT_WINDOW:
        raise ContractError(
            f"window of {len(window)} samples is shorter than one STFT window ({STFT_WINDOW})")
    frames = np.lib.stride_tricks.sliding_window_view(window, STFT_WINDOW)[::STFT_HOP]
    frames = frames * np.hanning(STFT_WINDOW)
    mag = np.abs(np.fft.rfft(frames, n=STFT_NFFT, axis=-1))[:, 1:BANDS + 1]
    spec = np.log1p(mag).T  # (freq, time)
    n_t = spec.shape[1]
    if n_t > BANDS:
        lo = (n_t - BANDS) // 2
        spec = spec[:, lo:lo + BANDS]
    elif n_t < BANDS:
        left = (BANDS - n_t) // 2
        spec = np.pad(spec, ((0, 0), (left, BANDS - n_t - left)))
    return spec


def spectrogram_stack(track: AudioTrack, frame_times: list[float],
                      dt_w: float = WINDOW_SECONDS) -> SpectrogramStack:
    """Full frontend: resample to 24 kHz, window per frame, STFT each window."""
    track = resample(track, RATE)
    windows = window_segments(track, frame_times, dt_w)
    values = np.stack([log_spectrogram(w) for w in windows])
    return SpectrogramStack(values=values, window_seconds=dt_w,
                            frame_times=list(frame_times))
