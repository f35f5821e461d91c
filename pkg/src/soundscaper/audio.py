"""Mono waveform container and 16-bit PCM WAV I/O."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

# Power-of-two scale keeps int16 <-> float conversion exact in binary
# floating point, which the corpus stem-identity guarantee relies on.
INT16_SCALE = 32768.0

DEFAULT_SAMPLE_RATE = 16000


@dataclass(frozen=True)
class Waveform:
    """A mono audio signal, amplitudes nominally in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError(f"waveform must be mono 1-D, got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("waveform contains non-finite samples")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate

    def rms(self) -> float:
        return float(np.sqrt(np.mean(np.square(self.samples)))) if len(self) else 0.0

    def peak(self) -> float:
        return float(np.max(np.abs(self.samples))) if len(self) else 0.0


def quantize_int16(x: np.ndarray) -> np.ndarray:
    """Round float samples to int16 at the package-wide scale."""
    q = np.round(np.asarray(x, dtype=np.float64) * INT16_SCALE)
    return np.clip(q, -32768, 32767).astype(np.int16)


def dequantize_int16(q: np.ndarray) -> np.ndarray:
    return q.astype(np.float64) / INT16_SCALE


def write_wav(path: str | Path, wf: Waveform) -> None:
    """Write mono 16-bit PCM little-endian WAV."""
    wavfile.write(str(path), wf.sample_rate, quantize_int16(wf.samples))


def write_wav_int16(path: str | Path, samples: np.ndarray, sample_rate: int) -> None:
    if samples.dtype != np.int16:
        raise ValueError("expected int16 samples")
    wavfile.write(str(path), sample_rate, samples)


def read_wav(path: str | Path) -> Waveform:
    """Read a WAV file as a mono float waveform (stereo is averaged)."""
    sr, data = wavfile.read(str(path))
    if data.ndim == 2:
        data = data.mean(axis=1)
    if data.dtype == np.int16:
        samples = dequantize_int16(data)
    elif data.dtype == np.int32:
        samples = data.astype(np.float64) / 2147483648.0
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float64)
    elif data.dtype == np.uint8:
        samples = (data.astype(np.float64) - 128.0) / 128.0
    else:
        raise ValueError(f"unsupported WAV dtype {data.dtype} in {path}")
    return Waveform(samples, int(sr))


def read_wav_int16(path: str | Path) -> tuple[np.ndarray, int]:
    sr, data = wavfile.read(str(path))
    if data.dtype != np.int16 or data.ndim != 1:
        raise ValueError(f"expected mono int16 WAV at {path}")
    return data, int(sr)


def resample(wf: Waveform, target_rate: int) -> Waveform:
    if wf.sample_rate == target_rate:
        return wf
    g = math.gcd(wf.sample_rate, target_rate)
    out = resample_poly(wf.samples, target_rate // g, wf.sample_rate // g)
    return Waveform(out, target_rate)


def peak_normalize(wf: Waveform, peak: float = 0.9) -> Waveform:
    p = wf.peak()
    if p == 0.0:
        return wf
    return Waveform(wf.samples * (peak / p), wf.sample_rate)


def frame_rms_db(
    x: np.ndarray, frame: int = 512, hop: int = 160, floor_db: float = -120.0
) -> np.ndarray:
    """Per-frame RMS in dB relative to full scale; frames start at k*hop."""
    x = np.asarray(x, dtype=np.float64)
    n_frames = max(1, int(np.ceil(len(x) / hop)))
    padded = np.zeros((n_frames - 1) * hop + frame)
    padded[: len(x)] = x
    idx = np.arange(frame)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = padded[idx]
    rms = np.sqrt(np.mean(np.square(frames), axis=1))
    with np.errstate(divide="ignore"):
        db = 20.0 * np.log10(rms)
    return np.maximum(db, floor_db)
