"""Spectrogram analysis and synthesis: STFT, log-mel, iterative phase retrieval.

Framing convention: frame k covers samples [k*hop, k*hop + n_fft) with zero
padding at the end, so a signal of L samples yields exactly ceil(L / hop)
frames and the inverse transform recovers the original length.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .audio import Waveform

DEFAULT_SAMPLE_RATE = 16000


@dataclass(frozen=True)
class FrameParams:
    """Fixed corpus-wide spectrogram framing."""

    sample_rate: int = DEFAULT_SAMPLE_RATE
    n_fft: int = 512
    hop: int = 160
    n_mels: int = 64
    log_floor: float = 1e-5
    fmin: float = 0.0
    fmax: float = 8000.0

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2 + 1


DEFAULT_FRAMES = FrameParams()


@dataclass(frozen=True)
class MelSpec:
    """Natural-log mel magnitude matrix, time x frequency."""

    values: np.ndarray
    frame_hop: int
    n_fft: int
    n_mels: int
    sample_rate: int

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[1] != self.n_mels:
            raise ValueError(f"mel values must be (T, {self.n_mels}), got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("mel spectrogram contains non-finite entries")
        object.__setattr__(self, "values", values)

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def mel_filterbank(params: FrameParams = DEFAULT_FRAMES) -> np.ndarray:
    """Triangular mel filterbank (n_mels, n_bins), unit peak per filter."""
    edges_mel = np.linspace(
        _hz_to_mel(params.fmin), _hz_to_mel(params.fmax), params.n_mels + 2
    )
    edges_hz = _mel_to_hz(edges_mel)
    bin_hz = np.arange(params.n_bins) * params.sample_rate / params.n_fft
    fb = np.zeros((params.n_mels, params.n_bins))
    for k in range(params.n_mels):
        lo, center, hi = edges_hz[k], edges_hz[k + 1], edges_hz[k + 2]
        up = (bin_hz - lo) / (center - lo)
        down = (hi - bin_hz) / (hi - center)
        fb[k] = np.clip(np.minimum(up, down), 0.0, None)
    return fb


def mel_center_freqs(params: FrameParams = DEFAULT_FRAMES) -> np.ndarray:
    edges_mel = np.linspace(
        _hz_to_mel(params.fmin), _hz_to_mel(params.fmax), params.n_mels + 2
    )
    return _mel_to_hz(edges_mel)[1:-1]


def frame_count(n_samples: int, hop: int) -> int:
    return int(np.ceil(n_samples / hop))


@lru_cache(maxsize=8)
def _window(n_fft: int) -> np.ndarray:
    # Blackman: its low sidelobes keep leakage out of near-silent bins,
    # which dominates the phase-retrieval round-trip error.
    return np.blackman(n_fft)


def stft(x: np.ndarray, params: FrameParams = DEFAULT_FRAMES) -> np.ndarray:
    """Magnitude-phase STFT, shape (T, n_bins) complex."""
    x = np.asarray(x, dtype=np.float64)
    n_frames = frame_count(len(x), params.hop)
    padded = np.zeros((n_frames - 1) * params.hop + params.n_fft)
    padded[: len(x)] = x
    idx = np.arange(params.n_fft)[None, :] + params.hop * np.arange(n_frames)[:, None]
    frames = padded[idx] * _window(params.n_fft)
    return np.fft.rfft(frames, axis=1)


def istft(
    spec: np.ndarray, n_samples: int, params: FrameParams = DEFAULT_FRAMES
) -> np.ndarray:
    """Weighted overlap-add inverse of `stft`, trimmed to n_samples.

    Exact except at sample 0, where the analysis window is zero (nothing
    ever observes that sample); it reconstructs as 0.
    """
    frames = np.fft.irfft(spec, n=params.n_fft, axis=1)
    n_frames = frames.shape[0]
    total = (n_frames - 1) * params.hop + params.n_fft
    win = _window(params.n_fft)
    out = np.zeros(total)
    wsum = np.zeros(total)
    for k in range(n_frames):
        start = k * params.hop
        out[start : start + params.n_fft] += frames[k] * win
        wsum[start : start + params.n_fft] += win * win
    out /= np.maximum(wsum, 1e-10)
    return out[:n_samples]


def stft_mel(wf: Waveform, params: FrameParams = DEFAULT_FRAMES) -> MelSpec:
    """Log-mel spectrogram of a waveform.

    Raises ValueError when the clip is shorter than one analysis window or
    the sample rate does not match the framing parameters.
    """
    if wf.sample_rate != params.sample_rate:
        raise ValueError(
            f"sample rate {wf.sample_rate} != framing rate {params.sample_rate}"
        )
    if len(wf) < params.n_fft:
        raise ValueError(f"clip too short for analysis: {len(wf)} < {params.n_fft}")
    mag = np.abs(stft(wf.samples, params))
    mel = mag @ mel_filterbank(params).T
    values = np.log(mel + params.log_floor)
    return MelSpec(values, params.hop, params.n_fft, params.n_mels, params.sample_rate)


def mel_to_linear(mel_mag: np.ndarray, params: FrameParams = DEFAULT_FRAMES) -> np.ndarray:
    """Non-negative linear-frequency magnitudes approximating fb @ S = mel.

    Minimum-norm least-squares seed followed by a few multiplicative
    updates to repair the clipped negative entries.
    """
    fb = mel_filterbank(params)
    gram = fb @ fb.T
    seed = np.linalg.solve(gram, mel_mag.T).T @ fb
    s = np.clip(seed, 0.0, None)
    norm = fb.sum(axis=0)
    norm = np.where(norm > 0, norm, 1.0)
    for _ in range(5):
        recon = s @ fb.T
        ratio = mel_mag / np.maximum(recon, 1e-12)
        s = s * ((ratio @ fb) / norm)
    return s


def griffin_lim(
    mag: np.ndarray, n_samples: int, iterations: int, params: FrameParams = DEFAULT_FRAMES
) -> np.ndarray:
    """Phase retrieval from STFT magnitudes, zero-phase init (deterministic)."""
    spec = mag.astype(np.complex128)
    for _ in range(iterations):
        x = istft(spec, n_samples, params)
        angles = np.angle(stft(x, params))
        spec = mag * np.exp(1j * angles)
    return istft(spec, n_samples, params)


def _target_silence_keep(mel_mag: np.ndarray, n_samples: int, params: FrameParams) -> np.ndarray:
    """Per-sample keep mask: zero wherever a floor (all-silent) frame looks.

    A frame at the mel floor proves its windowed span was silent in the
    source, so those samples can be pinned to zero. A small margin spares
    window-edge positions where the analysis window has ~no weight.
    """
    margin = 16
    floor_frame = mel_mag.sum(axis=1) <= 1e-7
    silent = np.zeros(n_samples + params.n_fft, dtype=bool)
    for t in np.nonzero(floor_frame)[0]:
        silent[t * params.hop + margin : t * params.hop + params.n_fft - margin] = True
    return ~silent[:n_samples]


def mel_to_waveform(
    m: MelSpec,
    iterations: int = 60,
    params: FrameParams | None = None,
    n_samples: int | None = None,
) -> Waveform:
    """Invert a log-mel spectrogram to a waveform via iterative phase retrieval.

    Accelerated Griffin-Lim (momentum 0.9) whose magnitudes are rescaled
    toward the target mel every iteration, with target-silent samples gated
    to zero. Deterministic: zero-phase initialization, no randomness.
    With iterations=0 this is the gated zero-phase reconstruction. Output
    length defaults to n_frames * hop (exact for corpus-aligned clips).
    """
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    if params is None:
        params = FrameParams(
            sample_rate=m.sample_rate,
            n_fft=m.n_fft,
            hop=m.frame_hop,
            n_mels=m.n_mels,
        )
    mel_mag = np.clip(np.exp(m.values) - params.log_floor, 0.0, None)
    if n_samples is None:
        n_samples = m.n_frames * params.hop
    fb = mel_filterbank(params)
    fb_norm = np.where(fb.sum(axis=0) > 0, fb.sum(axis=0), 1.0)
    keep = _target_silence_keep(mel_mag, n_samples, params)
    momentum = 0.9

    spec = mel_to_linear(mel_mag, params).astype(np.complex128)
    prev = spec.copy()
    for _ in range(iterations):
        x = istft(spec + momentum * (spec - prev), n_samples, params) * keep
        full = stft(x, params)
        mag = np.abs(full)
        mel_hat = mag @ fb.T
        gain = (np.clip(mel_mag / np.maximum(mel_hat, 1e-10), 0.0, 100.0) @ fb) / fb_norm
        prev = spec
        spec = (mag * gain) * np.exp(1j * np.angle(full))
    out = istft(spec, n_samples, params) * keep
    return Waveform(np.clip(out, -1.0, 1.0), params.sample_rate)
