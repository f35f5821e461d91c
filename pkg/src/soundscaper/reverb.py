"""Reverb synthesis, application, and Schroeder reverberation-time estimation."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.signal import fftconvolve

from .audio import Waveform, frame_rms_db

log = logging.getLogger(__name__)

# Amplitude envelope decay constant: energy falls 60 dB over rt60 seconds,
# i.e. amplitude(t) = 10 ** (-3 t / rt60) = exp(-LOG_1E3 * t / rt60).
LOG_1E3 = 3.0 * np.log(10.0)


class UnmeasurableDecayError(ValueError):
    """The signal does not contain a usable energy decay."""


@dataclass(frozen=True)
class RirSpec:
    """Exponentially decaying noise tail plus a direct-path impulse.

    The rendered response's energy envelope decays exactly 60 dB in rt60
    seconds, giving an analytic oracle for the Schroeder estimator.
    """

    rt60: float
    direct_ratio: float
    length: float
    seed: int

    def __post_init__(self):
        if self.rt60 <= 0:
            raise ValueError(f"rt60 must be > 0, got {self.rt60}")
        if not 0.0 <= self.direct_ratio <= 1.0:
            raise ValueError(f"direct_ratio must be in [0, 1], got {self.direct_ratio}")
        if self.length < self.rt60 / 2:
            raise ValueError(
                f"length {self.length} too short for rt60 {self.rt60} (need >= rt60/2)"
            )


def render_rir(spec: RirSpec, sample_rate: int = 16000) -> Waveform:
    """Render the impulse response described by `spec`, deterministic per seed."""
    n = int(round(spec.length * sample_rate))
    rng = np.random.default_rng(spec.seed)
    t = np.arange(n) / sample_rate
    tail = rng.standard_normal(n) * np.exp(-LOG_1E3 * t / spec.rt60)
    h = (1.0 - spec.direct_ratio) * tail
    h[0] = spec.direct_ratio
    return Waveform(h, sample_rate)


def convolve_rir(wf: Waveform, rir: Waveform, return_scale: bool = False):
    """Apply an impulse response; output truncated to the input length.

    Peak-normalizes only when the result exceeds full scale; the applied
    scale factor is logged and optionally returned.
    """
    if wf.sample_rate != rir.sample_rate:
        raise ValueError(
            f"sample-rate mismatch: {wf.sample_rate} vs {rir.sample_rate}"
        )
    out = fftconvolve(wf.samples, rir.samples)[: len(wf)]
    scale = 1.0
    peak = np.max(np.abs(out)) if len(out) else 0.0
    if peak > 1.0:
        scale = 1.0 / peak
        out = out * scale
        log.debug("convolve_rir: peak %.3f rescaled by %.4f", peak, scale)
    result = Waveform(out, wf.sample_rate)
    return (result, scale) if return_scale else result


def schroeder_edc_db(x: np.ndarray, subtract_noise_floor: bool = False) -> np.ndarray:
    """Backward-integrated energy decay curve in dB, normalized to 0 at t=0."""
    p = np.square(np.asarray(x, dtype=np.float64))
    if subtract_noise_floor:
        # Estimate stationary floor power from the final 10% and remove its
        # linear contribution to the backward integral (Schroeder with
        # noise compensation).
        tail = p[int(len(p) * 0.9):]
        floor = float(np.mean(tail)) if len(tail) else 0.0
        remaining = np.arange(len(p), 0, -1, dtype=np.float64)
        edc = np.cumsum(p[::-1])[::-1] - floor * remaining
    else:
        edc = np.cumsum(p[::-1])[::-1]
    positive = edc > 0
    if not positive.any():
        raise UnmeasurableDecayError("signal has no energy")
    last = np.max(np.nonzero(positive)[0])
    edc = edc[: last + 1]
    edc = np.maximum(edc, edc[0] * 1e-14 if edc[0] > 0 else 1e-300)
    return 10.0 * np.log10(edc / edc[0])


def rt60_schroeder(
    wf: Waveform,
    fit_range_db: tuple[float, float] = (-5.0, -25.0),
    subtract_noise_floor: bool = False,
) -> float:
    """Reverberation time via Schroeder backward integration.

    Fits a line to the energy decay curve between fit_range_db (shrunk
    automatically when the curve's dynamic range is insufficient) and
    extrapolates the slope to -60 dB. Raises UnmeasurableDecayError when the
    usable span is shorter than 10 samples or the fitted slope is not
    negative; never silently returns 0.
    """
    db = schroeder_edc_db(wf.samples, subtract_noise_floor=subtract_noise_floor)
    start_db, end_db = fit_range_db
    if start_db <= end_db:
        raise ValueError("fit_range_db must be (upper, lower) with upper > lower")
    floor_db = float(np.min(db))
    end_db = max(end_db, floor_db + 5.0)
    below_start = np.nonzero(db < start_db)[0]
    if len(below_start) == 0:
        raise UnmeasurableDecayError("decay never crosses the fit start level")
    i0 = below_start[0]
    below_end = np.nonzero(db < end_db)[0]
    i1 = below_end[0] if len(below_end) else len(db)
    if i1 - i0 < 10:
        raise UnmeasurableDecayError(
            f"decay span too short to fit ({i1 - i0} samples)"
        )
    t = np.arange(i0, i1) / wf.sample_rate
    seg = db[i0:i1]
    slope, _ = np.polyfit(t, seg, 1)
    if slope >= 0:
        raise UnmeasurableDecayError(f"non-decaying fit (slope {slope:.2f} dB/s)")
    return float(-60.0 / slope)


def extract_decay_tail(
    wf: Waveform,
    frame: int = 512,
    hop: int = 160,
    offset_db: float = -12.0,
    lookahead_s: float = 0.45,
) -> Waveform:
    """Cut the best free-decay segment from a clip.

    Scans energetic frames (within offset_db of the clip's envelope peak)
    and picks the onset whose following window drops the deepest; the tail
    is truncated at that window's energy minimum so a later onset cannot
    pollute the backward integral.
    """
    env = frame_rms_db(wf.samples, frame=frame, hop=hop)
    peak_db = float(np.max(env))
    if peak_db <= -90.0:
        raise UnmeasurableDecayError("clip is silent")
    look = max(4, int(lookahead_s * wf.sample_rate / hop))
    strong = np.nonzero(env >= peak_db + offset_db)[0]
    strong = strong[strong < len(env) - 2]
    if len(strong) == 0:
        raise UnmeasurableDecayError("no energetic onset found")
    best_depth, best_start, best_end = -np.inf, None, None
    for i in strong:
        window = env[i + 1 : i + 1 + look]
        j = int(np.argmin(window))
        depth = env[i] - window[j]
        if depth > best_depth:
            best_depth, best_start, best_end = depth, int(i), int(i) + 1 + j
    if best_depth < 10.0:
        raise UnmeasurableDecayError(
            f"deepest available decay is only {best_depth:.1f} dB"
        )
    start = best_start * hop
    end = min(len(wf), best_end * hop + frame)
    if end - start < 10:
        raise UnmeasurableDecayError("no room for a decay tail")
    return Waveform(wf.samples[start:end], wf.sample_rate)


def bandpass(wf: Waveform, lo_hz: float, hi_hz: float) -> Waveform:
    """Zero-phase band-pass, for band-limited reverberation analysis."""
    from scipy.signal import butter, sosfiltfilt

    nyq = wf.sample_rate / 2
    sos = butter(4, [max(lo_hz, 10.0) / nyq, min(hi_hz, nyq * 0.98) / nyq],
                 btype="band", output="sos")
    return Waveform(sosfiltfilt(sos, wf.samples), wf.sample_rate)


def rt60_of_decay(wf: Waveform, band_hz: tuple[float, float] | None = None) -> float:
    """RT60 of a full clip: tail extraction plus noise-compensated Schroeder.

    band_hz restricts the analysis to one frequency band, the usual way to
    keep out-of-band textures from polluting the decay estimate.
    """
    if band_hz is not None:
        wf = bandpass(wf, *band_hz)
    tail = extract_decay_tail(wf)
    return rt60_schroeder(tail, subtract_noise_floor=True)
