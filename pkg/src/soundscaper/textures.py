"""Procedural ambient textures: filtered/modulated noise and sparse impulse trains.

Every class is statistically stationary by construction (fixed band edges and
modulation rates), so scene-level acoustics stay coherent across a session.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import butter, sosfilt

TEXTURE_CLASSES = ("rain", "traffic-rumble", "wind", "crowd-babble", "none")

RAIN_BAND_HZ = (2000.0, 6000.0)


@dataclass(frozen=True)
class AmbientSpec:
    texture_class: str
    seed: int
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.texture_class not in TEXTURE_CLASSES:
            raise ValueError(f"unknown texture class {self.texture_class!r}")


def default_params(texture_class: str, rng: np.random.Generator) -> dict:
    """Draw per-scene texture parameters around each class's home range."""
    if texture_class == "rain":
        return {
            "band_lo": float(rng.uniform(1800, 2400)),
            "band_hi": float(rng.uniform(5200, 6400)),
            "mod_rate": float(rng.uniform(0.2, 0.6)),
            "event_rate": float(rng.uniform(20, 60)),
        }
    if texture_class == "traffic-rumble":
        return {
            "band_lo": float(rng.uniform(30, 60)),
            "band_hi": float(rng.uniform(200, 350)),
            "mod_rate": float(rng.uniform(0.05, 0.2)),
            "event_rate": 0.0,
        }
    if texture_class == "wind":
        return {
            "band_lo": float(rng.uniform(80, 150)),
            "band_hi": float(rng.uniform(600, 900)),
            "mod_rate": float(rng.uniform(0.1, 0.4)),
            "event_rate": 0.0,
        }
    if texture_class == "crowd-babble":
        return {
            "band_lo": float(rng.uniform(250, 350)),
            "band_hi": float(rng.uniform(2500, 3200)),
            "mod_rate": float(rng.uniform(3.0, 7.0)),
            "event_rate": float(rng.uniform(8, 16)),
        }
    return {}


def _band_noise(
    rng: np.random.Generator, n: int, lo: float, hi: float, sample_rate: int
) -> np.ndarray:
    nyq = sample_rate / 2
    lo = max(lo, 10.0)
    hi = min(hi, nyq * 0.98)
    sos = butter(4, [lo / nyq, hi / nyq], btype="band", output="sos")
    return sosfilt(sos, rng.standard_normal(n))


def _slow_am(rng: np.random.Generator, n: int, rate: float, depth: float, sample_rate: int) -> np.ndarray:
    t = np.arange(n) / sample_rate
    phase = rng.uniform(0, 2 * np.pi, size=3)
    rates = rate * np.array([1.0, 1.7, 0.6])
    mod = sum(np.sin(2 * np.pi * r * t + p) for r, p in zip(rates, phase)) / 3.0
    return 1.0 - depth + depth * (0.5 + 0.5 * mod)


def _impulse_train(
    rng: np.random.Generator, n: int, rate_hz: float, sample_rate: int,
    burst_lo: float, burst_hi: float,
) -> np.ndarray:
    """Poisson train of short band-limited bursts (droplets, chatter plosives)."""
    out = np.zeros(n)
    if rate_hz <= 0:
        return out
    n_events = rng.poisson(rate_hz * n / sample_rate)
    starts = rng.integers(0, max(1, n - 256), size=n_events)
    for s in starts:
        dur = int(rng.uniform(0.003, 0.012) * sample_rate)
        burst = rng.standard_normal(dur) * np.hanning(dur)
        out[s : s + dur] += rng.uniform(0.3, 1.0) * burst[: n - s]
    nyq = sample_rate / 2
    sos = butter(2, [burst_lo / nyq, min(burst_hi, nyq * 0.98) / nyq], btype="band", output="sos")
    return sosfilt(sos, out)


def render_ambient(spec: AmbientSpec, duration_s: float, sample_rate: int) -> np.ndarray:
    """Render `duration_s` seconds of the texture; deterministic per seed."""
    n = int(round(duration_s * sample_rate))
    if spec.texture_class == "none":
        return np.zeros(n)
    rng = np.random.default_rng(spec.seed)
    p = spec.params or default_params(spec.texture_class, rng)

    if spec.texture_class == "rain":
        bed = _band_noise(rng, n, p["band_lo"], p["band_hi"], sample_rate)
        bed *= _slow_am(rng, n, p["mod_rate"], 0.25, sample_rate)
        drops = _impulse_train(rng, n, p["event_rate"], sample_rate, p["band_lo"], p["band_hi"])
        out = bed + 0.7 * drops
    elif spec.texture_class == "traffic-rumble":
        # Integrate band noise for a brown-ish rumble, then re-band it.
        white = _band_noise(rng, n, p["band_lo"], p["band_hi"], sample_rate)
        out = white * _slow_am(rng, n, p["mod_rate"], 0.4, sample_rate)
    elif spec.texture_class == "wind":
        out = _band_noise(rng, n, p["band_lo"], p["band_hi"], sample_rate)
        out *= _slow_am(rng, n, p["mod_rate"], 0.7, sample_rate)
    elif spec.texture_class == "crowd-babble":
        streams = []
        for _ in range(8):
            s = _band_noise(rng, n, p["band_lo"], p["band_hi"], sample_rate)
            gate = _slow_am(rng, n, p["mod_rate"] * rng.uniform(0.7, 1.3), 0.8, sample_rate)
            streams.append(s * gate)
        out = np.sum(streams, axis=0)
        out += 0.5 * _impulse_train(rng, n, p["event_rate"], sample_rate, p["band_lo"], p["band_hi"])
    else:  # pragma: no cover - guarded by AmbientSpec
        raise ValueError(spec.texture_class)

    rms = np.sqrt(np.mean(np.square(out)))
    if rms > 0:
        out = out * (0.1 / rms)
    return out
