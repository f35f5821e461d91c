"""Synthetic speech-like utterances: glottal pulse train, formant filtering,
syllabic gating. Serves as the clean-speech supply when no WAV corpus is given.
"""
from __future__ import annotations

import numpy as np
from scipy.signal import lfilter

from .audio import Waveform


def _resonator(f_hz: float, bw_hz: float, sample_rate: int):
    """Second-order all-pole resonator coefficients."""
    r = np.exp(-np.pi * bw_hz / sample_rate)
    theta = 2 * np.pi * f_hz / sample_rate
    a = [1.0, -2 * r * np.cos(theta), r * r]
    return [1.0 - r], a


def _glottal_source(rng: np.random.Generator, n: int, f0: float, sample_rate: int) -> np.ndarray:
    t = np.arange(n) / sample_rate
    drift = 1.0 + 0.08 * np.sin(2 * np.pi * rng.uniform(0.3, 0.8) * t + rng.uniform(0, 6.28))
    jitter = 1.0 + 0.01 * rng.standard_normal(n)
    phase = np.cumsum(f0 * drift * jitter) / sample_rate
    # Soft sawtooth: few harmonics with 1/k rolloff.
    src = sum(np.sin(2 * np.pi * k * phase) / k for k in range(1, 9))
    return src


def _syllable_envelope(
    rng: np.random.Generator, n: int, sample_rate: int, duty: float, pause_prob: float
) -> np.ndarray:
    """On/off gating at syllabic rate with smooth edges and pauses."""
    env = np.zeros(n)
    pos = 0
    while pos < n:
        syl = int(rng.uniform(0.08, 0.25) * sample_rate)
        gap = int(rng.uniform(0.05, 0.6) * (1.05 - duty) * 2.2 * sample_rate)
        if rng.random() < pause_prob:
            gap += int(rng.uniform(0.3, 1.0) * sample_rate)  # phrase pause
        seg = min(syl, n - pos)
        ramp = max(8, int(0.012 * sample_rate))
        shape = np.ones(seg)
        edge = min(ramp, seg // 2)
        if edge > 0:
            shape[:edge] = np.linspace(0, 1, edge)
            shape[-edge:] = np.linspace(1, 0, edge)
        env[pos : pos + seg] = shape * rng.uniform(0.75, 1.0)
        pos += syl + gap
    return env


def generate_utterance(
    rng: np.random.Generator, duration_s: float, sample_rate: int = 16000
) -> Waveform:
    """One speaker's utterance stream of the requested duration."""
    n = int(round(duration_s * sample_rate))
    f0 = rng.uniform(90, 240)
    duty = rng.uniform(0.25, 0.7)
    pause_prob = rng.uniform(0.04, 0.35)
    voiced = _glottal_source(rng, n, f0, sample_rate)

    # Formants wander slowly to mimic changing vowels; per-segment gain
    # normalization keeps the level stable across resonance luck.
    out = np.zeros(n)
    seg = int(0.18 * sample_rate)
    for start in range(0, n, seg):
        stop = min(start + seg, n)
        f1 = rng.uniform(300, 850)
        f2 = rng.uniform(900, 2200)
        f3 = rng.uniform(2300, 3100)
        chunk = voiced[start:stop]
        for f, bw in ((f1, 80), (f2, 110), (f3, 160)):
            b, a = _resonator(f, bw, sample_rate)
            chunk = lfilter(b, a, chunk)
        level = np.sqrt(np.mean(np.square(chunk)))
        out[start:stop] = chunk / max(level, 1e-9)

    # Sparse unvoiced bursts (fricative-like).
    n_fric = rng.poisson(duration_s * 1.5)
    for _ in range(n_fric):
        s = rng.integers(0, max(1, n - 800))
        dur = int(rng.uniform(0.04, 0.12) * sample_rate)
        noise = rng.standard_normal(dur) * np.hanning(dur)
        hp = lfilter([1, -0.97], [1], noise)  # high-frequency tilt
        out[s : s + dur] += 0.35 * hp[: n - s]

    out *= _syllable_envelope(rng, n, sample_rate, duty, pause_prob)
    peak = np.max(np.abs(out))
    if peak > 0:
        # Mild per-speaker drive varies the crest factor; duty and pause
        # rates carry most of the corpus's loudness diversity.
        drive = rng.uniform(0.3, 1.2)
        out = np.tanh(drive * out / peak) / np.tanh(drive)
        out *= rng.uniform(0.5, 0.95) / np.max(np.abs(out))
    return Waveform(out, sample_rate)


def write_speech_corpus(
    out_dir, n_files: int, seed: int, sample_rate: int = 16000,
    duration_range: tuple[float, float] = (4.0, 8.0),
) -> list:
    """Write a directory of synthetic utterance WAVs; returns the paths."""
    from pathlib import Path

    from .audio import write_wav

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    paths = []
    for i in range(n_files):
        dur = rng.uniform(*duration_range)
        wf = generate_utterance(rng, dur, sample_rate)
        path = out_dir / f"speech_{i:04d}.wav"
        write_wav(path, wf)
        paths.append(path)
    return paths
