"""Comparison figures: energy decay curves and spectrogram pairs."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .audio import Waveform
from .dsp import stft_mel
from .reverb import extract_decay_tail, schroeder_edc_db


def plot_decay_curves(pairs: dict[str, Waveform], out_path: str | Path) -> Path:
    """Overlay Schroeder decay curves of labeled clips."""
    fig, ax = plt.subplots(figsize=(7, 4))
    for label, wf in pairs.items():
        try:
            tail = extract_decay_tail(wf)
            db = schroeder_edc_db(tail.samples, subtract_noise_floor=True)
            t = np.arange(len(db)) / wf.sample_rate
            ax.plot(t, db, label=label, linewidth=1.2)
        except Exception as exc:
            ax.plot([], [], label=f"{label} (no decay: {exc})")
    ax.set_xlabel("time since offset (s)")
    ax.set_ylabel("energy decay (dB)")
    ax.set_ylim(-65, 2)
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def plot_spectrogram_pair(
    gen: Waveform, ref: Waveform, out_path: str | Path, titles=("generated", "reference")
) -> Path:
    fig, axes = plt.subplots(1, 2, figsize=(10, 4), sharey=True)
    for ax, wf, title in zip(axes, (gen, ref), titles):
        mel = stft_mel(wf).values.T
        im = ax.imshow(mel, origin="lower", aspect="auto", cmap="magma",
                       extent=[0, wf.duration, 0, mel.shape[0]])
        ax.set_title(title, fontsize=10)
        ax.set_xlabel("time (s)")
    axes[0].set_ylabel("mel band")
    fig.colorbar(im, ax=axes, shrink=0.85, label="log magnitude (nats)")
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path
