"""Objective evaluation: RT60 error, mel MSE, magnitude-spectrogram SNR,
ambient-band distance, scene-classifier KL, bootstrap CIs, and the
separate-and-remix baseline.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .audio import Waveform
from .corpus import Clip, measure_snr_db, speech_active_mask, _frame_energy
from .dsp import DEFAULT_FRAMES, stft, stft_mel
from .reverb import UnmeasurableDecayError, rt60_of_decay
from .textures import TEXTURE_CLASSES

log = logging.getLogger(__name__)

MS_SNR_CAP_DB = 100.0
KL_SMOOTHING = 1e-6
RTE_UNITS = "rte: squared RT60 error (s^2)"


def rte(gen: Waveform, ref: Waveform) -> float:
    """Squared difference of Schroeder RT60 estimates (s^2).

    Raises UnmeasurableDecayError when either side lacks a usable decay; the
    report layer records these and excludes them from aggregates.
    """
    return float((rt60_of_decay(gen) - rt60_of_decay(ref)) ** 2)


def mel_mse(gen: Waveform, ref: Waveform) -> float:
    """Mean squared log-mel difference; symmetric in its arguments."""
    if len(gen) != len(ref):
        raise ValueError(f"duration mismatch: {len(gen)} vs {len(ref)} samples")
    a = stft_mel(gen).values
    b = stft_mel(ref).values
    return float(np.mean((a - b) ** 2))


def ms_snr(gen: Waveform, ref: Waveform) -> float:
    """Magnitude-spectrogram SNR in dB of gen against reference.

    Asymmetric by construction: the reference magnitudes define the signal
    energy. Identical inputs are capped at +100 dB.
    """
    if len(gen) != len(ref):
        raise ValueError(f"duration mismatch: {len(gen)} vs {len(ref)} samples")
    s_ref = np.abs(stft(ref.samples))
    s_gen = np.abs(stft(gen.samples))
    num = float(np.sum(s_ref**2))
    if num <= 0:
        raise ValueError("reference has zero spectral energy")
    den = float(np.sum((s_ref - s_gen) ** 2))
    if den == 0:
        return MS_SNR_CAP_DB
    return min(10.0 * np.log10(num / den), MS_SNR_CAP_DB)


def band_energy_db(wf: Waveform, lo_hz: float, hi_hz: float) -> float:
    """Mean energy (dB) of the STFT bins inside [lo_hz, hi_hz]."""
    mag = np.abs(stft(wf.samples))
    freqs = np.arange(mag.shape[1]) * wf.sample_rate / DEFAULT_FRAMES.n_fft
    sel = (freqs >= lo_hz) & (freqs <= hi_hz)
    e = float(np.mean(mag[:, sel] ** 2))
    return 10.0 * np.log10(max(e, 1e-20))


def ambient_band_distance(gen: Waveform, ref: Waveform) -> float:
    """L1 distance between time-averaged log-mel band profiles."""
    a = stft_mel(gen).values.mean(axis=0)
    b = stft_mel(ref).values.mean(axis=0)
    return float(np.mean(np.abs(a - b)))


# --- scene classifier (ambient-texture class posterior) ---------------------


class SceneClassifier(nn.Module):
    """Small CNN over log-mels predicting the ambient texture class."""

    def __init__(self, n_classes: int = len(TEXTURE_CLASSES)):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(1, 12, 4, stride=(4, 2), padding=1),
            nn.SiLU(),
            nn.Conv2d(12, 24, 4, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(24, 48, 4, stride=2, padding=1),
            nn.SiLU(),
        )
        self.out = nn.Linear(48, n_classes)
        self.register_buffer("mel_shift", torch.tensor(0.0))
        self.register_buffer("mel_scale", torch.tensor(1.0))
        self.register_buffer("trained", torch.tensor(False))

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        x = ((mel - self.mel_shift) / self.mel_scale).unsqueeze(1)
        return self.out(self.net(x).mean(dim=(2, 3)))

    @torch.no_grad()
    def posterior(self, wf: Waveform) -> np.ndarray:
        mel = torch.from_numpy(stft_mel(wf).values.astype(np.float32)).unsqueeze(0)
        return torch.softmax(self(mel), dim=1)[0].numpy().astype(np.float64)


def train_scene_classifier(
    mels: np.ndarray,
    labels: np.ndarray,
    epochs: int = 12,
    batch_size: int = 32,
    lr: float = 2e-3,
    seed: int = 0,
    holdout_fraction: float = 0.15,
) -> tuple[SceneClassifier, float]:
    """Train on (N, T, F) mels with integer class labels.

    Returns the model and its held-out accuracy.
    """
    mels = np.asarray(mels, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    model = SceneClassifier()
    model.mel_shift.fill_(float(mels.mean()))
    model.mel_scale.fill_(float(mels.std()))
    opt = torch.optim.Adam(model.parameters(), lr=lr)

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(mels))
    n_hold = max(8, int(holdout_fraction * len(mels)))
    hold_idx, train_idx = order[:n_hold], order[n_hold:]
    x_train = torch.from_numpy(mels[train_idx])
    y_train = torch.from_numpy(labels[train_idx])
    x_hold = torch.from_numpy(mels[hold_idx])
    y_hold = torch.from_numpy(labels[hold_idx])

    loss_fn = nn.CrossEntropyLoss()
    for _ in range(epochs):
        perm = torch.randperm(len(x_train), generator=gen)
        for start in range(0, len(x_train), batch_size):
            sel = perm[start : start + batch_size]
            loss = loss_fn(model(x_train[sel]), y_train[sel])
            opt.zero_grad()
            loss.backward()
            opt.step()
    model.eval()
    with torch.no_grad():
        preds = []
        for start in range(0, len(x_hold), 64):
            preds.append(model(x_hold[start : start + 64]).argmax(dim=1))
        acc = float((torch.cat(preds) == y_hold).float().mean())
    model.trained.fill_(True)
    log.info("scene classifier held-out accuracy: %.3f", acc)
    return model, acc


def scene_kl(
    gen_clips: list[Waveform],
    ref_clips: list[Waveform],
    classifier: SceneClassifier,
    smoothing: float = KL_SMOOTHING,
) -> float:
    """Mean KL(ref posterior || gen posterior) over paired clips."""
    if not bool(classifier.trained):
        raise ValueError("scene classifier has not been trained")
    if len(gen_clips) != len(ref_clips):
        raise ValueError("gen and ref sets must be paired")
    kls = []
    for g, r in zip(gen_clips, ref_clips):
        p = classifier.posterior(r) + smoothing
        q = classifier.posterior(g) + smoothing
        p /= p.sum()
        q /= q.sum()
        kls.append(float(np.sum(p * np.log(p / q))))
    return float(np.mean(kls))


# --- separate & remix baseline ----------------------------------------------


def separate_and_remix_baseline(
    input_speech: Waveform, cond_clip: Clip, target_snr_db: float = 8.0
) -> tuple[Waveform, dict]:
    """Overlay the conditional clip's (oracle-separated) ambient onto the
    input at a fixed speech-to-ambient SNR. Returns (mix, record)."""
    ambient = cond_clip.components["ambient"]
    record = {"target_snr_db": target_snr_db, "flag": None}
    if np.isinf(target_snr_db):
        record["flag"] = "infinite-snr: input unchanged"
        return input_speech, record
    if ambient.rms() == 0.0:
        record["flag"] = "silent ambient stem: input unchanged"
        return input_speech, record
    n = len(input_speech)
    amb = ambient.samples[:n] if len(ambient) >= n else np.resize(ambient.samples, n)
    mask = speech_active_mask(input_speech.samples)
    es = _frame_energy(input_speech.samples, mask)
    ea = _frame_energy(amb, mask)
    if ea <= 0 or es <= 0:
        record["flag"] = "unmeasurable energies: input unchanged"
        return input_speech, record
    gain = np.sqrt(es / (ea * 10.0 ** (target_snr_db / 10.0)))
    mixed = np.clip(input_speech.samples + gain * amb, -1.0, 1.0)
    out = Waveform(mixed, input_speech.sample_rate)
    record["measured_snr_db"] = measure_snr_db(
        input_speech.samples, gain * amb, mask_source=input_speech.samples
    )
    return out, record


# --- report ------------------------------------------------------------------


def bootstrap_ci(
    values: np.ndarray, n_resamples: int = 1000, seed: int = 0, level: float = 0.95
) -> tuple[float, float]:
    """Percentile bootstrap CI of the mean."""
    values = np.asarray(values, dtype=np.float64)
    if len(values) == 0:
        return (float("nan"), float("nan"))
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(values), size=(n_resamples, len(values)))
    means = values[idx].mean(axis=1)
    lo = float(np.quantile(means, (1 - level) / 2))
    hi = float(np.quantile(means, 1 - (1 - level) / 2))
    return lo, hi


@dataclass
class EvalReport:
    """Per-clip metric records plus recomputable aggregates with CIs."""

    records: list = field(default_factory=list)
    header: dict = field(default_factory=lambda: {"rte_units": RTE_UNITS,
                                                  "ms_snr_direction": "gen vs ref (ref defines signal energy)",
                                                  "kl_smoothing": KL_SMOOTHING})

    def add(self, clip_id: str, **metrics) -> None:
        self.records.append({"clip_id": clip_id, **metrics})

    def aggregate(self, seed: int = 0) -> dict:
        out = {"n_clips": len(self.records), "exclusions": {}}
        keys = sorted({k for r in self.records for k in r if k != "clip_id"})
        for key in keys:
            vals = [r[key] for r in self.records if isinstance(r.get(key), (int, float))]
            vals = [v for v in vals if np.isfinite(v)]
            excluded = len(self.records) - len(vals)
            if excluded:
                out["exclusions"][key] = excluded
            if vals:
                arr = np.asarray(vals)
                lo, hi = bootstrap_ci(arr, seed=seed)
                out[key] = {"mean": float(arr.mean()), "ci95": [lo, hi], "n": len(arr)}
        return out

    def write(self, path: str | Path, seed: int = 0) -> None:
        path = Path(path)
        with path.open("w", encoding="utf-8") as fh:
            fh.write(json.dumps({"type": "header", **self.header}) + "\n")
            for rec in self.records:
                fh.write(json.dumps({"type": "record", **rec}) + "\n")
            fh.write(json.dumps({"type": "summary", **self.aggregate(seed)}) + "\n")

    @staticmethod
    def read(path: str | Path) -> "EvalReport":
        report = EvalReport()
        with Path(path).open("r", encoding="utf-8") as fh:
            for line in fh:
                rec = json.loads(line)
                kind = rec.pop("type")
                if kind == "header":
                    report.header = rec
                elif kind == "record":
                    report.records.append(rec)
        return report


def evaluate_pair(gen: Waveform, ref: Waveform) -> dict:
    """All pairwise metrics for one (generated, reference) clip pair."""
    out = {
        "mel_mse": mel_mse(gen, ref),
        "ms_snr_db": ms_snr(gen, ref),
        "ambient_distance": ambient_band_distance(gen, ref),
    }
    try:
        out["rte"] = rte(gen, ref)
    except UnmeasurableDecayError as exc:
        out["rte"] = None
        out["rte_flag"] = f"unmeasurable: {exc}"
    return out
