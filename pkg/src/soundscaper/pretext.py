"""Training-pair construction: conditional de-enhancement of session clips.

An example pairs a noised, scene-stripped version of one clip (the input)
with the clip's original mixture (the target), conditioned on a different
clip from the same session plus the scene descriptor.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import Waveform, frame_rms_db
from .corpus import Clip, Manifest, load_clip, load_manifest
from .dsp import DEFAULT_FRAMES, FrameParams, MelSpec, stft_mel

log = logging.getLogger(__name__)

PRETEXT_SCHEMA_VERSION = 1
DEFAULT_SIGMA = 0.01
DEFAULT_DROP_RATE = 0.10


@dataclass(frozen=True)
class TrainingExample:
    input_enhanced: MelSpec
    target: MelSpec
    cond_audio: Waveform
    cond_descriptor: np.ndarray
    drop_cond: bool
    target_clip_id: str = ""
    cond_clip_id: str = ""


def vad_gate(clip: Clip, min_active_frac: float = 0.30, gate_db: float = -35.0) -> bool:
    """True when at least min_active_frac of frames carry speech energy
    (measured on the clean stem, which is ground truth here)."""
    speech = clip.components["speech_clean"].samples
    env = frame_rms_db(speech)
    peak = float(np.max(env))
    if peak <= -119.0:
        return False
    active = env > peak + gate_db
    return bool(active.mean() >= min_active_frac)


def enhance_oracle(clip: Clip) -> Waveform:
    """Scene-stripped speech: the dry clean stem, as a perfect two-stage
    separation + enhancement stack would produce."""
    if "speech_clean" not in clip.components:
        raise ValueError("clip has no ground-truth stems")
    return clip.components["speech_clean"]


def add_input_noise(wf: Waveform, sigma: float, rng: np.random.Generator) -> Waveform:
    """Gaussian input augmentation, applied identically at train and test time."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return wf
    noisy = wf.samples + sigma * rng.standard_normal(len(wf))
    return Waveform(np.clip(noisy, -1.0, 1.0), wf.sample_rate)


def eligible_clips(session_clips: list[Clip]) -> list[Clip]:
    return [c for c in session_clips if vad_gate(c)]


def sample_pair(
    session_clips: list[Clip],
    descriptor: np.ndarray,
    rng: np.random.Generator,
    sigma: float = DEFAULT_SIGMA,
    drop_rate: float = DEFAULT_DROP_RATE,
    params: FrameParams = DEFAULT_FRAMES,
) -> TrainingExample:
    """Draw an ordered (target, conditional) pair from one session's clips.

    Raises ValueError when fewer than two clips pass the speech gate.
    """
    usable = eligible_clips(session_clips)
    if len(usable) < 2:
        raise ValueError(f"need >= 2 gated clips in session, got {len(usable)}")
    i, j = rng.choice(len(usable), size=2, replace=False)
    target_clip, cond_clip = usable[int(i)], usable[int(j)]
    assert target_clip.t_start != cond_clip.t_start, "pair must be time-disjoint"

    noisy_input = add_input_noise(enhance_oracle(target_clip), sigma, rng)
    return TrainingExample(
        input_enhanced=stft_mel(noisy_input, params),
        target=stft_mel(target_clip.waveform, params),
        cond_audio=cond_clip.waveform,
        cond_descriptor=descriptor,
        drop_cond=bool(rng.random() < drop_rate),
        target_clip_id=target_clip.clip_id,
        cond_clip_id=cond_clip.clip_id,
    )


# --- on-disk example index -------------------------------------------------


def build_pretext_index(
    corpus_dir: str | Path,
    out_dir: str | Path,
    sigma: float = DEFAULT_SIGMA,
    drop_rate: float = DEFAULT_DROP_RATE,
    seed: int = 0,
) -> dict:
    """Gate clips, group them by session, and write the example index.

    Only clip ids are written; audio stays in the corpus. Sessions with
    fewer than two gated clips are skipped and counted.
    """
    corpus_dir = Path(corpus_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = load_manifest(corpus_dir / "manifest.jsonl")

    sessions: dict[str, list[dict]] = {}
    for rec in manifest.clips:
        sessions.setdefault(rec["session_id"], []).append(rec)

    index = {
        "schema_version": PRETEXT_SCHEMA_VERSION,
        "corpus_dir": str(corpus_dir.resolve()),
        "sigma": sigma,
        "drop_rate": drop_rate,
        "seed": seed,
        "sessions": [],
        "skipped_sessions": 0,
    }
    for session_id in sorted(sessions):
        recs = sessions[session_id]
        gated = [r for r in recs if vad_gate(load_clip(corpus_dir, r))]
        if len(gated) < 2:
            index["skipped_sessions"] += 1
            continue
        index["sessions"].append(
            {
                "session_id": session_id,
                "scene_id": recs[0]["scene_id"],
                "split": manifest.scene_splits[recs[0]["scene_id"]],
                "clip_ids": [r["clip_id"] for r in gated],
            }
        )
    if index["skipped_sessions"]:
        log.info("skipped %d sessions with <2 gated clips", index["skipped_sessions"])
    with (out_dir / "pretext.json").open("w", encoding="utf-8") as fh:
        json.dump(index, fh, indent=1)
    return index


class PretextDataset:
    """Samples TrainingExamples from an on-disk corpus via the index file."""

    def __init__(self, index_path: str | Path, split: str = "train",
                 params: FrameParams = DEFAULT_FRAMES):
        index_path = Path(index_path)
        if index_path.is_dir():
            index_path = index_path / "pretext.json"
        with index_path.open("r", encoding="utf-8") as fh:
            self.index = json.load(fh)
        if self.index["schema_version"] != PRETEXT_SCHEMA_VERSION:
            raise ValueError(
                f"pretext schema {self.index['schema_version']} != "
                f"supported {PRETEXT_SCHEMA_VERSION}"
            )
        self.corpus_dir = Path(self.index["corpus_dir"])
        self.manifest: Manifest = load_manifest(self.corpus_dir / "manifest.jsonl")
        self.params = params
        self.sigma = self.index["sigma"]
        self.drop_rate = self.index["drop_rate"]
        self.sessions = [s for s in self.index["sessions"] if s["split"] == split]
        if not self.sessions:
            raise ValueError(f"no sessions in split {split!r}")
        self._rec_by_id = {r["clip_id"]: r for r in self.manifest.clips}
        self._clip_cache: dict[str, Clip] = {}

    def __len__(self) -> int:
        return sum(len(s["clip_ids"]) for s in self.sessions)

    def _clip(self, clip_id: str) -> Clip:
        if clip_id not in self._clip_cache:
            self._clip_cache[clip_id] = load_clip(self.corpus_dir, self._rec_by_id[clip_id])
        return self._clip_cache[clip_id]

    def sample(self, rng: np.random.Generator) -> TrainingExample:
        session = self.sessions[int(rng.integers(len(self.sessions)))]
        i, j = rng.choice(len(session["clip_ids"]), size=2, replace=False)
        target_clip = self._clip(session["clip_ids"][int(i)])
        cond_clip = self._clip(session["clip_ids"][int(j)])
        descriptor = self.manifest.scenes[session["scene_id"]].descriptor
        noisy_input = add_input_noise(enhance_oracle(target_clip), self.sigma, rng)
        return TrainingExample(
            input_enhanced=stft_mel(noisy_input, self.params),
            target=stft_mel(target_clip.waveform, self.params),
            cond_audio=cond_clip.waveform,
            cond_descriptor=descriptor,
            drop_cond=bool(rng.random() < self.drop_rate),
            target_clip_id=target_clip.clip_id,
            cond_clip_id=cond_clip.clip_id,
        )
