"""Synthetic multi-scene corpus generator.

Clips from one scene share a room response and ambient texture, giving the
temporal-coherence structure the pretext task relies on, with ground-truth
stems and reverberation times that real recordings cannot provide.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import (
    Waveform,
    dequantize_int16,
    peak_normalize,
    quantize_int16,
    read_wav,
    read_wav_int16,
    resample,
    frame_rms_db,
    write_wav_int16,
)
from .dsp import DEFAULT_SAMPLE_RATE, stft_mel
from .reverb import RirSpec, convolve_rir, render_rir
from .textures import TEXTURE_CLASSES, AmbientSpec, default_params, render_ambient

log = logging.getLogger(__name__)

MANIFEST_SCHEMA_VERSION = 1
DESCRIPTOR_DIM = 32
CLIP_SECONDS = 2.56
SPEECH_GATE_DB = -35.0

# Fixed projection from scene parameters to the descriptor space; plays the
# role of an image-embedding model, so it is a package constant, not per-corpus.
_DESCRIPTOR_PROJECTION_SEED = 0x5CE9E


def _descriptor_projection() -> np.ndarray:
    rng = np.random.default_rng(_DESCRIPTOR_PROJECTION_SEED)
    return rng.standard_normal((DESCRIPTOR_DIM, 7))


@dataclass(frozen=True)
class SceneSpec:
    """Parametric scene: reverb, ambient texture, mix level, descriptor."""

    scene_id: str
    rir: RirSpec
    ambient: AmbientSpec
    ambient_snr_db: float
    descriptor: np.ndarray
    seed: int

    def __post_init__(self):
        desc = np.asarray(self.descriptor, dtype=np.float64)
        if desc.shape != (DESCRIPTOR_DIM,):
            raise ValueError(f"descriptor must have shape ({DESCRIPTOR_DIM},)")
        norm = np.linalg.norm(desc)
        if abs(norm - 1.0) > 1e-6:
            raise ValueError(f"descriptor must be unit-norm, got |d|={norm}")
        object.__setattr__(self, "descriptor", desc)


@dataclass(frozen=True)
class Clip:
    """A 2.56 s segment of a rendered session, with ground-truth stems."""

    waveform: Waveform
    scene_id: str
    session_id: str
    t_start: float
    components: dict = field(default_factory=dict)

    @property
    def clip_id(self) -> str:
        return f"{self.session_id}_t{int(round(self.t_start * 1000)):07d}"


def build_descriptor(
    rt60: float, texture_class: str, ambient_snr_db: float, scene_rng: np.random.Generator
) -> np.ndarray:
    """Unit-norm scene descriptor: projected parameters plus per-scene noise."""
    onehot = np.zeros(len(TEXTURE_CLASSES))
    onehot[TEXTURE_CLASSES.index(texture_class)] = 1.0
    params = np.concatenate([[rt60], onehot, [ambient_snr_db / 20.0]])
    vec = _descriptor_projection() @ params
    vec = vec / np.linalg.norm(vec)
    vec = vec + 0.1 * scene_rng.standard_normal(DESCRIPTOR_DIM)
    return vec / np.linalg.norm(vec)


def make_scene(
    scene_id: str,
    rt60: float,
    texture_class: str,
    ambient_snr_db: float,
    seed: int,
    direct_ratio: float | None = None,
) -> SceneSpec:
    """Build a scene with pinned acoustics (used for controlled scene families)."""
    rng = np.random.default_rng(seed)
    if direct_ratio is None:
        direct_ratio = float(rng.uniform(0.3, 0.8))
    rir = RirSpec(
        rt60=rt60,
        direct_ratio=direct_ratio,
        length=1.3 * rt60 + 0.05,
        seed=int(rng.integers(1 << 31)),
    )
    ambient = AmbientSpec(
        texture_class=texture_class,
        seed=int(rng.integers(1 << 31)),
        params=default_params(texture_class, rng),
    )
    descriptor = build_descriptor(rt60, texture_class, ambient_snr_db, rng)
    return SceneSpec(scene_id, rir, ambient, float(ambient_snr_db), descriptor, seed)


def generate_scene(rng_seed: int) -> SceneSpec:
    """Random scene: rt60 ~ U[0.1, 1.0] s, uniform texture class, SNR ~ U[0, 20] dB."""
    rng = np.random.default_rng(rng_seed)
    rt60 = float(rng.uniform(0.1, 1.0))
    texture_class = TEXTURE_CLASSES[int(rng.integers(len(TEXTURE_CLASSES)))]
    snr_db = float(rng.uniform(0.0, 20.0))
    return make_scene(f"scene_{rng_seed:08x}", rt60, texture_class, snr_db, rng_seed)


def speech_active_mask(speech: np.ndarray, gate_db: float = SPEECH_GATE_DB) -> np.ndarray:
    """Frame mask where the speech stem is above gate_db relative to its peak."""
    env = frame_rms_db(speech)
    peak = float(np.max(env))
    if peak <= -119.0:
        return np.zeros(len(env), dtype=bool)
    return env > peak + gate_db


def _frame_energy(x: np.ndarray, mask: np.ndarray, hop: int = 160, frame: int = 512) -> float:
    idx = np.nonzero(mask)[0]
    if len(idx) == 0:
        return 0.0
    total, count = 0.0, 0
    for t in idx:
        seg = x[t * hop : t * hop + frame]
        total += float(np.sum(np.square(seg)))
        count += len(seg)
    return total / max(count, 1)


def _active_rms(x: np.ndarray) -> float:
    mask = speech_active_mask(x)
    e = _frame_energy(x, mask)
    return float(np.sqrt(e))


def measure_snr_db(
    speech: np.ndarray, ambient: np.ndarray, mask_source: np.ndarray | None = None
) -> float:
    """Speech-to-ambient SNR over speech-active frames.

    The activity mask comes from mask_source when given (e.g. the clean stem,
    matching how sessions are calibrated), else from `speech` itself.
    """
    mask = speech_active_mask(speech if mask_source is None else mask_source)
    es = _frame_energy(speech, mask)
    ea = _frame_energy(ambient, mask)
    if ea <= 0:
        return float("inf")
    return 10.0 * np.log10(es / ea)


def render_session(
    scene: SceneSpec,
    speech_sources: list[Waveform],
    duration_s: float,
    rng: np.random.Generator,
    session_id: str = "session",
    clip_seconds: float = CLIP_SECONDS,
) -> list[Clip]:
    """Render one continuous recording in a scene and cut it into clips.

    Utterances are placed with gaps, convolved with the scene response; one
    ambient texture runs under the whole session at the scene's SNR measured
    over speech-active frames. Stems are kept sample-aligned.
    """
    sr = DEFAULT_SAMPLE_RATE
    clip_len = int(round(clip_seconds * sr))
    if duration_s < 2 * clip_seconds:
        raise ValueError(f"session duration {duration_s} shorter than two clips")
    for src in speech_sources:
        if len(src) < clip_len:
            raise ValueError("every speech source must be at least one clip long")
    n = int(round(duration_s * sr))

    # One speech level per session: clips within a session then see the same
    # speech-to-ambient ratio, while levels still vary across sessions.
    session_level = float(rng.uniform(0.05, 0.15))
    dry = np.zeros(n)
    pos = int(rng.uniform(0.05, 0.4) * sr)
    while pos < n - clip_len // 4:
        src = speech_sources[int(rng.integers(len(speech_sources)))]
        max_take = min(len(src), n - pos)
        take = int(rng.uniform(0.6, 1.0) * max_take)
        seg = src.samples[:take]
        active_rms = _active_rms(seg)
        if active_rms > 0:
            seg = seg * (session_level / active_rms)
        dry[pos : pos + take] += seg
        pos += take + int(rng.uniform(0.3, 1.2) * sr)

    rir = render_rir(scene.rir, sr)
    reverbed = convolve_rir(Waveform(dry, sr), rir).samples

    ambient = render_ambient(scene.ambient, duration_s, sr)
    if scene.ambient.texture_class != "none" and np.any(ambient):
        mask = speech_active_mask(dry)
        es = _frame_energy(reverbed, mask)
        ea = _frame_energy(ambient, mask)
        if ea > 0 and es > 0:
            gain = np.sqrt(es / (ea * 10.0 ** (scene.ambient_snr_db / 10.0)))
            ambient = ambient * gain

    mixture = reverbed + ambient
    # Joint scaling keeps headroom in every stem so int16 storage never clips.
    peak = max(float(np.max(np.abs(x))) for x in (mixture, reverbed, ambient, dry))
    if peak > 0.98:
        scale = 0.98 / peak
        dry, reverbed, ambient, mixture = (
            x * scale for x in (dry, reverbed, ambient, mixture)
        )

    clips = []
    n_clips = int(n // clip_len)
    for k in range(n_clips):
        a, b = k * clip_len, (k + 1) * clip_len
        clips.append(
            Clip(
                waveform=Waveform(mixture[a:b], sr),
                scene_id=scene.scene_id,
                session_id=session_id,
                t_start=a / sr,
                components={
                    "speech_clean": Waveform(dry[a:b], sr),
                    "speech_reverbed": Waveform(reverbed[a:b], sr),
                    "ambient": Waveform(ambient[a:b], sr),
                },
            )
        )
    return clips


def ingest_speech(dir_path: str | Path, sample_rate: int = DEFAULT_SAMPLE_RATE) -> list[Waveform]:
    """Load a directory of WAVs: resample to the corpus rate, peak-normalize
    to 0.9. Loudness is deliberately NOT equalized across files."""
    dir_path = Path(dir_path)
    out = []
    for path in sorted(dir_path.glob("*.wav")):
        try:
            wf = read_wav(path)
        except Exception as exc:  # unreadable file: skip, keep going
            log.warning("skipping unreadable %s: %s", path.name, exc)
            continue
        if len(wf) == 0 or wf.peak() == 0.0:
            log.warning("skipping empty/silent %s", path.name)
            continue
        wf = resample(wf, sample_rate)
        out.append(peak_normalize(wf, 0.9))
    if not out:
        raise ValueError(f"no usable WAV files in {dir_path}")
    return out


# --- manifest -------------------------------------------------------------


def _scene_to_record(scene: SceneSpec, split: str) -> dict:
    return {
        "type": "scene",
        "scene_id": scene.scene_id,
        "seed": scene.seed,
        "split": split,
        "rt60": scene.rir.rt60,
        "direct_ratio": scene.rir.direct_ratio,
        "rir_length": scene.rir.length,
        "rir_seed": scene.rir.seed,
        "ambient_class": scene.ambient.texture_class,
        "ambient_seed": scene.ambient.seed,
        "ambient_params": scene.ambient.params,
        "ambient_snr_db": scene.ambient_snr_db,
        "descriptor": [float(v) for v in scene.descriptor],
    }


def _scene_from_record(rec: dict) -> SceneSpec:
    return SceneSpec(
        scene_id=rec["scene_id"],
        rir=RirSpec(rec["rt60"], rec["direct_ratio"], rec["rir_length"], rec["rir_seed"]),
        ambient=AmbientSpec(rec["ambient_class"], rec["ambient_seed"], rec["ambient_params"]),
        ambient_snr_db=rec["ambient_snr_db"],
        descriptor=np.asarray(rec["descriptor"]),
        seed=rec["seed"],
    )


@dataclass
class Manifest:
    """Corpus metadata: scenes with splits plus one record per clip."""

    sample_rate: int
    root_seed: int
    scenes: dict            # scene_id -> SceneSpec
    scene_splits: dict      # scene_id -> "train" | "test"
    clips: list             # clip record dicts
    version: int = MANIFEST_SCHEMA_VERSION

    def validate(self) -> None:
        train = {s for s, sp in self.scene_splits.items() if sp == "train"}
        test = {s for s, sp in self.scene_splits.items() if sp == "test"}
        for rec in self.clips:
            if rec["scene_id"] not in self.scenes:
                raise ValueError(f"clip references unknown scene {rec['scene_id']}")
            split = rec.get("split")
            if split == "train":
                train.add(rec["scene_id"])
            elif split == "test":
                test.add(rec["scene_id"])
        overlap = train & test
        if overlap:
            raise ValueError(f"train/test scene overlap: {sorted(overlap)}")

    def clip_records(self, split: str | None = None) -> list[dict]:
        if split is None:
            return list(self.clips)
        return [r for r in self.clips if self.scene_splits[r["scene_id"]] == split]


def write_manifest(path: str | Path, manifest: Manifest) -> None:
    manifest.validate()
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps({
            "type": "header",
            "schema_version": manifest.version,
            "sample_rate": manifest.sample_rate,
            "root_seed": manifest.root_seed,
        }) + "\n")
        for scene_id, scene in manifest.scenes.items():
            fh.write(json.dumps(_scene_to_record(scene, manifest.scene_splits[scene_id])) + "\n")
        for rec in manifest.clips:
            fh.write(json.dumps({"type": "clip", **rec}) + "\n")


def load_manifest(path: str | Path) -> Manifest:
    path = Path(path)
    scenes, splits, clips = {}, {}, []
    header = None
    with path.open("r", encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            if rec["type"] == "header":
                header = rec
                if rec["schema_version"] != MANIFEST_SCHEMA_VERSION:
                    raise ValueError(
                        f"manifest schema {rec['schema_version']} != "
                        f"supported {MANIFEST_SCHEMA_VERSION}"
                    )
            elif rec["type"] == "scene":
                scenes[rec["scene_id"]] = _scene_from_record(rec)
                splits[rec["scene_id"]] = rec["split"]
            elif rec["type"] == "clip":
                clips.append({k: v for k, v in rec.items() if k != "type"})
            else:
                raise ValueError(f"unknown manifest record type {rec['type']!r}")
    if header is None:
        raise ValueError("manifest missing header record")
    manifest = Manifest(
        sample_rate=header["sample_rate"],
        root_seed=header["root_seed"],
        scenes=scenes,
        scene_splits=splits,
        clips=clips,
        version=header["schema_version"],
    )
    manifest.validate()
    return manifest


# --- on-disk corpus -------------------------------------------------------


def _write_clip(clips_dir: Path, clip: Clip) -> dict:
    """Write mixture-defining stems as int16 WAVs.

    The mixture is stored as the integer sum of the quantized stems so
    mixture == speech_reverbed + ambient holds exactly after reload.
    """
    reverbed = quantize_int16(clip.components["speech_reverbed"].samples)
    ambient = quantize_int16(clip.components["ambient"].samples)
    clean = quantize_int16(clip.components["speech_clean"].samples)
    mix = (reverbed.astype(np.int32) + ambient.astype(np.int32)).astype(np.int16)
    sr = clip.waveform.sample_rate
    base = clip.clip_id
    write_wav_int16(clips_dir / f"{base}.wav", mix, sr)
    write_wav_int16(clips_dir / f"{base}.reverb.wav", reverbed, sr)
    write_wav_int16(clips_dir / f"{base}.ambient.wav", ambient, sr)
    write_wav_int16(clips_dir / f"{base}.clean.wav", clean, sr)
    return {"file": f"clips/{base}.wav"}


def load_clip(corpus_dir: str | Path, rec: dict) -> Clip:
    corpus_dir = Path(corpus_dir)
    base = corpus_dir / rec["file"]
    mix, sr = read_wav_int16(base)
    reverbed, _ = read_wav_int16(base.with_suffix(".reverb.wav"))
    ambient, _ = read_wav_int16(base.with_suffix(".ambient.wav"))
    clean, _ = read_wav_int16(base.with_suffix(".clean.wav"))
    return Clip(
        waveform=Waveform(dequantize_int16(mix), sr),
        scene_id=rec["scene_id"],
        session_id=rec["session_id"],
        t_start=rec["t_start"],
        components={
            "speech_clean": Waveform(dequantize_int16(clean), sr),
            "speech_reverbed": Waveform(dequantize_int16(reverbed), sr),
            "ambient": Waveform(dequantize_int16(ambient), sr),
        },
    )


def build_corpus(
    out_dir: str | Path,
    scenes: list[SceneSpec],
    speech_sources: list[Waveform],
    seed: int,
    sessions_per_scene: int = 4,
    session_seconds: float = 20.48,
    test_fraction: float = 0.2,
    scene_splits: dict | None = None,
) -> Manifest:
    """Render scenes to disk and write manifest.jsonl. Returns the manifest."""
    out_dir = Path(out_dir)
    clips_dir = out_dir / "clips"
    clips_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    if scene_splits is not None:
        splits = dict(scene_splits)
    else:
        n_test = max(1, int(round(test_fraction * len(scenes)))) if len(scenes) > 1 else 0
        order = rng.permutation(len(scenes))
        test_idx = set(order[:n_test].tolist())
        splits = {
            scene.scene_id: ("test" if i in test_idx else "train")
            for i, scene in enumerate(scenes)
        }

    clip_records = []
    for scene in scenes:
        for s in range(sessions_per_scene):
            session_id = f"{scene.scene_id}_s{s:02d}"
            srcs_idx = rng.choice(
                len(speech_sources), size=min(4, len(speech_sources)), replace=False
            )
            srcs = [speech_sources[i] for i in srcs_idx]
            session_clips = render_session(
                scene, srcs, session_seconds, rng, session_id=session_id
            )
            for clip in session_clips:
                rec = _write_clip(clips_dir, clip)
                rec.update(
                    {
                        "clip_id": clip.clip_id,
                        "scene_id": scene.scene_id,
                        "session_id": session_id,
                        "t_start": clip.t_start,
                        "rt60": scene.rir.rt60,
                        "ambient_class": scene.ambient.texture_class,
                        "speech_source_id": ",".join(str(i) for i in sorted(srcs_idx)),
                        "split": splits[scene.scene_id],
                    }
                )
                clip_records.append(rec)
    manifest = Manifest(
        sample_rate=DEFAULT_SAMPLE_RATE,
        root_seed=seed,
        scenes={s.scene_id: s for s in scenes},
        scene_splits=splits,
        clips=clip_records,
    )
    write_manifest(out_dir / "manifest.jsonl", manifest)
    return manifest


def collect_mels(
    corpus_dir: str | Path,
    manifest: Manifest,
    split: str | None = None,
    include_clean_fraction: float = 0.25,
    seed: int = 0,
):
    """Log-mels of corpus clips for model training.

    A fraction of clips contributes its clean-speech stem's mel too, so the
    autoencoder also covers the enhanced-input distribution it must encode.
    Returns (mels float32 (N, T, F), ambient-class labels (N,)).
    """
    corpus_dir = Path(corpus_dir)
    rng = np.random.default_rng(seed)
    mels, labels = [], []
    for rec in manifest.clip_records(split):
        clip = load_clip(corpus_dir, rec)
        label = TEXTURE_CLASSES.index(rec["ambient_class"])
        mels.append(stft_mel(clip.waveform).values.astype(np.float32))
        labels.append(label)
        if rng.random() < include_clean_fraction:
            mels.append(stft_mel(clip.components["speech_clean"]).values.astype(np.float32))
            labels.append(TEXTURE_CLASSES.index("none"))
    return np.stack(mels), np.asarray(labels, dtype=np.int64)
