import numpy as np
import pytest

from soundscaper.audio import Waveform
from soundscaper.corpus import Clip, make_scene, render_session
from soundscaper.pretext import (
    PretextDataset,
    add_input_noise,
    build_pretext_index,
    enhance_oracle,
    sample_pair,
    vad_gate,
)


def _clip_with_speech(speech, sr=16000):
    wf = Waveform(speech, sr)
    return Clip(wf, "s", "sess", 0.0, components={
        "speech_clean": wf,
        "speech_reverbed": wf,
        "ambient": Waveform(np.zeros_like(speech), sr),
    })


def test_vad_rejects_silence():
    assert not vad_gate(_clip_with_speech(np.zeros(40960)))


def test_vad_accepts_full_speech():
    t = np.arange(40960) / 16000
    tone = 0.5 * np.sin(2 * np.pi * 200 * t)
    assert vad_gate(_clip_with_speech(tone))


def test_vad_threshold_monotone(speech_sources):
    clip = _clip_with_speech(speech_sources[0].samples[:40960])
    decisions = [vad_gate(clip, min_active_frac=f) for f in (0.1, 0.3, 0.5, 0.7, 0.9)]
    # once false, raising the requirement can never flip it back to true
    for a, b in zip(decisions, decisions[1:]):
        assert a or not b


def test_enhance_oracle_returns_clean_stem(passthrough_clips):
    for clip in passthrough_clips:
        np.testing.assert_array_equal(
            enhance_oracle(clip).samples, clip.components["speech_clean"].samples
        )
        # pass-through scene: enhanced equals the mixture itself
        np.testing.assert_allclose(
            enhance_oracle(clip).samples, clip.waveform.samples, atol=1e-12
        )


def test_enhance_oracle_requires_stems():
    bare = Clip(Waveform(np.zeros(100), 16000), "s", "x", 0.0, components={})
    with pytest.raises(ValueError, match="stems"):
        enhance_oracle(bare)


def test_enhance_oracle_uncorrelated_with_ambient(speech_sources):
    scene = make_scene("amb", rt60=0.3, texture_class="rain", ambient_snr_db=2.0, seed=4)
    clips = render_session(scene, speech_sources[:3], 10.24, np.random.default_rng(1), "amb_s")
    for clip in clips:
        if not vad_gate(clip):
            continue
        enhanced = enhance_oracle(clip).samples
        ambient = clip.components["ambient"].samples
        denom = np.linalg.norm(enhanced) * np.linalg.norm(ambient)
        corr = abs(float(np.dot(enhanced, ambient))) / max(denom, 1e-12)
        assert corr < 0.05


def test_add_noise_sigma_zero_is_identity(speech_clip):
    out = add_input_noise(speech_clip, 0.0, np.random.default_rng(0))
    assert out is speech_clip


def test_add_noise_snr_level():
    t = np.arange(160000) / 16000
    unit_rms = Waveform(np.sqrt(2) * 0.5 * np.sin(2 * np.pi * 100 * t) / 0.5, 16000)
    x = Waveform(unit_rms.samples / unit_rms.rms() * 0.2, 16000)  # rms 0.2, peak safe
    sigma = 0.002  # 40 dB below rms
    noisy = add_input_noise(x, sigma, np.random.default_rng(3))
    noise = noisy.samples - x.samples
    snr = 20 * np.log10(x.rms() / np.sqrt(np.mean(noise**2)))
    assert snr == pytest.approx(40.0, abs=1.0)


def test_add_noise_deterministic(speech_clip):
    a = add_input_noise(speech_clip, 0.01, np.random.default_rng(9))
    b = add_input_noise(speech_clip, 0.01, np.random.default_rng(9))
    np.testing.assert_array_equal(a.samples, b.samples)


def test_add_noise_rejects_negative_sigma(speech_clip):
    with pytest.raises(ValueError):
        add_input_noise(speech_clip, -0.1, np.random.default_rng(0))


@pytest.fixture(scope="module")
def session_clips(speech_sources):
    scene = make_scene("pair", rt60=0.4, texture_class="wind", ambient_snr_db=12.0, seed=6)
    return scene, render_session(scene, speech_sources[:4], 20.48,
                                 np.random.default_rng(2), "pair_s")


def test_sample_pair_contracts(session_clips):
    scene, clips = session_clips
    rng = np.random.default_rng(0)
    ex = sample_pair(clips, scene.descriptor, rng, sigma=0.01, drop_rate=0.1)
    assert ex.input_enhanced.values.shape == (256, 64)
    assert ex.target.values.shape == (256, 64)
    assert ex.target_clip_id != ex.cond_clip_id
    assert len(ex.cond_audio) == 40960


def test_sample_pair_needs_two_gated_clips(speech_sources):
    scene = make_scene("few", rt60=0.2, texture_class="none", ambient_snr_db=20.0, seed=8)
    clips = render_session(scene, speech_sources[:2], 10.24, np.random.default_rng(3), "few_s")
    with pytest.raises(ValueError, match=">= 2"):
        sample_pair(clips[:1], scene.descriptor, np.random.default_rng(0))


def test_pair_ordering_uniform(session_clips):
    scene, clips = session_clips
    from soundscaper.pretext import eligible_clips
    two = eligible_clips(clips)[:2]
    rng = np.random.default_rng(5)
    first_counts = {two[0].clip_id: 0, two[1].clip_id: 0}
    for _ in range(1000):
        ex = sample_pair(two, scene.descriptor, rng)
        first_counts[ex.target_clip_id] += 1
    frac = first_counts[two[0].clip_id] / 1000
    assert 0.45 <= frac <= 0.55


def test_drop_rate_statistics(session_clips):
    scene, clips = session_clips
    rng = np.random.default_rng(11)
    drops = sum(
        sample_pair(clips, scene.descriptor, rng, drop_rate=0.10).drop_cond
        for _ in range(2000)
    )
    assert 0.08 <= drops / 2000 <= 0.12


def test_drop_rate_zero(session_clips):
    scene, clips = session_clips
    rng = np.random.default_rng(12)
    assert not any(
        sample_pair(clips, scene.descriptor, rng, drop_rate=0.0).drop_cond
        for _ in range(200)
    )


def test_input_depends_only_on_target_clip(session_clips):
    """Conditioning must never leak into the model input."""
    scene, clips = session_clips
    from soundscaper.pretext import eligible_clips
    usable = eligible_clips(clips)
    target = usable[0]
    rng_state = np.random.default_rng(77)
    noisy_a = add_input_noise(enhance_oracle(target), 0.01, np.random.default_rng(77))
    noisy_b = add_input_noise(enhance_oracle(target), 0.01, np.random.default_rng(77))
    np.testing.assert_array_equal(noisy_a.samples, noisy_b.samples)


def test_de_enhancement_gap_exists(small_corpus):
    """Reverberant or ambient scenes: input mel must differ from target mel."""
    from soundscaper.corpus import load_clip
    from soundscaper.dsp import stft_mel

    corpus_dir, manifest = small_corpus
    checked = 0
    for rec in manifest.clips:
        scene = manifest.scenes[rec["scene_id"]]
        if scene.rir.rt60 <= 0.2 and scene.ambient.texture_class == "none":
            continue
        clip = load_clip(corpus_dir, rec)
        if not vad_gate(clip):
            continue
        inp = stft_mel(enhance_oracle(clip)).values
        tgt = stft_mel(clip.waveform).values
        assert np.mean(np.abs(tgt - inp)) > 0.0
        checked += 1
        if checked >= 25:
            break
    assert checked >= 10


def test_index_round_trip_and_dataset(small_corpus, tmp_path):
    corpus_dir, manifest = small_corpus
    index = build_pretext_index(corpus_dir, tmp_path / "pt", sigma=0.02,
                                drop_rate=0.2, seed=1)
    assert index["sessions"]
    ds = PretextDataset(tmp_path / "pt")
    assert ds.sigma == 0.02
    rng = np.random.default_rng(4)
    ex = ds.sample(rng)
    assert ex.input_enhanced.values.shape == (256, 64)
    session_of = {r["clip_id"]: r["session_id"] for r in manifest.clips}
    assert session_of[ex.target_clip_id] == session_of[ex.cond_clip_id]
    assert ex.target_clip_id != ex.cond_clip_id
