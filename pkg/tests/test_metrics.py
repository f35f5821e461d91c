import numpy as np
import pytest
import torch

from soundscaper.audio import Waveform
from soundscaper.corpus import Clip, collect_mels, load_clip, make_scene, render_session
from soundscaper.metrics import (
    EvalReport,
    MS_SNR_CAP_DB,
    SceneClassifier,
    ambient_band_distance,
    band_energy_db,
    bootstrap_ci,
    mel_mse,
    ms_snr,
    rte,
    scene_kl,
    separate_and_remix_baseline,
    train_scene_classifier,
)
from soundscaper.corpus import measure_snr_db
from soundscaper.reverb import RirSpec, UnmeasurableDecayError, convolve_rir, render_rir

SR = 16000


def _decaying_clip(rt60, seed=0, n=40960):
    rng = np.random.default_rng(seed)
    burst = np.r_[rng.standard_normal(8000) * 0.4, np.zeros(n - 8000)]
    h = render_rir(RirSpec(rt60, 0.3, 1.3 * rt60 + 0.05, seed + 1))
    return convolve_rir(Waveform(burst, SR), h)


def test_rte_identity_zero():
    clip = _decaying_clip(0.5)
    assert rte(clip, clip) == 0.0


def test_rte_known_difference():
    # estimates near 0.8 and 0.4 -> squared error ~ 0.16 (0.12..0.20 with
    # a +-10% estimator allowance)
    gen = _decaying_clip(0.8, seed=3)
    ref = _decaying_clip(0.4, seed=4)
    val = rte(gen, ref)
    assert 0.10 <= val <= 0.22


def test_rte_arithmetic_against_estimates():
    from soundscaper.reverb import rt60_of_decay

    gen = _decaying_clip(0.7, seed=5)
    ref = _decaying_clip(0.3, seed=6)
    expected = (rt60_of_decay(gen) - rt60_of_decay(ref)) ** 2
    assert rte(gen, ref) == pytest.approx(expected, rel=1e-12)


def test_rte_symmetric():
    gen = _decaying_clip(0.6, seed=7)
    ref = _decaying_clip(0.2, seed=8)
    assert rte(gen, ref) == pytest.approx(rte(ref, gen), rel=1e-12)


def test_rte_unmeasurable_raises():
    silent = Waveform(np.zeros(40960), SR)
    with pytest.raises(UnmeasurableDecayError):
        rte(silent, _decaying_clip(0.5))


def test_mel_mse_identity_and_symmetry(speech_clip):
    assert mel_mse(speech_clip, speech_clip) == 0.0
    other = _decaying_clip(0.4, seed=9)
    assert mel_mse(speech_clip, other) == pytest.approx(
        mel_mse(other, speech_clip), rel=1e-12
    )


def test_mel_mse_length_mismatch():
    with pytest.raises(ValueError):
        mel_mse(Waveform(np.zeros(1000), SR), Waveform(np.zeros(2000), SR))


def test_mel_mse_silence_vs_tone_closed_form(speech_clip):
    from soundscaper.dsp import stft_mel, DEFAULT_FRAMES, mel_center_freqs

    f0 = mel_center_freqs(DEFAULT_FRAMES)[30]
    t = np.arange(40960) / SR
    tone = Waveform(0.4 * np.sin(2 * np.pi * f0 * t), SR)
    silence = Waveform(np.zeros(40960), SR)
    floor = np.log(DEFAULT_FRAMES.log_floor)
    expected = float(np.mean((stft_mel(tone).values - floor) ** 2))
    assert mel_mse(tone, silence) == pytest.approx(expected, rel=1e-12)


def test_ms_snr_identity_capped(speech_clip):
    assert ms_snr(speech_clip, speech_clip) == MS_SNR_CAP_DB


def test_ms_snr_zero_gen_is_zero_db(speech_clip):
    zero = Waveform(np.zeros(len(speech_clip)), SR)
    assert ms_snr(zero, speech_clip) == pytest.approx(0.0, abs=1e-9)


def test_ms_snr_zero_reference_rejected():
    zero = Waveform(np.zeros(4000), SR)
    with pytest.raises(ValueError, match="reference"):
        ms_snr(zero, zero)


def test_ms_snr_proportional_error_level(speech_clip):
    # gen = a * ref puts the spectral error at exactly (1-a) of the signal;
    # a = 1 - 10^(-1/2) makes that error -10 dB relative
    a = 1.0 - 10 ** (-0.5)
    gen = Waveform(speech_clip.samples * a, SR)
    assert ms_snr(gen, speech_clip) == pytest.approx(10.0, abs=0.5)


def test_band_energy_orders_rain_vs_silence():
    rng = np.random.default_rng(4)
    from soundscaper.textures import AmbientSpec, default_params, render_ambient

    rain = render_ambient(AmbientSpec("rain", 3, default_params("rain", rng)), 2.56, SR)
    quiet = 0.001 * rng.standard_normal(40960)
    assert band_energy_db(Waveform(rain, SR), 2000, 6000) > band_energy_db(
        Waveform(quiet, SR), 2000, 6000
    )


def test_ambient_band_distance_zero_on_identity(speech_clip):
    assert ambient_band_distance(speech_clip, speech_clip) == 0.0


class FixedPosterior(SceneClassifier):
    def __init__(self, mapping):
        super().__init__()
        self.trained.fill_(True)
        self.mapping = mapping
        self.i = 0

    def posterior(self, wf):
        out = self.mapping[self.i % len(self.mapping)]
        self.i += 1
        return np.asarray(out, dtype=np.float64)


def test_scene_kl_identical_sets_zero(speech_clip):
    clf = FixedPosterior([[0.2, 0.2, 0.2, 0.2, 0.2]])
    assert scene_kl([speech_clip], [speech_clip], clf) == pytest.approx(0.0, abs=1e-12)


def test_scene_kl_disjoint_onehot_large(speech_clip):
    clf = FixedPosterior([[1, 0, 0, 0, 0], [0, 1, 0, 0, 0]])
    # ref sees the first posterior, gen the second
    val = scene_kl([speech_clip], [speech_clip], clf)
    assert val > 5.0


def test_scene_kl_requires_trained_classifier(speech_clip):
    clf = SceneClassifier()
    with pytest.raises(ValueError, match="trained"):
        scene_kl([speech_clip], [speech_clip], clf)


def test_scene_classifier_learns_textures(tmp_path, speech_sources):
    from soundscaper.corpus import build_corpus
    from soundscaper.textures import TEXTURE_CLASSES

    scenes = [
        make_scene(f"{cls}_{k}", rt60=0.3 + 0.1 * k, texture_class=cls,
                   ambient_snr_db=8.0, seed=10 * k + i)
        for i, cls in enumerate(TEXTURE_CLASSES)
        for k in range(2)
    ]
    manifest = build_corpus(tmp_path, scenes, speech_sources, seed=3,
                            sessions_per_scene=2)
    mels, labels = collect_mels(tmp_path, manifest, include_clean_fraction=0.0)
    clf, acc = train_scene_classifier(mels, labels, epochs=12, seed=0)
    assert acc >= 0.9


def test_separate_and_remix_hits_target_snr(small_corpus, speech_clip):
    corpus_dir, manifest = small_corpus
    rec = next(
        r for r in manifest.clips
        if manifest.scenes[r["scene_id"]].ambient.texture_class != "none"
    )
    cond = load_clip(corpus_dir, rec)
    out, record = separate_and_remix_baseline(speech_clip, cond, 8.0)
    assert record["flag"] is None
    assert record["measured_snr_db"] == pytest.approx(8.0, abs=0.5)
    mixed_ambient = out.samples - speech_clip.samples
    snr = measure_snr_db(speech_clip.samples, mixed_ambient,
                         mask_source=speech_clip.samples)
    assert snr == pytest.approx(8.0, abs=0.5)


def test_separate_and_remix_silent_ambient_flagged(speech_clip, passthrough_clips):
    out, record = separate_and_remix_baseline(speech_clip, passthrough_clips[0], 8.0)
    assert record["flag"] is not None
    np.testing.assert_array_equal(out.samples, speech_clip.samples)


def test_separate_and_remix_snr_sweep_monotone(small_corpus, speech_clip):
    corpus_dir, manifest = small_corpus
    rec = next(
        r for r in manifest.clips
        if manifest.scenes[r["scene_id"]].ambient.texture_class != "none"
    )
    cond = load_clip(corpus_dir, rec)
    energies = []
    for snr in (5.0, 8.0, 10.0):
        out, _ = separate_and_remix_baseline(speech_clip, cond, snr)
        ambient = out.samples - speech_clip.samples
        energies.append(float(np.sum(ambient**2)))
    assert energies[0] > energies[1] > energies[2] > 0


def test_separate_and_remix_infinite_snr_passthrough(small_corpus, speech_clip):
    corpus_dir, manifest = small_corpus
    cond = load_clip(corpus_dir, manifest.clips[0])
    out, record = separate_and_remix_baseline(speech_clip, cond, float("inf"))
    np.testing.assert_array_equal(out.samples, speech_clip.samples)
    assert "infinite" in record["flag"]


def test_bootstrap_ci_shrinks_with_n():
    rng = np.random.default_rng(0)
    big = rng.normal(size=400)
    lo1, hi1 = bootstrap_ci(big[:100], seed=1)
    lo2, hi2 = bootstrap_ci(big, seed=1)
    assert (hi2 - lo2) < (hi1 - lo1)


def test_report_round_trip_and_exclusions(tmp_path):
    report = EvalReport()
    report.add("a", rte=0.1, mel_mse=1.0)
    report.add("b", rte=None, rte_flag="unmeasurable: no decay", mel_mse=2.0)
    agg = report.aggregate()
    assert agg["rte"]["n"] == 1
    assert agg["exclusions"]["rte"] == 1
    assert agg["mel_mse"]["mean"] == pytest.approx(1.5)
    path = tmp_path / "r.jsonl"
    report.write(path)
    back = EvalReport.read(path)
    assert back.records == report.records
    assert "rte" in back.header["rte_units"]
