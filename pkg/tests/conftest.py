import numpy as np
import pytest

from soundscaper.audio import Waveform
from soundscaper.corpus import build_corpus, generate_scene, make_scene
from soundscaper.speech import generate_utterance


@pytest.fixture(scope="session")
def speech_sources():
    rng = np.random.default_rng(101)
    return [generate_utterance(rng, rng.uniform(4.0, 7.0)) for _ in range(8)]


@pytest.fixture(scope="session")
def speech_clip(speech_sources):
    return Waveform(speech_sources[0].samples[:40960], 16000)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory, speech_sources):
    """Six random scenes x two sessions (~96 clips), shared across tests."""
    out = tmp_path_factory.mktemp("corpus")
    scenes = [generate_scene(4200 + i) for i in range(6)]
    manifest = build_corpus(out, scenes, speech_sources, seed=17, sessions_per_scene=2)
    return out, manifest


@pytest.fixture(scope="session")
def passthrough_clips(speech_sources):
    """Clips rendered in a scene that changes nothing (dry, no ambient)."""
    scene = make_scene("pass", rt60=0.05, texture_class="none",
                       ambient_snr_db=20.0, seed=3, direct_ratio=1.0)
    # direct_ratio 1.0 means the impulse response is a unit impulse
    from soundscaper.corpus import render_session
    rng = np.random.default_rng(5)
    return render_session(scene, speech_sources[:3], 10.24, rng, "pass_s00")
