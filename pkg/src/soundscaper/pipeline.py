"""End-to-end stylization: noise the input, encode, sample, decode, invert."""
from __future__ import annotations

import logging

import numpy as np
import torch

from .audio import Waveform
from .conditioning import CLIP_SAMPLES
from .diffusion import StylizerBundle, sample
from .dsp import DEFAULT_FRAMES, MelSpec, mel_to_waveform, stft_mel
from .pretext import add_input_noise
from .vae import MelVae

log = logging.getLogger(__name__)


def fit_clip_length(wf: Waveform) -> Waveform:
    """Pad or crop to the model's fixed 2.56 s clip length."""
    if len(wf) == CLIP_SAMPLES:
        return wf
    log.warning("input length %d != %d samples; padding/cropping", len(wf), CLIP_SAMPLES)
    samples = np.zeros(CLIP_SAMPLES)
    take = min(len(wf), CLIP_SAMPLES)
    samples[:take] = wf.samples[:take]
    return Waveform(samples, wf.sample_rate)


def stylize_batch(
    inputs: list[Waveform],
    bundle: StylizerBundle,
    vae: MelVae,
    cond_audios: list[Waveform | None] | None = None,
    cond_descriptors: list[np.ndarray | None] | None = None,
    lam: float | None = None,
    seed: int = 0,
    phase_iterations: int = 60,
    unconditional: bool = False,
) -> list[Waveform]:
    """Restyle a batch of clips in one reverse-diffusion run.

    Deterministic for fixed (inputs, conditioning, seed, lam, batch order).
    `unconditional=True` is the evaluation-only no-conditioning mode.
    """
    n = len(inputs)
    cond_audios = cond_audios if cond_audios is not None else [None] * n
    cond_descriptors = cond_descriptors if cond_descriptors is not None else [None] * n
    if not unconditional:
        for i in range(n):
            if cond_audios[i] is None and cond_descriptors[i] is None:
                raise ValueError(
                    "conditioning required for every clip: pass cond audio and/or "
                    "descriptor (unconditional generation is an evaluation-only mode)"
                )
    lam = bundle.guidance if lam is None else lam

    rng = np.random.default_rng(seed)
    mels = []
    for wf in inputs:
        noisy = add_input_noise(fit_clip_length(wf), bundle.input_sigma, rng)
        mels.append(stft_mel(noisy).values.astype(np.float32))
    mel_t = torch.from_numpy(np.stack(mels))

    with torch.no_grad():
        z_mean, _ = vae.encode_t(mel_t)
        z_e = z_mean * bundle.latent_scale

        tokens = []
        for i in range(n):
            if unconditional:
                emb = bundle.cond.fuse(None, None, drop=True)
            else:
                a_emb = (
                    bundle.cond.encode_cond_audio(cond_audios[i])
                    if cond_audios[i] is not None
                    else None
                )
                v_emb = (
                    bundle.cond.encode_cond_visual(cond_descriptors[i])
                    if cond_descriptors[i] is not None
                    else None
                )
                emb = bundle.cond.fuse(a_emb, v_emb, drop=False)
            tokens.append(torch.from_numpy(emb.tokens))
        ctx = torch.stack(tokens)
        uncond = bundle.cond.null_tokens_t(n)

        gen = torch.Generator().manual_seed(seed)
        z = sample(bundle.unet, z_e, ctx, uncond, bundle.sched, lam, gen)
        mel_out = vae.decode_t(z / bundle.latent_scale).numpy().astype(np.float64)

    p = DEFAULT_FRAMES
    outs = []
    for i in range(n):
        spec = MelSpec(mel_out[i], p.hop, p.n_fft, p.n_mels, p.sample_rate)
        outs.append(mel_to_waveform(spec, iterations=phase_iterations))
    return outs


def stylize_waveform(
    input_wf: Waveform,
    bundle: StylizerBundle,
    vae: MelVae,
    cond_audio: Waveform | None = None,
    cond_descriptor: np.ndarray | None = None,
    lam: float | None = None,
    seed: int = 0,
    phase_iterations: int = 60,
) -> Waveform:
    """Restyle one clean input clip to match the conditioning example's scene.

    At least one conditioning modality is required; a missing modality's
    token falls back to the learned null token (uni-modal operation).
    Deterministic for fixed (input, conditioning, seed, lam).
    """
    return stylize_batch(
        [input_wf],
        bundle,
        vae,
        cond_audios=[cond_audio],
        cond_descriptors=[cond_descriptor],
        lam=lam,
        seed=seed,
        phase_iterations=phase_iterations,
    )[0]
