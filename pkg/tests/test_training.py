"""Training-loop machinery: overfit oracle, checkpoint resume, dropout rate."""
import numpy as np
import pytest
import torch

from soundscaper.corpus import collect_mels
from soundscaper.diffusion import (
    TrainConfig,
    load_stylizer,
    make_schedule,
    train_diffusion,
    training_loss,
)
from soundscaper.pretext import PretextDataset, build_pretext_index
from soundscaper.unet import EpsPredictor, UnetConfig
from soundscaper.vae import VaeConfig, train_vae

TINY = dict(
    epochs=2,
    steps_per_epoch=3,
    batch_size=4,
    unet_channels=(16, 16, 16, 16),
    n_sample_steps=20,
)


@pytest.fixture(scope="module")
def tiny_setup(small_corpus, tmp_path_factory):
    corpus_dir, manifest = small_corpus
    work = tmp_path_factory.mktemp("train")
    build_pretext_index(corpus_dir, work / "pretext", seed=0)
    dataset = PretextDataset(work / "pretext")
    mels, _ = collect_mels(corpus_dir, manifest, seed=1)
    mels = np.concatenate([mels, mels])  # tiny fixture corpus, just plumbing
    vae, _ = train_vae(mels, work / "vae.pt", VaeConfig(width=16), epochs=1, seed=0)
    return work, dataset, vae


def test_overfit_eight_fixed_examples():
    torch.manual_seed(0)
    sched = make_schedule()
    net = EpsPredictor(UnetConfig(channels=(16, 16, 16, 16)))
    gen = torch.Generator().manual_seed(1)
    z0 = torch.randn(8, 8, 64, 16, generator=gen)
    z_e = torch.randn(8, 8, 64, 16, generator=gen)
    ctx = torch.randn(8, 2, 128, generator=gen)
    t = torch.randint(1, 1001, (8,), generator=gen)
    eps = torch.randn(8, 8, 64, 16, generator=gen)
    opt = torch.optim.AdamW(net.parameters(), lr=1e-3, betas=(0.95, 0.999),
                            eps=1e-6, weight_decay=1e-3)
    final = None
    for step in range(2000):
        loss = training_loss(net, z0, z_e, ctx, t, eps, sched)
        opt.zero_grad()
        loss.backward()
        opt.step()
        final = float(loss.detach())
        if final < 0.05:
            break
    assert final < 0.05, f"loss {final} after {step + 1} steps"


def test_train_diffusion_runs_and_tracks_drop_rate(tiny_setup):
    work, dataset, vae = tiny_setup
    _, _, history = train_diffusion(
        dataset, vae, "deadbeef", work / "d.pt",
        TrainConfig(**TINY), seed=0,
    )
    assert len(history["epoch_mean_loss"]) == 2
    assert all(np.isfinite(v) for v in history["epoch_mean_loss"])
    assert all(0.0 <= r <= 1.0 for r in history["drop_rate"])


def test_checkpoint_resume_reproduces_loss(tiny_setup):
    work, dataset, vae = tiny_setup
    cfg1 = TrainConfig(**{**TINY, "epochs": 1})
    train_diffusion(dataset, vae, "cafe", work / "e1.pt", cfg1, seed=7)

    cfg2 = TrainConfig(**TINY)
    _, _, resumed = train_diffusion(
        dataset, vae, "cafe", work / "e2.pt", cfg2, seed=7,
        resume_from=work / "e1.pt",
    )
    _, _, straight = train_diffusion(
        dataset, vae, "cafe", work / "e3.pt", cfg2, seed=7,
    )
    assert resumed["epoch_mean_loss"][1] == pytest.approx(
        straight["epoch_mean_loss"][1], abs=1e-6
    )


def test_checkpoint_hash_guard(tiny_setup, tmp_path):
    work, dataset, vae = tiny_setup
    ckpt = work / "d.pt"
    if not ckpt.exists():
        train_diffusion(dataset, vae, "deadbeef", ckpt,
                        TrainConfig(**{**TINY, "epochs": 1}), seed=0)
    other = tmp_path / "other_vae.pt"
    other.write_bytes(b"something else entirely")
    with pytest.raises(ValueError, match="hash"):
        load_stylizer(ckpt, vae_path=other)
    bundle = load_stylizer(ckpt)  # no verification when vae path omitted
    assert bundle.sched.n_steps == 1000
