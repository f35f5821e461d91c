"""Mel-spectrogram VAE providing the diffusion latent space.

Compresses (T, F) log-mels to a (T/r, F/r, d) latent grid with r=4, d=8.
Residual conv blocks, trained from scratch on the synthetic corpus.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .dsp import DEFAULT_FRAMES, FrameParams, MelSpec

log = logging.getLogger(__name__)

VAE_FORMAT_VERSION = 1
LOGVAR_MIN, LOGVAR_MAX = -30.0, 20.0


@dataclass(frozen=True)
class VaeConfig:
    compression: int = 4
    latent_channels: int = 8
    width: int = 64
    # Normalization constants; None means "derive from the training mels".
    mel_shift: float | None = None
    mel_scale: float | None = None
    beta_kl: float = 1e-4


@dataclass(frozen=True)
class Latent:
    """Latent grid, shape (T/r, F/r, d)."""

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32)
        if values.ndim != 3:
            raise ValueError(f"latent must be (T/r, F/r, d), got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("latent contains non-finite entries")
        object.__setattr__(self, "values", values)

    def to_torch(self) -> torch.Tensor:
        # channel-first (d, T/r, F/r)
        return torch.from_numpy(self.values).permute(2, 0, 1).contiguous()

    @staticmethod
    def from_torch(t: torch.Tensor) -> "Latent":
        return Latent(t.detach().permute(1, 2, 0).contiguous().numpy())


class ResBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, channels)
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm2 = nn.GroupNorm(8, channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        h = self.conv1(torch.nn.functional.silu(self.norm1(x)))
        h = self.conv2(torch.nn.functional.silu(self.norm2(h)))
        return x + h


class MelVae(nn.Module):
    """All convolutions run at the latent resolution: the r=4 spatial
    rearrangement happens losslessly via pixel (un)shuffle, which keeps the
    per-bin detail path cheap enough for CPU training."""

    def __init__(self, config: VaeConfig = VaeConfig()):
        super().__init__()
        if config.compression != 4:
            raise ValueError("architecture is built for compression r=4")
        if config.mel_shift is None or config.mel_scale is None:
            config = VaeConfig(**{**asdict(config), "mel_shift": 0.0, "mel_scale": 1.0})
        self.config = config
        w = config.width
        d = config.latent_channels
        r = config.compression
        self.encoder = nn.Sequential(
            nn.PixelUnshuffle(r),                     # (1,T,F) -> (16, T/4, F/4)
            nn.Conv2d(r * r, w, 3, padding=1),
            ResBlock(w),
            ResBlock(w),
            nn.GroupNorm(8, w),
            nn.SiLU(),
            nn.Conv2d(w, 2 * d, 3, padding=1),        # mean || logvar
        )
        self.decoder = nn.Sequential(
            nn.Conv2d(d, w, 3, padding=1),
            ResBlock(w),
            ResBlock(w),
            ResBlock(w),
            nn.GroupNorm(8, w),
            nn.SiLU(),
            nn.Conv2d(w, r * r, 3, padding=1),
            nn.PixelShuffle(r),                       # back to (1, T, F)
        )

    # --- tensor paths (batched, normalized domain) ---

    def normalize(self, mel: torch.Tensor) -> torch.Tensor:
        return (mel - self.config.mel_shift) / self.config.mel_scale

    def denormalize(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.config.mel_scale + self.config.mel_shift

    def encode_t(self, mel: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """mel (B, T, F) in nats -> mean, logvar (B, d, T/4, F/4)."""
        if mel.shape[-2] % 4 or mel.shape[-1] % 4:
            raise ValueError(f"mel shape {tuple(mel.shape[-2:])} not divisible by r=4")
        x = self.normalize(mel).unsqueeze(1)
        h = self.encoder(x)
        mean, logvar = h.chunk(2, dim=1)
        return mean, logvar.clamp(LOGVAR_MIN, LOGVAR_MAX)

    def decode_t(self, z: torch.Tensor) -> torch.Tensor:
        """latent (B, d, T/4, F/4) -> mel (B, T, F) in nats."""
        return self.denormalize(self.decoder(z).squeeze(1))

    # --- single-spectrogram API ---

    @torch.no_grad()
    def encode(self, m: MelSpec) -> tuple[Latent, Latent]:
        mel = torch.from_numpy(m.values.astype(np.float32)).unsqueeze(0)
        mean, logvar = self.encode_t(mel)
        return Latent.from_torch(mean[0]), Latent.from_torch(logvar[0])

    @torch.no_grad()
    def decode(self, z: Latent, params: FrameParams = DEFAULT_FRAMES) -> MelSpec:
        mel = self.decode_t(z.to_torch().unsqueeze(0))[0].numpy().astype(np.float64)
        return MelSpec(mel, params.hop, params.n_fft, params.n_mels, params.sample_rate)


def reparameterize(
    mean: torch.Tensor, logvar: torch.Tensor, generator: torch.Generator | None = None
) -> torch.Tensor:
    eps = torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
    return mean + torch.exp(0.5 * logvar) * eps


def kl_divergence(mean: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """KL(q || N(0, I)) per batch element, mean over elements."""
    return 0.5 * torch.mean(mean.pow(2) + logvar.exp() - 1.0 - logvar)


def vae_loss(
    model: MelVae, mel: torch.Tensor, generator: torch.Generator | None = None
) -> tuple[torch.Tensor, dict]:
    mean, logvar = model.encode_t(mel)
    z = reparameterize(mean, logvar, generator)
    recon = model.decode_t(z)
    target = model.normalize(mel)
    recon_n = model.normalize(recon)
    rec = torch.mean((recon_n - target) ** 2)
    kl = kl_divergence(mean, logvar)
    loss = rec + model.config.beta_kl * kl
    return loss, {"rec": float(rec.detach()), "kl": float(kl.detach())}


def save_vae(path: str | Path, model: MelVae, extra: dict | None = None) -> None:
    payload = {
        "format_version": VAE_FORMAT_VERSION,
        "kind": "mel_vae",
        "config": asdict(model.config),
        "state_dict": model.state_dict(),
    }
    if extra:
        payload.update(extra)
    torch.save(payload, str(path))


def load_vae(path: str | Path) -> tuple[MelVae, dict]:
    payload = torch.load(str(path), map_location="cpu", weights_only=False)
    if payload.get("kind") != "mel_vae":
        raise ValueError(f"not a VAE checkpoint: {path}")
    if payload.get("format_version") != VAE_FORMAT_VERSION:
        raise ValueError(
            f"VAE checkpoint format {payload.get('format_version')} != "
            f"supported {VAE_FORMAT_VERSION}"
        )
    model = MelVae(VaeConfig(**payload["config"]))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload


def train_vae(
    mels: np.ndarray,
    out_path: str | Path,
    config: VaeConfig = VaeConfig(),
    epochs: int = 30,
    batch_size: int = 16,
    lr: float = 1e-3,
    seed: int = 0,
    holdout_fraction: float = 0.1,
) -> tuple[MelVae, dict]:
    """Train on (N, T, F) log-mels; checkpoint every epoch; abort on NaN loss.

    Returns the trained model and a history dict with per-epoch median
    losses and the held-out reconstruction MAE (in nats).
    """
    mels = np.asarray(mels, dtype=np.float32)
    if mels.shape[0] < 200:
        raise ValueError(f"need >= 200 training mels, got {mels.shape[0]}")
    if config.mel_shift is None or config.mel_scale is None:
        config = VaeConfig(
            **{
                **asdict(config),
                "mel_shift": float(mels.mean()),
                "mel_scale": float(mels.std()),
            }
        )
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    model = MelVae(config)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=epochs, eta_min=lr * 0.05)

    rng = np.random.default_rng(seed)
    order = rng.permutation(mels.shape[0])
    n_hold = max(8, int(holdout_fraction * mels.shape[0]))
    hold_idx, train_idx = order[:n_hold], order[n_hold:]
    hold = torch.from_numpy(mels[hold_idx])
    data = torch.from_numpy(mels[train_idx])

    history = {"epoch_median_loss": [], "holdout_mae": []}
    last_good: dict | None = None
    for epoch in range(epochs):
        model.train()
        perm = torch.randperm(data.shape[0], generator=gen)
        losses = []
        for start in range(0, data.shape[0], batch_size):
            batch = data[perm[start : start + batch_size]]
            loss, _ = vae_loss(model, batch, gen)
            if not torch.isfinite(loss):
                log.error("VAE diverged at epoch %d; restoring last checkpoint", epoch)
                if last_good is None:
                    raise RuntimeError("VAE training diverged before first checkpoint")
                model.load_state_dict(last_good["state_dict"])
                history["diverged_at"] = epoch
                return model, history
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        sched.step()
        model.eval()
        with torch.no_grad():
            mae = 0.0
            for start in range(0, hold.shape[0], 64):
                hb = hold[start : start + 64]
                mean, _ = model.encode_t(hb)
                rec = model.decode_t(mean)
                mae += float(torch.sum(torch.abs(rec - hb))) / hold.numel()
        history["epoch_median_loss"].append(float(np.median(losses)))
        history["holdout_mae"].append(mae)
        log.info("vae epoch %d: median loss %.5f, holdout MAE %.4f nats",
                 epoch, history["epoch_median_loss"][-1], mae)
        save_vae(out_path, model, {"history": history, "epoch": epoch})
        last_good = {"state_dict": {k: v.clone() for k, v in model.state_dict().items()}}
    model.eval()
    return model, history
