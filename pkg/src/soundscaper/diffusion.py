"""Conditional latent diffusion core: schedule, forward noising, training
loss, classifier-free guidance, and deterministic DDIM sampling.

Timesteps are 1-indexed: t in [1, N], with alpha_bar(0) defined as 1.
"""
from __future__ import annotations

import hashlib
import logging
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .conditioning import CondConfig, ConditioningModule
from .dsp import stft_mel
from .unet import EpsPredictor, UnetConfig
from .vae import MelVae

log = logging.getLogger(__name__)

CKPT_FORMAT_VERSION = 1

DEFAULT_N_STEPS = 1000
DEFAULT_BETA_START = 0.0015
DEFAULT_BETA_END = 0.0195
DEFAULT_SAMPLE_STEPS = 200
DEFAULT_GUIDANCE = 4.5


@dataclass(frozen=True)
class DiffusionSchedule:
    n_steps: int
    beta: np.ndarray        # (N,), beta[t-1] is the step-t value
    alpha: np.ndarray
    alpha_bar: np.ndarray
    ddim_steps: np.ndarray  # strictly increasing ints, last == N

    def alpha_bar_at(self, t: int) -> float:
        """alpha_bar with the t=0 convention alpha_bar(0) = 1."""
        if t == 0:
            return 1.0
        return float(self.alpha_bar[t - 1])


def make_schedule(
    n_steps: int = DEFAULT_N_STEPS,
    beta_start: float = DEFAULT_BETA_START,
    beta_end: float = DEFAULT_BETA_END,
    n_sample_steps: int = DEFAULT_SAMPLE_STEPS,
) -> DiffusionSchedule:
    """Linear beta schedule plus the DDIM timestep sub-sequence."""
    if not 0.0 < beta_start < beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}")
    if not 1 <= n_sample_steps <= n_steps:
        raise ValueError(f"need 1 <= sample steps <= {n_steps}, got {n_sample_steps}")
    beta = np.linspace(beta_start, beta_end, n_steps)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    ddim = np.unique(np.round(np.linspace(1, n_steps, n_sample_steps)).astype(np.int64))
    assert len(ddim) == n_sample_steps and ddim[-1] == n_steps
    return DiffusionSchedule(n_steps, beta, alpha, alpha_bar, ddim)


def _check_t(t: int, sched: DiffusionSchedule) -> None:
    if not 1 <= t <= sched.n_steps:
        raise ValueError(f"t must be in [1, {sched.n_steps}], got {t}")


def q_sample(
    z0: torch.Tensor, t: int, eps: torch.Tensor, sched: DiffusionSchedule
) -> torch.Tensor:
    """Forward noising: sqrt(abar_t) z0 + sqrt(1 - abar_t) eps."""
    _check_t(t, sched)
    ab = sched.alpha_bar_at(t)
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


def q_sample_batch(
    z0: torch.Tensor, t: torch.Tensor, eps: torch.Tensor, sched: DiffusionSchedule
) -> torch.Tensor:
    if int(t.min()) < 1 or int(t.max()) > sched.n_steps:
        raise ValueError("batch timesteps out of range")
    ab = torch.from_numpy(sched.alpha_bar).to(z0.dtype)[t - 1].view(-1, 1, 1, 1)
    return torch.sqrt(ab) * z0 + torch.sqrt(1.0 - ab) * eps


def training_loss(
    predictor,
    z0: torch.Tensor,
    z_e: torch.Tensor,
    ctx: torch.Tensor,
    t: torch.Tensor,
    eps: torch.Tensor,
    sched: DiffusionSchedule,
) -> torch.Tensor:
    """Mean squared error between injected and predicted noise."""
    z_t = q_sample_batch(z0, t, eps, sched)
    pred = predictor(z_t, t, z_e, ctx)
    if not torch.all(torch.isfinite(pred)):
        raise FloatingPointError("non-finite noise prediction in training loss")
    return torch.mean((eps - pred) ** 2)


def cfg_combine(eps_cond: torch.Tensor, eps_uncond: torch.Tensor, lam: float) -> torch.Tensor:
    """Guided estimate: lam * conditional + (1 - lam) * unconditional.

    Computed as uncond + lam * (cond - uncond), which keeps two exactness
    guarantees: lam = 1 returns the conditional estimate bit-for-bit, and
    equal branches pass through unchanged for any lam.
    """
    if eps_cond.shape != eps_uncond.shape:
        raise ValueError(f"shape mismatch {tuple(eps_cond.shape)} vs {tuple(eps_uncond.shape)}")
    if lam < 1.0:
        warnings.warn(f"guidance scale {lam} < 1 weakens conditioning", stacklevel=2)
    if lam == 1.0:
        return eps_cond
    return eps_uncond + lam * (eps_cond - eps_uncond)


def ddim_step(
    z_t: torch.Tensor, t: int, t_prev: int, eps_hat: torch.Tensor, sched: DiffusionSchedule
) -> torch.Tensor:
    """One deterministic (eta = 0) reverse step from t to t_prev."""
    if t_prev >= t:
        raise ValueError(f"t_prev {t_prev} must be < t {t}")
    _check_t(t, sched)
    ab_t = sched.alpha_bar_at(t)
    ab_prev = sched.alpha_bar_at(t_prev)
    x0_hat = (z_t - np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t)
    return np.sqrt(ab_prev) * x0_hat + np.sqrt(1.0 - ab_prev) * eps_hat


def sample(
    predictor,
    z_e: torch.Tensor,
    ctx: torch.Tensor,
    uncond_ctx: torch.Tensor,
    sched: DiffusionSchedule,
    lam: float = DEFAULT_GUIDANCE,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Full reverse loop with classifier-free guidance.

    Two predictor evaluations per step (conditional, unconditional);
    deterministic given the generator used for the initial latent.
    """
    z = torch.randn(z_e.shape, generator=generator, dtype=z_e.dtype)
    steps = sched.ddim_steps
    for i in range(len(steps) - 1, -1, -1):
        t = int(steps[i])
        t_prev = int(steps[i - 1]) if i > 0 else 0
        t_batch = torch.full((z.shape[0],), t, dtype=torch.long)
        eps_c = predictor(z, t_batch, z_e, ctx)
        eps_u = predictor(z, t_batch, z_e, uncond_ctx)
        eps = cfg_combine(eps_c, eps_u, lam)
        if not torch.all(torch.isfinite(eps)):
            raise FloatingPointError(f"non-finite noise estimate at step t={t}")
        z = ddim_step(z, t, t_prev, eps, sched)
    return z


# --- checkpoint bundle ------------------------------------------------------


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class StylizerBundle:
    unet: EpsPredictor
    cond: ConditioningModule
    sched: DiffusionSchedule
    latent_scale: float
    input_sigma: float
    guidance: float
    vae_sha256: str
    meta: dict


def save_stylizer(
    path: str | Path,
    unet: EpsPredictor,
    cond: ConditioningModule,
    sched_params: dict,
    latent_scale: float,
    input_sigma: float,
    guidance: float,
    vae_sha256: str,
    extra: dict | None = None,
) -> None:
    payload = {
        "format_version": CKPT_FORMAT_VERSION,
        "kind": "stylizer",
        "unet_config": asdict(unet.config),
        "cond_config": asdict(cond.config),
        "schedule": sched_params,
        "latent_scale": latent_scale,
        "input_sigma": input_sigma,
        "guidance": guidance,
        "vae_sha256": vae_sha256,
        "unet_state": unet.state_dict(),
        "cond_state": cond.state_dict(),
    }
    if extra:
        payload.update(extra)
    torch.save(payload, str(path))


def load_stylizer(path: str | Path, vae_path: str | Path | None = None) -> StylizerBundle:
    payload = torch.load(str(path), map_location="cpu", weights_only=False)
    if payload.get("kind") != "stylizer":
        raise ValueError(f"not a stylizer checkpoint: {path}")
    if payload.get("format_version") != CKPT_FORMAT_VERSION:
        raise ValueError(
            f"checkpoint format {payload.get('format_version')} != supported {CKPT_FORMAT_VERSION}"
        )
    if vae_path is not None:
        actual = file_sha256(vae_path)
        if actual != payload["vae_sha256"]:
            raise ValueError(
                f"VAE file hash {actual[:12]}... does not match the one this "
                f"model was trained against ({payload['vae_sha256'][:12]}...)"
            )
    cfg = UnetConfig(**{**payload["unet_config"], "channels": tuple(payload["unet_config"]["channels"])})
    unet = EpsPredictor(cfg)
    unet.load_state_dict(payload["unet_state"])
    unet.eval()
    cond = ConditioningModule(CondConfig(**payload["cond_config"]))
    cond.load_state_dict(payload["cond_state"])
    cond.eval()
    sched = make_schedule(**payload["schedule"])
    return StylizerBundle(
        unet=unet,
        cond=cond,
        sched=sched,
        latent_scale=payload["latent_scale"],
        input_sigma=payload["input_sigma"],
        guidance=payload["guidance"],
        vae_sha256=payload["vae_sha256"],
        meta={k: v for k, v in payload.items() if not k.endswith("_state")},
    )


# --- training ---------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    steps_per_epoch: int | None = None   # None: one pass worth of samples
    batch_size: int = 16
    lr: float = 1e-4
    adam_beta1: float = 0.95
    adam_beta2: float = 0.999
    adam_eps: float = 1e-6
    weight_decay: float = 1e-3
    guidance: float = DEFAULT_GUIDANCE
    n_steps: int = DEFAULT_N_STEPS
    beta_start: float = DEFAULT_BETA_START
    beta_end: float = DEFAULT_BETA_END
    n_sample_steps: int = DEFAULT_SAMPLE_STEPS
    unet_channels: tuple | None = None   # None: UnetConfig default


def _encode_scaled(vae: MelVae, mels: torch.Tensor, scale: float) -> torch.Tensor:
    with torch.no_grad():
        mean, _ = vae.encode_t(mels)
    return mean * scale


def train_diffusion(
    dataset,
    vae: MelVae,
    vae_sha256: str,
    out_path: str | Path,
    config: TrainConfig = TrainConfig(),
    seed: int = 0,
    resume_from: str | Path | None = None,
) -> tuple[EpsPredictor, ConditioningModule, dict]:
    """Train the noise predictor and conditioning encoders on pretext pairs.

    The VAE is frozen; diffusion runs on posterior-mean latents scaled to
    unit variance. Conditioning dropout follows the dataset's configured
    rate. Checkpoints (with optimizer and RNG state) are written every epoch.
    """
    sched_params = {
        "n_steps": config.n_steps,
        "beta_start": config.beta_start,
        "beta_end": config.beta_end,
        "n_sample_steps": config.n_sample_steps,
    }
    sched = make_schedule(**sched_params)
    vae.eval()

    torch.manual_seed(seed)
    unet_cfg = UnetConfig(latent_channels=vae.config.latent_channels)
    if config.unet_channels is not None:
        unet_cfg = UnetConfig(
            latent_channels=vae.config.latent_channels,
            channels=tuple(config.unet_channels),
        )
    unet = EpsPredictor(unet_cfg)
    cond = ConditioningModule(CondConfig())
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)

    # Latent scale and cond-mel normalization from a probe batch.
    probe = [dataset.sample(np.random.default_rng(seed + 1)) for _ in range(16)]
    probe_t = torch.stack([torch.from_numpy(ex.target.values.astype(np.float32)) for ex in probe])
    with torch.no_grad():
        mean, _ = vae.encode_t(probe_t)
    latent_scale = float(1.0 / max(mean.std(), 1e-6))
    cond.audio_encoder.mel_shift.fill_(float(probe_t.mean()))
    cond.audio_encoder.mel_scale.fill_(float(probe_t.std()))

    params = [p for p in list(unet.parameters()) + list(cond.parameters()) if p.requires_grad]
    opt = torch.optim.AdamW(
        params,
        lr=config.lr,
        betas=(config.adam_beta1, config.adam_beta2),
        eps=config.adam_eps,
        weight_decay=config.weight_decay,
    )

    start_epoch = 0
    history = {"epoch_mean_loss": [], "drop_rate": []}
    if resume_from is not None:
        payload = torch.load(str(resume_from), map_location="cpu", weights_only=False)
        unet.load_state_dict(payload["unet_state"])
        cond.load_state_dict(payload["cond_state"])
        opt.load_state_dict(payload["optimizer_state"])
        torch.set_rng_state(payload["torch_rng"])
        gen.set_state(payload["gen_rng"])
        rng = np.random.default_rng()
        rng.bit_generator.state = payload["np_rng"]
        latent_scale = payload["latent_scale"]
        start_epoch = payload["epoch"] + 1
        history = payload["history"]
        log.info("resumed from %s at epoch %d", resume_from, start_epoch)

    steps_per_epoch = config.steps_per_epoch or max(1, len(dataset) // config.batch_size)

    def checkpoint(epoch: int) -> None:
        save_stylizer(
            out_path, unet, cond, sched_params, latent_scale,
            dataset.sigma, config.guidance, vae_sha256,
            extra={
                "optimizer_state": opt.state_dict(),
                "torch_rng": torch.get_rng_state(),
                "gen_rng": gen.get_state(),
                "np_rng": rng.bit_generator.state,
                "epoch": epoch,
                "history": history,
                "train_config": asdict(config),
                "seed": seed,
            },
        )

    for epoch in range(start_epoch, config.epochs):
        losses, drops, n_ex = [], 0, 0
        for _ in range(steps_per_epoch):
            examples = [dataset.sample(rng) for _ in range(config.batch_size)]
            target_mels = torch.stack(
                [torch.from_numpy(ex.target.values.astype(np.float32)) for ex in examples]
            )
            input_mels = torch.stack(
                [torch.from_numpy(ex.input_enhanced.values.astype(np.float32)) for ex in examples]
            )
            cond_mel_t = torch.stack(
                [torch.from_numpy(stft_mel(ex.cond_audio).values.astype(np.float32)) for ex in examples]
            )
            desc = torch.stack(
                [torch.from_numpy(ex.cond_descriptor.astype(np.float32)) for ex in examples]
            )
            drop = torch.tensor([ex.drop_cond for ex in examples])
            drops += int(drop.sum())
            n_ex += len(examples)

            z0 = _encode_scaled(vae, target_mels, latent_scale)
            z_e = _encode_scaled(vae, input_mels, latent_scale)
            ctx = cond.tokens_t(cond_mel_t, desc, drop)
            t = torch.randint(1, sched.n_steps + 1, (z0.shape[0],), generator=gen)
            eps = torch.randn(z0.shape, generator=gen)

            loss = training_loss(unet, z0, z_e, ctx, t, eps, sched)
            if not torch.isfinite(loss):
                log.error("diffusion training diverged at epoch %d; keeping last checkpoint", epoch)
                history["diverged_at"] = epoch
                return unet, cond, history
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        history["epoch_mean_loss"].append(float(np.mean(losses)))
        history["drop_rate"].append(drops / max(n_ex, 1))
        log.info("diffusion epoch %d: mean loss %.4f (drop %.3f)",
                 epoch, history["epoch_mean_loss"][-1], history["drop_rate"][-1])
        checkpoint(epoch)
    return unet, cond, history
