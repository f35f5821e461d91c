"""Conditional embeddings: a trainable audio encoder, a frozen-projection
visual-descriptor encoder, per-modality projections, late-fusion tokens, and
a learned null embedding for guidance dropout.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .audio import Waveform
from .corpus import DESCRIPTOR_DIM
from .dsp import DEFAULT_FRAMES, FrameParams, stft_mel

CLIP_SAMPLES = 40960


@dataclass(frozen=True)
class CondConfig:
    embed_dim: int = 128       # L
    n_tokens: int = 2          # K: [audio, visual]
    descriptor_dim: int = DESCRIPTOR_DIM


@dataclass(frozen=True)
class CondEmbedding:
    """K x L fusion tokens; null_flag marks the unconditional branch."""

    tokens: np.ndarray
    null_flag: bool = False

    def __post_init__(self):
        tokens = np.asarray(self.tokens, dtype=np.float32)
        if tokens.ndim != 2:
            raise ValueError(f"tokens must be (K, L), got {tokens.shape}")
        object.__setattr__(self, "tokens", tokens)


class AudioCondEncoder(nn.Module):
    """Small strided CNN over the conditional clip's log-mel."""

    def __init__(self, embed_dim: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(1, 16, 4, stride=(4, 2), padding=1),   # 64 x 32
            nn.SiLU(),
            nn.Conv2d(16, 32, 4, stride=2, padding=1),       # 32 x 16
            nn.SiLU(),
            nn.Conv2d(32, 64, 4, stride=2, padding=1),       # 16 x 8
            nn.GroupNorm(8, 64),
            nn.SiLU(),
        )
        self.out = nn.Linear(64, embed_dim)
        # Normalization for raw log-mel input, set once at training start.
        self.register_buffer("mel_shift", torch.tensor(0.0))
        self.register_buffer("mel_scale", torch.tensor(1.0))

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        x = ((mel - self.mel_shift) / self.mel_scale).unsqueeze(1)
        h = self.net(x).mean(dim=(2, 3))
        return self.out(h)


class VisualCondEncoder(nn.Module):
    """Frozen random projection of the scene descriptor + trainable head."""

    def __init__(self, descriptor_dim: int, embed_dim: int):
        super().__init__()
        self.frozen = nn.Linear(descriptor_dim, embed_dim, bias=False)
        self.frozen.weight.requires_grad_(False)
        self.head = nn.Linear(embed_dim, embed_dim)

    def forward(self, desc: torch.Tensor) -> torch.Tensor:
        return self.head(torch.tanh(self.frozen(desc)))


class ConditioningModule(nn.Module):
    """Produces the K x L cross-attention context from (audio, descriptor)."""

    def __init__(self, config: CondConfig = CondConfig(),
                 params: FrameParams = DEFAULT_FRAMES):
        super().__init__()
        if config.n_tokens != 2:
            raise ValueError("late fusion uses exactly 2 tokens (audio, visual)")
        self.config = config
        self.params = params
        self.audio_encoder = AudioCondEncoder(config.embed_dim)
        self.visual_encoder = VisualCondEncoder(config.descriptor_dim, config.embed_dim)
        self.proj_audio = nn.Linear(config.embed_dim, config.embed_dim)
        self.proj_visual = nn.Linear(config.embed_dim, config.embed_dim)
        self.null_tokens = nn.Parameter(
            0.01 * torch.randn(config.n_tokens, config.embed_dim)
        )

    # --- batched training path ---

    def tokens_t(
        self,
        cond_mel: torch.Tensor | None,
        desc: torch.Tensor | None,
        drop: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """Fusion tokens (B, 2, L). None inputs fall back to that modality's
        null token; drop=True rows get the full null pair."""
        if cond_mel is None and desc is None and drop is None:
            raise ValueError("need at least one conditioning modality or drop mask")
        batch = (
            cond_mel.shape[0] if cond_mel is not None
            else desc.shape[0] if desc is not None
            else drop.shape[0]
        )
        L = self.config.embed_dim
        if cond_mel is not None:
            a_tok = self.proj_audio(self.audio_encoder(cond_mel))
        else:
            a_tok = self.null_tokens[0].expand(batch, L)
        if desc is not None:
            v_tok = self.proj_visual(self.visual_encoder(desc))
        else:
            v_tok = self.null_tokens[1].expand(batch, L)
        tokens = torch.stack([a_tok, v_tok], dim=1)
        if drop is not None:
            null = self.null_tokens.unsqueeze(0).expand(batch, -1, -1)
            tokens = torch.where(drop.view(-1, 1, 1), null, tokens)
        return tokens

    def null_tokens_t(self, batch: int) -> torch.Tensor:
        return self.null_tokens.unsqueeze(0).expand(batch, -1, -1)

    # --- single-example API ---

    @torch.no_grad()
    def encode_cond_audio(self, a: Waveform) -> np.ndarray:
        if len(a) != CLIP_SAMPLES:
            raise ValueError(
                f"conditional audio must be {CLIP_SAMPLES} samples (2.56 s), got {len(a)}"
            )
        mel = stft_mel(a, self.params).values.astype(np.float32)
        emb = self.audio_encoder(torch.from_numpy(mel).unsqueeze(0))
        return emb[0].numpy()

    @torch.no_grad()
    def encode_cond_visual(self, desc: np.ndarray) -> np.ndarray:
        desc = np.asarray(desc, dtype=np.float64)
        if desc.shape != (self.config.descriptor_dim,):
            raise ValueError(
                f"descriptor must have shape ({self.config.descriptor_dim},), got {desc.shape}"
            )
        norm = np.linalg.norm(desc)
        if abs(norm - 1.0) > 1e-6:
            raise ValueError(f"descriptor must be unit-norm, got |d| = {norm:.6g}")
        emb = self.visual_encoder(torch.from_numpy(desc.astype(np.float32)).unsqueeze(0))
        return emb[0].numpy()

    @torch.no_grad()
    def fuse(
        self,
        a_emb: np.ndarray | None,
        v_emb: np.ndarray | None,
        drop: bool = False,
    ) -> CondEmbedding:
        """Late fusion of pre-computed embeddings into the K=2 token context.

        A None embedding keeps that modality's null token (uni-modal modes);
        drop=True returns the learned null pair regardless of inputs.
        """
        L = self.config.embed_dim
        if drop:
            return CondEmbedding(self.null_tokens.detach().numpy().copy(), null_flag=True)
        if a_emb is not None:
            a_tok = self.proj_audio(torch.from_numpy(np.asarray(a_emb, dtype=np.float32)))
        else:
            a_tok = self.null_tokens[0]
        if v_emb is not None:
            v_tok = self.proj_visual(torch.from_numpy(np.asarray(v_emb, dtype=np.float32)))
        else:
            v_tok = self.null_tokens[1]
        for name, tok in (("audio", a_tok), ("visual", v_tok)):
            if tok.shape != (L,):
                raise ValueError(f"{name} embedding must have length {L}")
        return CondEmbedding(torch.stack([a_tok, v_tok]).detach().numpy(), null_flag=False)
