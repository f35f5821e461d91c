"""Run configuration: every tunable in one validated, serializable record.

Precedence is CLI flag > config file > built-in default. All stage
randomness derives from one root seed through named substreams, so stages
can be re-run independently and reproducibly.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

CONFIG_SCHEMA_VERSION = 1


def substream(root_seed: int, name: str) -> int:
    """Deterministic per-stage seed derived from the root seed."""
    digest = hashlib.sha256(f"{root_seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little") % (1 << 63)


@dataclass
class RunConfig:
    seed: int = 0
    # corpus
    corpus_scenes: int = 64
    corpus_sessions_per_scene: int = 4
    corpus_session_seconds: float = 20.48
    corpus_test_fraction: float = 0.2
    corpus_speech_files: int = 24
    # pretext
    input_sigma: float = 0.01
    drop_rate: float = 0.10
    # vae
    vae_epochs: int = 16
    vae_batch: int = 16
    vae_lr: float = 2e-3
    vae_width: int = 64
    vae_beta_kl: float = 1e-4
    # diffusion
    train_epochs: int = 40
    train_steps_per_epoch: int | None = None
    train_batch: int = 16
    train_lr: float = 1e-4
    guidance: float = 4.5
    diffusion_steps: int = 1000
    beta_start: float = 0.0015
    beta_end: float = 0.0195
    sample_steps: int = 200
    # synthesis
    phase_iterations: int = 60
    schema_version: int = CONFIG_SCHEMA_VERSION

    def validate(self) -> None:
        if self.seed < 0:
            raise ValueError("seed must be >= 0")
        if not 0.0 <= self.drop_rate <= 1.0:
            raise ValueError("drop_rate must be in [0, 1]")
        if self.input_sigma < 0:
            raise ValueError("input_sigma must be >= 0")
        if not 0.0 < self.beta_start < self.beta_end < 1.0:
            raise ValueError("need 0 < beta_start < beta_end < 1")
        if not 1 <= self.sample_steps <= self.diffusion_steps:
            raise ValueError("sample_steps must be in [1, diffusion_steps]")
        for name in ("corpus_scenes", "corpus_sessions_per_scene", "vae_epochs",
                     "vae_batch", "train_epochs", "train_batch", "phase_iterations"):
            if getattr(self, name) < 0 or (name != "phase_iterations" and getattr(self, name) == 0):
                raise ValueError(f"{name} must be positive")
        if self.schema_version != CONFIG_SCHEMA_VERSION:
            raise ValueError(
                f"config schema {self.schema_version} != supported {CONFIG_SCHEMA_VERSION}"
            )

    def stage_seed(self, stage: str) -> int:
        return substream(self.seed, stage)


_FIELD_NAMES = {f.name for f in fields(RunConfig)}


def resolve_config(
    config_path: str | Path | None = None, overrides: dict | None = None
) -> RunConfig:
    """defaults <- config file <- explicit CLI overrides, then validate."""
    merged = asdict(RunConfig())
    if config_path is not None:
        with Path(config_path).open("r", encoding="utf-8") as fh:
            file_cfg = json.load(fh)
        unknown = set(file_cfg) - _FIELD_NAMES
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        merged.update(file_cfg)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in _FIELD_NAMES:
            raise ValueError(f"unknown config override: {key}")
        merged[key] = value
    cfg = RunConfig(**merged)
    cfg.validate()
    return cfg


def save_config(out_dir: str | Path, cfg: RunConfig, extras: dict | None = None) -> Path:
    """Write the exact resolved config next to the artifacts it produced."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = asdict(cfg)
    if extras:
        payload["run"] = extras
    path = out_dir / "run_config.json"
    with path.open("w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
    return path
