"""Single-file checkpoints: versioned header plus named parameter tensors.

The header echoes every constant needed to rebuild the model, including the
noise-schedule constants and the vocabulary, so a checkpoint is a standalone
sampling artifact. Save/load round-trips parameters bit-exactly.
"""

from __future__ import annotations

from dataclasses import asdict
from pathlib import Path

import torch

from .backbone import Backbone, BackboneConfig
from .diffhead import Denoiser, DenoiserConfig, NoiseSchedule
from .marloop import ImageSpec, MARModel
from .seqmask import AttentionPolicy
from .tokenizer import TextVocab

MAGIC = "SELFCTL1"
VERSION = 1

__all__ = ["MAGIC", "VERSION", "save_checkpoint", "load_checkpoint"]


def save_checkpoint(path: str | Path, model: MARModel) -> None:
    header = {
        "magic": MAGIC,
        "version": VERSION,
        "backbone": asdict(model.backbone.cfg),
        "denoiser": asdict(model.denoiser.cfg),
        "schedule": {
            "steps": model.schedule.steps,
            "beta_start": float(model.schedule.betas[0]),
            "beta_end": float(model.schedule.betas[-1]),
        },
        "policy": str(model.policy),
        "image": asdict(model.image_spec),
        "max_text_len": model.max_text_len,
        "sample_steps": model.sample_steps,
        "vocab": list(model.vocab.words),
    }
    torch.save({"header": header, "state": model.state_dict()}, str(path))


def load_checkpoint(path: str | Path) -> MARModel:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(str(path), map_location="cpu", weights_only=True)
    except Exception as exc:
        raise ValueError(f"{path} is not a readable {MAGIC} checkpoint: {exc}") from exc
    if not isinstance(payload, dict) or "header" not in payload:
        raise ValueError(f"{path} is not a {MAGIC} checkpoint")
    header = payload["header"]
    if header.get("magic") != MAGIC:
        raise ValueError(f"{path} is not a {MAGIC} checkpoint")
    if header.get("version") != VERSION:
        raise ValueError(f"unsupported checkpoint version {header.get('version')!r}")
    model = MARModel(
        backbone=Backbone(BackboneConfig(**header["backbone"])),
        denoiser=Denoiser(DenoiserConfig(**header["denoiser"])),
        schedule=NoiseSchedule.linear(**header["schedule"]),
        vocab=TextVocab(tuple(header["vocab"])),
        image_spec=ImageSpec(**header["image"]),
        policy=AttentionPolicy.parse(header["policy"]),
        max_text_len=header["max_text_len"],
        sample_steps=header["sample_steps"],
    )
    try:
        model.load_state_dict(payload["state"], strict=True)
    except RuntimeError as exc:
        raise ValueError(f"checkpoint parameters do not match its config echo: {exc}") from exc
    return model
