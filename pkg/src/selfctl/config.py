"""Declarative run configuration: one INI document, sections per module.

Unknown sections or keys are rejected so an ablation run's config is a
complete, reviewable record of what ran. ``build_model`` is the composition
root turning a config into a model plus its training data source.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, replace
from pathlib import Path

import torch

from .backbone import Backbone, BackboneConfig
from .diffhead import Denoiser, DenoiserConfig, NoiseSchedule
from .marloop import ImageSpec, MARModel, TrainConfig
from .seqmask import DEFAULT_POLICY, AttentionPolicy, IntraMode, ablation_policy
from .synthdata import build_vocab, SyntheticTaskData

__all__ = ["ArchConfig", "DiffusionConfig", "DataConfig", "RunConfig", "build_model"]


@dataclass(frozen=True)
class ArchConfig:
    width: int = 256
    depth_enc: int = 4
    depth_dec: int = 4
    heads: int = 4

    def __post_init__(self) -> None:
        if self.width % self.heads:
            raise ValueError("width must be divisible by heads")
        if min(self.width, self.depth_enc, self.depth_dec, self.heads) < 1:
            raise ValueError("architecture sizes must be >= 1")


@dataclass(frozen=True)
class DiffusionConfig:
    steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    sample_steps: int = 100
    hidden: int = 512
    blocks: int = 3
    temb_dim: int = 128

    def __post_init__(self) -> None:
        if self.steps < 1 or self.sample_steps < 1:
            raise ValueError("diffusion step counts must be >= 1")
        if self.sample_steps > self.steps:
            raise ValueError("sample_steps cannot exceed steps")


@dataclass(frozen=True)
class DataConfig:
    image_size: int = 16
    patch_size: int = 4
    channels: int = 3
    max_text_len: int = 4
    jitter: int = 2

    def __post_init__(self) -> None:
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")
        if self.max_text_len < 1 or self.jitter < 0:
            raise ValueError("max_text_len must be >= 1 and jitter >= 0")


@dataclass(frozen=True)
class RunConfig:
    arch: ArchConfig = field(default_factory=ArchConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    policy: AttentionPolicy = DEFAULT_POLICY
    out_dir: str = "runs/default"

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        parser = configparser.ConfigParser()
        parser.read(path)
        return cls._from_parser(parser)

    @classmethod
    def _from_parser(cls, parser: configparser.ConfigParser) -> "RunConfig":
        known = {
            "arch": {"width": int, "depth_enc": int, "depth_dec": int, "heads": int},
            "diffusion": {
                "steps": int, "beta_start": float, "beta_end": float, "sample_steps": int,
                "hidden": int, "blocks": int, "temb_dim": int,
            },
            "data": {
                "image_size": int, "patch_size": int, "channels": int,
                "max_text_len": int, "jitter": int,
            },
            "train": {
                "batch_size": int, "lr": float, "steps": int, "mask_ratio_lo": float,
                "mask_ratio_hi": float, "cond_dropout": float, "loss_repeats": int,
                "seed": int, "checkpoint_every": int,
            },
            "policy": {"text": str, "imgcond": str, "gen": str, "cross": str, "option": int},
            "paths": {"out_dir": str},
        }
        for section in parser.sections():
            if section not in known:
                raise ValueError(f"unknown config section [{section}]")
            for key in parser[section]:
                if key not in known[section]:
                    raise ValueError(f"unknown config key '{key}' in section [{section}]")

        def section_kwargs(name: str) -> dict:
            if name not in parser:
                return {}
            out = {}
            for key, value in parser[name].items():
                try:
                    out[key] = known[name][key](value)
                except ValueError:
                    raise ValueError(
                        f"bad value {value!r} for '{key}' in section [{name}]"
                    ) from None
            return out

        policy = DEFAULT_POLICY
        if "policy" in parser:
            keys = set(parser["policy"])
            if "option" in keys:
                if len(keys) > 1:
                    raise ValueError("[policy] option excludes the per-segment mode keys")
                policy = ablation_policy(int(parser["policy"]["option"]))
            else:
                missing = {"text", "imgcond", "gen", "cross"} - keys
                if missing:
                    raise ValueError(f"[policy] missing mode keys: {sorted(missing)}")
                policy = AttentionPolicy(
                    IntraMode.parse(parser["policy"]["text"]),
                    IntraMode.parse(parser["policy"]["imgcond"]),
                    IntraMode.parse(parser["policy"]["gen"]),
                    IntraMode.parse(parser["policy"]["cross"]),
                )
        paths = section_kwargs("paths")
        return cls(
            arch=ArchConfig(**section_kwargs("arch")),
            diffusion=DiffusionConfig(**section_kwargs("diffusion")),
            data=DataConfig(**section_kwargs("data")),
            train=TrainConfig(**section_kwargs("train")),
            policy=policy,
            out_dir=paths.get("out_dir", "runs/default"),
        )

    def save(self, path: str | Path) -> None:
        parser = configparser.ConfigParser()
        parser["arch"] = {k: repr(v) for k, v in vars(self.arch).items()}
        parser["diffusion"] = {k: repr(v) for k, v in vars(self.diffusion).items()}
        parser["data"] = {k: repr(v) for k, v in vars(self.data).items()}
        parser["train"] = {k: repr(v) for k, v in vars(self.train).items()}
        parser["policy"] = {
            "text": str(self.policy.text_mode),
            "imgcond": str(self.policy.imgcond_mode),
            "gen": str(self.policy.gen_mode),
            "cross": str(self.policy.cross_mode),
        }
        parser["paths"] = {"out_dir": self.out_dir}
        with open(path, "w", encoding="utf-8") as f:
            parser.write(f)

    def with_policy(self, policy: AttentionPolicy) -> "RunConfig":
        return replace(self, policy=policy)

    def with_steps(self, steps: int) -> "RunConfig":
        return replace(self, train=replace(self.train, steps=steps))


def build_model(cfg: RunConfig) -> tuple[MARModel, SyntheticTaskData]:
    """Instantiate the model and its synthetic data source from one config.

    Parameter initialization is seeded from ``cfg.train.seed``, so identical
    configs build identical models.
    """
    from .synthdata import CANVAS

    if cfg.data.image_size != CANVAS or cfg.data.channels != 3:
        raise ValueError(f"the synthetic task renders {CANVAS}x{CANVAS}x3 images")
    torch.manual_seed(cfg.train.seed)
    vocab = build_vocab()
    spec = ImageSpec(cfg.data.image_size, cfg.data.channels, cfg.data.patch_size)
    backbone_cfg = BackboneConfig(
        width=cfg.arch.width,
        depth_enc=cfg.arch.depth_enc,
        depth_dec=cfg.arch.depth_dec,
        heads=cfg.arch.heads,
        token_dim=spec.token_dim,
        text_vocab_size=vocab.size,
        max_text_len=cfg.data.max_text_len,
        max_imgcond_len=spec.gen_len,
        max_gen_len=spec.gen_len,
    )
    denoiser_cfg = DenoiserConfig(
        token_dim=spec.token_dim,
        cond_dim=cfg.arch.width,
        hidden=cfg.diffusion.hidden,
        blocks=cfg.diffusion.blocks,
        temb_dim=cfg.diffusion.temb_dim,
    )
    model = MARModel(
        backbone=Backbone(backbone_cfg),
        denoiser=Denoiser(denoiser_cfg),
        schedule=NoiseSchedule.linear(
            cfg.diffusion.steps, cfg.diffusion.beta_start, cfg.diffusion.beta_end
        ),
        vocab=vocab,
        image_spec=spec,
        policy=cfg.policy,
        max_text_len=cfg.data.max_text_len,
        sample_steps=cfg.diffusion.sample_steps,
    )
    data = SyntheticTaskData(
        vocab=vocab,
        patch_size=cfg.data.patch_size,
        channels=cfg.data.channels,
        max_text_len=cfg.data.max_text_len,
        jitter=cfg.data.jitter,
    )
    return model, data
