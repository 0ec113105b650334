"""Masked autoregressive training and K-step generation.

Training hides a random subset of generated positions and applies the
diffusion loss only there; generation starts from an all-hidden canvas and
reveals position sets (a masking plan) over K steps, sampling each revealed
token from the diffusion head conditioned on the backbone's z vectors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .backbone import Backbone, SequenceBatch
from .diffhead import Denoiser, NoiseSchedule, diffusion_loss, sample_tokens
from .errors import NonFiniteError
from .seqmask import AttentionPolicy, SegmentLayout
from .tokenizer import ImageTokenGrid, TextVocab, encode_text, patchify, unpatchify

__all__ = [
    "MaskingPlan",
    "TrainConfig",
    "ImageSpec",
    "MARModel",
    "sample_training_mask",
    "make_generation_plan",
    "cosine_step_sizes",
    "train_step",
    "train_loop",
    "generate",
    "generate_batch",
]


@dataclass(eq=False, frozen=True)
class MaskingPlan:
    """Ordered partition of generated positions into per-step prediction sets."""

    steps: tuple[np.ndarray, ...]

    def __post_init__(self) -> None:
        if not self.steps:
            raise ValueError("a masking plan needs at least one step")
        if any(len(s) == 0 for s in self.steps):
            raise ValueError("every step must predict at least one position")
        flat = np.concatenate(self.steps)
        if not np.array_equal(np.sort(flat), np.arange(len(flat))):
            raise ValueError("steps must partition the generated positions exactly")

    @property
    def num_steps(self) -> int:
        return len(self.steps)

    @property
    def total(self) -> int:
        return sum(len(s) for s in self.steps)


@dataclass(frozen=True)
class TrainConfig:
    # lr 3e-4 with 4 diffusion draws per hidden position: at this scale a
    # higher rate (or single draws) collapses the model into the
    # condition-independent marginal solution within a few hundred steps.
    batch_size: int = 16
    lr: float = 3e-4
    steps: int = 2000
    mask_ratio_lo: float = 0.7
    mask_ratio_hi: float = 1.0
    cond_dropout: float = 0.1
    loss_repeats: int = 4
    seed: int = 0
    checkpoint_every: int = 0  # 0 = final checkpoint only

    def __post_init__(self) -> None:
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch_size must be >= 1 and steps >= 0")
        if not 0.0 < self.mask_ratio_lo <= self.mask_ratio_hi <= 1.0:
            raise ValueError("mask ratio bounds must satisfy 0 < lo <= hi <= 1")
        if not 0.0 <= self.cond_dropout <= 1.0:
            raise ValueError("cond_dropout must lie in [0, 1]")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.loss_repeats < 1:
            raise ValueError("loss_repeats must be >= 1")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be >= 0")


@dataclass(frozen=True)
class ImageSpec:
    """Geometry of the generated image and its patch tokenization."""

    size: int = 16
    channels: int = 3
    patch_size: int = 4

    def __post_init__(self) -> None:
        if self.size < 1 or self.channels < 1 or self.patch_size < 1:
            raise ValueError("image spec values must be >= 1")
        if self.size % self.patch_size:
            raise ValueError("image size must be divisible by patch size")

    @property
    def grid(self) -> int:
        return self.size // self.patch_size

    @property
    def gen_len(self) -> int:
        return self.grid ** 2

    @property
    def token_dim(self) -> int:
        return self.patch_size ** 2 * self.channels


class MARModel(torch.nn.Module):
    """Backbone plus diffusion head plus everything needed to drive them."""

    def __init__(
        self,
        backbone: Backbone,
        denoiser: Denoiser,
        schedule: NoiseSchedule,
        vocab: TextVocab,
        image_spec: ImageSpec,
        policy: AttentionPolicy,
        max_text_len: int,
        sample_steps: int = 100,
    ):
        super().__init__()
        self.backbone = backbone
        self.denoiser = denoiser
        self.schedule = schedule
        self.vocab = vocab
        self.image_spec = image_spec
        self.policy = policy
        self.max_text_len = max_text_len
        self.sample_steps = sample_steps

    @property
    def layout(self) -> SegmentLayout:
        return SegmentLayout(self.max_text_len, self.image_spec.gen_len, self.image_spec.gen_len)

    def sampling_schedule(self) -> NoiseSchedule:
        return self.schedule.respaced(min(self.sample_steps, self.schedule.steps))


def sample_training_mask(
    g: int, ratio_bounds: tuple[float, float], rng: np.random.Generator
) -> np.ndarray:
    """Visibility flags for one sequence: true = known, false = to predict.

    A ratio r is drawn uniformly from ``ratio_bounds`` and ceil(r * g)
    uniformly random positions are hidden; at least one is always hidden.
    """
    lo, hi = ratio_bounds
    if not 0.0 < lo <= hi <= 1.0:
        raise ValueError("ratio bounds must satisfy 0 < lo <= hi <= 1")
    if g < 1:
        raise ValueError("g must be >= 1")
    r = rng.uniform(lo, hi)
    n_hidden = min(g, max(1, math.ceil(r * g)))
    visible = np.ones(g, dtype=bool)
    visible[rng.choice(g, size=n_hidden, replace=False)] = False
    return visible


def _batch_training_masks(
    b: int, g: int, ratio_bounds: tuple[float, float], rng: np.random.Generator
) -> np.ndarray:
    """Per-row visibility with one shared ratio draw per call.

    Sharing the hidden count across rows keeps the encoder's visible-token
    gather rectangular; hidden positions stay independent per row.
    """
    lo, hi = ratio_bounds
    r = rng.uniform(lo, hi)
    n_hidden = min(g, max(1, math.ceil(r * g)))
    visible = np.ones((b, g), dtype=bool)
    for row in visible:
        row[rng.choice(g, size=n_hidden, replace=False)] = False
    return visible


def cosine_step_sizes(g: int, k: int) -> np.ndarray:
    """Split g positions over k steps with cosine-decaying mask shares.

    Step sizes follow cos(pi/2 * (k-1)/K) - cos(pi/2 * k/K), rounded by
    largest remainder so they sum to g with every step non-empty.
    """
    if not 1 <= k <= g:
        raise ValueError("need 1 <= k <= g")
    ks = np.arange(1, k + 1)
    share = np.cos(np.pi / 2 * (ks - 1) / k) - np.cos(np.pi / 2 * ks / k)
    raw = share * g
    sizes = np.floor(raw).astype(np.int64)
    frac = raw - sizes
    for i in np.argsort(-frac)[: g - sizes.sum()]:
        sizes[i] += 1
    while (sizes == 0).any():
        sizes[np.argmax(sizes)] -= 1
        sizes[np.argmin(sizes)] += 1
    return sizes


def make_generation_plan(g: int, k: int, rng: np.random.Generator) -> MaskingPlan:
    """Random-order masking plan: permuted positions split by cosine shares."""
    sizes = cosine_step_sizes(g, k)
    perm = rng.permutation(g)
    bounds = np.cumsum(sizes)[:-1]
    return MaskingPlan(tuple(np.sort(chunk) for chunk in np.split(perm, bounds)))


def _as_f32(x: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32))


def train_step(
    model: MARModel,
    optimizer: torch.optim.Optimizer,
    text_ids: np.ndarray,
    cond_tokens: np.ndarray,
    target_tokens: np.ndarray,
    cfg: TrainConfig,
    rng: np.random.Generator,
    generator: torch.Generator,
) -> float:
    """One optimizer update; returns the diffusion loss on hidden positions.

    With probability ``cfg.cond_dropout`` a row has both condition segments
    replaced by the learned null embeddings (guidance-style dropout).
    """
    b, g = target_tokens.shape[0], target_tokens.shape[1]
    visible = _batch_training_masks(b, g, (cfg.mask_ratio_lo, cfg.mask_ratio_hi), rng)
    drop = rng.random(b) < cfg.cond_dropout
    target = _as_f32(target_tokens)
    batch = SequenceBatch(
        text=torch.from_numpy(np.ascontiguousarray(text_ids, dtype=np.int64)),
        imgcond=_as_f32(cond_tokens),
        gen=target,
        visible=torch.from_numpy(visible),
        layout=model.layout,
        policy=model.policy,
        null_text=torch.from_numpy(drop),
        null_imgcond=torch.from_numpy(drop),
    )
    z = model.backbone(batch)
    loss = diffusion_loss(
        model.denoiser, model.schedule, target, z,
        select=torch.from_numpy(~visible), generator=generator,
        repeats=cfg.loss_repeats,
    )
    if not bool(torch.isfinite(loss)):
        raise NonFiniteError("training loss became non-finite")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def train_loop(
    model: MARModel,
    data,
    cfg: TrainConfig,
    on_step: Callable[[int, float], None] | None = None,
    on_checkpoint: Callable[[int], None] | None = None,
) -> list[float]:
    """Run ``cfg.steps`` updates; ``data.batch(b, rng)`` feeds each step."""
    rng = np.random.default_rng(cfg.seed)
    generator = torch.Generator().manual_seed(cfg.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    losses: list[float] = []
    for step in range(1, cfg.steps + 1):
        text_ids, cond_tokens, target_tokens = data.batch(cfg.batch_size, rng)
        loss = train_step(
            model, optimizer, text_ids, cond_tokens, target_tokens, cfg, rng, generator
        )
        losses.append(loss)
        if on_step is not None:
            on_step(step, loss)
        if on_checkpoint is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            on_checkpoint(step)
    return losses


def _cond_image_tokens(cond_image: np.ndarray | None, spec: ImageSpec) -> tuple[np.ndarray, bool]:
    """Patch tokens for one condition image, or zeros with a null flag."""
    if cond_image is None:
        return np.zeros((spec.gen_len, spec.token_dim), dtype=np.float32), True
    img = np.asarray(cond_image)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.shape[2] == 1 and spec.channels > 1:
        img = np.repeat(img, spec.channels, axis=2)
    if img.shape != (spec.size, spec.size, spec.channels):
        raise ValueError(
            f"condition image shaped {img.shape}, expected {(spec.size, spec.size, spec.channels)}"
        )
    return patchify(img, spec.patch_size).tokens.astype(np.float32), False


def generate_batch(
    model: MARModel,
    texts: Sequence[str | None],
    cond_images: Sequence[np.ndarray | None],
    k: int = 8,
    temperature: float = 1.0,
    guidance_scale: float = 1.0,
    seed: int = 0,
    trace_hook: Callable[[int, torch.Tensor], None] | None = None,
) -> np.ndarray:
    """Generate a batch of images, one per (text, condition image) pair.

    All generated positions start hidden; each plan step runs the backbone on
    the current visibility, optionally blends in a null-condition forward when
    ``guidance_scale`` is not 1, samples the step's tokens from the diffusion
    head, and reveals them. Deterministic for a fixed seed. ``trace_hook``
    receives (step index, full decoder hidden states) per step.
    """
    if len(texts) != len(cond_images):
        raise ValueError("texts and cond_images must have equal length")
    b = len(texts)
    if b < 1:
        raise ValueError("need at least one sample")
    spec = model.image_spec
    g = spec.gen_len
    rng = np.random.default_rng(seed)
    generator = torch.Generator().manual_seed(seed)

    text_ids = np.zeros((b, model.max_text_len), dtype=np.int64)
    null_text = np.zeros(b, dtype=bool)
    for i, text in enumerate(texts):
        if text is None:
            null_text[i] = True
        else:
            text_ids[i], _ = encode_text(text, model.vocab, model.max_text_len)
    cond_tokens = np.zeros((b, g, spec.token_dim), dtype=np.float32)
    null_cond = np.zeros(b, dtype=bool)
    for i, img in enumerate(cond_images):
        cond_tokens[i], null_cond[i] = _cond_image_tokens(img, spec)

    plan = make_generation_plan(g, k, rng)
    schedule = model.sampling_schedule()
    gen_tokens = torch.zeros(b, g, spec.token_dim)
    visible = torch.zeros(b, g, dtype=torch.bool)
    base = dict(
        text=torch.from_numpy(text_ids),
        imgcond=torch.from_numpy(cond_tokens),
        layout=model.layout,
        policy=model.policy,
    )
    with torch.no_grad():
        for step_idx, positions in enumerate(plan.steps):
            batch = SequenceBatch(
                gen=gen_tokens, visible=visible.clone(),
                null_text=torch.from_numpy(null_text),
                null_imgcond=torch.from_numpy(null_cond),
                **base,
            )
            if trace_hook is None:
                z = model.backbone(batch)
            else:
                z, hidden = model.backbone(batch, return_hidden=True)
                trace_hook(step_idx, hidden)
            pos = torch.from_numpy(positions)
            z_sel = z[:, pos]
            if guidance_scale != 1.0:
                null_batch = SequenceBatch(
                    gen=gen_tokens, visible=visible.clone(),
                    null_text=torch.ones(b, dtype=torch.bool),
                    null_imgcond=torch.ones(b, dtype=torch.bool),
                    **base,
                )
                z_null = model.backbone(null_batch)[:, pos]
                z_sel = z_null + guidance_scale * (z_sel - z_null)
            flat = sample_tokens(
                model.denoiser, schedule, z_sel.reshape(b * len(positions), -1),
                temperature=temperature, generator=generator,
            )
            gen_tokens[:, pos] = flat.reshape(b, len(positions), -1)
            visible[:, pos] = True
    assert bool(visible.all()), "every generated position must be sampled exactly once"

    images = np.empty((b, spec.size, spec.size, spec.channels), dtype=np.float32)
    for i in range(b):
        grid = ImageTokenGrid(
            tokens=gen_tokens[i].numpy(), grid_h=spec.grid, grid_w=spec.grid,
            patch_size=spec.patch_size,
        )
        images[i] = unpatchify(grid)
    return images


def generate(
    model: MARModel,
    text: str | None,
    cond_image: np.ndarray | None,
    k: int = 8,
    temperature: float = 1.0,
    guidance_scale: float = 1.0,
    seed: int = 0,
) -> np.ndarray:
    """Single-image convenience wrapper around :func:`generate_batch`."""
    return generate_batch(
        model, [text], [cond_image], k=k, temperature=temperature,
        guidance_scale=guidance_scale, seed=seed,
    )[0]
