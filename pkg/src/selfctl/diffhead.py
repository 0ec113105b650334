"""Per-token diffusion head.

Each generated token's continuous distribution p(x | z) is modeled by a small
epsilon-prediction denoiser conditioned on the backbone vector z, trained
with the standard forward-noising objective and sampled by ancestral reverse
diffusion. This replaces a vector-quantized codebook: tokens stay real-valued
end to end.

Loss and sampling are pure given parameters and the passed-in generator;
random streams are never shared mutable state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import NonFiniteError

__all__ = [
    "NoiseSchedule",
    "DenoiserConfig",
    "Denoiser",
    "q_sample",
    "diffusion_loss",
    "sample_tokens",
    "timestep_embedding",
]


@dataclass(eq=False)
class NoiseSchedule:
    """Beta schedule with cumulative-product alpha tables, 1-based steps.

    ``betas[i]`` is the variance added at step i+1; ``alpha_bars[i]`` is the
    signal fraction remaining after step i+1, with the step-0 convention that
    no noise has been added yet. ``timestep_map[i]`` is the original 1-based
    training step to feed the denoiser, so respaced sampling schedules keep
    addressing the timestep embedding the denoiser was trained on.
    """

    betas: torch.Tensor
    timestep_map: torch.Tensor = None

    def __post_init__(self) -> None:
        self.betas = torch.as_tensor(self.betas, dtype=torch.float64)
        if self.betas.ndim != 1 or self.betas.numel() < 1:
            raise ValueError("betas must be a non-empty vector")
        if bool((self.betas <= 0).any()) or bool((self.betas >= 1).any()):
            raise ValueError("betas must lie strictly inside (0, 1)")
        self.alphas = 1.0 - self.betas
        self.alpha_bars = torch.cumprod(self.alphas, dim=0)
        if bool((self.alpha_bars[1:] >= self.alpha_bars[:-1]).any()):
            raise ValueError("alpha_bar must be strictly decreasing")
        if self.timestep_map is None:
            self.timestep_map = torch.arange(1, self.steps + 1, dtype=torch.int64)
        else:
            self.timestep_map = torch.as_tensor(self.timestep_map, dtype=torch.int64)
        if self.timestep_map.shape != self.betas.shape:
            raise ValueError("timestep_map must match betas in length")

    @property
    def steps(self) -> int:
        return self.betas.numel()

    @classmethod
    def linear(cls, steps: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> "NoiseSchedule":
        if steps < 1:
            raise ValueError("steps must be >= 1")
        return cls(torch.linspace(beta_start, beta_end, steps, dtype=torch.float64))

    def respaced(self, num_steps: int) -> "NoiseSchedule":
        """Evenly strided sub-schedule with the same marginal alpha_bars."""
        if not 1 <= num_steps <= self.steps:
            raise ValueError("num_steps must be in 1..steps")
        if num_steps == 1:
            idx = torch.tensor([self.steps - 1])
        else:
            idx = torch.linspace(0, self.steps - 1, num_steps).round().to(torch.int64)
        ab = self.alpha_bars[idx]
        ab_prev = torch.cat([torch.ones(1, dtype=torch.float64), ab[:-1]])
        return NoiseSchedule(betas=1.0 - ab / ab_prev, timestep_map=self.timestep_map[idx])


def q_sample(schedule: NoiseSchedule, x0: torch.Tensor, s, noise: torch.Tensor) -> torch.Tensor:
    """Forward-noised sample: sqrt(abar_s) * x0 + sqrt(1 - abar_s) * noise."""
    s = torch.as_tensor(s, dtype=torch.int64)
    if bool((s < 1).any()) or bool((s > schedule.steps).any()):
        raise ValueError(f"diffusion step out of range 1..{schedule.steps}")
    ab = schedule.alpha_bars.to(x0.dtype)[s - 1]
    while ab.dim() < x0.dim():
        ab = ab.unsqueeze(-1)
    return ab.sqrt() * x0 + (1.0 - ab).sqrt() * noise


def timestep_embedding(s: torch.Tensor, dim: int, dtype: torch.dtype) -> torch.Tensor:
    """Sinusoidal embedding of (1-based) step indices, shape (*, dim)."""
    half = dim // 2
    freqs = torch.exp(
        torch.arange(half, dtype=dtype) * (-math.log(10000.0) / max(half, 1))
    )
    args = s.to(dtype).unsqueeze(-1) * freqs
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[..., :1])], dim=-1)
    return emb


@dataclass(frozen=True)
class DenoiserConfig:
    token_dim: int
    cond_dim: int
    hidden: int = 512
    blocks: int = 3
    temb_dim: int = 128

    def __post_init__(self) -> None:
        for name in ("token_dim", "cond_dim", "hidden", "blocks", "temb_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


class ResidualBlock(nn.Module):
    def __init__(self, hidden: int):
        super().__init__()
        self.norm = nn.LayerNorm(hidden)
        self.fc1 = nn.Linear(hidden, hidden)
        self.fc2 = nn.Linear(hidden, hidden)
        self.act = nn.SiLU()

    def forward(self, h, cond):
        return h + self.fc2(self.act(self.fc1(self.norm(h) + cond)))


class Denoiser(nn.Module):
    """Noise predictor eps(x_s, s, z) built from residual MLP blocks.

    The timestep embedding and the conditioning vector are summed and added
    to the input of every residual block.
    """

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        self.in_proj = nn.Linear(cfg.token_dim, cfg.hidden)
        self.t_mlp = nn.Sequential(
            nn.Linear(cfg.temb_dim, cfg.hidden), nn.SiLU(), nn.Linear(cfg.hidden, cfg.hidden)
        )
        self.z_proj = nn.Linear(cfg.cond_dim, cfg.hidden)
        self.blocks = nn.ModuleList(ResidualBlock(cfg.hidden) for _ in range(cfg.blocks))
        self.out_norm = nn.LayerNorm(cfg.hidden)
        self.out_proj = nn.Linear(cfg.hidden, cfg.token_dim)

    def forward(self, x, s, z):
        temb = timestep_embedding(s, self.cfg.temb_dim, x.dtype)
        cond = self.t_mlp(temb) + self.z_proj(z)
        h = self.in_proj(x)
        for blk in self.blocks:
            h = blk(h, cond)
        return self.out_proj(self.out_norm(h))


def diffusion_loss(
    denoiser: Denoiser,
    schedule: NoiseSchedule,
    x0: torch.Tensor,
    z: torch.Tensor,
    select: torch.Tensor | None = None,
    generator: torch.Generator | None = None,
    repeats: int = 1,
) -> torch.Tensor:
    """Mean over selected positions of ||eps - eps_hat||^2.

    ``x0`` is (..., token_dim) and ``z`` (..., cond_dim) with matching leading
    shape; ``select`` is a boolean mask over the leading shape choosing the
    positions that contribute (hidden positions during training). Steps are
    drawn uniformly from 1..S and eps from a standard gaussian. ``repeats``
    gives every position that many independent (step, noise) draws, a
    lower-variance estimate of the same per-position expectation.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    if select is None:
        x0f = x0.reshape(-1, x0.shape[-1])
        zf = z.reshape(-1, z.shape[-1])
    else:
        x0f = x0[select]
        zf = z[select]
    if repeats > 1:
        x0f = x0f.repeat(repeats, 1)
        zf = zf.repeat(repeats, 1)
    m = x0f.shape[0]
    if m == 0:
        raise ValueError("no positions selected for the diffusion loss")
    s = torch.randint(1, schedule.steps + 1, (m,), generator=generator)
    noise = torch.empty_like(x0f).normal_(generator=generator)
    x_s = q_sample(schedule, x0f, s, noise)
    pred = denoiser(x_s, s, zf)
    return ((noise - pred) ** 2).sum(dim=-1).mean()


def sample_tokens(
    denoiser: Denoiser,
    schedule: NoiseSchedule,
    z: torch.Tensor,
    temperature: float = 1.0,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Ancestral reverse diffusion of one token per conditioning vector.

    All injected noise, including the initial draw, is scaled by
    ``temperature``; 0 gives the deterministic mean path.
    """
    if not 0.0 <= temperature <= 1.5:
        raise ValueError("temperature must lie in [0, 1.5]")
    m = z.shape[0]
    x = temperature * torch.empty(
        m, denoiser.cfg.token_dim, dtype=z.dtype
    ).normal_(generator=generator)
    for i in range(schedule.steps, 0, -1):
        s = schedule.timestep_map[i - 1].expand(m)
        eps = denoiser(x, s, z)
        beta = schedule.betas[i - 1].to(z.dtype)
        alpha = schedule.alphas[i - 1].to(z.dtype)
        ab = schedule.alpha_bars[i - 1].to(z.dtype)
        x = (x - beta / (1.0 - ab).sqrt() * eps) / alpha.sqrt()
        if i > 1:
            x = x + beta.sqrt() * temperature * torch.empty_like(x).normal_(generator=generator)
    if not bool(torch.isfinite(x).all()):
        raise NonFiniteError("token sampler produced non-finite values")
    return x
