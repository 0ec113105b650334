"""MAE-style encoder-decoder transformer over one concatenated sequence.

The encoder runs on condition tokens plus the currently visible generated
tokens; the decoder re-inserts a learned mask embedding at the hidden
generated positions and processes the full sequence. Every attention layer
applies the block-structured mask from :mod:`selfctl.seqmask` as an additive
-1e9 bias before the softmax, so disallowed links carry exactly zero weight
and exactly zero gradient.

Parameters are read-only during forward/generation and may be shared across
threads; training mutates them from a single writer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .errors import NonFiniteError
from .seqmask import AttentionPolicy, SegmentLayout, build_attention_mask

MASK_FILL = -1e9


@dataclass(frozen=True)
class BackboneConfig:
    width: int = 256
    depth_enc: int = 4
    depth_dec: int = 4
    heads: int = 4
    token_dim: int = 48
    text_vocab_size: int = 8
    max_text_len: int = 4
    max_imgcond_len: int = 16
    max_gen_len: int = 16

    def __post_init__(self) -> None:
        if self.width % self.heads != 0:
            raise ValueError("width must be divisible by heads")
        for name in ("width", "depth_enc", "depth_dec", "heads", "token_dim",
                     "text_vocab_size", "max_gen_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.max_text_len < 0 or self.max_imgcond_len < 0:
            raise ValueError("max segment lengths must be >= 0")


@dataclass
class SequenceBatch:
    """One batch of the concatenated sequence plus its visibility state.

    ``visible`` marks generated positions whose true token values are known
    to the model; hidden positions are the ones being predicted. ``null_*``
    rows have that condition segment replaced by a learned null embedding.
    """

    text: torch.Tensor      # (B, T) int64 caption ids
    imgcond: torch.Tensor   # (B, C, token_dim)
    gen: torch.Tensor       # (B, G, token_dim)
    visible: torch.Tensor   # (B, G) bool
    layout: SegmentLayout
    policy: AttentionPolicy
    null_text: torch.Tensor = field(default=None)     # (B,) bool
    null_imgcond: torch.Tensor = field(default=None)  # (B,) bool

    def __post_init__(self) -> None:
        b = self.gen.shape[0]
        if self.null_text is None:
            self.null_text = torch.zeros(b, dtype=torch.bool)
        if self.null_imgcond is None:
            self.null_imgcond = torch.zeros(b, dtype=torch.bool)
        t, c, g = self.layout.lengths
        if self.text.shape != (b, t):
            raise ValueError(f"text ids shaped {tuple(self.text.shape)}, layout wants {(b, t)}")
        if self.imgcond.shape[:2] != (b, c):
            raise ValueError("image-condition tokens do not match the layout")
        if self.gen.shape[:2] != (b, g):
            raise ValueError("generated tokens do not match the layout")
        if self.visible.shape != (b, g):
            raise ValueError("visibility flags must be (B, G)")

    @property
    def batch_size(self) -> int:
        return self.gen.shape[0]


class Attention(nn.Module):
    """Multi-head self-attention with an additive mask bias."""

    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.scale = (width // heads) ** -0.5
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)

    def forward(self, x, bias, need_weights: bool = False):
        b, n, w = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, w // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv.unbind(0)
        att = (q @ k.transpose(-2, -1)) * self.scale
        if bias is not None:
            att = att + bias
        att = att.softmax(dim=-1)
        out = (att @ v).transpose(1, 2).reshape(b, n, w)
        out = self.proj(out)
        if need_weights:
            return out, att
        return out


class Block(nn.Module):
    """Pre-norm transformer block: masked attention then a 2-layer MLP."""

    def __init__(self, width: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        hidden = int(width * mlp_ratio)
        self.norm1 = nn.LayerNorm(width)
        self.attn = Attention(width, heads)
        self.norm2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(nn.Linear(width, hidden), nn.GELU(), nn.Linear(hidden, width))

    def forward(self, x, bias):
        x = x + self.attn(self.norm1(x), bias)
        x = x + self.mlp(self.norm2(x))
        return x


class Backbone(nn.Module):
    """Encoder-decoder producing one conditioning vector per generated position."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.width
        self.text_embed = nn.Embedding(cfg.text_vocab_size, w)
        self.imgcond_proj = nn.Linear(cfg.token_dim, w)
        self.gen_proj = nn.Linear(cfg.token_dim, w)
        self.segment_embed = nn.Parameter(torch.zeros(3, w))
        self.mask_token = nn.Parameter(torch.zeros(w))
        self.null_text_embed = nn.Parameter(torch.zeros(w))
        self.null_imgcond_embed = nn.Parameter(torch.zeros(w))
        # positional embeddings restart at 0 inside each segment
        self.enc_pos_text = nn.Parameter(torch.zeros(1, cfg.max_text_len, w))
        self.enc_pos_imgcond = nn.Parameter(torch.zeros(1, cfg.max_imgcond_len, w))
        self.enc_pos_gen = nn.Parameter(torch.zeros(1, cfg.max_gen_len, w))
        self.dec_pos_text = nn.Parameter(torch.zeros(1, cfg.max_text_len, w))
        self.dec_pos_imgcond = nn.Parameter(torch.zeros(1, cfg.max_imgcond_len, w))
        self.dec_pos_gen = nn.Parameter(torch.zeros(1, cfg.max_gen_len, w))
        self.encoder_blocks = nn.ModuleList(Block(w, cfg.heads) for _ in range(cfg.depth_enc))
        self.encoder_norm = nn.LayerNorm(w)
        self.decoder_embed = nn.Linear(w, w)
        self.decoder_blocks = nn.ModuleList(Block(w, cfg.heads) for _ in range(cfg.depth_dec))
        self.decoder_norm = nn.LayerNorm(w)
        self._init_weights()

    def _init_weights(self) -> None:
        for p in (self.segment_embed, self.mask_token, self.null_text_embed,
                  self.null_imgcond_embed, self.enc_pos_text, self.enc_pos_imgcond,
                  self.enc_pos_gen, self.dec_pos_text, self.dec_pos_imgcond,
                  self.dec_pos_gen, self.text_embed.weight):
            nn.init.trunc_normal_(p, std=0.02)
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.xavier_uniform_(m.weight)
                nn.init.zeros_(m.bias)

    def _check_layout(self, layout: SegmentLayout) -> None:
        t, c, g = layout.lengths
        cfg = self.cfg
        if t > cfg.max_text_len or c > cfg.max_imgcond_len or g > cfg.max_gen_len:
            raise ValueError(f"layout {layout.lengths} exceeds configured maxima")

    def embed(self, batch: SequenceBatch) -> torch.Tensor:
        """Embed the full sequence: (B, T+C+G, width).

        Hidden generated positions get the learned mask embedding in place of
        their token value; rows flagged null get their condition segment
        content replaced by the corresponding null embedding. Per-segment
        positional and segment embeddings are added.
        """
        self._check_layout(batch.layout)
        t_len, c_len, g_len = batch.layout.lengths
        if batch.text.numel():
            if int(batch.text.min()) < 0 or int(batch.text.max()) >= self.cfg.text_vocab_size:
                raise ValueError("text id out of vocabulary range")
        t_emb = self.text_embed(batch.text)
        t_emb = torch.where(batch.null_text.view(-1, 1, 1), self.null_text_embed, t_emb)
        c_emb = self.imgcond_proj(batch.imgcond)
        c_emb = torch.where(batch.null_imgcond.view(-1, 1, 1), self.null_imgcond_embed, c_emb)
        g_emb = self.gen_proj(batch.gen)
        g_emb = torch.where(batch.visible.unsqueeze(-1), g_emb, self.mask_token)
        return torch.cat(
            [
                t_emb + self.enc_pos_text[:, :t_len] + self.segment_embed[0],
                c_emb + self.enc_pos_imgcond[:, :c_len] + self.segment_embed[1],
                g_emb + self.enc_pos_gen[:, :g_len] + self.segment_embed[2],
            ],
            dim=1,
        )

    def _visible_indices(self, batch: SequenceBatch) -> torch.Tensor:
        """Per-row indices of encoder-visible positions, shape (B, T+C+nvis).

        The number of visible generated positions must match across the batch
        so the gathered encoder input stays rectangular.
        """
        t_len, c_len, _ = batch.layout.lengths
        counts = batch.visible.sum(dim=1)
        n_vis = int(counts[0])
        if not bool((counts == n_vis).all()):
            raise ValueError("visible generated count must match across the batch")
        b = batch.batch_size
        cond_idx = torch.arange(t_len + c_len).unsqueeze(0).expand(b, -1)
        order = torch.argsort((~batch.visible).to(torch.int64), dim=1, stable=True)
        gen_idx = order[:, :n_vis] + (t_len + c_len)
        return torch.cat([cond_idx, gen_idx], dim=1)

    def forward(self, batch: SequenceBatch, return_hidden: bool = False):
        """Conditioning vectors z for every generated position: (B, G, width).

        With ``return_hidden`` the full decoder hidden states (B, N, width)
        are returned as well, for diagnostics and leakage checks.
        """
        dtype = self.mask_token.dtype
        t_len, c_len, _ = batch.layout.lengths
        n = batch.layout.total_len
        b, w = batch.batch_size, self.cfg.width

        full = self.embed(batch)
        allow = torch.from_numpy(build_attention_mask(batch.layout, batch.policy))

        vis_idx = self._visible_indices(batch)
        x = torch.gather(full, 1, vis_idx.unsqueeze(-1).expand(-1, -1, w))
        enc_allow = allow[vis_idx.unsqueeze(2), vis_idx.unsqueeze(1)]
        enc_bias = ((~enc_allow).to(dtype) * MASK_FILL).unsqueeze(1)
        for blk in self.encoder_blocks:
            x = blk(x, enc_bias)
        x = self.encoder_norm(x)

        dec_pos = torch.cat(
            [self.dec_pos_text[:, :t_len], self.dec_pos_imgcond[:, :c_len],
             self.dec_pos_gen[:, : batch.layout.gen_len]],
            dim=1,
        )
        canvas = self.mask_token.expand(b, n, w).scatter(
            1, vis_idx.unsqueeze(-1).expand(-1, -1, w), self.decoder_embed(x)
        )
        h = canvas + dec_pos
        dec_bias = ((~allow).to(dtype) * MASK_FILL).view(1, 1, n, n)
        for blk in self.decoder_blocks:
            h = blk(h, dec_bias)
        h = self.decoder_norm(h)
        if not bool(torch.isfinite(h).all()):
            raise NonFiniteError("backbone forward produced non-finite activations")
        z = h[:, t_len + c_len :]
        if return_hidden:
            return z, h
        return z
