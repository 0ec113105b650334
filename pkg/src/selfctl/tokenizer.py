"""Caption and image tokenization.

Images become continuous patch tokens (no vector quantization, no learned
autoencoder): each token is the flattened pixel block of one patch, rescaled
from [0, 1] to [-1, 1]. Captions go through a whitespace word vocabulary with
id 0 reserved for padding and id 1 for unknown words. All transforms are
pure and stateless.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

PAD_ID = 0
UNK_ID = 1

__all__ = [
    "PAD_ID",
    "UNK_ID",
    "TextVocab",
    "ImageTokenGrid",
    "patchify",
    "unpatchify",
    "encode_text",
]


@dataclass(frozen=True)
class TextVocab:
    """Word -> id map; ids are contiguous and start at 2 (0=pad, 1=unk)."""

    words: tuple[str, ...]

    def __post_init__(self) -> None:
        if len(set(self.words)) != len(self.words):
            raise ValueError("vocabulary contains duplicate words")
        object.__setattr__(self, "_ids", {w: i + 2 for i, w in enumerate(self.words)})

    @classmethod
    def build(cls, captions: Iterable[str]) -> "TextVocab":
        """Collect the sorted unique lowercase words of a caption set."""
        seen = sorted({w for cap in captions for w in cap.lower().split()})
        return cls(tuple(seen))

    @property
    def size(self) -> int:
        return len(self.words) + 2

    def id_of(self, word: str) -> int:
        return self._ids.get(word.lower(), UNK_ID)

    def save(self, path: str | Path) -> None:
        """One word per line; line number starting at 2 equals the word's id."""
        text = "\n".join(self.words)
        Path(path).write_text(text + "\n" if text else "", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "TextVocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(tuple(line for line in lines if line))


@dataclass
class ImageTokenGrid:
    """Continuous patch tokens of one image, in row-major patch order."""

    tokens: np.ndarray  # (num_patches, token_dim)
    grid_h: int
    grid_w: int
    patch_size: int

    def __post_init__(self) -> None:
        if self.tokens.ndim != 2 or self.tokens.shape[0] != self.grid_h * self.grid_w:
            raise ValueError("token array does not match the patch grid")
        if self.tokens.shape[1] % (self.patch_size ** 2) != 0:
            raise ValueError("token_dim must be a multiple of patch_size**2")
        if not np.isfinite(self.tokens).all():
            raise ValueError("tokens must be finite")

    @property
    def channels(self) -> int:
        return self.tokens.shape[1] // (self.patch_size ** 2)

    @property
    def token_dim(self) -> int:
        return self.tokens.shape[1]


def patchify(image: np.ndarray, patch_size: int) -> ImageTokenGrid:
    """Split an H x W x C image in [0, 1] into per-patch tokens in [-1, 1].

    Token layout is channel-major: the p*p block of channel 0, then channel 1,
    and so on. H and W must be divisible by ``patch_size``.
    """
    img = np.asarray(image)
    if img.ndim != 3:
        raise ValueError(f"expected an H x W x C array, got shape {img.shape}")
    if patch_size < 1:
        raise ValueError("patch_size must be >= 1")
    h, w, c = img.shape
    if h % patch_size or w % patch_size:
        raise ValueError(f"image size {h}x{w} not divisible by patch size {patch_size}")
    if not np.issubdtype(img.dtype, np.floating):
        img = img.astype(np.float32)
    gh, gw = h // patch_size, w // patch_size
    blocks = img.reshape(gh, patch_size, gw, patch_size, c)
    blocks = blocks.transpose(0, 2, 4, 1, 3).reshape(gh * gw, c * patch_size * patch_size)
    return ImageTokenGrid(tokens=blocks * 2.0 - 1.0, grid_h=gh, grid_w=gw, patch_size=patch_size)


def unpatchify(grid: ImageTokenGrid) -> np.ndarray:
    """Inverse of :func:`patchify`; output is clipped to [0, 1]."""
    p, c = grid.patch_size, grid.channels
    x = (grid.tokens + 1.0) / 2.0
    x = x.reshape(grid.grid_h, grid.grid_w, c, p, p)
    x = x.transpose(0, 3, 1, 4, 2).reshape(grid.grid_h * p, grid.grid_w * p, c)
    return np.clip(x, 0.0, 1.0)


def encode_text(caption: str, vocab: TextVocab, max_len: int) -> tuple[np.ndarray, int]:
    """Lowercase whitespace tokenization, padded or truncated to ``max_len``.

    Returns the id array and the number of non-padding ids in it.
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    words = caption.lower().split()[:max_len]
    ids = [vocab.id_of(w) for w in words]
    length = len(ids)
    ids.extend([PAD_ID] * (max_len - length))
    return np.asarray(ids, dtype=np.int64), length
