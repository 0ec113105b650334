"""Synthetic captioned shapes with paired silhouette condition images.

Nine classes: {red, green, blue} x {square, circle, cross}, rendered on a
16 x 16 black canvas with optional position/size jitter. The condition image
is the binarized luminance (channel mean) of the target, i.e. the shape's
silhouette. A template-matching probe classifies generated images so the
conditioning fidelity of a trained model can be scored without any learned
evaluator; the probe must prove itself on fresh clean samples before it is
trusted.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tokenizer import TextVocab, encode_text, patchify

CANVAS = 16
BASE_SIZE = 6
LUMA_THRESHOLD = 0.2

COLOR_RGB = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
}
SHAPE_NAMES = ("square", "circle", "cross")
CLASS_PAIRS = tuple((c, s) for c in COLOR_RGB for s in SHAPE_NAMES)
CAPTIONS = tuple(f"{c} {s}" for c, s in CLASS_PAIRS)

__all__ = [
    "Sample",
    "COLOR_RGB",
    "SHAPE_NAMES",
    "CLASS_PAIRS",
    "CAPTIONS",
    "make_sample",
    "probe_classify",
    "build_vocab",
    "export_dataset",
    "SyntheticTaskData",
]


@dataclass(frozen=True)
class Sample:
    image: np.ndarray    # (16, 16, 3) float32 in [0, 1]
    cond: np.ndarray     # (16, 16, 1) float32 silhouette
    caption: str
    color: str
    shape: str


def _shape_mask(shape: str, size: int, cy: int, cx: int) -> np.ndarray:
    """Boolean silhouette of one shape on the canvas.

    The shape occupies a size x size box whose top-left corner is
    (cy - size//2, cx - size//2); the default center (8, 8) with size 6
    covers rows and columns 5..10.
    """
    top, left = cy - size // 2, cx - size // 2
    mask = np.zeros((CANVAS, CANVAS), dtype=bool)
    if shape == "square":
        mask[top : top + size, left : left + size] = True
    elif shape == "circle":
        yy, xx = np.mgrid[0:CANVAS, 0:CANVAS]
        center_y, center_x = top + (size - 1) / 2, left + (size - 1) / 2
        mask = (yy - center_y) ** 2 + (xx - center_x) ** 2 <= (size / 2) ** 2
    elif shape == "cross":
        thickness = max(2, size // 3)
        band = top + (size - thickness) // 2
        mask[band : band + thickness, left : left + size] = True
        band = left + (size - thickness) // 2
        mask[top : top + size, band : band + thickness] = True
    else:
        raise ValueError(f"unknown shape {shape!r}")
    return mask


def make_sample(
    color: str, shape: str, jitter: int = 0, rng: np.random.Generator | None = None
) -> Sample:
    """Render one captioned sample; deterministic given the rng state.

    ``jitter`` bounds the shape center's offset from the canvas center; a
    non-zero jitter also randomizes the size within one pixel of the base.
    """
    if color not in COLOR_RGB:
        raise ValueError(f"unknown color {color!r}")
    if shape not in SHAPE_NAMES:
        raise ValueError(f"unknown shape {shape!r}")
    if rng is None:
        rng = np.random.default_rng()
    size = BASE_SIZE
    cy = cx = CANVAS // 2
    if jitter:
        size = BASE_SIZE + int(rng.integers(-1, 2))
        cy += int(rng.integers(-jitter, jitter + 1))
        cx += int(rng.integers(-jitter, jitter + 1))
    # keep the bounding box on the canvas
    half = size // 2
    cy = int(np.clip(cy, half, CANVAS - (size - half)))
    cx = int(np.clip(cx, half, CANVAS - (size - half)))
    mask = _shape_mask(shape, size, cy, cx)
    image = np.zeros((CANVAS, CANVAS, 3), dtype=np.float32)
    image[mask] = COLOR_RGB[color]
    cond = (image.mean(axis=2, keepdims=True) > 0.1).astype(np.float32)
    return Sample(image=image, cond=cond, caption=f"{color} {shape}", color=color, shape=shape)


def _templates() -> list[tuple[str, np.ndarray]]:
    out = []
    for shape in SHAPE_NAMES:
        for size in (BASE_SIZE - 1, BASE_SIZE, BASE_SIZE + 1):
            tmpl = _shape_mask(shape, size, CANVAS // 2, CANVAS // 2)
            out.append((shape, tmpl))
    return out


_TEMPLATE_CACHE = _templates()


def probe_classify(image: np.ndarray) -> tuple[str, str]:
    """Classify a 16 x 16 x 3 image into (color, shape), or ("none", "none").

    Color is the argmax mean channel over pixels whose luminance (channel
    mean) exceeds 0.2. Shape is the best normalized cross-correlation between
    the thresholded silhouette and the canonical shape templates, searched
    over all translations and one pixel of size slack.
    """
    img = np.asarray(image, dtype=np.float32)
    if img.shape != (CANVAS, CANVAS, 3):
        raise ValueError(f"probe expects a {CANVAS}x{CANVAS}x3 image, got {img.shape}")
    fg = img.mean(axis=2) > LUMA_THRESHOLD
    if not fg.any():
        return ("none", "none")
    channel_means = img[fg].mean(axis=0)
    color = ("red", "green", "blue")[int(np.argmax(channel_means))]

    fg_f = fg.astype(np.float64)
    fg_norm = np.sqrt(fg_f.sum())
    best_score, best_shape = -1.0, SHAPE_NAMES[0]
    for shape, tmpl in _TEMPLATE_CACHE:
        ys, xs = np.nonzero(tmpl)
        h, w = ys.max() - ys.min() + 1, xs.max() - xs.min() + 1
        patch = tmpl[ys.min() : ys.min() + h, xs.min() : xs.min() + w].astype(np.float64)
        patch_norm = np.sqrt(patch.sum())
        for dy in range(CANVAS - h + 1):
            for dx in range(CANVAS - w + 1):
                overlap = float((fg_f[dy : dy + h, dx : dx + w] * patch).sum())
                score = overlap / (fg_norm * patch_norm)
                if score > best_score:
                    best_score, best_shape = score, shape
    return (color, best_shape)


def build_vocab() -> TextVocab:
    """Vocabulary over the nine training captions."""
    return TextVocab.build(CAPTIONS)


def export_dataset(directory: str | Path, n: int, jitter: int = 2, seed: int = 0) -> Path:
    """Write n samples (n divisible by 9, exact class balance) as PNG + manifest.

    Layout: ``manifest.jsonl`` with one record per line naming the target and
    condition files plus caption and labels.
    """
    from PIL import Image

    if n < 9 or n % 9:
        raise ValueError("n must be a positive multiple of 9 for exact class balance")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    classes = list(CLASS_PAIRS) * (n // 9)
    rng.shuffle(classes)
    with open(directory / "manifest.jsonl", "w", encoding="utf-8") as manifest:
        for i, (color, shape) in enumerate(classes):
            sample = make_sample(color, shape, jitter=jitter, rng=rng)
            target_name = f"target_{i:05d}.png"
            cond_name = f"cond_{i:05d}.png"
            Image.fromarray(_to_u8(sample.image)).save(directory / target_name)
            Image.fromarray(_to_u8(sample.cond[:, :, 0])).save(directory / cond_name)
            record = {
                "target": target_name,
                "cond": cond_name,
                "caption": sample.caption,
                "color": sample.color,
                "shape": sample.shape,
            }
            manifest.write(json.dumps(record) + "\n")
    return directory


def _to_u8(x: np.ndarray) -> np.ndarray:
    return (np.clip(x, 0.0, 1.0) * 255.0).round().astype(np.uint8)


class SyntheticTaskData:
    """On-the-fly training batches: caption ids, condition tokens, target tokens.

    Grayscale condition silhouettes are replicated across the target's
    channel count so both token streams share one token dimension.
    """

    def __init__(
        self,
        vocab: TextVocab,
        patch_size: int = 4,
        channels: int = 3,
        max_text_len: int = 4,
        jitter: int = 2,
    ):
        self.vocab = vocab
        self.patch_size = patch_size
        self.channels = channels
        self.max_text_len = max_text_len
        self.jitter = jitter

    def batch(self, b: int, rng: np.random.Generator):
        grid = (CANVAS // self.patch_size) ** 2
        token_dim = self.patch_size ** 2 * self.channels
        text_ids = np.zeros((b, self.max_text_len), dtype=np.int64)
        cond = np.zeros((b, grid, token_dim), dtype=np.float32)
        target = np.zeros((b, grid, token_dim), dtype=np.float32)
        for i in range(b):
            color, shape = CLASS_PAIRS[rng.integers(len(CLASS_PAIRS))]
            sample = make_sample(color, shape, jitter=self.jitter, rng=rng)
            text_ids[i], _ = encode_text(sample.caption, self.vocab, self.max_text_len)
            cond_img = np.repeat(sample.cond, self.channels, axis=2)
            cond[i] = patchify(cond_img, self.patch_size).tokens
            target[i] = patchify(sample.image, self.patch_size).tokens
        return text_ids, cond, target
