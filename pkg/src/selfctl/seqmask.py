"""Segment layouts, attention policies, and block-structured attention masks.

A sequence is the concatenation of three segments in a fixed order: text
condition tokens, image condition tokens, generated image tokens. An
:class:`AttentionPolicy` assigns each segment an intra-segment attention mode
plus one cross-segment mode, and :func:`build_attention_mask` turns a
(layout, policy) pair into the N x N boolean visibility matrix consumed by
every attention layer of the backbone.

Masks are materialized as plain boolean numpy arrays: sequences here are a
few dozen tokens, so explicitness and testability beat cleverness. All
functions are pure and all values immutable after construction.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

__all__ = [
    "IntraMode",
    "SegmentLayout",
    "AttentionPolicy",
    "DEFAULT_POLICY",
    "SEGMENT_NAMES",
    "intra_mask",
    "build_attention_mask",
    "reachability",
    "ablation_policy",
    "dump_mask",
]

SEGMENT_NAMES = ("text", "imgcond", "gen")


class IntraMode(enum.Enum):
    """Attention mode: causal (self + earlier only) or bidirectional (all)."""

    CAUSAL = "causal"
    BIDIRECTIONAL = "bidirectional"

    @classmethod
    def parse(cls, text: str) -> "IntraMode":
        try:
            return cls(text.strip().lower())
        except ValueError:
            raise ValueError(
                f"unknown attention mode {text!r}; expected 'causal' or 'bidirectional'"
            ) from None

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class SegmentLayout:
    """Lengths of the text / image-condition / generated segments, in order.

    Positions 0..text_len-1 are text, the next imgcond_len positions are the
    image condition, and the final gen_len positions are the generated image
    tokens. Condition segments may be empty; the generated one may not.
    """

    text_len: int
    imgcond_len: int
    gen_len: int

    def __post_init__(self) -> None:
        if self.text_len < 0 or self.imgcond_len < 0:
            raise ValueError("condition segment lengths must be >= 0")
        if self.gen_len < 1:
            raise ValueError("generated segment must hold at least one token")

    @property
    def lengths(self) -> tuple[int, int, int]:
        return (self.text_len, self.imgcond_len, self.gen_len)

    @property
    def total_len(self) -> int:
        return self.text_len + self.imgcond_len + self.gen_len

    @property
    def gen_start(self) -> int:
        return self.text_len + self.imgcond_len

    def segment_slice(self, seg: int) -> slice:
        starts = (0, self.text_len, self.gen_start)
        return slice(starts[seg], starts[seg] + self.lengths[seg])

    def segment_of(self, i: int) -> int:
        """Segment index (0=text, 1=imgcond, 2=gen) holding position ``i``."""
        if not 0 <= i < self.total_len:
            raise ValueError(f"position {i} outside sequence of length {self.total_len}")
        if i < self.text_len:
            return 0
        if i < self.gen_start:
            return 1
        return 2


@dataclass(frozen=True)
class AttentionPolicy:
    """Per-segment intra modes plus one cross-segment mode.

    ``cross_mode`` governs every query/key pair that straddles two segments:
    causal grants a query full visibility of all *earlier* segments and none
    of the later ones (group-level lower triangle); bidirectional allows all
    cross-segment pairs.
    """

    text_mode: IntraMode
    imgcond_mode: IntraMode
    gen_mode: IntraMode
    cross_mode: IntraMode

    @property
    def intra_modes(self) -> tuple[IntraMode, IntraMode, IntraMode]:
        return (self.text_mode, self.imgcond_mode, self.gen_mode)

    @classmethod
    def parse(cls, value: str) -> "AttentionPolicy":
        """Parse ``"<text>,<imgcond>,<gen>,<cross>"`` with full mode names."""
        parts = value.split(",")
        if len(parts) != 4:
            raise ValueError(
                f"policy needs 4 comma-separated modes (text,imgcond,gen,cross), got {value!r}"
            )
        return cls(*(IntraMode.parse(p) for p in parts))

    def __str__(self) -> str:
        return ",".join(
            (str(self.text_mode), str(self.imgcond_mode), str(self.gen_mode), str(self.cross_mode))
        )


# Causal text, bidirectional image segments, group-causal across segments:
# conditions steer generation but can never read the generated tokens back.
DEFAULT_POLICY = AttentionPolicy(
    text_mode=IntraMode.CAUSAL,
    imgcond_mode=IntraMode.BIDIRECTIONAL,
    gen_mode=IntraMode.BIDIRECTIONAL,
    cross_mode=IntraMode.CAUSAL,
)

# Ablation matrix rows: (text intra, image-condition intra, cross-segment).
# The generated segment stays bidirectional in every option.
_ABLATION_TABLE = {
    1: ("causal", "causal", "causal"),
    2: ("causal", "causal", "bidirectional"),
    3: ("causal", "bidirectional", "causal"),
    4: ("causal", "bidirectional", "bidirectional"),
    5: ("bidirectional", "causal", "causal"),
    6: ("bidirectional", "causal", "bidirectional"),
    7: ("bidirectional", "bidirectional", "causal"),
    8: ("bidirectional", "bidirectional", "bidirectional"),
}


def ablation_policy(option: int) -> AttentionPolicy:
    """Return the policy for ablation option 1..8 (option 3 is the default policy)."""
    if option not in _ABLATION_TABLE:
        raise ValueError(f"ablation option must be in 1..8, got {option}")
    text, imgcond, cross = (IntraMode(m) for m in _ABLATION_TABLE[option])
    return AttentionPolicy(text, imgcond, IntraMode.BIDIRECTIONAL, cross)


def intra_mask(n: int, mode: IntraMode) -> np.ndarray:
    """n x n visibility within one segment: lower-triangular or all-ones."""
    if n < 0:
        raise ValueError("segment length must be >= 0")
    if mode is IntraMode.CAUSAL:
        return np.tril(np.ones((n, n), dtype=bool))
    return np.ones((n, n), dtype=bool)


def build_attention_mask(layout: SegmentLayout, policy: AttentionPolicy) -> np.ndarray:
    """Boolean matrix, ``allow[q, k]`` true iff query q may attend to key k.

    Diagonal blocks follow each segment's intra mode. Off-diagonal blocks
    follow ``policy.cross_mode``: causal exposes earlier segments to later
    ones and nothing in the reverse direction, bidirectional exposes all.
    """
    n = layout.total_len
    allow = np.zeros((n, n), dtype=bool)
    for seg, mode in enumerate(policy.intra_modes):
        block = layout.segment_slice(seg)
        allow[block, block] = intra_mask(layout.lengths[seg], mode)
    for q_seg in range(3):
        for k_seg in range(3):
            if q_seg == k_seg:
                continue
            if policy.cross_mode is IntraMode.BIDIRECTIONAL or k_seg < q_seg:
                allow[layout.segment_slice(q_seg), layout.segment_slice(k_seg)] = True
    return allow


def reachability(mask: np.ndarray, depth: int) -> np.ndarray:
    """Transitive influence through ``depth`` stacked attention layers.

    Entry [q, k] is true iff information can flow from input position k to
    output position q. Residual connections keep every position connected to
    itself, which the mask's true diagonal already encodes, so this is the
    boolean ``depth``-th power of ``mask``.
    """
    if depth < 1:
        raise ValueError("depth must be >= 1")
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2 or mask.shape[0] != mask.shape[1]:
        raise ValueError("mask must be a square matrix")
    step = mask.astype(np.int64)
    out = mask.copy()
    for _ in range(depth - 1):
        out = (out.astype(np.int64) @ step) > 0
    return out


def dump_mask(
    layout: SegmentLayout, policy: AttentionPolicy, reach_depth: int | None = None
) -> str:
    """Text dump: header line, then one '1'/'0' row per query position.

    With ``reach_depth`` set, a second block follows with the depth-d
    reachability matrix in the same row format.
    """
    t, c, g = layout.lengths
    header = f"layout={t},{c},{g} policy={policy}"
    mask = build_attention_mask(layout, policy)
    lines = [header]
    lines.extend("".join("1" if v else "0" for v in row) for row in mask)
    if reach_depth is not None:
        reach = reachability(mask, reach_depth)
        lines.append("")
        lines.append(f"reach={reach_depth}")
        lines.extend("".join("1" if v else "0" for v in row) for row in reach)
    return "\n".join(lines)
