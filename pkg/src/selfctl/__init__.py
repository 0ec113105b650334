"""Continuous masked autoregressive image generation with in-sequence conditioning.

Text and image conditions are injected as ordinary tokens of the generated
sequence itself, governed by a block-structured attention policy, instead of
through cross-attention; each generated token is modeled by a small per-token
diffusion head rather than a vector-quantized codebook.
"""

from .backbone import Backbone, BackboneConfig, SequenceBatch
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, build_model
from .diffhead import Denoiser, DenoiserConfig, NoiseSchedule, diffusion_loss, q_sample, sample_tokens
from .errors import NonFiniteError
from .marloop import (
    ImageSpec,
    MARModel,
    MaskingPlan,
    TrainConfig,
    generate,
    generate_batch,
    make_generation_plan,
    sample_training_mask,
    train_loop,
    train_step,
)
from .seqmask import (
    DEFAULT_POLICY,
    AttentionPolicy,
    IntraMode,
    SegmentLayout,
    ablation_policy,
    build_attention_mask,
    dump_mask,
    intra_mask,
    reachability,
)
from .tokenizer import ImageTokenGrid, TextVocab, encode_text, patchify, unpatchify

__version__ = "0.1.0"
