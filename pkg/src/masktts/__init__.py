"""Masked parallel codec-token speech synthesis at desk scale.

The package generates a deterministic synthetic codec corpus, trains a
prompt-conditioned masked token decoder with duration modeling on it, and
evaluates synthesis quality with exact oracle metrics.
"""

from .corpus import (
    Corpus,
    CorpusSpec,
    Utterance,
    generate_corpus,
    load_corpus,
    oracle_transcribe,
    prf,
    render_utterance,
    save_corpus,
    speaker_consistency,
)
from .duration import DurationSeq, duration_losses, duration_to_frames, length_regulate
from .evaluate import (
    AblationRow,
    audit_parameters,
    evaluate_checkpoint,
    levenshtein,
    per_proxy,
    run_ablation,
)
from .grid import CodecGrid, PromptSplit, sample_disjoint_encoder_prompt, split_prompt
from .inference import DecodeTrace, decode_first_channel, decode_residual_channels, measure_rtf, synthesize
from .model import (
    ModelConfig,
    SynthesisModel,
    desk_config,
    load_checkpoint,
    paper_config,
    save_checkpoint,
    smd_loss,
)
from .rng import named_stream
from .schedules import (
    MaskPlan,
    RankWeights,
    choose_first_channel_mode,
    linear_rank_weights,
    p_rank_sample,
    sample_mask,
    sample_mask_ratio,
    unmask_count_schedule,
)
from .training import TrainConfig, TrainStepReport, lr_at, run_training, train_step
from .version import __version__

__all__ = [
    "__version__",
    "Corpus",
    "CorpusSpec",
    "Utterance",
    "generate_corpus",
    "load_corpus",
    "oracle_transcribe",
    "prf",
    "render_utterance",
    "save_corpus",
    "speaker_consistency",
    "DurationSeq",
    "duration_losses",
    "duration_to_frames",
    "length_regulate",
    "AblationRow",
    "audit_parameters",
    "evaluate_checkpoint",
    "levenshtein",
    "per_proxy",
    "run_ablation",
    "CodecGrid",
    "PromptSplit",
    "sample_disjoint_encoder_prompt",
    "split_prompt",
    "DecodeTrace",
    "decode_first_channel",
    "decode_residual_channels",
    "measure_rtf",
    "synthesize",
    "ModelConfig",
    "SynthesisModel",
    "desk_config",
    "load_checkpoint",
    "paper_config",
    "save_checkpoint",
    "smd_loss",
    "named_stream",
    "MaskPlan",
    "RankWeights",
    "choose_first_channel_mode",
    "linear_rank_weights",
    "p_rank_sample",
    "sample_mask",
    "sample_mask_ratio",
    "unmask_count_schedule",
    "TrainConfig",
    "TrainStepReport",
    "lr_at",
    "run_training",
    "train_step",
]
