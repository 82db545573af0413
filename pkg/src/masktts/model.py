"""The prompt-conditioned masked token decoder and its surrounding encoders.

One network serves every codec channel: the decoder input is the
concatenation along time of (a) raw channel-summed prompt token embeddings
carrying no positional information, and (b) target-frame vectors summing
the length-regulated, prompt-attended text states, the embeddings of the
channel being predicted (with a dedicated mask symbol at hidden
positions), the embeddings of all coarser channels when predicting a
residual channel, a channel-index embedding, and sinusoidal positions
local to the target segment. Logits are produced for target frames only.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import torch
from torch import nn
from torch.nn import functional as F

from .corpus import CorpusSpec
from .duration import DurationStack, PromptDurationEncoder
from .modules import (
    ConformerBlock,
    CrossAttention,
    FFTBlock,
    PromptEncoderLayer,
    sinusoidal_positions,
    zero_padded,
)

__all__ = [
    "ModelConfig",
    "desk_config",
    "paper_config",
    "tiny_config",
    "SynthesisModel",
    "smd_loss",
    "apply_mask_symbol",
    "save_checkpoint",
    "load_checkpoint",
    "Checkpoint",
    "CHECKPOINT_FORMAT_VERSION",
]

CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters plus codec dimensions."""

    phoneme_vocab_size: int
    num_channels: int
    codebook_size: int
    dim: int = 512
    prompt_text_blocks: int = 2
    text_blocks: int = 4
    fft_heads: int = 8
    fft_kernel: int = 3
    fft_filter: int = 3072
    prompt_encoder_layers: int = 2
    prompt_encoder_heads: int = 4
    prompt_encoder_filter: int = 2048
    prompt_encoder_kernel: int = 3
    duration_layers: int = 10
    duration_heads: int = 8
    duration_kernel: int = 3
    prompt_duration_blocks: int = 2
    cross_attention_heads: int = 8
    conformer_layers: int = 16
    conformer_heads: int = 16
    conformer_linear_units: int = 1024
    conformer_kernel: int = 5
    dropout: float = 0.1
    alpha: float = 0.6
    p_rank_weights: tuple[int, ...] | None = None  # None = linear decrease

    def __post_init__(self) -> None:
        counts = {
            "phoneme_vocab_size": self.phoneme_vocab_size,
            "codebook_size": self.codebook_size,
            "dim": self.dim,
            "prompt_text_blocks": self.prompt_text_blocks,
            "text_blocks": self.text_blocks,
            "fft_heads": self.fft_heads,
            "fft_kernel": self.fft_kernel,
            "fft_filter": self.fft_filter,
            "prompt_encoder_layers": self.prompt_encoder_layers,
            "prompt_encoder_heads": self.prompt_encoder_heads,
            "prompt_encoder_filter": self.prompt_encoder_filter,
            "prompt_encoder_kernel": self.prompt_encoder_kernel,
            "duration_layers": self.duration_layers,
            "duration_heads": self.duration_heads,
            "duration_kernel": self.duration_kernel,
            "prompt_duration_blocks": self.prompt_duration_blocks,
            "cross_attention_heads": self.cross_attention_heads,
            "conformer_layers": self.conformer_layers,
            "conformer_heads": self.conformer_heads,
            "conformer_linear_units": self.conformer_linear_units,
            "conformer_kernel": self.conformer_kernel,
        }
        for name, value in counts.items():
            if value < 1:
                raise ValueError(f"{name} must be positive, got {value}")
        if self.num_channels < 2:
            raise ValueError("num_channels must be >= 2")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must be in [0, 1]")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.p_rank_weights is not None:
            object.__setattr__(self, "p_rank_weights", tuple(int(w) for w in self.p_rank_weights))

    @property
    def mask_token_id(self) -> int:
        """Dedicated mask symbol: one past the codebook, never emitted."""
        return self.codebook_size

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        if d["p_rank_weights"] is not None:
            d["p_rank_weights"] = list(d["p_rank_weights"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if d.get("p_rank_weights") is not None:
            d["p_rank_weights"] = tuple(d["p_rank_weights"])
        return cls(**d)


def desk_config(spec: CorpusSpec) -> ModelConfig:
    """CPU-trainable preset exercising every code path in minutes."""
    return ModelConfig(
        phoneme_vocab_size=spec.phoneme_vocab_size,
        num_channels=spec.num_channels,
        codebook_size=spec.codebook_size,
        dim=128,
        prompt_text_blocks=1,
        text_blocks=2,
        fft_heads=4,
        fft_filter=256,
        prompt_encoder_layers=1,
        prompt_encoder_heads=4,
        prompt_encoder_filter=256,
        duration_layers=2,
        duration_heads=4,
        prompt_duration_blocks=1,
        cross_attention_heads=4,
        conformer_layers=2,
        conformer_heads=4,
        conformer_linear_units=256,
        dropout=0.0,
    )


def paper_config(
    phoneme_vocab_size: int = 40, num_channels: int = 8, codebook_size: int = 1024
) -> ModelConfig:
    """Full-scale preset; module sizes follow the published configuration."""
    return ModelConfig(
        phoneme_vocab_size=phoneme_vocab_size,
        num_channels=num_channels,
        codebook_size=codebook_size,
    )


def tiny_config(num_channels: int = 2, codebook_size: int = 16, dim: int = 8) -> ModelConfig:
    """Minimal float64-friendly preset for finite-difference gradient checks."""
    return ModelConfig(
        phoneme_vocab_size=12,
        num_channels=num_channels,
        codebook_size=codebook_size,
        dim=dim,
        prompt_text_blocks=1,
        text_blocks=1,
        fft_heads=2,
        fft_filter=dim * 2,
        prompt_encoder_layers=1,
        prompt_encoder_heads=2,
        prompt_encoder_filter=dim * 2,
        duration_layers=1,
        duration_heads=2,
        prompt_duration_blocks=1,
        cross_attention_heads=2,
        conformer_layers=1,
        conformer_heads=2,
        conformer_linear_units=dim * 2,
        dropout=0.0,
    )


def apply_mask_symbol(tokens: torch.Tensor, mask: torch.Tensor, mask_id: int) -> torch.Tensor:
    """Replace masked positions by the mask symbol."""
    return tokens.masked_fill(mask, mask_id)


def smd_loss(logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy over masked positions only.

    Unmasked positions contribute nothing, so their logit gradients are
    exactly zero; an all-unmasked call returns 0.
    """
    if logits.shape[:-1] != targets.shape or targets.shape != mask.shape:
        raise ValueError(
            f"shape mismatch: logits {tuple(logits.shape)}, targets "
            f"{tuple(targets.shape)}, mask {tuple(mask.shape)}"
        )
    if not bool(mask.any()):
        return logits.sum() * 0.0
    return F.cross_entropy(logits[mask], targets[mask])


class SynthesisModel(nn.Module):
    """All learned components behind one checkpointable module."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d = config.dim
        V = config.codebook_size
        N = config.num_channels

        self.phoneme_embed = nn.Embedding(config.phoneme_vocab_size, d)
        # one table per codec channel; row V is the mask symbol
        self.codec_embed = nn.ModuleList(nn.Embedding(V + 1, d) for _ in range(N))
        self.channel_embed = nn.Embedding(N, d)
        self.output_head = nn.Linear(d, V)

        self.prompt_text_encoder = nn.ModuleList(
            FFTBlock(d, config.fft_heads, config.fft_filter, config.fft_kernel, config.dropout)
            for _ in range(config.prompt_text_blocks)
        )
        self.text_encoder = nn.ModuleList(
            FFTBlock(d, config.fft_heads, config.fft_filter, config.fft_kernel, config.dropout)
            for _ in range(config.text_blocks)
        )
        self.prompt_encoder = nn.ModuleList(
            PromptEncoderLayer(
                d,
                config.prompt_encoder_heads,
                config.prompt_encoder_filter,
                config.prompt_encoder_kernel,
                config.dropout,
            )
            for _ in range(config.prompt_encoder_layers)
        )
        self.duration_extractor = DurationStack(
            d, config.duration_layers, config.duration_heads, config.duration_kernel, config.dropout
        )
        self.duration_predictor = DurationStack(
            d, config.duration_layers, config.duration_heads, config.duration_kernel, config.dropout
        )
        self.prompt_duration_encoder = PromptDurationEncoder(
            d,
            config.prompt_duration_blocks,
            config.fft_heads,
            config.fft_filter,
            config.fft_kernel,
            config.dropout,
        )
        self.cross_attention = CrossAttention(d, config.cross_attention_heads, config.dropout)
        self.conformer = nn.ModuleList(
            ConformerBlock(
                d,
                config.conformer_heads,
                config.conformer_linear_units,
                config.conformer_kernel,
                config.dropout,
            )
            for _ in range(config.conformer_layers)
        )
        self._forward_passes = 0

    # -- bookkeeping ---------------------------------------------------

    @property
    def forward_passes(self) -> int:
        """Number of decoder (conformer) forward passes since construction/reset."""
        return self._forward_passes

    def reset_forward_passes(self) -> None:
        self._forward_passes = 0

    def parameter_counts(self) -> dict[str, int]:
        """Per-module parameter counts; keys are stable audit names."""
        groups: dict[str, list[nn.Module]] = {
            "prompt_text_encoder": [self.prompt_text_encoder],
            "text_encoder": [self.text_encoder],
            "prompt_encoder": [self.prompt_encoder],
            "duration_extractor": [self.duration_extractor],
            "duration_predictor": [self.duration_predictor],
            "prompt_duration_encoder": [self.prompt_duration_encoder],
            "conformer": [self.conformer],
            "cross_attention": [self.cross_attention],
            "token_embeddings": [self.phoneme_embed, self.codec_embed, self.channel_embed],
            "output_head": [self.output_head],
        }
        counts = {
            name: sum(p.numel() for m in mods for p in m.parameters())
            for name, mods in groups.items()
        }
        counts["total"] = sum(p.numel() for p in self.parameters())
        return counts

    # -- encoders --------------------------------------------------------

    def _check_phonemes(self, phonemes: torch.Tensor) -> None:
        if phonemes.numel() == 0 or phonemes.shape[-1] == 0:
            raise ValueError("phoneme sequence must be non-empty")
        if int(phonemes.min()) < 0 or int(phonemes.max()) >= self.config.phoneme_vocab_size:
            raise ValueError(
                f"unknown phoneme id outside [0, {self.config.phoneme_vocab_size})"
            )

    def _encode_with(self, blocks, phonemes: torch.Tensor, pad: torch.Tensor | None) -> torch.Tensor:
        self._check_phonemes(phonemes)
        x = self.phoneme_embed(phonemes)
        x = x + sinusoidal_positions(x.shape[1], x.shape[2], device=x.device, dtype=x.dtype)
        x = zero_padded(x, pad)
        for block in blocks:
            x = block(x, pad)
        return x

    def encode_text(self, phonemes: torch.Tensor, pad: torch.Tensor | None = None) -> torch.Tensor:
        """Target-text states, one per phoneme."""
        return self._encode_with(self.text_encoder, phonemes, pad)

    def encode_prompt_text(self, phonemes: torch.Tensor, pad: torch.Tensor | None = None) -> torch.Tensor:
        """Prompt-side phoneme states used to query the duration extractor."""
        return self._encode_with(self.prompt_text_encoder, phonemes, pad)

    def embed_prompt_tokens(self, grid: torch.Tensor) -> torch.Tensor:
        """Channel-summed token embeddings; deliberately position free."""
        if grid.ndim != 3 or grid.shape[-1] != self.config.num_channels:
            raise ValueError(
                f"prompt grid must be (batch, frames, {self.config.num_channels})"
            )
        return sum(self.codec_embed[n](grid[:, :, n]) for n in range(self.config.num_channels))

    def encode_prompt(self, grid: torch.Tensor, pad: torch.Tensor | None = None) -> torch.Tensor:
        """Compress the channel dimension and contextualize prompt frames."""
        x = zero_padded(self.embed_prompt_tokens(grid), pad)
        for layer in self.prompt_encoder:
            x = layer(x, pad)
        return x

    # -- duration path ---------------------------------------------------

    def extract_prompt_durations(
        self,
        prompt_text_states: torch.Tensor,
        prompt_acoustic_states: torch.Tensor,
        pad: torch.Tensor | None = None,
        acoustic_pad: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """Log-durations for each prompt phoneme, read off the prompt acoustics."""
        return self.duration_extractor(
            prompt_text_states, prompt_acoustic_states, pad=pad, memory_pad=acoustic_pad
        )

    def encode_prompt_durations(
        self, log_durations: torch.Tensor, pad: torch.Tensor | None = None
    ) -> torch.Tensor:
        return self.prompt_duration_encoder(log_durations, pad)

    def predict_target_durations(
        self,
        target_text_states: torch.Tensor,
        prompt_duration_states: torch.Tensor,
        pad: torch.Tensor | None = None,
        memory_pad: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """Log-durations for each target phoneme, guided by prompt durations."""
        return self.duration_predictor(
            target_text_states, prompt_duration_states, pad=pad, memory_pad=memory_pad
        )

    # -- decoder -----------------------------------------------------------

    def cross_attend(
        self,
        text_frames: torch.Tensor,
        prompt_states: torch.Tensor,
        pad: torch.Tensor | None = None,
        prompt_pad: torch.Tensor | None = None,
        need_weights: bool = False,
    ):
        """Let frame-level text softly read the encoded prompt."""
        return self.cross_attention(
            text_frames, prompt_states, pad=pad, memory_pad=prompt_pad, need_weights=need_weights
        )

    def smd_forward(
        self,
        prompt_grid: torch.Tensor,
        conditioned_text: torch.Tensor,
        partial_tokens: torch.Tensor,
        level: int,
        lower_channels: torch.Tensor | None = None,
        prompt_pad: torch.Tensor | None = None,
        target_pad: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """Token logits over the codebook at every target frame.

        prompt_grid: (B, K, N) unmasked prompt tokens, injected raw.
        conditioned_text: (B, T, dim) length-regulated, prompt-attended text.
        partial_tokens: (B, T) tokens of the predicted channel, mask symbol
            at hidden positions.
        level: channel being predicted, 1-based.
        lower_channels: (B, T, level-1) tokens of all coarser channels;
            required for level >= 2.
        """
        N = self.config.num_channels
        if not 1 <= level <= N:
            raise ValueError(f"level must be in [1, {N}], got {level}")
        if level >= 2:
            if lower_channels is None or lower_channels.shape[-1] != level - 1:
                raise ValueError(f"level {level} requires lower_channels with {level - 1} channels")
        elif lower_channels is not None:
            raise ValueError("level 1 takes no lower channels")

        prompt_part = self.embed_prompt_tokens(prompt_grid)

        target_part = conditioned_text + self.codec_embed[level - 1](partial_tokens)
        if level >= 2:
            target_part = target_part + sum(
                self.codec_embed[c](lower_channels[:, :, c]) for c in range(level - 1)
            )
        level_index = torch.tensor(level - 1, device=partial_tokens.device)
        target_part = target_part + self.channel_embed(level_index)
        target_part = target_part + sinusoidal_positions(
            target_part.shape[1], target_part.shape[2],
            device=target_part.device, dtype=target_part.dtype,
        )
        target_part = zero_padded(target_part, target_pad)

        x = torch.cat([zero_padded(prompt_part, prompt_pad), target_part], dim=1)
        if prompt_pad is None and target_pad is None:
            pad = None
        else:
            B = x.shape[0]
            if prompt_pad is None:
                prompt_pad = torch.zeros(B, prompt_part.shape[1], dtype=torch.bool, device=x.device)
            if target_pad is None:
                target_pad = torch.zeros(B, target_part.shape[1], dtype=torch.bool, device=x.device)
            pad = torch.cat([prompt_pad, target_pad], dim=1)

        for block in self.conformer:
            x = block(x, pad)
        self._forward_passes += 1
        return self.output_head(x[:, prompt_part.shape[1] :])


# -- checkpoints -----------------------------------------------------------


@dataclass
class Checkpoint:
    model: SynthesisModel
    config: ModelConfig
    step: int
    extra: dict
    optimizer_state: dict | None
    rng_state: dict | None


def save_checkpoint(
    out_dir: Path,
    model: SynthesisModel,
    step: int = 0,
    extra: dict | None = None,
    optimizer: torch.optim.Optimizer | None = None,
    rng_state: dict | None = None,
) -> None:
    """Write a versioned checkpoint directory that round-trips bit-exactly."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "step": int(step),
        "model": model.config.to_dict(),
        "extra": extra or {},
    }
    tmp = out_dir / "config.json.tmp"
    tmp.write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")
    tmp.replace(out_dir / "config.json")
    torch.save(model.state_dict(), out_dir / "weights.pt")
    if optimizer is not None:
        torch.save(optimizer.state_dict(), out_dir / "optimizer.pt")
    if rng_state is not None:
        torch.save(rng_state, out_dir / "rng.pt")


def load_checkpoint(in_dir: Path) -> Checkpoint:
    in_dir = Path(in_dir)
    meta_path = in_dir / "config.json"
    if not meta_path.is_file():
        raise FileNotFoundError(f"no checkpoint metadata at {meta_path}")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    version = meta.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(
            f"unsupported checkpoint format version {version!r} "
            f"(expected {CHECKPOINT_FORMAT_VERSION})"
        )
    config = ModelConfig.from_dict(meta["model"])
    model = SynthesisModel(config)
    state = torch.load(in_dir / "weights.pt", weights_only=True)
    model.load_state_dict(state)
    optimizer_state = None
    opt_path = in_dir / "optimizer.pt"
    if opt_path.is_file():
        optimizer_state = torch.load(opt_path, weights_only=False)
    rng_state = None
    rng_path = in_dir / "rng.pt"
    if rng_path.is_file():
        rng_state = torch.load(rng_path, weights_only=False)
    return Checkpoint(
        model=model,
        config=config,
        step=int(meta.get("step", 0)),
        extra=meta.get("extra", {}),
        optimizer_state=optimizer_state,
        rng_state=rng_state,
    )
