"""Composite-loss training: masked token losses plus duration losses.

Every step optimizes the unweighted sum of four terms: first-channel
masked cross-entropy (with the partial/full mode mixture), one
P_rank-sampled residual channel's masked cross-entropy, and the two
log-domain duration MSEs. One residual channel is drawn per batch so
tensors stay rectangular.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch.nn import functional as F

from .corpus import Corpus
from .grid import EncoderPromptSegment, PromptSplit, sample_disjoint_encoder_prompt, split_prompt
from .model import ModelConfig, SynthesisModel, apply_mask_symbol, save_checkpoint, smd_loss
from .rng import named_stream, torch_seed
from .schedules import (
    MODE_FULL,
    MODE_PARTIAL,
    RankWeights,
    choose_first_channel_mode,
    linear_rank_weights,
    p_rank_sample,
    sample_mask,
    sample_mask_ratio,
)

__all__ = [
    "TrainConfig",
    "TrainStepReport",
    "TrainResult",
    "lr_at",
    "build_batch",
    "train_step",
    "run_training",
    "report_to_line",
]


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int = 2000
    warmup_steps: int = 200
    peak_lr: float = 5e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.95
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    batch_frames: int = 512
    alpha: float = 0.6
    alpha_curriculum: bool = False
    p_rank_weights: tuple[int, ...] | None = None  # None = linear decrease
    seed: int = 0
    checkpoint_every: int = 0  # 0 = final checkpoint only
    log_every: int = 25

    def __post_init__(self) -> None:
        if not 0 < self.warmup_steps < self.total_steps:
            raise ValueError("need 0 < warmup_steps < total_steps")
        if self.peak_lr <= 0:
            raise ValueError("peak_lr must be positive")
        if self.batch_frames < 1:
            raise ValueError("batch_frames must be >= 1")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must be in [0, 1]")

    def rank_weights(self, num_channels: int) -> RankWeights:
        if self.p_rank_weights is None:
            return linear_rank_weights(num_channels)
        return RankWeights(self.p_rank_weights)

    def alpha_at(self, step: int) -> float:
        """Constant alpha, or a linear ramp 1 -> alpha when curriculum is on."""
        if not self.alpha_curriculum:
            return self.alpha
        frac = min(1.0, step / max(1, self.total_steps - 1))
        return 1.0 + (self.alpha - 1.0) * frac


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0 to the peak, then linear decay to 0."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if step <= cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    if step >= cfg.total_steps:
        return 0.0
    span = cfg.total_steps - cfg.warmup_steps
    return cfg.peak_lr * (cfg.total_steps - step) / span


@dataclass(frozen=True)
class TrainStepReport:
    step: int
    lr: float
    l_smd_first: float
    l_smd_residual: float
    residual_channel: int
    l_prompt_duration: float
    l_duration: float
    total: float
    mode: str
    mask_ratio: float
    skipped: bool = False


def report_to_line(report: TrainStepReport) -> str:
    parts = []
    for field in dataclasses.fields(TrainStepReport):
        value = getattr(report, field.name)
        parts.append(f"{field.name}={value!r}" if isinstance(value, float) else f"{field.name}={value}")
    return " ".join(parts)


@dataclass
class TrainingBatch:
    """Padded tensors for one optimizer step."""

    prompt_grid: torch.Tensor  # (B, Kmax, N)
    prompt_pad: torch.Tensor  # (B, Kmax)
    target_grid: torch.Tensor  # (B, Tmax, N)
    target_text: torch.Tensor  # (B, Tmax) frame-level phoneme ids
    target_pad: torch.Tensor  # (B, Tmax)
    target_phonemes: torch.Tensor  # (B, Pt)
    target_phoneme_pad: torch.Tensor
    target_durations: torch.Tensor  # (B, Pt) raw frame counts
    target_log_durations: torch.Tensor  # (B, Pt)
    enc_prompt_grid: torch.Tensor  # (B, Ke, N)
    enc_prompt_pad: torch.Tensor
    enc_prompt_phonemes: torch.Tensor  # (B, Pe)
    enc_prompt_phoneme_pad: torch.Tensor
    enc_prompt_log_durations: torch.Tensor  # (B, Pe)

    @property
    def batch_size(self) -> int:
        return int(self.prompt_grid.shape[0])

    @property
    def target_lengths(self) -> torch.Tensor:
        return (~self.target_pad).sum(dim=1)


def _pad_stack(
    arrays: Sequence[np.ndarray], fill: int, left: bool = False
) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack variable-length arrays; returns (padded, pad_mask).

    The decoder prompt is left-padded so its last valid frame always abuts
    the first target frame in the concatenated decoder input; otherwise a
    padding gap would sit inside the convolutions' receptive field and
    batched results would diverge from unbatched ones.
    """
    longest = max(a.shape[0] for a in arrays)
    trailing = arrays[0].shape[1:]
    out = np.full((len(arrays), longest, *trailing), fill, dtype=np.int64)
    pad = np.ones((len(arrays), longest), dtype=bool)
    for i, a in enumerate(arrays):
        n = a.shape[0]
        if left:
            out[i, longest - n :] = a
            pad[i, longest - n :] = False
        else:
            out[i, :n] = a
            pad[i, :n] = False
    return torch.from_numpy(out), torch.from_numpy(pad)


def build_batch(
    splits: Sequence[PromptSplit], segments: Sequence[EncoderPromptSegment]
) -> TrainingBatch:
    prompt_grid, prompt_pad = _pad_stack([s.prompt_grid for s in splits], fill=0, left=True)
    target_grid, target_pad = _pad_stack([s.target_grid for s in splits], fill=0)
    target_text, _ = _pad_stack([s.target_text for s in splits], fill=0)
    tp, tp_pad = _pad_stack([s.target_phonemes for s in splits], fill=0)
    td, _ = _pad_stack([s.target_durations for s in splits], fill=1)
    ep_grid, ep_pad = _pad_stack([e.grid for e in segments], fill=0)
    epp, epp_pad = _pad_stack([e.phonemes for e in segments], fill=0)
    epd, _ = _pad_stack([e.durations for e in segments], fill=1)
    return TrainingBatch(
        prompt_grid=prompt_grid,
        prompt_pad=prompt_pad,
        target_grid=target_grid,
        target_text=target_text,
        target_pad=target_pad,
        target_phonemes=tp,
        target_phoneme_pad=tp_pad,
        target_durations=td,
        target_log_durations=torch.log(td.double()).to(torch.get_default_dtype()),
        enc_prompt_grid=ep_grid,
        enc_prompt_pad=ep_pad,
        enc_prompt_phonemes=epp,
        enc_prompt_phoneme_pad=epp_pad,
        enc_prompt_log_durations=torch.log(epd.double()).to(torch.get_default_dtype()),
    )


def regulate_batch(
    text_states: torch.Tensor,
    phoneme_pad: torch.Tensor,
    durations: torch.Tensor,
    target_pad: torch.Tensor,
) -> torch.Tensor:
    """Length-regulate each example's states into the padded frame layout."""
    B, Tmax = target_pad.shape
    frames = text_states.new_zeros(B, Tmax, text_states.shape[-1])
    for i in range(B):
        valid = ~phoneme_pad[i]
        expanded = torch.repeat_interleave(text_states[i][valid], durations[i][valid], dim=0)
        frames[i, : expanded.shape[0]] = expanded
    return frames


def _sample_batch_masks(
    lengths: Sequence[int], Tmax: int, ratio: float, rng: np.random.Generator
) -> np.ndarray:
    mask = np.zeros((len(lengths), Tmax), dtype=bool)
    for i, L in enumerate(lengths):
        mask[i, :L] = sample_mask(L, ratio, rng)
    return mask


def _first_channel_masks(
    lengths: Sequence[int], Tmax: int, alpha: float, rng: np.random.Generator
) -> tuple[str, float, np.ndarray]:
    mode = choose_first_channel_mode(alpha, rng)
    if mode == MODE_FULL:
        mask = np.zeros((len(lengths), Tmax), dtype=bool)
        for i, L in enumerate(lengths):
            mask[i, :L] = True
        return mode, 1.0, mask
    ratio = sample_mask_ratio(rng)
    mask = _sample_batch_masks(lengths, Tmax, ratio, rng)
    while not mask.any():
        ratio = sample_mask_ratio(rng)
        mask = _sample_batch_masks(lengths, Tmax, ratio, rng)
    return mode, float(ratio), mask


def _residual_masks(
    lengths: Sequence[int], Tmax: int, rng: np.random.Generator
) -> tuple[float, np.ndarray]:
    ratio = sample_mask_ratio(rng)
    mask = _sample_batch_masks(lengths, Tmax, ratio, rng)
    while not mask.any():
        ratio = sample_mask_ratio(rng)
        mask = _sample_batch_masks(lengths, Tmax, ratio, rng)
    return float(ratio), mask


def compute_losses(
    model: SynthesisModel,
    batch: TrainingBatch,
    first_mask: torch.Tensor,
    residual_channel: int,
    residual_mask: torch.Tensor,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """The four loss terms for fixed masks and residual channel.

    Separated from the sampling so gradient checks can hold the
    stochastic choices constant.
    """
    mask_id = model.config.mask_token_id

    text_states = model.encode_text(batch.target_phonemes, batch.target_phoneme_pad)
    frames = regulate_batch(
        text_states, batch.target_phoneme_pad, batch.target_durations, batch.target_pad
    )
    prompt_states = model.encode_prompt(batch.prompt_grid, batch.prompt_pad)
    conditioned = model.cross_attend(
        frames, prompt_states, pad=batch.target_pad, prompt_pad=batch.prompt_pad
    )

    first_tokens = batch.target_grid[:, :, 0]
    partial_first = apply_mask_symbol(first_tokens, first_mask, mask_id)
    logits_first = model.smd_forward(
        batch.prompt_grid,
        conditioned,
        partial_first,
        level=1,
        prompt_pad=batch.prompt_pad,
        target_pad=batch.target_pad,
    )
    l_first = smd_loss(logits_first, first_tokens, first_mask)

    j = residual_channel
    tokens_j = batch.target_grid[:, :, j - 1]
    partial_j = apply_mask_symbol(tokens_j, residual_mask, mask_id)
    logits_j = model.smd_forward(
        batch.prompt_grid,
        conditioned,
        partial_j,
        level=j,
        lower_channels=batch.target_grid[:, :, : j - 1],
        prompt_pad=batch.prompt_pad,
        target_pad=batch.target_pad,
    )
    l_residual = smd_loss(logits_j, tokens_j, residual_mask)

    prompt_text_states = model.encode_prompt_text(
        batch.enc_prompt_phonemes, batch.enc_prompt_phoneme_pad
    )
    acoustic_states = model.embed_prompt_tokens(batch.enc_prompt_grid)
    pred_prompt_logdur = model.extract_prompt_durations(
        prompt_text_states,
        acoustic_states,
        pad=batch.enc_prompt_phoneme_pad,
        acoustic_pad=batch.enc_prompt_pad,
    )
    ep_valid = ~batch.enc_prompt_phoneme_pad
    l_prompt_dur = F.mse_loss(
        pred_prompt_logdur[ep_valid], batch.enc_prompt_log_durations[ep_valid]
    )

    duration_states = model.encode_prompt_durations(
        pred_prompt_logdur, batch.enc_prompt_phoneme_pad
    )
    pred_target_logdur = model.predict_target_durations(
        text_states,
        duration_states,
        pad=batch.target_phoneme_pad,
        memory_pad=batch.enc_prompt_phoneme_pad,
    )
    tp_valid = ~batch.target_phoneme_pad
    l_dur = F.mse_loss(pred_target_logdur[tp_valid], batch.target_log_durations[tp_valid])

    return l_first, l_residual, l_prompt_dur, l_dur


def train_step(
    batch: TrainingBatch,
    model: SynthesisModel,
    optimizer: torch.optim.Optimizer,
    cfg: TrainConfig,
    rng: np.random.Generator,
    step: int,
) -> TrainStepReport:
    """One optimizer update on the four-term composite loss."""
    lengths = [int(n) for n in batch.target_lengths]
    Tmax = batch.target_pad.shape[1]
    if Tmax == 0 or sum(lengths) == 0:
        return TrainStepReport(
            step=step, lr=0.0, l_smd_first=0.0, l_smd_residual=0.0, residual_channel=0,
            l_prompt_duration=0.0, l_duration=0.0, total=0.0, mode=MODE_PARTIAL,
            mask_ratio=0.0, skipped=True,
        )

    alpha = cfg.alpha_at(step)
    mode, ratio, first_mask_np = _first_channel_masks(lengths, Tmax, alpha, rng)
    weights = cfg.rank_weights(model.config.num_channels)
    j = p_rank_sample(weights, rng)
    _, residual_mask_np = _residual_masks(lengths, Tmax, rng)

    l_first, l_residual, l_prompt_dur, l_dur = compute_losses(
        model,
        batch,
        torch.from_numpy(first_mask_np),
        j,
        torch.from_numpy(residual_mask_np),
    )
    loss = l_first + l_residual + l_prompt_dur + l_dur

    lr = lr_at(step, cfg)
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if cfg.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    optimizer.step()

    f, r, p, d = (
        float(l_first.detach()),
        float(l_residual.detach()),
        float(l_prompt_dur.detach()),
        float(l_dur.detach()),
    )
    return TrainStepReport(
        step=step,
        lr=lr,
        l_smd_first=f,
        l_smd_residual=r,
        residual_channel=j,
        l_prompt_duration=p,
        l_duration=d,
        total=f + r + p + d,
        mode=mode,
        mask_ratio=ratio,
    )


@dataclass
class TrainResult:
    model: SynthesisModel
    reports: list[TrainStepReport]
    checkpoint_dir: Path | None


def _draw_batch(corpus: Corpus, cfg: TrainConfig, rng: np.random.Generator) -> TrainingBatch:
    splits: list[PromptSplit] = []
    segments: list[EncoderPromptSegment] = []
    frames = 0
    while frames < cfg.batch_frames:
        utt = corpus.utterances[int(rng.integers(0, len(corpus)))]
        split = split_prompt(utt, rng)
        segment = sample_disjoint_encoder_prompt(utt, split.k, rng)
        splits.append(split)
        segments.append(segment)
        frames += utt.num_frames
    return build_batch(splits, segments)


def make_optimizer(model: SynthesisModel, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(
        model.parameters(),
        lr=cfg.peak_lr,
        betas=(cfg.adam_beta1, cfg.adam_beta2),
        weight_decay=cfg.weight_decay,
    )


def _rng_state(data_rng, mask_rng) -> dict:
    return {
        "data": data_rng.bit_generator.state,
        "mask": mask_rng.bit_generator.state,
        "torch": torch.get_rng_state(),
    }


def run_training(
    corpus: Corpus,
    cfg: TrainConfig,
    model_config: ModelConfig,
    out_dir: Path | None = None,
    resume_from: Path | None = None,
    log_fn: Callable[[str], None] | None = None,
) -> TrainResult:
    """Seeded training loop with line-oriented progress logging.

    Deterministic on a single worker: the model init, batch selection,
    splits, and masks all derive from cfg.seed via named streams, and the
    full RNG state rides along in every checkpoint so a resumed run
    reproduces the original trajectory.
    """
    if len(corpus) == 0:
        raise ValueError("corpus is empty")

    data_rng = named_stream(cfg.seed, "train-data")
    mask_rng = named_stream(cfg.seed, "train-mask")
    start_step = 0

    if resume_from is not None:
        from .model import load_checkpoint

        ckpt = load_checkpoint(resume_from)
        model = ckpt.model
        optimizer = make_optimizer(model, cfg)
        if ckpt.optimizer_state is None:
            raise ValueError(f"checkpoint at {resume_from} has no optimizer state to resume from")
        optimizer.load_state_dict(ckpt.optimizer_state)
        if ckpt.rng_state is None:
            raise ValueError(f"checkpoint at {resume_from} has no rng state to resume from")
        data_rng.bit_generator.state = ckpt.rng_state["data"]
        mask_rng.bit_generator.state = ckpt.rng_state["mask"]
        torch.set_rng_state(ckpt.rng_state["torch"])
        start_step = ckpt.step
    else:
        torch.manual_seed(torch_seed(cfg.seed, "init"))
        model = SynthesisModel(model_config)
        optimizer = make_optimizer(model, cfg)

    log_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "progress.log"

    extra = {
        "corpus_spec": corpus.spec.to_key_values(),
        "train_config": dataclasses.asdict(cfg),
    }
    if extra["train_config"]["p_rank_weights"] is not None:
        extra["train_config"]["p_rank_weights"] = list(extra["train_config"]["p_rank_weights"])

    model.train()
    reports: list[TrainStepReport] = []
    for step in range(start_step, cfg.total_steps):
        batch = _draw_batch(corpus, cfg, data_rng)
        report = train_step(batch, model, optimizer, cfg, mask_rng, step)
        if not np.isfinite(report.total):
            raise RuntimeError(f"non-finite loss at step {step}: {report}")
        reports.append(report)
        line = report_to_line(report)
        if log_path is not None:
            with log_path.open("a", encoding="utf-8") as fh:
                fh.write(line + "\n")
        if log_fn is not None and (step % cfg.log_every == 0 or step == cfg.total_steps - 1):
            log_fn(line)
        if (
            out_dir is not None
            and cfg.checkpoint_every > 0
            and (step + 1) % cfg.checkpoint_every == 0
            and step + 1 < cfg.total_steps
        ):
            save_checkpoint(
                out_dir / f"step_{step + 1:06d}",
                model,
                step=step + 1,
                extra=extra,
                optimizer=optimizer,
                rng_state=_rng_state(data_rng, mask_rng),
            )

    checkpoint_dir = None
    if out_dir is not None:
        checkpoint_dir = out_dir / "final"
        save_checkpoint(
            checkpoint_dir,
            model,
            step=cfg.total_steps,
            extra=extra,
            optimizer=optimizer,
            rng_state=_rng_state(data_rng, mask_rng),
        )
    model.eval()
    return TrainResult(model=model, reports=reports, checkpoint_dir=checkpoint_dir)
