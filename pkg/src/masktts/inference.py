"""Iterative parallel decoding from (target phonemes, acoustic prompt).

The first channel starts fully masked. Each of the I iterations runs one
decoder pass, samples tokens at the still-masked positions, scores every
sample by the probability it was drawn with, and finalizes the
highest-confidence ones until the remaining-masked count matches the
cosine schedule; finalized positions are never revisited. Residual
channels then take one greedy argmax pass each, coarsest first.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .corpus import CorpusSpec
from .duration import duration_to_frames, length_regulate
from .grid import CodecGrid, run_lengths
from .model import SynthesisModel, apply_mask_symbol
from .schedules import unmask_count_schedule

__all__ = [
    "DecodeIteration",
    "DecodeTrace",
    "decode_first_channel",
    "decode_residual_channels",
    "synthesize",
    "measure_rtf",
]


@dataclass(frozen=True)
class DecodeIteration:
    index: int  # 1-based iteration number
    finalized_positions: tuple[int, ...]
    confidence_threshold: float  # lowest confidence among newly finalized
    remaining_masked: int
    elapsed_seconds: float


@dataclass
class DecodeTrace:
    """Audit record of one synthesis call."""

    iterations: list[DecodeIteration] = field(default_factory=list)
    predicted_durations: np.ndarray | None = None
    duration_seconds: float = 0.0  # duration prediction + conditioning phase
    first_channel_seconds: float = 0.0
    residual_seconds: float = 0.0
    first_channel_passes: int = 0
    residual_passes: int = 0

    @property
    def total_forward_passes(self) -> int:
        return self.first_channel_passes + self.residual_passes

    @property
    def decode_seconds(self) -> float:
        return self.first_channel_seconds + self.residual_seconds

    def to_lines(self) -> list[str]:
        lines = [
            f"predicted_frames={0 if self.predicted_durations is None else int(self.predicted_durations.sum())}",
            f"duration_seconds={self.duration_seconds!r}",
            f"first_channel_seconds={self.first_channel_seconds!r}",
            f"residual_seconds={self.residual_seconds!r}",
            f"first_channel_passes={self.first_channel_passes}",
            f"residual_passes={self.residual_passes}",
        ]
        for it in self.iterations:
            lines.append(
                f"iteration={it.index} finalized={len(it.finalized_positions)} "
                f"remaining={it.remaining_masked} threshold={it.confidence_threshold!r} "
                f"elapsed={it.elapsed_seconds!r}"
            )
        return lines


def _sample_categorical(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF sampling per row of a (P, V) probability matrix."""
    cdf = np.cumsum(probs, axis=1)
    cdf[:, -1] = 1.0  # guard against round-off
    u = rng.random(probs.shape[0])
    return (u[:, None] > cdf).sum(axis=1).astype(np.int64)


def decode_first_channel(
    model: SynthesisModel,
    prompt_grid: torch.Tensor,
    conditioned_text: torch.Tensor,
    iterations: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, DecodeTrace]:
    """Confidence-scheduled parallel generation of the first channel."""
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    mask_id = model.config.mask_token_id
    T = conditioned_text.shape[1]
    tokens = torch.full((1, T), mask_id, dtype=torch.long)
    finalized = np.zeros(T, dtype=bool)
    trace = DecodeTrace()
    total = T

    start_all = time.perf_counter()
    for i in range(1, iterations + 1):
        t0 = time.perf_counter()
        with torch.no_grad():
            logits = model.smd_forward(prompt_grid, conditioned_text, tokens, level=1)
        probs = torch.softmax(logits[0].double(), dim=-1).cpu().numpy()
        masked_idx = np.flatnonzero(~finalized)
        sampled = _sample_categorical(probs[masked_idx], rng)
        confidence = probs[masked_idx, sampled]

        target_remaining = unmask_count_schedule(total, iterations, i)
        n_finalize = len(masked_idx) - target_remaining
        # highest confidence first; ties broken by position for determinism
        order = np.lexsort((masked_idx, -confidence))
        chosen = order[:n_finalize]
        positions = masked_idx[chosen]
        tokens[0, torch.from_numpy(positions)] = torch.from_numpy(sampled[chosen])
        finalized[positions] = True
        threshold = float(confidence[chosen].min()) if n_finalize > 0 else float("nan")
        trace.iterations.append(
            DecodeIteration(
                index=i,
                finalized_positions=tuple(int(p) for p in np.sort(positions)),
                confidence_threshold=threshold,
                remaining_masked=int((~finalized).sum()),
                elapsed_seconds=time.perf_counter() - t0,
            )
        )
    trace.first_channel_seconds = time.perf_counter() - start_all
    trace.first_channel_passes = iterations
    if not finalized.all():
        raise AssertionError("decode left masked positions after the final iteration")
    return tokens[0].cpu().numpy(), trace


def decode_residual_channels(
    model: SynthesisModel,
    prompt_grid: torch.Tensor,
    conditioned_text: torch.Tensor,
    first_channel: np.ndarray,
    trace: DecodeTrace | None = None,
) -> np.ndarray:
    """One greedy pass per residual channel, coarsest to finest."""
    N = model.config.num_channels
    mask_id = model.config.mask_token_id
    T = len(first_channel)
    channels = [np.asarray(first_channel, dtype=np.int64)]
    t0 = time.perf_counter()
    for j in range(2, N + 1):
        lower = torch.from_numpy(np.stack(channels, axis=1)).unsqueeze(0)
        partial = torch.full((1, T), mask_id, dtype=torch.long)
        with torch.no_grad():
            logits = model.smd_forward(
                prompt_grid, conditioned_text, partial, level=j, lower_channels=lower
            )
        channels.append(logits[0].argmax(dim=-1).cpu().numpy().astype(np.int64))
    if trace is not None:
        trace.residual_seconds = time.perf_counter() - t0
        trace.residual_passes = N - 1
    return np.stack(channels, axis=1)


def synthesize(
    model: SynthesisModel,
    target_phonemes: np.ndarray,
    prompt_grid: np.ndarray,
    iterations: int,
    rng: np.random.Generator,
    prompt_phonemes: np.ndarray | None = None,
) -> tuple[CodecGrid, DecodeTrace]:
    """Full pipeline: durations, length regulation, conditioning, decoding.

    The prompt is text-agnostic: when prompt_phonemes is not given, the
    prompt's coarse-channel run-length collapse supplies the phoneme slots
    the duration extractor needs.
    """
    target_phonemes = np.asarray(target_phonemes, dtype=np.int64)
    if target_phonemes.size == 0:
        raise ValueError("target text must be non-empty")
    prompt_grid = np.asarray(prompt_grid, dtype=np.int64)
    if prompt_grid.ndim != 2 or prompt_grid.shape[0] == 0:
        raise ValueError("prompt grid must be non-empty (frames x channels)")
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    if prompt_phonemes is None:
        prompt_phonemes = run_lengths(prompt_grid[:, 0])[0]

    model.eval()
    trace = DecodeTrace()
    t0 = time.perf_counter()
    prompt_t = torch.from_numpy(prompt_grid).unsqueeze(0)
    phonemes_t = torch.from_numpy(np.asarray(prompt_phonemes, dtype=np.int64)).unsqueeze(0)
    target_t = torch.from_numpy(target_phonemes).unsqueeze(0)

    with torch.no_grad():
        prompt_text_states = model.encode_prompt_text(phonemes_t)
        acoustic_states = model.embed_prompt_tokens(prompt_t)
        prompt_logdur = model.extract_prompt_durations(prompt_text_states, acoustic_states)
        duration_states = model.encode_prompt_durations(prompt_logdur)
        text_states = model.encode_text(target_t)
        target_logdur = model.predict_target_durations(text_states, duration_states)
        durations = duration_to_frames(target_logdur[0])
        frames = length_regulate(text_states[0], durations).unsqueeze(0)
        prompt_states = model.encode_prompt(prompt_t)
        conditioned = model.cross_attend(frames, prompt_states)
    trace.duration_seconds = time.perf_counter() - t0
    trace.predicted_durations = durations

    first, decode_trace = decode_first_channel(model, prompt_t, conditioned, iterations, rng)
    trace.iterations = decode_trace.iterations
    trace.first_channel_seconds = decode_trace.first_channel_seconds
    trace.first_channel_passes = decode_trace.first_channel_passes
    grid = decode_residual_channels(model, prompt_t, conditioned, first, trace)

    if grid.max() >= model.config.mask_token_id:
        raise AssertionError("mask symbol leaked into the output grid")
    return CodecGrid(tokens=grid, codebook_size=model.config.codebook_size), trace


def measure_rtf(num_frames: int, frame_rate: float, elapsed_seconds: float) -> float:
    """Wall time divided by the audio duration the frames represent."""
    if num_frames <= 0:
        raise ValueError("num_frames must be positive")
    if frame_rate <= 0 or elapsed_seconds <= 0:
        raise ValueError("frame_rate and elapsed_seconds must be positive")
    return elapsed_seconds / (num_frames / frame_rate)


def synthesize_for_spec(
    model: SynthesisModel,
    target_phonemes: np.ndarray,
    prompt_grid: np.ndarray,
    iterations: int,
    rng: np.random.Generator,
    spec: CorpusSpec,
) -> tuple[CodecGrid, DecodeTrace, float]:
    """Synthesize and report the real-time factor under the spec's frame rate."""
    t0 = time.perf_counter()
    grid, trace = synthesize(model, target_phonemes, prompt_grid, iterations, rng)
    elapsed = time.perf_counter() - t0
    return grid, trace, measure_rtf(grid.num_frames, spec.frame_rate, elapsed)
