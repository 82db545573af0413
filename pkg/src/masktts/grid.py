"""Codec token grids and the text-agnostic prompt/target split.

A training example is carved out of one utterance twice: the decoder-side
split takes a prefix of length k as the acoustic prompt and leaves frames
[k, T) as the generation target; the encoder-side (duration path) prompt is
a second contiguous segment drawn with the same length bounds but required
to be a different span, so the two stages never condition on the same
prompt.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .corpus import Utterance

__all__ = [
    "CodecGrid",
    "PromptSplit",
    "EncoderPromptSegment",
    "split_point_bounds",
    "sample_split_point",
    "split_prompt",
    "sample_disjoint_encoder_prompt",
    "run_lengths",
]


@dataclass(frozen=True)
class CodecGrid:
    """Validated T x N matrix of codec tokens in [0, codebook_size)."""

    tokens: np.ndarray
    codebook_size: int

    def __post_init__(self) -> None:
        tokens = np.asarray(self.tokens, dtype=np.int64)
        object.__setattr__(self, "tokens", tokens)
        if tokens.ndim != 2:
            raise ValueError("token grid must be 2-D (frames x channels)")
        if tokens.shape[1] < 1:
            raise ValueError("token grid needs at least one channel")
        if self.codebook_size < 1:
            raise ValueError("codebook_size must be positive")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.codebook_size):
            raise ValueError(
                f"tokens out of range [0, {self.codebook_size}): "
                f"{int(tokens.min())}..{int(tokens.max())}"
            )

    @property
    def num_frames(self) -> int:
        return int(self.tokens.shape[0])

    @property
    def num_channels(self) -> int:
        return int(self.tokens.shape[1])


def run_lengths(aligned: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Collapse frame-level ids into (ids, run lengths)."""
    aligned = np.asarray(aligned)
    if aligned.size == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    boundaries = np.flatnonzero(aligned[1:] != aligned[:-1]) + 1
    starts = np.concatenate(([0], boundaries))
    ends = np.concatenate((boundaries, [len(aligned)]))
    return aligned[starts].astype(np.int64), (ends - starts).astype(np.int64)


def split_point_bounds(num_frames: int) -> tuple[int, int]:
    """Admissible split points: ceil(T/3) <= k <= floor(2T/3)."""
    if num_frames < 2:
        raise ValueError(
            f"utterance too short to split: need at least 2 frames, got {num_frames}"
        )
    lo = math.ceil(num_frames / 3)
    hi = math.floor(2 * num_frames / 3)
    return lo, hi


def sample_split_point(num_frames: int, rng: np.random.Generator) -> int:
    lo, hi = split_point_bounds(num_frames)
    return int(rng.integers(lo, hi + 1))


@dataclass(frozen=True)
class PromptSplit:
    """Decoder-stage partition of an utterance at split frame k."""

    k: int
    prompt_grid: np.ndarray  # frames [0, k), all channels
    target_text: np.ndarray  # aligned phoneme ids for frames [k, T)
    target_grid: np.ndarray  # frames [k, T), all channels

    @property
    def target_phonemes(self) -> np.ndarray:
        return run_lengths(self.target_text)[0]

    @property
    def target_durations(self) -> np.ndarray:
        return run_lengths(self.target_text)[1]


def split_prompt(utterance: Utterance, rng: np.random.Generator) -> PromptSplit:
    """Draw k uniformly from the admissible range and partition the utterance."""
    k = sample_split_point(utterance.num_frames, rng)
    aligned = utterance.aligned_text
    return PromptSplit(
        k=k,
        prompt_grid=utterance.grid[:k].copy(),
        target_text=aligned[k:].copy(),
        target_grid=utterance.grid[k:].copy(),
    )


@dataclass(frozen=True)
class EncoderPromptSegment:
    """Duration-path prompt: a contiguous frame span plus its alignment."""

    start: int
    length: int
    grid: np.ndarray  # frames [start, start+length)
    phonemes: np.ndarray  # run-length ids within the span
    durations: np.ndarray  # run lengths within the span (boundary runs clipped)
    overlap_fraction: float  # overlap with the decoder prompt span, in [0, 1]

    @property
    def end(self) -> int:
        return self.start + self.length


def sample_disjoint_encoder_prompt(
    utterance: Utterance, decoder_k: int, rng: np.random.Generator
) -> EncoderPromptSegment:
    """Sample the encoder-stage prompt span, never identical to [0, decoder_k).

    Length obeys the same bounds as the decoder split. If the draw collides
    with the decoder span exactly, the span is shifted right by one frame;
    the shift is always valid because admissible lengths are < T.
    """
    T = utterance.num_frames
    lo, hi = split_point_bounds(T)
    length = int(rng.integers(lo, hi + 1))
    start = int(rng.integers(0, T - length + 1))
    if start == 0 and length == decoder_k:
        start = 1
    overlap = max(0, min(decoder_k, start + length) - start)
    aligned = utterance.aligned_text[start : start + length]
    phonemes, durations = run_lengths(aligned)
    return EncoderPromptSegment(
        start=start,
        length=length,
        grid=utterance.grid[start : start + length].copy(),
        phonemes=phonemes,
        durations=durations,
        overlap_fraction=overlap / length,
    )
