"""Duration modeling: extraction from prompts, prediction for targets.

Durations are modeled in the natural-log domain everywhere; the raw frame
counts only reappear at the length regulator, via max(1, round(exp(x)))
with round-half-up.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .modules import DurationAttentionLayer, FFTBlock, sinusoidal_positions, zero_padded

__all__ = [
    "DurationSeq",
    "length_regulate",
    "duration_to_frames",
    "duration_losses",
    "DurationStack",
    "PromptDurationEncoder",
]


@dataclass(frozen=True)
class DurationSeq:
    """Per-phoneme frame counts, raw and in the log domain."""

    raw: np.ndarray

    def __post_init__(self) -> None:
        raw = np.asarray(self.raw, dtype=np.int64)
        object.__setattr__(self, "raw", raw)
        if raw.ndim != 1:
            raise ValueError("durations must be 1-D")
        if raw.size and raw.min() < 1:
            raise ValueError("durations must be >= 1 elementwise")

    @property
    def log_domain(self) -> np.ndarray:
        return np.log(self.raw.astype(np.float64))

    @property
    def total_frames(self) -> int:
        return int(self.raw.sum())

    @classmethod
    def from_log(cls, log_durations) -> "DurationSeq":
        return cls(duration_to_frames(log_durations))


def duration_to_frames(log_durations) -> np.ndarray:
    """max(1, round(exp(x))) elementwise, rounding half up."""
    x = np.asarray(
        log_durations.detach().cpu().numpy() if torch.is_tensor(log_durations) else log_durations,
        dtype=np.float64,
    )
    if not np.all(np.isfinite(x)):
        raise ValueError("log durations must be finite")
    return np.maximum(1, np.floor(np.exp(x) + 0.5)).astype(np.int64)


def length_regulate(text_states: torch.Tensor, durations) -> torch.Tensor:
    """Repeat state i durations[i] times along the time axis.

    text_states is (P, dim); the result is (sum(durations), dim).
    """
    durations = torch.as_tensor(np.asarray(durations, dtype=np.int64), device=text_states.device)
    if durations.ndim != 1 or durations.shape[0] != text_states.shape[0]:
        raise ValueError("durations must be 1-D and match the number of states")
    if durations.numel() and int(durations.min()) < 1:
        raise ValueError("durations must be >= 1 elementwise")
    return torch.repeat_interleave(text_states, durations, dim=0)


def duration_losses(pred_prompt, gt_prompt, pred_target, gt_target) -> tuple[float, float]:
    """Mean-squared errors in the log domain: (prompt loss, target loss)."""

    def mse(pred, gt) -> float:
        pred = np.asarray(pred, dtype=np.float64)
        gt = np.asarray(gt, dtype=np.float64)
        if pred.shape != gt.shape:
            raise ValueError(f"length mismatch: {pred.shape} vs {gt.shape}")
        return float(np.mean((pred - gt) ** 2)) if pred.size else 0.0

    return mse(pred_prompt, gt_prompt), mse(pred_target, gt_target)


class DurationStack(nn.Module):
    """Shared architecture of the duration extractor and predictor.

    A stack of attention layers refines the text states against a fixed
    conditioning memory; a final linear head emits one log-duration per
    text position.
    """

    def __init__(self, dim: int, layers: int, heads: int, kernel: int, dropout: float = 0.0):
        super().__init__()
        self.layers = nn.ModuleList(
            DurationAttentionLayer(dim, heads, kernel, dropout) for _ in range(layers)
        )
        self.head = nn.Linear(dim, 1)

    def forward(
        self,
        text_states: torch.Tensor,
        memory: torch.Tensor,
        pad: torch.Tensor | None = None,
        memory_pad: torch.Tensor | None = None,
    ) -> torch.Tensor:
        if text_states.shape[1] == 0 or memory.shape[1] == 0:
            raise ValueError("duration stack requires non-empty text and memory sequences")
        x = text_states
        for layer in self.layers:
            x = layer(x, memory, pad=pad, memory_pad=memory_pad)
        return self.head(x).squeeze(-1)


class PromptDurationEncoder(nn.Module):
    """Encodes extracted prompt log-durations (with positions) for the predictor."""

    def __init__(self, dim: int, blocks: int, heads: int, filter_size: int, kernel: int, dropout: float = 0.0):
        super().__init__()
        self.proj = nn.Linear(1, dim)
        self.blocks = nn.ModuleList(
            FFTBlock(dim, heads, filter_size, kernel, dropout) for _ in range(blocks)
        )

    def forward(self, log_durations: torch.Tensor, pad: torch.Tensor | None = None) -> torch.Tensor:
        x = self.proj(log_durations.unsqueeze(-1))
        x = x + sinusoidal_positions(x.shape[1], x.shape[2], device=x.device, dtype=x.dtype)
        x = zero_padded(x, pad)
        for block in self.blocks:
            x = block(x, pad)
        return x
