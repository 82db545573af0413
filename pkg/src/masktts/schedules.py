"""Stochastic masking and channel-selection machinery.

Training masks: the mask ratio is p = cos(u) with u uniform on [0, pi/2]
(dense masks are more likely than sparse ones), each position is then an
independent Bernoulli(p) draw. The first channel trains in one of two
modes: "partial" keeps the Bernoulli mask, "full" masks every position so
the model also learns pure text-to-token generation; "partial" is chosen
with probability alpha.

Residual channels are picked by weighted sampling with strictly decreasing
weights (coarser channels matter more): each channel j is repeated w_j
times in a multiset and one entry is drawn uniformly.

Inference unmasking: after step i of I, the number of still-masked
positions is floor(M0 * cos(pi/2 * i/I)), reaching exactly 0 at i = I.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "MaskPlan",
    "RankWeights",
    "linear_rank_weights",
    "sample_mask_ratio",
    "sample_mask",
    "choose_first_channel_mode",
    "p_rank_sample",
    "unmask_count_schedule",
    "build_first_channel_plan",
    "build_residual_plan",
]

MODE_PARTIAL = "partial"
MODE_FULL = "full"


def sample_mask_ratio(rng: np.random.Generator, size: int | None = None):
    """p = cos(u), u ~ U[0, pi/2]; returns a scalar unless size is given."""
    u = rng.uniform(0.0, math.pi / 2, size=size)
    out = np.cos(u)
    return out if size is not None else float(out)


def sample_mask(length: int, p: float, rng: np.random.Generator) -> np.ndarray:
    """Boolean vector of independent Bernoulli(p) draws; True means masked."""
    if length < 0:
        raise ValueError("length must be >= 0")
    return rng.random(length) < p


def choose_first_channel_mode(alpha: float, rng: np.random.Generator) -> str:
    """"partial" with probability alpha, "full" with probability 1 - alpha."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    return MODE_PARTIAL if rng.random() < alpha else MODE_FULL


@dataclass(frozen=True)
class RankWeights:
    """Strictly decreasing positive integer weights for channels 2..N."""

    weights: tuple[int, ...]

    def __post_init__(self) -> None:
        rounded = tuple(int(round(float(w))) for w in self.weights)
        object.__setattr__(self, "weights", rounded)
        if len(rounded) < 1:
            raise ValueError("need at least one residual-channel weight")
        if any(w < 1 for w in rounded):
            raise ValueError(f"weights must round to positive integers, got {rounded}")
        if any(a <= b for a, b in zip(rounded, rounded[1:])):
            raise ValueError(f"weights must be strictly decreasing, got {rounded}")

    @property
    def num_channels(self) -> int:
        return len(self.weights) + 1

    def channel_multiset(self) -> np.ndarray:
        """Channel j repeated weights[j-2] times, for j in 2..N."""
        return np.repeat(np.arange(2, self.num_channels + 1), self.weights)

    def probabilities(self) -> np.ndarray:
        w = np.asarray(self.weights, dtype=np.float64)
        return w / w.sum()


def linear_rank_weights(num_channels: int) -> RankWeights:
    """Default weights w_j = N - j + 1 for j in 2..N."""
    if num_channels < 2:
        raise ValueError("num_channels must be >= 2")
    return RankWeights(tuple(range(num_channels - 1, 0, -1)))


def p_rank_sample(weights: RankWeights, rng: np.random.Generator) -> int:
    """Draw a residual channel j in [2, N] uniformly from the weight multiset."""
    multiset = weights.channel_multiset()
    return int(multiset[rng.integers(0, len(multiset))])


def unmask_count_schedule(total_masked: int, iterations: int, step: int) -> int:
    """Masked positions remaining after decode step `step` of `iterations`."""
    if total_masked < 0:
        raise ValueError("total_masked must be >= 0")
    if not 1 <= step <= iterations:
        raise ValueError(f"step must be in [1, {iterations}], got {step}")
    if step == iterations:
        return 0
    return int(math.floor(total_masked * math.cos(math.pi / 2 * step / iterations)))


@dataclass(frozen=True)
class MaskPlan:
    """One sampled mask for one channel of one target segment."""

    level: int  # channel index in [1, N]
    ratio: float
    mask: np.ndarray  # bool, True = masked
    mode: str  # "partial" or "full"
    alpha: float

    def __post_init__(self) -> None:
        if self.mode not in (MODE_PARTIAL, MODE_FULL):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == MODE_FULL and not bool(np.all(self.mask)):
            raise ValueError("full mode requires every position to be masked")


def build_first_channel_plan(length: int, alpha: float, rng: np.random.Generator) -> MaskPlan:
    """Mode draw plus the matching mask for the first channel.

    In partial mode the (ratio, mask) pair is re-drawn until at least one
    position is masked, so a training step always has a defined loss.
    """
    mode = choose_first_channel_mode(alpha, rng)
    if mode == MODE_FULL:
        return MaskPlan(level=1, ratio=1.0, mask=np.ones(length, dtype=bool), mode=mode, alpha=alpha)
    ratio = sample_mask_ratio(rng)
    mask = sample_mask(length, ratio, rng)
    while length > 0 and not mask.any():
        ratio = sample_mask_ratio(rng)
        mask = sample_mask(length, ratio, rng)
    return MaskPlan(level=1, ratio=float(ratio), mask=mask, mode=mode, alpha=alpha)


def build_residual_plan(
    level: int, length: int, alpha: float, rng: np.random.Generator
) -> MaskPlan:
    """Bernoulli mask for a residual channel (always partial mode)."""
    if level < 2:
        raise ValueError("residual plans are for channels >= 2")
    ratio = sample_mask_ratio(rng)
    mask = sample_mask(length, ratio, rng)
    while length > 0 and not mask.any():
        ratio = sample_mask_ratio(rng)
        mask = sample_mask(length, ratio, rng)
    return MaskPlan(level=level, ratio=float(ratio), mask=mask, mode=MODE_PARTIAL, alpha=alpha)
