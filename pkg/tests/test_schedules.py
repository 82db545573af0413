import math

import numpy as np
import pytest

from masktts.rng import named_stream
from masktts.schedules import (
    MODE_FULL,
    MODE_PARTIAL,
    MaskPlan,
    RankWeights,
    build_first_channel_plan,
    build_residual_plan,
    choose_first_channel_mode,
    linear_rank_weights,
    p_rank_sample,
    sample_mask,
    sample_mask_ratio,
    unmask_count_schedule,
)


class _FixedUniform:
    """Stand-in rng yielding a fixed uniform draw."""

    def __init__(self, value: float):
        self.value = value

    def uniform(self, low, high, size=None):
        return np.full(size, self.value) if size is not None else self.value


def test_mask_ratio_endpoints():
    assert sample_mask_ratio(_FixedUniform(0.0)) == pytest.approx(1.0)
    assert sample_mask_ratio(_FixedUniform(math.pi / 2)) == pytest.approx(0.0, abs=1e-12)


def test_mask_ratio_range_and_mean():
    rng = named_stream(0, "ratio")
    draws = sample_mask_ratio(rng, size=100_000)
    assert draws.min() >= 0.0 and draws.max() <= 1.0
    assert abs(draws.mean() - 2 / math.pi) < 0.005


def test_sample_mask_extremes():
    rng = named_stream(1, "mask")
    assert sample_mask(20, 1.0, rng).all()
    assert not sample_mask(20, 0.0, rng).any()
    assert sample_mask(0, 0.5, rng).shape == (0,)


def test_sample_mask_fraction():
    rng = named_stream(2, "maskfrac")
    mask = sample_mask(100_000, 0.5, rng)
    assert abs(mask.mean() - 0.5) < 0.01


def test_mode_extremes():
    rng = named_stream(3, "mode")
    assert all(choose_first_channel_mode(1.0, rng) == MODE_PARTIAL for _ in range(500))
    assert all(choose_first_channel_mode(0.0, rng) == MODE_FULL for _ in range(500))
    with pytest.raises(ValueError):
        choose_first_channel_mode(1.5, rng)


def test_mode_mixture_frequency():
    rng = named_stream(4, "modefreq")
    n = 100_000
    partial = sum(choose_first_channel_mode(0.6, rng) == MODE_PARTIAL for _ in range(n))
    assert abs(partial / n - 0.6) < 0.01


def test_rank_weights_validation():
    with pytest.raises(ValueError, match="strictly decreasing"):
        RankWeights((2, 2))
    with pytest.raises(ValueError, match="strictly decreasing"):
        RankWeights((1, 3))
    with pytest.raises(ValueError, match="positive"):
        RankWeights((1, 0))
    with pytest.raises(ValueError):
        RankWeights(())
    assert RankWeights((3.2, 1.7)).weights == (3, 2)


def test_rank_weight_multiset():
    w = RankWeights((3, 2, 1))
    assert w.channel_multiset().tolist() == [2, 2, 2, 3, 3, 4]
    assert w.probabilities() == pytest.approx([0.5, 1 / 3, 1 / 6])


def test_p_rank_single_residual_channel():
    rng = named_stream(5, "pr2")
    w = linear_rank_weights(2)
    assert all(p_rank_sample(w, rng) == 2 for _ in range(100))


def test_p_rank_frequencies_n4():
    rng = named_stream(6, "pr4")
    w = RankWeights((3, 2, 1))
    n = 100_000
    draws = np.array([p_rank_sample(w, rng) for _ in range(n)])
    for j, expect in ((2, 0.5), (3, 1 / 3), (4, 1 / 6)):
        assert abs((draws == j).mean() - expect) < 0.01


def test_p_rank_linear_default_n8():
    w = linear_rank_weights(8)
    assert w.weights == (7, 6, 5, 4, 3, 2, 1)
    rng = named_stream(7, "pr8")
    n = 100_000
    draws = np.array([p_rank_sample(w, rng) for _ in range(n)])
    assert abs((draws == 2).mean() - 0.25) < 0.01


def test_unmask_schedule_reference_sequence():
    remaining = [unmask_count_schedule(100, 8, i) for i in range(1, 9)]
    assert remaining == [98, 92, 83, 70, 55, 38, 19, 0]


def test_unmask_schedule_terminal_and_single():
    assert unmask_count_schedule(100, 8, 8) == 0
    assert unmask_count_schedule(100, 1, 1) == 0
    assert unmask_count_schedule(0, 4, 2) == 0


def test_unmask_schedule_rejects_bad_step():
    with pytest.raises(ValueError):
        unmask_count_schedule(10, 4, 0)
    with pytest.raises(ValueError):
        unmask_count_schedule(10, 4, 5)


def test_unmask_schedule_newly_finalized_nonnegative_and_complete():
    rng = named_stream(8, "sched")
    for _ in range(500):
        m0 = int(rng.integers(0, 400))
        iterations = int(rng.integers(1, 33))
        remaining = [m0] + [unmask_count_schedule(m0, iterations, i) for i in range(1, iterations + 1)]
        newly = [a - b for a, b in zip(remaining, remaining[1:])]
        assert all(n >= 0 for n in newly)
        assert sum(newly) == m0
        assert remaining[-1] == 0


def test_mask_plan_full_mode_invariant():
    with pytest.raises(ValueError, match="full mode"):
        MaskPlan(level=1, ratio=1.0, mask=np.array([True, False]), mode=MODE_FULL, alpha=0.6)


def test_build_first_channel_plan():
    rng = named_stream(9, "plan")
    saw = set()
    for _ in range(200):
        plan = build_first_channel_plan(12, 0.6, rng)
        saw.add(plan.mode)
        if plan.mode == MODE_FULL:
            assert plan.mask.all()
        else:
            assert plan.mask.any()  # resampled until non-empty
    assert saw == {MODE_FULL, MODE_PARTIAL}


def test_build_residual_plan():
    rng = named_stream(10, "rplan")
    plan = build_residual_plan(3, 9, 0.6, rng)
    assert plan.level == 3 and plan.mode == MODE_PARTIAL and plan.mask.any()
    with pytest.raises(ValueError):
        build_residual_plan(1, 9, 0.6, rng)
