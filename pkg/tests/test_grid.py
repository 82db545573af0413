import math

import numpy as np
import pytest

from masktts.corpus import CorpusSpec, render_utterance
from masktts.grid import (
    CodecGrid,
    run_lengths,
    sample_disjoint_encoder_prompt,
    sample_split_point,
    split_point_bounds,
    split_prompt,
)
from masktts.rng import named_stream


def _utterance(num_frames: int):
    """Utterance with an exact frame count (unit durations)."""
    spec = CorpusSpec(max_duration=1, phoneme_vocab_size=40)
    phonemes = [(i * 7 + 1) % 40 for i in range(num_frames)]
    for i in range(1, num_frames):
        if phonemes[i] == phonemes[i - 1]:
            phonemes[i] = (phonemes[i] + 1) % 40
    return render_utterance(phonemes, 0, spec)


def test_bounds_t9():
    assert split_point_bounds(9) == (3, 6)


def test_bounds_t3_and_t2():
    assert split_point_bounds(3) == (1, 2)
    assert split_point_bounds(2) == (1, 1)
    rng = named_stream(0, "k")
    assert sample_split_point(2, rng) == 1


def test_bounds_reject_too_short():
    with pytest.raises(ValueError, match="at least 2"):
        split_point_bounds(1)


def test_split_point_uniform_t9():
    rng = named_stream(1, "k9")
    n = 100_000
    draws = np.array([sample_split_point(9, rng) for _ in range(n)])
    assert set(draws.tolist()) == {3, 4, 5, 6}
    for k in (3, 4, 5, 6):
        assert abs((draws == k).mean() - 0.25) < 0.02


def test_split_points_within_bounds_many_lengths():
    rng = named_stream(2, "klens")
    for _ in range(2000):
        T = int(rng.integers(3, 501))
        k = sample_split_point(T, rng)
        assert math.ceil(T / 3) <= k <= math.floor(2 * T / 3)


def test_split_partition_reconcatenates():
    utt = _utterance(17)
    rng = named_stream(3, "split")
    for _ in range(50):
        split = split_prompt(utt, rng)
        rebuilt = np.concatenate([split.prompt_grid, split.target_grid], axis=0)
        assert np.array_equal(rebuilt, utt.grid)
        assert split.prompt_grid.shape[0] == split.k
        assert split.prompt_grid.shape[0] + split.target_grid.shape[0] == utt.num_frames
        assert np.array_equal(split.target_text, utt.aligned_text[split.k :])


def test_split_target_phonemes_match_alignment():
    spec = CorpusSpec()
    utt = render_utterance([4, 9, 2, 17, 30], 1, spec)
    rng = named_stream(4, "split2")
    split = split_prompt(utt, rng)
    assert np.array_equal(np.repeat(split.target_phonemes, split.target_durations), split.target_text)


def test_encoder_prompt_never_identical_span():
    utt = _utterance(9)
    rng = named_stream(5, "enc")
    for _ in range(10_000):
        k = sample_split_point(9, rng)
        seg = sample_disjoint_encoder_prompt(utt, k, rng)
        assert (seg.start, seg.length) != (0, k)
        lo, hi = split_point_bounds(9)
        assert lo <= seg.length <= hi
        assert 0.0 <= seg.overlap_fraction <= 1.0


def test_encoder_prompt_smallest_case():
    utt = _utterance(3)
    rng = named_stream(6, "enc3")
    for _ in range(200):
        for k in (1, 2):
            seg = sample_disjoint_encoder_prompt(utt, k, rng)
            assert (seg.start, seg.length) != (0, k)
            assert seg.end <= 3


def test_encoder_prompt_deterministic_given_state():
    utt = _utterance(12)
    a = sample_disjoint_encoder_prompt(utt, 4, named_stream(7, "enc-det"))
    b = sample_disjoint_encoder_prompt(utt, 4, named_stream(7, "enc-det"))
    assert (a.start, a.length) == (b.start, b.length)
    assert np.array_equal(a.grid, b.grid)


def test_encoder_prompt_alignment_clips_boundaries():
    spec = CorpusSpec(max_duration=4)
    utt = render_utterance([1, 2, 3, 4, 5, 6], 0, spec)
    rng = named_stream(8, "clip")
    seg = sample_disjoint_encoder_prompt(utt, split_prompt(utt, rng).k, rng)
    assert int(seg.durations.sum()) == seg.length
    assert np.array_equal(np.repeat(seg.phonemes, seg.durations), utt.aligned_text[seg.start : seg.end])
    assert np.all(seg.durations >= 1)


def test_run_lengths():
    ids, counts = run_lengths(np.array([5, 5, 7, 7, 7, 5]))
    assert ids.tolist() == [5, 7, 5]
    assert counts.tolist() == [2, 3, 1]
    ids, counts = run_lengths(np.array([]))
    assert ids.size == 0 and counts.size == 0


def test_codec_grid_validation():
    CodecGrid(tokens=np.zeros((3, 2), dtype=np.int64), codebook_size=4)
    with pytest.raises(ValueError, match="2-D"):
        CodecGrid(tokens=np.zeros(3), codebook_size=4)
    with pytest.raises(ValueError, match="out of range"):
        CodecGrid(tokens=np.full((2, 2), 4), codebook_size=4)
    with pytest.raises(ValueError, match="out of range"):
        CodecGrid(tokens=np.full((2, 2), -1), codebook_size=4)
