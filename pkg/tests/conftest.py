"""Shared fixtures.

The expensive piece is `trained_setup`: one desk-scale training run shared
by the acceptance suite and the trained-behavior tests. Everything is
seeded, so the run (and therefore the suite) is reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import pytest
import torch

import masktts as M
from masktts.model import desk_config, tiny_config
from masktts.rng import named_stream
from masktts.training import TrainConfig, run_training

torch.set_num_threads(1)

# Desk-scale acceptance run: corpus and budget chosen so one checkpoint
# exhibits both strong I=8 quality and the I=1 degradation trend.
DESK_SEED = 0
DESK_SPEC = dict(num_speakers=2, num_channels=4, max_duration=4)
DESK_TRAIN_UTTERANCES = 320
DESK_HELDOUT_UTTERANCES = 24
DESK_STEPS = 400
DESK_WARMUP = 100
DESK_BATCH_FRAMES = 512


@dataclass
class TrainedSetup:
    model: "M.SynthesisModel"
    spec: "M.CorpusSpec"
    corpus: "M.Corpus"
    held_out: list
    train_config: TrainConfig
    reports: list


@pytest.fixture(scope="session")
def trained_setup() -> TrainedSetup:
    spec = M.CorpusSpec(**DESK_SPEC)
    full = M.generate_corpus(
        spec,
        DESK_TRAIN_UTTERANCES + DESK_HELDOUT_UTTERANCES,
        named_stream(DESK_SEED, "corpus"),
    )
    corpus = M.Corpus(spec=spec, utterances=full.utterances[:DESK_TRAIN_UTTERANCES])
    held_out = full.utterances[DESK_TRAIN_UTTERANCES:]
    cfg = TrainConfig(
        total_steps=DESK_STEPS,
        warmup_steps=DESK_WARMUP,
        batch_frames=DESK_BATCH_FRAMES,
        seed=DESK_SEED,
    )
    result = run_training(corpus, cfg, desk_config(spec))
    result.model.eval()
    return TrainedSetup(
        model=result.model,
        spec=spec,
        corpus=corpus,
        held_out=held_out,
        train_config=cfg,
        reports=result.reports,
    )


@pytest.fixture(scope="session")
def tiny_spec() -> "M.CorpusSpec":
    return M.CorpusSpec(
        phoneme_vocab_size=12, num_speakers=2, num_channels=4, codebook_size=16, max_duration=3
    )


@pytest.fixture(scope="session")
def tiny_corpus(tiny_spec):
    return M.generate_corpus(tiny_spec, 24, named_stream(99, "tiny-corpus"), min_phonemes=4, max_phonemes=8)


def make_tiny_model(seed: int = 5, num_channels: int = 4, dim: int = 16):
    torch.manual_seed(seed)
    return M.SynthesisModel(tiny_config(num_channels=num_channels, codebook_size=16, dim=dim))


@pytest.fixture()
def tiny_model():
    model = make_tiny_model()
    model.eval()
    return model
