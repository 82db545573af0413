import hashlib
import json
import os

import numpy as np
import pytest

import masktts as M
from masktts.cli import main
from masktts.corpus import load_corpus, load_utterance_file
from masktts.rng import named_stream


def _dir_checksum(path):
    digest = hashlib.sha256()
    for p in sorted(path.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            digest.update(p.name.encode())
            digest.update(p.read_bytes())
    return digest.hexdigest()


def _write_spec(path, **overrides):
    kv = {
        "phoneme_vocab_size": 12,
        "num_speakers": 2,
        "num_channels": 4,
        "codebook_size": 16,
        "max_duration": 3,
        "num_utterances": 10,
        "min_phonemes": 4,
        "max_phonemes": 8,
    }
    kv.update(overrides)
    path.write_text("".join(f"{k}={v}\n" for k, v in kv.items()), encoding="utf-8")
    return path


@pytest.fixture(scope="module")
def cli_setup(tmp_path_factory):
    """Corpus plus a briefly trained checkpoint for command tests."""
    root = tmp_path_factory.mktemp("cli")
    spec_path = _write_spec(root / "spec.txt")
    assert main(["synth-data", "--spec", str(spec_path), "--out", str(root / "corpus"), "--seed", "3"]) == 0
    config = root / "train.cfg"
    config.write_text(
        "dim=16\nprompt_text_blocks=1\ntext_blocks=1\nfft_heads=2\nfft_filter=32\n"
        "prompt_encoder_layers=1\nprompt_encoder_heads=2\nprompt_encoder_filter=32\n"
        "duration_layers=1\nduration_heads=2\nprompt_duration_blocks=1\n"
        "cross_attention_heads=2\nconformer_layers=1\nconformer_heads=2\n"
        "conformer_linear_units=32\ndropout=0.0\n"
        "total_steps=4\nwarmup_steps=1\nbatch_frames=48\n",
        encoding="utf-8",
    )
    assert main([
        "train", "--corpus", str(root / "corpus"), "--out", str(root / "run"),
        "--config", str(config), "--seed", "1",
    ]) == 0
    return root


def test_synth_data_round_trip_and_seed_sensitivity(tmp_path):
    spec_path = _write_spec(tmp_path / "spec.txt")
    assert main(["synth-data", "--spec", str(spec_path), "--out", str(tmp_path / "a"), "--seed", "5"]) == 0
    assert main(["synth-data", "--spec", str(spec_path), "--out", str(tmp_path / "b"), "--seed", "5"]) == 0
    assert main(["synth-data", "--spec", str(spec_path), "--out", str(tmp_path / "c"), "--seed", "6"]) == 0
    a, b, c = (_dir_checksum(tmp_path / x) for x in "abc")
    assert a == b
    assert a != c
    corpus = load_corpus(tmp_path / "a")
    assert len(corpus) == 10
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["command"] == "synth-data"
    assert manifest["seed"] == 5
    assert manifest["artifact_format_versions"]["corpus"] == 1


def test_synth_data_rejects_invalid_spec(tmp_path, capsys):
    spec_path = _write_spec(tmp_path / "spec.txt", codebook_size=8)  # < phoneme vocab
    code = main(["synth-data", "--spec", str(spec_path), "--out", str(tmp_path / "x")])
    assert code == 2
    assert "phoneme_vocab_size" in capsys.readouterr().err


def test_synth_data_missing_spec_file(tmp_path):
    assert main(["synth-data", "--spec", str(tmp_path / "nope.txt"), "--out", str(tmp_path / "x")]) == 3


def test_train_artifacts_and_manifest(cli_setup):
    run = cli_setup / "run"
    assert (run / "final" / "weights.pt").is_file()
    assert (run / "progress.log").is_file()
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["command"] == "train"
    assert manifest["config"]["total_steps"] == 4
    assert manifest["config_sources"]["total_steps"] == "file"
    assert manifest["config_sources"]["seed"] == "flag"
    assert manifest["config_sources"]["peak_lr"] == "preset"
    assert not (run / ".masktts.lock").exists()


def test_train_missing_corpus(tmp_path):
    assert main(["train", "--corpus", str(tmp_path / "none"), "--out", str(tmp_path / "out")]) == 3


def test_train_rejects_unknown_config_key(cli_setup, tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("not_a_key=1\n", encoding="utf-8")
    code = main([
        "train", "--corpus", str(cli_setup / "corpus"), "--out", str(tmp_path / "out"),
        "--config", str(bad),
    ])
    assert code == 2


def test_flag_overrides_config_file(cli_setup, tmp_path):
    config = tmp_path / "c.cfg"
    config.write_text("total_steps=4\nwarmup_steps=1\nbatch_frames=48\ndim=16\nfft_heads=2\n"
                      "prompt_text_blocks=1\ntext_blocks=1\nfft_filter=32\nprompt_encoder_layers=1\n"
                      "prompt_encoder_heads=2\nprompt_encoder_filter=32\nduration_layers=1\n"
                      "duration_heads=2\nprompt_duration_blocks=1\ncross_attention_heads=2\n"
                      "conformer_layers=1\nconformer_heads=2\nconformer_linear_units=32\n",
                      encoding="utf-8")
    out = tmp_path / "out"
    assert main([
        "train", "--corpus", str(cli_setup / "corpus"), "--out", str(out),
        "--config", str(config), "--steps", "3", "--seed", "2",
    ]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["total_steps"] == 3
    assert manifest["config_sources"]["total_steps"] == "flag"


def test_synthesize_and_reproducibility(cli_setup, tmp_path):
    corpus = load_corpus(cli_setup / "corpus")
    prompt_path = sorted((cli_setup / "corpus").glob("utt_*.bin"))[0]
    text_path = tmp_path / "text.txt"
    text_path.write_text("1 2 3 4", encoding="utf-8")
    args = [
        "synthesize", "--checkpoint", str(cli_setup / "run" / "final"),
        "--prompt", str(prompt_path), "--text", str(text_path), "--seed", "9",
    ]
    out_a = tmp_path / "a.bin"
    out_b = tmp_path / "b.bin"
    assert main(args + ["--out", str(out_a)]) == 0
    assert main(args + ["--out", str(out_b)]) == 0
    assert out_a.read_bytes() == out_b.read_bytes()
    generated = load_utterance_file(out_a)
    assert generated.grid.shape[1] == corpus.spec.num_channels
    trace = (tmp_path / "a.trace.txt").read_text()
    assert "first_channel_passes=8" in trace  # default iteration count
    manifest = json.loads((tmp_path / "a.manifest.json").read_text())
    assert manifest["config"]["iterations"] == 8


def test_synthesize_rejects_zero_iterations(cli_setup, tmp_path):
    prompt_path = sorted((cli_setup / "corpus").glob("utt_*.bin"))[0]
    text_path = tmp_path / "t.txt"
    text_path.write_text("1 2", encoding="utf-8")
    code = main([
        "synthesize", "--checkpoint", str(cli_setup / "run" / "final"),
        "--prompt", str(prompt_path), "--text", str(text_path),
        "--out", str(tmp_path / "o.bin"), "--iterations", "0",
    ])
    assert code == 2


def test_synthesize_rejects_bad_text(cli_setup, tmp_path):
    prompt_path = sorted((cli_setup / "corpus").glob("utt_*.bin"))[0]
    text_path = tmp_path / "t.txt"
    text_path.write_text("1 99", encoding="utf-8")  # out of vocab
    code = main([
        "synthesize", "--checkpoint", str(cli_setup / "run" / "final"),
        "--prompt", str(prompt_path), "--text", str(text_path),
        "--out", str(tmp_path / "o.bin"),
    ])
    assert code == 2


def test_eval_command(cli_setup, tmp_path):
    out = tmp_path / "eval"
    assert main([
        "eval", "--checkpoint", str(cli_setup / "run" / "final"),
        "--corpus", str(cli_setup / "corpus"), "--out", str(out),
        "--iterations", "2", "--limit", "2",
    ]) == 0
    metrics = dict(
        line.split("=", 1) for line in (out / "metrics.txt").read_text().splitlines()
    )
    assert int(metrics["num_utterances"]) == 2
    # an essentially untrained checkpoint sits near chance level
    assert float(metrics["per"]) >= 0.5


def test_ablate_command(cli_setup, tmp_path):
    out = tmp_path / "ablate"
    assert main([
        "ablate", "--checkpoint", str(cli_setup / "run" / "final"),
        "--corpus", str(cli_setup / "corpus"), "--out", str(out),
        "--iterations", "1,2", "--limit", "2", "--repeats", "1",
    ]) == 0
    lines = (out / "ablation.txt").read_text().splitlines()
    assert len(lines) == 3  # header + one row per iteration count
    kv = (out / "ablation.kv").read_text().splitlines()
    assert kv[0].startswith("iterations=1 ")
    assert kv[1].startswith("iterations=2 ")


def test_count_params_desk(capsys, tmp_path):
    assert main(["count-params", "--preset", "desk", "--out", str(tmp_path / "p")]) == 0
    printed = capsys.readouterr().out
    assert "conformer" in printed
    assert "total" in printed
    assert (tmp_path / "p" / "parameters.txt").is_file()


def test_lock_conflict_gives_io_exit(cli_setup, tmp_path):
    spec_path = _write_spec(tmp_path / "spec.txt")
    out = tmp_path / "locked"
    out.mkdir()
    (out / ".masktts.lock").write_text("pid=0\n")
    code = main(["synth-data", "--spec", str(spec_path), "--out", str(out)])
    assert code == 3


def test_default_ablation_iterations_match_reference_set():
    from masktts.cli import build_parser

    parser = build_parser()
    args = parser.parse_args(["ablate", "--checkpoint", "x", "--corpus", "y", "--out", "z"])
    assert args.iterations == "1,4,8,16,24"
    args = parser.parse_args(["synthesize", "--checkpoint", "x", "--prompt", "p", "--text", "t", "--out", "o"])
    assert args.iterations == 8
