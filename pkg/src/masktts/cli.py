"""Batch command line: corpus synthesis, training, synthesis, evaluation.

Subcommands: synth-data, train, synthesize, eval, ablate, count-params.
Exit codes: 0 success, 2 validation error, 3 I/O error, 4 internal
assertion. Every command writes a manifest next to its artifacts with the
fully resolved configuration (and where each value came from), the seed,
paths, format versions, and timestamps; an output directory is locked
while a command writes into it.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime
import json
import os
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import corpus as corpus_mod
from .corpus import CorpusSpec, generate_corpus, load_corpus, load_utterance_file, read_key_values, save_corpus
from .evaluate import audit_parameters, evaluate_checkpoint, format_ablation_table, run_ablation
from .inference import measure_rtf, synthesize
from .model import (
    CHECKPOINT_FORMAT_VERSION,
    ModelConfig,
    desk_config,
    load_checkpoint,
    paper_config,
)
from .rng import named_stream, torch_seed
from .training import TrainConfig, run_training
from .version import __version__

MANIFEST_VERSION = 1
LOCK_NAME = ".masktts.lock"

_MODEL_KEYS = {f.name for f in dataclasses.fields(ModelConfig)} - {
    "phoneme_vocab_size",
    "num_channels",
    "codebook_size",
}
_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)}


class ValidationError(ValueError):
    pass


@contextmanager
def output_lock(directory: Path):
    """Exclusive lock so two commands never write one directory at once."""
    directory.mkdir(parents=True, exist_ok=True)
    lock_path = directory / LOCK_NAME
    try:
        fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise OSError(
            f"output directory {directory} is locked by another run "
            f"(remove {lock_path} if stale)"
        ) from None
    try:
        os.write(fd, f"pid={os.getpid()}\n".encode())
        os.close(fd)
        yield
    finally:
        try:
            lock_path.unlink()
        except FileNotFoundError:
            pass


def write_manifest(
    path: Path,
    command: str,
    seed: int | None,
    config: dict,
    sources: dict[str, str],
    inputs: dict[str, str],
    outputs: dict[str, str],
    started: float,
    data_versions: dict[str, int] | None = None,
) -> None:
    """Atomically write the run manifest next to the artifact."""
    manifest = {
        "manifest_version": MANIFEST_VERSION,
        "tool_version": __version__,
        "command": command,
        "seed": seed,
        "config": config,
        "config_sources": sources,
        "inputs": inputs,
        "outputs": outputs,
        "artifact_format_versions": {
            "corpus": corpus_mod.FORMAT_VERSION,
            "checkpoint": CHECKPOINT_FORMAT_VERSION,
            **(data_versions or {}),
        },
        "started": datetime.datetime.fromtimestamp(started, datetime.timezone.utc).isoformat(),
        "ended": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    tmp.replace(path)


def _parse_value(key: str, raw: str):
    """Parse a config value by the target field's type."""
    if key == "p_rank_weights":
        raw = raw.strip()
        if raw == "linear":
            return None
        return tuple(int(x) for x in raw.replace(",", " ").split())
    for config_cls in (TrainConfig, ModelConfig):
        for f in dataclasses.fields(config_cls):
            if f.name == key:
                if f.type in ("int", int):
                    return int(raw)
                if f.type in ("float", float):
                    return float(raw)
                if f.type in ("bool", bool):
                    if raw.lower() in ("1", "true", "yes", "on"):
                        return True
                    if raw.lower() in ("0", "false", "no", "off"):
                        return False
                    raise ValidationError(f"config key {key}: expected a boolean, got {raw!r}")
                return raw
    raise ValidationError(f"unknown config key {key!r}")


def resolve_config(
    presets: dict, file_kv: dict[str, str], overrides: dict[str, str]
) -> tuple[dict, dict[str, str]]:
    """Apply precedence (flag > file > preset); track each value's source."""
    resolved = dict(presets)
    sources = {k: "preset" for k in presets}
    for key, raw in file_kv.items():
        if key not in resolved:
            raise ValidationError(f"unknown config key {key!r} in config file")
        resolved[key] = _parse_value(key, raw)
        sources[key] = "file"
    for key, raw in overrides.items():
        if key not in resolved:
            raise ValidationError(f"unknown config key {key!r} in --set override")
        resolved[key] = _parse_value(key, raw) if isinstance(raw, str) else raw
        sources[key] = "flag"
    return resolved, sources


def _json_safe(obj):
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    return obj


# -- synth-data --------------------------------------------------------------


def cmd_synth_data(args: argparse.Namespace) -> int:
    started = time.time()
    spec_path = Path(args.spec)
    if not spec_path.is_file():
        raise FileNotFoundError(f"corpus spec file not found: {spec_path}")
    kv = read_key_values(spec_path)
    gen_defaults = {"num_utterances": 256, "min_phonemes": 6, "max_phonemes": 16}
    gen_kv = {}
    spec_kv = {}
    for key, value in kv.items():
        if key in gen_defaults:
            gen_kv[key] = int(value)
        else:
            spec_kv[key] = value
    spec = CorpusSpec.from_key_values(spec_kv)
    gen = {**gen_defaults, **gen_kv}

    out_dir = Path(args.out)
    with output_lock(out_dir):
        rng = named_stream(args.seed, "corpus")
        corpus = generate_corpus(
            spec,
            gen["num_utterances"],
            rng,
            min_phonemes=gen["min_phonemes"],
            max_phonemes=gen["max_phonemes"],
        )
        save_corpus(corpus, out_dir)
        write_manifest(
            out_dir / "manifest.json",
            command="synth-data",
            seed=args.seed,
            config=_json_safe({**spec.to_key_values(), **gen}),
            sources={k: "file" for k in {**spec.to_key_values(), **gen}},
            inputs={"spec": str(spec_path)},
            outputs={"corpus": str(out_dir)},
            started=started,
        )
    print(f"wrote {len(corpus)} utterances to {out_dir}")
    return 0


# -- train -------------------------------------------------------------------


def _preset_configs(preset: str, spec: CorpusSpec) -> tuple[dict, dict]:
    if preset == "desk":
        model = desk_config(spec)
        train = TrainConfig()
    elif preset == "paper":
        model = paper_config(
            phoneme_vocab_size=spec.phoneme_vocab_size,
            num_channels=spec.num_channels,
            codebook_size=spec.codebook_size,
        )
        train = TrainConfig(
            total_steps=100_000, warmup_steps=5_000, batch_frames=3_500, checkpoint_every=10_000
        )
    else:
        raise ValidationError(f"unknown preset {preset!r}")
    model_d = {k: v for k, v in model.to_dict().items() if k in _MODEL_KEYS}
    train_d = dataclasses.asdict(train)
    if train_d["p_rank_weights"] is not None:
        train_d["p_rank_weights"] = tuple(train_d["p_rank_weights"])
    return model_d, train_d


def cmd_train(args: argparse.Namespace) -> int:
    started = time.time()
    corpus_dir = Path(args.corpus)
    corpus = load_corpus(corpus_dir)
    model_presets, train_presets = _preset_configs(args.preset, corpus.spec)

    file_kv = read_key_values(Path(args.config)) if args.config else {}
    overrides: dict[str, str] = {}
    for item in args.set:
        if "=" not in item:
            raise ValidationError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key] = value
    if args.steps is not None:
        overrides["total_steps"] = str(args.steps)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)

    merged_presets = {**model_presets, **train_presets}
    resolved, sources = resolve_config(merged_presets, file_kv, overrides)
    # one user-facing alpha / p_rank_weights pair feeds both configs
    model_kwargs = {k: resolved[k] for k in model_presets}
    train_kwargs = {k: resolved[k] for k in train_presets}
    model_config = ModelConfig(
        phoneme_vocab_size=corpus.spec.phoneme_vocab_size,
        num_channels=corpus.spec.num_channels,
        codebook_size=corpus.spec.codebook_size,
        **model_kwargs,
    )
    train_config = TrainConfig(**train_kwargs)

    out_dir = Path(args.out)
    with output_lock(out_dir):
        result = run_training(
            corpus,
            train_config,
            model_config,
            out_dir=out_dir,
            resume_from=Path(args.resume) if args.resume else None,
            log_fn=print,
        )
        write_manifest(
            out_dir / "manifest.json",
            command="train",
            seed=train_config.seed,
            config=_json_safe(
                {**model_config.to_dict(), **dataclasses.asdict(train_config)}
            ),
            sources=sources,
            inputs={"corpus": str(corpus_dir), "resume": args.resume or ""},
            outputs={"checkpoint": str(result.checkpoint_dir), "progress": str(out_dir / "progress.log")},
            started=started,
        )
    final = result.reports[-1]
    print(f"final step {final.step}: total={final.total:.4f}")
    return 0


# -- synthesize ----------------------------------------------------------------


def _read_text_file(path: Path, vocab: int) -> np.ndarray:
    tokens = path.read_text(encoding="utf-8").split()
    try:
        ids = np.array([int(t) for t in tokens], dtype=np.int64)
    except ValueError as exc:
        raise ValidationError(f"{path}: text file must contain integer phoneme ids: {exc}") from None
    if ids.size == 0:
        raise ValidationError(f"{path}: empty target text")
    if ids.min() < 0 or ids.max() >= vocab:
        raise ValidationError(f"{path}: phoneme id out of range [0, {vocab})")
    return ids


def cmd_synthesize(args: argparse.Namespace) -> int:
    started = time.time()
    if args.iterations < 1:
        raise ValidationError(f"iterations must be >= 1, got {args.iterations}")
    ckpt = load_checkpoint(Path(args.checkpoint))
    prompt = load_utterance_file(Path(args.prompt))
    if prompt.grid.shape[1] != ckpt.config.num_channels:
        raise ValidationError(
            f"prompt has {prompt.grid.shape[1]} channels, checkpoint expects "
            f"{ckpt.config.num_channels}"
        )
    text = _read_text_file(Path(args.text), ckpt.config.phoneme_vocab_size)

    out_path = Path(args.out)
    out_dir = out_path.parent if out_path.suffix else out_path
    grid_path = out_path if out_path.suffix else out_path / "generated.bin"
    with output_lock(out_dir):
        rng = named_stream(args.seed, "synthesize")
        t0 = time.perf_counter()
        grid, trace = synthesize(
            ckpt.model,
            text,
            prompt.grid,
            args.iterations,
            rng,
            prompt_phonemes=prompt.phonemes,
        )
        elapsed = time.perf_counter() - t0
        spec_kv = ckpt.extra.get("corpus_spec")
        frame_rate = float(spec_kv["frame_rate"]) if spec_kv else CorpusSpec().frame_rate
        rtf = measure_rtf(grid.num_frames, frame_rate, elapsed)

        fake_spec = CorpusSpec.from_key_values(spec_kv) if spec_kv else CorpusSpec(
            phoneme_vocab_size=ckpt.config.phoneme_vocab_size,
            num_channels=ckpt.config.num_channels,
            codebook_size=ckpt.config.codebook_size,
        )
        hyp_phonemes, hyp_durations = _collapse(grid.tokens)
        record = corpus_mod.Utterance(
            phonemes=hyp_phonemes, speaker=prompt.speaker, grid=grid.tokens, durations=hyp_durations
        )
        corpus_mod.save_utterance_file(grid_path, record, fake_spec)
        trace_path = grid_path.with_suffix(".trace.txt")
        trace_path.write_text("\n".join(trace.to_lines()) + "\n", encoding="utf-8")
        write_manifest(
            grid_path.with_suffix(".manifest.json"),
            command="synthesize",
            seed=args.seed,
            config={"iterations": args.iterations},
            sources={"iterations": "flag" if args.iterations != 8 else "preset"},
            inputs={"checkpoint": args.checkpoint, "prompt": args.prompt, "text": args.text},
            outputs={"grid": str(grid_path), "trace": str(trace_path)},
            started=started,
        )
    print(f"generated {grid.num_frames} frames (rtf={rtf:.4f}) -> {grid_path}")
    return 0


def _collapse(tokens: np.ndarray):
    from .grid import run_lengths

    return run_lengths(tokens[:, 0])


# -- eval / ablate / count-params ---------------------------------------------


def _load_eval_inputs(args) -> tuple:
    ckpt = load_checkpoint(Path(args.checkpoint))
    corpus = load_corpus(Path(args.corpus))
    utts = corpus.utterances[: args.limit] if args.limit else corpus.utterances
    return ckpt, corpus, utts


def cmd_eval(args: argparse.Namespace) -> int:
    started = time.time()
    ckpt, corpus, utts = _load_eval_inputs(args)
    out_dir = Path(args.out)
    with output_lock(out_dir):
        report = evaluate_checkpoint(
            ckpt.model, utts, corpus.spec, iterations=args.iterations, seed=args.seed
        )
        lines = [
            f"num_utterances={report.num_utterances}",
            f"per={report.per!r}",
            f"speaker_consistency={report.speaker_consistency!r}",
            f"mean_rtf={report.mean_rtf!r}",
        ]
        (out_dir / "metrics.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
        write_manifest(
            out_dir / "manifest.json",
            command="eval",
            seed=args.seed,
            config={"iterations": args.iterations, "limit": args.limit},
            sources={"iterations": "flag", "limit": "flag"},
            inputs={"checkpoint": args.checkpoint, "corpus": args.corpus},
            outputs={"metrics": str(out_dir / "metrics.txt")},
            started=started,
        )
    print("\n".join(lines))
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    started = time.time()
    ckpt, corpus, utts = _load_eval_inputs(args)
    iteration_list = [int(x) for x in args.iterations.replace(",", " ").split()]
    if any(i < 1 for i in iteration_list):
        raise ValidationError("iteration counts must be >= 1")
    out_dir = Path(args.out)
    with output_lock(out_dir):
        rows = run_ablation(
            ckpt.model,
            utts,
            corpus.spec,
            iteration_list=iteration_list,
            seed=args.seed,
            timing_repeats=args.repeats,
        )
        table = format_ablation_table(rows)
        (out_dir / "ablation.txt").write_text(table + "\n", encoding="utf-8")
        kv_lines = []
        for r in rows:
            kv_lines.append(
                f"iterations={r.iterations} rtf={r.mean_rtf!r} per={r.per!r} "
                f"speaker_consistency={r.speaker_consistency!r} "
                f"decode_seconds={r.mean_decode_seconds!r} forward_passes={r.forward_passes}"
            )
        (out_dir / "ablation.kv").write_text("\n".join(kv_lines) + "\n", encoding="utf-8")
        write_manifest(
            out_dir / "manifest.json",
            command="ablate",
            seed=args.seed,
            config={"iterations": iteration_list, "limit": args.limit, "repeats": args.repeats},
            sources={"iterations": "flag", "limit": "flag", "repeats": "flag"},
            inputs={"checkpoint": args.checkpoint, "corpus": args.corpus},
            outputs={"table": str(out_dir / "ablation.txt")},
            started=started,
        )
    print(table)
    return 0


def cmd_count_params(args: argparse.Namespace) -> int:
    started = time.time()
    if args.config:
        kv = read_key_values(Path(args.config))
        base = paper_config() if args.preset == "paper" else desk_config(CorpusSpec())
        merged = base.to_dict()
        for key, raw in kv.items():
            if key not in merged:
                raise ValidationError(f"unknown config key {key!r} in config file")
            merged[key] = _parse_value(key, raw) if key in _MODEL_KEYS else int(raw)
        config = ModelConfig.from_dict(merged)
    elif args.preset == "paper":
        config = paper_config()
    else:
        config = desk_config(CorpusSpec())
    counts = audit_parameters(config)
    width = max(len(k) for k in counts)
    lines = [f"{k.ljust(width)}  {v:>12,}" for k, v in counts.items()]
    print("\n".join(lines))
    if args.out:
        out_dir = Path(args.out)
        with output_lock(out_dir):
            (out_dir / "parameters.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
            write_manifest(
                out_dir / "manifest.json",
                command="count-params",
                seed=None,
                config=_json_safe(config.to_dict()),
                sources={"preset": "flag"},
                inputs={"config": args.config or ""},
                outputs={"table": str(out_dir / "parameters.txt")},
                started=started,
            )
    return 0


# -- entry point ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="masktts",
        description="Masked parallel codec-token speech synthesis toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="render a synthetic codec-token corpus")
    p.add_argument("--spec", required=True, help="key=value corpus spec file")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", help="train a checkpoint on a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="key=value training/model config")
    p.add_argument("--preset", choices=("desk", "paper"), default="desk")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--resume", default=None, help="checkpoint directory to resume from")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("synthesize", help="generate a token grid from text and a prompt")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prompt", required=True, help="utterance record supplying the acoustic prompt")
    p.add_argument("--text", required=True, help="file of whitespace-separated phoneme ids")
    p.add_argument("--out", required=True)
    p.add_argument("--iterations", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("eval", help="held-out metrics for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iterations", type=int, default=8)
    p.add_argument("--limit", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="decode-iteration sweep")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iterations", default="1,4,8,16,24")
    p.add_argument("--limit", type=int, default=0)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("count-params", help="per-module parameter audit")
    p.add_argument("--preset", choices=("desk", "paper"), default="desk")
    p.add_argument("--config", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_count_params)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3
    except (AssertionError, RuntimeError) as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
