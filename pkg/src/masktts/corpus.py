"""Synthetic, oracle-invertible codec-token corpus.

The generator stands in for a neural audio codec: every utterance is a
T x N grid of discrete tokens plus the phoneme sequence, per-phoneme
durations, and a speaker id that produced it. Channel 1 carries the
phoneme identity at every frame (so transcription is an exact run-length
collapse); channels >= 2 are a deterministic pseudo-random function of
(channel-1 token, speaker, channel), which makes speaker consistency
exactly measurable. Everything is a pure function of (spec, text,
speaker), so all downstream claims can be checked without audio.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "prf",
    "CorpusSpec",
    "Utterance",
    "Corpus",
    "render_utterance",
    "oracle_transcribe",
    "speaker_consistency",
    "generate_corpus",
    "save_corpus",
    "load_corpus",
    "load_utterance_file",
    "save_utterance_file",
]

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _mix64(z: int) -> int:
    # splitmix64 finalizer: full-avalanche 64-bit permutation
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def prf(parts: Sequence[int], salt: int) -> int:
    """Deterministic 64-bit hash of an integer tuple.

    Absorbs each part into a running state seeded by ``salt`` and applies a
    splitmix-style avalanche mix per step, so the result is order sensitive
    and platform independent.
    """
    if len(parts) == 0:
        raise ValueError("prf requires at least one part")
    h = salt & _MASK64
    for p in parts:
        h = (h + _GOLDEN) & _MASK64
        h = _mix64(h ^ (int(p) & _MASK64))
    return h


@dataclass(frozen=True)
class CorpusSpec:
    """Parameters of the synthetic codec and its generative process."""

    phoneme_vocab_size: int = 40
    num_speakers: int = 8
    num_channels: int = 4
    codebook_size: int = 64
    max_duration: int = 4
    frame_rate: float = 75.0
    prf_salt: int = 0x5EED_50DA

    def __post_init__(self) -> None:
        if self.codebook_size < self.phoneme_vocab_size:
            raise ValueError(
                "codebook_size must be >= phoneme_vocab_size so channel 1 can "
                f"injectively encode phonemes (got V={self.codebook_size} < "
                f"{self.phoneme_vocab_size})"
            )
        if self.num_channels < 2:
            raise ValueError("num_channels must be >= 2 (first channel plus at least one residual)")
        if self.max_duration < 1:
            raise ValueError("max_duration must be >= 1")
        if self.phoneme_vocab_size < 2:
            raise ValueError("phoneme_vocab_size must be >= 2")
        if self.num_speakers < 1:
            raise ValueError("num_speakers must be >= 1")
        if self.frame_rate <= 0:
            raise ValueError("frame_rate must be positive")

    def duration_of(self, phoneme: int, speaker: int) -> int:
        """Ground-truth duration of a phoneme for a speaker, in [1, max_duration]."""
        return 1 + prf([phoneme, speaker, 0], self.prf_salt) % self.max_duration

    def residual_token(self, first_channel_token: int, speaker: int, channel: int) -> int:
        """Ground-truth token of channel >= 2 given the frame's channel-1 token."""
        return prf([first_channel_token, speaker, channel], self.prf_salt) % self.codebook_size

    def to_key_values(self) -> dict[str, str]:
        return {
            "phoneme_vocab_size": str(self.phoneme_vocab_size),
            "num_speakers": str(self.num_speakers),
            "num_channels": str(self.num_channels),
            "codebook_size": str(self.codebook_size),
            "max_duration": str(self.max_duration),
            "frame_rate": repr(self.frame_rate),
            "prf_salt": str(self.prf_salt),
        }

    @classmethod
    def from_key_values(cls, kv: dict[str, str]) -> "CorpusSpec":
        known = {
            "phoneme_vocab_size": int,
            "num_speakers": int,
            "num_channels": int,
            "codebook_size": int,
            "max_duration": int,
            "frame_rate": float,
            "prf_salt": int,
        }
        kwargs = {}
        for key, conv in known.items():
            if key in kv:
                kwargs[key] = conv(kv[key])
        return cls(**kwargs)


@dataclass
class Utterance:
    """One rendered item: phonemes, speaker, token grid, and alignment."""

    phonemes: np.ndarray  # (P,) int64
    speaker: int
    grid: np.ndarray  # (T, N) int64
    durations: np.ndarray  # (P,) int64, each >= 1

    def __post_init__(self) -> None:
        self.phonemes = np.asarray(self.phonemes, dtype=np.int64)
        self.durations = np.asarray(self.durations, dtype=np.int64)
        self.grid = np.asarray(self.grid, dtype=np.int64)
        if self.grid.ndim != 2:
            raise ValueError("grid must be 2-D (frames x channels)")
        if int(self.durations.sum()) != self.grid.shape[0]:
            raise ValueError("sum of durations must equal the frame count")
        if len(self.phonemes) != len(self.durations):
            raise ValueError("phonemes and durations must have equal length")

    @property
    def num_frames(self) -> int:
        return int(self.grid.shape[0])

    @property
    def aligned_text(self) -> np.ndarray:
        """Frame-level phoneme ids: phoneme i repeated durations[i] times."""
        return np.repeat(self.phonemes, self.durations)


@dataclass
class Corpus:
    spec: CorpusSpec
    utterances: list[Utterance] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.utterances)


def render_utterance(phonemes: Sequence[int], speaker: int, spec: CorpusSpec) -> Utterance:
    """Render the deterministic token grid for (phonemes, speaker).

    Channel 1 of every frame of phoneme p equals p; channel j >= 2 equals
    ``spec.residual_token(p, speaker, j)``. Durations come from
    ``spec.duration_of``.
    """
    phonemes = np.asarray(phonemes, dtype=np.int64)
    if phonemes.ndim != 1:
        raise ValueError("phonemes must be a 1-D sequence")
    if len(phonemes) and (phonemes.min() < 0 or phonemes.max() >= spec.phoneme_vocab_size):
        raise ValueError(
            f"phoneme id out of range [0, {spec.phoneme_vocab_size}): "
            f"{int(phonemes.min())}..{int(phonemes.max())}"
        )
    if not 0 <= speaker < spec.num_speakers:
        raise ValueError(f"speaker id {speaker} out of range [0, {spec.num_speakers})")

    durations = np.array([spec.duration_of(int(p), speaker) for p in phonemes], dtype=np.int64)
    T = int(durations.sum())
    grid = np.zeros((T, spec.num_channels), dtype=np.int64)
    aligned = np.repeat(phonemes, durations)
    grid[:, 0] = aligned
    # Residual channels depend only on (channel-1 token, speaker, channel),
    # so a per-phoneme lookup is enough.
    for j in range(2, spec.num_channels + 1):
        table = {int(p): spec.residual_token(int(p), speaker, j) for p in set(phonemes.tolist())}
        grid[:, j - 1] = np.array([table[int(c)] for c in aligned], dtype=np.int64)
    return Utterance(phonemes=phonemes, speaker=speaker, grid=grid, durations=durations)


def oracle_transcribe(grid: np.ndarray, spec: CorpusSpec) -> np.ndarray:
    """Collapse consecutive runs of equal channel-1 tokens into phonemes.

    Exactly inverts :func:`render_utterance` whenever adjacent phonemes
    differ (which corpus generation enforces).
    """
    grid = np.asarray(grid)
    if grid.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    first = grid[:, 0]
    keep = np.ones(len(first), dtype=bool)
    keep[1:] = first[1:] != first[:-1]
    return first[keep].astype(np.int64)


def speaker_consistency(grid: np.ndarray, speaker: int, spec: CorpusSpec) -> float:
    """Fraction of residual-channel cells matching the speaker's residual rule."""
    grid = np.asarray(grid)
    T, N = grid.shape
    if T == 0:
        return 0.0
    total = 0
    hits = 0
    tables = {
        j: {int(c): spec.residual_token(int(c), speaker, j) for c in np.unique(grid[:, 0])}
        for j in range(2, N + 1)
    }
    for j in range(2, N + 1):
        expect = np.array([tables[j][int(c)] for c in grid[:, 0]], dtype=np.int64)
        hits += int((grid[:, j - 1] == expect).sum())
        total += T
    return hits / total


def _random_phoneme_seq(length: int, vocab: int, rng: np.random.Generator) -> np.ndarray:
    """Phoneme sequence with no adjacent duplicates (keeps the oracle exact)."""
    seq = np.empty(length, dtype=np.int64)
    prev = -1
    for i in range(length):
        p = int(rng.integers(0, vocab))
        if p == prev:
            # re-draw an offset in [1, vocab-1]; never lands back on prev
            p = (p + 1 + int(rng.integers(0, vocab - 1))) % vocab
        seq[i] = p
        prev = p
    return seq


def generate_corpus(
    spec: CorpusSpec,
    num_utterances: int,
    rng: np.random.Generator,
    min_phonemes: int = 6,
    max_phonemes: int = 16,
) -> Corpus:
    """Draw utterance texts and speakers, then render them deterministically."""
    if num_utterances < 0:
        raise ValueError("num_utterances must be >= 0")
    if min_phonemes < 1 or max_phonemes < min_phonemes:
        raise ValueError("need 1 <= min_phonemes <= max_phonemes")
    utts = []
    for _ in range(num_utterances):
        length = int(rng.integers(min_phonemes, max_phonemes + 1))
        phonemes = _random_phoneme_seq(length, spec.phoneme_vocab_size, rng)
        speaker = int(rng.integers(0, spec.num_speakers))
        utts.append(render_utterance(phonemes, speaker, spec))
    return Corpus(spec=spec, utterances=utts)


# ---------------------------------------------------------------------------
# On-disk format: a directory holding a key=value spec file plus one binary
# record per utterance. Record layout (little-endian):
#   u32 T, u8 N, u16 V, then T*N u16 tokens (row major), then durations as
#   u16 until they sum to T, then that many u16 phoneme ids, then u16 speaker.
# ---------------------------------------------------------------------------

SPEC_FILENAME = "corpus_spec.txt"
FORMAT_VERSION = 1


def _write_key_values(path: Path, kv: dict[str, str]) -> None:
    lines = [f"{k}={v}" for k, v in kv.items()]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_key_values(path: Path) -> dict[str, str]:
    """Parse a key=value file; malformed lines report their line number."""
    kv: dict[str, str] = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        kv[key.strip()] = value.strip()
    return kv


def utterance_to_bytes(utt: Utterance, spec: CorpusSpec) -> bytes:
    T, N = utt.grid.shape
    if N != spec.num_channels:
        raise ValueError("utterance channel count does not match spec")
    out = bytearray()
    out += struct.pack("<IBH", T, N, spec.codebook_size)
    out += utt.grid.astype("<u2").tobytes()
    out += utt.durations.astype("<u2").tobytes()
    out += utt.phonemes.astype("<u2").tobytes()
    out += struct.pack("<H", utt.speaker)
    return bytes(out)


def utterance_from_bytes(data: bytes) -> tuple[Utterance, int, int]:
    """Decode one record; returns (utterance, num_channels, codebook_size)."""
    if len(data) < 7:
        raise ValueError("utterance record truncated: missing header")
    T, N, V = struct.unpack_from("<IBH", data, 0)
    off = 7
    need = T * N * 2
    if len(data) < off + need:
        raise ValueError("utterance record truncated: token block")
    grid = np.frombuffer(data, dtype="<u2", count=T * N, offset=off).reshape(T, N).astype(np.int64)
    off += need
    durations = []
    total = 0
    while total < T:
        if len(data) < off + 2:
            raise ValueError("utterance record truncated: durations")
        (d,) = struct.unpack_from("<H", data, off)
        off += 2
        if d < 1:
            raise ValueError("utterance record corrupt: zero duration")
        durations.append(d)
        total += d
    if total != T:
        raise ValueError("utterance record corrupt: durations overshoot frame count")
    P = len(durations)
    if len(data) < off + 2 * P + 2:
        raise ValueError("utterance record truncated: phonemes/speaker")
    phonemes = np.frombuffer(data, dtype="<u2", count=P, offset=off).astype(np.int64)
    off += 2 * P
    (speaker,) = struct.unpack_from("<H", data, off)
    off += 2
    if off != len(data):
        raise ValueError("utterance record corrupt: trailing bytes")
    utt = Utterance(
        phonemes=phonemes,
        speaker=int(speaker),
        grid=grid,
        durations=np.asarray(durations, dtype=np.int64),
    )
    return utt, N, V


def save_utterance_file(path: Path, utt: Utterance, spec: CorpusSpec) -> None:
    Path(path).write_bytes(utterance_to_bytes(utt, spec))


def load_utterance_file(path: Path) -> Utterance:
    utt, _, _ = utterance_from_bytes(Path(path).read_bytes())
    return utt


def save_corpus(corpus: Corpus, out_dir: Path) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    kv = corpus.spec.to_key_values()
    kv["format_version"] = str(FORMAT_VERSION)
    kv["num_utterances"] = str(len(corpus))
    _write_key_values(out_dir / SPEC_FILENAME, kv)
    for i, utt in enumerate(corpus.utterances):
        save_utterance_file(out_dir / f"utt_{i:06d}.bin", utt, corpus.spec)


def load_corpus(in_dir: Path) -> Corpus:
    in_dir = Path(in_dir)
    spec_path = in_dir / SPEC_FILENAME
    if not spec_path.is_file():
        raise FileNotFoundError(f"no corpus spec file at {spec_path}")
    kv = read_key_values(spec_path)
    spec = CorpusSpec.from_key_values(kv)
    count = int(kv.get("num_utterances", "-1"))
    paths = sorted(in_dir.glob("utt_*.bin"))
    if count >= 0 and len(paths) != count:
        raise ValueError(f"corpus at {in_dir} lists {count} utterances but has {len(paths)} records")
    utts = []
    for p in paths:
        utt, n, v = utterance_from_bytes(p.read_bytes())
        if n != spec.num_channels or v != spec.codebook_size:
            raise ValueError(f"{p}: record header disagrees with corpus spec")
        utts.append(utt)
    return Corpus(spec=spec, utterances=utts)
