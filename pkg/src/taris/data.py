"""Vocabulary, synthetic corpora, feature files and minibatching."""

from __future__ import annotations

import os
import string
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .segmentation import GO_ID, SPACE_ID

FEATURE_MAGIC = b"TFEA"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sH")


class OOVError(ValueError):
    pass


class FeatureFileError(ValueError):
    """Base class for malformed feature files."""


class FeatureMagicError(FeatureFileError):
    pass


class FeatureVersionError(FeatureFileError):
    pass


class FeatureTruncatedError(FeatureFileError):
    pass


class FeatureSizeError(FeatureFileError):
    """Declared N * d_in disagrees with the payload that follows the header."""


class Vocabulary:
    """GO, SPACE, then the 26 lowercase letters."""

    def __init__(self, letters: str = string.ascii_lowercase):
        self.tokens: List[str] = ["<go>", " "] + list(letters)
        self.token_to_id: Dict[str, int] = {t: i for i, t in enumerate(self.tokens)}
        assert self.token_to_id[" "] == SPACE_ID and self.tokens[GO_ID] == "<go>"

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def go(self) -> int:
        return GO_ID

    @property
    def space(self) -> int:
        return SPACE_ID

    def encode(self, text: str) -> List[int]:
        return encode_transcript(text, self)

    def decode(self, ids: Iterable[int]) -> str:
        return decode_transcript(ids, self)


def encode_transcript(text: str, vocab: Vocabulary) -> List[int]:
    """Map text to token ids; a trailing SPACE stands in for end-of-sentence."""
    ids = []
    for pos, ch in enumerate(text):
        tid = vocab.token_to_id.get(ch)
        if tid is None or tid == GO_ID:
            raise OOVError(f"out-of-vocabulary character {ch!r} at position {pos}")
        ids.append(tid)
    if not ids or ids[-1] != SPACE_ID:
        ids.append(SPACE_ID)
    return ids


def decode_transcript(ids: Iterable[int], vocab: Vocabulary) -> str:
    return "".join(vocab.tokens[i] for i in ids if i != GO_ID)


@dataclass
class Utterance:
    utt_id: str
    features: np.ndarray  # N x d_in, float32
    transcript: List[int]
    frame_hop_ms: float = 30.0
    # per word (start_frame, end_frame_exclusive) of the rendered audio, when known
    word_spans: Optional[List[Tuple[int, int]]] = None

    def __post_init__(self):
        if not self.transcript or self.transcript[-1] != SPACE_ID:
            raise ValueError(f"{self.utt_id}: transcript must be non-empty and end with SPACE")

    @property
    def num_frames(self) -> int:
        return int(self.features.shape[0])

    @property
    def num_words(self) -> int:
        return sum(1 for t in self.transcript if t == SPACE_ID)


@dataclass
class SyntheticSpec:
    seed: int = 0
    num_utterances: int = 1000
    words_per_utt: Tuple[int, int] = (2, 6)
    word_length: Tuple[int, int] = (2, 5)
    frames_per_char: Tuple[int, int] = (2, 4)
    feature_dim: int = 40
    noise_std: float = 0.3
    silence_frames: Tuple[int, int] = (1, 3)
    frame_hop_ms: float = 30.0
    # False renders words back to back and drops inter-word spaces (character-counting corpora)
    insert_silence: bool = True

    def __post_init__(self):
        for name in ("words_per_utt", "word_length", "frames_per_char", "silence_frames"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < (0 if name == "silence_frames" else 1):
                raise ValueError(f"{name} must be a non-empty positive range, got {(lo, hi)}")
            setattr(self, name, (int(lo), int(hi)))
        if self.num_utterances < 1 or self.feature_dim < 1:
            raise ValueError("num_utterances and feature_dim must be positive")
        if self.noise_std < 0 or self.frame_hop_ms <= 0:
            raise ValueError("noise_std must be >= 0 and frame_hop_ms > 0")

    @property
    def word_frames(self) -> Tuple[int, int]:
        """Range of frames a single rendered word can span (silence excluded)."""
        return (
            self.word_length[0] * self.frames_per_char[0],
            self.word_length[1] * self.frames_per_char[1],
        )


def synth_generate(spec: SyntheticSpec, vocab: Optional[Vocabulary] = None) -> List[Utterance]:
    """Render random letter strings as noisy piecewise-constant feature tracks.

    Every letter owns a fixed random base vector for the corpus; a character
    is that vector held for a sampled number of frames. Words are separated by
    near-zero silence frames unless ``spec.insert_silence`` is off.
    """
    vocab = vocab or Vocabulary()
    rng = np.random.default_rng(spec.seed)
    letters = vocab.tokens[2:]
    bases = rng.standard_normal((len(letters), spec.feature_dim))
    utts = []
    for u in range(spec.num_utterances):
        n_words = int(rng.integers(spec.words_per_utt[0], spec.words_per_utt[1] + 1))
        rows: List[np.ndarray] = []
        words = []
        spans = []
        pos = 0
        for k in range(n_words):
            if k > 0 and spec.insert_silence:
                n_sil = int(rng.integers(spec.silence_frames[0], spec.silence_frames[1] + 1))
                rows.append(np.zeros((n_sil, spec.feature_dim)))
                pos += n_sil
            length = int(rng.integers(spec.word_length[0], spec.word_length[1] + 1))
            chars = rng.integers(0, len(letters), size=length)
            start = pos
            for c in chars:
                dur = int(rng.integers(spec.frames_per_char[0], spec.frames_per_char[1] + 1))
                rows.append(np.repeat(bases[c][None, :], dur, axis=0))
                pos += dur
            spans.append((start, pos))
            words.append("".join(letters[c] for c in chars))
        feats = np.concatenate(rows, axis=0)
        feats = feats + spec.noise_std * rng.standard_normal(feats.shape)
        text = " ".join(words) if spec.insert_silence else "".join(words)
        utts.append(
            Utterance(
                utt_id=f"utt{u:05d}",
                features=feats.astype(np.float32),
                transcript=encode_transcript(text, vocab),
                frame_hop_ms=spec.frame_hop_ms,
                word_spans=spans,
            )
        )
    return utts


# -- feature files ----------------------------------------------------------


def save_features(path, utt: Utterance) -> None:
    feats = np.ascontiguousarray(utt.features, dtype="<f4")
    uid = utt.utt_id.encode("utf-8")
    n, d = feats.shape
    blob = b"".join(
        [
            _HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION),
            struct.pack("<H", len(uid)),
            uid,
            struct.pack("<IIf", d, n, utt.frame_hop_ms),
            feats.tobytes(),
        ]
    )
    _atomic_write(path, blob)


def load_features(path) -> Tuple[str, np.ndarray, float]:
    """Read a feature file; returns ``(utt_id, features[N x d_in], frame_hop_ms)``."""
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise FeatureTruncatedError(f"{path}: file shorter than header")
    magic, version = _HEADER.unpack_from(blob, 0)
    if magic != FEATURE_MAGIC:
        raise FeatureMagicError(f"{path}: bad magic {magic!r}")
    if version != FEATURE_VERSION:
        raise FeatureVersionError(f"{path}: unsupported version {version}")
    off = _HEADER.size
    if len(blob) < off + 2:
        raise FeatureTruncatedError(f"{path}: truncated utt_id length")
    (id_len,) = struct.unpack_from("<H", blob, off)
    off += 2
    if len(blob) < off + id_len + 12:
        raise FeatureTruncatedError(f"{path}: truncated header")
    uid = blob[off : off + id_len].decode("utf-8")
    off += id_len
    d, n, hop = struct.unpack_from("<IIf", blob, off)
    off += 12
    want = n * d * 4
    have = len(blob) - off
    if have < want:
        raise FeatureTruncatedError(f"{path}: payload has {have} bytes, header declares {want}")
    if have > want:
        raise FeatureSizeError(f"{path}: N*d_in = {n}*{d} leaves {have - want} unaccounted payload bytes")
    feats = np.frombuffer(blob, dtype="<f4", count=n * d, offset=off).reshape(n, d).astype(np.float32)
    return uid, feats, float(hop)


def _atomic_write(path, blob: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def write_corpus(utts: Sequence[Utterance], out_dir, name: str = "corpus", vocab: Optional[Vocabulary] = None) -> Path:
    """Write feature files, a transcript sidecar and a manifest; returns the manifest path."""
    vocab = vocab or Vocabulary()
    out_dir = Path(out_dir)
    feat_dir = out_dir / name
    feat_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    trans = []
    for u in utts:
        fpath = feat_dir / f"{u.utt_id}.tfea"
        save_features(fpath, u)
        lines.append(f"{name}/{u.utt_id}.tfea")
        trans.append(f"{u.utt_id}\t{decode_transcript(u.transcript, vocab)}")
    (feat_dir / "transcripts.txt").write_text("\n".join(trans) + "\n", encoding="utf-8")
    manifest = out_dir / f"{name}.manifest"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


def read_transcripts(path) -> Dict[str, str]:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line:
            continue
        uid, _, text = line.partition("\t")
        out[uid] = text
    return out


def load_corpus(manifest, vocab: Optional[Vocabulary] = None) -> List[Utterance]:
    vocab = vocab or Vocabulary()
    manifest = Path(manifest)
    base = manifest.parent
    paths = [base / p for p in manifest.read_text(encoding="utf-8").split("\n") if p.strip()]
    sidecars: Dict[Path, Dict[str, str]] = {}
    utts = []
    for p in paths:
        uid, feats, hop = load_features(p)
        side = p.parent / "transcripts.txt"
        if side not in sidecars:
            sidecars[side] = read_transcripts(side)
        utts.append(Utterance(uid, feats, encode_transcript(sidecars[side][uid], vocab), hop))
    return utts


# -- batching ---------------------------------------------------------------


@dataclass
class Batch:
    features: np.ndarray  # B x N x d_in
    tokens: np.ndarray  # B x L decoder targets
    frame_valid: np.ndarray  # B x N bool
    token_valid: np.ndarray  # B x L bool
    utt_ids: List[str] = field(default_factory=list)

    @property
    def size(self) -> int:
        return int(self.features.shape[0])

    @property
    def tokens_in(self) -> np.ndarray:
        """GO-prefixed teacher-forcing input (targets shifted right)."""
        y_in = np.full_like(self.tokens, GO_ID)
        y_in[:, 1:] = self.tokens[:, :-1]
        return np.where(self.token_valid, y_in, GO_ID)


def batch_pad(utts: Sequence[Utterance], vocab: Optional[Vocabulary] = None, dtype=np.float32) -> Batch:
    if not utts:
        raise ValueError("batch_pad needs at least one utterance")
    B = len(utts)
    n_max = max(u.num_frames for u in utts)
    l_max = max(len(u.transcript) for u in utts)
    d = utts[0].features.shape[1]
    feats = np.zeros((B, n_max, d), dtype=dtype)
    tokens = np.full((B, l_max), GO_ID, dtype=np.int64)
    fv = np.zeros((B, n_max), dtype=bool)
    tv = np.zeros((B, l_max), dtype=bool)
    for b, u in enumerate(utts):
        feats[b, : u.num_frames] = u.features
        tokens[b, : len(u.transcript)] = u.transcript
        fv[b, : u.num_frames] = True
        tv[b, : len(u.transcript)] = True
    return Batch(feats, tokens, fv, tv, [u.utt_id for u in utts])


def make_batches(
    utts: Sequence[Utterance], batch_size: int, rng: Optional[np.random.Generator] = None
) -> List[List[Utterance]]:
    """Group utterances of similar length; batch order is shuffled when ``rng`` is given.

    Bucketing sorts a (possibly shuffled) copy by frame count so that ties are
    broken differently each epoch.
    """
    order = np.arange(len(utts))
    if rng is not None:
        order = rng.permutation(len(utts))
    order = sorted(order, key=lambda i: utts[i].num_frames)
    groups = [[utts[i] for i in order[s : s + batch_size]] for s in range(0, len(order), batch_size)]
    if rng is not None:
        groups = [groups[i] for i in rng.permutation(len(groups))]
    return groups
