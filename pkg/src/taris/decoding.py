"""Online inference: stop target, greedy and beam search, metrics, segments, streaming."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .data import Utterance, Vocabulary, decode_transcript
from .segmentation import (
    GO_ID,
    UNBOUNDED,
    CountUnit,
    SegmentIndices,
    WordIndices,
    build_dynamic_mask,
    estimated_count,
    frame_segment_indices,
)
from .tensor import ContractError, Tensor
from .transformer import EncoderOutput, ModelConfig, Params, decoder_step, encode, has_gate

DEFAULT_LENGTH_CAP = 400


def stop_target(alpha, frame_valid=None, max_words: int = DEFAULT_LENGTH_CAP) -> int:
    """Number of units the decoder should emit: Σα rounded half away from zero, clamped to [1, max_words]."""
    total = estimated_count(alpha, frame_valid)
    rounded = int(math.floor(abs(total) + 0.5)) * (1 if total >= 0 else -1)
    return int(min(max(rounded, 1), max_words))


def is_boundary(token: int, count_unit: CountUnit) -> bool:
    if CountUnit(count_unit) is CountUnit.SPACE:
        return token == 1
    return token != GO_ID


@dataclass
class Hypothesis:
    tokens: List[int]
    log_prob: float = 0.0
    words_emitted: int = 0
    finished: bool = False
    hit_cap: bool = False

    @property
    def score(self) -> float:
        """Length-normalised log probability."""
        return self.log_prob / max(len(self.tokens), 1)


@dataclass
class DecodeStep:
    token: int
    word_index: int
    admissible: np.ndarray  # bool over frames
    attention: Optional[np.ndarray] = None  # last-layer cross-attention weights


class _OnlineContext:
    """Per-utterance state shared by greedy and beam search."""

    def __init__(self, enc: EncoderOutput, cfg: ModelConfig, params: Params, stop: Optional[int], length_cap: int):
        if enc.memory.ndim != 2:
            raise ContractError("online decoding works on a single utterance (memory N x h)")
        self.cfg = cfg
        self.params = params
        self.memory = enc.memory
        self.frame_valid = np.asarray(enc.frame_valid, dtype=bool)
        self.length_cap = length_cap
        self.seg: Optional[SegmentIndices] = None
        if enc.alpha is not None:
            self.seg = frame_segment_indices(enc.alpha)
        if stop is None:
            if enc.alpha is None:
                raise ContractError("a model without a gate needs an explicit stop target")
            stop = stop_target(enc.alpha, self.frame_valid, length_cap)
        self.stop = int(stop)

    def cross_row(self, word_index: int) -> np.ndarray:
        if self.seg is None:
            return self.frame_valid.copy()
        mask = build_dynamic_mask(
            self.seg, WordIndices(np.array([word_index])), self.cfg.d_LB, self.cfg.d_LA, self.frame_valid
        )
        return mask.admissible[0]

    def step(self, token: int, position: int, cache, word_index: int, record=None):
        row = self.cross_row(word_index)
        logits, cache = decoder_step(token, position, cache, self.memory, row, self.cfg, self.params, record)
        z = logits - logits.max()
        logp = z - np.log(np.exp(z).sum())
        logp = logp.astype(np.float64)
        logp[GO_ID] = -np.inf  # GO is never emitted
        return logp, cache, row, logits


def greedy_decode(
    enc: EncoderOutput,
    cfg: ModelConfig,
    params: Params,
    length_cap: int = DEFAULT_LENGTH_CAP,
    stop: Optional[int] = None,
    return_logits: bool = False,
):
    """Argmax decoding that stops once ``stop`` boundary tokens are emitted.

    Returns ``(hypothesis, steps)``; with ``return_logits`` also the raw
    logits of every step.
    """
    ctx = _OnlineContext(enc, cfg, params, stop, length_cap)
    hyp = Hypothesis(tokens=[])
    steps: List[DecodeStep] = []
    all_logits = []
    cache: list = []
    prev = GO_ID
    for pos in range(length_cap):
        record: list = []
        logp, cache, row, logits = ctx.step(prev, pos, cache, hyp.words_emitted, record)
        all_logits.append(logits)
        tok = int(np.argmax(logp))
        steps.append(DecodeStep(tok, hyp.words_emitted, row, record[-1][0, 0] if record else None))
        hyp.tokens.append(tok)
        hyp.log_prob += float(logp[tok])
        if is_boundary(tok, cfg.count_unit):
            hyp.words_emitted += 1
        prev = tok
        if hyp.words_emitted >= ctx.stop:
            hyp.finished = True
            break
    else:
        hyp.hit_cap = True
        hyp.finished = True
    if return_logits:
        return hyp, steps, np.stack(all_logits)
    return hyp, steps


@dataclass
class _Beam:
    hyp: Hypothesis
    cache: list = field(default_factory=list)


def beam_search_decode(
    enc: EncoderOutput,
    cfg: ModelConfig,
    params: Params,
    beam_width: int = 4,
    length_cap: int = DEFAULT_LENGTH_CAP,
    stop: Optional[int] = None,
) -> Hypothesis:
    """Beam search whose beams finish on reaching the stop target.

    Live beams are ranked by summed log probability; finished hypotheses are
    compared by length-normalised score. Each beam tracks its own emitted
    unit count.
    """
    if beam_width < 1:
        raise ContractError("beam_width must be >= 1")
    ctx = _OnlineContext(enc, cfg, params, stop, length_cap)
    alive = [_Beam(Hypothesis(tokens=[]))]
    finished: List[Hypothesis] = []
    for pos in range(length_cap):
        cands = []
        expanded = []
        for bi, beam in enumerate(alive):
            prev = beam.hyp.tokens[-1] if beam.hyp.tokens else GO_ID
            logp, cache, _, _ = ctx.step(prev, pos, beam.cache, beam.hyp.words_emitted)
            expanded.append(cache)
            for tok in np.flatnonzero(np.isfinite(logp)):
                cands.append((beam.hyp.log_prob + float(logp[tok]), bi, int(tok)))
        # stable: ties keep earlier beam, then lower token id
        cands.sort(key=lambda c: -c[0])
        alive_next = []
        for score, bi, tok in cands[:beam_width]:
            parent = alive[bi].hyp
            words = parent.words_emitted + int(is_boundary(tok, cfg.count_unit))
            hyp = Hypothesis(parent.tokens + [tok], score, words)
            if words >= ctx.stop:
                hyp.finished = True
                finished.append(hyp)
            else:
                alive_next.append(_Beam(hyp, expanded[bi]))
        alive = alive_next
        if not alive:
            break
    if finished:
        return max(finished, key=lambda h: h.score)
    best = max((b.hyp for b in alive), key=lambda h: h.score)
    best.hit_cap = True
    best.finished = True
    return best


# -- metrics ----------------------------------------------------------------


def edit_distance(a: Sequence, b: Sequence) -> int:
    """Levenshtein distance with unit costs."""
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return prev[-1]


def cer(hyp: Sequence, ref: Sequence) -> float:
    if len(ref) == 0:
        raise ContractError("character error rate needs a non-empty reference")
    return edit_distance(hyp, ref) / len(ref)


# -- segments ---------------------------------------------------------------


@dataclass
class SegmentationResult:
    boundaries: List[int]  # frames where the segment index increments
    starts: List[int]
    ends: List[int]  # exclusive
    closed: List[bool]
    frame_hop_ms: float
    estimated_count: float

    @property
    def durations_frames(self) -> List[int]:
        return [e - s for s, e in zip(self.starts, self.ends)]

    @property
    def durations_ms(self) -> List[float]:
        return [d * self.frame_hop_ms for d in self.durations_frames]

    def __len__(self) -> int:
        return len(self.starts)


def extract_segments(seg: SegmentIndices, frame_hop_ms: float = 30.0, frame_valid=None) -> SegmentationResult:
    """Split the valid frames at every increment of the segment index.

    Closed segments end where the running gate total crosses an integer. The
    frames after the last crossing form an open segment; it is reported on
    its own when its partial mass would round up to a unit, and otherwise
    folded into the preceding segment, so the number of segments equals the
    decoder's stop target and the segments always tile the frame range.
    """
    w_hat = np.asarray(seg.w_hat)
    cum = np.asarray(seg.cum_alpha, dtype=np.float64)
    if frame_valid is not None:
        n = int(np.asarray(frame_valid, dtype=bool).sum())
        w_hat, cum = w_hat[:n], cum[:n]
    n = len(w_hat)
    if n == 0:
        return SegmentationResult([], [], [], [], frame_hop_ms, 0.0)
    boundaries = [int(i) for i in np.flatnonzero(np.diff(w_hat)) + 1]
    starts = [0] + boundaries
    ends = boundaries + [n]
    closed = [True] * len(boundaries) + [False]
    remainder = float(cum[-1] - w_hat[-1])
    if boundaries and remainder < 0.5:
        ends = ends[:-2] + [n]
        starts = starts[:-1]
        closed = closed[:-1]
    return SegmentationResult(boundaries, starts, ends, closed, frame_hop_ms, float(cum[-1]))


# -- streaming --------------------------------------------------------------


@dataclass
class StreamResult:
    memory: np.ndarray  # N x h
    alpha: Optional[np.ndarray]
    emitted_at: List[int]  # arrival index of the frame that released each row
    latency_frames: int
    latency_ms: float


class StreamingEncoder:
    """Frame-by-frame encoder that releases output row i once frame i + L*e_LA has arrived.

    Each release recomputes the windowed encoder over the frames that can
    influence the released rows, with absolute positions preserved.
    """

    def __init__(self, cfg: ModelConfig, params: Params, frame_hop_ms: float = 30.0):
        if cfg.e_LA == UNBOUNDED:
            raise ContractError("streaming needs a finite encoder look-ahead")
        self.cfg = cfg
        self.params = params
        self.hop = frame_hop_ms
        self.lookahead = cfg.num_layers * int(cfg.e_LA)
        self.lookback = None if cfg.e_LB == UNBOUNDED else cfg.num_layers * int(cfg.e_LB)
        self.frames: List[np.ndarray] = []
        self.next_row = 0
        self.rows: List[np.ndarray] = []
        self.alphas: List[float] = []
        self.emitted_at: List[int] = []

    @property
    def latency_ms(self) -> float:
        return self.lookahead * self.hop

    def _release(self, upto: int) -> List[int]:
        """Compute rows next_row..upto (inclusive) from the frames seen so far."""
        first, last = self.next_row, upto
        if last < first:
            return []
        lo = 0 if self.lookback is None else max(0, first - self.lookback)
        hi = len(self.frames)
        chunk = np.stack(self.frames[lo:hi])
        enc = encode(chunk, self.cfg, self.params, offset=lo)
        arrived = len(self.frames) - 1
        for i in range(first, last + 1):
            self.rows.append(enc.memory.data[i - lo].copy())
            if enc.alpha is not None:
                self.alphas.append(float(enc.alpha.data[i - lo]))
            self.emitted_at.append(arrived)
        self.next_row = last + 1
        return list(range(first, last + 1))

    def push(self, frame) -> List[int]:
        """Add one frame; returns the indices of rows released by it."""
        self.frames.append(np.asarray(frame))
        return self._release(len(self.frames) - 1 - self.lookahead)

    def finish(self) -> StreamResult:
        self._release(len(self.frames) - 1)
        alpha = np.array(self.alphas) if self.alphas else None
        return StreamResult(np.stack(self.rows), alpha, self.emitted_at, self.lookahead, self.latency_ms)


def streaming_encode(frames: Iterable, cfg: ModelConfig, params: Params, frame_hop_ms: float = 30.0) -> StreamResult:
    enc = StreamingEncoder(cfg, params, frame_hop_ms)
    for f in frames:
        enc.push(f)
    return enc.finish()


# -- corpus evaluation ------------------------------------------------------


@dataclass
class DecodeRecord:
    utt_id: str
    hypothesis: str
    reference: str
    cer: float
    stop_target: int
    words_emitted: int
    hit_cap: bool
    estimated_count: float
    true_count: int


def encode_utterance(utt: Utterance, cfg: ModelConfig, params: Params) -> EncoderOutput:
    dtype = params["encoder.input.W"].dtype
    return encode(utt.features.astype(dtype), cfg, params)


def decode_utterance(
    utt: Utterance,
    cfg: ModelConfig,
    params: Params,
    vocab: Optional[Vocabulary] = None,
    beam_width: int = 1,
    length_cap: int = DEFAULT_LENGTH_CAP,
    stop: Optional[int] = None,
) -> DecodeRecord:
    vocab = vocab or Vocabulary()
    enc = encode_utterance(utt, cfg, params)
    if beam_width == 1:
        hyp, _ = greedy_decode(enc, cfg, params, length_cap, stop)
    else:
        hyp = beam_search_decode(enc, cfg, params, beam_width, length_cap, stop)
    ref = list(utt.transcript)
    est = estimated_count(enc.alpha) if enc.alpha is not None else float("nan")
    true = sum(1 for t in ref if is_boundary(t, cfg.count_unit))
    return DecodeRecord(
        utt.utt_id,
        decode_transcript(hyp.tokens, vocab),
        decode_transcript(ref, vocab),
        cer(hyp.tokens, ref),
        stop if stop is not None else stop_target(enc.alpha, None, length_cap),
        hyp.words_emitted,
        hyp.hit_cap,
        est,
        true,
    )


def decode_corpus(
    utts: Sequence[Utterance],
    cfg: ModelConfig,
    params: Params,
    beam_width: int = 1,
    jobs: int = 1,
    length_cap: int = DEFAULT_LENGTH_CAP,
) -> List[DecodeRecord]:
    """Decode every utterance; results keep input order regardless of ``jobs``."""
    fn = lambda u: decode_utterance(u, cfg, params, beam_width=beam_width, length_cap=length_cap)  # noqa: E731
    if jobs <= 1:
        return [fn(u) for u in utts]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, utts))


def mean_cer(records: Sequence[DecodeRecord]) -> Tuple[float, float]:
    """Mean CER and the half-width of its 95% normal confidence interval."""
    vals = np.array([r.cer for r in records], dtype=np.float64)
    if len(vals) < 2:
        return float(vals.mean()), 0.0
    return float(vals.mean()), float(1.96 * vals.std(ddof=1) / math.sqrt(len(vals)))


DECODE_FIELDS = ("utt_id", "hypothesis", "reference", "cer", "stop_target", "words_emitted", "hit_cap")
SEGMENT_FIELDS = ("utt_id", "segment_index", "start_frame", "end_frame", "duration_ms")


def write_decode_csv(path, records: Sequence[DecodeRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DECODE_FIELDS)
        for r in records:
            w.writerow([r.utt_id, r.hypothesis, r.reference, f"{r.cer:.6f}", r.stop_target, r.words_emitted, int(r.hit_cap)])


def write_segment_csv(path, segments: Sequence[Tuple[str, SegmentationResult]]) -> None:
    """One row per segment; ``end_frame`` is exclusive."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SEGMENT_FIELDS)
        for uid, res in segments:
            for k, (s, e) in enumerate(zip(res.starts, res.ends)):
                w.writerow([uid, k, s, e, f"{(e - s) * res.frame_hop_ms:.1f}"])


def duration_histogram(durations_ms: Iterable[float], bin_ms: float = 20.0) -> List[Tuple[float, int]]:
    durations = np.asarray(list(durations_ms), dtype=np.float64)
    if durations.size == 0:
        return []
    idx = np.floor(durations / bin_ms + 1e-9).astype(np.int64)
    counts = np.bincount(idx)
    return [(float(i * bin_ms), int(c)) for i, c in enumerate(counts)]
