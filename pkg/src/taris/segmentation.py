"""Word-counting gate, segment/word indices and attention masks.

The gate turns each encoder frame into a score in (0, 1). Flooring the running
total of those scores assigns every frame to a segment, and counting SPACE
tokens assigns every decoder token to a word. A decoder token may attend to
the frames whose segment lies within a window of its own word index.

Everything past the gate scores is integer-valued and carries no gradient;
the gate only learns through :func:`word_loss`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Union

import numpy as np

from .tensor import NEG_LARGE, ContractError, Tensor, matmul, sigmoid, square, sum_

UNBOUNDED = math.inf

Window = Union[int, float]


class CountUnit(str, Enum):
    SPACE = "space"
    TOKEN = "token"


GO_ID = 0
SPACE_ID = 1


@dataclass
class GateParams:
    W_G: Tensor
    b_G: Tensor

    def __post_init__(self):
        if self.W_G.ndim != 2 or self.W_G.shape[1] != 1:
            raise ContractError(f"W_G must be h x 1, got {self.W_G.shape}")
        if self.b_G.shape != (1,):
            raise ContractError(f"b_G must have shape (1,), got {self.b_G.shape}")


@dataclass
class SegmentIndices:
    w_hat: np.ndarray
    cum_alpha: np.ndarray


@dataclass
class WordIndices:
    w: np.ndarray


class AttentionMask:
    """Admissible query/key connections, stored query-major.

    ``bias`` is the additive form consumed by softmax (0 admissible,
    ``NEG_LARGE`` otherwise).
    """

    __slots__ = ("admissible",)

    def __init__(self, admissible: np.ndarray):
        self.admissible = np.asarray(admissible, dtype=bool)

    @property
    def shape(self):
        return self.admissible.shape

    @property
    def bias(self) -> np.ndarray:
        return np.where(self.admissible, 0.0, NEG_LARGE)

    def bias_as(self, dtype) -> np.ndarray:
        return np.where(self.admissible, 0.0, NEG_LARGE).astype(dtype)

    def __and__(self, other: "AttentionMask") -> "AttentionMask":
        return AttentionMask(self.admissible & other.admissible)

    def __eq__(self, other) -> bool:
        return isinstance(other, AttentionMask) and np.array_equal(self.admissible, other.admissible)

    def __repr__(self) -> str:
        return f"AttentionMask(shape={self.shape}, admitted={int(self.admissible.sum())})"


def _check_window(name: str, value: Window) -> None:
    if value != UNBOUNDED and (value < 0 or int(value) != value):
        raise ContractError(f"{name} must be a non-negative integer or UNBOUNDED, got {value!r}")


def gate_alpha(o_A: Tensor, gate: GateParams) -> Tensor:
    """Per-frame gate score ``sigmoid(o_A W_G + b_G)``, shape ``o_A.shape[:-1]``."""
    logits = matmul(o_A, gate.W_G) + gate.b_G
    alpha = sigmoid(logits)
    return alpha.reshape(alpha.shape[:-1])


def frame_segment_indices(alpha) -> SegmentIndices:
    """Floor of the running gate total along the last axis.

    Accepts a Tensor or array; the result never carries gradient. Padded
    frames must already hold alpha = 0.
    """
    a = np.asarray(alpha.data if isinstance(alpha, Tensor) else alpha, dtype=np.float64)
    # sigmoid saturates to exactly 1.0 in finite precision, which still keeps unit steps
    if a.size and (a.min() < 0 or a.max() > 1 or not np.isfinite(a).all()):
        raise ContractError(f"gate scores must lie in [0, 1]; got range [{a.min()}, {a.max()}]")
    cum = np.cumsum(a, axis=-1)
    return SegmentIndices(w_hat=np.floor(cum).astype(np.int64), cum_alpha=cum)


def label_word_indices(y, count_unit: CountUnit = CountUnit.SPACE) -> WordIndices:
    """Per-token unit index of a GO-prefixed token sequence (last axis)."""
    y = np.asarray(y)
    if CountUnit(count_unit) is CountUnit.SPACE:
        hits = y == SPACE_ID
    else:
        hits = y != GO_ID
    hits = hits.copy()
    hits[..., 0] = False  # position 0 is GO
    return WordIndices(w=np.cumsum(hits, axis=-1).astype(np.int64))


def unit_count(tokens, count_unit: CountUnit = CountUnit.SPACE, valid=None) -> np.ndarray:
    """True unit count of a label sequence (the word-loss target)."""
    tokens = np.asarray(tokens)
    if CountUnit(count_unit) is CountUnit.SPACE:
        hits = tokens == SPACE_ID
    else:
        hits = tokens != GO_ID
    if valid is not None:
        hits = hits & np.asarray(valid, dtype=bool)
    return hits.sum(axis=-1)


def build_window_mask(n: int, look_back: Window, look_ahead: Window) -> AttentionMask:
    """Frame i may attend frame j iff ``i - look_back <= j <= i + look_ahead``."""
    if n < 1:
        raise ContractError("window mask needs n >= 1")
    _check_window("look_back", look_back)
    _check_window("look_ahead", look_ahead)
    offset = np.arange(n)[None, :] - np.arange(n)[:, None]  # j - i
    ok = np.ones((n, n), dtype=bool)
    if look_back != UNBOUNDED:
        ok &= offset >= -int(look_back)
    if look_ahead != UNBOUNDED:
        ok &= offset <= int(look_ahead)
    return AttentionMask(ok)


def build_dynamic_mask(
    seg: SegmentIndices,
    words: WordIndices,
    d_LB: Window,
    d_LA: Window,
    frame_valid=None,
    token_valid=None,
) -> AttentionMask:
    """Decoder-to-encoder admissibility, shape ``[..., L, N]``.

    Token k admits frame i iff ``w_k - d_LB <= w_hat_i <= w_k + d_LA`` and the
    frame is unpadded. A row left empty falls back to the single valid frame
    whose segment index is closest to ``w_k`` (earliest on ties).
    ``token_valid`` is accepted for signature symmetry; padded token rows go
    through the same rule so their attention stays well defined.
    """
    _check_window("d_LB", d_LB)
    _check_window("d_LA", d_LA)
    w_hat = np.asarray(seg.w_hat)
    w = np.asarray(words.w)
    if frame_valid is None:
        frame_valid = np.ones(w_hat.shape, dtype=bool)
    frame_valid = np.asarray(frame_valid, dtype=bool)
    if not frame_valid.any(axis=-1).all():
        raise ContractError("cannot build a decoder mask for an utterance with no valid frames")

    # tile w over frames and w_hat over tokens
    W = np.repeat(w[..., :, None], w_hat.shape[-1], axis=-1)
    W_hat = np.repeat(w_hat[..., None, :], w.shape[-1], axis=-2)
    ok = np.broadcast_to(frame_valid[..., None, :], W.shape).copy()
    if d_LA != UNBOUNDED:
        ok &= W_hat <= W + int(d_LA)
    if d_LB != UNBOUNDED:
        ok &= W_hat >= W - int(d_LB)

    empty = ~ok.any(axis=-1)
    if empty.any():
        dist = np.abs(W_hat - W).astype(np.float64)
        dist = np.where(np.broadcast_to(frame_valid[..., None, :], W.shape), dist, np.inf)
        nearest = np.argmin(dist, axis=-1)  # argmin returns the first minimum
        idx = np.nonzero(empty)
        ok[idx + (nearest[idx],)] = True
    return AttentionMask(ok)


def word_loss(alpha: Tensor, target_count, frame_valid=None) -> Tensor:
    """Squared difference between the true unit count and the summed gate scores.

    With a leading batch axis the result is the mean over utterances.
    """
    if frame_valid is not None:
        alpha = alpha * np.asarray(frame_valid, dtype=alpha.dtype)
    total = sum_(alpha, axis=-1)
    target = np.asarray(target_count, dtype=alpha.dtype)
    err = square(total - target)
    if err.ndim == 0:
        return err
    return err.mean()


def estimated_count(alpha, frame_valid=None) -> Union[float, np.ndarray]:
    a = np.asarray(alpha.data if isinstance(alpha, Tensor) else alpha, dtype=np.float64)
    if frame_valid is not None:
        a = np.where(np.asarray(frame_valid, dtype=bool), a, 0.0)
    total = a.sum(axis=-1)
    return float(total) if np.ndim(total) == 0 else total
