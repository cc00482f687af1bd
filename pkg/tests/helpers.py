"""Shared oracles and small trained models for the test suite."""

import itertools

import numpy as np

from taris.data import SyntheticSpec, Vocabulary, synth_generate
from taris.decoding import encode_utterance, is_boundary
from taris.segmentation import UNBOUNDED, build_dynamic_mask, frame_segment_indices, label_word_indices
from taris.tensor import log_softmax
from taris.training import Trainer, TrainConfig
from taris.transformer import ModelConfig, decode_train

AB = Vocabulary(letters="ab")


def brute_window(n, lb, la):
    ok = np.zeros((n, n), dtype=bool)
    for i in range(n):
        for j in range(n):
            ok[i, j] = (lb == UNBOUNDED or j >= i - lb) and (la == UNBOUNDED or j <= i + la)
    return ok


def brute_dynamic(w_hat, w, d_lb, d_la, frame_valid):
    """Direct per-pair reading of the admissibility rule, plus the empty-row fallback."""
    L, N = len(w), len(w_hat)
    ok = np.zeros((L, N), dtype=bool)
    for k in range(L):
        for i in range(N):
            lo = d_lb == UNBOUNDED or w_hat[i] >= w[k] - d_lb
            hi = d_la == UNBOUNDED or w_hat[i] <= w[k] + d_la
            ok[k, i] = lo and hi and frame_valid[i]
        if not ok[k].any():
            best, best_d = None, None
            for i in range(N):
                if frame_valid[i]:
                    d = abs(w_hat[i] - w[k])
                    if best_d is None or d < best_d:
                        best, best_d = i, d
            ok[k, best] = True
    return ok


def random_window(rng):
    return UNBOUNDED if rng.random() < 0.25 else int(rng.integers(0, 5))


def random_indices(rng, n, l):
    w_hat = np.cumsum(rng.integers(0, 2, n)) - 1
    w_hat = np.maximum(w_hat, 0)
    w = np.concatenate([[0], np.cumsum(rng.integers(0, 2, l - 1))]) if l > 1 else np.array([0])
    return w_hat, w


def sequence_log_probs(enc, cfg, params, seq):
    """Per-step log probabilities of ``seq`` from a full teacher-forced pass.

    GO gets no probability mass removed or redistributed; the decoder simply
    never picks it.
    """
    y_in = np.array((0,) + tuple(seq[:-1]))
    seg = frame_segment_indices(enc.alpha)
    V = build_dynamic_mask(seg, label_word_indices(y_in, cfg.count_unit), cfg.d_LB, cfg.d_LA, enc.frame_valid)
    lp = log_softmax(decode_train(y_in, enc, V, cfg, params)).data.astype(np.float64)
    return np.array([lp[k, t] for k, t in enumerate(seq)])


def exhaustive_search(enc, cfg, params, stop, cap):
    """Best length-normalised sequence over every token string that reaches ``stop`` units within ``cap``.

    Returns ``(score, tokens)`` or ``None`` when no string can finish.
    """
    best = None
    for n in range(1, cap + 1):
        for seq in itertools.product(range(1, cfg.vocab_size), repeat=n):
            units = np.cumsum([is_boundary(t, cfg.count_unit) for t in seq])
            if units[-1] != stop or (n > 1 and units[-2] >= stop):
                continue
            score = float(sequence_log_probs(enc, cfg, params, seq).sum()) / n
            if best is None or score > best[0]:
                best = (score, seq)
    return best


def toy_ab_model(epochs=40, seed=0):
    """A 1-layer model trained on a two-letter corpus (vocabulary of 4).

    Returns ``(cfg, params, eval_utterances)``.
    """
    spec = SyntheticSpec(
        seed=seed,
        num_utterances=260,
        words_per_utt=(1, 2),
        word_length=(1, 2),
        frames_per_char=(2, 3),
        feature_dim=8,
        noise_std=0.1,
    )
    utts = synth_generate(spec, AB)
    cfg = ModelConfig(
        num_layers=1, d_model=16, d_ff=16, num_heads=1, dropout_rate=0.0, vocab_size=4, d_in=8, e_LB=4, e_LA=2, d_LB=1, d_LA=1
    )
    trainer = Trainer(cfg, TrainConfig(seed=seed, batch_size=16, lam=0.1, decay_epoch=epochs, epochs=epochs))
    for _ in range(epochs):
        trainer.train_epoch(utts[:240])
    return cfg, trainer.params, utts[240:]


def encoded(utt, cfg, params):
    return encode_utterance(utt, cfg, params)
