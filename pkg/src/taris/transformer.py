"""Windowed-attention Transformer encoder and autoregressive decoder.

Layers use post-normalisation (residual, then layer norm). The encoder
self-attention is restricted to a look-back/look-ahead window that is reused
at every layer, so the receptive field grows linearly with depth. All layer
functions accept an optional leading batch axis.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field, fields, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .segmentation import (
    UNBOUNDED,
    AttentionMask,
    CountUnit,
    GateParams,
    Window,
    build_window_mask,
    gate_alpha,
)
from .tensor import ContractError, Tensor

Params = Dict[str, Tensor]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 6
    d_model: int = 256
    d_ff: int = 256
    num_heads: int = 1
    dropout_rate: float = 0.1
    vocab_size: int = 28
    d_in: int = 40
    e_LB: Window = UNBOUNDED
    e_LA: Window = UNBOUNDED
    d_LB: Window = UNBOUNDED
    d_LA: Window = UNBOUNDED
    count_unit: CountUnit = CountUnit.SPACE
    ln_eps: float = 1e-6

    def __post_init__(self):
        for name in ("num_layers", "d_model", "d_ff", "num_heads", "d_in"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.d_model % self.num_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by num_heads={self.num_heads}")
        if self.d_model % 2:
            raise ConfigError("d_model must be even for sinusoidal positions")
        if self.vocab_size < 3:
            raise ConfigError("vocab_size must be >= 3 (GO, SPACE and one content token)")
        if not 0 <= self.dropout_rate < 1:
            raise ConfigError("dropout_rate must be in [0, 1)")
        for name in ("e_LB", "e_LA", "d_LB", "d_LA"):
            v = getattr(self, name)
            if v != UNBOUNDED and (v < 0 or int(v) != v):
                raise ConfigError(f"{name} must be a non-negative integer or inf, got {v!r}")
            if v != UNBOUNDED:
                object.__setattr__(self, name, int(v))
        object.__setattr__(self, "count_unit", CountUnit(self.count_unit))

    def replace(self, **changes) -> "ModelConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = v.value if isinstance(v, CountUnit) else v
        return out


@dataclass
class DropoutCtx:
    rate: float = 0.0
    training: bool = False
    rng: Optional[np.random.Generator] = None

    def __call__(self, x: Tensor) -> Tensor:
        return T.dropout(x, self.rate, self.training, self.rng)


EVAL = DropoutCtx()


@dataclass
class EncoderOutput:
    memory: Tensor  # [B x] N x h
    alpha: Optional[Tensor]  # [B x] N, zero on padding
    frame_valid: np.ndarray  # [B x] N


def positional_encoding(n: int, h: int, offset: int = 0, dtype=np.float64) -> np.ndarray:
    if h % 2:
        raise ContractError(f"positional encoding width must be even, got {h}")
    pos = np.arange(offset, offset + n, dtype=np.float64)[:, None]
    freq = np.power(10000.0, -np.arange(0, h, 2, dtype=np.float64) / h)
    pe = np.empty((n, h), dtype=np.float64)
    pe[:, 0::2] = np.sin(pos * freq)
    pe[:, 1::2] = np.cos(pos * freq)
    return pe.astype(dtype)


# -- parameters -------------------------------------------------------------


def _glorot(rng: np.random.Generator, shape, dtype) -> np.ndarray:
    limit = math.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def init_params(cfg: ModelConfig, rng: np.random.Generator, dtype=np.float64, with_gate: bool = True) -> Params:
    """Glorot-uniform matrices, zero biases, unit layer-norm gains.

    The gate is drawn last, so a baseline built from the same seed shares
    every other weight bit-for-bit.
    """
    h, f, v = cfg.d_model, cfg.d_ff, cfg.vocab_size
    p: Params = OrderedDict()

    def mat(name, shape):
        p[name] = Tensor(_glorot(rng, shape, dtype), requires_grad=True, name=name)

    def vec(name, n, fill=0.0):
        p[name] = Tensor(np.full(n, fill, dtype=dtype), requires_grad=True, name=name)

    def attn(prefix):
        for w in ("Wq", "Wk", "Wv", "Wo"):
            mat(f"{prefix}.{w}", (h, h))

    def ffn(prefix):
        mat(f"{prefix}.W1", (h, f))
        vec(f"{prefix}.b1", f)
        mat(f"{prefix}.W2", (f, h))
        vec(f"{prefix}.b2", h)

    def norm(prefix):
        vec(f"{prefix}.gain", h, 1.0)
        vec(f"{prefix}.bias", h)

    mat("encoder.input.W", (cfg.d_in, h))
    vec("encoder.input.b", h)
    for i in range(cfg.num_layers):
        pre = f"encoder.layer{i}"
        attn(f"{pre}.self_attn")
        norm(f"{pre}.norm1")
        ffn(f"{pre}.ffn")
        norm(f"{pre}.norm2")
    mat("decoder.embedding", (v, h))
    for i in range(cfg.num_layers):
        pre = f"decoder.layer{i}"
        attn(f"{pre}.self_attn")
        norm(f"{pre}.norm1")
        attn(f"{pre}.cross_attn")
        norm(f"{pre}.norm2")
        ffn(f"{pre}.ffn")
        norm(f"{pre}.norm3")
    mat("decoder.out.W", (h, v))
    vec("decoder.out.b", v)
    if with_gate:
        mat("gate.W", (h, 1))
        vec("gate.b", 1)
    return p


def count_parameters(params: Params) -> int:
    return int(sum(t.data.size for t in params.values()))


def has_gate(params: Params) -> bool:
    return "gate.W" in params


def gate_params(params: Params) -> GateParams:
    return GateParams(params["gate.W"], params["gate.b"])


def baseline_params(params: Params) -> Params:
    """View of the shared weights without the gate."""
    return OrderedDict((k, t) for k, t in params.items() if not k.startswith("gate."))


# -- layers -----------------------------------------------------------------


def _split_heads(x: Tensor, heads: int) -> Tensor:
    h = x.shape[-1]
    x = x.reshape(x.shape[:-1] + (heads, h // heads))
    return x.swapaxes(-3, -2)


def _merge_heads(x: Tensor) -> Tensor:
    x = x.swapaxes(-3, -2)
    return x.reshape(x.shape[:-2] + (x.shape[-2] * x.shape[-1],))


def _mask_array(mask, dtype) -> Optional[np.ndarray]:
    if mask is None:
        return None
    if isinstance(mask, AttentionMask):
        return mask.bias_as(dtype)
    return np.asarray(mask, dtype=dtype)


def multi_head_attention(
    query: Tensor,
    keys: Tensor,
    values: Tensor,
    mask,
    params: Params,
    prefix: str,
    num_heads: int,
    drop: DropoutCtx = EVAL,
    record: Optional[list] = None,
) -> Tensor:
    """Scaled dot-product attention with an additive mask over ``[..., Lq, Lk]``."""
    q = _split_heads(query @ params[f"{prefix}.Wq"], num_heads)
    k = _split_heads(keys @ params[f"{prefix}.Wk"], num_heads)
    v = _split_heads(values @ params[f"{prefix}.Wv"], num_heads)
    dk = q.shape[-1]
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(dk))
    bias = _mask_array(mask, scores.dtype)
    if bias is not None:
        bias = np.expand_dims(bias, -3)  # shared across heads
    weights = T.masked_softmax(scores, bias)
    if record is not None:
        record.append(weights.data)
    weights = drop(weights)
    ctx = _merge_heads(weights @ v)
    return ctx @ params[f"{prefix}.Wo"]


def _ffn(x: Tensor, params: Params, prefix: str, drop: DropoutCtx) -> Tensor:
    hidden = drop(T.relu(x @ params[f"{prefix}.W1"] + params[f"{prefix}.b1"]))
    return hidden @ params[f"{prefix}.W2"] + params[f"{prefix}.b2"]


def _norm(x: Tensor, params: Params, prefix: str, eps: float) -> Tensor:
    return T.layer_norm(x, params[f"{prefix}.gain"], params[f"{prefix}.bias"], eps)


def encoder_layer(
    x: Tensor, window_mask, params: Params, index: int, cfg: ModelConfig, drop: DropoutCtx = EVAL
) -> Tensor:
    pre = f"encoder.layer{index}"
    attn = multi_head_attention(x, x, x, window_mask, params, f"{pre}.self_attn", cfg.num_heads, drop)
    x = _norm(x + attn, params, f"{pre}.norm1", cfg.ln_eps)
    x = _norm(x + _ffn(x, params, f"{pre}.ffn", drop), params, f"{pre}.norm2", cfg.ln_eps)
    return x


def encoder_self_mask(cfg: ModelConfig, frame_valid: np.ndarray) -> AttentionMask:
    """Window mask restricted to valid keys; padded query rows keep their full window."""
    n = frame_valid.shape[-1]
    window = build_window_mask(n, cfg.e_LB, cfg.e_LA).admissible
    fv = np.asarray(frame_valid, dtype=bool)
    keys_ok = fv[..., None, :] | ~fv[..., :, None]
    return AttentionMask(window & keys_ok)


def encode(
    a,
    cfg: ModelConfig,
    params: Params,
    frame_valid: Optional[np.ndarray] = None,
    drop: DropoutCtx = EVAL,
    offset: int = 0,
) -> EncoderOutput:
    """Encoder stack plus (when the parameters carry one) the counting gate.

    ``offset`` shifts the positional encoding, which lets a stream encode a
    trailing chunk of frames with their absolute positions.
    """
    dtype = params["encoder.input.W"].dtype
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=dtype))
    elif a.dtype != dtype and not a.requires_grad:
        a = Tensor(a.data.astype(dtype))
    n = a.shape[-2]
    if n < 1:
        raise ContractError("encode needs at least one frame")
    if frame_valid is None:
        frame_valid = np.ones(a.shape[:-1], dtype=bool)
    frame_valid = np.asarray(frame_valid, dtype=bool)
    x = a @ params["encoder.input.W"] + params["encoder.input.b"]
    x = x + positional_encoding(n, cfg.d_model, offset, dtype)
    mask = encoder_self_mask(cfg, frame_valid).bias_as(dtype)
    for i in range(cfg.num_layers):
        x = encoder_layer(x, mask, params, i, cfg, drop)
    alpha = None
    if has_gate(params):
        alpha = gate_alpha(x, gate_params(params)) * frame_valid.astype(dtype)
    return EncoderOutput(x, alpha, frame_valid)


def causal_mask(n: int) -> AttentionMask:
    return build_window_mask(n, UNBOUNDED, 0)


def decoder_layer(
    x: Tensor,
    x_kv: Tensor,
    memory: Tensor,
    self_mask,
    cross_mask,
    params: Params,
    index: int,
    cfg: ModelConfig,
    drop: DropoutCtx = EVAL,
    record: Optional[list] = None,
) -> Tensor:
    """One decoder block. ``x`` holds the query positions, ``x_kv`` every visible position."""
    pre = f"decoder.layer{index}"
    h = cfg.num_heads
    x = _norm(x + multi_head_attention(x, x_kv, x_kv, self_mask, params, f"{pre}.self_attn", h, drop), params, f"{pre}.norm1", cfg.ln_eps)
    c = multi_head_attention(x, memory, memory, cross_mask, params, f"{pre}.cross_attn", h, drop, record)
    x = _norm(x + c, params, f"{pre}.norm2", cfg.ln_eps)
    x = _norm(x + _ffn(x, params, f"{pre}.ffn", drop), params, f"{pre}.norm3", cfg.ln_eps)
    return x


def embed_tokens(y_in, params: Params, cfg: ModelConfig, offset: int = 0) -> Tensor:
    y_in = np.asarray(y_in)
    table = params["decoder.embedding"]
    x = T.embedding(table, y_in) * math.sqrt(cfg.d_model)
    return x + positional_encoding(y_in.shape[-1], cfg.d_model, offset, table.dtype)


def decode_train(
    y_in,
    memory: EncoderOutput,
    V: Optional[AttentionMask],
    cfg: ModelConfig,
    params: Params,
    drop: DropoutCtx = EVAL,
    record: Optional[list] = None,
) -> Tensor:
    """Teacher-forced decoder logits, shape ``[..., L, vocab_size]``.

    ``V`` is the query-major decoder-to-encoder mask; ``None`` admits every
    valid frame.
    """
    y_in = np.asarray(y_in)
    L = y_in.shape[-1]
    dtype = params["decoder.embedding"].dtype
    x = embed_tokens(y_in, params, cfg)
    self_bias = causal_mask(L).bias_as(dtype)
    if V is None:
        fv = np.asarray(memory.frame_valid, dtype=bool)
        V = AttentionMask(np.broadcast_to(fv[..., None, :], fv.shape[:-1] + (L, fv.shape[-1])))
    if V.shape[-2:] != (L, memory.memory.shape[-2]):
        raise ContractError(f"decoder mask shape {V.shape} does not match ({L}, {memory.memory.shape[-2]})")
    cross_bias = V.bias_as(dtype)
    for i in range(cfg.num_layers):
        x = decoder_layer(x, x, memory.memory, self_bias, cross_bias, params, i, cfg, drop, record)
    return x @ params["decoder.out.W"] + params["decoder.out.b"]


def decoder_step(
    token: int,
    position: int,
    cache: List[np.ndarray],
    memory: Tensor,
    cross_row: np.ndarray,
    cfg: ModelConfig,
    params: Params,
    record: Optional[list] = None,
) -> Tuple[np.ndarray, List[np.ndarray]]:
    """Advance the decoder by one position without a tape.

    ``cache[l]`` holds the inputs of layer ``l`` for all earlier positions
    (shape ``[position, h]``). Returns the next-token logits and the extended
    cache. Causality makes this equal to the matching row of
    :func:`decode_train`.
    """
    dtype = params["decoder.embedding"].dtype
    x = embed_tokens(np.array([token]), params, cfg, offset=position)
    cross_bias = np.where(np.asarray(cross_row, dtype=bool), 0.0, T.NEG_LARGE).astype(dtype)[None, :]
    new_cache = []
    for i in range(cfg.num_layers):
        past = cache[i] if cache else np.zeros((0, cfg.d_model), dtype=dtype)
        x_kv = Tensor(np.concatenate([past, x.data], axis=0))
        new_cache.append(x_kv.data)
        x = decoder_layer(x, x_kv, memory, None, cross_bias, params, i, cfg, EVAL, record)
    logits = x @ params["decoder.out.W"] + params["decoder.out.b"]
    return logits.data[0], new_cache
