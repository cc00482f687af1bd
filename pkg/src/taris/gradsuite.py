"""Finite-difference checks for every differentiable op and the full model loss."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from . import tensor as T
from .data import SyntheticSpec, batch_pad, synth_generate
from .segmentation import GateParams, gate_alpha, word_loss
from .tensor import Tensor, grad_check
from .training import batch_losses
from .transformer import ModelConfig, init_params

# the last axis is the one softmax, layer_norm and cumsum act on
SHAPES: List[Tuple[int, ...]] = [(1, 1), (3, 1), (2, 5), (1, 3, 4)]

OP_TOLERANCE = 1e-5
MODEL_TOLERANCE = 1e-4


def _leaf(rng, shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def _weighted(fn, rng, *inputs):
    """Contract the op output with fixed random weights so no entry cancels."""
    w = rng.standard_normal(np.shape(fn(*inputs).data))
    return lambda *xs: (fn(*xs) * w).sum()


def _mask(rng, shape):
    keep = rng.random(shape) < 0.6
    rows = keep.reshape(-1, shape[-1])
    rows[np.arange(len(rows)), rng.integers(0, shape[-1], len(rows))] = True  # no empty row
    return np.where(keep, 0.0, T.NEG_LARGE)


def _unary(op):
    def build(rng, shape):
        x = _leaf(rng, shape)
        return _weighted(op, rng, x), [x]

    return build


def _binary(op):
    def build(rng, shape):
        x, y = _leaf(rng, shape), _leaf(rng, shape)
        return _weighted(op, rng, x, y), [x, y]

    return build


def _take_last(rng, shape):
    x = _leaf(rng, shape)
    idx = rng.integers(0, shape[-1], shape[:-1])
    return _weighted(lambda a: T.take_last(a, idx), rng, x), [x]


def _embedding(rng, shape):
    table = _leaf(rng, (5, shape[-1]))
    ids = rng.integers(0, 5, shape[:-1])
    return _weighted(lambda t: T.embedding(t, ids), rng, table), [table]


def _matmul(rng, shape):
    x, w = _leaf(rng, shape), _leaf(rng, (shape[-1], 3))
    return _weighted(T.matmul, rng, x, w), [x, w]


def _masked_softmax(rng, shape):
    x = _leaf(rng, shape)
    mask = _mask(rng, shape)
    return _weighted(lambda a: T.masked_softmax(a, mask), rng, x), [x]


def _layer_norm(rng, shape):
    x, g, b = _leaf(rng, shape), _leaf(rng, shape[-1:]), _leaf(rng, shape[-1:])
    return _weighted(T.layer_norm, rng, x, g, b), [x, g, b]


def _dropout(rng, shape):
    x = _leaf(rng, shape)
    seed = int(rng.integers(1 << 31))
    return _weighted(lambda a: T.dropout(a, 0.3, True, np.random.default_rng(seed)), rng, x), [x]


def _gate_word_loss(rng, shape):
    h = shape[-1]
    o = _leaf(rng, shape)
    W, b = _leaf(rng, (h, 1)), _leaf(rng, (1,))
    target = rng.integers(0, 4, shape[:-2])

    def f(o, W, b):
        return word_loss(gate_alpha(o, GateParams(W, b)), target)

    return f, [o, W, b]


OPS: Dict[str, Callable] = OrderedDict(
    [
        ("add", _binary(T.add)),
        ("sub", _binary(T.sub)),
        ("mul", _binary(T.mul)),
        ("div", _binary(lambda a, b: T.div(a, T.square(b) + 0.5))),
        ("neg", _unary(T.neg)),
        ("square", _unary(T.square)),
        ("exp", _unary(T.exp)),
        ("log", _unary(lambda a: T.log(T.square(a) + 0.5))),
        ("relu", _unary(T.relu)),
        ("sigmoid", _unary(T.sigmoid)),
        ("reshape", _unary(lambda a: T.reshape(a, (-1,)))),
        ("swapaxes", _unary(lambda a: T.swapaxes(a, 0, -1))),
        ("getitem", _unary(lambda a: T.getitem(a, (Ellipsis, slice(0, max(1, a.shape[-1] // 2)))))),
        ("concat", _binary(lambda a, b: T.concat([a, b], axis=-1))),
        ("embedding", _embedding),
        ("take_last", _take_last),
        ("sum", _unary(lambda a: T.sum_(a, axis=-1))),
        ("mean", _unary(lambda a: T.mean(a, axis=-1))),
        ("cumsum", _unary(T.cumsum)),
        ("matmul", _matmul),
        ("masked_softmax", _masked_softmax),
        ("softmax", _unary(T.softmax)),
        ("log_softmax", _unary(T.log_softmax)),
        ("layer_norm", _layer_norm),
        ("dropout", _dropout),
        ("gate_word_loss", _gate_word_loss),
    ]
)


def op_error(name: str, seed: int, shape: Tuple[int, ...]) -> float:
    rng = np.random.default_rng(seed)
    f, inputs = OPS[name](rng, shape)
    return grad_check(f, inputs)


def model_config() -> ModelConfig:
    """2 layers, width 64, finite windows so every mask path is exercised."""
    return ModelConfig(
        num_layers=2, d_model=64, d_ff=64, num_heads=1, dropout_rate=0.0, d_in=40, e_LB=3, e_LA=2, d_LB=1, d_LA=1
    )


def model_error(seed: int, coords_per_tensor: int = 4, lam: float = 0.01) -> float:
    """Max relative error over every parameter tensor of the end-to-end loss.

    Each tensor is checked on ``coords_per_tensor`` entries drawn from the
    seed; a padded two-utterance batch exercises the validity masks.
    """
    cfg = model_config()
    rng = np.random.default_rng(seed)
    params = init_params(cfg, rng)
    spec = SyntheticSpec(
        seed=seed, num_utterances=2, words_per_utt=(2, 3), word_length=(1, 2), frames_per_char=(1, 2), feature_dim=40
    )
    batch = batch_pad(synth_generate(spec), dtype=np.float64)
    names = list(params)

    def f(*tensors):
        return batch_losses(OrderedDict(zip(names, tensors)), cfg, batch, lam).total

    return grad_check(f, list(params.values()), max_coords=coords_per_tensor, rng=rng)


@dataclass
class SuiteResult:
    errors: Dict[str, float]  # worst error per op, plus "model"

    def failures(self) -> List[str]:
        return [
            name
            for name, err in self.errors.items()
            if not err < (MODEL_TOLERANCE if name == "model" else OP_TOLERANCE)
        ]

    @property
    def passed(self) -> bool:
        return not self.failures()


def run_suite(seeds: Sequence[int] = range(20), shapes: Sequence[Tuple[int, ...]] = SHAPES, model: bool = True) -> SuiteResult:
    errors: Dict[str, float] = OrderedDict()
    for name in OPS:
        errors[name] = max(op_error(name, s, shape) for s in seeds for shape in shapes)
    if model:
        errors["model"] = max(model_error(s) for s in seeds)
    return SuiteResult(errors)
