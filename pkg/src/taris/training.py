"""Loss assembly, Adam, learning-rate schedule, epochs and checkpoints."""

from __future__ import annotations

import csv
import io
import json
import os
import struct
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import tensor as T
from .data import Batch, Utterance, batch_pad, make_batches
from .segmentation import (
    build_dynamic_mask,
    frame_segment_indices,
    label_word_indices,
    unit_count,
    word_loss,
)
from .tensor import Tape, Tensor
from .transformer import (
    DropoutCtx,
    EVAL,
    ModelConfig,
    Params,
    decode_train,
    encode,
    has_gate,
    init_params,
)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr_initial: float = 0.001
    lr_final: float = 0.0001
    decay_epoch: int = 400
    epochs: int = 500
    batch_size: int = 32
    seed: int = 0
    lam: float = 0.01
    precision: int = 32

    def __post_init__(self):
        if not self.lr_initial >= self.lr_final > 0:
            raise ValueError("need lr_initial >= lr_final > 0")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.batch_size < 1 or self.epochs < 0 or self.decay_epoch < 0:
            raise ValueError("batch_size must be >= 1 and epochs, decay_epoch >= 0")
        if self.precision not in (32, 64):
            raise ValueError("precision must be 32 or 64")

    @property
    def dtype(self):
        return np.float32 if self.precision == 32 else np.float64


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Step decay: ``lr_initial`` before ``decay_epoch``, ``lr_final`` from then on."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.lr_initial if epoch < cfg.decay_epoch else cfg.lr_final


# -- losses -----------------------------------------------------------------


def ce_loss(logits: Tensor, targets, token_valid=None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` over valid positions."""
    targets = np.asarray(targets)
    logp = T.log_softmax(logits)
    picked = T.take_last(logp, targets)
    if token_valid is None:
        token_valid = np.ones(targets.shape, dtype=bool)
    valid = np.asarray(token_valid, dtype=logits.dtype)
    n = valid.sum()
    return -(picked * valid).sum() * (1.0 / n)


def total_loss(ce: Tensor, wl: Optional[Tensor], lam: float) -> Tensor:
    if lam == 0 or wl is None:
        return ce
    return ce + wl * lam


@dataclass
class BatchLosses:
    total: Tensor
    ce: Tensor
    word: Optional[Tensor]
    n_tokens: int
    n_utts: int


def batch_losses(params: Params, cfg: ModelConfig, batch: Batch, lam: float, drop: DropoutCtx = EVAL) -> BatchLosses:
    """Teacher-forced forward pass: encode, gate, masks, decode, losses."""
    enc = encode(batch.features, cfg, params, batch.frame_valid, drop)
    y_in = batch.tokens_in
    V = None
    wl = None
    if has_gate(params):
        seg = frame_segment_indices(enc.alpha)
        words = label_word_indices(y_in, cfg.count_unit)
        V = build_dynamic_mask(seg, words, cfg.d_LB, cfg.d_LA, batch.frame_valid, batch.token_valid)
        target = unit_count(batch.tokens, cfg.count_unit, batch.token_valid)
        wl = word_loss(enc.alpha, target, batch.frame_valid)
    logits = decode_train(y_in, enc, V, cfg, params, drop)
    ce = ce_loss(logits, batch.tokens, batch.token_valid)
    return BatchLosses(total_loss(ce, wl, lam), ce, wl, int(batch.token_valid.sum()), batch.size)


# -- optimiser --------------------------------------------------------------


@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: Params, grads: Dict[str, Optional[np.ndarray]], state: AdamState, lr: float) -> None:
    """In-place bias-corrected Adam update. A missing gradient counts as zero."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is not None and g.shape != p.shape:
            raise T.ContractError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        if g is None:
            m *= b1
            v *= b2
        else:
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
        step = (lr / c1) * m / (np.sqrt(v / c2) + state.eps)
        p.data -= step.astype(p.dtype, copy=False)


# -- epochs -----------------------------------------------------------------


@dataclass
class MetricsRow:
    epoch: int
    split: str
    ce_loss: float
    word_loss: float
    total_loss: float
    cer: Optional[float]
    utts_per_sec: Optional[float]
    seed: int

    FIELDS = ("epoch", "split", "ce_loss", "word_loss", "total_loss", "cer", "utts_per_sec", "seed")

    def as_csv_row(self) -> List[str]:
        def num(x):
            return "" if x is None else f"{x:.8f}"

        return [
            str(self.epoch),
            self.split,
            num(self.ce_loss),
            num(self.word_loss),
            num(self.total_loss),
            num(self.cer),
            "" if self.utts_per_sec is None else f"{self.utts_per_sec:.2f}",
            str(self.seed),
        ]


def append_metrics(path, rows: Sequence[MetricsRow]) -> None:
    path = Path(path)
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(MetricsRow.FIELDS)
        for r in rows:
            w.writerow(r.as_csv_row())


def _grad_names(params: Params, grads: Dict[Tensor, np.ndarray]) -> Dict[str, np.ndarray]:
    return {name: grads[p] for name, p in params.items() if p in grads}


def _all_finite(params: Params, batch: Batch) -> bool:
    return bool(np.isfinite(batch.features).all()) and all(np.isfinite(p.data).all() for p in params.values())


def train_epoch(
    params: Params,
    cfg: ModelConfig,
    tcfg: TrainConfig,
    state: AdamState,
    dataset: Sequence[Utterance],
    epoch: int,
    rng: np.random.Generator,
    record_throughput: bool = False,
) -> MetricsRow:
    """One shuffled pass with teacher forcing and one Adam step per batch."""
    if not dataset:
        raise ValueError("train_epoch needs a non-empty dataset")
    lr = lr_schedule(epoch, tcfg)
    drop = DropoutCtx(cfg.dropout_rate, True, rng)
    ce_sum = wl_sum = 0.0
    n_tok = n_utt = 0
    start = time.perf_counter()
    for b, group in enumerate(make_batches(dataset, tcfg.batch_size, rng)):
        batch = batch_pad(group, dtype=tcfg.dtype)
        for p in params.values():
            p.grad = None
        where = f"epoch {epoch}, batch {b} (utterances {', '.join(batch.utt_ids[:4])}...)"
        try:
            with Tape() as tape:
                losses = batch_losses(params, cfg, batch, tcfg.lam, drop)
        except T.ContractError as exc:
            # NaN gate scores fail the range contract before any loss exists
            if _all_finite(params, batch):
                raise
            raise TrainingDivergedError(f"non-finite values at {where}") from exc
        if not np.isfinite(losses.total.data):
            raise TrainingDivergedError(f"non-finite loss at {where}")
        grads = tape.backward(losses.total)
        adam_step(params, _grad_names(params, grads), state, lr)
        ce_sum += float(losses.ce.data) * losses.n_tokens
        n_tok += losses.n_tokens
        if losses.word is not None:
            wl_sum += float(losses.word.data) * losses.n_utts
        n_utt += losses.n_utts
    elapsed = time.perf_counter() - start
    ce_mean = ce_sum / n_tok
    wl_mean = wl_sum / n_utt
    return MetricsRow(
        epoch=epoch,
        split="train",
        ce_loss=ce_mean,
        word_loss=wl_mean,
        total_loss=ce_mean + tcfg.lam * wl_mean,
        cer=None,
        utts_per_sec=(n_utt / elapsed) if record_throughput else None,
        seed=tcfg.seed,
    )


def evaluate_losses(
    params: Params, cfg: ModelConfig, tcfg: TrainConfig, dataset: Sequence[Utterance]
) -> Dict[str, float]:
    """Eval-mode CE (per token), word loss (per utterance) and their combination."""
    ce_sum = wl_sum = 0.0
    n_tok = n_utt = 0
    for group in make_batches(dataset, tcfg.batch_size):
        batch = batch_pad(group, dtype=tcfg.dtype)
        losses = batch_losses(params, cfg, batch, tcfg.lam)
        ce_sum += float(losses.ce.data) * losses.n_tokens
        n_tok += losses.n_tokens
        if losses.word is not None:
            wl_sum += float(losses.word.data) * losses.n_utts
        n_utt += losses.n_utts
    ce, wl = ce_sum / n_tok, wl_sum / n_utt
    return {"ce_loss": ce, "word_loss": wl, "total_loss": ce + tcfg.lam * wl}


# -- checkpoints ------------------------------------------------------------

CKPT_MAGIC = b"TARIS"
CKPT_VERSION = 1

_DTYPE_TAGS = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("<i8"): 2, np.dtype("u1"): 3}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


class CheckpointError(ValueError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: Dict[str, np.ndarray]
    adam: AdamState
    epoch: int  # number of completed epochs
    rng_state: dict
    train_config: dict = field(default_factory=dict)
    version: int = CKPT_VERSION


def _pack_block(name: str, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    if dt not in _DTYPE_TAGS:
        raise CheckpointError(f"unsupported dtype {arr.dtype} for block {name}")
    raw = name.encode("utf-8")
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<BB", _DTYPE_TAGS[dt], arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=dt).tobytes()


def _json_block(obj) -> np.ndarray:
    return np.frombuffer(json.dumps(obj, sort_keys=True).encode("utf-8"), dtype=np.uint8)


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    blocks = OrderedDict()
    meta = {"model": ckpt.model_config.to_dict(), "train": ckpt.train_config}
    blocks["meta.config"] = _json_block(meta)
    blocks["meta.epoch"] = np.array([ckpt.epoch], dtype=np.int64)
    blocks["meta.rng"] = _json_block(ckpt.rng_state)
    blocks["adam.t"] = np.array([ckpt.adam.t], dtype=np.int64)
    for name, arr in ckpt.params.items():
        blocks[f"param.{name}"] = arr
    for name in ckpt.params:
        if name in ckpt.adam.m:
            blocks[f"adam.m.{name}"] = ckpt.adam.m[name]
            blocks[f"adam.v.{name}"] = ckpt.adam.v[name]
    out = io.BytesIO()
    out.write(CKPT_MAGIC + struct.pack("<HI", ckpt.version, len(blocks)))
    for name, arr in blocks.items():
        out.write(_pack_block(name, arr))
    return out.getvalue()


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Atomic write: temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(checkpoint_bytes(ckpt))
    os.replace(tmp, path)


def _read_blocks(blob: bytes, path) -> "OrderedDict[str, np.ndarray]":
    if len(blob) < len(CKPT_MAGIC) + 6 or blob[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise CheckpointCorruptError(f"{path}: not a checkpoint (bad magic or too short)")
    version, count = struct.unpack_from("<HI", blob, len(CKPT_MAGIC))
    if version != CKPT_VERSION:
        raise CheckpointVersionError(f"{path}: unsupported checkpoint version {version}")
    off = len(CKPT_MAGIC) + 6
    blocks = OrderedDict()
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off : off + nlen].decode("utf-8")
            if len(name.encode("utf-8")) != nlen:
                raise CheckpointCorruptError(f"{path}: truncated block name")
            off += nlen
            tag, rank = struct.unpack_from("<BB", blob, off)
            off += 2
            shape = struct.unpack_from(f"<{rank}Q", blob, off)
            off += 8 * rank
            if tag not in _TAG_DTYPES:
                raise CheckpointCorruptError(f"{path}: unknown dtype tag {tag} in block {name}")
            dt = _TAG_DTYPES[tag]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if off + nbytes > len(blob):
                raise CheckpointCorruptError(f"{path}: block {name} truncated")
            blocks[name] = np.frombuffer(blob, dtype=dt, count=nbytes // dt.itemsize, offset=off).reshape(shape).copy()
            off += nbytes
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointCorruptError(f"{path}: truncated or malformed ({exc})") from exc
    if off != len(blob):
        raise CheckpointCorruptError(f"{path}: {len(blob) - off} trailing bytes")
    return blocks


def load_checkpoint(path, expected: Optional[ModelConfig] = None) -> Checkpoint:
    """Read a checkpoint; with ``expected`` every parameter shape is validated against it."""
    blocks = _read_blocks(Path(path).read_bytes(), path)
    try:
        meta = json.loads(blocks.pop("meta.config").tobytes().decode("utf-8"))
        epoch = int(blocks.pop("meta.epoch")[0])
        rng_state = json.loads(blocks.pop("meta.rng").tobytes().decode("utf-8"))
        t = int(blocks.pop("adam.t")[0])
    except KeyError as exc:
        raise CheckpointCorruptError(f"{path}: missing block {exc}") from exc
    cfg = ModelConfig(**meta["model"])
    params: Dict[str, np.ndarray] = OrderedDict()
    adam = AdamState(t=t)
    for name, arr in blocks.items():
        if name.startswith("param."):
            params[name[6:]] = arr
        elif name.startswith("adam.m."):
            adam.m[name[7:]] = arr
        elif name.startswith("adam.v."):
            adam.v[name[7:]] = arr
    if expected is not None:
        ref = init_params(expected, np.random.default_rng(0), with_gate="gate.W" in params)
        for name, t_ref in ref.items():
            if name not in params:
                raise CheckpointShapeError(f"{path}: tensor {name} missing for the current model config")
            if params[name].shape != t_ref.shape:
                raise CheckpointShapeError(
                    f"{path}: tensor {name} has shape {params[name].shape}, config expects {t_ref.shape}"
                )
        extra = set(params) - set(ref)
        if extra:
            raise CheckpointShapeError(f"{path}: unexpected tensors {sorted(extra)}")
    return Checkpoint(cfg, params, adam, epoch, rng_state, meta.get("train", {}))


# -- driver -----------------------------------------------------------------


class Trainer:
    """Owns parameters, optimiser state and the run generator."""

    def __init__(self, cfg: ModelConfig, tcfg: TrainConfig, with_gate: bool = True):
        self.cfg = cfg
        self.tcfg = tcfg
        init_seq, run_seq = np.random.SeedSequence(tcfg.seed).spawn(2)
        self.params = init_params(cfg, np.random.default_rng(init_seq), tcfg.dtype, with_gate)
        self.state = AdamState()
        self.rng = np.random.default_rng(run_seq)
        self.epoch = 0

    def train_epoch(self, dataset, record_throughput: bool = False) -> MetricsRow:
        row = train_epoch(self.params, self.cfg, self.tcfg, self.state, dataset, self.epoch, self.rng, record_throughput)
        self.epoch += 1
        return row

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(
            model_config=self.cfg,
            params=OrderedDict((k, t.data.copy()) for k, t in self.params.items()),
            adam=AdamState(
                m={k: v.copy() for k, v in self.state.m.items()},
                v={k: v.copy() for k, v in self.state.v.items()},
                t=self.state.t,
            ),
            epoch=self.epoch,
            rng_state=self.rng.bit_generator.state,
            train_config=asdict(self.tcfg),
        )

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, tcfg: Optional[TrainConfig] = None) -> "Trainer":
        tcfg = tcfg or TrainConfig(**ckpt.train_config)
        self = cls.__new__(cls)
        self.cfg = ckpt.model_config
        self.tcfg = tcfg
        self.params = OrderedDict(
            (k, Tensor(v.astype(tcfg.dtype), requires_grad=True, name=k)) for k, v in ckpt.params.items()
        )
        self.state = AdamState(
            m={k: v.astype(tcfg.dtype) for k, v in ckpt.adam.m.items()},
            v={k: v.astype(tcfg.dtype) for k, v in ckpt.adam.v.items()},
            t=ckpt.adam.t,
        )
        self.rng = np.random.default_rng()
        self.rng.bit_generator.state = ckpt.rng_state
        self.epoch = ckpt.epoch
        return self
