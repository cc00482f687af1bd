"""Command-line entry point: generate, train, eval, segment, gradcheck.

Configuration files are INI style (``configparser``) with the sections
``[corpus]``, ``[model]``, ``[train]``, ``[data]``, ``[decode]`` and
``[sweep]``. Every key is validated; unknown sections or keys are errors.
Unbounded windows are written ``inf``. Relative paths are resolved against
the directory of the config file.
"""

from __future__ import annotations

import argparse
import configparser
import itertools
import logging
import math
import os
import sys
from dataclasses import fields
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import gradsuite
from .data import FeatureFileError, SyntheticSpec, load_corpus, synth_generate, write_corpus
from .decoding import (
    DEFAULT_LENGTH_CAP,
    decode_corpus,
    duration_histogram,
    encode_utterance,
    extract_segments,
    mean_cer,
    write_decode_csv,
    write_segment_csv,
)
from .segmentation import UNBOUNDED, CountUnit, frame_segment_indices
from .tensor import Tensor
from .training import (
    CheckpointError,
    CheckpointShapeError,
    MetricsRow,
    Trainer,
    TrainConfig,
    TrainingDivergedError,
    append_metrics,
    evaluate_losses,
    load_checkpoint,
    save_checkpoint,
)
from .transformer import ConfigError, ModelConfig

log = logging.getLogger("taris")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


class CliConfigError(Exception):
    pass


# -- value parsers ----------------------------------------------------------


def _window(text: str):
    text = text.strip().lower()
    if text in ("inf", "unbounded"):
        return UNBOUNDED
    value = int(text)
    if value < 0:
        raise ValueError("must be >= 0 or inf")
    return value


def _windows(text: str) -> List:
    return [_window(t) for t in text.split(",") if t.strip()]


def _range(text: str) -> Tuple[int, int]:
    parts = [int(t) for t in text.split(",")]
    if len(parts) != 2:
        raise ValueError("expected 'low, high'")
    return parts[0], parts[1]


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected true or false")


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float) and math.isinf(value):
        return "inf"
    if isinstance(value, CountUnit):
        return value.value
    if isinstance(value, (tuple, list)):
        return ", ".join(_fmt(v) for v in value)
    return str(value)


_MODEL_DEFAULTS = ModelConfig()
_TRAIN_DEFAULTS = TrainConfig()
_CORPUS_DEFAULTS = SyntheticSpec()

# section -> key -> (parser, default)
SCHEMA: Dict[str, Dict[str, Tuple[Callable, object]]] = {
    "corpus": {
        "seed": (int, _CORPUS_DEFAULTS.seed),
        "num_utterances": (int, _CORPUS_DEFAULTS.num_utterances),
        "eval_utterances": (int, 0),
        "words_per_utt": (_range, _CORPUS_DEFAULTS.words_per_utt),
        "word_length": (_range, _CORPUS_DEFAULTS.word_length),
        "frames_per_char": (_range, _CORPUS_DEFAULTS.frames_per_char),
        "feature_dim": (int, _CORPUS_DEFAULTS.feature_dim),
        "noise_std": (float, _CORPUS_DEFAULTS.noise_std),
        "silence_frames": (_range, _CORPUS_DEFAULTS.silence_frames),
        "frame_hop_ms": (float, _CORPUS_DEFAULTS.frame_hop_ms),
        "insert_silence": (_bool, _CORPUS_DEFAULTS.insert_silence),
    },
    "model": {
        "num_layers": (int, _MODEL_DEFAULTS.num_layers),
        "d_model": (int, _MODEL_DEFAULTS.d_model),
        "d_ff": (int, _MODEL_DEFAULTS.d_ff),
        "num_heads": (int, _MODEL_DEFAULTS.num_heads),
        "dropout_rate": (float, _MODEL_DEFAULTS.dropout_rate),
        "vocab_size": (int, _MODEL_DEFAULTS.vocab_size),
        "d_in": (int, _MODEL_DEFAULTS.d_in),
        "e_LB": (_window, _MODEL_DEFAULTS.e_LB),
        "e_LA": (_window, _MODEL_DEFAULTS.e_LA),
        "d_LB": (_window, _MODEL_DEFAULTS.d_LB),
        "d_LA": (_window, _MODEL_DEFAULTS.d_LA),
        "count_unit": (CountUnit, _MODEL_DEFAULTS.count_unit),
        "ln_eps": (float, _MODEL_DEFAULTS.ln_eps),
    },
    "train": {
        "lr_initial": (float, _TRAIN_DEFAULTS.lr_initial),
        "lr_final": (float, _TRAIN_DEFAULTS.lr_final),
        "decay_epoch": (int, _TRAIN_DEFAULTS.decay_epoch),
        "epochs": (int, _TRAIN_DEFAULTS.epochs),
        "batch_size": (int, _TRAIN_DEFAULTS.batch_size),
        "seed": (int, _TRAIN_DEFAULTS.seed),
        "lam": (float, _TRAIN_DEFAULTS.lam),
        "precision": (int, _TRAIN_DEFAULTS.precision),
        "eval_every": (int, 10),
        "checkpoint_every": (int, 10),
    },
    "data": {
        "train_manifest": (str, ""),
        "eval_manifest": (str, ""),
    },
    "decode": {
        "beam_width": (int, 1),
        "length_cap": (int, DEFAULT_LENGTH_CAP),
    },
    "sweep": {
        "e_LB": (_windows, None),
        "e_LA": (_windows, None),
        "d_LB": (_windows, None),
        "d_LA": (_windows, None),
    },
}

# the INI parser lower-cases keys unless told otherwise; keep the window names readable
_KEY_ALIASES = {k.lower(): k for sec in SCHEMA.values() for k in sec}


class RunConfig:
    """Validated view of a config file plus command-line overrides."""

    def __init__(self, values: Dict[str, Dict[str, object]], base_dir: Path):
        self.values = values
        self.base_dir = base_dir

    @classmethod
    def load(cls, path: Optional[str]) -> "RunConfig":
        values = {sec: {k: default for k, (_, default) in keys.items()} for sec, keys in SCHEMA.items()}
        base = Path.cwd()
        if path is not None:
            p = Path(path)
            if not p.is_file():
                raise CliConfigError(f"config file not found: {path}")
            parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
            try:
                parser.read(p, encoding="utf-8")
            except configparser.Error as exc:
                raise CliConfigError(f"{path}: {exc}") from exc
            for sec in parser.sections():
                if sec not in SCHEMA:
                    raise CliConfigError(f"{path}: unknown section [{sec}]")
                for raw_key, text in parser.items(sec):
                    key = _KEY_ALIASES.get(raw_key)
                    if key is None or key not in SCHEMA[sec]:
                        raise CliConfigError(f"{path}: unknown key '{raw_key}' in [{sec}]")
                    conv = SCHEMA[sec][key][0]
                    try:
                        values[sec][key] = conv(text)
                    except ValueError as exc:
                        raise CliConfigError(f"{path}: bad value for {sec}.{key} = {text!r} ({exc})") from exc
            base = p.resolve().parent
        return cls(values, base)

    def path(self, section: str, key: str) -> Optional[Path]:
        text = self.values[section][key]
        if not text:
            return None
        p = Path(str(text))
        return p if p.is_absolute() else self.base_dir / p

    def model_config(self) -> ModelConfig:
        try:
            return ModelConfig(**self.values["model"])
        except (ConfigError, ValueError, TypeError) as exc:
            raise CliConfigError(f"[model]: {exc}") from exc

    def train_config(self) -> TrainConfig:
        kw = {k: v for k, v in self.values["train"].items() if k in {f.name for f in fields(TrainConfig)}}
        try:
            return TrainConfig(**kw)
        except ValueError as exc:
            raise CliConfigError(f"[train]: {exc}") from exc

    def corpus_spec(self) -> SyntheticSpec:
        kw = {k: v for k, v in self.values["corpus"].items() if k != "eval_utterances"}
        kw["num_utterances"] = kw["num_utterances"] + self.values["corpus"]["eval_utterances"]
        try:
            return SyntheticSpec(**kw)
        except ValueError as exc:
            raise CliConfigError(f"[corpus]: {exc}") from exc

    def to_ini(self) -> str:
        lines = []
        for sec, keys in self.values.items():
            lines.append(f"[{sec}]")
            for k, v in keys.items():
                if v is None:
                    continue
                lines.append(f"{k} = {_fmt(v)}")
            lines.append("")
        return "\n".join(lines)


def _apply_overrides(cfg: RunConfig, args) -> None:
    if getattr(args, "seed", None) is not None:
        cfg.values["train"]["seed"] = args.seed
        cfg.values["corpus"]["seed"] = args.seed
    env = os.environ.get("TARIS_PRECISION")
    if env is not None:
        if env.strip() not in ("32", "64"):
            raise CliConfigError(f"TARIS_PRECISION must be 32 or 64, got {env!r}")
        cfg.values["train"]["precision"] = int(env)


def _echo_config(cfg: RunConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.effective.ini").write_text(cfg.to_ini(), encoding="utf-8")


def _require(path: Optional[Path], what: str) -> Path:
    if path is None:
        raise CliConfigError(f"missing {what}")
    if not path.exists():
        raise CliConfigError(f"{what} not found: {path}")
    return path


def _load_params(ckpt_path: Path, cfg: ModelConfig, dtype):
    ckpt = load_checkpoint(ckpt_path, cfg)
    return {k: Tensor(v.astype(dtype)) for k, v in ckpt.params.items()}


# -- commands ---------------------------------------------------------------


def cmd_generate(cfg: RunConfig, args) -> int:
    spec = cfg.corpus_spec()
    utts = synth_generate(spec)
    n_eval = cfg.values["corpus"]["eval_utterances"]
    out = Path(args.out)
    _echo_config(cfg, out)
    train = utts[: len(utts) - n_eval]
    manifest = write_corpus(train, out, "train")
    if n_eval:
        write_corpus(utts[len(train) :], out, "eval")
    words = np.mean([u.num_words for u in train])
    frames = np.mean([u.num_frames for u in train])
    print(f"manifest {manifest}")
    print(f"utterances={len(train)} eval_utterances={n_eval} mean_words={words:.3f} mean_frames={frames:.2f}")
    return EXIT_OK


def _eval_row(trainer: Trainer, eval_utts, cfg: RunConfig, jobs: int) -> MetricsRow:
    losses = evaluate_losses(trainer.params, trainer.cfg, trainer.tcfg, eval_utts)
    recs = decode_corpus(
        eval_utts,
        trainer.cfg,
        trainer.params,
        beam_width=cfg.values["decode"]["beam_width"],
        jobs=jobs,
        length_cap=cfg.values["decode"]["length_cap"],
    )
    return MetricsRow(
        trainer.epoch - 1,
        "eval",
        losses["ce_loss"],
        losses["word_loss"],
        losses["total_loss"],
        mean_cer(recs)[0],
        None,
        trainer.tcfg.seed,
    )


def cmd_train(cfg: RunConfig, args) -> int:
    model_cfg = cfg.model_config()
    tcfg = cfg.train_config()
    train_utts = load_corpus(_require(cfg.path("data", "train_manifest"), "[data] train_manifest"))
    eval_path = cfg.path("data", "eval_manifest")
    eval_utts = load_corpus(_require(eval_path, "[data] eval_manifest")) if eval_path else []
    out = Path(args.out)
    _echo_config(cfg, out)
    if args.checkpoint:
        ckpt = load_checkpoint(_require(Path(args.checkpoint), "checkpoint"), model_cfg)
        trainer = Trainer.from_checkpoint(ckpt, tcfg)
        log.info("resuming after epoch %d", trainer.epoch)
    else:
        trainer = Trainer(model_cfg, tcfg)
    metrics = out / "metrics.csv"
    ckpt_dir = out / "checkpoints"
    every_eval = cfg.values["train"]["eval_every"]
    every_ckpt = cfg.values["train"]["checkpoint_every"]
    while trainer.epoch < tcfg.epochs:
        row = trainer.train_epoch(train_utts)
        rows = [row]
        done = trainer.epoch
        if eval_utts and every_eval > 0 and (done % every_eval == 0 or done == tcfg.epochs):
            rows.append(_eval_row(trainer, eval_utts, cfg, args.jobs))
        append_metrics(metrics, rows)
        for r in rows:
            cer = "" if r.cer is None else f" cer={r.cer:.4f}"
            print(f"epoch {r.epoch} {r.split} ce={r.ce_loss:.4f} word={r.word_loss:.4f}{cer}", flush=True)
        if every_ckpt > 0 and done % every_ckpt == 0:
            save_checkpoint(ckpt_dir / f"epoch_{done:04d}.ckpt", trainer.checkpoint())
    save_checkpoint(ckpt_dir / "final.ckpt", trainer.checkpoint())
    print(f"final checkpoint {ckpt_dir / 'final.ckpt'}")
    return EXIT_OK


def sweep_grid(cfg: RunConfig, model_cfg: ModelConfig) -> List[Dict[str, object]]:
    axes = []
    for key in ("e_LB", "e_LA", "d_LB", "d_LA"):
        vals = cfg.values["sweep"][key]
        axes.append(vals if vals else [getattr(model_cfg, key)])
    return [dict(zip(("e_LB", "e_LA", "d_LB", "d_LA"), combo)) for combo in itertools.product(*axes)]


SWEEP_FIELDS = ("e_LB", "e_LA", "d_LB", "d_LA", "cer", "cer_ci95", "word_loss", "utterances")


def cmd_eval(cfg: RunConfig, args) -> int:
    model_cfg = cfg.model_config()
    tcfg = cfg.train_config()
    params = _load_params(_require(Path(args.checkpoint) if args.checkpoint else None, "--checkpoint"), model_cfg, tcfg.dtype)
    utts = load_corpus(_require(cfg.path("data", "eval_manifest"), "[data] eval_manifest"))
    out = Path(args.out)
    _echo_config(cfg, out)
    lines = [",".join(SWEEP_FIELDS)]
    for i, point in enumerate(sweep_grid(cfg, model_cfg)):
        point_cfg = model_cfg.replace(**point)
        recs = decode_corpus(
            utts,
            point_cfg,
            params,
            beam_width=cfg.values["decode"]["beam_width"],
            jobs=args.jobs,
            length_cap=cfg.values["decode"]["length_cap"],
        )
        m, ci = mean_cer(recs)
        wl = evaluate_losses(params, point_cfg, tcfg, utts)["word_loss"]
        write_decode_csv(out / f"decode_point{i:02d}.csv", recs)
        vals = [_fmt(point[k]) for k in ("e_LB", "e_LA", "d_LB", "d_LA")]
        lines.append(",".join(vals + [f"{m:.6f}", f"{ci:.6f}", f"{wl:.6f}", str(len(recs))]))
        print(" ".join(f"{k}={v}" for k, v in zip(SWEEP_FIELDS, lines[-1].split(","))), flush=True)
    (out / "sweep.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_segment(cfg: RunConfig, args) -> int:
    model_cfg = cfg.model_config()
    tcfg = cfg.train_config()
    params = _load_params(_require(Path(args.checkpoint) if args.checkpoint else None, "--checkpoint"), model_cfg, tcfg.dtype)
    manifest = cfg.path("data", "eval_manifest") or cfg.path("data", "train_manifest")
    utts = load_corpus(_require(manifest, "[data] eval_manifest"))
    out = Path(args.out)
    _echo_config(cfg, out)
    segments = []
    durations: List[float] = []
    for u in utts:
        enc = encode_utterance(u, model_cfg, params)
        res = extract_segments(frame_segment_indices(enc.alpha), u.frame_hop_ms)
        segments.append((u.utt_id, res))
        durations.extend(res.durations_ms)
    write_segment_csv(out / "segments.csv", segments)
    hist = duration_histogram(durations)
    text = "bin_start_ms,count\n" + "".join(f"{b:g},{c}\n" for b, c in hist)
    (out / "histogram.txt").write_text(text, encoding="utf-8")
    mode = max(hist, key=lambda bc: bc[1])[0] if hist else float("nan")
    print(f"segments={len(durations)} utterances={len(utts)} modal_bin_ms={mode:g}")
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    seeds = range(args.seed, args.seed + 20) if args.seed is not None else range(20)
    result = gradsuite.run_suite(seeds)
    for name, err in result.errors.items():
        tol = gradsuite.MODEL_TOLERANCE if name == "model" else gradsuite.OP_TOLERANCE
        print(f"{name:16s} max_rel_err={err:.3e} {'PASS' if err < tol else 'FAIL'}")
    if not result.passed:
        print(f"FAILED: {', '.join(result.failures())}")
        return EXIT_RUNTIME
    print("all gradient checks passed")
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "segment": cmd_segment,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="taris", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="INI config file")
        p.add_argument("--checkpoint", help="checkpoint to load (resume for train)")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--jobs", type=int, default=1, help="parallel decoding workers")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, matching the config-error code
        return int(exc.code or 0)
    try:
        if args.jobs < 1:
            raise CliConfigError("--jobs must be >= 1")
        cfg = RunConfig.load(args.config)
        _apply_overrides(cfg, args)
        return COMMANDS[args.command](cfg, args)
    except (CliConfigError, CheckpointShapeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CheckpointError, FeatureFileError, TrainingDivergedError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
