"""``vred`` command line: corpus generation, the three training stages, coding and evaluation.

Exit codes: 0 success, 1 user error (bad arguments, missing or malformed
files, invalid configuration), 2 internal invariant violation.  Logs go to
stderr; data is written only to the paths given with ``--out`` / ``--csv``.

Configuration files are INI-style ``key = value`` sections::

    [codec]            channels, kernel, stride, bias, sample_rate, reconstruction
    [vred]             latent_dim, hidden, window_frames, sequence_len, var_floor,
                       prob_eps, feature_dim, mlp_hidden
    [train]            defaults for every stage: lr, lr_factor, lr_patience, lr_min,
                       batch_size, excerpt_windows, max_steps, clip_norm, epochs
    [stage1] [stage2] [stage3]   per-stage overrides of [train] keys

``feature_channels`` is always taken from ``[codec] channels``.  Unknown
sections or keys are rejected.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from .audio import AudioSignal, load_corpus, load_wav, synth_corpus, write_corpus, write_wav
from .checkpoint import Checkpoint, CodecConfig
from .codec import compression_ratio, decode_audio, encode_audio, read_stream, write_stream
from .errors import ConfigError, InternalError, VredError
from .model import VredConfig
from .trainer import STAGE_EPOCHS, TrainLog, TrainPlan, finetune, pretrain_feature_codec, train_vred

log = logging.getLogger("vred")

STAGE_OF_COMMAND = {"pretrain": 1, "train-vred": 2, "finetune": 3}
_PLAN_KEYS = ("epochs", "lr", "lr_factor", "lr_patience", "lr_min", "batch_size", "excerpt_windows",
              "max_steps", "clip_norm")


class UsageError(Exception):
    """Bad command-line usage (exit 1, not argparse's default 2)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


class GradcheckFailed(InternalError):
    """The finite-difference suite found a gradient mismatch (exit 2)."""


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class RunConfig:
    codec: CodecConfig
    vred: VredConfig
    plans: dict[int, dict]  # stage -> TrainPlan keyword overrides


def _coerce(value: str, default):
    if isinstance(default, bool):
        lowered = value.strip().lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {value!r}")
    if default is None or isinstance(default, float):
        if value.strip().lower() in ("", "none"):
            return None
        return float(value) if default is not None or "." in value or "e" in value.lower() else int(value)
    if isinstance(default, int):
        return int(value)
    return value.strip()


def _section(parser: configparser.ConfigParser, name: str, defaults: dict) -> dict:
    if not parser.has_section(name):
        return {}
    out = {}
    for key, raw in parser.items(name):
        if key not in defaults:
            raise ConfigError(f"unknown key {key!r} in section [{name}]; allowed: {', '.join(sorted(defaults))}")
        try:
            out[key] = _coerce(raw, defaults[key])
        except ValueError as exc:
            raise ConfigError(f"[{name}] {key} = {raw!r}: {exc}") from None
    return out


def load_config(path: str | None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    if path is not None:
        if not Path(path).is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            parser.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from None
    unknown = set(parser.sections()) - {"codec", "vred", "train", "stage1", "stage2", "stage3"}
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(sorted(unknown))}")
    codec_defaults = {f.name: f.default for f in dataclasses.fields(CodecConfig)}
    codec = CodecConfig(**_section(parser, "codec", codec_defaults))
    vred_defaults = {f.name: f.default for f in dataclasses.fields(VredConfig) if f.name != "feature_channels"}
    vred = VredConfig(feature_channels=codec.channels, **_section(parser, "vred", vred_defaults))
    plan_defaults = {f.name: f.default for f in dataclasses.fields(TrainPlan) if f.name in _PLAN_KEYS}
    base = _section(parser, "train", plan_defaults)
    plans = {s: {**base, **_section(parser, f"stage{s}", plan_defaults)} for s in STAGE_EPOCHS}
    return RunConfig(codec, vred, plans)


def _plan(cfg: RunConfig, stage: int, args) -> TrainPlan:
    kwargs = dict(cfg.plans[stage])
    if args.epochs is not None:
        kwargs["epochs"] = args.epochs
    return TrainPlan(stage=stage, seed=args.seed, **kwargs)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _require(path, what: str) -> Path:
    if path is None:
        raise UsageError(f"{what} is required")
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def cmd_gen_corpus(args) -> None:
    if args.out is None:
        raise UsageError("--out DIR is required")
    paths = write_corpus(synth_corpus(args.files, args.duration, args.seed), args.out)
    log.info("wrote %d files to %s", len(paths), args.out)


def cmd_train(args) -> None:
    first = STAGE_OF_COMMAND[args.command]
    last = args.stage if args.stage is not None else first
    if last < first:
        raise UsageError(f"--stage {last} is before {args.command} (stage {first})")
    cfg = load_config(args.config)
    corpus = load_corpus(_require(args.inp, "--in corpus"), cfg.codec.sample_rate)
    if args.out is None:
        raise UsageError("--out checkpoint path is required")
    train_log = TrainLog()
    if first == 1:
        ckpt = pretrain_feature_codec(corpus, _plan(cfg, 1, args), cfg.codec, cfg.vred, train_log)
    else:
        ckpt = Checkpoint.load(_require(args.model, "--model checkpoint"))
        if ckpt.stage < first - 1:
            raise ConfigError(f"{args.command} needs a stage-{first - 1} checkpoint, got stage {ckpt.stage}")
    for stage in range(max(first, 2), last + 1):
        step = train_vred if stage == 2 else finetune
        ckpt = step(ckpt, corpus, _plan(cfg, stage, args), train_log)
    ckpt.save(args.out)
    if args.csv:
        Path(args.csv).write_text(train_log.to_csv())
    log.info("saved stage-%d checkpoint to %s", ckpt.stage, args.out)


def cmd_encode(args) -> None:
    ckpt = Checkpoint.load(_require(args.model, "--model checkpoint"))
    signal = load_wav(_require(args.inp, "--in WAV"), ckpt.codec_cfg.sample_rate)
    if args.out is None:
        raise UsageError("--out stream path is required")
    stream = encode_audio(ckpt, signal, mode=args.mode, seed=args.seed)
    write_stream(stream, args.out)
    dim, bits = compression_ratio(ckpt.codec.channels, ckpt.codec.stride, ckpt.vred_cfg.latent_dim,
                                  ckpt.vred_cfg.window_frames)
    log.info("encoded %d samples into %d steps (dimension ratio %s, bit ratio %s)",
             stream.header.original_length, stream.header.num_steps, dim, bits)


def cmd_decode(args) -> None:
    ckpt = Checkpoint.load(_require(args.model, "--model checkpoint"))
    stream = read_stream(_require(args.inp, "--in stream"))
    if args.out is None:
        raise UsageError("--out path is required (.wav for PCM16, .npy for float64 samples)")
    audio = decode_audio(ckpt, stream, force_digest=args.force_digest_mismatch)
    if str(args.out).endswith(".npy"):
        with open(args.out, "wb") as fh:
            np.save(fh, audio)
    else:
        write_wav(AudioSignal(audio, stream.header.sample_rate), args.out)
    log.info("decoded %d samples to %s", audio.size, args.out)


def cmd_eval(args) -> None:
    from .evaluate import evaluate_corpus

    ckpt = Checkpoint.load(_require(args.model, "--model checkpoint"))
    signals = load_corpus(_require(args.inp, "--in corpus"), ckpt.codec_cfg.sample_rate)
    report = evaluate_corpus(ckpt, signals)
    for name, value in report.per_file:
        print(f"{name}\t{value:.4f}", file=sys.stderr)
    mean = report.mean_sdr
    log.info("mean SDR %s dB over %d files (%d failed)", "n/a" if mean is None else f"{mean:.4f}",
             len(report.per_file), len(report.files_failed))
    if args.csv:
        report.to_csv(args.csv)
    if not report.per_file:
        raise VredError("no file could be evaluated")


def cmd_sweep(args) -> None:
    from .evaluate import sweep_configs, write_sweep_csv

    train = load_corpus(_require(args.inp, "--in training corpus"))
    test = load_corpus(_require(args.test, "--test corpus")) if args.test else train
    if not args.csv:
        raise UsageError("--csv output path is required")
    rows = sweep_configs(train, test, epochs=args.epochs or 5, seed=args.seed, workers=args.workers)
    write_sweep_csv(rows, args.csv)
    log.info("wrote %d sweep rows to %s", len(rows), args.csv)


def cmd_gradcheck(args) -> None:
    from .gradcheck import TOLERANCE, run_suite

    report = run_suite(range(args.seed, args.seed + args.seeds), coords=args.coords)
    for name, err in report.worst_by_check().items():
        log.info("%-20s max rel err %.3e %s", name, err, "ok" if err < TOLERANCE else "FAIL")
    log.info("%d checks in %.1f s", len(report.results), report.seconds)
    if not report.passed:
        raise GradcheckFailed(f"finite-difference checks failed (max rel err {report.max_error:.3e})")


COMMANDS = {
    "gen-corpus": cmd_gen_corpus, "pretrain": cmd_train, "train-vred": cmd_train, "finetune": cmd_train,
    "encode": cmd_encode, "decode": cmd_decode, "eval": cmd_eval, "sweep": cmd_sweep, "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="vred", description=__doc__.split("\n\n")[0], formatter_class=fmt)
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="seed for every random choice")

    p = sub.add_parser("gen-corpus", parents=[common], formatter_class=fmt, help="write a synthetic WAV corpus")
    p.add_argument("--out", help="output directory")
    p.add_argument("--files", type=int, default=12, help="number of files")
    p.add_argument("--duration", type=float, default=5.0, help="seconds per file")

    for name, stage in STAGE_OF_COMMAND.items():
        p = sub.add_parser(name, parents=[common], formatter_class=fmt, help=f"training stage {stage}")
        p.add_argument("--config", help="INI config file (see module docs); defaults are the library defaults")
        p.add_argument("--in", dest="inp", help="corpus: a WAV file or a directory of WAVs")
        p.add_argument("--model", help="input checkpoint (stages 2 and 3)")
        p.add_argument("--out", help="output checkpoint")
        p.add_argument("--epochs", type=int, help=f"override epochs (defaults {STAGE_EPOCHS})")
        p.add_argument("--stage", type=int, choices=[1, 2, 3],
                       help="continue through this later stage in the same run")
        p.add_argument("--csv", help="write the per-epoch training log here")

    p = sub.add_parser("encode", parents=[common], formatter_class=fmt, help="WAV -> .vred stream")
    p.add_argument("--model", help="checkpoint")
    p.add_argument("--in", dest="inp", help="input WAV")
    p.add_argument("--out", help="output .vred")
    p.add_argument("--mode", choices=["threshold", "sample"], default="threshold", help="latent coding mode")

    p = sub.add_parser("decode", parents=[common], formatter_class=fmt, help=".vred stream -> WAV or .npy")
    p.add_argument("--model", help="checkpoint")
    p.add_argument("--in", dest="inp", help="input .vred")
    p.add_argument("--out", help="output .wav (PCM16) or .npy (float64)")
    p.add_argument("--force-digest-mismatch", action="store_true",
                   help="decode even if the stream names a different model")

    p = sub.add_parser("eval", parents=[common], formatter_class=fmt, help="end-to-end SDR over a corpus")
    p.add_argument("--model", help="checkpoint")
    p.add_argument("--in", dest="inp", help="WAV file or directory")
    p.add_argument("--csv", help="write per-file SDRs here")

    p = sub.add_parser("sweep", parents=[common], formatter_class=fmt, help="feature-codec configuration sweep")
    p.add_argument("--in", dest="inp", help="training corpus")
    p.add_argument("--test", help="test corpus (default: the training corpus)")
    p.add_argument("--epochs", type=int, default=5, help="stage-1 epochs per configuration")
    p.add_argument("--workers", type=int, default=1, help="train configurations in this many processes")
    p.add_argument("--csv", help="output CSV")

    p = sub.add_parser("gradcheck", parents=[common], formatter_class=fmt, help="finite-difference suite")
    p.add_argument("--seeds", type=int, default=20, help="number of seeds, starting at --seed")
    p.add_argument("--coords", type=int, default=3,
                   help="coordinates sampled per parameter tensor in the objective checks (0 = all)")
    return parser


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=args.log_level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "coords", None) == 0:
        args.coords = None
    try:
        COMMANDS[args.command](args)
    except (UsageError, VredError, OSError, ValueError) as exc:
        log.error("%s", exc)
        return 1
    except InternalError as exc:
        log.error("internal error: %s", exc)
        return 2
    except Exception as exc:  # anything unanticipated is a broken invariant, not a user mistake
        log.exception("internal error: %s", exc)
        return 2
    return 0


def main() -> None:
    sys.exit(run())
