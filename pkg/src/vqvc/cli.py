"""Command-line entry point: ``vqvc {extract,train,convert,eval}``.

Configuration is a UTF-8 text file of ``section.key = value`` lines (``#`` starts
a comment). Sections are ``features``, ``model``, ``train`` and ``sampler``.
Precedence, lowest first: built-in defaults, the config file, ``--set`` overrides,
dedicated flags such as ``--seed``.

Exit codes: 0 success, 1 data error, 2 config error, 3 lookup error.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import secrets
import sys
import typing
from pathlib import Path


from .audio_io import AudioFormatError, read_wav, write_wav
from .checkpoint import CheckpointError, CorruptCheckpointError, load_checkpoint
from .config import ModelConfig
from .features import (FeatureConfig, MissingDataError, TooShortError, extract_features,
                       fit_speaker_stats, save_features, save_stats)
from .synthesizer import SamplerConfig, convert
from .trainer import (Stage, TrainConfig, TrainingConfigError, TrainingDivergedError, evaluate,
                      load_utterances, read_manifest, run_training)

EXIT_OK, EXIT_DATA, EXIT_CONFIG, EXIT_LOOKUP = 0, 1, 2, 3


class CliConfigError(ValueError):
    pass


class LookupFailure(KeyError):
    pass


# -- configuration ------------------------------------------------------------

SECTIONS = {"features": FeatureConfig, "model": ModelConfig, "train": TrainConfig, "sampler": SamplerConfig}
# derived from data or owned by dedicated flags
_EXCLUDED = {"model.n_speakers", "train.stages"}


def _schema() -> dict[str, type]:
    out = {}
    for sec, cls in SECTIONS.items():
        hints = typing.get_type_hints(cls)
        for f in dataclasses.fields(cls):
            key = f"{sec}.{f.name}"
            if key not in _EXCLUDED:
                out[key] = hints[f.name]
    out["train.stages"] = list
    return out


SCHEMA = _schema()


def _coerce(key: str, raw: str, base: Path | None):
    tp = SCHEMA[key]
    raw = raw.strip()
    args = typing.get_args(tp)
    if args and type(None) in args:
        if raw.lower() in ("none", "null", ""):
            return None
        tp = next(a for a in args if a is not type(None))
    try:
        if key == "train.stages":
            return _parse_stages(raw, base)
        if tp is bool:
            if raw.lower() in ("true", "yes", "1"):
                return True
            if raw.lower() in ("false", "no", "0"):
                return False
            raise ValueError(raw)
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        if key == "train.out_dir" and base is not None:
            return str(base / raw)
        return raw
    except ValueError:
        raise CliConfigError(f"{key}: cannot parse {raw!r} as {getattr(tp, '__name__', tp)}") from None


def _parse_stages(raw: str, base: Path | None) -> list[Stage]:
    """``path:steps, path:steps`` with paths relative to the config file."""
    stages = []
    for item in filter(None, (s.strip() for s in raw.split(","))):
        path, _, steps = item.rpartition(":")
        if not path:
            raise ValueError(item)
        p = Path(path)
        if base is not None and not p.is_absolute():
            p = base / p
        stages.append(Stage(str(p), int(steps)))
    return stages


def parse_config_text(text: str, base: Path | None = None) -> dict:
    values = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, eq, raw = line.partition("=")
        key = key.strip()
        if not eq:
            raise CliConfigError(f"line {n}: expected 'section.key = value'")
        if key not in SCHEMA:
            raise CliConfigError(f"line {n}: unknown key {key!r}")
        values[key] = _coerce(key, raw, base)
    return values


def apply_overrides(values: dict, overrides: list[str]) -> dict:
    out = dict(values)
    for ov in overrides:
        key, eq, raw = ov.partition("=")
        key = key.strip()
        if not eq:
            raise CliConfigError(f"--set {ov!r}: expected key=value")
        if key not in SCHEMA:
            raise CliConfigError(f"--set: unknown key {key!r}")
        out[key] = _coerce(key, raw, Path.cwd())
    return out


def load_config(path: str | None, overrides: list[str] = ()) -> dict:
    values = {}
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text(encoding="utf-8")
        except OSError as e:
            raise CliConfigError(f"cannot read config {path}: {e}") from None
        values = parse_config_text(text, p.resolve().parent)
    return apply_overrides(values, list(overrides))


def build(values: dict, section: str):
    cls = SECTIONS[section]
    kw = {k.split(".", 1)[1]: v for k, v in values.items() if k.startswith(section + ".")}
    try:
        return cls(**kw)
    except (TypeError, ValueError) as e:
        raise CliConfigError(f"[{section}] {e}") from None


# -- commands -----------------------------------------------------------------

def _resolve_seed(explicit, err) -> int:
    if explicit is not None:
        return int(explicit)
    seed = secrets.randbelow(2 ** 31)
    print(f"seed: {seed}", file=err)
    return seed


def cmd_extract(args, out, err) -> int:
    values = load_config(args.config, args.set)
    fcfg = build(values, "features")
    entries = _read_manifest(args.manifest)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    feats, failed = [], 0
    for e in entries:
        try:
            w = read_wav(e.wav_path)
            if w.sample_rate != fcfg.sample_rate:
                raise AudioFormatError(f"sample rate {w.sample_rate} != configured {fcfg.sample_rate}")
            fm = extract_features(w, e.speaker, fcfg)
        except (OSError, AudioFormatError, TooShortError) as ex:
            print(f"error: {e.wav_path}: {ex}", file=err)
            failed += 1
            continue
        save_features(fm, out_dir / f"{e.speaker}_{Path(e.wav_path).stem}.vqf")
        feats.append(fm)
    if feats:
        save_stats(fit_speaker_stats(feats, fcfg), out_dir / "stats.tsv")
    print(f"extracted {len(feats)} of {len(entries)} utterances into {out_dir}", file=out)
    return EXIT_DATA if failed else EXIT_OK


def cmd_train(args, out, err) -> int:
    values = load_config(args.config, args.set)
    if args.out_dir:
        values["train.out_dir"] = args.out_dir
    seed = _resolve_seed(args.seed if args.seed is not None else values.get("train.seed"), err)
    values["train.seed"] = seed
    if not values.get("train.stages"):
        raise CliConfigError("train.stages is required (path:steps, ...)")
    fcfg, mcfg, tcfg = build(values, "features"), build(values, "model"), build(values, "train")
    res = run_training(mcfg, fcfg, tcfg, resume=args.resume,
                       echo=(lambda s: print(s, file=out)) if not args.quiet else None)
    last = res.history[-1] if res.history else {"total": float("nan"), "reconstruction": float("nan")}
    print(f"done: step {res.checkpoint.step} final total loss {last['total']:.4f} "
          f"reconstruction {last['reconstruction']:.4f} -> {tcfg.out_dir}", file=out)
    return EXIT_OK


def cmd_convert(args, out, err) -> int:
    ck = _load_ck(args.checkpoint)
    if args.speaker not in ck.speakers:
        raise LookupFailure(f"unknown speaker {args.speaker!r}; available: {', '.join(ck.speakers)}")
    seed = _resolve_seed(args.seed, err)
    try:
        sampler = SamplerConfig(mode=args.mode, temperature=args.temperature, seed=seed)
    except ValueError as e:
        raise CliConfigError(str(e)) from None
    src = read_wav(args.input)
    if src.sample_rate != ck.feature_config.sample_rate:
        raise CliConfigError(f"input sample rate {src.sample_rate} != model rate {ck.feature_config.sample_rate}")
    res = convert(ck.build_model(), ck, src, args.speaker, sampler, source_speaker=args.source_speaker)
    write_wav(res.waveform, args.out)
    print(f"wrote {args.out} ({len(res.waveform)} samples)", file=out)
    return EXIT_OK


def cmd_eval(args, out, err) -> int:
    ck = _load_ck(args.checkpoint)
    entries = _read_manifest(args.manifest)
    unknown = sorted({e.speaker for e in entries} - set(ck.speakers))
    if unknown:
        raise LookupFailure(f"speakers {unknown} not in checkpoint; available: {', '.join(ck.speakers)}")
    model = ck.build_model()
    by_spk, failed = {}, 0
    for e in entries:
        try:
            utts, _ = load_utterances([e], ck.speakers, ck.feature_config, ck.model_config.mu, ck.cmvn)
        except (OSError, AudioFormatError, TooShortError, TrainingConfigError) as ex:
            print(f"error: {e.wav_path}: {ex}", file=err)
            failed += 1
            continue
        by_spk.setdefault(e.speaker, []).extend(utts)
    if not by_spk:
        return EXIT_DATA
    shift = ck.feature_config.frame_shift_samples
    print("speaker\tutterances\tloss\taccuracy\tperplexity", file=out)
    for name in sorted(by_spk):
        _row(out, name, by_spk[name], evaluate(model, by_spk[name], shift))
    everything = [u for name in sorted(by_spk) for u in by_spk[name]]
    _row(out, "ALL", everything, evaluate(model, everything, shift))
    return EXIT_DATA if failed else EXIT_OK


def _row(out, name, utts, m):
    print(f"{name}\t{len(utts)}\t{m['loss']:.6f}\t{m['accuracy']:.6f}\t{m['perplexity']:.4f}", file=out)


def _read_manifest(path):
    try:
        entries = read_manifest(path)
    except OSError as e:
        raise CliConfigError(f"cannot read manifest {path}: {e}") from None
    if not entries:
        raise CliConfigError(f"manifest {path} is empty")
    return entries


def _load_ck(path):
    try:
        return load_checkpoint(path)
    except OSError as e:
        raise CorruptCheckpointError(f"cannot read checkpoint {path}: {e}") from None


# -- argument parsing ---------------------------------------------------------

def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vqvc", description="VQ-VAE voice conversion with a WaveNet decoder.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="key-value config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (repeatable)")

    ex = sub.add_parser("extract", help="compute features and per-speaker CMVN statistics")
    ex.add_argument("--manifest", required=True)
    ex.add_argument("--out-dir", required=True)
    with_config(ex)

    tr = sub.add_parser("train", help="train a model")
    with_config(tr)
    tr.add_argument("--resume", help="checkpoint to continue from")
    tr.add_argument("--seed", type=int)
    tr.add_argument("--out-dir")
    tr.add_argument("--quiet", action="store_true", help="suppress per-step lines")

    cv = sub.add_parser("convert", help="convert a WAV file to a target speaker")
    cv.add_argument("--checkpoint", required=True)
    cv.add_argument("--in", dest="input", required=True)
    cv.add_argument("--speaker", required=True)
    cv.add_argument("--out", required=True)
    cv.add_argument("--seed", type=int)
    cv.add_argument("--mode", default="categorical", choices=["categorical", "argmax"])
    cv.add_argument("--temperature", type=float, default=1.0)
    cv.add_argument("--source-speaker", help="speaker whose CMVN stats normalize the input")

    ev = sub.add_parser("eval", help="teacher-forced metrics per speaker")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--manifest", required=True)
    return p


COMMANDS = {"extract": cmd_extract, "train": cmd_train, "convert": cmd_convert, "eval": cmd_eval}


def main(argv=None, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    try:
        args = make_parser().parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=err)
    try:
        return COMMANDS[args.command](args, out, err)
    except LookupFailure as e:
        print(f"error: {e.args[0]}", file=err)
        return EXIT_LOOKUP
    except (CliConfigError, TrainingConfigError, CheckpointError, MissingDataError) as e:
        code = EXIT_DATA if isinstance(e, CorruptCheckpointError) else EXIT_CONFIG
        print(f"error: {e}", file=err)
        return code
    except (OSError, AudioFormatError, TooShortError, TrainingDivergedError) as e:
        print(f"error: {e}", file=err)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
