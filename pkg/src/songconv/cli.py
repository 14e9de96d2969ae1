"""Command line entry point: ``songconv <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .audio_io import AudioClip, load_wav, resample, store_wav
from .cyclegan import CycleGAN, GeneratorSpec, LossWeights, TrainConfig, train, write_epoch_csv
from .errors import DataError, NumericError
from .eval_metrics import (global_variance, modulation_spectrum, mos_aggregate, read_mos_csv, relative_change,
                           rmse_summary)
from .features import SAMPLE_RATE, analyze, f0_stats, read_features_csv, write_features_csv
from .pipeline import (ConversionJob, load_converter, overlay, run_jobs, save_converter, save_separator,
                       load_separator)
from .separation import (SeparatorModel, SeparatorSpec, SeparatorTrainConfig, separate, train_separator,
                         write_mask_pgm)
from .testkit import DemoConfig, SINGER_A, demo_experiment, random_melody, synth_mixture, synth_vocal
from .transfer import format_table, load_checkpoint, transfer_init

log = logging.getLogger("songconv")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
CONFIG_ENV = "SCMGAN_CONFIG"


class UsageError(Exception):
    pass


class ConfigError(DataError):
    pass


# ----------------------------------------------------------------- config

@dataclass
class StftParams:
    frame_len: int = 1024
    hop: int = 256


@dataclass
class VocoderParams:
    seed: int = 0
    bypass: bool = False


@dataclass
class Paths:
    separator: str | None = None
    converter: str | None = None
    out_dir: str | None = None


@dataclass
class Config:
    """Every tunable in one JSON document; unknown keys are rejected."""

    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    separator: SeparatorTrainConfig = field(default_factory=SeparatorTrainConfig)
    stft: StftParams = field(default_factory=StftParams)
    vocoder: VocoderParams = field(default_factory=VocoderParams)
    paths: Paths = field(default_factory=Paths)
    demo: DemoConfig = field(default_factory=DemoConfig)

    @classmethod
    def from_dict(cls, d: dict) -> "Config":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        sections = {f.name: f for f in fields(cls)}
        unknown = set(d) - set(sections)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        kwargs = {}
        for name, value in d.items():
            typ = type(sections[name].default_factory())
            if not isinstance(value, dict):
                raise ConfigError(f"config section '{name}' must be an object")
            allowed = {f.name for f in fields(typ)}
            bad = set(value) - allowed
            if bad:
                raise ConfigError(f"unknown keys in '{name}': {sorted(bad)}")
            try:
                kwargs[name] = typ(**value)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"invalid '{name}' section: {exc}") from exc
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return asdict(self)


def load_config(path: str | None) -> Config:
    path = path or os.environ.get(CONFIG_ENV)
    if not path:
        return Config()
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return Config.from_dict(data)


# ----------------------------------------------------------------- logging

class JsonFormatter(logging.Formatter):
    def format(self, record):
        entry = {"level": record.levelname.lower(), "logger": record.name, "msg": record.getMessage()}
        for key in ("stage", "event"):
            if hasattr(record, key):
                entry[key] = getattr(record, key)
        return json.dumps(entry, sort_keys=True)


def setup_logging(mode: str, verbose: bool) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonFormatter() if mode == "json" else logging.Formatter("%(levelname)s %(message)s"))
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(logging.DEBUG if verbose else logging.INFO)


# ----------------------------------------------------------------- helpers

def _load_16k(path) -> AudioClip:
    clip = load_wav(path)
    return clip if clip.sample_rate == SAMPLE_RATE else resample(clip, SAMPLE_RATE)


def _pmap(fn, items, jobs: int):
    if jobs <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def _wavs(paths, suffixes=(".wav",)) -> list[Path]:
    out = []
    for p in paths:
        p = Path(p)
        out.extend(sorted(f for f in p.iterdir() if f.suffix.lower() in suffixes) if p.is_dir() else [p])
    if not out:
        raise DataError(f"no {'/'.join(suffixes)} files found in {list(map(str, paths))}")
    return out


def _features_of(path: Path):
    return read_features_csv(path) if path.suffix.lower() == ".csv" else analyze(_load_16k(path))


# ----------------------------------------------------------------- subcommands

def _split_one(args):
    path, model_path, out_dir, pgm = args
    model = load_separator(model_path)
    res = separate(model, _load_16k(path))
    stem = Path(path).stem
    out = Path(out_dir)
    clipped = store_wav(res.vocals, out / f"{stem}_vocals.wav") + store_wav(res.accompaniment, out / f"{stem}_accomp.wav")
    if pgm:
        write_mask_pgm(res.vocal_mask, out / f"{stem}_vocal_mask.pgm")
    return {"input": str(path), "clipped": clipped}


def cmd_split(args, cfg: Config) -> int:
    model = args.model or cfg.paths.separator
    if not model:
        raise UsageError("split needs --model (or paths.separator in the config)")
    Path(args.out_dir).mkdir(parents=True, exist_ok=True)
    items = [(p, model, args.out_dir, args.pgm) for p in _wavs(args.inputs)]
    _emit(_pmap(_split_one, items, args.jobs))
    return EXIT_OK


def _features_one(args):
    path, out_dir = args
    feats = analyze(_load_16k(path))
    dst = Path(out_dir) / f"{Path(path).stem}.csv"
    write_features_csv(feats, dst)
    return {"input": str(path), "output": str(dst), "frames": len(feats), "voiced": int(feats.voiced.sum())}


def cmd_features(args, cfg: Config) -> int:
    Path(args.out_dir).mkdir(parents=True, exist_ok=True)
    _emit(_pmap(_features_one, [(p, args.out_dir) for p in _wavs(args.inputs)], args.jobs))
    return EXIT_OK


def cmd_train_sep(args, cfg: Config) -> int:
    scfg = cfg.separator
    if args.epochs is not None:
        scfg.epochs = args.epochs
    if args.seed is not None:
        scfg.seed = args.seed
    if args.synthetic:
        rng = np.random.default_rng(scfg.seed)
        triples = []
        for i in range(args.synthetic):
            voc = synth_vocal(SINGER_A, random_melody(scfg.seed * 100_003 + i, 3.0), scfg.seed * 100_003 + i, 3.0)
            triples.append(synth_mixture(voc, ("pad", "drums", "both")[i % 3], float(rng.uniform(-5, 5)), i))
    else:
        if not (args.mixes and args.vocals and args.accomps):
            raise UsageError("train-sep needs --synthetic N or all of --mixes/--vocals/--accomps")
        triples = []
        for mix in _wavs([args.mixes]):
            voc, acc = Path(args.vocals) / mix.name, Path(args.accomps) / mix.name
            triples.append((_load_16k(mix), _load_16k(voc), _load_16k(acc)))
    model = SeparatorModel(SeparatorSpec(mode=args.mode, frame_len=cfg.stft.frame_len, hop=cfg.stft.hop),
                           seed=scfg.seed)
    tlog = train_separator(model, triples, scfg,
                           callback=lambda e: log.info("epoch %d train %.4f val %.4f", e["epoch"], e["train_l1"], e["val_l1"]))
    save_separator(model, args.out, {"seed": scfg.seed, "epochs": scfg.epochs})
    _emit({"checkpoint": args.out, "epochs": tlog.epochs})
    return EXIT_OK


def cmd_train_vc(args, cfg: Config) -> int:
    tcfg = cfg.train
    if args.epochs is not None:
        tcfg.epochs = args.epochs
    if args.seed is not None:
        tcfg.seed = args.seed
    src = [_features_of(p) for p in _wavs([args.source], (".wav", ".csv"))]
    tgt = [_features_of(p) for p in _wavs([args.target], (".wav", ".csv"))]
    stats_x = f0_stats(np.concatenate([f.f0 for f in src]))
    stats_y = f0_stats(np.concatenate([f.f0 for f in tgt]))
    model = CycleGAN(GeneratorSpec(), seed=tcfg.seed)
    report = None
    if args.donor:
        only = ("G_XY", "G_YX") if args.generators_only else None
        report = transfer_init(model.models(), load_checkpoint(args.donor), policy=args.policy, only=only)
        log.info("transfer: %d tensors copied, %d shape mismatches, %d missing", len(report.transferred),
                 len(report.skipped_shape_mismatch), len(report.missing_in_donor))
    weights = cfg.loss
    logs = train(model, [f.mcep for f in src], [f.mcep for f in tgt], tcfg, weights,
                 callback=lambda e: log.info("epoch %d cyc %.4f id %.4f", e.epoch, e.cyc, e.id))
    if args.log_csv:
        write_epoch_csv(logs, args.log_csv)
    meta = {"seed": tcfg.seed, "epochs": tcfg.epochs,
            "f0_x": {"mu": stats_x.mu, "sigma": stats_x.sigma}, "f0_y": {"mu": stats_y.mu, "sigma": stats_y.sigma}}
    save_converter(model, args.out, meta)
    _emit({"checkpoint": args.out, "final": logs[-1].__dict__ if logs else None,
           "transfer": report.to_json() if report else None})
    return EXIT_OK


def cmd_convert(args, cfg: Config) -> int:
    inputs = _wavs(args.inputs)
    if len(inputs) > 1 and not args.out_dir:
        raise UsageError("several inputs need --out-dir")
    if len(inputs) == 1 and not (args.out or args.out_dir):
        raise UsageError("convert needs --out or --out-dir")
    separator = args.separator or cfg.paths.separator
    converter = args.converter or cfg.paths.converter
    if not args.no_split and not separator:
        raise UsageError("convert needs --separator unless --no-split is given")
    jobs = []
    for p in inputs:
        out = args.out if args.out and len(inputs) == 1 else str(Path(args.out_dir) / f"{p.stem}_converted.wav")
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        report = args.report if args.report and len(inputs) == 1 else str(Path(out).with_suffix(".json"))
        jobs.append(ConversionJob(str(p), out, separator, converter, skip_separation=args.no_split,
                                  vocoder_bypass=args.bypass or cfg.vocoder.bypass, report_path=report,
                                  seed=cfg.vocoder.seed))
    reports = run_jobs(jobs, args.jobs)
    _emit([{k: r[k] for k in ("input_path", "output_path", "alignment_score", "clip_counts", "mode")} for r in reports])
    return EXIT_OK


def cmd_merge(args, cfg: Config) -> int:
    voc, acc = _load_16k(args.vocals), _load_16k(args.accomp)
    out, clipped = overlay(voc, acc, int(round(args.offset * SAMPLE_RATE)))
    wav_clipped = store_wav(out, args.out)
    _emit({"output": args.out, "soft_clipped": clipped, "wav_clipped": wav_clipped, "duration_s": out.duration})
    return EXIT_OK


def _pair_metric(args, fn) -> dict:
    conv = [p for p in map(Path, args.converted)]
    tgt = [p for p in map(Path, args.target)]
    if len(conv) != len(tgt):
        raise UsageError(f"{len(conv)} converted files vs {len(tgt)} target files")
    a = [fn(f.mcep) for f in _pmap(_features_of, conv, args.jobs)]
    b = [fn(f.mcep) for f in _pmap(_features_of, tgt, args.jobs)]
    return a, b


def cmd_eval_gv(args, cfg: Config) -> int:
    a, b = _pair_metric(args, global_variance)
    s = rmse_summary(a, b, log=args.log_domain)
    _emit({"metric": "gv_rmse", "log_domain": args.log_domain, "mean": s.mean, "std": s.std, "per_pair": s.per_pair,
           "converted_gv_mean": np.mean(a, axis=0).tolist(), "target_gv_mean": np.mean(b, axis=0).tolist()})
    return EXIT_OK


def cmd_eval_ms(args, cfg: Config) -> int:
    a, b = _pair_metric(args, modulation_spectrum)
    s = rmse_summary(a, b)
    _emit({"metric": "ms_rmse", "mean": s.mean, "std": s.std, "per_pair": s.per_pair})
    return EXIT_OK


def cmd_eval_mos(args, cfg: Config) -> int:
    res = mos_aggregate(read_mos_csv(args.input))
    out = {"methods": {k: v.to_json() for k, v in sorted(res.items())}}
    if args.compare:
        a, b = args.compare
        if a not in res or b not in res:
            raise DataError(f"methods {a!r}/{b!r} not both present in {sorted(res)}")
        out["relative_change_pct"] = {
            "naturalness": relative_change(res[a].naturalness, res[b].naturalness),
            "similarity": relative_change(res[a].similarity, res[b].similarity),
        }
    _emit(out)
    return EXIT_OK


def cmd_ckpt_inspect(args, cfg: Config) -> int:
    print(format_table(load_checkpoint(args.checkpoint)))
    return EXIT_OK


def cmd_demo(args, cfg: Config) -> int:
    dcfg = cfg.demo
    if args.fast:
        dcfg = DemoConfig(n_train=40, n_test=4, n_donor=40, sep_mixtures=24, sep_epochs=3, donor_epochs=20,
                          vc_epochs=3, run_seeds=(0, 1), write_audio=dcfg.write_audio)
    dcfg.n_jobs = args.jobs
    summary = demo_experiment(args.out, args.seed, dcfg, progress=lambda m: log.info("%s", m, extra={"stage": "demo"}))
    _emit({"out": args.out, "jump_start": summary["jump_start"], "efficacy_ok": summary["efficacy_ok"]})
    return EXIT_OK


# ----------------------------------------------------------------- parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="songconv", description="Singing voice conversion inside songs: split, convert, merge.")
    p.add_argument("--log", choices=("text", "json"), default="text", help="log format on stderr")
    p.add_argument("--config", help=f"JSON config (default: ${CONFIG_ENV})")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("split", help="separate vocals and accompaniment")
    s.add_argument("--in", dest="inputs", nargs="+", required=True)
    s.add_argument("--model")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--pgm", action="store_true", help="also dump the vocal mask as PGM")
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("features", help="analyze WAVs into feature CSVs")
    s.add_argument("--in", dest="inputs", nargs="+", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_features)

    s = sub.add_parser("train-sep", help="train the separator")
    s.add_argument("--synthetic", type=int, default=0, help="train on N generated mixtures")
    s.add_argument("--mixes")
    s.add_argument("--vocals")
    s.add_argument("--accomps")
    s.add_argument("--mode", choices=("complementary", "two_decoder"), default="complementary")
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_sep)

    s = sub.add_parser("train-vc", help="train the CycleGAN converter")
    s.add_argument("--source", required=True, help="directory of source WAVs or feature CSVs")
    s.add_argument("--target", required=True)
    s.add_argument("--donor", help="checkpoint to initialize from")
    s.add_argument("--generators-only", action="store_true")
    s.add_argument("--policy", choices=("permissive", "strict"), default="permissive")
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--log-csv")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_vc)

    s = sub.add_parser("convert", help="split, convert and merge songs")
    s.add_argument("--in", dest="inputs", nargs="+", required=True)
    s.add_argument("--out")
    s.add_argument("--out-dir")
    s.add_argument("--separator")
    s.add_argument("--converter")
    s.add_argument("--no-split", action="store_true", help="convert the whole mix without separation")
    s.add_argument("--bypass", action="store_true", help="filter the vocals instead of resynthesizing")
    s.add_argument("--report")
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_convert)

    s = sub.add_parser("merge", help="overlay vocals on accompaniment")
    s.add_argument("--vocals", required=True)
    s.add_argument("--accomp", required=True)
    s.add_argument("--offset", type=float, default=0.0, help="vocal offset in seconds")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_merge)

    for name, fn in (("eval-gv", cmd_eval_gv), ("eval-ms", cmd_eval_ms)):
        s = sub.add_parser(name, help=f"{name[5:].upper()} RMSE between paired files")
        s.add_argument("--converted", nargs="+", required=True)
        s.add_argument("--target", nargs="+", required=True)
        s.add_argument("--jobs", type=int, default=1)
        if name == "eval-gv":
            s.add_argument("--log-domain", action="store_true")
        s.set_defaults(func=fn)

    s = sub.add_parser("eval-mos", help="aggregate a MOS ratings CSV")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--compare", nargs=2, metavar=("METHOD", "BASELINE"))
    s.set_defaults(func=cmd_eval_mos)

    s = sub.add_parser("ckpt-inspect", help="print a checkpoint's tensor table")
    s.add_argument("checkpoint")
    s.set_defaults(func=cmd_ckpt_inspect)

    s = sub.add_parser("ckpt", help="checkpoint tools")
    ck = s.add_subparsers(dest="ckpt_command", parser_class=_Parser)
    i = ck.add_parser("inspect", help="print a checkpoint's tensor table")
    i.add_argument("checkpoint")
    i.set_defaults(func=cmd_ckpt_inspect)

    s = sub.add_parser("demo", help="run the synthetic end-to-end study")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--fast", action="store_true", help="small sizes for a quick smoke run")
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_demo)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "func", None):
            raise UsageError(parser.format_usage() + "songconv: error: a subcommand is required")
        if getattr(args, "jobs", 1) < 1:
            raise UsageError("--jobs must be at least 1")
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    setup_logging(args.log, args.verbose)
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except UsageError as exc:
        print(parser.format_usage() + f"songconv: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        log.error("%s", exc, extra={"event": "numeric_error", "stage": getattr(exc, "stage", args.command)})
        return EXIT_NUMERIC
    except DataError as exc:
        log.error("%s", exc, extra={"event": "data_error", "stage": getattr(exc, "stage", args.command)})
        return EXIT_DATA


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
