"""``melada`` command line.

Settings resolve in three layers: the chosen preset, then an optional
``--config`` file of ``key=value`` lines, then explicit flags. The resolved
settings are logged at the start of every run.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from .adaptation import (
    AdaptConfig,
    accuracy,
    loso_evaluate,
    predict,
    self_adapt,
    write_adaptation_curve,
    write_loso_results,
)
from .autodiff import AutodiffError
from .data import Domain, SplitMix64, SynthSpec, gen_synthetic, read_dataset, write_csv, write_dataset
from .model import ModelConfig, init_params, load_params, save_params
from .presets import PRESETS
from .signal import features_from_raw
from .training import HISTORY_FIELDS, TrainConfig, pretrain, train_loop

log = logging.getLogger("melada")

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}

_TRAIN_KEYS = {f.name: f.type for f in fields(TrainConfig)}
_SYNTH_KEYS = {f.name: f.type for f in fields(SynthSpec)}
_ADAPT_KEYS = {f.name: f.type for f in fields(AdaptConfig)}
_MODEL_KEYS = ("hidden", "n_layers", "clf_hidden", "ctrl_hidden", "latent")

_CASTS = {"int": int, "float": float, "bool": None, "str": str}


class UsageError(Exception):
    """Bad configuration supplied by the user (exit code 2)."""


def _key_type(key: str) -> str:
    for table in (_TRAIN_KEYS, _SYNTH_KEYS, _ADAPT_KEYS):
        if key in table:
            return str(table[key])
    if key in _MODEL_KEYS:
        return "int"
    if key == "preset":
        return "str"
    raise UsageError(f"unknown config key {key!r}")


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def parse_value(key: str, text: str):
    kind = _key_type(key)
    try:
        if kind == "bool":
            return _parse_bool(text)
        return _CASTS[kind](text.strip())
    except ValueError as exc:
        raise UsageError(f"bad value for {key}: {exc}") from None


def read_config(path) -> dict:
    """Parse ``key=value`` lines; blank lines and ``#`` comments are ignored."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = parse_value(key, value)
    return out


def all_keys() -> list[str]:
    keys = ["preset", *_TRAIN_KEYS, *_SYNTH_KEYS, *_ADAPT_KEYS, *_MODEL_KEYS]
    return list(dict.fromkeys(keys))


def resolve(file_values: dict, flag_values: dict) -> dict:
    """Merge preset defaults, file values and flags into one flat dict."""
    merged = {**file_values, **{k: v for k, v in flag_values.items() if v is not None}}
    preset_name = merged.get("preset", "desk")
    if preset_name not in PRESETS:
        raise UsageError(f"unknown preset {preset_name!r}; choose from {sorted(PRESETS)}")
    preset = PRESETS[preset_name]
    out = {"preset": preset_name}
    out.update(asdict(preset.train()))
    out.update(asdict(SynthSpec()))
    out.update(asdict(preset.adapt()))
    out.update({k: getattr(preset, k, None) for k in _MODEL_KEYS})
    out["n_layers"] = ModelConfig().n_layers
    out.update(merged)
    return out


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(**{k: cfg[k] for k in _TRAIN_KEYS})


def synth_spec(cfg: dict) -> SynthSpec:
    return SynthSpec(**{k: cfg[k] for k in _SYNTH_KEYS})


def adapt_config(cfg: dict) -> AdaptConfig:
    return AdaptConfig(**{k: cfg[k] for k in _ADAPT_KEYS})


def model_config(cfg: dict, input_dim: int, n_classes: int) -> ModelConfig:
    return ModelConfig(input_dim=input_dim, n_classes=n_classes, **{k: cfg[k] for k in _MODEL_KEYS})


# -- subcommands ----------------------------------------------------------------


def _load(path) -> list[Domain]:
    domains = read_dataset(path)
    if not domains:
        raise ValueError(f"{path} contains no domains")
    return domains


def _sources(domains, exclude):
    if exclude is None:
        return list(domains)
    if exclude not in {d.subject_id for d in domains}:
        raise ValueError(f"subject {exclude} is not in the dataset")
    return [d for d in domains if d.subject_id != exclude]


def cmd_gen_synth(args, cfg) -> int:
    spec = synth_spec(cfg)
    spec.validate()
    domains = gen_synthetic(spec)
    write_dataset(domains, args.out)
    if args.csv:
        write_csv(domains, args.csv)
    log.info("wrote %d domains to %s", len(domains), args.out)
    return 0


def cmd_features(args, cfg) -> int:
    labels = [int(s) for s in args.labels.split(",")]
    if len(labels) != len(args.raw):
        raise UsageError(f"got {len(args.raw)} recordings but {len(labels)} labels")
    xs, ys = [], []
    for path, label in zip(args.raw, labels):
        raw = np.loadtxt(path, delimiter=",", ndmin=2)
        seq = features_from_raw(raw, args.fs, args.step, args.stride)
        log.info("%s: %d sequences of shape %s", path, len(seq), seq.shape[1:])
        xs.append(seq)
        ys.append(np.full(len(seq), label, dtype=np.int64))
    x, y = np.concatenate(xs), np.concatenate(ys)
    if len(x) == 0:
        raise ValueError("recordings are too short to form a single sequence")
    domain = Domain(args.subject, x, y, n_classes=cfg["n_classes"], provenance="imported")
    write_dataset([domain], args.out)
    log.info("wrote %d sequences to %s", len(x), args.out)
    return 0


def cmd_pretrain(args, cfg) -> int:
    domains = _sources(_load(args.data), args.exclude)
    tc = train_config(cfg)
    mc = model_config(cfg, domains[0].feat_dim, domains[0].n_classes)
    params = init_params(mc, tc.seed)
    result = pretrain(params, domains, tc, SplitMix64(tc.seed ^ 0x5EED))
    save_params(params, args.out)
    log.info("pretrain: %s; checkpoint %s", result, args.out)
    return 0


def cmd_train(args, cfg) -> int:
    domains = _sources(_load(args.data), args.exclude)
    tc = train_config(cfg)
    params = load_params(args.init) if args.init else None
    mc = params.config if params else model_config(cfg, domains[0].feat_dim, domains[0].n_classes)
    result = train_loop(domains, tc, mc, params=params, skip_pretrain=args.init is not None)
    save_params(result.params, args.out)
    if args.history:
        with open(args.history, "w", newline="") as fh:
            w = csv.DictWriter(fh, HISTORY_FIELDS, lineterminator="\n")
            w.writeheader()
            for row in result.history:
                w.writerow({k: repr(row[k]) if isinstance(row[k], float) else row[k] for k in HISTORY_FIELDS})
    last = result.history[-1]
    log.info("train: %d iterations, final L_C %.4f; checkpoint %s", last["iteration"], last["l_c"], args.out)
    return 0


def cmd_adapt(args, cfg) -> int:
    domains = _load(args.data)
    target = next((d for d in domains if d.subject_id == args.target), None)
    if target is None:
        raise ValueError(f"subject {args.target} is not in the dataset")
    params = load_params(args.model)
    ac = adapt_config(cfg)
    frozen = accuracy(predict(params, target.x), target.y)
    theta, report = self_adapt(params, target.x, ac.steps, ac.adapt_lr, labels=target.y,
                               use_grl=cfg["use_grl"])
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_adaptation_curve(report, out_dir / "adaptation_curve.csv")
    log.info("subject %d: frozen %.4f adapted %.4f", args.target, frozen, report.final_accuracy)
    return 0


def cmd_loso(args, cfg) -> int:
    domains = _load(args.data)
    mc = model_config(cfg, domains[0].feat_dim, domains[0].n_classes)
    report = loso_evaluate(domains, train_config(cfg), mc, adapt_config(cfg), jobs=args.jobs)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_loso_results(report, out_dir / "loso_results.csv")
    with open(out_dir / "adaptation_curve.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject", "step", "l_c", "accuracy"])
        for fold in report.folds:
            for step, l_c, acc in fold.report.steps:
                w.writerow([fold.subject_id, step, repr(float(l_c)), "" if acc is None else repr(float(acc))])
    with open(out_dir / "loso_frozen.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject", "accuracy"])
        for sid, acc in report.frozen_per_subject:
            w.writerow([sid, repr(float(acc))])
    log.info(
        "LOSO mean %.4f (std %.4f); frozen mean %.4f",
        report.mean_accuracy, report.std_deviation, report.frozen_mean_accuracy,
    )
    return 0


def cmd_selfcheck(args, cfg) -> int:
    from .checks import run_all

    failed = 0
    for name, ok, detail in run_all():
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
        failed += not ok
    return 1 if failed else 0


# -- parser -----------------------------------------------------------------------


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("settings (override --config)")
    g.add_argument("--config", help="key=value settings file")
    for key in all_keys():
        g.add_argument(f"--{key.replace('_', '-')}", dest=key, default=None, metavar="V")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="melada", description="Meta-learned domain adaptation for EEG emotion recognition.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="write the synthetic multi-domain benchmark")
    p.add_argument("--out", required=True)
    p.add_argument("--csv", help="also export a flat CSV")
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("features", help="raw EEG CSV recordings -> MELD dataset")
    p.add_argument("raw", nargs="+", help="CSV files, one column per channel")
    p.add_argument("--fs", type=float, required=True, help="sampling rate in Hz")
    p.add_argument("--subject", type=int, required=True)
    p.add_argument("--labels", required=True, help="comma-separated label per recording")
    p.add_argument("--step", type=int, default=15)
    p.add_argument("--stride", type=int, default=14)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("pretrain", help="supervised warm-up, writes a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--exclude", type=int, help="hold out this subject")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="full meta-training, writes a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--init", help="start from this checkpoint and skip pretraining")
    p.add_argument("--exclude", type=int, help="hold out this subject")
    p.add_argument("--history", help="per-iteration loss CSV")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("adapt", help="self-adapt a checkpoint to one subject")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--target", type=int, required=True)
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("loso", help="leave-one-subject-out evaluation")
    p.add_argument("--data", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=cmd_loso)

    p = sub.add_parser("selfcheck", help="run the built-in invariant checks")
    p.set_defaults(func=cmd_selfcheck)

    for name, sp in sub.choices.items():
        if name != "selfcheck":
            _add_config_flags(sp)
    return parser


def _setup_logging() -> None:
    level = LOG_LEVELS.get(os.environ.get("MELADA_LOG", "info").lower(), logging.INFO)
    root = logging.getLogger()
    for h in [h for h in root.handlers if getattr(h, "_melada", False)]:
        root.removeHandler(h)
    # bind to the current stderr so repeated in-process calls follow redirections
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    handler._melada = True
    root.addHandler(handler)
    root.setLevel(level)


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = {}
        if args.func is not cmd_selfcheck:
            flags = {k: parse_value(k, getattr(args, k)) for k in all_keys() if getattr(args, k, None) is not None}
            file_values = read_config(args.config) if args.config else {}
            cfg = resolve(file_values, flags)
            log.info("resolved config: %s", " ".join(f"{k}={cfg[k]}" for k in sorted(cfg)))
        return args.func(args, cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"melada: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, AutodiffError) as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
