"""Command-line entry point: ``ifr <command> [options]``.

Every command that writes into an output directory also writes
``config.txt`` there, a flat ``key = value`` snapshot of the fully resolved
configuration that ``--config`` accepts back.

Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import math
import sys
from pathlib import Path

import numpy as np
import torch

from . import engine
from .charset import DEFAULT_SYMBOLS
from .checkpoint import UnsupportedFormatError
from .data_synth import (
    DegradeConfig, blur, build_dataset, gaussian_kernel, load_png, resize, save_png,
    standard_sigma,
)
from .engine import EngineConfig, TrainConfig

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
CONFIG_NAME = "config.txt"
STANDARD_STAGES = ("1,2,3", "2,3,4", "1,3,5")

log = logging.getLogger("ifr")


class UsageError(Exception):
    """Bad flags, config keys or values; reported with exit code 2."""


# ----------------------------------------------------------------------------
# flat key = value configuration

def _parse_bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _optional(parse):
    def inner(text):
        return None if text.strip().lower() in ("", "none") else parse(text)
    return inner


def _tuple_of(kind):
    def inner(text):
        return tuple(kind(v) for v in text.replace(" ", "").split(",") if v)
    return inner


def _parser_for(default):
    if isinstance(default, bool):
        return _parse_bool
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return float
    if isinstance(default, tuple):
        return _tuple_of(type(default[0]) if default else float)
    return str


def _section(cls, overrides=None):
    overrides = overrides or {}
    out = {}
    for f in dataclasses.fields(cls):
        default = getattr(cls(), f.name)
        out[f.name] = (default, overrides.get(f.name) or _parser_for(default))
    return out


SYNTH_KEYS = {
    "n": (None, int),
    "charset": (DEFAULT_SYMBOLS, str),
    "max_len": (4, int),
    "seed": (0, int),
    "max_t": (16, int),
    "out": (None, str),
}
ENGINE_KEYS = _section(EngineConfig)
TRAIN_KEYS = _section(TrainConfig)
DEGRADE_KEYS = _section(DegradeConfig, {"sigma": _optional(float)})
RUN_KEYS = {
    "train_manifest": (None, _optional(str)),
    "val_manifest": (None, _optional(str)),
    "out": (None, _optional(str)),
    # degradation mix for validation and evaluation; none reuses mix_probs
    "eval_mix_probs": (None, _optional(_tuple_of(float))),
    "checkpoint": (None, _optional(str)),
    "data": (None, _optional(str)),
    "steps": (None, _optional(int)),
    "max_steps": (4, int),
    "kind": (None, _optional(str)),
    "range": (None, _optional(str)),
}
MODEL_KEYS = {**ENGINE_KEYS, **TRAIN_KEYS, **DEGRADE_KEYS, **RUN_KEYS}


def format_value(value):
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def read_config_file(path, keys):
    """Parse ``key = value`` lines; ``#`` starts a comment. Returns raw strings."""
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    raw = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        body = line.split("#", 1)[0].strip() if not line.lstrip().startswith("#") else ""
        if not body:
            continue
        if "=" not in body:
            raise UsageError(f"{path}:{lineno}: expected 'key = value', got {line.strip()!r}")
        key, value = (s.strip() for s in body.split("=", 1))
        if key not in keys:
            raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
        raw[key] = value
    return raw


def resolve(keys, config_file=None, sets=(), flags=None):
    """Defaults, then the config file, then ``--set`` pairs, then explicit flags."""
    raw = {}
    if config_file:
        raw.update(read_config_file(config_file, keys))
    for item in sets:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = (s.strip() for s in item.split("=", 1))
        if key not in keys:
            raise UsageError(f"unknown config key {key!r}")
        raw[key] = value
    conf = {k: default for k, (default, _) in keys.items()}
    for key, value in raw.items():
        try:
            conf[key] = keys[key][1](value)
        except ValueError as exc:
            raise UsageError(f"bad value for {key!r}: {exc}") from None
    for key, value in (flags or {}).items():
        if value is not None:
            conf[key] = value
    return conf


def write_snapshot(conf, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"{k} = {format_value(v)}" for k, v in conf.items()]
    path = out / CONFIG_NAME
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _build(cls, keys, conf):
    try:
        return cls(**{k: conf[k] for k in keys})
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def engine_config(conf):
    return _build(EngineConfig, ENGINE_KEYS, conf)


def train_config(conf):
    return _build(TrainConfig, TRAIN_KEYS, conf)


def degrade_config(conf, eval_mix=False):
    d = {k: conf[k] for k in DEGRADE_KEYS}
    if eval_mix and conf.get("eval_mix_probs") is not None:
        d["mix_probs"] = conf["eval_mix_probs"]
    try:
        return DegradeConfig(**d)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


# ----------------------------------------------------------------------------
# helpers

def _require_file(path, what):
    if path is None:
        raise UsageError(f"{what} is required")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {p}")
    return p


def _require_out(conf):
    if not conf.get("out"):
        raise UsageError("--out is required")
    return Path(conf["out"])


def _parse_stages(text):
    try:
        return tuple(int(s) for s in text.split(","))
    except ValueError:
        raise UsageError(f"stages must be comma-separated integers, got {text!r}") from None


def parse_range(text, integer=False):
    """Inclusive ``start:stop:step`` grid, e.g. ``3:21:2`` or ``1:4:0.5``."""
    parts = text.split(":")
    if len(parts) != 3:
        raise UsageError(f"range must look like start:stop:step, got {text!r}")
    try:
        start, stop, step = (float(p) for p in parts)
    except ValueError:
        raise UsageError(f"range must contain numbers, got {text!r}") from None
    if not (math.isfinite(start) and math.isfinite(stop) and math.isfinite(step)):
        raise UsageError(f"range must be finite, got {text!r}")
    if step <= 0 or stop < start:
        raise UsageError(f"range needs step > 0 and stop >= start, got {text!r}")
    count = int(math.floor((stop - start) / step + 1e-9)) + 1
    values = [round(start + i * step, 10) for i in range(count)]
    if integer:
        if any(v != int(v) for v in values):
            raise UsageError(f"range must contain integers only, got {text!r}")
        values = [int(v) for v in values]
    return values


def _write_rows(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return Path(path)


def _print_report(report, prefix=""):
    for r in report.rows:
        print(f"{prefix}step {r.step}: accuracy {r.accuracy:.4f}  ssim {r.ssim:.4f}  "
              f"psnr {r.psnr:.2f}")


def _load_model(path):
    p = _require_file(path, "checkpoint")
    model, cfg = engine.load_checkpoint(p)
    model.eval()
    return model, cfg


def _train_run(conf, out_dir, **engine_overrides):
    cfg = engine_config({**conf, **engine_overrides})
    sched = train_config(conf)
    train_manifest = _require_file(conf["train_manifest"], "training manifest")
    val = conf["val_manifest"]
    if val is not None:
        val = _require_file(val, "validation manifest")
    snapshot = {**conf, **engine_overrides, "out": str(out_dir)}
    write_snapshot(snapshot, out_dir)

    def progress(row):
        accs = [row[k] for k in row if k.startswith("val_acc")]
        tail = f"  val_acc {accs[-1]:.4f}" if accs else ""
        print(f"epoch {row['epoch']}: lr {row['lr']:.4g}  rec {row['rec_loss']:.4f}  "
              f"pixel {row['pixel_loss']:.4f}  total {row['total_loss']:.4f}{tail}", flush=True)

    return engine.train(cfg, sched, train_manifest, val, out_dir, degrade_config(conf),
                        degrade_config(conf, eval_mix=True), progress=progress), cfg


# ----------------------------------------------------------------------------
# commands

def cmd_synth(args):
    conf = resolve(SYNTH_KEYS, args.config, args.set, {
        "n": args.n, "charset": args.charset, "max_len": args.max_len, "seed": args.seed,
        "max_t": args.max_t, "out": args.out})
    if conf["n"] is None or conf["n"] < 1:
        raise UsageError(f"--n must be a positive integer, got {conf['n']}")
    out = _require_out(conf)
    try:
        manifest = build_dataset(conf["n"], conf["charset"], conf["max_len"], conf["seed"], out,
                                 conf["max_t"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    write_snapshot(conf, out)
    print(f"wrote {conf['n']} samples to {manifest}")
    return EXIT_OK


def _model_flags(args):
    flags = {k: getattr(args, k, None) for k in (
        "train_manifest", "val_manifest", "out", "epochs", "batch_size", "seed", "c_str", "c_ir",
        "train_steps", "test_steps", "charset", "rrf", "lam", "max_t")}
    if getattr(args, "stages", None) and isinstance(args.stages, str):
        flags["fusion"] = _parse_stages(args.stages)
    return flags


def cmd_train(args):
    conf = resolve(MODEL_KEYS, args.config, args.set, _model_flags(args))
    out = _require_out(conf)
    result, _ = _train_run(conf, out)
    print(f"best checkpoint: {result.best}")
    return EXIT_OK


def _eval_conf(args, *names):
    flags = {"out": args.out}
    flags.update({n: getattr(args, n, None) for n in ("checkpoint", "data", "steps") + names})
    return resolve(MODEL_KEYS, args.config, args.set, flags)


def _steps(conf, cfg):
    steps = conf["steps"] if conf["steps"] is not None else cfg.test_steps
    if steps < 1:
        raise UsageError("--steps must be >= 1")
    return steps


def cmd_eval(args):
    conf = _eval_conf(args)
    out = _require_out(conf)
    model, cfg = _load_model(conf["checkpoint"])
    data = _require_file(conf["data"], "manifest")
    steps = _steps(conf, cfg)
    report = engine.evaluate(model, data, cfg, steps, degrade_config(conf, eval_mix=True))
    write_snapshot({**conf, **cfg.to_dict(), "steps": steps}, out)
    engine.write_eval_csv(report, out / "report.csv")
    print(f"input: ssim {report.input_ssim:.4f}  psnr {report.input_psnr:.2f}  (n={report.n})")
    _print_report(report)
    return EXIT_OK


def _load_demo_image(path, blur_size=0):
    img = load_png(_require_file(path, "image"))
    if img.shape != (32, 128):
        img = resize(img, 32, 128)
    if blur_size:
        if blur_size < 1 or blur_size % 2 == 0:
            raise UsageError(f"--blur must be an odd positive kernel size, got {blur_size}")
        img = blur(img, gaussian_kernel(blur_size, standard_sigma(blur_size)))
    return img


def demo(model, img, steps):
    """Run ``steps`` iterations on one image; returns the trace."""
    x = torch.from_numpy(np.asarray(img, dtype=np.float32)[None, None])
    with torch.no_grad():
        return engine.iterate(model, x, steps)


def cmd_demo(args):
    if args.steps < 1:
        raise UsageError("--steps must be >= 1")
    model, cfg = _load_model(args.checkpoint)
    img = _load_demo_image(args.image, args.blur)
    out = Path(args.out)
    write_snapshot({**cfg.to_dict(), "checkpoint": str(args.checkpoint), "image": str(args.image),
                    "steps": args.steps, "blur": args.blur}, out)
    trace = demo(model, img, args.steps)
    for k, step in enumerate(trace.steps, 1):
        save_png(out / f"step_{k}.png", step.restored[0, 0].double().numpy())
        r = step.recognitions[0]
        print(f"step {k}: {r.text!r} (confidence {math.exp(r.confidence):.4f}, {r.direction})")
    return EXIT_OK


def cmd_ablate_steps(args):
    flags = {**_model_flags(args), "checkpoint": args.checkpoint, "data": args.data,
             "max_steps": args.max_steps}
    conf = resolve(MODEL_KEYS, args.config, args.set, flags)
    out = _require_out(conf)
    max_steps = conf["max_steps"]
    if max_steps < 1:
        raise UsageError("--max-steps must be >= 1")
    data = _require_file(conf["data"], "manifest")
    deg = degrade_config(conf, eval_mix=True)
    rows = []
    if args.train_steps_grid:
        # one model per training step count, each evaluated at 1..max_steps
        grid = [int(v) for v in args.train_steps_grid.split(",")]
        for n in grid:
            result, cfg = _train_run(conf, out / f"train_steps_{n}", train_steps=n)
            report = engine.evaluate(result.model, data, cfg, max_steps, deg)
            rows += [(n, r.step, r.accuracy, r.ssim, r.psnr) for r in report.rows]
            _print_report(report, f"train_steps {n} ")
        header = ("train_steps", "step", "accuracy", "ssim", "psnr")
    elif conf["checkpoint"] is None:
        raise UsageError("ablate steps needs --checkpoint or --train-steps-grid")
    else:
        model, cfg = _load_model(conf["checkpoint"])
        report = engine.evaluate(model, data, cfg, max_steps, deg)
        rows = [(r.step, r.accuracy, r.ssim, r.psnr) for r in report.rows]
        header = engine.EVAL_COLUMNS
        _print_report(report)
    write_snapshot(conf, out)
    _write_rows(out / "ablate_steps.csv", header, rows)
    return EXIT_OK


def cmd_ablate_fusion(args):
    conf = resolve(MODEL_KEYS, args.config, args.set, _model_flags(args))
    out = _require_out(conf)
    data = _require_file(args.data or conf["val_manifest"], "evaluation manifest")
    deg = degrade_config(conf, eval_mix=True)
    rows = []
    for spec in args.stages or ["1,3,5"]:
        stages = _parse_stages(spec)
        tag = "-".join(str(s) for s in sorted(stages))
        result, cfg = _train_run(conf, out / f"stages_{tag}", fusion=stages)
        report = engine.evaluate(result.model, data, cfg, cfg.test_steps, deg)
        rows += [(tag, r.step, r.accuracy, r.ssim, r.psnr) for r in report.rows]
        _print_report(report, f"stages {tag} ")
    _write_rows(out / "ablate_fusion.csv", ("stages", "step", "accuracy", "ssim", "psnr"), rows)
    return EXIT_OK


def cmd_ablate_rrf(args):
    conf = resolve(MODEL_KEYS, args.config, args.set, _model_flags(args))
    out = _require_out(conf)
    data = _require_file(args.data or conf["val_manifest"], "evaluation manifest")
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    if not modes or any(m not in engine.RRF_MODES for m in modes):
        raise UsageError(f"--modes must list values from {engine.RRF_MODES}, got {args.modes!r}")
    deg = degrade_config(conf, eval_mix=True)
    reports = {}
    for mode in modes:
        result, cfg = _train_run(conf, out / f"rrf_{mode}", rrf=mode)
        reports[mode] = engine.evaluate(result.model, data, cfg, cfg.test_steps, deg)
        _print_report(reports[mode], f"rrf {mode} ")
    base = reports[modes[0]]
    rows = []
    for mode in modes:
        for r, b in zip(reports[mode].rows, base.rows):
            rows.append((mode, r.step, r.accuracy, r.ssim, r.psnr, r.accuracy - b.accuracy))
    _write_rows(out / "ablate_rrf.csv",
                ("rrf", "step", "accuracy", "ssim", "psnr", "delta_accuracy"), rows)
    return EXIT_OK


def sweep(model, cfg, data, kind, values, steps=None, base=DegradeConfig()):
    """Evaluate under one degradation per value; returns ``[(value, report), ...]``."""
    steps = steps or cfg.test_steps
    if not isinstance(data, engine.PairedDataset):
        data = engine.PairedDataset(data)
    out = []
    for v in values:
        if kind == "blur":
            deg = dataclasses.replace(base, kernel_sizes=(int(v),), mix_probs=(0.0, 1.0, 0.0, 0.0))
        elif kind == "ratio":
            deg = dataclasses.replace(base, ratio_range=(float(v), float(v)),
                                      mix_probs=(0.0, 0.0, 1.0, 0.0))
        else:
            raise ValueError(f"unknown sweep kind {kind!r}")
        out.append((v, engine.evaluate(model, data, cfg, steps, deg)))
    return out


def cmd_sweep(args):
    conf = _eval_conf(args, "kind", "range")
    out = _require_out(conf)
    kind, grid = conf["kind"], conf["range"]
    if kind not in ("blur", "ratio"):
        raise UsageError(f"--kind must be blur or ratio, got {kind!r}")
    if grid is None:
        raise UsageError("--range is required")
    values = parse_range(grid, integer=kind == "blur")
    if kind == "blur" and any(v < 1 or v % 2 == 0 for v in values):
        raise UsageError(f"blur kernel sizes must be odd and positive, got {values}")
    if kind == "ratio" and any(v < 1 for v in values):
        raise UsageError(f"down-up ratios must be >= 1, got {values}")
    model, cfg = _load_model(conf["checkpoint"])
    data = engine.PairedDataset(_require_file(conf["data"], "manifest"))
    steps = _steps(conf, cfg)
    write_snapshot({**conf, **cfg.to_dict(), "steps": steps}, out)
    base = degrade_config(conf)
    clean = engine.evaluate(model, data, cfg, steps, dataclasses.replace(
        base, mix_probs=(1.0, 0.0, 0.0, 0.0)))
    print(f"clean: accuracy {clean.final().accuracy:.4f}")
    rows = []
    for v, report in sweep(model, cfg, data, kind, values, steps, base):
        r = report.final()
        rows.append((kind, v, r.accuracy, r.ssim, r.psnr))
        print(f"{kind} {v}: accuracy {r.accuracy:.4f}  ssim {r.ssim:.4f}  psnr {r.psnr:.2f}")
    _write_rows(out / f"sweep_{kind}.csv", ("kind", "value", "accuracy", "ssim", "psnr"),
                rows)
    return EXIT_OK


# ----------------------------------------------------------------------------
# argument parsing

def _common(p):
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one configuration key (repeatable)")
    p.add_argument("--out", help="output directory")


def _model_args(p):
    p.add_argument("--train", dest="train_manifest", help="training manifest")
    p.add_argument("--val", dest="val_manifest", help="validation manifest")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--c-str", type=int)
    p.add_argument("--c-ir", type=int)
    p.add_argument("--max-t", type=int)
    p.add_argument("--train-steps", type=int)
    p.add_argument("--test-steps", type=int)
    p.add_argument("--charset")
    p.add_argument("--rrf", choices=engine.RRF_MODES)
    p.add_argument("--lam", type=float)


def build_parser():
    ap = argparse.ArgumentParser(prog="ifr", description=__doc__.split("\n\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a paired toy dataset")
    _common(p)
    p.add_argument("--n", type=int)
    p.add_argument("--charset")
    p.add_argument("--max-len", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--max-t", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    _common(p)
    _model_args(p)
    p.add_argument("--stages", help="fusion stages, e.g. 1,3,5")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="per-step accuracy, SSIM and PSNR of a checkpoint")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--data", help="manifest to evaluate")
    p.add_argument("--steps", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("demo", help="restore and recognize a single image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--steps", type=int, default=3)
    p.add_argument("--blur", type=int, default=0, help="blur the input with this kernel size")
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_demo)

    p = sub.add_parser("ablate", help="ablation studies")
    abl = p.add_subparsers(dest="ablation", required=True)
    a = abl.add_parser("steps", help="accuracy and image quality per test step")
    _common(a)
    _model_args(a)
    a.add_argument("--checkpoint")
    a.add_argument("--data")
    a.add_argument("--max-steps", type=int)
    a.add_argument("--train-steps-grid", help="train one model per listed step count, e.g. 1,2,3")
    a.set_defaults(func=cmd_ablate_steps)
    a = abl.add_parser("fusion", help="train and compare fusion stage choices")
    _common(a)
    _model_args(a)
    a.add_argument("--data", help="evaluation manifest (defaults to --val)")
    a.add_argument("--stages", action="append",
                   help=f"fusion stages (repeatable); standard choices: {' '.join(STANDARD_STAGES)}")
    a.set_defaults(func=cmd_ablate_fusion)
    a = abl.add_parser("rrf", help="train with and without recognizer features in the fusion")
    _common(a)
    _model_args(a)
    a.add_argument("--data", help="evaluation manifest (defaults to --val)")
    a.add_argument("--modes", default="on,off", help="comma list from on,detach,off")
    a.set_defaults(func=cmd_ablate_rrf)

    p = sub.add_parser("sweep", help="accuracy against degradation severity")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--kind", choices=("blur", "ratio"))
    p.add_argument("--range", help="inclusive start:stop:step")
    p.add_argument("--steps", type=int)
    p.set_defaults(func=cmd_sweep)
    return ap


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"ifr {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except UnsupportedFormatError as exc:
        print(f"ifr {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"ifr {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
