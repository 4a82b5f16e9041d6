"""Command-line entry point: ``noise2norm {synth-data,train,infer,eval,ablate}``.

Every subcommand accepts ``--config run.json``, repeated ``--set key=value``
overrides and ``--seed N`` (sets the split, init and noise seeds together).
All arguments, paths and config values are validated before anything is
written. On failure a single JSON line ``{"error": <kind>, "message": ...}``
goes to stderr and the exit code is nonzero.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from .config import RunConfig, model_fingerprint, parse_override
from .data_io import (IMAGE_SUFFIXES, RawImage, SyntheticSpec, atomic_write, load_image, make_synthetic_dataset,
                      render_heatmap, save_png, scan_dataset)
from .errors import (CheckpointError, ConfigError, DatasetError, InvalidArgumentError, Noise2NormError,
                     NonFiniteError, ShapeError)
from .evaluation import (ablate, checkpoint_fingerprint, evaluate, infer_maps, path_seed, sweep_csv,
                         validate_sweep)
from .training import load_checkpoint, save_checkpoint, train

log = logging.getLogger("noise2norm")

EXIT_CODES = {ConfigError: 2, DatasetError: 3, CheckpointError: 4, NonFiniteError: 5, ShapeError: 6}
CHECKPOINT_NAME = "model.n2n"
EPOCH_COLUMNS = ("epoch", "train_loss", "val_loss", "lr", "config_hash")


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # one-line errors instead of argparse's usage dump
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one dotted config key (repeatable)")
    common.add_argument("--seed", type=int, help="set split, init and noise seeds at once")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    p = _Parser(prog="noise2norm", description="Noise-to-norm anomaly detection.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth-data", parents=[common], help="write the seeded synthetic dataset")
    s.add_argument("--root", help="dataset root (default: data.root)")
    s.add_argument("--data-seed", type=int, default=SyntheticSpec.seed)
    s.add_argument("--n-train", type=int, default=SyntheticSpec.n_train)
    s.add_argument("--n-test-good", type=int, default=SyntheticSpec.n_test_good)
    s.add_argument("--n-test-defect", type=int, default=SyntheticSpec.n_test_defect)
    s.add_argument("--size", type=int, help="image side (default: train.image_size)")

    t = sub.add_parser("train", parents=[common], help="train and write checkpoint + epoch CSV")
    t.add_argument("--out", help="output directory (default: output.dir)")

    i = sub.add_parser("infer", parents=[common], help="heatmaps and scores for images")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("inputs", nargs="+", help="image files or directories")
    i.add_argument("--out", help="output directory (default: output.dir/infer)")

    e = sub.add_parser("eval", parents=[common], help="image/pixel AUROC on the test split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--out", help="report CSV path (default: output.dir/report.csv)")
    e.add_argument("--allow-config-drift", action="store_true",
                   help="accept a checkpoint whose model config differs from the runtime config")

    a = sub.add_parser("ablate", parents=[common], help="train + eval once per swept value")
    a.add_argument("--sweep", action="append", default=[], metavar="KEY=V1,V2,...",
                   help="values for one key, comma separated (repeatable)")
    a.add_argument("--out", help="sweep CSV path (default: output.dir/sweep.csv)")
    return p


def load_run_config(args) -> RunConfig:
    cfg = RunConfig.from_json_file(args.config) if args.config else RunConfig()
    flat = dict(parse_override(item) for item in args.overrides)
    if flat:
        cfg = cfg.with_overrides(**flat)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def parse_sweep(items: Sequence[str]) -> dict:
    sweep = {}
    for item in items:
        key, sep, raw = item.partition("=")
        if not sep or not key or not raw:
            raise ConfigError(f"sweep {item!r} is not KEY=V1,V2,...")
        values = []
        for tok in raw.split(","):
            try:
                values.append(json.loads(tok))
            except json.JSONDecodeError:
                values.append(tok)
        sweep[key.strip()] = values
    return sweep


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _write_text(path: Path, text: str) -> None:
    atomic_write(path, text.encode("utf-8"))


def _collect_images(inputs: Sequence[str]) -> list[Path]:
    found = []
    for item in inputs:
        p = Path(item)
        if p.is_dir():
            found.extend(sorted(q for q in p.rglob("*") if q.suffix.lower() in IMAGE_SUFFIXES))
        elif p.is_file():
            found.append(p)
        else:
            raise DatasetError(f"input {item} does not exist")
    if not found:
        raise DatasetError("no input images found")
    return found


def _check_drift(ckpt, cfg: RunConfig, allow: bool) -> None:
    want, have = model_fingerprint(cfg.model), model_fingerprint(ckpt.model)
    if want == have:
        return
    diff = {f.name: (getattr(ckpt.model, f.name), getattr(cfg.model, f.name))
            for f in dataclasses.fields(cfg.model) if getattr(ckpt.model, f.name) != getattr(cfg.model, f.name)}
    msg = f"checkpoint model config {have} differs from runtime {want}: {diff}"
    if not allow:
        raise ConfigError(msg + " (pass --allow-config-drift to proceed)")
    log.warning(msg)


# ------------------------------------------------------------------ commands

def cmd_synth_data(args, cfg: RunConfig) -> int:
    spec = SyntheticSpec(category=cfg.data_category, n_train=args.n_train, n_test_good=args.n_test_good,
                         n_test_defect=args.n_test_defect, size=args.size or cfg.train.image_size,
                         seed=args.data_seed)
    if min(spec.n_train, spec.n_test_good, spec.n_test_defect) < 1 or spec.size < 8:
        raise ConfigError("synth-data needs at least one image per split and size >= 8")
    base = make_synthetic_dataset(args.root or cfg.data_root, spec)
    print(f"wrote synthetic dataset to {base}")
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    index = scan_dataset(cfg.data_root, cfg.data_category)
    images = [load_image(p, cfg.train.image_size) for p in index.train]
    out = Path(args.out or cfg.output_dir)
    if out.exists() and not out.is_dir():
        raise ConfigError(f"output {out} exists and is not a directory")
    fp = cfg.fingerprint()
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "epochs.csv", "w", newline="", encoding="utf-8") as fh:
        log_csv = csv.writer(fh, lineterminator="\n")
        log_csv.writerow(EPOCH_COLUMNS)

        def on_epoch(r):  # one row per epoch, flushed so a crash keeps the history
            log_csv.writerow([r.epoch, f"{r.train_loss:.8f}", f"{r.val_loss:.8f}", f"{r.lr:.8e}", fp])
            fh.flush()

        ckpt = train(images, cfg.model, cfg.noise, cfg.ssim, cfg.loss, cfg.train, on_epoch=on_epoch)
    ckpt.meta["run_config_hash"] = fp
    save_checkpoint(ckpt, str(out / CHECKPOINT_NAME))
    print(f"trained {ckpt.meta['epochs_run']} epochs, best epoch {ckpt.meta['best_epoch']} "
          f"(val {ckpt.meta['best_val_loss']:.5f}); wrote {out / CHECKPOINT_NAME}")
    return 0


def cmd_infer(args, cfg: RunConfig) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    paths = _collect_images(args.inputs)
    out = Path(args.out or Path(cfg.output_dir) / "infer")
    size = cfg.train.image_size
    images = [load_image(p, size) for p in paths]
    seeds = [path_seed(p.name, cfg.train.noise_seed) for p in paths]
    maps, _ = infer_maps(ckpt, images, seeds)
    fp = checkpoint_fingerprint(ckpt)
    rows, used = [], set()
    for p, img, amap in zip(paths, images, maps):
        stem = p.stem
        while stem in used:  # same file name in different input directories
            stem += "_"
        used.add(stem)
        panels = render_heatmap(amap, RawImage.from_float(img.data[0].transpose(1, 2, 0)))
        save_png(out / f"{stem}_heatmap.png", panels.heatmap.pixels)
        save_png(out / f"{stem}_overlay.png", panels.overlay.pixels)
        save_png(out / f"{stem}_region.png", panels.region.pixels)
        rows.append([str(p), f"{float(amap.max()):.8f}", fp])
    _write_text(out / "scores.csv", _csv_text(("path", "score", "config_hash"), rows))
    print(f"scored {len(paths)} images; wrote {out}")
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    _check_drift(ckpt, cfg, args.allow_config_drift)
    index = scan_dataset(cfg.data_root, cfg.data_category)
    report = evaluate(ckpt, index, cfg.train.image_size, cfg.train.noise_seed)
    out = Path(args.out or Path(cfg.output_dir) / "report.csv")
    _write_text(out, report.to_csv())
    print(report.pretty())
    return 0


def cmd_ablate(args, cfg: RunConfig) -> int:
    sweep = parse_sweep(args.sweep)
    validate_sweep(cfg, sweep)
    index = scan_dataset(cfg.data_root, cfg.data_category)
    rows = ablate(cfg, sweep, index)
    out = Path(args.out or Path(cfg.output_dir) / "sweep.csv")
    _write_text(out, sweep_csv(rows))
    for r in rows:
        print(f"{r.parameter}={r.value}: {r.report.pretty()}")
    return 0


COMMANDS = {"synth-data": cmd_synth_data, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval,
            "ablate": cmd_ablate}


def _error_line(exc: BaseException) -> str:
    return json.dumps({"error": type(exc).__name__, "message": str(exc)})


def run(argv: Sequence[str] | None = None) -> int:
    """Parse ``argv``, run one subcommand and return the process exit code."""
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = load_run_config(args)
        return COMMANDS[args.command](args, cfg)
    except Noise2NormError as e:
        print(_error_line(e), file=sys.stderr)
        return next((code for cls, code in EXIT_CODES.items() if isinstance(e, cls)), 1)
    except (InvalidArgumentError, ValueError, OSError) as e:
        print(_error_line(e), file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())
