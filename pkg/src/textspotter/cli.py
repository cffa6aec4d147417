"""Command-line interface: ``textspotter {generate,train,eval,infer,visualize}``.

Every command accepts ``--config``, ``--set key=value`` (repeatable),
``--seed`` and ``--overwrite``, writes its artifacts plus one
``manifest.json`` into its output directory, and on failure prints a single
``error: <kind>: <message>`` line to stderr with a nonzero exit code.
"""
from __future__ import annotations

import argparse
import csv
import datetime as dt
import json
import logging
import os
import sys
from pathlib import Path

from .checkpoint import CheckpointError, load_checkpoint
from .config import Config, ConfigError, dump_config, load_config

OUTPUT_ROOT_ENV = "TEXTSPOTTER_OUTPUT_ROOT"
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")

EXIT_CODES = {"usage": 2, "config": 3, "data": 4, "checkpoint": 5, "output": 6, "runtime": 7}

logger = logging.getLogger("textspotter")


class CLIError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


class Run:
    """Output directory bookkeeping plus the manifest written at the end."""

    def __init__(self, args, config: Config):
        self.args = args
        self.config = config
        self.started = _now()
        self.artifacts: list[str] = []
        out = args.out
        if out is None:
            root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
            out = root / f"{args.command}-{config.digest()[:8]}-seed{config.train.seed}"
        self.out = Path(out)
        if self.out.exists() and any(self.out.iterdir()) and not args.overwrite:
            raise CLIError("output", f"{self.out} is not empty; pass --overwrite to reuse it")
        self.out.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        p = self.out / name
        p.parent.mkdir(parents=True, exist_ok=True)
        self.artifacts.append(name)
        return p

    def finish(self, extra: dict | None = None) -> Path:
        manifest = {
            "command": self.args.command,
            "argv": self.args.argv,
            "config_path": str(self.args.config) if self.args.config else None,
            "config_hash": self.config.digest(),
            "config": self.config.to_dict(),
            "seed": self.config.train.seed,
            "output_dir": str(self.out),
            "started_at": self.started,
            "finished_at": _now(),
            "artifacts": sorted(set(self.artifacts)),
            **(extra or {}),
        }
        path = self.out / "manifest.json"
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return path


def _resolve_config(args) -> Config:
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"train.seed={args.seed}")
    return load_config(args.config, overrides)


def _require_dir(path, what: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise CLIError("data", f"{what} {p} is not a directory")
    return p


def _read_jsonl(path) -> list[dict]:
    p = Path(path)
    if not p.is_file():
        raise CLIError("data", f"{p} does not exist")
    try:
        return [json.loads(line) for line in p.read_text(encoding="utf-8").splitlines() if line.strip()]
    except json.JSONDecodeError as exc:
        raise CLIError("data", f"{p} is not valid JSON lines: {exc}") from exc


def _write_jsonl(path: Path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _load_model(args, config: Config):
    expected = config if (args.config or args.set) else None
    try:
        model, stored, _ = load_checkpoint(args.checkpoint, expected)
    except CheckpointError as exc:
        raise CLIError("checkpoint", str(exc)) from exc
    if expected is None:
        # no explicit config: run with the checkpoint's own settings
        stored.train.seed = config.train.seed
        config = stored
    return model, config


def cmd_generate(args) -> int:
    from .data.io import write_dataset
    from .data.synth import generate_sample, sample_rng

    config = _resolve_config(args)
    if args.count < 1:
        raise CLIError("usage", "--count must be positive")
    run = Run(args, config)
    seed = config.train.seed
    samples = (generate_sample(sample_rng(seed, i), config.data) for i in range(args.count))
    records = write_dataset(samples, run.out)
    run.artifacts += ["annotations.jsonl"] + [r["image"] for r in records]
    run.path("config.yaml").write_text(dump_config(config))
    run.finish({"count": args.count})
    print(f"wrote {len(records)} samples to {run.out}")
    return 0


def cmd_train(args) -> int:
    from .data.io import read_dataset
    from .plotting import plot_loss_curve
    from .training import NonFiniteLossError, fit

    config = _resolve_config(args)
    samples = read_dataset(_require_dir(args.data, "dataset"))
    if not samples:
        raise CLIError("data", f"dataset {args.data} is empty")
    run = Run(args, config)
    run.path("config.yaml").write_text(dump_config(config))
    try:
        result = fit(config, samples, run.out)
    except NonFiniteLossError as exc:
        raise CLIError("runtime", str(exc)) from exc
    run.artifacts += ["metrics.jsonl"] + [p.name for p in result.checkpoints.values()]
    if result.history:
        plot_loss_curve(result.history, run.path("loss_curve.png"))
    final = result.history[-1]["total"] if result.history else None
    run.finish({"final_loss": final, "best_e2e_hmean": result.best_hmean})
    print(f"trained {config.train.iterations} steps; checkpoint {run.out / 'last.npz'}")
    return 0


def _prediction_lookup(records: list[dict]) -> dict[str, list[dict]]:
    out = {}
    for rec in records:
        if "image" not in rec or "predictions" not in rec:
            raise CLIError("data", "prediction records need 'image' and 'predictions' fields")
        out[rec["image"]] = rec["predictions"]
    return out


def _write_eval_csv(path: Path, report) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["mode", "precision", "recall", "hmean"])
        d = report.detection
        writer.writerow(["detection", f"{d.precision:.6f}", f"{d.recall:.6f}", f"{d.hmean:.6f}"])
        for name, s in report.end_to_end.items():
            writer.writerow([f"e2e_{name}", f"{s.precision:.6f}", f"{s.recall:.6f}", f"{s.hmean:.6f}"])
        writer.writerow(["one_minus_ned", "", "", f"{report.one_minus_ned:.6f}"])


def cmd_eval(args) -> int:
    from .data.io import read_annotations, read_dataset, record_instances
    from .evaluation import evaluate_predictions, full_lexicon, read_lexicon, strong_lexicons
    from .training import predict, predictions_record

    if (args.checkpoint is None) == (args.predictions is None):
        raise CLIError("usage", "pass exactly one of --checkpoint or --predictions")
    config = _resolve_config(args)
    data_dir = _require_dir(args.data, "dataset")
    records = read_annotations(data_dir)
    gts = [record_instances(r) for r in records]
    lexicons = {}
    if full_lexicon(gts):
        lexicons = {"full": full_lexicon(gts), "strong": strong_lexicons(gts)}
    if args.lexicon:
        try:
            lexicons[args.lexicon_mode] = read_lexicon(args.lexicon)
        except (OSError, ValueError) as exc:
            raise CLIError("data", str(exc)) from exc
    if args.checkpoint is not None:
        model, config = _load_model(args, config)
        run = Run(args, config)
        samples = read_dataset(data_dir)
        preds = [predict(model, s.image, config) for s in samples]
        pred_records = [predictions_record(p, r["image"]) for p, r in zip(preds, records)]
        _write_jsonl(run.path("predictions.jsonl"), pred_records)
        preds = [r["predictions"] for r in pred_records]
    else:
        run = Run(args, config)
        lookup = _prediction_lookup(_read_jsonl(args.predictions))
        preds = [lookup.get(r["image"], []) for r in records]
    report = evaluate_predictions(preds, gts, lexicons, args.iou)
    run.path("report.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    _write_eval_csv(run.path("metrics.csv"), report)
    run.finish()
    e2e = report.end_to_end["none"]
    print(f"detection H={report.detection.hmean:.4f} e2e H={e2e.hmean:.4f} 1-NED={report.one_minus_ned:.4f}")
    return 0


def _list_images(path: Path) -> tuple[Path, list[str]]:
    if path.is_file():
        return path.parent, [path.name]
    if not path.is_dir():
        raise CLIError("data", f"{path} does not exist")
    if (path / "images").is_dir():
        names = sorted(f"images/{p.name}" for p in (path / "images").iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    else:
        names = sorted(p.name for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not names:
        raise CLIError("data", f"no images found in {path}")
    return path, names


def cmd_infer(args) -> int:
    from .data.io import load_image
    from .training import predict, predictions_record

    config = _resolve_config(args)
    model, config = _load_model(args, config)
    root, names = _list_images(Path(args.input))
    if args.threshold is not None:
        config.train.score_threshold = args.threshold
    run = Run(args, config)
    records = [predictions_record(predict(model, load_image(root / n), config), n) for n in names]
    _write_jsonl(run.path("predictions.jsonl"), records)
    run.finish({"images": len(names)})
    print(f"wrote predictions for {len(names)} images to {run.out / 'predictions.jsonl'}")
    return 0


def cmd_visualize(args) -> int:
    from .data.io import load_image, read_annotations, record_instances
    from .plotting import draw_overlay

    config = _resolve_config(args)
    lookup = _prediction_lookup(_read_jsonl(args.predictions))
    images = _require_dir(args.images, "image directory")
    gt = {}
    if args.annotations:
        gt = {r["image"]: record_instances(r) for r in read_annotations(_require_dir(args.annotations, "dataset"))}
    run = Run(args, config)
    for name in sorted(lookup):
        src = images / name
        if not src.is_file():
            raise CLIError("data", f"image {src} listed in predictions does not exist")
        out_name = "overlays/" + Path(name).with_suffix(".png").name
        draw_overlay(load_image(src), lookup[name], run.path(out_name), gt.get(name), title=name)
    run.finish({"images": len(lookup)})
    print(f"wrote {len(lookup)} overlays to {run.out / 'overlays'}")
    return 0


class _Parser(argparse.ArgumentParser):
    """Reports argument errors as a :class:`CLIError` instead of a multi-line usage dump."""

    def error(self, message):
        raise CLIError("usage", message)


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None, help="YAML config file")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (dotted path)")
    parser.add_argument("--seed", type=int, default=None, help="overrides train.seed")
    parser.add_argument("--overwrite", action="store_true", help="allow writing into a non-empty output dir")
    parser.add_argument("--out", type=Path, default=None, help=f"output directory (default under ${OUTPUT_ROOT_ENV})")
    parser.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="textspotter", description="Scene text spotting with task-aware queries")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="render a synthetic dataset")
    _common(p)
    p.add_argument("--count", type=int, required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train on a dataset directory")
    _common(p)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint or a prediction file against annotations")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--predictions", default=None)
    p.add_argument("--lexicon", default=None, help="word list, one per line")
    p.add_argument("--lexicon-mode", default="generic", help="report key for --lexicon")
    p.add_argument("--iou", type=float, default=0.5)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="predict text instances for an image or directory")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--threshold", type=float, default=None)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("visualize", help="draw predictions over their images")
    _common(p)
    p.add_argument("--predictions", required=True)
    p.add_argument("--images", required=True, help="directory the prediction image names are relative to")
    p.add_argument("--annotations", default=None, help="dataset dir whose ground truth is drawn dashed")
    p.set_defaults(func=cmd_visualize)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args.argv = argv
        logging.basicConfig(
            level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s"
        )
        return args.func(args)
    except CLIError as exc:
        kind, msg = exc.kind, str(exc)
    except ConfigError as exc:
        kind, msg = "config", str(exc)
    except CheckpointError as exc:
        kind, msg = "checkpoint", str(exc)
    except (FileNotFoundError, ValueError) as exc:
        kind, msg = "data", str(exc)
    print(f"error: {kind}: {' '.join(msg.split())}", file=sys.stderr)
    return EXIT_CODES.get(kind, 1)


if __name__ == "__main__":
    sys.exit(main())
