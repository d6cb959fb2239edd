"""Command-line interface: synth, train, eval, infer, ablate, report.

Every command validates its inputs, writes only under its output directory,
and exits nonzero with a single machine-parsable line on error:
0 ok, 2 config error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import yaml

from .data import CLASS_PALETTE, SliceSpec, SynthSpec, sliding_window_infer, synth_generate
from .errors import ConfigError, DataError, NumericalError
from .train import (
    ABLATION_AXES,
    RunConfig,
    ablate,
    evaluate_checkpoint,
    flat_config_keys,
    load_checkpoint,
    load_config,
    train,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4


def _config_epilog() -> str:
    lines = ["config keys (override with --set key=value):"]
    for key, default in flat_config_keys():
        lines.append(f"  {key} = {default!r}")
    return "\n".join(lines)


def _load_run_config(args) -> RunConfig:
    config = load_config(args.config) if args.config else RunConfig()
    overrides = []
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        overrides.append((key.strip(), value))
    if args.seed is not None:
        overrides.append(("seed", str(args.seed)))
    if getattr(args, "device", None):
        overrides.append(("device", args.device))
    return config.with_overrides(overrides)


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="YAML config file")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    parser.add_argument("--seed", type=int, help="override the run seed")
    parser.add_argument("--device", help="torch device (default cpu)")


def cmd_synth(args) -> int:
    doc = yaml.safe_load(Path(args.spec).read_text())
    if not isinstance(doc, dict):
        raise ConfigError(f"{args.spec}: synthesis spec must be a mapping")
    if args.seed is not None:
        doc["seed"] = args.seed
    spec = SynthSpec.from_dict(doc)
    manifest = synth_generate(spec, args.out, n_images=args.n_images)
    print(manifest)
    return EXIT_OK


def cmd_train(args) -> int:
    config = _load_run_config(args)
    ckpt = train(config, args.workdir)
    print(ckpt)
    return EXIT_OK


def cmd_eval(args) -> int:
    reports = evaluate_checkpoint(
        args.checkpoint,
        args.manifest,
        out_dir=args.out,
        confidence_threshold=args.threshold,
    )
    for name, report in reports.items():
        print(f"{name}: F_d={report.f_d:.4f} mean_F_c={report.mean_f_c:.4f}")
    return EXIT_OK


def _draw_overlay(image: np.ndarray, preds, class_names, out_path: Path) -> None:
    from PIL import Image, ImageDraw

    img = Image.fromarray(image).convert("RGB")
    draw = ImageDraw.Draw(img)
    for u, v, c, _conf in preds:
        color = CLASS_PALETTE[c % len(CLASS_PALETTE)]
        draw.ellipse([u - 3, v - 3, u + 3, v + 3], fill=color, outline=(0, 0, 0))
    img.save(out_path)


def cmd_infer(args) -> int:
    from PIL import Image

    model, registry, config = load_checkpoint(args.checkpoint)
    ds = registry.dataset_by_name(args.dataset)
    path = Path(args.image)
    if path.suffix.lower() != ".png":
        raise DataError(f"{path}: only PNG images are supported")
    with Image.open(path) as img:
        image = np.asarray(img.convert("RGB"))
    threshold = config.confidence_threshold if args.threshold is None else args.threshold
    spec = config.data.slice_spec()
    preds = sliding_window_infer(model, image, ds.id, spec, confidence_threshold=threshold)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    doc = [
        {"u": round(u, 3), "v": round(v, 3), "class": ds.category_names[c], "confidence": round(s, 6)}
        for u, v, c, s in preds
    ]
    (out / "predictions.json").write_text(json.dumps(doc, indent=2) + "\n")
    if args.overlay:
        global_classes = [registry.local_to_global(ds.id, c) for c in range(ds.num_classes)]
        recolored = [(u, v, global_classes[c], s) for u, v, c, s in preds]
        _draw_overlay(image, recolored, registry.global_names, out / "overlay.png")
    print(out / "predictions.json")
    return EXIT_OK


def cmd_ablate(args) -> int:
    config = _load_run_config(args)
    rows = ablate(config, args.axis, args.workdir)
    for row in rows:
        print(f"{row['variant']:>16} {row['dataset']:>12} F_d={row['f_d']:.4f} mean_F_c={row['mean_f_c']:.4f}")
    return EXIT_OK


def cmd_report(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    log_path = Path(args.logdir) / "metrics.jsonl"
    if not log_path.exists():
        raise DataError(f"{log_path}: metrics log not found")
    records = [json.loads(line) for line in log_path.read_text().splitlines() if line.strip()]
    if not records:
        raise DataError(f"{log_path}: metrics log is empty")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    steps = [r["step"] for r in records]
    keys = [k for k in records[0] if k != "step"]
    fig, ax = plt.subplots(figsize=(8, 5))
    for key in keys:
        ax.plot(steps, [r.get(key, float("nan")) for r in records], label=key, linewidth=1)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out / "loss_curves.png", dpi=120)
    plt.close(fig)
    tail = records[-min(20, len(records)) :]
    summary = {k: sum(r.get(k, 0.0) for r in tail) / len(tail) for k in keys}
    (out / "loss_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(out / "loss_curves.png")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nucdet",
        description="Multi-dataset cell nucleus detection and classification",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic multi-dataset corpus")
    p.add_argument("--spec", required=True, help="YAML synthesis spec")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="override the spec seed")
    p.add_argument("--n-images", type=int, help="override images per dataset")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser(
        "train",
        help="train a model",
        epilog=_config_epilog(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    _add_common(p)
    p.add_argument("--workdir", required=True, help="output directory for logs and checkpoints")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on test manifests")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", action="append", required=True, help="manifest path (repeatable)")
    p.add_argument("--out", required=True, help="output directory for reports")
    p.add_argument("--threshold", type=float, help="confidence threshold override")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="predict nuclei on one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help="PNG image path")
    p.add_argument("--dataset", required=True, help="dataset name for head routing")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--threshold", type=float)
    p.add_argument("--overlay", action="store_true", help="also write a class-colored dot overlay")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("ablate", help="run one ablation axis")
    _add_common(p)
    p.add_argument("--axis", required=True, choices=ABLATION_AXES)
    p.add_argument("--workdir", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="plot loss curves from a training log")
    p.add_argument("--logdir", required=True, help="directory containing metrics.jsonl")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error:config:{exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"error:data:{exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"error:numerical:{exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except FileNotFoundError as exc:
        print(f"error:data:{exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
