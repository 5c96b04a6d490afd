"""Operator surface: dataset generation, training, evaluation, sweep/grid
montage rendering, composition counting, and the inference server.

Exit codes: 0 success, 1 usage/validation, 2 runtime failure. All file
outputs are written atomically (temp + rename).
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import data as dd
from . import evaluation as ev
from .config import ConfigError


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _atomic_write_text(path, text: str) -> None:
    _atomic_write_bytes(path, text.encode("utf-8"))


def _resolve_config(args) -> dict:
    file_values = cfgmod.parse_config_file(args.config) if getattr(args, "config", None) else {}
    flag_values = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, _, v = item.partition("=")
        flag_values[k.strip()] = v.strip()
    if getattr(args, "seed", None) is not None:
        flag_values["seed"] = str(args.seed)
    return cfgmod.resolve(file_values, flag_values)


def _world_from_config(rc: dict) -> dd.SyntheticWorldConfig:
    return dd.SyntheticWorldConfig(
        size=rc["image_size"],
        illumination=rc["illumination"],
        shading_strength=rc["shading_strength"],
        seed=rc["seed"],
    )


def _world_meta(world: dd.SyntheticWorldConfig) -> dict:
    return {
        "image_size": world.size,
        "classes": world.class_count,
        "class_names": list(world.class_names),
        "palette": [list(c) for c in world.palette],
        "illumination": list(world.illumination),
        "shading_strength": world.shading_strength,
        "seed": world.seed,
    }


def _train_config(rc: dict):
    from .training import TrainConfig, TrainError
    keys = {f.name for f in fields(TrainConfig)}
    try:
        return TrainConfig(**{k: v for k, v in rc.items() if k in keys})
    except TrainError as exc:  # bad config values are usage errors, not crashes
        raise UsageError(str(exc)) from None


def _log_resolved(rc: dict, out_dir: Path | None) -> None:
    echo = cfgmod.format_resolved(rc)
    sys.stderr.write(echo)
    if out_dir is not None:
        _atomic_write_text(out_dir / "config_resolved.txt", echo)


def _require(path, kind: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{kind} not found: {p}")
    return p


def _load_split(data_arg, class_count: int, split: str) -> dd.Dataset:
    p = Path(data_arg)
    manifest = p if p.is_file() else p / f"{split}.tsv"
    _require(manifest, f"{split} manifest")
    return dd.read_dataset(manifest, class_count=class_count, split=split)


def _world_from_checkpoint(meta: dict) -> dict:
    world = meta.get("world")
    if not world:
        raise UsageError("checkpoint carries no world metadata; re-train from a "
                         "dataset directory produced by `divsynth synth`")
    return world


# ---------------------------------------------------------------------------
# montages

SEPARATOR_PX = 2


def montage_row(images: list[dd.ImageRGB]) -> dd.ImageRGB:
    """Horizontal concatenation with a 2-pixel white separator."""
    if not images:
        raise UsageError("montage needs at least one image")
    h = images[0].height
    sep = np.ones((h, SEPARATOR_PX, 3), dtype=np.float32)
    cols = []
    for i, img in enumerate(images):
        if i:
            cols.append(sep)
        cols.append(img.values)
    return dd.ImageRGB(np.concatenate(cols, axis=1))


def montage_grid(rows: list[list[dd.ImageRGB]]) -> dd.ImageRGB:
    strips = [montage_row(r) for r in rows]
    w = strips[0].width
    sep = np.ones((SEPARATOR_PX, w, 3), dtype=np.float32)
    out = []
    for i, s in enumerate(strips):
        if i:
            out.append(sep)
        out.append(s.values)
    return dd.ImageRGB(np.concatenate(out, axis=0))


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(args) -> int:
    rc = _resolve_config(args)
    out = Path(args.out)
    if args.count is not None:
        rc["train_count"] = args.count
    world = _world_from_config(rc)
    _log_resolved(rc, out)
    train_ds = dd.synth_generate(world, rc["train_count"], split="train")
    test_ds = dd.synth_generate(world, rc["test_count"], split="test")
    dd.write_dataset(train_ds, out)
    dd.write_dataset(test_ds, out)
    _atomic_write_text(out / "world.json", json.dumps(_world_meta(world), indent=2) + "\n")
    print(f"wrote {len(train_ds)} train + {len(test_ds)} test pairs to {out}")
    return 0


def cmd_train(args) -> int:
    from . import training as tr
    rc = _resolve_config(args)
    data_dir = _require(args.data, "dataset directory")
    world_path = data_dir / "world.json" if data_dir.is_dir() else None
    world_meta = json.loads(world_path.read_text()) if world_path and world_path.exists() else None
    class_count = world_meta["classes"] if world_meta else rc["classes"]
    out = Path(args.out)
    _log_resolved(rc, out)
    dataset = _load_split(args.data, class_count, "train")
    cfg = _train_config(rc)
    result = tr.train(dataset, cfg, out_dir=out,
                      resume=args.resume,
                      extra_meta={"world": world_meta} if world_meta else None)
    if rc["figures"]:
        from .figures import save_metrics_figure
        save_metrics_figure(result.metrics, out / "metrics.png")
    print(f"trained {cfg.epochs} epochs; checkpoint: {result.final_checkpoint}")
    return 0


def cmd_eval(args) -> int:
    from .training import load_generator
    rc = _resolve_config(args)
    ckpt = _require(args.checkpoint, "checkpoint")
    generator, meta = load_generator(ckpt)
    world = _world_from_checkpoint(meta)
    dataset = _load_split(args.data, world["classes"], "test")
    out = Path(args.out) if args.out else None
    _log_resolved(rc, out)
    samples = args.samples if args.samples is not None else rc["eval_samples"]
    rng = np.random.default_rng(rc["seed"])
    report = ev.reality_report(generator, dataset, samples_per_layout=samples,
                               rng=rng, palette=world["palette"],
                               class_names=world["class_names"])
    table = ev.report_table(report, title=f"eval of {ckpt.name}")
    print(table, end="")
    if out is not None:
        _atomic_write_text(out / "report.csv", ev.report_csv(report))
        _atomic_write_text(out / "report.txt", table)
        if rc["figures"]:
            from .figures import save_report_figure
            save_report_figure(report, out / "report.png", title=ckpt.name)
        print(f"report written to {out}")
    return 0


def _load_layout_for(args, generator, meta) -> dd.SemanticLayout:
    layout_path = _require(args.layout, "layout file")
    world = _world_from_checkpoint(meta)
    return dd.io_read_layout(layout_path, classes=world["classes"])


def cmd_sweep(args) -> int:
    from .training import load_generator
    generator, meta = load_generator(_require(args.checkpoint, "checkpoint"))
    layout = _load_layout_for(args, generator, meta)
    steps = [float(s) for s in args.steps.split(",")]
    if len(steps) < 2:
        raise UsageError("--steps needs at least two comma-separated values")
    if args.cls < 0 or args.cls >= layout.classes:
        raise UsageError(f"--class must be in [0,{layout.classes})")
    images = []
    for v in steps:
        entries = np.zeros(layout.classes)
        entries[args.cls] = max(-1.0, min(1.0, v))
        images.append(dd.tensor_to_image(generator.generate(layout, dd.NoiseVector(entries))))
    _atomic_write_bytes(args.out, dd.encode_ppm(montage_row(images)))
    print(f"wrote sweep montage ({len(steps)} steps, class {args.cls}) to {args.out}")
    return 0


def cmd_grid(args) -> int:
    from .training import load_generator
    generator, meta = load_generator(_require(args.checkpoint, "checkpoint"))
    layout = _load_layout_for(args, generator, meta)
    if args.rows < 1 or args.cols < 1:
        raise UsageError("--rows/--cols must be >= 1")
    rng = np.random.default_rng(args.seed)
    rows = []
    for _ in range(args.rows):
        rows.append([dd.tensor_to_image(generator.generate(
            layout, dd.NoiseVector.sample(layout.classes, rng)))
            for _ in range(args.cols)])
    _atomic_write_bytes(args.out, dd.encode_ppm(montage_grid(rows)))
    print(f"wrote {args.rows}x{args.cols} grid to {args.out}")
    return 0


def cmd_compositions(args) -> int:
    ks = [int(x) for x in args.k_per_class.split(",") if x.strip()]
    print(dd.count_compositions(ks))
    return 0


def cmd_serve(args) -> int:
    from .server import serve
    _require(args.checkpoint, "checkpoint")
    _require(args.layouts_dir, "layouts directory")
    serve(args.checkpoint, args.layouts_dir, bind=args.bind, port=args.port)
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    p = _Parser(prog="divsynth",
                description="diversity-controlled semantic-layout-to-image synthesis")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
        sp.add_argument("--seed", type=int, help="seed override")

    sp = sub.add_parser("synth", help="generate the toyfacades dataset")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--count", type=int, help="train pair count override")
    sp.set_defaults(fn=cmd_synth)

    sp = sub.add_parser("train", help="train a model")
    common(sp)
    sp.add_argument("--data", required=True, help="dataset dir (or train manifest)")
    sp.add_argument("--out", required=True)
    sp.add_argument("--resume", help="resume from an epoch checkpoint")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True, help="dataset dir (or test manifest)")
    sp.add_argument("--samples", type=int, help="images per layout")
    sp.add_argument("--out", help="report output directory")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("sweep", help="render a one-class noise sweep montage")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--layout", required=True, help="layout .pgm file")
    sp.add_argument("--class", dest="cls", type=int, required=True)
    sp.add_argument("--steps", default="-1,-0.5,0,0.5,1")
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_sweep)

    sp = sub.add_parser("grid", help="render an i.i.d. noise sample grid")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--layout", required=True)
    sp.add_argument("--rows", type=int, default=3)
    sp.add_argument("--cols", type=int, default=3)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_grid)

    sp = sub.add_parser("compositions", help="count noise compositions")
    sp.add_argument("--k-per-class", required=True, help="comma-separated k_c list")
    sp.set_defaults(fn=cmd_compositions)

    sp = sub.add_parser("serve", help="run the HTTP inference service")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--layouts-dir", required=True)
    sp.add_argument("--port", type=int, default=7878)
    sp.add_argument("--bind", default="127.0.0.1")
    sp.set_defaults(fn=cmd_serve)
    return p


def main(argv=None) -> int:
    from .data import DataError
    from .models import ModelError
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"divsynth: {exc}", file=sys.stderr)
        return 1
    try:
        return args.fn(args)
    except (UsageError, ConfigError, DataError, ModelError, FileNotFoundError,
            ValueError) as exc:
        print(f"divsynth: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"divsynth: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
