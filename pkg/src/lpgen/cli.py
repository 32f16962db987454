"""``lpgen`` command line: prep, synth, train, generate, evaluate, report.

Exit codes: 0 success, 2 usage or validation error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .control import ControlledPredictor, init_controller
from .dataprep import build_manifest, preprocess, synth_dataset
from .denoiser import UNetConfig, init_denoiser
from .diffusion import (
    ConditionBundle,
    Models,
    NoiseSchedule,
    TrainConfig,
    Trainer,
    TrainingSet,
    sample,
    write_loss_csv,
)
from .metrics import MetricReport, evaluate, render_table
from .numerics import NumericError, Rng, load_checkpoint, save_checkpoint
from .style import StyleEncoder, init_adapter
from .text import TextEmbedTable, null_tokens, tokenize
from .vision import Image, load_edge_map, load_png, save_png

log = logging.getLogger("lpgen")

BASE, CONTROLLER, ADAPTER = "base_denoiser", "structure_controller", "style_adapter"
DEFAULT_ENCODER_SEED = 1234


class UsageError(ValueError):
    """Invalid or missing inputs; maps to exit code 2."""


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- checkpoints ----------------------------------------------------------------------

def save_base(path, models: Models, meta: dict) -> None:
    params = dict(models.base)
    params["text.table"] = models.text.table
    vocab = sorted(models.text.vocab, key=models.text.vocab.get)
    save_checkpoint(path, BASE, params, {**meta, "unet": models.cfg.to_json(), "vocab": vocab})


def load_models(base_path, controller_path=None, adapter_path=None) -> tuple[Models, dict]:
    """Base network and text table, plus whichever optional components are given."""
    params, header = load_checkpoint(base_path, BASE)
    meta = header["meta"]
    cfg = UNetConfig.from_json(meta["unet"])
    vocab = {w: i for i, w in enumerate(meta["vocab"])}
    table = params.pop("text.table")
    table.name = "text.table"
    for k, t in params.items():
        t.name = k
    encoder = StyleEncoder(seed=meta.get("encoder_seed", DEFAULT_ENCODER_SEED), image_size=cfg.image_size)
    models = Models(cfg, params, TextEmbedTable(vocab, table), encoder)
    if controller_path is not None:
        models.controller, _ = load_checkpoint(controller_path, CONTROLLER)
        ControlledPredictor(models.base, models.controller, cfg)
    if adapter_path is not None:
        models.adapter, _ = load_checkpoint(adapter_path, ADAPTER)
        template = init_adapter(cfg, Rng(0))
        mismatched = sorted(set(template) ^ set(models.adapter))
        mismatched += [k for k in template if k in models.adapter and models.adapter[k].shape != template[k].shape]
        if mismatched:
            raise UsageError(f"adapter checkpoint does not fit the base network: {mismatched}")
        for k, t in models.adapter.items():
            t.name = k
    return models, meta


# -- subcommands ----------------------------------------------------------------------

def cmd_prep(args) -> int:
    in_dir = Path(args.input)
    if not in_dir.is_dir():
        raise UsageError(f"input directory not found: {in_dir}")
    m = build_manifest(in_dir, args.out, args.size)
    if not m.records:
        log.warning("no images found under %s; wrote an empty manifest", in_dir)
    print(Path(args.out) / "manifest.json")
    return 0


def cmd_synth(args) -> int:
    m = synth_dataset(args.out, args.count, args.size, args.seed)
    log.info("wrote %d synthetic paintings", len(m.records))
    print(Path(args.out) / "manifest.json")
    return 0


_TRAIN_KEYS = {f.name for f in fields(TrainConfig)}
_EXTRA_KEYS = {"data", "base", "model", "encoder_seed", "loss_csv"}


def resolve_train_config(args) -> dict:
    """Defaults, then the JSON config file, then explicit flags."""
    resolved: dict = {**TrainConfig().to_json(), "data": None, "base": None, "model": {},
                      "encoder_seed": DEFAULT_ENCODER_SEED, "loss_csv": None}
    if args.config:
        try:
            file_cfg = json.loads(Path(args.config).read_text())
        except FileNotFoundError as exc:
            raise UsageError(f"config file not found: {args.config}") from exc
        unknown = set(file_cfg) - _TRAIN_KEYS - _EXTRA_KEYS
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
        resolved.update(file_cfg)
    for key in ("phase", "data", "base", "seed", "steps", "lr", "batch", "loss_csv"):
        v = getattr(args, key, None)
        if v is not None:
            resolved[key] = v
    return resolved


def cmd_train(args) -> int:
    rc = resolve_train_config(args)
    tc = TrainConfig.from_dict(rc)
    out = Path(args.out)
    log.info("resolved config: %s", json.dumps(rc, sort_keys=True))
    if not rc["data"]:
        raise UsageError("no training manifest given (--data or \"data\" in the config)")
    rng = Rng(tc.seed)
    if tc.phase == "base":
        cfg = UNetConfig.from_json({**UNetConfig().to_json(), "T": tc.T, **rc["model"]})
        if cfg.T != tc.T:
            raise UsageError(f"model T={cfg.T} differs from training T={tc.T}")
        base = init_denoiser(cfg, rng.child(1))
        text = TextEmbedTable.init(rng.child(2), width=cfg.text_dim)
        models = Models(cfg, base, text, StyleEncoder(seed=rc["encoder_seed"], image_size=cfg.image_size))
        base_meta = {"encoder_seed": rc["encoder_seed"], "T": tc.T}
    else:
        if not rc["base"] or not Path(rc["base"]).is_file():
            raise UsageError(f"{tc.phase} phase needs an existing base checkpoint (--base), got {rc['base']!r}")
        models, base_meta = load_models(rc["base"])
        cfg = models.cfg
        if cfg.T != tc.T:
            raise UsageError(f"T={tc.T} differs from the base checkpoint's T={cfg.T}")
    data = TrainingSet.from_manifest(rc["data"], models.text.vocab, models.encoder if tc.phase == "style" else None)
    if data.images.shape[-1] != cfg.image_size:
        raise UsageError(f"manifest images are {data.images.shape[-1]}px, model expects {cfg.image_size}px")
    if tc.phase == "structure":
        models.controller = init_controller(models.base, cfg, rng.child(3))
    elif tc.phase == "style":
        models.adapter = init_adapter(cfg, rng.child(5), models.base)

    losses = Trainer(models, data, tc).run(log_every=args.log_every, log=log.info)
    meta = {"train": rc}
    if tc.phase == "base":
        save_base(out, models, {**base_meta, **meta})
    else:
        meta["base_sha256"] = _sha256(rc["base"])
        component, params = ((CONTROLLER, models.controller) if tc.phase == "structure"
                             else (ADAPTER, models.adapter))
        save_checkpoint(out, component, params, meta)
    csv = Path(rc["loss_csv"]) if rc["loss_csv"] else out.with_suffix(".loss.csv")
    write_loss_csv(csv, losses)
    log.info("wrote %s and %s", out, csv)
    return 0


def _style_input(path, size: int) -> Image:
    img = load_png(path)
    if img.channels != 3:
        img = Image(np.repeat(img.data, 3, axis=2))
    if img.width != size or img.height != size:
        img = preprocess(img, size)[0]
    return img


def cmd_generate(args) -> int:
    for name in ("lam", "w"):
        if not math.isfinite(getattr(args, name)):
            raise UsageError(f"--{'lambda' if name == 'lam' else name} must be finite")
    if args.w < 0:
        raise UsageError("--w must be non-negative")
    ck = Path(args.checkpoints)
    paths = {"base": Path(args.base or ck / "base.ckpt"),
             "controller": Path(args.controller or ck / "controller.ckpt"),
             "adapter": Path(args.adapter or ck / "adapter.ckpt")}
    missing = [f"{k}: {p}" for k, p in paths.items() if not p.is_file()]
    if missing:
        raise UsageError("missing checkpoint(s): " + "; ".join(missing))
    models, meta = load_models(paths["base"], paths["controller"], paths["adapter"])
    s = models.cfg.image_size

    edge = load_edge_map(args.canny)
    if edge.mask.shape != (s, s):
        raise UsageError(f"canny map is {edge.width}×{edge.height}, model expects {s}×{s}")
    style_img = _style_input(args.style_ref, s)
    g = models.encoder.encode(style_img).data[None]

    ts = tokenize(args.prompt, models.text.vocab) if args.prompt else null_tokens(models.text.vocab)
    cond = ConditionBundle(np.array([ts.ids]), np.array([ts.pad_mask]), g,
                           edge.mask[None, None].astype(np.float64))
    T = models.cfg.T
    x = sample(models, cond, NoiseSchedule.linear(T), w=args.w, lam=args.lam, seed=[args.seed],
               form=args.guidance_form)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_png(Image(x[0].transpose(1, 2, 0)), out)
    sidecar = {
        "prompt": args.prompt, "null_text": not args.prompt, "canny": str(args.canny),
        "style_ref": str(args.style_ref), "lambda": args.lam, "w": args.w, "seed": args.seed,
        "guidance_form": args.guidance_form, "T": T,
        "checkpoints": {k: {"path": str(p), "sha256": _sha256(p)} for k, p in paths.items()},
        "version": __version__,
    }
    out.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    print(out)
    return 0


def cmd_evaluate(args) -> int:
    report = evaluate(args.generated, args.reference, args.edges, model=args.model,
                      warn=lambda msg: print(msg, file=sys.stderr))
    if args.out:
        report.write(args.out)
    if args.table:
        sys.stdout.write(render_table([report]))
    return 0


def cmd_report(args) -> int:
    reports = [MetricReport.read(p) for p in args.reports]
    text = render_table(reports)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


# -- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lpgen", description="Structure- and style-controlled landscape painting generation.")
    p.add_argument("--version", action="version", version=f"lpgen {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    q = sub.add_parser("prep", help="crop, caption and edge-map a category-organised image folder")
    q.add_argument("--input", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--size", type=int, default=512)
    q.set_defaults(func=cmd_prep)

    q = sub.add_parser("synth", help="write a procedural training set")
    q.add_argument("--out", required=True)
    q.add_argument("--count", type=int, default=64)
    q.add_argument("--size", type=int, default=16)
    q.add_argument("--seed", type=int, default=0)
    q.set_defaults(func=cmd_synth)

    q = sub.add_parser("train", help="train one phase")
    q.add_argument("--phase", choices=("base", "structure", "style"))
    q.add_argument("--config")
    q.add_argument("--out", required=True)
    q.add_argument("--data", help="manifest.json")
    q.add_argument("--base", help="base checkpoint (structure and style phases)")
    q.add_argument("--seed", type=int)
    q.add_argument("--steps", type=int)
    q.add_argument("--lr", type=float)
    q.add_argument("--batch", type=int)
    q.add_argument("--loss-csv", dest="loss_csv")
    q.add_argument("--log-every", type=int, default=50)
    q.set_defaults(func=cmd_train)

    q = sub.add_parser("generate", help="sample one image")
    q.add_argument("--canny", required=True)
    q.add_argument("--style-ref", required=True)
    q.add_argument("--prompt", default="")
    q.add_argument("--lambda", dest="lam", type=float, default=1.0)
    q.add_argument("--w", type=float, default=2.0)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out", required=True)
    q.add_argument("--checkpoints", default=".", help="directory holding base/controller/adapter .ckpt")
    q.add_argument("--base")
    q.add_argument("--controller")
    q.add_argument("--adapter")
    q.add_argument("--guidance-form", choices=("affine", "standard"), default="affine")
    q.set_defaults(func=cmd_generate)

    q = sub.add_parser("evaluate", help="score generated images against references and edge maps")
    q.add_argument("--generated", required=True)
    q.add_argument("--reference", required=True)
    q.add_argument("--edges", required=True)
    q.add_argument("--out")
    q.add_argument("--table", action="store_true")
    q.add_argument("--model", default="LPGen")
    q.set_defaults(func=cmd_evaluate)

    q = sub.add_parser("report", help="render one table row per report JSON")
    q.add_argument("reports", nargs="+")
    q.add_argument("--out")
    q.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr, force=True)
    try:
        return args.func(args)
    except NumericError as exc:
        log.error("numeric failure: %s", exc)
        return 3
    except (ValueError, KeyError, OSError) as exc:
        log.error("%s", exc)
        return 2
