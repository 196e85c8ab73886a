"""Command-line entry point: one pipeline stage per invocation.

Exit codes: 0 success, 2 invalid configuration or arguments, 3 missing
upstream artifact, 4 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import artifact_root, load_config, snapshot
from .errors import ConfigError, DependencyError

log = logging.getLogger("radap")

EXIT_OK, EXIT_CONFIG, EXIT_DEPENDENCY, EXIT_RUNTIME = 0, 2, 3, 4


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path, stage: str, config: dict, inputs: dict | None = None, outputs=None, **extra) -> None:
    """Record config snapshot, input fingerprints and library versions for a stage."""
    ins = {}
    for name, p in (inputs or {}).items():
        p = Path(p)
        files = sorted(f for f in p.rglob("*") if f.is_file()) if p.is_dir() else [p]
        ins[name] = {"path": str(p), "sha256": {str(f.relative_to(p) if p.is_dir() else f.name): _sha256(f)
                                               for f in files if f.name != "manifest.json"}}
    manifest = {"stage": stage, "config": snapshot(config), "inputs": ins,
                "outputs": [str(o) for o in outputs or []],
                "versions": {"radap": __version__, "python": platform.python_version(),
                             "torch": torch.__version__, "numpy": np.__version__},
                **extra}
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(manifest, indent=2, default=str))


def _require(path, stage_hint: str, what: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise DependencyError(f"{what} not found at {path}; run `radap {stage_hint}` first")
    return path


def load_splits(config: dict):
    """(train, test) labeled images as described by the ``data`` section."""
    from .data import load_image_folder, synthetic_faces
    d = config["data"]
    if d["kind"] == "folder":
        train = load_image_folder(_require(d["train_dir"], "train-fr", "training image folder"), d["size"])
        test = load_image_folder(d["test_dir"], d["size"]) if d.get("test_dir") else train
        return train, test
    seed = config["seed"]
    kw = dict(size=d["size"], identity_seed=seed, min_distance=d["min_distance"], jitter=d["jitter"])
    train = synthetic_faces(d["num_identities"], d["per_identity"], seed=seed, **kw)
    test = synthetic_faces(d["num_identities"], d["test_per_identity"], seed=seed + 1_000_003, **kw)
    return train, test


# --------------------------------------------------------------------------- stages

def cmd_mask(args, config):
    from .fmask import make_mask, write_mask
    from .utils import derive_seed
    m = config["mask"]
    h, w = m["size"] or (config["data"]["size"],) * 2
    out = Path(args.out or artifact_root(config) / "masks")
    single = out.suffix.lower() == ".png"
    count = 1 if single and args.count is None else m["count"]
    if single and count != 1:
        raise ConfigError("--out names a single PNG file; use a directory when --count > 1")
    (out.parent if single else out).mkdir(parents=True, exist_ok=True)
    files = []
    for i in range(count):
        rng = np.random.default_rng(derive_seed(config["seed"], i))
        mask = make_mask(m["kind"], h, w, rng, decay_power=m["decay_power"], area_range=m["area_range"],
                         rect_count=m["rect_count"])
        files.append(out if single else out / f"{m['kind']}-{i:04d}.png")
        write_mask(files[-1], mask)
    manifest = out.with_name(out.name + ".manifest.json") if single else out / "manifest.json"
    write_manifest(manifest, "mask", config, outputs=files)
    print(f"wrote {len(files)} mask(s) to {out}")


def _fr_dir(config, override=None) -> Path:
    return Path(override) if override else artifact_root(config) / "fr"


def cmd_train_fr(args, config):
    from .models import TrainConfig, save_checkpoint, train_config_dict, train_model
    s = dict(config["train-fr"])
    mode, width, emb = s.pop("mode"), s.pop("width"), s.pop("embedding_dim")
    tc = TrainConfig(seed=config["seed"], **s)
    train, test = load_splits(config)
    model, history = train_model(train, tc, mode, val=test if mode == "closed_set" else None,
                                 width=width, embedding_dim=emb)
    out = _fr_dir(config, args.out)
    save_checkpoint(model, out / "model.pt", train_config_dict(tc), kind="fr", regime=tc.augment.kind)
    (out / "history.json").write_text(json.dumps(history, indent=2))
    write_manifest(out / "manifest.json", "train-fr", config, outputs=[out / "model.pt"],
                   final=history[-1])
    print(f"saved FR model to {out / 'model.pt'}: {history[-1]}")


def cmd_gen_fpatch(args, config):
    from .attack import generate_fpatch_dataset, save_fpatch_dataset
    from .fmask import FMaskConfig
    from .models import load_model
    fr_path = _require(args.fr or _fr_dir(config) / "model.pt", "train-fr", "FR checkpoint")
    fr = load_model(fr_path)
    s = config["gen-fpatch"]
    train, _ = load_splits(config)
    size = train.images.shape[-1]
    samples = generate_fpatch_dataset(train, fr, FMaskConfig(size, size, s["decay_power"], tuple(s["area_range"])),
                                      count=s["count"], seed=config["seed"], alpha=s["alpha"], eps=s["eps"],
                                      max_steps=s["max_steps"], batch_size=s["batch_size"],
                                      clean_fraction=s["clean_fraction"])
    out = Path(args.out or artifact_root(config) / "fpatch")
    save_fpatch_dataset(samples, out, extra={"count": len(samples)})
    write_manifest(out / "manifest.json", "gen-fpatch", config, inputs={"fr": fr_path}, outputs=[out / "fpatch.npz"])
    print(f"wrote {len(samples)} F-patch samples to {out}")


def cmd_train_segmenter(args, config):
    from .attack import load_fpatch_dataset
    from .segmenter import SegmenterConfig, save_segmenter, train_segmenter
    root = Path(args.fpatch or artifact_root(config) / "fpatch")
    _require(root / "fpatch.npz", "gen-fpatch", "F-patch dataset")
    samples = load_fpatch_dataset(root)
    cfg = SegmenterConfig(seed=config["seed"], **config["train-segmenter"])
    model, history = train_segmenter(samples, cfg)
    out = Path(args.out or artifact_root(config) / "segmenter")
    save_segmenter(model, out / "model.pt", cfg)
    (out / "history.json").write_text(json.dumps(history, indent=2))
    write_manifest(out / "manifest.json", "train-segmenter", config, inputs={"fpatch": root / "fpatch.npz"},
                   outputs=[out / "model.pt"], final=history[-1])
    print(f"saved segmenter to {out / 'model.pt'}: {history[-1]}")


def _load_mask(spec: str, size: int, seed: int) -> np.ndarray:
    from .fmask import make_mask, read_mask
    if Path(spec).exists():
        return read_mask(spec)
    try:
        return make_mask(spec, size, size, np.random.default_rng(seed))
    except ValueError as exc:
        raise ConfigError(f"--mask: {exc}") from exc


def _pipeline(seg_path, fr, saf_n, fill):
    from .defense import DefensePipeline
    from .segmenter import load_segmenter
    seg = load_segmenter(_require(seg_path, "train-segmenter", "segmenter checkpoint"))
    return DefensePipeline(seg, fr, saf_n=saf_n, fill_value=fill)


def _describe(model_out: torch.Tensor, mode: str) -> dict:
    if mode == "closed_set":
        probs = torch.softmax(model_out, 1)[0]
        return {"label": int(probs.argmax()), "confidence": float(probs.max())}
    return {"embedding": [round(float(v), 6) for v in model_out[0]]}


def cmd_attack(args, config):
    from .attack import AttackSpec, pgd_patch_attack
    from .data import load_image, save_image
    from .models import load_model
    fr = load_model(_require(args.fr, "train-fr", "FR checkpoint"))
    image = load_image(_require(args.image, "attack", "source image"))[None]
    a = config["attack"]
    mask = _load_mask(args.mask, image.shape[-1], config["seed"])
    target = load_image(_require(args.target_image, "attack", "target image"))[None] if args.target_image else None
    labels = lambda v: torch.tensor([v]) if v is not None else None  # noqa: E731
    if fr.mode == "closed_set" and a["goal"] == "evasion" and args.label is None:
        raise ConfigError("--label is required for closed-set evasion")
    if fr.mode == "closed_set" and a["goal"] == "impersonation" and args.target_label is None:
        raise ConfigError("--target-label is required for closed-set impersonation")
    spec = AttackSpec(image, mask, system=fr.mode, goal=a["goal"], alpha=a["alpha"], steps=a["steps"],
                      eps=a["eps"], source_labels=labels(args.label), target_labels=labels(args.target_label),
                      target=target, adaptive=args.adaptive, temperature=a["temperature"],
                      flip_open_set_sign=a["flip_open_set_sign"], seed=config["seed"])
    defense = None
    if args.adaptive:
        if not args.segmenter:
            raise ConfigError("--adaptive needs --segmenter")
        defense = _pipeline(args.segmenter, fr, config["defend"]["saf_n"], config["defend"]["fill_value"])
    x_a = pgd_patch_attack(spec, fr, defense)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_image(x_a[0], out)
    with torch.no_grad():
        report = {"before": _describe(fr(image), fr.mode), "after": _describe(fr(x_a), fr.mode),
                  "mask_area": float(mask.mean()), "linf": float((x_a - image).abs().max())}
    print(json.dumps(report))
    write_manifest(out.with_name(out.name + ".manifest.json"), "attack", config,
                   inputs={"image": args.image, "fr": args.fr}, outputs=[out], report=report)


def cmd_defend(args, config):
    from .data import load_image
    from .fmask import write_mask
    from .models import load_model
    fr = load_model(_require(args.fr, "train-fr", "FR checkpoint"))
    saf_n = config["defend"]["saf_n"]
    pipe = _pipeline(args.segmenter, fr, saf_n, config["defend"]["fill_value"])
    image = load_image(_require(args.image, "defend", "input image"))[None]
    mask = pipe.masks(image)[0].numpy()
    report = {"saf_n": saf_n, "mask_area": float(mask.mean()), **_describe(pipe(image), fr.mode)}
    if args.out_mask:
        Path(args.out_mask).parent.mkdir(parents=True, exist_ok=True)
        write_mask(args.out_mask, mask)
    if args.report:
        Path(args.report).parent.mkdir(parents=True, exist_ok=True)
        Path(args.report).write_text(json.dumps(report, indent=2))
    print(json.dumps(report))


def cmd_evaluate(args, config):
    from .evalkit import ExperimentGrid, run_grid
    root = artifact_root(config)
    ev = dict(config["evaluate"])
    a = config["attack"]
    grid = ExperimentGrid(system=config["train-fr"]["mode"], seed=config["seed"], saf_n=config["defend"]["saf_n"] or 8,
                          alpha=a["alpha"], steps=a["steps"], eps=a["eps"], temperature=a["temperature"],
                          fill_value=config["defend"]["fill_value"],
                          fr_checkpoint=str(args.fr or root / "fr" / "model.pt"),
                          segmenter_checkpoint=str(args.segmenter or root / "segmenter" / "model.pt"), **ev)
    _, test = load_splits(config)
    out = Path(args.out or root / "eval")
    report = run_grid(grid, test, out)
    (out / "report.json").write_text(json.dumps({"fingerprint": report.fingerprint, "grid": asdict(grid),
                                                 "cells": report.cells}, indent=2))
    inputs = {"fr": grid.fr_checkpoint}
    if Path(grid.segmenter_checkpoint).exists():
        inputs["segmenter"] = grid.segmenter_checkpoint
    write_manifest(out / "manifest.json", "evaluate", config, inputs=inputs, outputs=[out / "cells.jsonl"])
    print(report.table(), end="")


def cmd_plot(args, config):
    from .evalkit import emit_plots, load_cells
    cells_path = Path(args.cells or artifact_root(config) / "eval" / "cells.jsonl")
    _require(cells_path, "evaluate", "evaluation records")
    out = Path(args.out or artifact_root(config) / "plots")
    paths = emit_plots(load_cells(cells_path), out, x=args.x, group=args.group, series=args.series)
    for p in paths:
        print(p)


def cmd_validate(args, config):
    print(f"{args.path or 'default config'}: ok")


# --------------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "--grid", dest="config", help="YAML run config or a stage manifest")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a config value (repeatable)")
    common.add_argument("--seed", type=int, help="global seed")
    common.add_argument("--artifacts", help="artifact root (default: $RADAP_ARTIFACTS or config)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="radap", description="Adversarial patch attacks and defenses for toy face recognition.")
    parser.add_argument("--version", action="version", version=f"radap {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mask", parents=[common], help="sample masks to PNG files")
    p.add_argument("--kind", help="fmask, rmask or a stencil name")
    p.add_argument("--size", type=int, nargs=2, metavar=("H", "W"))
    p.add_argument("--delta", type=float, help="F-mask decay power")
    p.add_argument("--area", type=float, nargs=2, metavar=("A", "B"), help="F-mask area fraction range")
    p.add_argument("--rects", type=int, help="R-mask rectangle count")
    p.add_argument("--count", type=int, help="number of masks (default from config)")
    p.add_argument("--out", help="a .png file for a single mask, otherwise a directory")
    p.set_defaults(func=cmd_mask, flag_map={"kind": "mask.kind", "count": "mask.count", "size": "mask.size",
                                            "delta": "mask.decay_power", "area": "mask.area_range",
                                            "rects": "mask.rect_count"})

    p = sub.add_parser("train-fr", parents=[common], help="train a recognition model")
    p.add_argument("--regime", choices=["none", "cutout", "fcutout"], help="occlusion augmentation")
    p.add_argument("--mode", choices=["closed_set", "open_set"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_train_fr, flag_map={"regime": "train-fr.augment.kind", "mode": "train-fr.mode",
                                                "epochs": "train-fr.epochs"})

    p = sub.add_parser("gen-fpatch", parents=[common], help="generate F-patch training data")
    p.add_argument("--fr", help="FR checkpoint")
    p.add_argument("--count", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gen_fpatch, flag_map={"count": "gen-fpatch.count", "max_steps": "gen-fpatch.max_steps"})

    p = sub.add_parser("train-segmenter", parents=[common], help="train the patch segmenter")
    p.add_argument("--fpatch", help="F-patch dataset directory")
    p.add_argument("--beta", type=float)
    p.add_argument("--loss", choices=["ebce", "bce"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_train_segmenter, flag_map={"beta": "train-segmenter.beta", "loss": "train-segmenter.loss",
                                                       "epochs": "train-segmenter.epochs"})

    p = sub.add_parser("attack", parents=[common], help="patch-attack one image")
    p.add_argument("--image", required=True)
    p.add_argument("--mask", required=True, help="mask PNG or a mask kind")
    p.add_argument("--fr", required=True)
    p.add_argument("--label", type=int, help="source label (closed-set evasion)")
    p.add_argument("--goal", choices=["evasion", "impersonation"])
    p.add_argument("--target-label", type=int)
    p.add_argument("--target-image")
    p.add_argument("--steps", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--eps", type=float)
    p.add_argument("--adaptive", action="store_true", help="BPDA through the defense")
    p.add_argument("--segmenter")
    p.add_argument("--saf-n", type=int, help="subgrids per side; 0 disables SAF")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_attack, flag_map={"goal": "attack.goal", "steps": "attack.steps", "alpha": "attack.alpha",
                                              "eps": "attack.eps", "saf_n": "defend.saf_n"})

    p = sub.add_parser("defend", parents=[common], help="defend and recognise one image")
    p.add_argument("--image", required=True)
    p.add_argument("--segmenter", required=True)
    p.add_argument("--fr", required=True)
    p.add_argument("--saf-n", type=int, help="subgrids per side; 0 disables SAF")
    p.add_argument("--out-mask")
    p.add_argument("--report")
    p.set_defaults(func=cmd_defend, flag_map={"saf_n": "defend.saf_n"})

    p = sub.add_parser("evaluate", parents=[common], help="run the evaluation grid")
    p.add_argument("--fr")
    p.add_argument("--segmenter")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate, flag_map={})

    p = sub.add_parser("plot", parents=[common], help="plot evaluation records")
    p.add_argument("--cells", help="cells.jsonl from evaluate")
    p.add_argument("--x", default="saf_n")
    p.add_argument("--group", default="mask")
    p.add_argument("--series", default="attack")
    p.add_argument("--out")
    p.set_defaults(func=cmd_plot, flag_map={})

    p = sub.add_parser("validate", parents=[common], help="check a config file")
    p.add_argument("path", nargs="?")
    p.set_defaults(func=cmd_validate, flag_map={})
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        overrides = list(args.set)
        for attr, key in args.flag_map.items():
            value = getattr(args, attr, None)
            if value is not None:
                if attr == "saf_n" and value == 0:
                    value = None  # 0 switches Split-and-Fill off
                overrides.append(f"{key}={json.dumps(value)}")
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        if args.artifacts:
            overrides.append(f"artifacts={json.dumps(args.artifacts)}")
        path = args.path if args.command == "validate" and args.path else args.config
        config = load_config(path, overrides)
        args.func(args, config)
    except ConfigError as exc:
        print(f"radap: invalid configuration:\n{exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DependencyError as exc:
        print(f"radap: missing dependency: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except Exception as exc:  # noqa: BLE001 - surfaced as a runtime failure
        log.debug("stage failed", exc_info=True)
        print(f"radap: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
