"""``srdistill`` command line: prepare -> distill -> train -> eval -> report.

Exit codes: 0 success, 1 runtime failure (one ``error[category]: message``
line on stderr), 2 usage error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch
import yaml

from . import __version__
from .config import RunConfig, coerce_numbers, resolve_config
from .data_prep import PatchDataset, ingest_corpus, load_dataset, prepare
from .errors import ConfigError, SRDistillError
from .eval_harness import evolution_dump, run_grids, save_history
from .latent_distill import (
    LatentConfig,
    build_toy_generator,
    export_latent,
    latent_distill,
    load_generator,
    pretrain_autoencoder,
)
from .metrics import evaluate_model, make_testset
from .pixel_distill import DistillConfig, distill, export_synthetic
from .sr_models import TrainSchedule, build_model, load_checkpoint, save_checkpoint, train

log = logging.getLogger("srdistill")

# flag dest -> dotted config key, per subcommand
FLAG_KEYS = {
    "prepare": {"scale": "prepare.scale", "size": "prepare.size", "stride": "prepare.stride"},
    "pixel": {"ipc": "distill.ipc", "init": "distill.init", "reference": "distill.reference",
              "checkpoint": "distill.checkpoint", "iters": "distill.iters",
              "synth_size": "distill.synth_size", "snapshot_every": "distill.snapshot_every"},
    "latent": {"ipc": "latent.ipc", "inversion_steps": "latent.inversion_steps",
               "iters": "latent.iters", "checkpoint": "latent.checkpoint",
               "generator": "latent.generator", "reference": "latent.reference",
               "snapshot_every": "latent.snapshot_every"},
    "train": {"arch": "train.arch", "scale": "train.scale", "steps": "train.steps",
              "lr": "train.learning_rate", "patch_size": "train.patch_size"},
    "eval": {"scale": "eval.scale"},
    "report": {},
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML/JSON config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value (repeatable), e.g. distill.iters=5")
    common.add_argument("--seed", type=int, help="global seed")
    common.add_argument("--output-root", help="base for relative --out paths "
                                              "(default $SRDISTILL_OUTPUT_ROOT or cwd)")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="srdistill", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", parents=[common], help="cut a corpus into labelled sub-images")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--scale", type=int, choices=[2, 4])
    p.add_argument("--size", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--name")

    d = sub.add_parser("distill", help="distill a prepared dataset")
    dsub = d.add_subparsers(dest="mode", required=True)
    px = dsub.add_parser("pixel", parents=[common])
    px.add_argument("--data", required=True)
    px.add_argument("--out", required=True)
    px.add_argument("--ipc", type=int)
    px.add_argument("--init", choices=["noise", "downscale"])
    px.add_argument("--reference", choices=["random", "pretrained"])
    px.add_argument("--checkpoint")
    px.add_argument("--iters", type=int)
    px.add_argument("--synth-size", type=int)
    px.add_argument("--snapshot-every", type=int)
    lt = dsub.add_parser("latent", parents=[common])
    lt.add_argument("--data", required=True)
    lt.add_argument("--out", required=True)
    lt.add_argument("--ipc", type=int)
    lt.add_argument("--inversion-steps", type=int)
    lt.add_argument("--iters", type=int)
    lt.add_argument("--checkpoint")
    lt.add_argument("--generator")
    lt.add_argument("--reference", choices=["random", "pretrained"])
    lt.add_argument("--snapshot-every", type=int)

    t = sub.add_parser("train", parents=[common], help="train an SR model on a dataset artifact")
    t.add_argument("--arch", choices=["srcnn", "vdsr", "edsr"])
    t.add_argument("--scale", type=int, choices=[2, 4])
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--steps", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--patch-size", type=int)

    e = sub.add_parser("eval", parents=[common], help="score a checkpoint on a folder of HR images")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--scale", type=int)
    e.add_argument("--name")

    r = sub.add_parser("report", parents=[common], help="run an experiment grid")
    r.add_argument("--spec", required=True)
    r.add_argument("--out", required=True)
    return ap


def _flag_overrides(args, table: dict) -> list[str]:
    out = []
    for dest, key in table.items():
        val = getattr(args, dest, None)
        if val is not None:
            out.append(f"{key}={json.dumps(val)}")
    return out


def _out_path(cfg: RunConfig, p: str) -> Path:
    p = Path(p)
    return p if p.is_absolute() else cfg.output_root / p


def _reference(name: str) -> str:
    return {"random": "random_init"}.get(name, name)


def cmd_prepare(cfg, args):
    out = _out_path(cfg, args.out)
    cfg.write(out)
    c = cfg["prepare"]
    m = prepare(args.input, out, c["scale"], c["size"], c["stride"], args.name)
    print(f"prepared {m.num_groups} groups / {m.num_sub_images} sub-images -> {out}")


def distill_config(cfg) -> DistillConfig:
    c = cfg["distill"]
    return DistillConfig(iterations=c["iters"], ipc=c["ipc"], synth_size=c["synth_size"],
                         synth_lr=c["synth_lr"], momentum=c["momentum"],
                         batch_real=c["batch_real"], patch_size=c["patch_size"],
                         net_update_steps=c["net_update_steps"], net_update_lr=c["net_update_lr"],
                         reference=_reference(c["reference"]), init=c["init"],
                         checkpoint=c["checkpoint"], match_mode=c["match_mode"],
                         snapshot_every=c["snapshot_every"], rng_seed=cfg.seed)


def latent_config(cfg) -> LatentConfig:
    c = cfg["latent"]
    return LatentConfig(iterations=c["iters"], ipc=c["ipc"], latent_dim=c["latent_dim"],
                        out_size=c["out_size"], latent_lr=c["latent_lr"],
                        batch_real=c["batch_real"], patch_size=c["patch_size"],
                        reference=_reference(c["reference"]), checkpoint=c["checkpoint"],
                        inversion_steps=c["inversion_steps"], inversion_lr=c["inversion_lr"],
                        tune_generator=c["tune_generator"], tune_steps=c["tune_steps"],
                        tune_lr=c["tune_lr"], ae_pretrain_steps=c["ae_pretrain_steps"],
                        snapshot_every=c["snapshot_every"], rng_seed=cfg.seed)


def _finish_distill(hist, out, every):
    save_history(hist, out)
    if every:
        evolution_dump(hist, every, out)


def cmd_distill_pixel(cfg, args):
    out = _out_path(cfg, args.out)
    cfg.write(out)
    dc = distill_config(cfg)
    if dc.reference == "pretrained" and not dc.checkpoint:
        raise ConfigError("a pretrained reference needs --checkpoint")
    manifest = load_dataset(args.data)
    S, hist = distill(manifest, dc)
    export_synthetic(S, out, f"{manifest.corpus_name}_pixel_{dc.init}")
    _finish_distill(hist, out, dc.snapshot_every)
    print(f"distilled {S.num_labels} labels x {S.ipc} -> {out} (final loss {hist.losses[-1]:.5f})")


def cmd_distill_latent(cfg, args):
    out = _out_path(cfg, args.out)
    cfg.write(out)
    lc = latent_config(cfg)
    if lc.reference == "pretrained" and not lc.checkpoint:
        raise ConfigError("a pretrained reference needs --checkpoint "
                          "(train one with `srdistill train`) or use --reference random")
    manifest = load_dataset(args.data)
    if cfg["latent.generator"]:
        gen = load_generator(cfg["latent.generator"])
    else:
        gen = build_toy_generator(lc.latent_dim, lc.out_size, lc.rng_seed)
        images = [im for g in manifest.groups for im in g.sub_images]
        pretrain_autoencoder(gen, images, lc.ae_pretrain_steps, rng_seed=lc.rng_seed)
    L, hist = latent_distill(manifest, lc, gen)
    export_latent(L, out, f"{manifest.corpus_name}_latent")
    _finish_distill(hist, out, lc.snapshot_every)
    print(f"distilled {L.num_labels} labels x {L.ipc} latents -> {out}")


def cmd_train(cfg, args):
    out = _out_path(cfg, args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    cfg.write(out.parent)
    c = cfg["train"]
    manifest = load_dataset(args.data)
    smallest = min(min(g.size) for g in manifest.groups)
    patch = min(c["patch_size"], smallest - smallest % c["scale"])
    if patch != c["patch_size"]:
        log.warning("patch size %d exceeds %dpx sub-images; using %d", c["patch_size"], smallest, patch)
    model = build_model(c["arch"], c["scale"], rng_seed=cfg.seed)
    sched = TrainSchedule(c["steps"], c["batch_size"], c["learning_rate"], c["optimizer"], cfg.seed)
    model, losses = train(model, PatchDataset(manifest.groups, patch, c["scale"]), sched)
    save_checkpoint(model, out)
    with out.with_suffix(".losses.csv").open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "loss"])
        w.writerows(enumerate(losses))
    print(f"trained {c['arch']} x{c['scale']} for {len(losses)} steps -> {out}")


def cmd_eval(cfg, args):
    out = _out_path(cfg, args.out)
    cfg.write(out)
    c = cfg["eval"]
    model = load_checkpoint(args.model)
    scale = args.scale or model.scale
    if scale != model.scale:
        raise ConfigError(f"checkpoint is x{model.scale}, asked to evaluate at x{scale}")
    testset = make_testset(ingest_corpus(args.data), scale)
    report = evaluate_model(model, testset, args.name or Path(args.data).name, c["perceptual"],
                            c["crop_border"], c["y_only"])
    rows = [{"image": m.name, "psnr": m.psnr, "ssim": m.ssim, "perceptual": m.perceptual,
             "error": m.error} for m in report.images]
    with (out / "metrics.csv").open("w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    (out / "metrics.json").write_text(json.dumps({**report.row(), "images": rows}, indent=1))
    print(f"{report.dataset}: PSNR {report.psnr:.4f} dB  SSIM {report.ssim:.4f}")


def cmd_report(cfg, args):
    out = _out_path(cfg, args.out)
    cfg.write(out)
    spec_path = Path(args.spec)
    try:
        doc = coerce_numbers(yaml.safe_load(spec_path.read_text()) or {})
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read experiment spec {spec_path}: {exc}") from exc
    reports = run_grids(doc, out / "work", base_dir=spec_path.parent)
    histories = {}
    for rep in reports:
        rep.write(out)
        print(f"== x{rep.spec.train_scale} ==\n{rep.table()}")
        histories.update({k: h for k, h in rep.histories.items() if h.snapshots})
    if histories:
        every = doc.get("evolution_every") or min(
            min(k for k in h.snapshots if k > 0) for h in histories.values()
            if len(h.snapshots) > 1)
        evolution_dump(histories, every, out)


COMMANDS = {"prepare": cmd_prepare, "pixel": cmd_distill_pixel, "latent": cmd_distill_latent,
            "train": cmd_train, "eval": cmd_eval, "report": cmd_report}


def _fail(category: str, message: str) -> None:
    flat = " ".join(message.split())
    print(f"srdistill: error[{category}]: {flat}", file=sys.stderr)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    name = args.mode if args.command == "distill" else args.command
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = _flag_overrides(args, FLAG_KEYS[name]) + list(args.set)
        cfg = resolve_config(args.config, overrides, name, args.seed, args.output_root)
        torch.manual_seed(cfg.seed)
        np.random.seed(cfg.seed % 2 ** 32)
        COMMANDS[name](cfg, args)
    except SRDistillError as exc:
        _fail(exc.category, str(exc))
        return 1
    except Exception as exc:
        log.debug("unhandled", exc_info=True)
        _fail("internal", f"{type(exc).__name__}: {exc}")
        return 1
    return 0
