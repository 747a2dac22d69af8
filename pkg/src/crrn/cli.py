"""Command line entry point: ``crrn synth | train | eval | infer``.

Settings come from an optional YAML/JSON config file with one section per
subcommand (``synth``, ``train``, ``eval``, ``infer``); command line flags
override the file. The effective configuration is printed as JSON before any
work starts.

Exit codes: 0 success, 1 runtime or I/O failure, 2 invalid input.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from .exceptions import ConfigurationError, DimensionError, IntegrityError, SchemaVersionError
from .metrics import SsimConfig
from .synthesis import SynthesisConfig, generate_dataset, make_procedural_pool

logger = logging.getLogger("crrn")

EXIT_OK, EXIT_RUNTIME, EXIT_INVALID = 0, 1, 2


class UsageError(Exception):
    pass


def load_config_file(path) -> dict:
    if path is None:
        return {}
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        doc = yaml.safe_load(path.read_text("utf-8")) or {}
    except yaml.YAMLError as exc:
        raise UsageError(f"cannot parse config file {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise UsageError(f"config file {path} must hold a mapping")
    return doc


def merged(args, section: str, keys) -> dict:
    """File section overlaid with every flag the user actually passed."""
    cfg = dict(load_config_file(args.config).get(section) or {})
    for key in keys:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    return cfg


def echo(section: str, cfg: dict) -> None:
    print(json.dumps({section: cfg}, indent=2, sort_keys=True, default=str))


def _sizes(text):
    return [s.strip() for s in text.split(",") if s.strip()]


def cmd_synth(args) -> int:
    keys = ("seed", "count", "resolutions", "blur_sigma_range", "mask_threshold", "augmentations",
            "background_pool", "reflection_pool", "procedural_pools", "out")
    cfg = merged(args, "synth", keys)
    out = cfg.pop("out", None)
    if out is None:
        raise UsageError("--out is required")
    procedural = int(cfg.pop("procedural_pools", 0) or 0)
    pools = {k: cfg.pop(k, None) for k in ("background_pool", "reflection_pool")}
    synth_cfg = SynthesisConfig(**cfg)
    if procedural:
        for kind in ("background", "reflection"):
            if pools[f"{kind}_pool"] is None:
                pools[f"{kind}_pool"] = str(Path(out) / "pools" / kind)
    for name, pool in pools.items():
        if pool is None:
            raise UsageError(f"--{name.replace('_', '-')} is required (or pass --procedural-pools N)")
        if not procedural and not Path(pool).is_dir():
            raise UsageError(f"{name.replace('_', ' ')} does not exist: {pool}")
    echo("synth", {**synth_cfg.echo(), **pools, "procedural_pools": procedural, "out": str(out)})
    if procedural:
        for kind in ("background", "reflection"):
            pool = Path(pools[f"{kind}_pool"])
            if not pool.is_dir():
                make_procedural_pool(pool, procedural, synth_cfg.seed, kind)
    manifest = generate_dataset(synth_cfg, pools["background_pool"], pools["reflection_pool"], out)
    print(f"wrote {len(manifest['entries'])} triplets to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .training import (
        TrainConfig, TrainLog, TripletDataset, determinism_from_env, load_checkpoint, save_checkpoint, train,
    )

    keys = ("seed", "stage1_epochs", "stage1_lr", "joint_epochs_a", "lr_a", "joint_epochs_b", "lr_b", "batch_size",
            "sizes", "gamma", "base_channels", "ablation", "manifest", "checkpoint", "stage", "out",
            "keep_checkpoints")
    cfg = merged(args, "train", keys)
    keep = cfg.pop("keep_checkpoints", None)
    manifest = cfg.pop("manifest", None)
    resume_path = cfg.pop("checkpoint", None)
    stage = str(cfg.pop("stage", "all"))
    out = cfg.pop("out", None)
    if manifest is None or out is None:
        raise UsageError("--manifest and --out are required")
    if stage not in ("1", "joint", "all"):
        raise UsageError(f"--stage must be 1, joint or all, got {stage!r}")
    if not Path(manifest).exists():
        raise UsageError(f"manifest does not exist: {manifest}")
    if determinism_from_env():
        cfg["deterministic"] = True
    train_cfg = TrainConfig.from_dict(cfg)
    resume = None
    if resume_path is not None:
        if not Path(resume_path).is_file():
            raise UsageError(f"checkpoint does not exist: {resume_path}")
        resume = load_checkpoint(resume_path)
    echo("train", {**train_cfg.echo(), "manifest": str(manifest), "stage": stage, "out": str(out),
                   "keep_checkpoints": keep,
                   "resume": resume_path, "resume_epoch": None if resume is None else resume.epoch})

    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(train_cfg.echo(), indent=2, sort_keys=True) + "\n")
    log_path = out / "train_log.csv"
    log = TrainLog()
    if resume is not None and log_path.is_file():
        stages_order = ("stage1", "joint")
        cut = (stages_order.index(resume.stage), resume.epoch)
        log = TrainLog([r for r in TrainLog.load(log_path).records
                        if (stages_order.index(r["stage"]), r["epoch"]) <= cut])
    stages = {"1": ("stage1",), "joint": ("joint",), "all": ("stage1", "joint")}[stage]
    if stage == "joint" and (resume is None or resume.stage not in ("stage1", "joint")):
        raise UsageError("--stage joint needs --checkpoint with stage-1 (or joint) weights")

    dataset = TripletDataset.from_manifest(manifest)
    _, ckpt, log = train(dataset, train_cfg, checkpoint_dir=out, stages=stages, resume=resume, log=log,
                         keep_last=keep)
    log.save(log_path)
    if ckpt is not None:
        save_checkpoint(ckpt, out / "final.pt")
    print(f"trained {len(log)} steps; checkpoints in {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluation import EvalConfig, evaluate

    keys = ("manifest", "checkpoint", "ablation", "out", "emit_predictions", "oracle")
    cfg = merged(args, "eval", keys)
    metric = SsimConfig(**(cfg.pop("metric", None) or {}))
    out = cfg.pop("out", None)
    try:
        eval_cfg = EvalConfig(manifest=cfg.get("manifest") or "", checkpoint=cfg.get("checkpoint"), metric=metric,
                              ablation=cfg.get("ablation") or "full", output=out,
                              emit_predictions=bool(cfg.get("emit_predictions")), oracle=bool(cfg.get("oracle")))
    except ConfigurationError as exc:
        raise UsageError(str(exc)) from None
    echo("eval", {**{k: v for k, v in vars(eval_cfg).items() if k != "metric"}, "metric": vars(metric)})
    report = evaluate(eval_cfg)
    sys.stdout.write(report.to_csv())
    print(report.aggregate_json())
    return EXIT_OK


def cmd_infer(args) -> int:
    from .evaluation import infer

    cfg = merged(args, "infer", ("checkpoint", "image", "out", "auto_resize"))
    for key in ("checkpoint", "image", "out"):
        if cfg.get(key) is None:
            raise UsageError(f"--{key} is required")
    for key in ("checkpoint", "image"):
        if not Path(cfg[key]).is_file():
            raise UsageError(f"{key} does not exist: {cfg[key]}")
    echo("infer", cfg)
    paths = infer(cfg["checkpoint"], cfg["image"], cfg["out"], auto_resize=bool(cfg.get("auto_resize")))
    for p in paths.values():
        print(p)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crrn", description="Single-image reflection removal pipeline")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML or JSON config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out")

    p = sub.add_parser("synth", help="generate a synthetic mixture dataset")
    common(p)
    p.add_argument("--count", type=int)
    p.add_argument("--background-pool", dest="background_pool")
    p.add_argument("--reflection-pool", dest="reflection_pool")
    p.add_argument("--procedural-pools", dest="procedural_pools", type=int,
                   help="generate N procedural images for any pool not given")
    p.add_argument("--resolutions", type=_sizes, help="comma separated HxW list, e.g. 96x160,224x288")
    p.add_argument("--mask-threshold", dest="mask_threshold", type=float)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="run the two-stage training procedure")
    common(p)
    p.add_argument("--manifest")
    p.add_argument("--checkpoint", help="resume from this checkpoint")
    p.add_argument("--stage", choices=("1", "joint", "all"))
    p.add_argument("--ablation", choices=("full", "iin_only", "l1_only"))
    p.add_argument("--stage1-epochs", dest="stage1_epochs", type=int)
    p.add_argument("--stage1-lr", dest="stage1_lr", type=float)
    p.add_argument("--joint-epochs-a", dest="joint_epochs_a", type=int)
    p.add_argument("--lr-a", dest="lr_a", type=float)
    p.add_argument("--joint-epochs-b", dest="joint_epochs_b", type=int)
    p.add_argument("--lr-b", dest="lr_b", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--sizes", type=_sizes)
    p.add_argument("--gamma", type=float)
    p.add_argument("--base-channels", dest="base_channels", type=int)
    p.add_argument("--keep-checkpoints", dest="keep_checkpoints", type=int,
                   help="keep only the newest N epoch checkpoints (default: keep all)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a manifest")
    common(p)
    p.add_argument("--manifest")
    p.add_argument("--checkpoint")
    p.add_argument("--ablation", choices=("full", "iin_only", "l1_only"))
    p.add_argument("--emit-predictions", dest="emit_predictions", action="store_const", const=True)
    p.add_argument("--oracle", action="store_const", const=True, help="score a stub that returns the ground truth")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="remove reflections from one PNG")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--image")
    p.add_argument("--auto-resize", dest="auto_resize", action="store_const", const=True)
    p.set_defaults(func=cmd_infer)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INVALID if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigurationError, DimensionError, SchemaVersionError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (OSError, IntegrityError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
