"""Command-line entry point: ``csi-ood <subcommand>``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import audit as audit_mod
from .calibration import train_linear_heads
from .config import ConfigError, RunConfig, parse_overrides
from .data import (DatasetSplit, fixed_resize_dataset, interp_generator, labels_of,
                   lfw_face_dataset, load_image_folder, one_class_split, photo_patch_dataset,
                   stack_pixels, train_test_partition, write_samples)
from .metrics import evaluate, oodness
from .model import load_checkpoint, save_checkpoint
from .scoring import fit_scorer, load_state, save_state
from .train import init_bundle, train_contrastive
from .transforms import family_from_descriptor, make_shift_family

logger = logging.getLogger("csi_ood")

SHIFT_MODES = ("con_si", "cls_si", "csi", "sup_csi")
LABELED_MODES = ("supclr", "sup_csi")


class CommandError(RuntimeError):
    pass


# -- data resolution -----------------------------------------------------------


def load_any_folder(path, size=None):
    """Class-subfolder directory or a flat folder of images."""
    path = Path(path)
    if not path.is_dir():
        raise CommandError(f"not a readable directory: {path}")
    labeled = any(p.is_dir() for p in path.iterdir())
    try:
        samples, _ = load_image_folder(path, size=size, labeled=labeled)
    except ValueError as err:
        raise CommandError(str(err)) from None
    return samples


def _parse_named_dirs(spec):
    out = {}
    for item in filter(None, (s.strip() for s in spec.split(","))):
        name, _, path = item.rpartition("=")
        out[name or Path(path).name] = path
    return out


def build_split(cfg: RunConfig) -> DatasetSplit:
    source, size = cfg["data.source"], cfg["data.size"]
    if source == "photos":
        samples, _ = photo_patch_dataset(per_class=cfg["data.per_class"], size=size,
                                         seed=cfg["data.split_seed"])
    elif source == "lfw":
        samples, _ = lfw_face_dataset(size)
    else:
        samples, _ = load_image_folder(source, size=size)
    frac, seed = cfg["data.test_fraction"], cfg["data.split_seed"]
    if cfg["data.protocol"] == "one_class":
        split = one_class_split(samples, cfg["data.target_class"], frac, seed)
    else:
        train, test = train_test_partition(samples, frac, seed)
        split = DatasetSplit(train, test, {})
    for name, path in _parse_named_dirs(cfg["data.ood_dirs"]).items():
        split.ood_test[name] = load_any_folder(path, size)
    if not split.ood_test:
        split.ood_test["interp"] = interp_generator(split.in_test, len(split.in_test), seed)
    return split


def family_for(cfg: RunConfig):
    if cfg["loss.mode"] in SHIFT_MODES or cfg["loss.align_shift_as_positive"]:
        return cfg.family()
    return make_shift_family("identity")


# -- commands -----------------------------------------------------------------


def cmd_train(cfg: RunConfig, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    split = build_split(cfg)
    x = torch.from_numpy(stack_pixels(split.in_train))
    mode = cfg["loss.mode"]
    labels = None
    if mode in LABELED_MODES or cfg["data.protocol"] == "labeled":
        labels = torch.as_tensor(labels_of(split.in_train))
    family = family_for(cfg)
    seed = cfg["seed"]
    # sup_csi needs K for its joint head layout
    with_head = mode in SHIFT_MODES
    bundle = init_bundle(seed, arch=cfg["model.arch"], in_channels=x.shape[1],
                         width=cfg["model.width"], image_size=cfg["data.size"],
                         proj_dim=cfg["model.proj_dim"],
                         num_shifts=family.K if with_head else 0)
    log_path = out_dir / "train_log.jsonl"
    train_contrastive(bundle, x, family, cfg.policy(), cfg.loss(), cfg["optim.epochs"],
                      batch_size=cfg["optim.batch_size"], lr=cfg["optim.lr"],
                      weight_decay=cfg["optim.weight_decay"], momentum=cfg["optim.momentum"],
                      warmup_epochs=cfg["optim.warmup_epochs"], seed=seed, labels=labels,
                      log_path=log_path)
    if labels is not None:
        train_linear_heads(bundle, x, labels, family, "class", seed=seed,
                           log_path=out_dir / "head_log.jsonl")
        if mode == "sup_csi":
            train_linear_heads(bundle, x, labels, family, "joint", seed=seed,
                               log_path=out_dir / "joint_head_log.jsonl")
    ckpt = save_checkpoint(out_dir / "checkpoint.pt", bundle, family.descriptor,
                           cfg.to_dict(), {"seed": seed})
    (out_dir / "config.txt").write_text(cfg.to_text())
    return ckpt, log_path


def _load(checkpoint):
    try:
        bundle, ckpt = load_checkpoint(checkpoint)
    except FileNotFoundError as err:
        raise CommandError(str(err)) from None
    if ckpt.get("config") is None:
        raise CommandError(f"checkpoint {checkpoint} carries no config snapshot")
    return bundle, ckpt, RunConfig(ckpt["config"])


def cmd_fit_score(checkpoint, out_dir, score_options=None, family_name=None, data_dir=None,
                  seed=None):
    """``score_options`` maps ``score.*`` config keys to values; omitted keys
    fall back to the checkpoint's config snapshot."""
    bundle, ckpt, cfg = _load(checkpoint)
    cfg = cfg.with_overrides(score_options or {})
    family = family_from_descriptor(ckpt["shift_family"])
    if family_name is not None:
        requested = make_shift_family(family_name)
        if requested.descriptor != family.descriptor:
            raise CommandError(f"shift family {family_name!r} does not match the checkpoint's "
                               f"{ckpt['shift_family']}")
    if data_dir is not None:
        train = load_any_folder(data_dir, cfg["data.size"])
    else:
        train = build_split(cfg).in_train
    seed = cfg["seed"] if seed is None else seed
    x = torch.from_numpy(stack_pixels(train))
    ensemble_n = cfg["score.ensemble_n"] or 4 * family.K
    state = fit_scorer(bundle, family, x, score_mode=cfg["score.mode"],
                       balance=cfg["score.balance"], ensemble_n=ensemble_n,
                       policy=cfg.policy() if cfg["score.augment"] else None,
                       controlled_policy=cfg["score.controlled"],
                       coreset_ratio=cfg["score.coreset_ratio"], seed=seed,
                       ids=[s.uid for s in train])
    state.meta.update({"checkpoint": str(checkpoint), "config": cfg.to_dict()})
    out_dir = Path(out_dir)
    return save_state(state, out_dir / "scorer_state.json", out_dir / "embeddings.jsonl")


def cmd_eval(checkpoint, state_path, score_kind, out_dir, ood_dirs=None, seed=None):
    bundle, ckpt, cfg = _load(checkpoint)
    try:
        state = load_state(state_path)
    except FileNotFoundError as err:
        raise CommandError(str(err)) from None
    if state.family != ckpt["shift_family"]:
        raise CommandError(f"scorer state {state_path} was fitted with shift family "
                           f"{state.family}, checkpoint {checkpoint} has {ckpt['shift_family']}")
    if score_kind in ("s_cls_si", "s_csi") and bundle.shift_head is None:
        raise CommandError(f"score {score_kind} needs a shift head; checkpoint {checkpoint} "
                           "has none")
    if score_kind in ("s_sup", "s_sup_ens") and bundle.class_head is None:
        raise CommandError(f"score {score_kind} needs trained class heads")
    if ood_dirs:
        cfg = cfg.with_overrides({"data.ood_dirs": ood_dirs})
    split = build_split(cfg)
    seed = cfg["seed"] if seed is None else seed
    report = evaluate(bundle, state, split, score_kind,
                      config={**cfg.to_dict(), "scorer_state": str(state_path)}, seed=seed,
                      family=family_from_descriptor(ckpt["shift_family"]))
    report.save(out_dir)
    return report


def cmd_audit(train_dir, candidates, threshold=audit_mod.DEFAULT_THRESHOLD, size=None):
    train = load_any_folder(train_dir, size)
    sets = {name: load_any_folder(path, size) for name, path in candidates.items()}
    return audit_mod.audit_report(train, sets, threshold=threshold)


def cmd_oodness(checkpoint, state_path, transform):
    bundle, ckpt, cfg = _load(checkpoint)
    try:
        state = load_state(state_path)
    except FileNotFoundError as err:
        raise CommandError(str(err)) from None
    name, _, idx = transform.partition(":")
    fam = make_shift_family(name)
    k = int(idx) if idx else fam.K - 1
    x = torch.from_numpy(stack_pixels(build_split(cfg).in_test))
    rng_seed = cfg["seed"]
    return oodness(bundle, lambda b: fam.apply(b, k, np.random.default_rng(rng_seed)), x, state)


# -- argument parsing -----------------------------------------------------------


def _parser():
    p = argparse.ArgumentParser(prog="csi-ood", description="Contrastive OOD detection with "
                                "shifted instances")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train an encoder")
    t.add_argument("--config", help="key = value config file")
    t.add_argument("--preset", choices=("desk", "paper"))
    t.add_argument("--seed", type=int, required=True)
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    t.add_argument("--out", help="output directory (default: output.dir)")

    f = sub.add_parser("fit-score", help="embed training data and fit the scorer")
    f.add_argument("--checkpoint", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--score-mode", choices=("sim", "norm", "sim_norm"))
    f.add_argument("--ensemble-n", type=int, help="augmentation draws per query (0: 4 per shift)")
    f.add_argument("--coreset-ratio", type=float)
    f.add_argument("--controlled", action="store_true", default=None)
    f.add_argument("--no-balance", dest="balance", action="store_false", default=None)
    f.add_argument("--no-augment", dest="augment", action="store_false", default=None,
                   help="score un-augmented queries")
    f.add_argument("--family", help="expected shift family (checked against the checkpoint)")
    f.add_argument("--data", help="image folder to use as the training reference")
    f.add_argument("--seed", type=int)

    e = sub.add_parser("eval", help="score the test split and write a report")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--state", required=True)
    e.add_argument("--score-kind", default="s_csi",
                   choices=("s_con", "s_con_si", "s_cls_si", "s_csi", "s_sup", "s_sup_ens"))
    e.add_argument("--ood", default="", help="comma list of name=dir OOD sources")
    e.add_argument("--out", required=True)
    e.add_argument("--seed", type=int)

    a = sub.add_parser("audit", help="smoothness-score audit of candidate OOD sets")
    a.add_argument("--train-dir", required=True)
    a.add_argument("--candidate", action="append", required=True, metavar="[NAME=]DIR")
    a.add_argument("--threshold", type=float, default=audit_mod.DEFAULT_THRESHOLD)
    a.add_argument("--size", type=int)
    a.add_argument("--out")

    m = sub.add_parser("make-fixed-dataset", help="sample and resize a class-folder corpus")
    m.add_argument("--source", required=True)
    m.add_argument("--out", required=True)
    m.add_argument("--size", type=int, default=32)
    m.add_argument("--per-class", type=int, default=1000)
    m.add_argument("--exclude", default="", help="comma list of class names")
    m.add_argument("--seed", type=int, default=0)

    i = sub.add_parser("interp-gen", help="write midpoint interpolations of an image set")
    i.add_argument("--source", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--count", type=int, required=True)
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--size", type=int)

    o = sub.add_parser("oodness", help="AUROC of s_con between data and shifted data")
    o.add_argument("--checkpoint", required=True)
    o.add_argument("--state", required=True)
    o.add_argument("--transform", default="rotate:1", help="family[:index], e.g. rotate:1")
    return p


def _config_from_args(args):
    cfg = RunConfig.from_file(args.config, args.preset) if args.config else (
        RunConfig.from_preset(args.preset) if args.preset else RunConfig())
    overrides = parse_overrides(args.set)
    overrides["seed"] = args.seed
    return cfg.with_overrides(overrides)


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "train":
            cfg = _config_from_args(args)
            ckpt, log = cmd_train(cfg, args.out or cfg["output.dir"])
            print(f"checkpoint: {ckpt}\nlog: {log}")
        elif args.command == "fit-score":
            opts = {"score.mode": args.score_mode, "score.ensemble_n": args.ensemble_n,
                    "score.coreset_ratio": args.coreset_ratio, "score.controlled": args.controlled,
                    "score.balance": args.balance, "score.augment": args.augment}
            opts = {k: v for k, v in opts.items() if v is not None}
            path = cmd_fit_score(args.checkpoint, args.out, opts, args.family, args.data,
                                 args.seed)
            print(f"scorer state: {path}")
        elif args.command == "eval":
            report = cmd_eval(args.checkpoint, args.state, args.score_kind, args.out,
                              args.ood or None, args.seed)
            print(report.table())
        elif args.command == "audit":
            cands = {}
            for item in args.candidate:
                name, _, path = item.rpartition("=")
                cands[name or Path(path).name] = path
            rep = cmd_audit(args.train_dir, cands, args.threshold, args.size)
            print(audit_mod.format_audit(rep))
            if args.out:
                Path(args.out).parent.mkdir(parents=True, exist_ok=True)
                Path(args.out).write_text(json.dumps(rep, indent=1))
        elif args.command == "make-fixed-dataset":
            exclude = [s for s in args.exclude.split(",") if s]
            manifest = fixed_resize_dataset(args.source, args.out, args.size, args.per_class,
                                            exclude, args.seed)
            print(f"wrote {sum(r['status'] == 'ok' for r in manifest)} images to {args.out}")
        elif args.command == "interp-gen":
            samples = load_any_folder(args.source, args.size)
            out = interp_generator(samples, args.count, args.seed)
            write_samples(out, args.out, prefix="interp")
            print(f"wrote {len(out)} images to {args.out}")
        elif args.command == "oodness":
            print(f"oodness AUROC: {cmd_oodness(args.checkpoint, args.state, args.transform):.4f}")
    except (ConfigError, CommandError, FileNotFoundError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
