"""Command line entry point: ``dgadmil <subcommand>``.

Output directories default to ``$DGA_OUTPUT_ROOT/<subcommand>`` (``./runs`` if
the variable is unset). Exit codes: 0 success, 2 configuration or input error,
3 numeric divergence during training.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import os
import sys
from pathlib import Path

import torch

from .backbone import FULL_CHANNELS, BackboneConfig
from .bagging import BagConfig, DegenerateInputError, make_bag, write_bag
from .container import FormatError
from .gat import GatConfig
from .metrics import sigma_profile
from .model import ModelConfig
from .reporting import (
    VARIANTS,
    ablate,
    export_attention,
    localization_rate,
    write_ablation_csv,
    write_report_csv,
    write_sigma_csv,
    write_subjects_csv,
)
from .training import NumericDivergence, TrainConfig, evaluate, load_bags, load_checkpoint, train
from .volume_synth import ConfigError, GeneratorConfig, read_manifest, synth_dataset

log = logging.getLogger("dgadmil")

EXIT_CONFIG = 2
EXIT_DIVERGED = 3


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.split(","))


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.split(","))


def _out_dir(args) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get("DGA_OUTPUT_ROOT", "runs")) / args.command


def _add_out(p):
    p.add_argument("--out", help="output directory (default: $DGA_OUTPUT_ROOT/<subcommand>)")


def _add_bag_args(p):
    p.add_argument("--m", type=int, default=3, help="slices per instance")
    p.add_argument("--k", type=int, default=None, help="instances per bag (default: all that fit)")
    p.add_argument("--axis", type=int, default=1)
    p.add_argument("--norm", default="zscore_nonzero", choices=["zscore_nonzero", "zscore", "minmax", "none"])


TRAIN_FLAGS = ("lr", "batch_size", "lambda2", "lambda3", "lambda4", "lr_decay", "decay_patience",
               "max_epochs", "early_stop_patience")


def _add_train_args(p):
    d = TrainConfig()
    p.add_argument("--manifest", required=True)
    _add_bag_args(p)
    for name in TRAIN_FLAGS:
        kind = type(getattr(d, name))
        p.add_argument("--" + name.replace("_", "-"), type=kind, default=None,
                       help=f"default {getattr(d, name)} (desk) / {getattr(TrainConfig.full_scale(), name)} (full scale)")
    p.add_argument("--seed", type=int, default=0, help="parameter, data-order and pairing seed")
    p.add_argument("--channels", type=_ints, default=None, help="backbone channel plan, e.g. 8,16,32,64")
    p.add_argument("--heads", type=int, default=8)
    p.add_argument("--n-edges", type=int, default=8)
    p.add_argument("--edge-mode", choices=["lowest", "highest"], default="lowest")
    p.add_argument("--spatial-graph", choices=["cosine", "grid"], default="cosine")
    p.add_argument("--no-spatial-agg", action="store_true")
    p.add_argument("--no-instance-agg", action="store_true")
    p.add_argument("--no-disentangle", action="store_true")
    p.add_argument("--decp2-squared", action="store_true")
    p.add_argument("--full-scale", action="store_true",
                   help="64-512 channel plan, batch 32, lr 1e-4, 120 epochs (explicit flags still win)")
    _add_out(p)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dgadmil", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic phantom dataset")
    _add_out(p)
    p.add_argument("--n", type=int, default=275)
    p.add_argument("--shape", type=_ints, default=(40, 48, 40))
    p.add_argument("--age-min", type=float, default=44.0)
    p.add_argument("--age-max", type=float, default=82.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--perturbation", type=float, default=0.15)
    p.add_argument("--splits", type=_floats, default=(200 / 275, 25 / 275, 50 / 275),
                   help="train,val,test fractions")

    p = sub.add_parser("bag", help="convert manifest volumes into DGABAG1 files")
    p.add_argument("--manifest", required=True)
    _add_bag_args(p)
    p.add_argument("--split", default=None, choices=["train", "val", "test"])
    _add_out(p)

    p = sub.add_parser("train", help="train a model")
    _add_train_args(p)

    for name, text in (("eval", "evaluate a checkpoint"), ("attention", "export attention maps and scores")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--manifest", required=True)
        p.add_argument("--split", default="test", choices=["train", "val", "test"])
        p.add_argument("--bin-width", type=float, default=5.0)
        _add_out(p)

    p = sub.add_parser("ablate", help="train and compare the ablation variants")
    _add_train_args(p)
    p.add_argument("--seeds", type=_ints, default=(0,))
    p.add_argument("--variants", default=",".join(VARIANTS))

    p = sub.add_parser("sigma", help="per-age-bin standard deviation from a subjects CSV")
    p.add_argument("--subjects", required=True, help="subjects.csv written by 'eval'")
    p.add_argument("--bin-width", type=float, default=5.0)
    _add_out(p)
    return parser


def _configs(args) -> tuple[TrainConfig, ModelConfig, BagConfig]:
    base = TrainConfig.full_scale() if args.full_scale else TrainConfig()
    overrides = {name: getattr(args, name) for name in TRAIN_FLAGS if getattr(args, name) is not None}
    overrides.update(param_seed=args.seed, data_seed=args.seed, pairing_seed=args.seed,
                     decp2_squared=args.decp2_squared)
    train_cfg = dataclasses.replace(base, **overrides)
    channels = args.channels or (FULL_CHANNELS if args.full_scale else BackboneConfig().channels)
    bag_cfg = BagConfig(m=args.m, K=args.k, axis=args.axis, norm=args.norm, pad_multiple=2 ** len(channels))
    gat = GatConfig(heads=args.heads, n_edges=args.n_edges, edge_mode=args.edge_mode)
    return train_cfg, ModelConfig(
        backbone=BackboneConfig(channels=channels, in_channels=args.m),
        spatial=gat,
        instance=gat,
        spatial_graph=args.spatial_graph,
        use_spatial_agg=not args.no_spatial_agg,
        use_instance_agg=not args.no_instance_agg,
        use_disentangle=not args.no_disentangle,
    ), bag_cfg


def _with_input_size(model_cfg: ModelConfig, x: torch.Tensor) -> ModelConfig:
    bb = dataclasses.replace(model_cfg.backbone, input_size=tuple(x.shape[-2:]), in_channels=x.shape[2])
    return dataclasses.replace(model_cfg, backbone=bb)


def cmd_synth(args) -> int:
    cfg = GeneratorConfig(shape=args.shape, age_min=args.age_min, age_max=args.age_max, noise=args.noise,
                          perturbation=args.perturbation, seed=args.seed)
    out = _out_dir(args)
    man = synth_dataset(cfg, args.n, args.splits, out)
    print(f"wrote {len(man.entries)} volumes and {out / 'manifest.txt'}")
    return 0


def cmd_bag(args) -> int:
    man = read_manifest(args.manifest)
    cfg = BagConfig(m=args.m, K=args.k, axis=args.axis, norm=args.norm)
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    entries = man.split(args.split) if args.split else man.entries
    for e in entries:
        write_bag(make_bag(man.load(e), cfg), out / (Path(e.path).stem + ".dgabag"))
    print(f"wrote {len(entries)} bags to {out}")
    return 0


def cmd_train(args) -> int:
    train_cfg, model_cfg, bag_cfg = _configs(args)
    man = read_manifest(args.manifest)
    data = (load_bags(man, "train", bag_cfg), load_bags(man, "val", bag_cfg))
    model_cfg = _with_input_size(model_cfg, data[0].x)
    out = _out_dir(args)
    model, record = train(train_cfg, man, model_cfg, out, bag_cfg, data=data, manifest_path=args.manifest)
    record.save(out / "run_record.txt")
    best = record.epochs[record.best_epoch]
    print(f"best epoch {record.best_epoch}: val MAE {best['val_mae']:.3f}; checkpoint {record.checkpoint}")
    return 0


def _load_eval(args):
    model, bag_cfg = load_checkpoint(args.checkpoint)
    data = load_bags(read_manifest(args.manifest), args.split, bag_cfg)
    return model, data, _out_dir(args)


def cmd_eval(args) -> int:
    model, data, out = _load_eval(args)
    out.mkdir(parents=True, exist_ok=True)
    report = evaluate(model, data, args.bin_width)
    write_report_csv(report, out / "report.csv")
    write_subjects_csv(report, out / "subjects.csv")
    write_sigma_csv(report.sigma, out / "sigma.csv")
    print(f"MAE {report.mae:.3f}  RMSE {report.rmse:.3f}  PCC {report.pcc:.4f}")
    return 0


def cmd_attention(args) -> int:
    model, data, out = _load_eval(args)
    records = export_attention(model, data, out)
    print(f"exported {len(records)} attention records; top-2 in planted slab: {localization_rate(records):.1%}")
    return 0


def cmd_ablate(args) -> int:
    train_cfg, model_cfg, bag_cfg = _configs(args)
    man = read_manifest(args.manifest)
    data = tuple(load_bags(man, s, bag_cfg) for s in ("train", "val", "test"))
    model_cfg = _with_input_size(model_cfg, data[0].x)
    variants = [v.strip() for v in args.variants.split(",")]
    unknown = set(variants) - set(VARIANTS)
    if unknown:
        raise ConfigError(f"unknown variants {sorted(unknown)}; choose from {list(VARIANTS)}")
    runs = ablate(train_cfg, data, model_cfg, variants, args.seeds, man)
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    write_ablation_csv(runs, out / "ablation.csv")
    for r in runs:
        print(f"{r.variant:16s} seed {r.seed}: MAE {r.report.mae:.3f}  PCC {r.report.pcc:.4f}")
    return 0


def cmd_sigma(args) -> int:
    with open(args.subjects, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ConfigError(f"{args.subjects} has no subject rows")
    try:
        true = [float(r["true_age"]) for r in rows]
        pred = [float(r["pred_age"]) for r in rows]
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{args.subjects}: expected true_age and pred_age columns") from exc
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    write_sigma_csv(sigma_profile(true, pred, args.bin_width), out / "sigma.csv")
    print(f"wrote {out / 'sigma.csv'}")
    return 0


COMMANDS = {
    "synth": cmd_synth, "bag": cmd_bag, "train": cmd_train, "eval": cmd_eval,
    "attention": cmd_attention, "ablate": cmd_ablate, "sigma": cmd_sigma,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except NumericDivergence as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, FormatError, DegenerateInputError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
