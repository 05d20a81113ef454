"""Command-line interface.

Subcommands: ``train``, ``prune``, ``eval``, ``trace``, ``report``,
``gen-data``.  Every failure path exits nonzero and prints a single line
``error category=<category>: <message>`` on stderr; success exits 0.
"""

import argparse
import json
import os
import sys

from . import config as config_mod
from . import data as data_mod
from . import detector as det
from . import train as train_mod
from .checkpoint import read_checkpoint, write_checkpoint
from .errors import LdtError


def _load_config(args):
    if getattr(args, "config", None):
        cfg = config_mod.load(args.config)
    else:
        cfg = config_mod.ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
        cfg.data.seed = args.seed
    if getattr(args, "out", None):
        cfg.out_dir = args.out
    return cfg


def _load_model(cfg, path):
    ckpt = read_checkpoint(path)
    return train_mod.model_from_checkpoint(cfg, ckpt), ckpt


def _apply_prune_flags(cfg, args):
    if getattr(args, "rate", None) is not None:
        cfg.prune.target_rate = args.rate
    if getattr(args, "rounds", None) is not None:
        cfg.prune.rounds = args.rounds
    if getattr(args, "utility", None):
        cfg.prune.utility_source = args.utility
    if getattr(args, "no_location", False):
        cfg.prune.use_location = False


def cmd_gen_data(args):
    cfg = _load_config(args)
    out = cfg.out_dir
    os.makedirs(out, exist_ok=True)
    for split in ("train", "val"):
        data_mod.export_split(cfg.data, split, out)
        n = cfg.data.n_train if split == "train" else cfg.data.n_val
        print(f"{split}: {n} samples -> {out}")
    return 0


def cmd_train(args):
    cfg = _load_config(args)
    out = cfg.out_dir
    os.makedirs(out, exist_ok=True)
    config_mod.save(cfg, os.path.join(out, "config.txt"))
    model, rows, opt = train_mod.run_train(cfg, out_dir=out,
                                           with_ldt=not args.no_ldt)
    ckpt_path = os.path.join(out, "model.ldtc")
    write_checkpoint(
        train_mod.model_to_checkpoint(cfg, model, opt,
                                      epoch=cfg.optim.epochs),
        ckpt_path,
    )
    final = rows[-1]["val_map"] if rows else float("nan")
    print(f"trained {cfg.optim.epochs} epochs; val mAP {final:.4f}; "
          f"checkpoint {ckpt_path}")
    return 0


def cmd_prune(args):
    cfg = _load_config(args)
    _apply_prune_flags(cfg, args)
    out = cfg.out_dir
    os.makedirs(out, exist_ok=True)
    model, _ckpt = _load_model(cfg, args.checkpoint)
    train_samples = data_mod.generate_split(cfg.data, "train")
    val_samples = data_mod.generate_split(cfg.data, "val")
    rows, model, mask_history = train_mod.prune_retrain_schedule(
        cfg, model, train_samples, val_samples, method=args.method,
        out_dir=out,
    )
    ckpt_path = os.path.join(out, f"pruned_{args.method}.ldtc")
    write_checkpoint(
        train_mod.model_to_checkpoint(cfg, model, epoch=0,
                                      mask_history=mask_history),
        ckpt_path,
    )
    last = rows[-1] if rows else {"val_map": float("nan"), "params": 0}
    print(f"pruned {len(rows)} rounds; params {last['params']}; "
          f"val mAP {last['val_map']:.4f}; checkpoint {ckpt_path}")
    return 0


def cmd_eval(args):
    cfg = _load_config(args)
    model, _ckpt = _load_model(cfg, args.checkpoint)
    report = train_mod.run_eval(cfg, model, split=args.split)
    out = cfg.out_dir
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "eval.json"), "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    rows = [["map", report["map"]],
            ["params", report["params"]],
            ["macs", report["macs"]]]
    rows += [[f"ap_class_{c}", ap]
             for c, ap in sorted(report["per_class"].items())]
    train_mod._write_csv(os.path.join(out, "eval.csv"),
                         ["metric", "value"], rows)
    print(f"mAP {report['map']:.4f}; params {report['params']}; "
          f"macs {report['macs']}")
    return 0


def cmd_trace(args):
    cfg = _load_config(args)
    _apply_prune_flags(cfg, args)
    out = cfg.out_dir
    os.makedirs(out, exist_ok=True)
    model, _ckpt = _load_model(cfg, args.checkpoint)
    train_samples = data_mod.generate_split(cfg.data, "train")
    table, _sols = train_mod.trace_importance(cfg, model, train_samples)
    from . import pruning
    groups = pruning.build_coupling_groups(model)
    rows = []
    for wname in table.importance:
        for c in range(len(table.importance[wname])):
            root = groups.find((wname, c))
            rows.append((0, wname, c, groups.order[root],
                         float(table.utility[wname][c]),
                         float(table.importance[wname][c]), 1))
    train_mod._write_csv(
        os.path.join(out, "importance.csv"),
        ["round", "layer", "channel", "group", "utility", "importance",
         "kept"], rows)
    train_mod.trace_stability(cfg, model, train_samples, out_dir=out)
    print(f"traced {len(rows)} channels -> {out}/importance.csv")
    return 0


def cmd_report(args):
    from . import report as report_mod
    cfg = _load_config(args)
    made = report_mod.generate_report(cfg.out_dir)
    for path in made:
        print(path)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="ldtprune",
        description="Location-aware discriminant training and "
                    "discriminant-traced channel pruning",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False):
        p.add_argument("--config", help="config file (key = value lines)")
        p.add_argument("--seed", type=int, help="override the run seed")
        p.add_argument("--out", help="output directory")
        if checkpoint:
            p.add_argument("--checkpoint", required=True,
                           help="checkpoint to load")

    p = sub.add_parser("gen-data", help="export the synthetic dataset")
    common(p)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train the detector")
    common(p)
    p.add_argument("--no-ldt", action="store_true",
                   help="train with the plain detection loss only")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("prune", help="prune and retrain from a checkpoint")
    common(p, checkpoint=True)
    p.add_argument("--rate", type=float, help="target channel removal rate")
    p.add_argument("--rounds", type=int, help="number of prune rounds")
    p.add_argument("--utility", choices=["neck", "det"],
                   help="channel-utility source")
    p.add_argument("--no-location", action="store_true",
                   help="disable the location-aware attention mask")
    p.add_argument("--method", choices=["ldt", "random", "l1"],
                   default="ldt", help="channel scoring method")
    p.set_defaults(fn=cmd_prune)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p, checkpoint=True)
    p.add_argument("--split", choices=["train", "val"], default="val")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("trace", help="compute channel importances")
    common(p, checkpoint=True)
    p.add_argument("--utility", choices=["neck", "det"])
    p.add_argument("--no-location", action="store_true")
    p.set_defaults(fn=cmd_trace)

    p = sub.add_parser("report", help="render figures from a run directory")
    common(p)
    p.set_defaults(fn=cmd_report)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except LdtError as e:
        msg = str(e).replace("\n", " ")
        sys.stderr.write(f"error category={e.category}: {msg}\n")
        return 2
    except OSError as e:
        sys.stderr.write(f"error category=io: {e}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
