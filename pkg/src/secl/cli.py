"""Command-line interface: gen-data, train, eval, ablate, embed."""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import data as datamod
from . import report, trainer
from .model import load_checkpoint, save_checkpoint


def _cmd_gen_data(args):
    cfg = datamod.PhantomConfig()
    os.makedirs(args.out, exist_ok=True)
    ids = datamod.generate_dataset(args.out, args.subjects, args.seed, cfg)
    split = datamod.make_split(ids, args.labeled, args.unlabeled, args.test,
                               args.seed)
    datamod.write_split(os.path.join(args.out, "split.txt"), split)
    print(f"wrote {len(ids)} subjects to {args.out} "
          f"(labeled={len(split.labeled)}, unlabeled={len(split.unlabeled)}, "
          f"test={len(split.test)})")


def _load_config(args):
    overrides = {}
    for key in ("mode", "alpha", "tau", "epochs", "seed"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    if args.config:
        return trainer.RunConfig.load(args.config, overrides)
    return trainer.RunConfig(**overrides)


def _cmd_train(args):
    cfg = _load_config(args)
    split = trainer.load_split_for(args.data, args.split_file)
    os.makedirs(args.out, exist_ok=True)

    def progress(epoch, record):
        if epoch % 25 == 0 or epoch == cfg.epochs - 1:
            print(f"epoch {epoch}: sup={record['sup_loss']:.4f} "
                  f"con={record['con_loss']:.4f} dice={record['val_dice']:.4f}")

    student, teacher, log = trainer.train(cfg, split, args.data,
                                          progress=progress)
    ckpt = os.path.join(args.out, "checkpoint.secl")
    save_checkpoint(ckpt, student, teacher)
    log.write_csv(os.path.join(args.out, "train_log.csv"))
    cfg.save(os.path.join(args.out, "run_config.txt"))
    report.render_train_curves(log, os.path.join(args.out, "train_curves.png"))
    print(f"checkpoint: {ckpt}")


def _cmd_eval(args):
    split = trainer.load_split_for(args.data, args.split_file)
    ids = getattr(split, args.split.replace("-", "_"))
    student, _ = load_checkpoint(args.checkpoint)
    table = trainer.evaluate(student, ids, args.data)
    table.write_csv(args.out)
    report.render_metric_bars(
        table, os.path.splitext(args.out)[0] + ".png")
    agg = table.aggregate()
    hd = "n/a" if agg["hd"] is None else f"{agg['hd']:.3f}"
    print(f"aggregate dice={agg['dice']:.4f} jaccard={agg['jaccard']:.4f} hd={hd}")


def _cmd_ablate(args):
    cfg = _load_config(args)
    split = trainer.load_split_for(args.data, args.split_file)
    alphas = [float(a) for a in args.alphas.split(",")]
    rows = trainer.ablation_run(cfg, alphas, split, args.data)
    trainer.write_ablation_csv(args.out, rows)
    report.render_ablation(rows, os.path.splitext(args.out)[0] + ".png")
    for r in rows:
        print(f"alpha={r['alpha']}: dice={r['dice']:.4f}")


def _cmd_embed(args):
    split = trainer.load_split_for(args.data, args.split_file)
    student, _ = load_checkpoint(args.checkpoint)
    classes, embeddings, silhouette = trainer.export_embeddings(
        student, args.data, split.test, args.cubes, args.seed)
    trainer.write_embeddings_csv(args.out, classes, embeddings, silhouette)
    report.render_embeddings(np.asarray(classes), embeddings, silhouette,
                             os.path.splitext(args.out)[0] + ".png")
    print(f"silhouette={silhouette:.4f}")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="secl",
        description="Semi-supervised contrastive segmentation at desk scale")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a phantom corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--subjects", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--labeled", type=int, default=4)
    p.add_argument("--unlabeled", type=int, default=16)
    p.add_argument("--test", type=int, default=10)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train one run")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split-file")
    p.add_argument("--mode", choices=trainer.MODES)
    p.add_argument("--alpha", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test",
                   choices=("labeled", "unlabeled", "test"))
    p.add_argument("--split-file")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", help="alpha ablation sweep")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--alphas", default="0,0.8,0.9,0.99")
    p.add_argument("--out", required=True)
    p.add_argument("--split-file")
    p.add_argument("--mode", choices=trainer.MODES)
    p.add_argument("--tau", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("embed", help="export class-cube embeddings")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--cubes", type=int, default=60)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split-file")
    p.set_defaults(func=_cmd_embed)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except Exception as exc:  # one-line reason, nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
