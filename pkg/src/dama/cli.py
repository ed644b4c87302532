"""Command-line entry point: ``dama {gen,pretrain,eval,ablate,mask-trace}``.

Exit codes: 0 success, 1 I/O or format error, 2 configuration error,
3 numeric abort.
"""

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .data import SynthConfig, generate, read_mcs, write_mcs
from .errors import ConfigError, FormatError, NumericError
from .evaluation import (ABLATION_FIELDS, EvalConfig, ablate, evaluate, mask_trace,
                         random_init_model)
from .trainer import TrainConfig, load_checkpoint, pretrain

log = logging.getLogger("dama")


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc


def _sibling(path, suffix):
    p = Path(path)
    return p.with_name(p.stem + suffix)


def cmd_gen(args):
    raw = _read_json(args.config)
    n = int(args.n if args.n is not None else raw.pop("n", 500))
    raw.pop("n", None)
    cfg = SynthConfig.from_dict(raw)
    if args.seed is not None:
        cfg.seed = args.seed
    ds = generate(cfg, n)
    write_mcs(args.out, ds)
    log.info("wrote %d images to %s", n, args.out)


def cmd_pretrain(args):
    cfg = TrainConfig.load(args.config)
    ds = read_mcs(args.data)
    metrics = args.metrics or _sibling(args.out, ".metrics.csv")
    state = pretrain(cfg, ds, epochs=args.epochs, seed=args.seed, checkpoint_path=args.out,
                     save_every=args.save_every, metrics_path=metrics)
    if not args.no_figures:
        from .plotting import plot_metrics

        plot_metrics(state.metrics, _sibling(metrics, ".png"))
    last = state.metrics[-1]
    print(f"steps={state.step} L_total={last['L_total']:.6f} checkpoint={args.out} metrics={metrics}")


def _eval_config(args, extra=None):
    fields = dict(extra or {})
    mode = {"probe": "linear_probe"}.get(args.mode, args.mode)
    fields.update(mode=mode, fraction=args.fraction, folds=args.folds)
    if args.epochs is not None:
        fields["epochs"] = args.epochs
    if args.lr is not None:
        fields["lr"] = args.lr
    if args.seed is not None:
        fields["seed"] = args.seed
    if fields["mode"] == "finetune":
        fields.setdefault("lr", 1e-3)
        fields.setdefault("epochs", 20)
    return EvalConfig(**fields)


def cmd_eval(args):
    state = load_checkpoint(args.ckpt)
    ds = read_mcs(args.data)
    cfg = _eval_config(args)
    model = random_init_model(state.config) if args.random_init else state.branch1
    report = evaluate(model, ds, cfg, state.config.patch_size)
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(out)
        w.writerow(["fold", "accuracy"])
        for i, acc in enumerate(report.fold_accuracy):
            w.writerow([i, f"{acc:.6f}"])
        w.writerow(["mean", f"{report.mean:.6f}"])
        w.writerow(["std", f"{report.std:.6f}"])
    finally:
        if args.out:
            out.close()


def cmd_ablate(args):
    grid = _read_json(args.grid)
    base = TrainConfig.from_dict(grid.get("base", {}))
    ev = EvalConfig(**grid.get("eval", {}))
    if args.seed is not None:
        ev.seed = args.seed
    seeds = grid.get("seeds", [0])
    ds = read_mcs(args.data)
    eval_ds = read_mcs(args.eval_data) if args.eval_data else ds
    rows = ablate(grid, ds, base=base, eval_cfg=ev, seeds=seeds, eval_dataset=eval_ds)
    with open(args.out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATION_FIELDS)
        w.writeheader()
        w.writerows(rows)
    if not args.no_figures:
        from .plotting import plot_ablation

        plot_ablation(rows, _sibling(args.out, ".png"))


def cmd_mask_trace(args):
    state = load_checkpoint(args.ckpt)
    ds = read_mcs(args.data)
    if not 0 <= args.index < len(ds):
        raise ConfigError(f"image index {args.index} outside dataset of {len(ds)}")
    rng = np.random.default_rng(args.seed if args.seed is not None else state.config.seed)
    records = mask_trace(state.branch1, state.config, ds.images[args.index], args.steps, rng)
    n = len(records[0].m1) if records else 0
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "row"] + [f"p{i}" for i in range(n)])
        for rec in records:
            w.writerow([rec.step, "m1"] + [int(v) for v in rec.m1])
            w.writerow([rec.step, "loss"] + [repr(float(v)) for v in rec.loss])
            w.writerow([rec.step, "m2"] + [int(v) for v in rec.m2])
    if not args.no_figures and records:
        from .plotting import plot_mask_trace

        plot_mask_trace(records, state.config.vit_config().grid, _sibling(args.out, ".png"))


def build_parser():
    parser = argparse.ArgumentParser(prog="dama", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(func=fn)
        p.add_argument("--seed", type=int, default=None)
        return p

    p = add("gen", cmd_gen, "generate a synthetic MCS dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=None)

    p = add("pretrain", cmd_pretrain, "dual-branch pretraining")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--metrics", default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--save-every", type=int, default=None)
    p.add_argument("--no-figures", action="store_true")

    p = add("eval", cmd_eval, "linear probe / finetune evaluation")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=("probe", "linear_probe", "finetune"), default="probe")
    p.add_argument("--fraction", type=float, default=1.0)
    p.add_argument("--folds", type=int, default=10)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--random-init", action="store_true")
    p.add_argument("--out", default=None)

    p = add("ablate", cmd_ablate, "pretrain + evaluate over a config grid")
    p.add_argument("--grid", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--eval-data", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--no-figures", action="store_true")

    p = add("mask-trace", cmd_mask_trace, "trace adaptive masks for one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=int, default=8)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--no-figures", action="store_true")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return 3
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
