"""Command-line interface: ``p2be {train,eval,corrupt,export-sim,defaults}``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from contextlib import nullcontext
from dataclasses import replace
from pathlib import Path

import numpy as np

from .attack import AttackConfig
from .config import ConfigError, DataConfig, defaults_dict, load_run_config
from .corruptions import (DEFAULT_PARAMS, KINDS, CorruptionSpec, ErrorTable, apply_corruption,
                          corruption_error, mean_corruption_error, mean_error_cifar_style,
                          read_baseline_csv, severity_ladder, write_error_csv)
from .datasets import make_patterns
from .encoders import (binarize_table, cosine_similarity_matrix, init_table, one_hot_codebook,
                       thermometer_codebook)
from .imageio import load_ppm_dir, read_ppm, write_pgm, write_ppm
from .training import (METRIC_COLUMNS, STEP_COLUMNS, CheckpointError, TrainConfig,
                       evaluate, load_checkpoint, rng_stream, save_checkpoint, train, write_csv)

logger = logging.getLogger("p2be")


class UsageError(Exception):
    pass


def load_data(data: DataConfig, seed: int):
    """Return ``(train_x, train_y, test_x, test_y)`` for a data section."""
    if data.source == "ppm":
        tx, ty = load_ppm_dir(data.train_dir)
        if data.test_dir:
            vx, vy = load_ppm_dir(data.test_dir)
        else:
            vx, vy = tx, ty
        return tx, ty, vx, vy
    tx, ty = make_patterns(data.n_train, data.n_classes, data.size, data.jitter,
                           seed=int(rng_stream(seed, "data/train").integers(2**31)))
    vx, vy = make_patterns(data.n_test, data.n_classes, data.size, data.jitter,
                           seed=int(rng_stream(seed, "data/test").integers(2**31)))
    return tx, ty, vx, vy


def _threads(n):
    if n is None:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


# -- train ------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    if args.seed is not None:
        cfg.train = replace(cfg.train, seed=args.seed)
    out = Path(args.out or cfg.output_dir)
    table = None
    if cfg.embedding_checkpoint:
        src = Path(cfg.embedding_checkpoint)
        if not src.exists():
            raise UsageError(f"embedding_checkpoint: {src} does not exist")
        table = load_checkpoint(src).table
        if table is None:
            raise UsageError(f"embedding_checkpoint: {src} holds no embedding table")
    tx, ty, vx, vy = load_data(cfg.data, cfg.train.seed)
    out.mkdir(parents=True, exist_ok=True)
    n_classes = int(max(ty.max(), vy.max()) + 1)
    with _threads(args.threads):
        result = train(cfg.train, tx, ty, vx, vy, attack=cfg.attack, table=table,
                       n_classes=n_classes)
    result.checkpoint.meta["data"] = json.loads(json.dumps(cfg.data.__dict__))
    result.checkpoint.meta["corruptions"] = cfg.corruptions
    save_checkpoint(result.checkpoint, out / "checkpoint.p2be")
    write_csv(out / "metrics.csv", result.metrics, METRIC_COLUMNS)
    write_csv(out / "steps.csv", result.steps, STEP_COLUMNS)
    err = result.model.error(vx, vy)
    print(f"clean_error,{err:.6f}")
    print(f"checkpoint,{out / 'checkpoint.p2be'}")
    return 0


# -- eval -------------------------------------------------------------------

def _eval_data(args, ckpt):
    if args.data:
        return load_ppm_dir(args.data)
    data = ckpt.meta.get("data")
    if data is None:
        raise UsageError("checkpoint carries no data description; pass --data DIR")
    _, _, vx, vy = load_data(DataConfig(**data), ckpt.config["seed"])
    return vx, vy


def cmd_eval(args) -> int:
    if args.corruptions and not args.baseline_csv and not args.no_ce:
        raise UsageError("--corruptions needs --baseline-csv for CE/mCE (or pass --no-ce)")
    path = Path(args.checkpoint)
    if not path.exists():
        raise UsageError(f"checkpoint {path} does not exist")
    ckpt = load_checkpoint(path)
    model = ckpt.model()
    images, labels = _eval_data(args, ckpt)
    specs = severity_ladder(KINDS, ckpt.meta.get("corruptions")) if args.corruptions else None
    attack = None
    if args.attack:
        attack = AttackConfig(steps=args.steps, epsilon=args.epsilon, step_size=args.step_size,
                              anneal_rate=args.anneal_rate)
    with _threads(args.threads):
        res = evaluate(model, images, labels, specs, attack, seed=args.seed)
    print("metric,value")
    print(f"clean_error,{res.clean_error:.6f}")
    if specs:
        if args.errors_csv:
            write_error_csv(args.errors_csv, res.corrupted)
        baseline = None
        if args.baseline_csv:
            base_all = read_baseline_csv(args.baseline_csv)
            missing = [k for k in res.corrupted if k not in base_all]
            if missing:
                raise UsageError(f"baseline CSV lacks entries for {missing[:3]}...")
            baseline = {k: base_all[k] for k in res.corrupted}
        table = ErrorTable(res.corrupted, baseline)
        print()
        print("kind,mean_error,CE")
        for kind in table.kinds:
            errs = [table.model_errors[(kind, s)] for s in range(1, 6)]
            ce = f"{corruption_error(table, kind):.3f}" if baseline else ""
            print(f"{kind},{np.mean(errs):.4f},{ce}")
        if baseline:
            print(f"mCE,,{mean_corruption_error(table):.3f}")
        print(f"mean_corrupted_error,{mean_error_cifar_style(table):.4f},")
    if attack is not None:
        print()
        print("encoder,epsilon,clean_error_pct,attacked_error_pct,summary")
        print(f"{model.encoder},{attack.epsilon:.6f},{100 * res.clean_error:.1f},"
              f"{100 * res.attacked_error:.1f},{100 * res.attacked_error:.1f} "
              f"({100 * res.clean_error:.1f})")
        if args.attack_csv:
            with open(args.attack_csv, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["index", "clean_correct", "adv_correct", "relaxed_loss_trace"])
                for i in range(len(labels)):
                    trace = ";".join(f"{v:.6f}" for v in res.attack_trace[i])
                    w.writerow([i, int(res.clean_correct[i]), int(res.adv_correct[i]), trace])
    return 0


# -- corrupt ----------------------------------------------------------------

def cmd_corrupt(args) -> int:
    if args.kind not in DEFAULT_PARAMS:
        raise UsageError(f"unknown kind {args.kind!r}; valid kinds: {', '.join(KINDS)}")
    if not 1 <= args.severity <= 5:
        raise UsageError(f"severity must be in 1..5, got {args.severity}")
    params = None
    if args.config:
        params = load_run_config(args.config).corruptions.get(args.kind)
    src = Path(args.image)
    if not src.exists():
        raise UsageError(f"image {src} does not exist")
    spec = CorruptionSpec(args.kind, args.severity, tuple(params) if params else None)
    write_ppm(args.out, apply_corruption(read_ppm(src), spec, args.seed))
    print("kind,severity,parameter")
    print(f"{spec.kind},{spec.severity},{spec.parameter!r}")
    return 0


# -- export-sim -------------------------------------------------------------

def cmd_export_sim(args) -> int:
    if args.checkpoint:
        path = Path(args.checkpoint)
        if not path.exists():
            raise UsageError(f"checkpoint {path} does not exist")
        ckpt = load_checkpoint(path)
        encoder = args.encoder or ckpt.meta["encoder"]
        dim = ckpt.meta["dim"]
        table = ckpt.table
    else:
        encoder = args.encoder or "p2be"
        dim = args.dim
        table = None
    if not 1 <= dim <= 256:
        raise UsageError(f"--dim must lie in [1, 256], got {dim}")
    if encoder == "rgb":
        raise UsageError("the rgb encoder has no binary codebook")
    if encoder == "one-hot":
        book = one_hot_codebook(dim)
    elif encoder == "thermometer":
        book = thermometer_codebook(dim)
    elif encoder == "p2be":
        if table is None:
            table = init_table(dim, rng_stream(args.seed, "embedding-init"))
        book = binarize_table(table)
    else:
        raise UsageError(f"unknown encoder {encoder!r}")
    sim = cosine_similarity_matrix(book)
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    write_pgm(prefix.with_suffix(".pgm"), np.rint(255 * np.clip(sim, 0, 1)).astype(np.uint8))
    with open(prefix.with_suffix(".csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in sim:
            w.writerow([f"{v:.6f}" for v in row])
    with open(prefix.parent / (prefix.stem + "_codebook.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["magnitude", "code"])
        for k, row in enumerate(book):
            w.writerow([k, "".join(str(int(b)) for b in row)])
    print("encoder,dim,pgm,csv")
    print(f"{encoder},{dim},{prefix.with_suffix('.pgm')},{prefix.with_suffix('.csv')}")
    return 0


def cmd_defaults(args) -> int:
    text = json.dumps(defaults_dict(), indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    d = defaults_dict()
    p = argparse.ArgumentParser(
        prog="p2be",
        description="Binary pixel embeddings: train, evaluate robustness, corrupt images, "
                    "export codebook similarity.  Run `p2be defaults` for every config default.")
    p.add_argument("--threads", type=int, default=None, help="cap BLAS worker threads")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train from a JSON run config",
                       description="Train defaults: " + json.dumps(d["train"]))
    t.add_argument("config")
    t.add_argument("--seed", type=int, default=None, help="override train.seed")
    t.add_argument("--out", default=None, help="override output_dir")
    t.set_defaults(func=cmd_train)

    a = AttackConfig()
    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--data", default=None, help="PPM directory with labels.csv")
    e.add_argument("--corruptions", action="store_true", help="evaluate all 7 kinds x 5 severities")
    e.add_argument("--baseline-csv", default=None, help="kind,severity,error baseline for CE/mCE")
    e.add_argument("--no-ce", action="store_true", help="skip CE/mCE (no baseline needed)")
    e.add_argument("--errors-csv", default=None, help="write per-(kind,severity) errors here")
    e.add_argument("--attack", action="store_true", help="run the LS-PGA attack")
    e.add_argument("--epsilon", type=float, default=a.epsilon, help=f"default {a.epsilon:.6f}")
    e.add_argument("--steps", type=int, default=a.steps, help=f"default {a.steps}")
    e.add_argument("--step-size", type=float, default=a.step_size, help=f"default {a.step_size}")
    e.add_argument("--anneal-rate", type=float, default=a.anneal_rate, help=f"default {a.anneal_rate}")
    e.add_argument("--attack-csv", default=None, help="per-sample attack CSV")
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("corrupt", help="corrupt a PPM image")
    c.add_argument("image")
    c.add_argument("kind", help="one of: " + ", ".join(KINDS))
    c.add_argument("severity", type=int)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", required=True)
    c.add_argument("--config", default=None, help="run config with corruption overrides")
    c.set_defaults(func=cmd_corrupt)

    s = sub.add_parser("export-sim", help="export the 256x256 codebook cosine similarity")
    s.add_argument("checkpoint", nargs="?", default=None)
    s.add_argument("--encoder", choices=("rgb", "one-hot", "thermometer", "p2be"), default=None)
    s.add_argument("--dim", type=int, default=TrainConfig().dim)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="output prefix (writes .pgm and .csv)")
    s.set_defaults(func=cmd_export_sim)

    f = sub.add_parser("defaults", help="print or write defaults.json")
    f.add_argument("--out", default=None)
    f.set_defaults(func=cmd_defaults)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"p2be {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (CheckpointError, OSError, ValueError, FloatingPointError) as exc:
        print(f"p2be {args.command}: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
