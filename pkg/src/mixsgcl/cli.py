"""Command-line entry point: prepare, train, evaluate, bench, sweep, export-embeddings."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import shutil
import sys
from dataclasses import replace
from pathlib import Path

from threadpoolctl import threadpool_limits

from .config import ConfigError, RunConfig, format_config, parse_pairs, read_config_file
from .dataset import (
    DatasetError,
    apply_k_core,
    build_dataset,
    load_cache,
    load_interactions,
    save_cache,
    subsample_train,
)
from .evaluator import EvaluationError, evaluate
from .propagation import export_embeddings, load_embeddings
from .trainer import LR_GRID, TrainingError, fit, save_checkpoint

log = logging.getLogger("mixsgcl")

DATA_DIR_ENV = "MIXSGCL_DATA_DIR"


class CliError(Exception):
    pass


def resolve(path: str | os.PathLike) -> Path:
    """Relative paths are taken against $MIXSGCL_DATA_DIR when it is set."""
    p = Path(path)
    base = os.environ.get(DATA_DIR_ENV)
    if base and not p.is_absolute():
        return Path(base) / p
    return p


# flag name -> config key, for flags that override config-file values
_OVERRIDES = {
    "model": "model", "tau": "tau", "lam": "lam", "view_mode": "view_mode", "noise_eps": "noise_eps",
    "n_mix": "n_mix", "batch_size": "batch_size", "dim": "embedding_dim", "lr": "lr",
    "layers": "layers", "epochs": "max_epochs", "patience": "patience", "eval_k": "eval_k",
    "seed": "seed", "dtype": "dtype", "threads": "threads", "k_core": "k_core", "ratios": "ratios",
    "split_seed": "split_seed", "train_keep_ratio": "train_keep_ratio", "delimiter": "delimiter",
    "timestamp_col": "timestamp_col",
}


def load_run_config(args) -> RunConfig:
    pairs = read_config_file(resolve(args.config)) if getattr(args, "config", None) else {}
    for flag, key in _OVERRIDES.items():
        value = getattr(args, flag, None)
        if value is not None:
            pairs[key] = str(value)
    for flag in ("exclude_self", "alpha_per_node", "separate_terms"):
        if getattr(args, flag, False):
            pairs[flag] = "true"
    return parse_pairs(pairs)


def cmd_prepare(args) -> int:
    cfg = load_run_config(args)
    raw = load_interactions(resolve(args.input), delimiter=cfg.delimiter, timestamp_col=cfg.timestamp_col)
    n_raw = len(raw)
    raw = apply_k_core(raw, cfg.k_core)
    dataset = build_dataset(raw, cfg.split_config())
    out = resolve(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_cache(dataset, out)
    stats = dataset.stats()
    print(f"read {n_raw} interactions, {stats['interactions']} after {cfg.k_core}-core")
    print(f"users {stats['users']}  items {stats['items']}  sparsity {100 * stats['sparsity']:.4f}%")
    print(f"train/valid/test {stats['train']}/{stats['valid']}/{stats['test']} -> {out}")
    return 0


def _load_dataset(args, cfg: RunConfig):
    dataset = load_cache(resolve(args.cache))
    return subsample_train(dataset, cfg.train_keep_ratio, cfg.split_seed)


def cmd_train(args) -> int:
    cfg = load_run_config(args)
    if args.dry_run:
        sys.stdout.write(format_config(cfg))
        return 0
    dataset = _load_dataset(args, cfg)
    with threadpool_limits(limits=cfg.threads):
        state, history = fit(dataset, cfg.train_config())
    out = resolve(args.out)
    save_checkpoint(out, state, history, cfg.train_config(), dataset, extra_config={"run": cfg.to_dict()})
    best = history.epochs[history.best_epoch - 1]
    print(f"{cfg.model}: {history.n_epochs} epochs ({history.stop_reason}), best epoch {history.best_epoch} "
          f"valid recall@{cfg.eval_k} {best.valid_recall:.4f} ndcg@{cfg.eval_k} {best.valid_ndcg:.4f}")
    print(f"checkpoint -> {out}")
    return 0


def _parse_ks(text: str) -> list[int]:
    try:
        ks = [int(k) for k in text.split(",") if k.strip()]
    except ValueError:
        raise CliError(f"--ks expects comma-separated integers, got {text!r}") from None
    if not ks or any(k < 1 for k in ks):
        raise CliError(f"--ks expects positive integers, got {text!r}")
    return ks


def _load_checkpoint_embeddings(checkpoint: Path, n_nodes: int):
    path = checkpoint / "embeddings.bin"
    if not path.exists():
        raise CliError(f"{checkpoint}: no embeddings.bin; is this a checkpoint directory?")
    try:
        final = load_embeddings(path)
    except ValueError as exc:
        raise CliError(f"malformed checkpoint: {exc}") from exc
    if final.shape[0] != n_nodes:
        raise CliError(f"checkpoint has {final.shape[0]} nodes but the dataset has {n_nodes}")
    return final


def cmd_evaluate(args) -> int:
    dataset = load_cache(resolve(args.cache))
    final = _load_checkpoint_embeddings(resolve(args.checkpoint), dataset.n_nodes)
    report = evaluate(final, dataset, args.split, ks=_parse_ks(args.ks))
    text = report.to_json()
    if args.out:
        resolve(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_bench(args) -> int:
    base = load_run_config(args)
    models = [m.strip() for m in args.models.split(",") if m.strip()]
    errors = []
    configs = []
    for m in models:
        try:
            configs.append(parse_pairs({"model": m}, base=base))
        except ConfigError as exc:
            errors += exc.errors
    if errors:
        raise ConfigError(errors)
    dataset = _load_dataset(args, base)
    out = resolve(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    k = base.eval_k
    summary = []
    with open(out, "w", newline="") as fh, threadpool_limits(limits=base.threads):
        writer = csv.writer(fh)
        writer.writerow(["model", "epoch", "wall_seconds", "loss", f"recall@{k}", f"ndcg@{k}", "threads"])
        for cfg in configs:
            _, history = fit(dataset, cfg.train_config())
            for rec in history.epochs:
                writer.writerow([cfg.model, rec.epoch, f"{rec.train_seconds:.6f}", f"{rec.loss:.8f}",
                                 f"{rec.valid_recall:.6f}", f"{rec.valid_ndcg:.6f}", base.threads])
            fh.flush()
            total = sum(r.train_seconds for r in history.epochs)
            summary.append([cfg.model, history.n_epochs, history.best_epoch,
                            f"{total / history.n_epochs:.6f}", f"{total:.6f}", base.threads])
            print(f"{cfg.model:8s} epochs {history.n_epochs:4d}  best {history.best_epoch:4d}  "
                  f"s/epoch {total / history.n_epochs:8.3f}  total {total:9.2f}s  threads {base.threads}")
    with open(f"{out}.summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "epochs", "best_epoch", "seconds_per_epoch", "total_seconds", "threads"])
        writer.writerows(summary)
    return 0


def cmd_sweep(args) -> int:
    """Grid over learning rates (and optionally temperatures); keeps the best validation NDCG."""
    base = load_run_config(args)
    lrs = [float(x) for x in args.lrs.split(",")] if args.lrs else list(LR_GRID)
    taus = [float(x) for x in args.taus.split(",")] if args.taus else [base.tau]
    dataset = _load_dataset(args, base)
    rows = []
    with threadpool_limits(limits=base.threads):
        for lr in lrs:
            for tau in taus:
                cfg = replace(base, lr=lr, tau=tau)
                errors = cfg.validate()
                if errors:
                    raise ConfigError(errors)
                _, history = fit(dataset, cfg.train_config())
                best = history.epochs[history.best_epoch - 1]
                rows.append({"lr": lr, "tau": tau, "best_epoch": history.best_epoch,
                             "valid_recall": best.valid_recall, "valid_ndcg": best.valid_ndcg})
                print(f"lr {lr:g} tau {tau:g}: ndcg@{base.eval_k} {best.valid_ndcg:.4f} (epoch {history.best_epoch})")
    best = max(rows, key=lambda r: r["valid_ndcg"])
    result = {"model": base.model, "runs": rows, "best": best}
    text = json.dumps(result, indent=2) + "\n"
    if args.out:
        resolve(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_export(args) -> int:
    dataset = load_cache(resolve(args.cache))
    checkpoint = resolve(args.checkpoint)
    final = _load_checkpoint_embeddings(checkpoint, dataset.n_nodes)
    out = resolve(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if out.resolve() == (checkpoint / "embeddings.bin").resolve():
        raise CliError("refusing to overwrite the checkpoint's own embeddings")
    export_embeddings(final, dataset, out)
    shutil.copyfile(checkpoint / "config.json", f"{out}.config.json")
    print(f"{final.shape[0]} x {final.shape[1]} embeddings -> {out}")
    return 0


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file; flags override it")
    p.add_argument("--model", choices=["bpr", "sslrec", "sgcl", "mixsgcl"])
    p.add_argument("--tau", type=float, help="contrastive temperature")
    p.add_argument("--lam", type=float, help="SSLRec contrastive weight")
    p.add_argument("--view-mode", choices=["identity", "noise"])
    p.add_argument("--noise-eps", type=float)
    p.add_argument("--exclude-self", action="store_true")
    p.add_argument("--n-mix", type=int, help="mixup rounds per batch")
    p.add_argument("--alpha-per-node", action="store_true")
    p.add_argument("--separate-terms", action="store_true")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--dim", type=int, help="embedding dimension")
    p.add_argument("--lr", type=float)
    p.add_argument("--layers", type=int)
    p.add_argument("--epochs", type=int, help="maximum epochs")
    p.add_argument("--patience", type=int)
    p.add_argument("--eval-k", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--dtype", choices=["float64", "float32"])
    p.add_argument("--threads", type=int)
    p.add_argument("--train-keep-ratio", type=float)
    p.add_argument("--split-seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mixsgcl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="k-core filter and split a raw interaction file")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True, help="binary dataset cache path")
    p.add_argument("--config")
    p.add_argument("--k-core", type=int)
    p.add_argument("--ratios", help="e.g. 0.8,0.1,0.1 or 8:1:1")
    p.add_argument("--split-seed", type=int)
    p.add_argument("--train-keep-ratio", type=float)
    p.add_argument("--delimiter", help="field delimiter (default tab; 'comma', 'space' accepted)")
    p.add_argument("--timestamp-col", type=int)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train one model and write a checkpoint directory")
    p.add_argument("--cache", required=True)
    p.add_argument("--out", default="checkpoint")
    p.add_argument("--dry-run", action="store_true", help="print the resolved config and exit")
    _add_model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="full-ranking Recall/NDCG of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cache", required=True)
    p.add_argument("--split", choices=["valid", "test"], default="test")
    p.add_argument("--ks", default="20,50")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("bench", help="per-epoch timing of several models on one dataset")
    p.add_argument("--cache", required=True)
    p.add_argument("--models", default="bpr,sgcl,mixsgcl")
    p.add_argument("--out", default="bench.csv")
    _add_model_flags(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("sweep", help="grid search over learning rate and temperature")
    p.add_argument("--cache", required=True)
    p.add_argument("--lrs", help=f"comma-separated (default {','.join(map(str, LR_GRID))})")
    p.add_argument("--taus", help="comma-separated temperatures (default: the configured tau)")
    p.add_argument("--out")
    _add_model_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("export-embeddings", help="write final embeddings plus token index")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cache", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print("invalid configuration:", file=sys.stderr)
        for err in exc.errors:
            print(f"  - {err}", file=sys.stderr)
        return 2
    except (CliError, DatasetError, EvaluationError, TrainingError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
