"""Command-line interface: ``stq train``, ``stq eval`` and ``stq report``."""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

from . import config as C
from . import modelfile
from . import report as R
from .data import Dataset, augment_cifar, gaussian_blobs, load_cifar10, load_mnist
from .layers import build_lenet5, build_mlp, build_model, build_vgg7, build_vgg16
from .trainer import TrainingDiverged, evaluate, train

CONFIG_FILE = "config.ini"
MODEL_FILE = "model.stqw"
BLOBS_TRAIN, BLOBS_TEST = 2000, 1000
BLOBS_TEST_SEED_OFFSET = 100

# ValueError covers config, data-format, model-format and codec errors.
USER_ERRORS = (ValueError, FileNotFoundError, TrainingDiverged)


def model_spec(cfg: C.RunConfig):
    mode = cfg.train.mode
    if cfg.model == "lenet5":
        return build_lenet5(mode)
    if cfg.model == "vgg7":
        return build_vgg7(mode, width=cfg.width)
    if cfg.model == "vgg16":
        return build_vgg16(mode, width=cfg.width)
    return build_mlp(cfg.mlp_sizes, mode)


def load_data(cfg: C.RunConfig) -> tuple[Dataset, Dataset]:
    if cfg.dataset == "blobs":
        dim, classes = cfg.mlp_sizes[0], cfg.mlp_sizes[-1]
        tr = gaussian_blobs(cfg.train_subset or BLOBS_TRAIN, dim, classes, seed=cfg.seed)
        te = gaussian_blobs(cfg.test_subset or BLOBS_TEST, dim, classes, seed=cfg.seed + BLOBS_TEST_SEED_OFFSET,
                            split="test")
        return tr, te
    directory = cfg.data_dir
    if not directory:
        raise C.ConfigError(f"dataset {cfg.dataset} needs a data directory (--data-dir or [run] data_dir)")
    tr, te = (load_mnist if cfg.dataset == "mnist" else load_cifar10)(directory)
    if cfg.train_subset:
        tr = tr.subset(cfg.train_subset, seed=cfg.seed)
    if cfg.test_subset:
        te = te.subset(cfg.test_subset, seed=cfg.seed)
    return tr, te


def run_dir_name(cfg: C.RunConfig, now: float | None = None) -> str:
    stamp = time.strftime("%Y%m%d-%H%M%S", time.localtime(now))
    return f"{stamp}-{cfg.digest()}"


def _resolve(args) -> C.RunConfig:
    cfg = C.load(args.config) if args.config else C.RunConfig()
    return C.with_overrides(
        cfg,
        data_dir=args.data_dir,
        out_dir=args.out_dir,
        seed=args.seed,
    )


def cmd_train(args) -> int:
    cfg = _resolve(args)
    train_data, test_data = load_data(cfg)
    spec = model_spec(cfg)
    model = build_model(spec, seed=cfg.seed, per_filter_mu=cfg.train.per_filter_mu)
    augment = augment_cifar if (cfg.train.augment and cfg.dataset == "cifar10") else None

    base = Path(cfg.out_dir) / run_dir_name(cfg)
    run_dir, n = base, 1
    while run_dir.exists():
        n += 1
        run_dir = base.with_name(f"{base.name}-{n}")
    run_dir.mkdir(parents=True)
    (run_dir / CONFIG_FILE).write_text(C.dump(cfg))

    model, rep = train(model, train_data, test_data, cfg.train, augment=augment)

    R.write_report(run_dir, rep)
    R.write_beta_trajectory(run_dir, rep.beta_trajectory)
    R.save_latent(run_dir, model)
    modelfile.save(model, run_dir / MODEL_FILE)
    R.emit_report(run_dir)

    print(f"run directory: {run_dir}")
    print(f"final accuracy: {rep.final_accuracy:.2f}%  (best during training {rep.best_val_accuracy:.2f}%)")
    print(f"depths: {rep.depth_string}")
    print(f"compression ratio: {rep.compression_ratio:.2f}")
    return 0


def cmd_eval(args) -> int:
    if not args.model:
        raise C.ConfigError("eval needs --model PATH")
    model_path = Path(args.model)
    if model_path.is_dir():
        model_path = model_path / MODEL_FILE
    if args.config:
        cfg = _resolve(args)
    else:
        sibling = model_path.parent / CONFIG_FILE
        cfg = C.load(sibling) if sibling.exists() else C.RunConfig()
        cfg = C.with_overrides(cfg, data_dir=args.data_dir, seed=args.seed)
    if not model_path.exists():
        raise FileNotFoundError(f"model file {model_path} not found")
    model = modelfile.load(model_path)
    train_data, test_data = load_data(cfg)
    data = train_data if args.split == "train" else test_data
    acc = evaluate(model, data, deployed=True, batch_size=cfg.train.eval_batch_size)
    print(f"{args.split} accuracy: {acc:.2f}% on {len(data)} examples")
    return 0


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    if not run_dir.is_dir():
        raise R.MissingArtifact(f"run directory {run_dir} not found")
    rows = R.emit_report(run_dir)
    rep = R.read_report(run_dir)
    print(R.format_summary(rows))
    print(f"depths: {rep['depth_string']}  compression ratio: {rep['compression_ratio']:.2f}  "
          f"final accuracy: {rep['final_accuracy']:.2f}%")
    print(f"wrote {run_dir / R.SUMMARY_FILE} and {run_dir / R.HIST_DIR}/")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stq", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="INI run configuration")
        sp.add_argument("--data-dir", help="dataset directory (overrides the config)")
        sp.add_argument("--seed", type=int, help="random seed (overrides the config)")

    t = sub.add_parser("train", help="train a model and write a run directory")
    common(t)
    t.add_argument("--out-dir", help="parent directory for the run folder")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="top-1 accuracy of a packed model")
    common(e)
    e.add_argument("--model", help="packed model file or run directory")
    e.add_argument("--split", choices=("train", "test"), default="test")
    e.set_defaults(func=cmd_eval, out_dir=None)

    r = sub.add_parser("report", help="histogram CSVs and per-layer summary for a run")
    r.add_argument("run_dir")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except USER_ERRORS as e:
        print(f"stq {args.command}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
