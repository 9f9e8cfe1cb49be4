"""Command-line entry point: ``dmvae {train,eval,traverse,embed,selftest}``.

Run settings come from a flat ``key=value`` file (``--config``) overridden
by flags.  Every training run echoes its resolved settings to
``resolved_config.txt`` and stores them in each checkpoint, so evaluation
commands rebuild the same dataset from the checkpoint alone.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .data import DataError, IdxError, mnist_split, synth_bimodal
from .eval import classify_cross_modal, export_embeddings, score, traversal_grid, write_report
from .model import ModelConfig
from .objective import LossWeights
from .trainer import (
    CheckpointError,
    NumericalAbort,
    TrainConfig,
    load_checkpoint,
    model_from_checkpoint,
    train,
)

EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3

DATASETS = ("mnist", "fmnist", "synth")
DESK_TRAIN_COUNT = 10_000


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    dataset: str = "mnist"
    data_dir: str = ""
    out_dir: str = ""
    full: bool = False
    train_count: int = 0            # 0: dataset default
    test_count: int = 0
    paired_fraction: float = 0.01
    # model
    image_dim: int = 784
    label_classes: int = 10
    private_dim: int = 10
    shared_kind: str = "discrete"
    shared_dim: int = 10
    hidden_dim: int = 256
    temperature: float = 0.66
    # loss
    lambda_image: float = 1.0
    lambda_label: float = 50.0
    beta_tc: float = 3.0
    beta_tc_shared: float = 0.0
    beta_kl: float = 1.0
    # trainer
    epochs: int = 60
    batch_size: int = 100
    lr: float = 1e-3
    seed: int = 0
    eval_every: int = 5
    checkpoint_every: int = 0

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.image_dim, self.label_classes, self.private_dim,
                           self.shared_kind, self.shared_dim, self.hidden_dim, self.temperature)

    def loss_weights(self) -> LossWeights:
        return LossWeights((self.lambda_image, self.lambda_label), self.beta_tc,
                           self.beta_tc_shared, 1, self.beta_kl)

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.epochs, self.batch_size, self.lr, self.seed,
                           self.eval_every, self.checkpoint_every, self.out_dir or None)

    def as_text(self) -> str:
        return "".join(f"{k}={_fmt(v)}\n" for k, v in asdict(self).items())


SYNTH_DEFAULTS = {"image_dim": 16, "label_classes": 4, "shared_dim": 4, "private_dim": 2,
                  "train_count": 2000, "test_count": 500, "paired_fraction": 0.05}


def _fmt(v) -> str:
    return str(v).lower() if isinstance(v, bool) else str(v)


def _coerce(name: str, raw):
    kinds = {f.name: f.type for f in fields(RunConfig)}
    if name not in kinds:
        raise ConfigError(f"unknown config key {name!r}")
    kind = kinds[name]
    try:
        if kind in ("int", int):
            return int(raw)
        if kind in ("float", float):
            return float(raw)
        if kind in ("bool", bool):
            if isinstance(raw, bool):
                return raw
            if str(raw).lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return str(raw).lower() in ("true", "1", "yes")
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None
    return str(raw)


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Flat ``key=value`` lines; ``#`` starts a comment, blank lines are skipped."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{n}: expected key=value, got {line!r}")
        key = key.strip()
        out[key] = _coerce(key, value.strip())
    return out


def resolve_config(file_values: dict, overrides: dict, env_data_dir: str | None = None) -> RunConfig:
    """Defaults, then dataset defaults, then the config file, then flags."""
    merged = {**file_values, **{k: v for k, v in overrides.items() if v is not None}}
    dataset = merged.get("dataset", RunConfig.dataset)
    if dataset not in DATASETS:
        raise ConfigError(f"dataset must be one of {DATASETS}, got {dataset!r}")
    base = dict(SYNTH_DEFAULTS) if dataset == "synth" else {}
    values = {**base, **merged}
    if not values.get("data_dir") and env_data_dir:
        values["data_dir"] = env_data_dir
    cfg = RunConfig(**{k: _coerce(k, v) for k, v in values.items()})
    if not 0.0 <= cfg.paired_fraction <= 1.0:
        raise ConfigError(f"paired_fraction must lie in [0, 1], got {cfg.paired_fraction}")
    try:
        cfg.model_config()
        cfg.loss_weights()
    except ValueError as e:
        raise ConfigError(str(e)) from None
    return cfg


def config_from_run_info(run: dict) -> RunConfig:
    return RunConfig(**{k: _coerce(k, v) for k, v in run.items()})


def load_dataset(cfg: RunConfig):
    if cfg.dataset == "synth":
        return synth_bimodal(cfg.train_count, cfg.label_classes, cfg.seed,
                             test_count=cfg.test_count, paired_fraction=cfg.paired_fraction)
    if not cfg.data_dir:
        raise DataError("no data directory: pass --data-dir or set DMVAE_DATA_DIR")
    train_count = None if cfg.full else (cfg.train_count or DESK_TRAIN_COUNT)
    return mnist_split(cfg.data_dir, cfg.paired_fraction, cfg.seed, train_count,
                       cfg.test_count or None)


# --- commands -----------------------------------------------------------------

_OVERRIDE_FLAGS = ("dataset", "data_dir", "out_dir", "seed", "paired_fraction", "shared_kind",
                   "beta_tc", "lambda_label", "temperature", "epochs")


def _run_config(args) -> RunConfig:
    file_values = {}
    if args.config:
        path = Path(args.config)
        try:
            text = path.read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
        file_values = parse_config_text(text, str(path))
    overrides = {key: getattr(args, key) for key in _OVERRIDE_FLAGS}
    overrides["full"] = True if args.full else None
    return resolve_config(file_values, overrides, os.environ.get("DMVAE_DATA_DIR"))


def _out_dir(value) -> Path:
    if not value:
        raise ConfigError("an output directory is required (--out-dir or out_dir=)")
    out = Path(value)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(args) -> int:
    cfg = _run_config(args)
    out = _out_dir(cfg.out_dir)
    (out / "resolved_config.txt").write_text(cfg.as_text())
    dataset = load_dataset(cfg)
    run_info = {k: _fmt(v) for k, v in asdict(cfg).items()}
    result = train(cfg.model_config(), dataset, cfg.loss_weights(), cfg.train_config(),
                   run_info=run_info)
    last = result.metrics[-1] if result.metrics else {}
    print(f"trained {result.checkpoint.epoch} epochs; test_accuracy={last.get('test_accuracy')}")
    print(f"run directory: {out}")
    return 0


def _checkpoint_and_config(args):
    ckpt = load_checkpoint(args.checkpoint)
    if not ckpt.run:
        raise CheckpointError(f"{args.checkpoint}: checkpoint carries no run settings")
    cfg = config_from_run_info(ckpt.run)
    if args.data_dir:
        cfg.data_dir = args.data_dir
    elif not cfg.data_dir:
        cfg.data_dir = os.environ.get("DMVAE_DATA_DIR", "")
    return ckpt, cfg


def cmd_eval(args) -> int:
    ckpt, cfg = _checkpoint_and_config(args)
    out = _out_dir(args.out_dir)
    model = model_from_checkpoint(ckpt)
    dataset = load_dataset(cfg)
    mode = "multilabel" if model.config.multilabel else "single"
    report = score(classify_cross_modal(model, dataset.test_images), dataset.test_labels, mode)
    write_report(out / "eval_report.txt", report,
                 {"checkpoint": Path(args.checkpoint).name, "epoch": ckpt.epoch})
    print(f"accuracy={report.accuracy:.4f}")
    if mode == "multilabel":
        print(f"f1_macro={report.f1_macro:.4f}")
    return 0


def cmd_traverse(args) -> int:
    ckpt, cfg = _checkpoint_and_config(args)
    out = _out_dir(args.out_dir)
    model = model_from_checkpoint(ckpt)
    dataset = load_dataset(cfg)
    path = out / "traversal.pgm"
    pixels = traversal_grid(model, dataset.test_images[:args.rows], path)
    print(f"wrote {path} ({pixels.shape[1]}x{pixels.shape[0]})")
    return 0


def cmd_embed(args) -> int:
    ckpt, cfg = _checkpoint_and_config(args)
    out = _out_dir(args.out_dir)
    model = model_from_checkpoint(ckpt)
    dataset = load_dataset(cfg)
    path = out / "embeddings.csv"
    n = export_embeddings(model, dataset.test_images, dataset.test_labels, path)
    print(f"wrote {path} ({n} rows)")
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run_all
    results = run_all()
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return 0 if all(ok for _, ok, _ in results) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dmvae", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write a run directory")
    p.add_argument("--config", help="flat key=value settings file")
    p.add_argument("--dataset", choices=DATASETS)
    p.add_argument("--data-dir")
    p.add_argument("--out-dir")
    p.add_argument("--seed", type=int)
    p.add_argument("--paired-fraction", type=float)
    p.add_argument("--shared-kind", choices=("continuous", "discrete"))
    p.add_argument("--beta-tc", type=float, help="TC weight on the private latent")
    p.add_argument("--lambda-label", type=float, help="label reconstruction weight")
    p.add_argument("--temperature", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--full", action="store_true",
                   help=f"use the whole training set instead of the first {DESK_TRAIN_COUNT}")
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (
            ("eval", cmd_eval, "cross-modal classification report"),
            ("traverse", cmd_traverse, "shared-space traversal grid (PGM)"),
            ("embed", cmd_embed, "latent embeddings of the test set (CSV)")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("checkpoint")
        p.add_argument("--out-dir", required=True)
        p.add_argument("--data-dir", help="overrides the directory recorded in the checkpoint")
        if name == "traverse":
            p.add_argument("--rows", type=int, default=10, help="style source images")
        p.set_defaults(func=func)

    p = sub.add_parser("selftest", help="property checks that need no dataset")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, IdxError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericalAbort as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
