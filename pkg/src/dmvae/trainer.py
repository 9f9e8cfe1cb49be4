"""Adam optimisation loop with named RNG streams, checkpoints and a metrics CSV."""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import DatasetSplit, epoch_batches
from .model import DMVAE, ModelConfig, NoiseSource
from .objective import BREAKDOWN_KEYS, LossWeights, dmvae_loss
from .tensor import Tape

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
CHECKPOINT_MAGIC = b"DMVCKPT\n"
STREAMS = ("weights", "shuffle", "gaussian", "gumbel", "mask")
METRIC_COLUMNS = ("epoch",) + BREAKDOWN_KEYS + ("test_accuracy", "test_f1", "wall_seconds")


class NumericalAbort(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


def stream_rng(seed: int, name: str) -> np.random.Generator:
    """Independent generator per named stream, derived from the run seed."""
    return np.random.Generator(np.random.PCG64(
        np.random.SeedSequence(seed, spawn_key=(STREAMS.index(name),))))


# --- Adam -------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState) -> tuple[dict[str, np.ndarray], AdamState]:
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalAbort(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    out = {}
    for name, p in params.items():
        g = grads[name]
        if p.shape != g.shape:
            raise ValueError(f"{name}: parameter {p.shape} vs gradient {g.shape}")
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[name], state.v[name] = m, v
        out[name] = p - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return out, state


# --- checkpoints ------------------------------------------------------------

@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: dict[str, np.ndarray]
    optimizer: AdamState
    epoch: int
    seed: int
    rng_state: dict[str, dict]
    run: dict[str, str] = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION


def _pcg_state_to_str(state: dict) -> str:
    return json.dumps(state, sort_keys=True)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write ``magic | u32 manifest length | manifest text | little-endian f8 arrays``."""
    lines = [f"format_version={ckpt.version}", f"epoch={ckpt.epoch}", f"seed={ckpt.seed}"]
    lines += [f"config.{k}={v}" for k, v in ckpt.model_config.to_dict().items()]
    lines += [f"run.{k}={v}" for k, v in sorted(ckpt.run.items())]
    opt = ckpt.optimizer
    lines += [f"adam.{k}={getattr(opt, k)!r}" for k in ("lr", "beta1", "beta2", "eps", "t")]
    lines += [f"rng.{k}={_pcg_state_to_str(v)}" for k, v in sorted(ckpt.rng_state.items())]
    arrays = [(f"param/{k}", v) for k, v in ckpt.params.items()]
    arrays += [(f"adam_m/{k}", v) for k, v in opt.m.items()]
    arrays += [(f"adam_v/{k}", v) for k, v in opt.v.items()]
    offset = 0
    blobs = []
    for name, arr in arrays:
        arr = np.ascontiguousarray(arr, dtype="<f8")
        shape = ",".join(str(d) for d in arr.shape)
        lines.append(f"array={name}:{shape}:{offset}")
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    manifest = ("\n".join(lines) + "\n").encode("utf-8")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(manifest)))
        f.write(manifest)
        for b in blobs:
            f.write(b)
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from None
    if raw[:8] != CHECKPOINT_MAGIC or len(raw) < 12:
        raise CheckpointError(f"{path}: not a DMVAE checkpoint")
    (mlen,) = struct.unpack("<I", raw[8:12])
    body = raw[12 + mlen:]
    try:
        manifest = raw[12:12 + mlen].decode("utf-8")
    except UnicodeDecodeError:
        raise CheckpointError(f"{path}: corrupt manifest") from None
    kv: dict[str, str] = {}
    arrays: dict[str, np.ndarray] = {}
    for line in manifest.splitlines():
        key, _, value = line.partition("=")
        if key == "array":
            name, shape, off = value.rsplit(":", 2)
            dims = tuple(int(d) for d in shape.split(",")) if shape else ()
            count = int(np.prod(dims)) if dims else 1
            start = int(off)
            if start + 8 * count > len(body):
                raise CheckpointError(f"{path}: array {name} truncated")
            arrays[name] = np.frombuffer(body, dtype="<f8", count=count,
                                         offset=start).reshape(dims).astype(np.float64)
        else:
            kv[key] = value
    version = int(kv.get("format_version", -1))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version mismatch: file has {version}, expected {CHECKPOINT_VERSION}")
    config = ModelConfig.from_dict({k[7:]: v for k, v in kv.items() if k.startswith("config.")})
    opt = AdamState(lr=float(kv["adam.lr"]), beta1=float(kv["adam.beta1"]),
                    beta2=float(kv["adam.beta2"]), eps=float(kv["adam.eps"]), t=int(kv["adam.t"]))
    params = {}
    for name, arr in arrays.items():
        group, _, pname = name.partition("/")
        {"param": params, "adam_m": opt.m, "adam_v": opt.v}[group][pname] = arr
    return Checkpoint(
        model_config=config, params=params, optimizer=opt, epoch=int(kv["epoch"]),
        seed=int(kv["seed"]),
        rng_state={k[4:]: json.loads(v) for k, v in kv.items() if k.startswith("rng.")},
        run={k[4:]: v for k, v in kv.items() if k.startswith("run.")},
        version=version,
    )


def model_from_checkpoint(ckpt: Checkpoint) -> DMVAE:
    model = DMVAE(ckpt.model_config)
    model.load_state_dict(ckpt.params)
    return model


# --- training ---------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 100
    lr: float = 1e-3
    seed: int = 0
    eval_every: int = 5
    checkpoint_every: int = 0       # 0: final checkpoint only
    out_dir: str | None = None


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    metrics: list[dict]
    model: DMVAE


def _snapshot(model: DMVAE, opt: AdamState, epoch: int, seed: int, rngs, run) -> Checkpoint:
    return Checkpoint(
        model_config=model.config,
        params={k: v.copy() for k, v in model.state_dict().items()},
        optimizer=AdamState(opt.lr, opt.beta1, opt.beta2, opt.eps, opt.t,
                            {k: v.copy() for k, v in opt.m.items()},
                            {k: v.copy() for k, v in opt.v.items()}),
        epoch=epoch, seed=seed,
        rng_state={k: r.bit_generator.state for k, r in rngs.items()},
        run=dict(run),
    )


def _format_metric(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return repr(v) if isinstance(v, float) else str(v)


def write_metrics_row(path: Path, row: dict, header: bool) -> None:
    with open(path, "a", newline="") as f:
        w = csv.writer(f)
        if header:
            w.writerow(METRIC_COLUMNS)
        w.writerow([_format_metric(row.get(c)) for c in METRIC_COLUMNS])


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def train(config: ModelConfig, dataset: DatasetSplit, weights: LossWeights,
          tcfg: TrainConfig, resume: Checkpoint | None = None,
          run_info: dict | None = None) -> TrainResult:
    """Train a DMVAE; deterministic given ``tcfg.seed`` (and BLAS thread count)."""
    from .eval import classify_cross_modal, score

    seed = tcfg.seed
    run_info = dict(run_info or {})
    if resume is not None:
        model = model_from_checkpoint(resume)
        opt = resume.optimizer
        start_epoch = resume.epoch
        rngs = {}
        for name in ("gaussian", "gumbel"):
            r = stream_rng(seed, name)
            r.bit_generator.state = resume.rng_state[name]
            rngs[name] = r
    else:
        model = DMVAE(config, stream_rng(seed, "weights"))
        opt = AdamState(lr=tcfg.lr)
        start_epoch = 0
        rngs = {"gaussian": stream_rng(seed, "gaussian"), "gumbel": stream_rng(seed, "gumbel")}
    noise = NoiseSource.from_rngs(rngs["gaussian"], rngs["gumbel"])

    max_rows = tcfg.batch_size + min(tcfg.batch_size, int(dataset.paired.sum()))
    weights = LossWeights(weights.lambda_per_modality, weights.beta_tc_private,
                          weights.beta_tc_shared, max(dataset.dataset_size, max_rows),
                          weights.beta_kl)
    multilabel = model.config.multilabel

    out_dir = Path(tcfg.out_dir) if tcfg.out_dir else None
    metrics_path = out_dir / "metrics.csv" if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        if resume is None and metrics_path.exists():
            metrics_path.unlink()

    metrics: list[dict] = []
    last_good = _snapshot(model, opt, start_epoch, seed, rngs, run_info)
    names = list(model.params)
    for epoch in range(start_epoch, tcfg.epochs):
        t0 = time.perf_counter()
        sums = {k: 0.0 for k in BREAKDOWN_KEYS}
        steps = 0
        for rows in epoch_batches(dataset, tcfg.batch_size, seed, epoch):
            batch = dataset.batch(rows)
            with Tape() as tape:
                tape.watch(*model.params.values())
                bundle = model.forward_train(batch, noise)
                loss, parts = dmvae_loss(bundle, batch, weights)
                if not np.isfinite(loss.data):
                    _abort(out_dir, last_good, f"non-finite loss at epoch {epoch + 1}")
                grads = tape.gradient(loss, [model.params[n] for n in names])
            try:
                new, opt = adam_step(model.state_dict(), dict(zip(names, grads)), opt)
            except NumericalAbort as e:
                _abort(out_dir, last_good, f"{e} at epoch {epoch + 1}")
            model.load_state_dict(new)
            for k in BREAKDOWN_KEYS:
                sums[k] += parts[k]
            steps += 1
        row = {"epoch": epoch + 1, **{k: v / max(steps, 1) for k, v in sums.items()}}
        done = epoch + 1 == tcfg.epochs
        if len(dataset.test_images) and (done or (tcfg.eval_every and (epoch + 1) % tcfg.eval_every == 0)):
            pred = classify_cross_modal(model, dataset.test_images)
            rep = score(pred, dataset.test_labels, "multilabel" if multilabel else "single")
            row["test_accuracy"], row["test_f1"] = rep.accuracy, rep.f1_macro
        row["wall_seconds"] = time.perf_counter() - t0
        metrics.append(row)
        log.info("epoch %d loss %.4f acc %s", epoch + 1, row["total"], row.get("test_accuracy"))
        last_good = _snapshot(model, opt, epoch + 1, seed, rngs, run_info)
        if metrics_path:
            write_metrics_row(metrics_path, row, header=not metrics_path.exists())
            if done or (tcfg.checkpoint_every and (epoch + 1) % tcfg.checkpoint_every == 0):
                save_checkpoint(out_dir / f"ckpt_epoch{epoch + 1}.dmv", last_good)

    final = _snapshot(model, opt, max(tcfg.epochs, start_epoch), seed, rngs, run_info)
    if out_dir and tcfg.epochs == start_epoch:
        save_checkpoint(out_dir / f"ckpt_epoch{final.epoch}.dmv", final)
    return TrainResult(final, metrics, model)


def _abort(out_dir: Path | None, last_good: Checkpoint, message: str):
    if out_dir:
        save_checkpoint(out_dir / f"ckpt_epoch{last_good.epoch}.dmv", last_good)
    raise NumericalAbort(message)
