"""Cross-modal classification, metrics, traversal grids and embedding export."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .distributions import GaussianParams
from .model import DMVAE

MULTILABEL_THRESHOLD = 0.5


@dataclass
class EvalReport:
    accuracy: float
    f1_macro: float
    n_samples: int
    per_class: dict = field(default_factory=dict)   # class -> (tp, fp, fn)

    def as_lines(self) -> list[str]:
        lines = [f"accuracy={self.accuracy!r}", f"f1_macro={self.f1_macro!r}",
                 f"n_samples={self.n_samples}"]
        for c, (tp, fp, fn) in sorted(self.per_class.items()):
            lines.append(f"class_{c}=tp:{tp},fp:{fp},fn:{fn}")
        return lines


def classify_cross_modal(model: DMVAE, images, batch_size: int = 1000) -> np.ndarray:
    """Predict labels from images alone (the label modality is missing).

    Single-label: class indices, ties broken towards the lowest index.
    Multi-label: per-attribute probabilities of the attribute being on.
    """
    images = np.asarray(images, dtype=np.float64)
    out = []
    for start in range(0, len(images), batch_size):
        scores = model.predict_label_scores(images[start:start + batch_size])
        out.append(scores if model.config.multilabel else np.argmax(scores, axis=-1))
    if not out:
        shape = (0, model.config.label_classes) if model.config.multilabel else (0,)
        return np.zeros(shape)
    return np.concatenate(out)


def _f1(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 0.0 if denom == 0 else 2 * tp / denom


def score(predictions, truth, mode: str = "single") -> EvalReport:
    """Exact counting metrics.

    ``single``: predictions are class indices; ``truth`` indices or one-hot.
    ``multilabel``: predictions are probabilities (thresholded at 0.5) or
    0/1, ``truth`` is multi-hot; accuracy and F1 are averaged over attributes.
    """
    predictions = np.asarray(predictions)
    truth = np.asarray(truth)
    if len(predictions) != len(truth):
        raise ValueError(f"score: {len(predictions)} predictions vs {len(truth)} labels")
    n = len(truth)
    if mode == "single":
        if truth.ndim == 2:
            n_classes = truth.shape[1]
            truth = np.argmax(truth, axis=1)
        else:
            n_classes = int(max(truth.max(initial=-1), predictions.max(initial=-1))) + 1
        predictions = predictions.astype(int)
        acc = float(np.mean(predictions == truth)) if n else 0.0
        per = {}
        for c in range(n_classes):
            tp = int(np.sum((predictions == c) & (truth == c)))
            fp = int(np.sum((predictions == c) & (truth != c)))
            fn = int(np.sum((predictions != c) & (truth == c)))
            per[c] = (tp, fp, fn)
        f1 = float(np.mean([_f1(*v) for v in per.values()])) if per else 0.0
        return EvalReport(acc, f1, n, per)
    if mode == "multilabel":
        if predictions.shape != truth.shape:
            raise ValueError(f"score: shapes {predictions.shape} and {truth.shape} differ")
        pred = predictions >= MULTILABEL_THRESHOLD if predictions.dtype.kind == "f" \
            else predictions.astype(bool)
        t = truth.astype(bool)
        per = {}
        for k in range(t.shape[1]):
            per[k] = (int(np.sum(pred[:, k] & t[:, k])), int(np.sum(pred[:, k] & ~t[:, k])),
                      int(np.sum(~pred[:, k] & t[:, k])))
        acc = float(np.mean(pred == t)) if n else 0.0
        f1 = float(np.mean([_f1(*v) for v in per.values()])) if per else 0.0
        return EvalReport(acc, f1, n, per)
    raise ValueError(f"unknown score mode {mode!r}")


def write_report(path, report: EvalReport, extra: dict | None = None) -> None:
    lines = [f"{k}={v}" for k, v in (extra or {}).items()] + report.as_lines()
    Path(path).write_text("\n".join(lines) + "\n")


# --- traversal grid -----------------------------------------------------------

def to_pixels(probs) -> np.ndarray:
    """Probabilities in [0, 1] to 8-bit grey levels, rounding half to even."""
    return np.rint(np.clip(np.asarray(probs, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_pgm(path, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels, dtype=np.uint8)
    h, w = pixels.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while end < len(raw) and not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = int(tokens[1]), int(tokens[2])
    # exactly one whitespace byte separates the header from the raster
    return np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos + 1).reshape(h, w)


def _tile_side(dim: int) -> tuple[int, int]:
    side = int(math.isqrt(dim))
    return (side, side) if side * side == dim else (1, dim)


def traversal_tiles(model: DMVAE, style_images) -> np.ndarray:
    """Probability tiles of shape (rows, 2 + n, D).

    Column 0 is the input, column 1 its reconstruction from (private mean,
    one-hot mode of the shared posterior); column 2 + c decodes the same
    private mean with shared category c.  Categories are latent indices; the
    label decoder maps them to classes.
    """
    if model.config.shared_kind != "discrete":
        raise ValueError("traversal_grid needs a discrete shared space")
    x = np.asarray(style_images, dtype=np.float64)
    priv, _ = model.encode_image(x)
    z_p = priv.mu.data
    mode = model.shared_mode_code(model.shared_mode(x))
    n = model.config.label_classes
    cols = [x, model.decode_image(z_p, mode).data]
    for c in range(n):
        if model.config.multilabel:
            bits = np.zeros((len(x), n), dtype=int)
            bits[:, c] = 1
            code = model.shared_mode_code(bits)
        else:
            code = model.shared_mode_code(np.full(len(x), c))
        cols.append(model.decode_image(z_p, code).data)
    return np.stack(cols, axis=1)


def traversal_grid(model: DMVAE, style_source_images, out_path) -> np.ndarray:
    """Write the traversal grid as an 8-bit PGM; returns the pixel array."""
    tiles = traversal_tiles(model, style_source_images)
    rows, cols, dim = tiles.shape
    th, tw = _tile_side(dim)
    grid = tiles.reshape(rows, cols, th, tw).transpose(0, 2, 1, 3).reshape(rows * th, cols * tw)
    pixels = to_pixels(grid)
    write_pgm(out_path, pixels)
    return pixels


# --- embeddings ---------------------------------------------------------------

def embedding_header(model: DMVAE) -> list[str]:
    c = model.config
    shared = (["shared_mu_%d" % k for k in range(c.shared_dim)] if c.shared_kind == "continuous"
              else ["shared_logit_%d" % k for k in range(c.shared_head_width)])
    return ["index", "label"] + ["private_mu_%d" % k for k in range(c.private_dim)] + shared


def export_embeddings(model: DMVAE, images, labels, out_path) -> int:
    """CSV of private means and shared posterior parameters per sample."""
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    priv, sh = model.encode_image(images)
    shared = sh.mu.data if isinstance(sh, GaussianParams) else sh.logits.data.reshape(len(images), -1)
    with open(out_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(embedding_header(model))
        for i in range(len(images)):
            if model.config.multilabel:
                lab = "".join(str(int(b)) for b in labels[i])
            else:
                lab = str(int(np.argmax(labels[i]))) if labels.ndim == 2 else str(int(labels[i]))
            w.writerow([i, lab] + [repr(float(v)) for v in priv.mu.data[i]]
                       + [repr(float(v)) for v in shared[i]])
    return len(images)
