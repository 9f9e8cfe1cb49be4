"""The DMVAE network: an image modality with private + shared latents and a
label modality with a shared latent only.

Each modality has a one-hidden-layer ReLU MLP encoder and a sigmoid MLP
decoder.  The shared latent is either continuous (diagonal Gaussian, fused
with a standard-normal prior expert) or discrete (concrete variables fused
by adding logits).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .distributions import (
    ConcreteParams,
    GaussianParams,
    SimplexPoint,
    concrete_sample,
    gaussian_sample,
    gumbel_from_uniform,
    poe_concrete,
    poe_gaussian,
)
from .tensor import Tensor

MODALITIES = ("image", "label")


class NoiseExhausted(RuntimeError):
    pass


@dataclass
class ModelConfig:
    image_dim: int = 784
    label_classes: int = 10
    private_dim: int = 10
    shared_kind: str = "discrete"
    shared_dim: int = 10
    hidden_dim: int = 256
    temperature: float = 0.66
    multilabel: bool = False

    def __post_init__(self):
        for name in ("image_dim", "label_classes", "private_dim", "shared_dim", "hidden_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"ModelConfig.{name} must be positive")
        if self.shared_kind not in ("continuous", "discrete"):
            raise ValueError(f"shared_kind must be 'continuous' or 'discrete', got {self.shared_kind!r}")
        if self.shared_kind == "discrete" and self.shared_dim != self.label_classes:
            raise ValueError("discrete shared space needs shared_dim == label_classes")
        if self.multilabel and self.shared_kind != "discrete":
            raise ValueError("multi-label mode uses binary concrete shared latents")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")

    @property
    def shared_head_width(self) -> int:
        if self.shared_kind == "continuous":
            return 2 * self.shared_dim
        return 2 * self.label_classes if self.multilabel else self.label_classes

    @property
    def shared_code_width(self) -> int:
        """Width of z_s as fed to the decoders."""
        if self.shared_kind == "continuous":
            return self.shared_dim
        return 2 * self.label_classes if self.multilabel else self.label_classes

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        kw = {}
        for f in fields(cls):
            if f.name in d:
                v = d[f.name]
                if f.type in ("int", int):
                    v = int(v)
                elif f.type in ("float", float):
                    v = float(v)
                elif f.type in ("bool", bool):
                    v = v if isinstance(v, bool) else str(v).lower() in ("1", "true", "yes")
                kw[f.name] = v
        return cls(**kw)


class NoiseSource:
    """Standard-normal and Gumbel noise for every sampling site.

    Each stream is either a numpy ``Generator`` or a finite array consumed in
    order; running past the end of a finite array raises ``NoiseExhausted``.
    """

    def __init__(self, gaussian, gumbel):
        self._streams = {"gaussian": gaussian, "gumbel": gumbel}
        self._pos = {"gaussian": 0, "gumbel": 0}

    @classmethod
    def from_rngs(cls, gaussian_rng: np.random.Generator, gumbel_rng: np.random.Generator):
        return cls(gaussian_rng, gumbel_rng)

    def _take(self, kind: str, shape) -> np.ndarray:
        src = self._streams[kind]
        size = int(np.prod(shape))
        if isinstance(src, np.random.Generator):
            if kind == "gaussian":
                return src.standard_normal(shape)
            return gumbel_from_uniform(src.random(shape))
        flat = np.asarray(src, dtype=np.float64).ravel()
        pos = self._pos[kind]
        if pos + size > flat.size:
            raise NoiseExhausted(f"{kind} noise exhausted: need {pos + size}, have {flat.size}")
        self._pos[kind] = pos + size
        return flat[pos:pos + size].reshape(shape)

    def normal(self, shape) -> np.ndarray:
        return self._take("gaussian", shape)

    def gumbel(self, shape) -> np.ndarray:
        return self._take("gumbel", shape)


@dataclass
class PathEntry:
    """One reconstruction path of one modality over a subset of batch rows."""
    rows: np.ndarray
    shared_params: object
    shared_sample: object
    recon: Tensor
    uses_private: bool


@dataclass
class LatentBundle:
    private_params: GaussianParams
    private_sample: Tensor
    unimodal_shared: dict
    fused_shared: object
    paired_rows: np.ndarray
    paths: dict = field(default_factory=dict)   # (modality, path) -> PathEntry


def _linear_init(rng: np.random.Generator, fan_in: int, fan_out: int):
    bound = 1.0 / np.sqrt(fan_in)
    return (rng.uniform(-bound, bound, size=(fan_in, fan_out)),
            rng.uniform(-bound, bound, size=(fan_out,)))


class DMVAE:
    def __init__(self, config: ModelConfig, rng: np.random.Generator | None = None):
        self.config = config
        rng = rng if rng is not None else np.random.default_rng(0)
        c = config
        layout = {
            "enc_image": (c.image_dim, c.hidden_dim, 2 * c.private_dim + c.shared_head_width),
            "enc_label": (c.label_classes, c.hidden_dim, c.shared_head_width),
            "dec_image": (c.private_dim + c.shared_code_width, c.hidden_dim, c.image_dim),
            "dec_label": (c.shared_code_width, c.hidden_dim, c.label_classes),
        }
        self.params: dict[str, Tensor] = {}
        for name, (d_in, d_h, d_out) in layout.items():
            w1, b1 = _linear_init(rng, d_in, d_h)
            w2, b2 = _linear_init(rng, d_h, d_out)
            self.params.update({f"{name}.w1": Tensor(w1), f"{name}.b1": Tensor(b1),
                                f"{name}.w2": Tensor(w2), f"{name}.b2": Tensor(b2)})

    # --- parameters ---------------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) ^ set(state)
        if missing:
            raise KeyError(f"parameter names differ: {sorted(missing)}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise T.ShapeError(f"{k}: expected {self.params[k].shape}, got {v.shape}")
            self.params[k] = Tensor(v)

    def _mlp(self, name: str, x, out_act=None) -> Tensor:
        p = self.params
        h = T.relu(T.as_tensor(x) @ p[f"{name}.w1"] + p[f"{name}.b1"])
        out = h @ p[f"{name}.w2"] + p[f"{name}.b2"]
        return out_act(out) if out_act else out

    def _shared_from_head(self, head: Tensor):
        c = self.config
        if c.shared_kind == "continuous":
            return GaussianParams(head[:, :c.shared_dim], head[:, c.shared_dim:])
        if c.multilabel:
            head = T.reshape(head, (head.shape[0], c.label_classes, 2))
        return ConcreteParams(head, c.temperature)

    # --- encoders / decoders -----------------------------------------------
    def encode_image(self, x):
        c = self.config
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != c.image_dim:
            raise T.ShapeError(f"encode_image: expected (B, {c.image_dim}), got {x.shape}")
        out = self._mlp("enc_image", x)
        k = c.private_dim
        private = GaussianParams(out[:, :k], out[:, k:2 * k])
        return private, self._shared_from_head(out[:, 2 * k:])

    def encode_label(self, y):
        c = self.config
        y = np.asarray(y, dtype=np.float64)
        if y.ndim != 2 or y.shape[1] != c.label_classes:
            raise T.ShapeError(f"encode_label: expected (B, {c.label_classes}), got {y.shape}")
        if not np.all((y == 0) | (y == 1)):
            raise ValueError("encode_label: labels must be 0/1 encoded")
        if not c.multilabel and not np.all(y.sum(axis=1) == 1):
            raise ValueError("encode_label: single-label rows must be one-hot")
        return self._shared_from_head(self._mlp("enc_label", y))

    def shared_code(self, sample) -> Tensor:
        """Decoder input for a shared sample (Gaussian vector or simplex point)."""
        if isinstance(sample, SimplexPoint):
            coords = sample.coords
            return T.reshape(coords, (coords.shape[0], -1)) if coords.ndim == 3 else coords
        return T.as_tensor(sample)

    def decode_image(self, z_p, z_s) -> Tensor:
        z = T.concat([T.as_tensor(z_p), self.shared_code(z_s)], axis=-1)
        want = self.config.private_dim + self.config.shared_code_width
        if z.shape[-1] != want:
            raise T.ShapeError(f"decode_image: latent width {z.shape[-1]}, expected {want}")
        return self._mlp("dec_image", z, T.sigmoid)

    def decode_label(self, z_s) -> Tensor:
        z = self.shared_code(z_s)
        if z.shape[-1] != self.config.shared_code_width:
            raise T.ShapeError(
                f"decode_label: latent width {z.shape[-1]}, expected {self.config.shared_code_width}")
        return self._mlp("dec_label", z, T.sigmoid)

    # --- shared space ---------------------------------------------------------
    def fuse_shared(self, experts):
        experts = list(experts)
        if not experts:
            raise ValueError("fuse_shared: no experts")
        if self.config.shared_kind == "continuous":
            return poe_gaussian(experts, include_standard_prior=True)
        return poe_concrete(experts)

    def sample_shared(self, params, noise: NoiseSource):
        if isinstance(params, GaussianParams):
            return gaussian_sample(params, noise.normal(params.mu.shape))
        return concrete_sample(params, noise.gumbel(params.logits.shape))

    # --- training forward -------------------------------------------------
    def forward_train(self, batch, noise: NoiseSource) -> LatentBundle:
        """Run the self, joint and cross paths on a batch.

        Unpaired rows only get the image self path; paired rows get all six
        (modality, path) entries.  Noise is consumed in a fixed order.
        """
        paired = np.flatnonzero(batch.paired)
        all_rows = np.arange(len(batch.images))
        priv, sh_img = self.encode_image(batch.images)
        z_p = gaussian_sample(priv, noise.normal(priv.mu.shape))
        img_uni = self.fuse_shared([sh_img])
        zs_img = self.sample_shared(img_uni, noise)
        bundle = LatentBundle(priv, z_p, {"image": img_uni}, None, paired)
        bundle.paths[("image", "self")] = PathEntry(
            all_rows, img_uni, zs_img, self.decode_image(z_p, zs_img), True)
        if len(paired) == 0:
            return bundle

        sh_lbl = self.encode_label(batch.labels[paired])
        lbl_uni = self.fuse_shared([sh_lbl])
        bundle.unimodal_shared["label"] = lbl_uni
        zs_lbl = self.sample_shared(lbl_uni, noise)
        bundle.paths[("label", "self")] = PathEntry(
            paired, lbl_uni, zs_lbl, self.decode_label(zs_lbl), False)

        img_sh_paired = sh_img.take(paired)
        fused = self.fuse_shared([img_sh_paired, sh_lbl])
        bundle.fused_shared = fused
        zs_joint = self.sample_shared(fused, noise)
        zp_paired = z_p[paired]
        bundle.paths[("image", "joint")] = PathEntry(
            paired, fused, zs_joint, self.decode_image(zp_paired, zs_joint), True)
        bundle.paths[("label", "joint")] = PathEntry(
            paired, fused, zs_joint, self.decode_label(zs_joint), False)

        zs_from_label = self.sample_shared(lbl_uni, noise)
        zp_prior = noise.normal((len(paired), self.config.private_dim))
        bundle.paths[("image", "cross")] = PathEntry(
            paired, lbl_uni, zs_from_label, self.decode_image(zp_prior, zs_from_label), False)
        img_uni_paired = img_uni.take(paired)
        zs_from_image = self.sample_shared(img_uni_paired, noise)
        bundle.paths[("label", "cross")] = PathEntry(
            paired, img_uni_paired, zs_from_image, self.decode_label(zs_from_image), False)
        return bundle

    # --- deterministic inference ---------------------------------------------
    def infer_shared_from_image(self, images):
        """Missing-label inference: the image's shared expert fused alone."""
        _, sh = self.encode_image(images)
        return self.fuse_shared([sh])

    def predict_label_scores(self, images) -> np.ndarray:
        """Cross-generated label scores, without sampling.

        The shared posterior inferred from the image alone is reduced to its
        mean (continuous) or one-hot mode (discrete) and passed through the
        label decoder.  Multi-label: P(attribute on) per attribute.
        """
        fused = self.infer_shared_from_image(images)
        if isinstance(fused, GaussianParams):
            return self.decode_label(fused.mu).data
        code = self.shared_mode_code(np.argmax(fused.logits.data, axis=-1))
        return self.decode_label(code).data

    def shared_mode(self, images) -> np.ndarray:
        """Index of the most probable shared category (per attribute if multi-label)."""
        fused = self.infer_shared_from_image(images)
        return np.argmax(fused.logits.data, axis=-1)

    def shared_mode_code(self, classes: np.ndarray) -> np.ndarray:
        """One-hot (or per-attribute binary) shared code for given class indices/bits."""
        c = self.config
        classes = np.asarray(classes)
        if c.multilabel:
            bits = classes.astype(int)
            code = np.stack([1 - bits, bits], axis=-1).astype(np.float64)
            return code.reshape(len(bits), -1)
        return np.eye(c.label_classes)[classes.astype(int)]
