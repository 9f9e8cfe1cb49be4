"""DMVAE training objective.

Reconstruction terms for the self, joint and cross paths of each modality,
plus KL terms.  The private KL is split into mutual information, total
correlation and dimension-wise KL using minibatch-weighted estimates of the
aggregate posterior; the shared KL is a plain KL unless ``beta_tc_shared``
is non-zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from . import tensor as T
from .distributions import (
    ConcreteParams,
    GaussianParams,
    SimplexPoint,
    concrete_log_density,
    gaussian_kl_std,
    gaussian_log_prob,
    gaussian_log_prob_dims,
    standard_normal_log_prob_dims,
    uniform_concrete,
)
from .tensor import Tensor

if TYPE_CHECKING:
    from .data import BimodalBatch
    from .model import LatentBundle

PROB_CLAMP = 1e-7

BREAKDOWN_KEYS = (
    "recon_image_self", "recon_label_self",
    "recon_image_joint", "recon_label_joint",
    "recon_image_cross", "recon_label_cross",
    "kl_private_mi", "kl_private_tc", "kl_private_fp",
    "kl_shared", "total",
)


@dataclass
class LossWeights:
    lambda_per_modality: tuple[float, float] = (1.0, 50.0)  # (image, label)
    beta_tc_private: float = 3.0
    beta_tc_shared: float = 0.0
    dataset_size: int = 1
    beta_kl: float = 1.0  # weight on the non-TC parts of every KL term

    def __post_init__(self):
        self.lambda_per_modality = tuple(float(x) for x in self.lambda_per_modality)
        if min(self.lambda_per_modality) < 0 or min(
                self.beta_tc_private, self.beta_tc_shared, self.beta_kl) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.dataset_size < 1:
            raise ValueError("dataset_size must be positive")

    def lam(self, modality: str) -> float:
        return self.lambda_per_modality[0 if modality == "image" else 1]


@dataclass
class KlDecomposition:
    mi: float
    tc: float
    fp: float


def bernoulli_recon_loss(predicted_probs, target) -> Tensor:
    """Binary cross-entropy summed over features, averaged over the batch."""
    return T.mean(bernoulli_recon_per_sample(predicted_probs, target))


def bernoulli_recon_per_sample(predicted_probs, target) -> Tensor:
    p = T.as_tensor(predicted_probs)
    t = np.asarray(T.as_tensor(target).data)
    if p.shape != t.shape:
        raise T.ShapeError(f"bernoulli_recon_loss: shapes {p.shape} and {t.shape} differ")
    p = T.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    ll = T.log(p) * t + T.log(1.0 - p) * (1.0 - t)
    return -T.sum(T.reshape(ll, (p.shape[0], -1)), axis=-1)


# --- minibatch-weighted aggregate posterior ---------------------------------

def _log_weights(m: int, n: int) -> np.ndarray:
    """Importance weights of batch member j for the sample drawn from member i.

    The own data point has weight 1/N; the other M-1 members stand in for
    the remaining N-1 points.  With M == N this is the exact mixture.
    """
    if m > n:
        raise ValueError(f"batch size {m} exceeds dataset size {n}")
    w = np.full((m, m), -math.log(n))
    if m > 1:
        off = math.log(n - 1) - math.log(n) - math.log(m - 1) if n > 1 else -np.inf
        w[~np.eye(m, dtype=bool)] = off
    return w


def _pairwise_log_q(samples, params) -> Tensor:
    """Entry [i, k, j] is log q(z_ik | x_j) for latent dimension/variable k."""
    if isinstance(params, GaussianParams):
        m, d = params.mu.shape
        z = T.reshape(samples, (m, d, 1))
        mu = T.reshape(T.transpose(params.mu), (1, d, m))
        lv = T.reshape(T.transpose(params.logvar), (1, d, m))
        return gaussian_log_prob_dims(GaussianParams(mu, lv), z)
    logits = params.logits
    if logits.ndim == 2:
        logits = T.reshape(logits, (logits.shape[0], 1, logits.shape[1]))
        log_z = T.reshape(samples.log_coords, logits.shape)
    else:
        log_z = samples.log_coords
    m, k, n = logits.shape
    zi = SimplexPoint(None, T.reshape(log_z, (m, 1, k, n)))
    pj = ConcreteParams(T.reshape(logits, (1, m, k, n)), params.temperature)
    dens = concrete_log_density(pj, zi)          # (i, j, k)
    return T.transpose(dens, (0, 2, 1))


def minibatch_log_qz(latent_samples, posterior_params, dataset_size: int):
    """Estimate log q(z_i) and per-dimension log q(z_ik) for every batch sample.

    Returns ``(log_qz, log_qz_dims)`` with shapes ``(M,)`` and ``(M, K)``.
    """
    m = posterior_params.mu.shape[0] if isinstance(posterior_params, GaussianParams) \
        else posterior_params.logits.shape[0]
    if m < 1:
        raise ValueError("minibatch_log_qz: empty batch")
    pair = _pairwise_log_q(latent_samples, posterior_params)        # (M, K, M)
    logw = _log_weights(m, dataset_size)
    log_qz_dims = T.logsumexp_lastdim(pair + logw[:, None, :])
    joint = T.sum(pair, axis=1) + logw
    return T.logsumexp_lastdim(joint), log_qz_dims


def _log_q_own(samples, params) -> Tensor:
    if isinstance(params, GaussianParams):
        return gaussian_log_prob(params, samples)
    dens = concrete_log_density(params, samples)
    return dens if dens.ndim == 1 else T.sum(dens, axis=-1)


def _log_prior_dims(samples, params) -> Tensor:
    if isinstance(params, GaussianParams):
        return standard_normal_log_prob_dims(samples)
    prior = uniform_concrete(params.logits.shape, params.temperature)
    dens = concrete_log_density(prior, samples)
    return dens if dens.ndim == 2 else T.reshape(dens, (dens.shape[0], 1))


def kl_terms_per_sample(latent_samples, posterior_params, dataset_size: int):
    """Per-sample (mi, tc, fp) contributions; their means are the decomposition."""
    log_qzx = _log_q_own(latent_samples, posterior_params)
    log_qz, log_qz_dims = minibatch_log_qz(latent_samples, posterior_params, dataset_size)
    log_prod = T.sum(log_qz_dims, axis=-1)
    log_pz = T.sum(_log_prior_dims(latent_samples, posterior_params), axis=-1)
    return log_qzx - log_qz, log_qz - log_prod, log_prod - log_pz


def kl_decompose(latent_samples, posterior_params, dataset_size: int) -> KlDecomposition:
    mi, tc, fp = kl_terms_per_sample(latent_samples, posterior_params, dataset_size)
    return KlDecomposition(float(mi.data.mean()), float(tc.data.mean()), float(fp.data.mean()))


def plain_kl_per_sample(latent_samples, posterior_params) -> Tensor:
    """Closed form for Gaussians, single-sample density ratio for concretes."""
    if isinstance(posterior_params, GaussianParams):
        return gaussian_kl_std(posterior_params)
    log_q = _log_q_own(latent_samples, posterior_params)
    log_p = T.sum(_log_prior_dims(latent_samples, posterior_params), axis=-1)
    return log_q - log_p


# --- full loss ----------------------------------------------------------------

def _check_alignment(bundle: "LatentBundle", batch: "BimodalBatch") -> None:
    m = batch.images.shape[0]
    if bundle.private_params.mu.shape[0] != m:
        raise T.ShapeError(
            f"dmvae_loss: bundle has {bundle.private_params.mu.shape[0]} rows, batch has {m}")
    expected = np.flatnonzero(batch.paired)
    if not np.array_equal(bundle.paired_rows, expected):
        raise ValueError("dmvae_loss: bundle pairing does not match the batch mask")


def dmvae_loss(bundle: "LatentBundle", batch: "BimodalBatch", weights: LossWeights):
    """Return ``(loss, breakdown)``: the scalar to minimise and per-term floats."""
    _check_alignment(bundle, batch)
    targets = {"image": batch.images, "label": batch.labels}
    breakdown = {k: 0.0 for k in BREAKDOWN_KEYS}

    mi, tc, fp = kl_terms_per_sample(bundle.private_sample, bundle.private_params,
                                     weights.dataset_size)
    private_kl = (mi + fp) * weights.beta_kl + tc * weights.beta_tc_private
    breakdown["kl_private_mi"] = float(mi.data.mean())
    breakdown["kl_private_tc"] = float(tc.data.mean())
    breakdown["kl_private_fp"] = float(fp.data.mean())

    shared_cache: dict[int, Tensor] = {}

    def shared_kl(entry) -> Tensor:
        key = id(entry.shared_sample)
        if key not in shared_cache:
            if weights.beta_tc_shared > 0:
                s_mi, s_tc, s_fp = kl_terms_per_sample(
                    entry.shared_sample, entry.shared_params, weights.dataset_size)
                shared_cache[key] = ((s_mi + s_fp) * weights.beta_kl
                                     + s_tc * weights.beta_tc_shared)
            else:
                shared_cache[key] = plain_kl_per_sample(
                    entry.shared_sample, entry.shared_params) * weights.beta_kl
        return shared_cache[key]

    total = Tensor(0.0)
    kl_shared_total = 0.0
    for (modality, path), entry in bundle.paths.items():
        if len(entry.rows) == 0:
            continue
        recon = T.mean(bernoulli_recon_per_sample(entry.recon, targets[modality][entry.rows]))
        breakdown[f"recon_{modality}_{path}"] = float(recon.data)
        term = recon * weights.lam(modality)
        sk = T.mean(shared_kl(entry))
        kl_shared_total += float(sk.data)
        term = term + sk
        if entry.uses_private:
            term = term + T.mean(private_kl[entry.rows])
        total = total + term
    breakdown["kl_shared"] = kl_shared_total
    breakdown["total"] = float(total.data)
    return total, breakdown
