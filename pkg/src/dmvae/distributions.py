"""Diagonal Gaussians and concrete (Gumbel-softmax) variables.

All functions are batched over leading axes: Gaussian tensors have shape
``(..., D)`` and concrete logits ``(..., n)``.  Randomness is always injected
by the caller (standard-normal noise, Gumbel draws) so everything here is a
pure, differentiable function of its inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor, as_tensor

LOGVAR_MIN, LOGVAR_MAX = -10.0, 10.0
SIMPLEX_FLOOR = 1e-12
UNIFORM_CLAMP = 1e-12
LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class GaussianParams:
    mu: Tensor
    logvar: Tensor

    def __post_init__(self):
        self.mu = as_tensor(self.mu)
        self.logvar = T.clip(as_tensor(self.logvar), LOGVAR_MIN, LOGVAR_MAX)
        if self.mu.shape != self.logvar.shape:
            raise T.ShapeError(
                f"GaussianParams: mu {self.mu.shape} and logvar {self.logvar.shape} differ")

    @property
    def dim(self) -> int:
        return self.mu.shape[-1]

    def take(self, rows) -> "GaussianParams":
        return GaussianParams(self.mu[rows], self.logvar[rows])


@dataclass
class ConcreteParams:
    logits: Tensor
    temperature: float

    def __post_init__(self):
        self.logits = as_tensor(self.logits)
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")

    @property
    def n(self) -> int:
        return self.logits.shape[-1]

    def probs(self) -> np.ndarray:
        return T.softmax_lastdim(self.logits.data).data

    def take(self, rows) -> "ConcreteParams":
        return ConcreteParams(self.logits[rows], self.temperature)


@dataclass
class SimplexPoint:
    """A point on the floored simplex, carrying its log-coordinates."""
    coords: Tensor
    log_coords: Tensor

    @classmethod
    def from_coords(cls, coords) -> "SimplexPoint":
        c = T.clip(as_tensor(coords), SIMPLEX_FLOOR, None)
        return cls(c, T.log(c))

    def take(self, rows) -> "SimplexPoint":
        return SimplexPoint(self.coords[rows], self.log_coords[rows])


def _check_len(name: str, a, b) -> None:
    if tuple(a) != tuple(b):
        raise T.ShapeError(f"{name}: shape {tuple(a)} does not match {tuple(b)}")


# --- Gaussian ---------------------------------------------------------------

def gaussian_sample(params: GaussianParams, noise) -> Tensor:
    noise = np.asarray(noise, dtype=np.float64)
    _check_len("gaussian_sample", noise.shape, params.mu.shape)
    return params.mu + T.exp(params.logvar * 0.5) * noise


def gaussian_kl_std(params: GaussianParams) -> Tensor:
    """KL(q || N(0, I)) summed over the last axis."""
    mu, lv = params.mu, params.logvar
    return T.sum((T.square(mu) + T.exp(lv) - 1.0 - lv) * 0.5, axis=-1)


def gaussian_log_prob_dims(params: GaussianParams, z) -> Tensor:
    """Per-dimension log densities (broadcasting between ``z`` and params)."""
    z = as_tensor(z)
    mu, lv = params.mu, params.logvar
    return (lv * -0.5) - 0.5 * LOG_2PI - T.square(z - mu) * T.exp(-lv) * 0.5


def gaussian_log_prob(params: GaussianParams, z) -> Tensor:
    z = as_tensor(z)
    _check_len("gaussian_log_prob", z.shape, params.mu.shape)
    return T.sum(gaussian_log_prob_dims(params, z), axis=-1)


def standard_normal_log_prob_dims(z) -> Tensor:
    z = as_tensor(z)
    return T.square(z) * -0.5 - 0.5 * LOG_2PI


def poe_gaussian(experts: Sequence[GaussianParams],
                 include_standard_prior: bool) -> GaussianParams:
    """Product of diagonal Gaussian experts, optionally with a N(0, I) expert.

    precision = sum of expert precisions; mean = precision-weighted mean.
    """
    experts = list(experts)
    if not experts and not include_standard_prior:
        raise ValueError("poe_gaussian: empty product (no experts and no prior)")
    if not experts:
        raise ValueError("poe_gaussian: prior-only product needs a shape; pass an expert")
    shape = experts[0].mu.shape
    for e in experts[1:]:
        _check_len("poe_gaussian", e.mu.shape, shape)
    precisions = [T.exp(-e.logvar) for e in experts]
    total = precisions[0]
    weighted = precisions[0] * experts[0].mu
    for p, e in zip(precisions[1:], experts[1:]):
        total = total + p
        weighted = weighted + p * e.mu
    if include_standard_prior:
        total = total + 1.0
    return GaussianParams(weighted / total, -T.log(total))


# --- concrete ---------------------------------------------------------------

def gumbel_from_uniform(u) -> np.ndarray:
    u = np.clip(np.asarray(u, dtype=np.float64), UNIFORM_CLAMP, 1.0 - UNIFORM_CLAMP)
    return -np.log(-np.log(u))


def concrete_sample(params: ConcreteParams, gumbels) -> SimplexPoint:
    """softmax((logits + G) / T), computed in the log domain and floored."""
    gumbels = np.asarray(gumbels, dtype=np.float64)
    _check_len("concrete_sample", gumbels.shape, params.logits.shape)
    y = (params.logits + gumbels) * (1.0 / params.temperature)
    log_z = T.clip(T.log_softmax_lastdim(y), math.log(SIMPLEX_FLOOR), None)
    return SimplexPoint(T.exp(log_z), log_z)


def concrete_log_density(params: ConcreteParams, z: SimplexPoint) -> Tensor:
    """Log density of the relaxed categorical at ``z`` (reduced over the last axis).

    Unnormalised logits are fine: the density is invariant to rescaling the
    class weights.
    """
    n = params.n
    t = params.temperature
    log_pi = T.log_softmax_lastdim(params.logits)
    log_z = z.log_coords
    const = math.lgamma(n) + (n - 1) * math.log(t)
    body = T.sum(log_pi - log_z * (t + 1.0), axis=-1)
    norm = T.logsumexp_lastdim(log_pi - log_z * t)
    return body - norm * float(n) + const


def poe_concrete(experts: Sequence[ConcreteParams]) -> ConcreteParams:
    """Product of concrete experts: class weights multiply, i.e. logits add.

    A uniform prior expert only adds a constant to every logit and is omitted.
    """
    experts = list(experts)
    if not experts:
        raise ValueError("poe_concrete: empty expert list")
    t = experts[0].temperature
    shape = experts[0].logits.shape
    for e in experts[1:]:
        if e.temperature != t:
            raise ValueError(f"poe_concrete: temperatures differ ({t} vs {e.temperature})")
        _check_len("poe_concrete", e.logits.shape, shape)
    total = experts[0].logits
    for e in experts[1:]:
        total = total + e.logits
    return ConcreteParams(total, t)


def uniform_concrete(shape: tuple[int, ...], temperature: float) -> ConcreteParams:
    return ConcreteParams(Tensor(np.zeros(shape)), temperature)
