"""Quick property checks that need no dataset (``dmvae selftest``)."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .distributions import (
    ConcreteParams,
    GaussianParams,
    SimplexPoint,
    concrete_log_density,
    concrete_sample,
    gaussian_sample,
    gumbel_from_uniform,
    poe_concrete,
    poe_gaussian,
)
from .gradcheck import check_grad
from .objective import kl_terms_per_sample, minibatch_log_qz, plain_kl_per_sample


def _grad_ops(rng) -> tuple[bool, str]:
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 2))
    cases = {
        "matmul": (lambda x, y: T.sum(T.square(x @ y)), [a, b]),
        "sigmoid": (lambda x: T.sum(T.sigmoid(x) * x), [a]),
        "logsumexp": (lambda x: T.sum(T.logsumexp_lastdim(x * 2.0)), [a]),
        "log_softmax": (lambda x: T.sum(T.log_softmax_lastdim(x) * np.arange(4.0)), [a]),
        "exp_log": (lambda x: T.sum(T.log(T.exp(x) + 1.0)), [a]),
    }
    worst = max(check_grad(fn, arrays) for fn, arrays in cases.values())
    return worst < 1e-4, f"max relative error {worst:.2e} over {len(cases)} ops"


def _gaussian_poe(rng) -> tuple[bool, str]:
    grid = np.linspace(-12, 12, 4001)
    worst = 0.0
    for _ in range(20):
        mu, lv = rng.normal(size=2), rng.uniform(-1, 1, size=2)
        dens = np.exp(-0.5 * (grid[:, None] - mu) ** 2 / np.exp(lv)).prod(axis=1)
        dens /= np.trapezoid(dens, grid)
        fused = poe_gaussian([GaussianParams(mu[:1, None], lv[:1, None]),
                              GaussianParams(mu[1:, None], lv[1:, None])], False)
        m, v = fused.mu.data[0, 0], math.exp(fused.logvar.data[0, 0])
        closed = np.exp(-0.5 * (grid - m) ** 2 / v) / math.sqrt(2 * math.pi * v)
        worst = max(worst, float(np.abs(closed - dens).max()))
    return worst < 1e-6, f"sup-norm gap {worst:.2e}"


def _concrete_normalised() -> tuple[bool, str]:
    # n = 2: the simplex is the segment z = (s, 1 - s)
    s = np.linspace(1e-6, 1 - 1e-6, 200001)
    coords = np.stack([s, 1 - s], axis=1)
    gaps = []
    for t in (0.66, 1.0):
        logp = concrete_log_density(ConcreteParams(np.tile([0.3, -0.4], (len(s), 1)), t),
                                    SimplexPoint(T.Tensor(coords), T.Tensor(np.log(coords))))
        gaps.append(abs(np.trapezoid(np.exp(logp.data), s) - 1.0))
    return max(gaps) < 0.02, f"|mass - 1| = {max(gaps):.4f}"


def _concrete_poe() -> tuple[bool, str]:
    fused = poe_concrete([ConcreteParams(np.log([[4.0, 3.0]]), 0.66),
                          ConcreteParams(np.log([[2.0, 3.0]]), 0.66)])
    weights = np.exp(fused.logits.data)[0]
    return bool(np.allclose(weights, [8.0, 9.0], rtol=0, atol=1e-12)), f"weights {weights}"


def _mws_exact(rng) -> tuple[bool, str]:
    n, d = 6, 3
    params = GaussianParams(rng.normal(size=(n, d)), rng.uniform(-1, 0.5, size=(n, d)))
    z = gaussian_sample(params, rng.normal(size=(n, d)))
    log_qz, _ = minibatch_log_qz(z, params, n)
    mu, var = params.mu.data, np.exp(params.logvar.data)
    pair = -0.5 * (np.log(2 * np.pi * var)[None] + (z.data[:, None] - mu[None]) ** 2 / var[None])
    exact = np.log(np.exp(pair.sum(-1)).mean(axis=1))
    gap = float(np.abs(log_qz.data - exact).max())
    cat = ConcreteParams(rng.normal(size=(n, 4)), 0.66)
    zc = concrete_sample(cat, gumbel_from_uniform(rng.random((n, 4))))
    mi, tc, fp = kl_terms_per_sample(zc, cat, n)
    tele = float(np.abs((mi + tc + fp).data - plain_kl_per_sample(zc, cat).data).max())
    ok = gap < 1e-10 and tele < 1e-10
    return ok, f"mixture gap {gap:.1e}, telescoping gap {tele:.1e}"


def run_all(seed: int = 0) -> list[tuple[str, bool, str]]:
    rng = np.random.default_rng(seed)
    checks = [
        ("gradients", lambda: _grad_ops(rng)),
        ("gaussian_poe", lambda: _gaussian_poe(rng)),
        ("concrete_density", _concrete_normalised),
        ("concrete_poe", _concrete_poe),
        ("aggregate_posterior", lambda: _mws_exact(rng)),
    ]
    results = []
    for name, fn in checks:
        try:
            ok, detail = fn()
        except Exception as e:  # a crash is a failed check, not a crashed command
            ok, detail = False, f"{type(e).__name__}: {e}"
        results.append((name, bool(ok), detail))
    return results
