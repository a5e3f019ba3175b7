"""Built-in verification suites: statistical alteration checks and a
64-bit finite-difference gradient check of the pre-training objective."""

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .alteration import KEEP, MASK_ZERO, REPLACE, AlterationConfig, alter, channel_alteration, magnitude_alteration, time_alteration
from .encoder import encode, init_params, preset, reconstruct
from .pretrain import l1_loss, pad_batch
from .rng import Rng, derive_seed


@dataclass
class CheckResult:
    name: str
    observed: float
    expected: float
    sigma: float

    @property
    def z(self):
        return (self.observed - self.expected) / self.sigma if self.sigma > 0 else 0.0

    @property
    def passed(self):
        return abs(self.z) <= 3.0

    def line(self):
        verdict = "PASS" if self.passed else "FAIL"
        return f"{verdict}  {self.name:<26} observed={self.observed:.6f} expected={self.expected:.6f} sigma={self.sigma:.6f} z={self.z:+.3f}"


def _binomial(name, hits, n, p):
    return CheckResult(name, hits / n, p, math.sqrt(p * (1 - p) / n))


def alteration_statistics(seed=0, n_draws=100_000):
    """Empirical frequencies of every random alteration choice against their targets.

    Returns a list of :class:`CheckResult`, each passing when within 3 sigma.
    """
    cfg = AlterationConfig()
    results = []

    # one block per call: 0.15 * 47 / 7 rounds to 1
    rng = Rng(derive_seed(seed, 101))
    x = np.zeros((47, 1), dtype=np.float32)
    counts = {MASK_ZERO: 0, REPLACE: 0, KEEP: 0}
    for _ in range(n_draws):
        _, rec = time_alteration(x, cfg, rng)
        for b in rec.time_blocks:
            counts[b.mode] += 1
    n_blocks = sum(counts.values())
    for mode, p in ((MASK_ZERO, 0.8), (REPLACE, 0.1), (KEEP, 0.1)):
        results.append(_binomial(f"time mode {mode}", counts[mode], n_blocks, p))

    rng = Rng(derive_seed(seed, 102))
    x = np.zeros((1, 40), dtype=np.float32)
    none = sum(channel_alteration(x, cfg, rng)[1].channel_block is None for _ in range(n_draws))
    results.append(_binomial("channel no-mask", none, n_draws, 1.0 / (cfg.channel_width + 1)))

    rng = Rng(derive_seed(seed, 103))
    x = np.zeros((1, 4), dtype=np.float64)
    applied = 0
    noise = []
    for _ in range(n_draws):
        _, rec = magnitude_alteration(x, cfg, rng)
        if rec.noise_applied:
            applied += 1
            noise.append(rec.noise.reshape(-1))
    results.append(_binomial("noise applied", applied, n_draws, cfg.noise_prob))
    z = np.concatenate(noise) if noise else np.zeros(2)
    var = cfg.noise_variance
    results.append(CheckResult("noise variance", float(np.var(z, ddof=1)), var, var * math.sqrt(2.0 / (z.size - 1))))
    return results


def selftest_report(seed=0, n_draws=100_000):
    results = alteration_statistics(seed, n_draws)
    lines = [f"selftest seed={seed} draws={n_draws}"] + [r.line() for r in results]
    ok = all(r.passed for r in results)
    lines.append("ALL PASS" if ok else "SOME CHECKS FAILED")
    return "\n".join(lines) + "\n", ok


def _objective(seed):
    """Closure computing the micro-model L1 objective from a flat float64 parameter dict."""
    cfg = preset("micro", dropout=0.0)
    enc, head = init_params(cfg, derive_seed(seed, 201), dtype=np.float64)
    rng = Rng(derive_seed(seed, 202))
    lengths = (11, 8)
    mats, altered = [], []
    for L in lengths:
        x = np.asarray(rng.normals((L, cfg.input_dim)), dtype=np.float64)
        x_hat, _ = alter(x, AlterationConfig(channel_width=4, time_percent=0.3, noise_prob=0.5), rng)
        mats.append(x)
        altered.append(x_hat)
    target, mask = pad_batch(mats, dtype=np.float64)
    inputs, _ = pad_batch(altered, dtype=np.float64)
    params = {**{"encoder/" + k: v for k, v in enc.items()}, **{"head/" + k: v for k, v in head.items()}}

    def loss(p):
        e = {k[len("encoder/"):]: t for k, t in p.items() if k.startswith("encoder/")}
        h = {k[len("head/"):]: t for k, t in p.items() if k.startswith("head/")}
        pred = reconstruct(encode(inputs, e, cfg, mask)[-1], h, cfg.activation)
        return l1_loss(pred, target, mask)

    return params, loss


def gradient_check(seed=0, n_directions=100, eps=1e-5):
    """Directional finite differences against reverse mode, in float64.

    For each random unit direction ``v`` over all parameters, compare
    ``(f(p + eps v) - f(p - eps v)) / 2 eps`` with ``<grad f, v>``.
    Returns ``(max_relative_error, errors)``.
    """
    params, loss = _objective(seed)
    names = sorted(params)
    _, grads = ad.value_and_grad(loss(params), [params[n] for n in names])
    base = {n: params[n].data.copy() for n in names}
    rng = Rng(derive_seed(seed, 203)).numpy_generator()

    def at(shift):
        p = {n: ad.Tensor(base[n] + shift[n], requires_grad=False) for n in names}
        return float(loss(p).data)

    errors = []
    for _ in range(n_directions):
        v = {n: rng.standard_normal(base[n].shape) for n in names}
        norm = math.sqrt(sum(float(np.sum(a * a)) for a in v.values()))
        v = {n: a / norm for n, a in v.items()}
        analytic = sum(float(np.sum(g * v[n])) for n, g in zip(names, grads))
        numeric = (at({n: eps * v[n] for n in names}) - at({n: -eps * v[n] for n in names})) / (2 * eps)
        scale = max(abs(analytic), abs(numeric), 1e-12)
        errors.append(abs(analytic - numeric) / scale)
    return max(errors), errors


def gradcheck_report(seed=0, n_directions=100, tol=1e-5):
    worst, errors = gradient_check(seed, n_directions)
    ok = worst < tol
    lines = [
        f"gradcheck seed={seed} directions={n_directions} dtype=float64",
        f"median relative error {float(np.median(errors)):.3e}",
        f"max relative error    {worst:.3e} (tolerance {tol:.0e})",
        "PASS" if ok else "FAIL",
    ]
    return "\n".join(lines) + "\n", ok
