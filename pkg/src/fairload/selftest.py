"""Numerical oracle suite behind ``fairload selftest``.

Each check returns a :class:`CheckResult`; :func:`run_selftest` runs them
all and reports one line per check.
"""

from __future__ import annotations

import sys
import time
from dataclasses import dataclass

import numpy as np
from scipy import signal as sps

from . import dvae, nn
from .fairmetrics import (GroupedPredictions, mae, negative_residual_difference,
                          positive_residual_difference, statistical_parity)
from .pipeline import butterworth_coefficients, butterworth_lowpass

# Relative error is |a - n| / max(|a|, |n|, GRAD_FLOOR).  Without a floor,
# gradients near 1e-8 are dominated by finite-difference round-off.
GRAD_FLOOR = 1e-5
FD_STEP = 1e-5


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


def _timed(fn):
    def wrapper(*args, **kwargs):
        t0 = time.perf_counter()
        res = fn(*args, **kwargs)
        res.seconds = time.perf_counter() - t0
        return res
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def reduced_arch(**overrides) -> dvae.ArchConfig:
    """Tiny double-precision network used by the gradient oracle."""
    kw = dict(cycle_length=8, n_channels=3, latent_dim=2, conv_filters=(1, 1, 1),
              enc_hidden=(4, 3), dec_hidden=(3, 3, 3), head_hidden=(4, 3),
              kernel_size=3, dropout=0.0, batch_norm=False, dtype="float64")
    kw.update(overrides)
    return dvae.ArchConfig(**kw)


def _random_problem(mode, variance_mode, rng, arch=None, batch=6):
    arch = arch or reduced_arch()
    params = dvae.init_params(arch, mode, rng, variance_mode)
    for k in dvae.trainable_names(params):
        params.tensors[k] = params.tensors[k] + 0.1 * rng.standard_normal(params.tensors[k].shape)
    params.target_mean, params.target_std = 13.6, 7.4
    x = rng.standard_normal((batch, arch.cycle_length, arch.n_channels))
    y = rng.choice([4.5, 13.6, 22.7], batch)
    sex = np.arange(batch) % 2
    eps = rng.standard_normal((batch, arch.latent_dim))
    eps_sex = rng.standard_normal((batch, arch.latent_dim))
    return params, x, y, sex, eps, eps_sex


@_timed
def check_kl() -> CheckResult:
    zero = dvae.kl_diag_gaussian(np.zeros(16), np.zeros(16))
    half = dvae.kl_diag_gaussian(np.ones(1), np.zeros(1))
    ok = zero == 0.0 and abs(half - 0.5) <= 1e-9
    return CheckResult("kl closed form", ok, f"KL(N(0,I)|N(0,I))={zero!r}, KL(N(1,1)|N(0,1))={half!r}")


@_timed
def check_additivity(n_batches: int = 100, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(n_batches):
        mode = dvae.MODES[i % 2]
        params, x, y, sex, eps, eps_sex = _random_problem(mode, "fixed_unit", rng,
                                                          batch=int(rng.integers(2, 6)))
        cfg = dvae.TrainConfig(mode=mode, beta1=float(rng.uniform(0, 5)),
                               beta2=float(rng.uniform(0, 5)))
        lb = dvae.total_loss(params, x, y, sex, cfg, eps, eps_sex)
        recon = lb.total - (lb.vae_loss + lb.beta1 * lb.discriminative_loss
                            + lb.beta2 * lb.independence_loss)
        parts = lb.vae_loss - (lb.reconstruction_term + lb.kl_agnostic + lb.kl_specific)
        worst = max(worst, abs(recon), abs(parts))
    return CheckResult("loss additivity", worst <= 1e-9,
                       f"max |total - (vae + b1*dc + b2*ie)| = {worst:.3g} over {n_batches} batches")


def gradient_errors(mode: str, variance_mode: str, seed: int = 1, arch=None):
    """Worst relative error per loss term and the largest ie head gradient."""
    rng = np.random.default_rng(seed)
    params, x, y, sex, eps, eps_sex = _random_problem(mode, variance_mode, rng, arch)
    cfg = dvae.TrainConfig(mode=mode, decoder_variance_mode=variance_mode)
    terms = ["vae", "dc"] + (["ie"] if mode == "dvae" else [])
    names = dvae.trainable_names(params)

    def ctx():
        return nn.Context(train=True, rng=np.random.default_rng(0), stats={})

    def value(term):
        lb, _ = dvae.forward_backward(params, x, y, sex, cfg, eps, eps_sex, ctx(),
                                      need_grad=False)
        return {"vae": lb.vae_loss, "dc": lb.discriminative_loss,
                "ie": lb.independence_loss}[term]

    worst, head_ie = {}, 0.0
    for term in terms:
        coef = {"vae": (1, 0, 0), "dc": (0, 1, 0), "ie": (0, 0, 1)}[term]
        _, grads = dvae.forward_backward(params, x, y, sex, cfg, eps, eps_sex, ctx(),
                                         coefficients=coef)
        err = 0.0
        for name in names:
            v = params.tensors[name]
            is_head = name.split(".")[0] in ("reg", "cls")
            if term == "ie" and is_head:
                head_ie = max(head_ie, float(np.max(np.abs(grads[name]))))
                continue
            for i in np.ndindex(v.shape):
                orig = v[i]
                v[i] = orig + FD_STEP
                up = value(term)
                v[i] = orig - FD_STEP
                down = value(term)
                v[i] = orig
                num = (up - down) / (2 * FD_STEP)
                ana = float(grads[name][i])
                err = max(err, abs(ana - num) / max(abs(ana), abs(num), GRAD_FLOOR))
        worst[term] = err
    return worst, head_ie


@_timed
def check_gradients() -> CheckResult:
    lines, ok = [], True
    for mode, var in (("dvae", "fixed_unit"), ("dvae", "learned_scalar"),
                      ("plain_vae", "fixed_unit")):
        worst, head_ie = gradient_errors(mode, var)
        ok &= all(e < 1e-4 for e in worst.values()) and head_ie == 0.0
        lines.append(f"{mode}/{var}: " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
                     + (f", ie head grad {head_ie:g}" if mode == "dvae" else ""))
    return CheckResult("gradient oracle", ok, "; ".join(lines))


def _sine_gain(freq, fs=80.0, cutoff=6.0, seconds=5.0):
    t = np.arange(int(seconds * fs)) / fs
    y = butterworth_lowpass(np.sin(2 * np.pi * freq * t), fs, cutoff)
    mid = slice(len(t) // 4, 3 * len(t) // 4)
    basis = np.stack([np.sin(2 * np.pi * freq * t[mid]), np.cos(2 * np.pi * freq * t[mid])], 1)
    coef, *_ = np.linalg.lstsq(basis, y[mid], rcond=None)
    return float(np.hypot(*coef))


def analytic_gain(freq, fs=80.0, cutoff=6.0) -> float:
    """Forward-backward magnitude: the squared single-pass response."""
    b, a = butterworth_coefficients(fs, cutoff)
    _, h = sps.freqz(b, a, worN=[freq], fs=fs)
    return float(np.abs(h[0]) ** 2)


def reversal_asymmetry(n: int = 801, margin: int = 200, seed: int = 3) -> float:
    """Largest violation of zero-phase symmetry away from the padded edges.

    Covers the impulse response about its centre, ``h[c+k] == h[c-k]``, and
    ``f(x[::-1])[::-1] == f(x)`` on the samples at least ``margin`` from either
    end (the edge initial conditions are not time-symmetric).
    """
    imp = np.zeros(n)
    imp[n // 2] = 1.0
    h = butterworth_lowpass(imp, 80.0, 6.0)
    worst = float(np.max(np.abs(h - h[::-1])))
    x = np.random.default_rng(seed).standard_normal(n)
    d = butterworth_lowpass(x[::-1], 80.0, 6.0)[::-1] - butterworth_lowpass(x, 80.0, 6.0)
    return max(worst, float(np.max(np.abs(d[margin:n - margin]))))


@_timed
def check_filter() -> CheckResult:
    rel = {f: abs(_sine_gain(f) / analytic_gain(f) - 1) for f in (1.0, 20.0)}
    sym = reversal_asymmetry()
    ok = rel[1.0] < 0.01 and rel[20.0] < 0.05 and sym < 1e-9
    return CheckResult("filter oracle", ok,
                       f"1 Hz rel err {rel[1.0]:.2e}, 20 Hz rel err {rel[20.0]:.2e}, "
                       f"reversal asymmetry {sym:.1e}")


def _naive_metrics(sex, y, p):
    sums = {k: [0.0, 0] for k in ("female", "male")}
    pos = {k: 0.0 for k in sums}
    neg = {k: 0.0 for k in sums}
    err = 0.0
    for s, a, b in zip(sex, y, p):
        r = a - b
        sums[s][0] += b
        sums[s][1] += 1
        pos[s] += r if r > 0 else 0.0
        neg[s] += r if r < 0 else 0.0
        err += abs(r)
        if (r if r > 0 else 0.0) + (r if r < 0 else 0.0) != r:
            raise AssertionError("residual decomposition broken")
    nf, nm = sums["female"][1], sums["male"][1]
    return (sums["female"][0] / nf - sums["male"][0] / nm,
            abs(pos["female"] / nf - pos["male"] / nm),
            abs(neg["female"] / nf - neg["male"] / nm),
            err / (nf + nm))


@_timed
def check_metrics(n_instances: int = 1000, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    exact = True
    for _ in range(n_instances):
        n = int(rng.integers(2, 40))
        sex = np.array(["female", "male"])[rng.permutation(np.r_[0, 1, rng.integers(0, 2, n - 2)])]
        y = rng.choice([4.5, 13.6, 22.7], n)
        p = y + rng.normal(0, 3, n)
        g = GroupedPredictions.from_arrays(sex, y, p)
        ref = _naive_metrics(sex, y, p)
        got = (statistical_parity(g), positive_residual_difference(g),
               negative_residual_difference(g), mae(y, p))
        worst = max(worst, max(abs(a - b) for a, b in zip(got, ref)))
        r = y - p
        exact &= bool(np.all(np.maximum(0, r) + np.minimum(0, r) == r))
    return CheckResult("metric oracle", worst <= 1e-9 and exact,
                       f"max deviation {worst:.2e} over {n_instances} instances, "
                       f"decomposition exact: {exact}")


CHECKS = (check_kl, check_additivity, check_metrics, check_filter, check_gradients)


def run_selftest(verbose: bool = True, stream=None) -> bool:
    stream = stream or sys.stdout
    all_ok = True
    for check in CHECKS:
        res = check()
        all_ok &= res.passed
        if verbose:
            tag = "PASS" if res.passed else "FAIL"
            print(f"{tag} {res.name} ({res.seconds:.1f}s): {res.detail}", file=stream)
    return all_ok
