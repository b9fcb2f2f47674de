"""Debiasing variational autoencoder for hand-load estimation.

Two convolutional encoders map a gait cycle to a sex-agnostic latent ``z``
and a sex-specific latent ``zsex``; a shared decoder reconstructs the cycle
from both.  A regressor reads load from ``z`` and a classifier reads sex
from ``zsex``.  Training minimises::

    total = vae + beta1 * discriminative + beta2 * independence

where ``independence`` is the negated loss of the two heads applied to the
*other* latent (load from ``zsex``, sex from ``z``).  That term only updates
the encoders; head parameters are held fixed inside it.

``mode="plain_vae"`` drops the sex encoder and classifier and yields the
supervised-VAE ablation.
"""

from __future__ import annotations

import csv
import json
import logging
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import nn
from .errors import ContractError, DataError, NumericError, ParameterError, ShapeError

logger = logging.getLogger(__name__)

LOG2PI = float(np.log(2 * np.pi))
LOGVAR_CLAMP = 10.0
MODES = ("dvae", "plain_vae")
FORMAT_VERSION = 1


@dataclass(frozen=True)
class ArchConfig:
    cycle_length: int = 128
    n_channels: int = 72
    latent_dim: int = 16
    conv_filters: tuple[int, ...] = (64, 128, 256)
    enc_hidden: tuple[int, ...] = (128, 64)
    dec_hidden: tuple[int, ...] = (64, 128, 256)
    head_hidden: tuple[int, ...] = (128, 64)
    kernel_size: int = 5
    dropout: float = 0.25
    batch_norm: bool = True
    arch_scale: float = 1.0
    dtype: str = "float32"

    def __post_init__(self):
        if self.cycle_length % 2 ** len(self.conv_filters):
            raise ParameterError("cycle_length must be divisible by 2**n_conv_layers")
        if self.arch_scale <= 0 or self.latent_dim < 1:
            raise ParameterError("arch_scale and latent_dim must be positive")

    def width(self, w: int) -> int:
        return max(1, int(round(w * self.arch_scale)))

    @property
    def filters(self) -> list[int]:
        return [self.width(f) for f in self.conv_filters]

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        d = dict(d)
        for k in ("conv_filters", "enc_hidden", "dec_hidden", "head_hidden"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 200
    batch_size: int = 64
    beta1: float = 1.0
    beta2: float = 0.1
    seed: int = 0
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    mc_samples: int = 1
    decoder_variance_mode: str = "fixed_unit"
    target_standardization: bool = True
    mode: str = "dvae"

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ParameterError("learning_rate must be >= 0")
        if self.epochs < 1 or self.batch_size < 1 or self.mc_samples < 1:
            raise ParameterError("epochs, batch_size and mc_samples must be >= 1")
        if self.beta1 < 0 or self.beta2 < 0:
            raise ParameterError("beta1 and beta2 must be >= 0")
        if self.mode not in MODES:
            raise ParameterError(f"mode must be one of {MODES}")
        if self.decoder_variance_mode not in ("fixed_unit", "learned_scalar"):
            raise ParameterError("decoder_variance_mode must be fixed_unit or learned_scalar")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "adam_betas" in d:
            d["adam_betas"] = tuple(d["adam_betas"])
        return cls(**d)


@dataclass
class LatentPair:
    z_mean: np.ndarray
    z_logvar: np.ndarray
    zsex_mean: np.ndarray | None = None
    zsex_logvar: np.ndarray | None = None


@dataclass
class LossBreakdown:
    vae_loss: float = 0.0
    reconstruction_term: float = 0.0
    kl_agnostic: float = 0.0
    kl_specific: float = 0.0
    discriminative_loss: float = 0.0
    regressor_term: float = 0.0
    classifier_term: float = 0.0
    independence_loss: float = 0.0
    total: float = 0.0
    beta1: float = 0.0
    beta2: float = 0.0

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class ModelParams:
    arch: ArchConfig
    mode: str
    tensors: dict[str, np.ndarray]
    decoder_variance_mode: str = "fixed_unit"
    target_mean: float = 0.0
    target_std: float = 1.0
    channel_stats: tuple[np.ndarray, np.ndarray] | None = None
    train_config: TrainConfig | None = None

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if k.split(".")[0] == prefix}

    def copy(self) -> "ModelParams":
        return replace(self, tensors={k: v.copy() for k, v in self.tensors.items()})


# ---------------------------------------------------------------- networks


@dataclass
class Networks:
    enc: nn.Sequential
    enc_mu: nn.Linear
    enc_lv: nn.Linear
    enc_sex: nn.Sequential | None
    enc_sex_mu: nn.Linear | None
    enc_sex_lv: nn.Linear | None
    dec: nn.Sequential
    reg: nn.Sequential
    cls: nn.Sequential | None
    buffers: list[str] = field(default_factory=list)


def _encoder(prefix, a: ArchConfig):
    layers, c = [], a.n_channels
    for i, f in enumerate(a.filters):
        layers += [nn.Conv1d(f"{prefix}.conv{i}", c, f, a.kernel_size, input_grad=i > 0),
                   nn.ReLU(), nn.MaxPool1d()]
        c = f
    layers.append(nn.Reshape((c * a.cycle_length // 2 ** len(a.filters),)))
    n = layers[-1].shape[0]
    for i, h in enumerate(a.enc_hidden):
        layers += [nn.Linear(f"{prefix}.fc{i}", n, a.width(h)), nn.ReLU()]
        n = a.width(h)
    return (nn.Sequential(layers), nn.Linear(f"{prefix}.mu", n, a.latent_dim),
            nn.Linear(f"{prefix}.logvar", n, a.latent_dim))


def _decoder(a: ArchConfig, latent_in: int):
    layers, n = [], latent_in
    for i, h in enumerate(a.dec_hidden):
        layers += [nn.Linear(f"dec.fc{i}", n, a.width(h)), nn.ReLU()]
        n = a.width(h)
    filters = a.filters
    steps = a.cycle_length // 2 ** len(filters)
    layers += [nn.Linear("dec.expand", n, steps * filters[-1]), nn.ReLU(),
               nn.Reshape((steps, filters[-1]))]
    outs = filters[-2::-1] + [a.n_channels]
    c = filters[-1]
    for i, f in enumerate(outs):
        layers += [nn.Upsample1d(), nn.Conv1d(f"dec.deconv{i}", c, f, a.kernel_size)]
        if i < len(outs) - 1:
            layers.append(nn.ReLU())
        c = f
    return nn.Sequential(layers)


def _head(prefix, a: ArchConfig, n_out):
    layers, n = [], a.latent_dim
    for i, h in enumerate(a.head_hidden):
        layers += [nn.Linear(f"{prefix}.fc{i}", n, a.width(h)), nn.ReLU()]
        if a.batch_norm:
            layers.append(nn.BatchNorm1d(f"{prefix}.bn{i}", a.width(h)))
        if a.dropout > 0:
            layers.append(nn.Dropout(a.dropout))
        n = a.width(h)
    layers.append(nn.Linear(f"{prefix}.out", n, n_out))
    return nn.Sequential(layers)


@lru_cache(maxsize=32)
def networks(arch: ArchConfig, mode: str) -> Networks:
    enc, mu, lv = _encoder("enc", arch)
    if mode == "dvae":
        enc_sex, smu, slv = _encoder("enc_sex", arch)
        cls = _head("cls", arch, 2)
        latent_in = 2 * arch.latent_dim
    else:
        enc_sex = smu = slv = cls = None
        latent_in = arch.latent_dim
    reg = _head("reg", arch, 1)
    nets = Networks(enc, mu, lv, enc_sex, smu, slv, _decoder(arch, latent_in), reg, cls)
    nets.buffers = reg.buffer_names + (cls.buffer_names if cls else [])
    return nets


def init_params(arch: ArchConfig, mode: str = "dvae", rng=None,
                decoder_variance_mode: str = "fixed_unit") -> ModelParams:
    """Uniform fan-in weights, zero biases, unit batch-norm scale."""
    if mode not in MODES:
        raise ParameterError(f"mode must be one of {MODES}")
    rng = np.random.default_rng(rng)
    nets = networks(arch, mode)
    dtype = np.dtype(arch.dtype)
    t = {}
    for part in (nets.enc, nets.enc_mu, nets.enc_lv, nets.enc_sex, nets.enc_sex_mu,
                 nets.enc_sex_lv, nets.dec, nets.reg, nets.cls):
        if part is not None:
            t.update(part.init(rng, dtype))
    if decoder_variance_mode == "learned_scalar":
        t["dec.logvar"] = np.zeros(1, dtype)
    return ModelParams(arch, mode, t, decoder_variance_mode)


def trainable_names(params: ModelParams) -> list[str]:
    buffers = set(networks(params.arch, params.mode).buffers)
    return [k for k in params.tensors if k not in buffers]


# ---------------------------------------------------------------- primitives


def reparameterize(mean, logvar, eps):
    mean, logvar, eps = np.asarray(mean), np.asarray(logvar), np.asarray(eps)
    if not (mean.shape == logvar.shape == eps.shape):
        raise ShapeError("mean, logvar and eps must share a shape")
    return mean + np.exp(0.5 * logvar) * eps


def kl_diag_gaussian(mean, logvar):
    """KL(N(mean, diag(exp(logvar))) || N(0, I)), summed over the last axis."""
    mean = np.asarray(mean, dtype=float)
    logvar = np.asarray(logvar, dtype=float)
    if mean.shape != logvar.shape:
        raise ShapeError("mean and logvar must share a shape")
    kl = 0.5 * np.sum(np.exp(logvar) + mean ** 2 - 1.0 - logvar, axis=-1)
    return float(kl) if np.ndim(kl) == 0 else kl


def _as_batch(params: ModelParams, x):
    x = np.asarray(x, dtype=params.arch.dtype)
    single = x.ndim == 2
    if single:
        x = x[None]
    a = params.arch
    if x.ndim != 3 or x.shape[1:] != (a.cycle_length, a.n_channels):
        raise ShapeError(f"expected cycles of shape [{a.cycle_length}, {a.n_channels}], "
                         f"got {x.shape[1:] if x.ndim == 3 else x.shape}")
    return x, single


def _check_finite(name, *arrays):
    for arr in arrays:
        if arr is not None and not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite values in {name}")


def _encode_one(p, trunk, mu_layer, lv_layer, xt, ctx):
    h, c_trunk = trunk.forward(p, xt, ctx)
    mu, c_mu = mu_layer.forward(p, h, ctx)
    raw, c_lv = lv_layer.forward(p, h, ctx)
    lv = np.clip(raw, -LOGVAR_CLAMP, LOGVAR_CLAMP)
    inside = (raw > -LOGVAR_CLAMP) & (raw < LOGVAR_CLAMP)
    return mu, lv, (c_trunk, c_mu, c_lv, inside)


def _encode_back(p, trunk, mu_layer, lv_layer, cache, dmu, dlv):
    c_trunk, c_mu, c_lv, inside = cache
    dh1, g = mu_layer.backward(p, c_mu, dmu)
    dh2, g2 = lv_layer.backward(p, c_lv, dlv * inside)
    g.update(g2)
    _, g3 = trunk.backward(p, c_trunk, dh1 + dh2)
    g.update(g3)
    return g


def encode(params: ModelParams, x, train: bool = False, rng=None) -> LatentPair:
    """Posterior means and clamped log-variances for one cycle ``[L, C]`` or a batch."""
    x, single = _as_batch(params, x)
    nets = networks(params.arch, params.mode)
    ctx = nn.Context(train=train, rng=np.random.default_rng(rng))
    xt = x
    mu, lv, _ = _encode_one(params.tensors, nets.enc, nets.enc_mu, nets.enc_lv, xt, ctx)
    smu = slv = None
    if params.mode == "dvae":
        smu, slv, _ = _encode_one(params.tensors, nets.enc_sex, nets.enc_sex_mu,
                                  nets.enc_sex_lv, xt, ctx)
    _check_finite("encoder output", mu, lv, smu, slv)
    if single:
        mu, lv = mu[0], lv[0]
        smu = None if smu is None else smu[0]
        slv = None if slv is None else slv[0]
    return LatentPair(mu, lv, smu, slv)


def decode(params: ModelParams, z, zsex=None):
    """Reconstruction mean ``[L, C]`` (or batch); also returns the scalar
    log-variance when the decoder variance is learned."""
    single = np.ndim(z) == 1
    z = np.atleast_2d(np.asarray(z, dtype=params.arch.dtype))
    if params.mode == "dvae":
        if zsex is None:
            raise ContractError("dvae decoder needs both latents")
        zsex = np.atleast_2d(np.asarray(zsex, dtype=params.arch.dtype))
        if zsex.shape != z.shape:
            raise ShapeError("z and zsex must share a shape")
        zin = np.concatenate([z, zsex], axis=1)
    else:
        if zsex is not None:
            raise ContractError("plain_vae decoder takes a single latent")
        zin = z
    if zin.shape[1] != (2 if params.mode == "dvae" else 1) * params.arch.latent_dim:
        raise ShapeError("latent dimension does not match the model")
    nets = networks(params.arch, params.mode)
    out, _ = nets.dec.forward(params.tensors, zin, nn.Context())
    if single:
        out = out[0]
    if params.decoder_variance_mode == "learned_scalar":
        return out, float(params.tensors["dec.logvar"][0])
    return out


def _standardize(params: ModelParams, y_kg):
    return (np.asarray(y_kg, dtype=float) - params.target_mean) / params.target_std


def _mse(pred, target):
    d = pred[:, 0] - target
    return float(np.mean(d * d)), d


def _cross_entropy(logits, labels):
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    n = len(labels)
    return float(-np.mean(logp[np.arange(n), labels])), np.exp(logp)


def _sex_codes(y_sex):
    arr = np.asarray(y_sex)
    if arr.dtype.kind in "US":
        if not np.all(np.isin(arr, ("male", "female"))):
            raise DataError("sex labels must be 'male' or 'female'")
        return (arr == "female").astype(int)
    return arr.astype(int)


def discriminative_loss(params: ModelParams, z, zsex, y_kg, y_sex, train: bool = False, rng=None):
    """``(total, regressor_term, classifier_term)``: load MSE on ``z`` plus sex
    cross-entropy on ``zsex`` (the latter is 0 in plain_vae mode)."""
    nets = networks(params.arch, params.mode)
    ctx = nn.Context(train=train, rng=np.random.default_rng(rng))
    z = np.atleast_2d(z)
    out, _ = nets.reg.forward(params.tensors, z, ctx)
    reg, _ = _mse(out, _standardize(params, y_kg))
    cls = 0.0
    if params.mode == "dvae":
        logits, _ = nets.cls.forward(params.tensors, np.atleast_2d(zsex), ctx)
        cls, _ = _cross_entropy(logits, _sex_codes(y_sex))
    return reg + cls, reg, cls


def independence_excitation_loss(params: ModelParams, z, zsex, y_kg, y_sex,
                                 train: bool = False, rng=None) -> float:
    """Negated losses of the cross-routed heads: load from ``zsex``, sex from ``z``."""
    if params.mode != "dvae":
        raise ContractError("independence excitation is only defined in dvae mode")
    nets = networks(params.arch, params.mode)
    ctx = nn.Context(train=train, rng=np.random.default_rng(rng))
    out, _ = nets.reg.forward(params.tensors, np.atleast_2d(zsex), ctx)
    reg, _ = _mse(out, _standardize(params, y_kg))
    logits, _ = nets.cls.forward(params.tensors, np.atleast_2d(z), ctx)
    cls, _ = _cross_entropy(logits, _sex_codes(y_sex))
    return -reg - cls


def reconstruction_nll(x, x_hat, logvar: float | None = None):
    """Per-sample Gaussian negative log-likelihood summed over all elements.

    ``logvar=None`` means unit variance: ``0.5*||x - x_hat||^2 + 0.5*N*log(2*pi)``.
    """
    x = np.asarray(x, dtype=float)
    r = x - np.asarray(x_hat, dtype=float)
    axes = tuple(range(1, r.ndim)) if r.ndim == 3 else None
    n = r[0].size if r.ndim == 3 else r.size
    s = 0.0 if logvar is None else logvar
    return 0.5 * np.exp(-s) * np.sum(r * r, axis=axes) + 0.5 * n * (s + LOG2PI)


# ---------------------------------------------------------------- loss + gradient


def forward_backward(params: ModelParams, x, y_kg, y_sex, config: TrainConfig,
                     eps=None, eps_sex=None, ctx: nn.Context | None = None,
                     coefficients=None, need_grad: bool = True):
    """Batch-mean loss breakdown and gradients of
    ``c_vae*vae + c_dc*discriminative + c_ie*independence``.

    ``coefficients`` defaults to ``(1, beta1, beta2)``.  ``eps``/``eps_sex`` are
    the reparameterisation draws ``[mc_samples, B, latent_dim]`` (or
    ``[B, latent_dim]``); zeros when omitted.  Head gradients from the
    independence term are discarded.
    """
    p = params.tensors
    nets = networks(params.arch, params.mode)
    dvae = params.mode == "dvae"
    x, _ = _as_batch(params, x)
    ctx = ctx or nn.Context(train=True, rng=np.random.default_rng(0), stats={})
    ie_ctx = nn.Context(train=ctx.train, rng=ctx.rng, stats=None)
    b = x.shape[0]
    d = params.arch.latent_dim
    c_vae, c_dc, c_ie = coefficients or (1.0, config.beta1, config.beta2)
    if not dvae:
        c_ie = 0.0
    target = _standardize(params, y_kg)
    sex = _sex_codes(y_sex) if dvae else None

    def draws(e):
        if e is None:
            return np.zeros((config.mc_samples, b, d), dtype=x.dtype)
        e = np.asarray(e, dtype=x.dtype)
        return e[None] if e.ndim == 2 else e

    eps = draws(eps)
    eps_sex = draws(eps_sex) if dvae else None
    n_mc = eps.shape[0]

    xt = x
    mu, lv, c_enc = _encode_one(p, nets.enc, nets.enc_mu, nets.enc_lv, xt, ctx)
    if dvae:
        smu, slv, c_senc = _encode_one(p, nets.enc_sex, nets.enc_sex_mu, nets.enc_sex_lv, xt, ctx)
    _check_finite("encoder output", mu, lv, *((smu, slv) if dvae else ()))

    learned = params.decoder_variance_mode == "learned_scalar"
    s = p["dec.logvar"][0] if learned else 0.0
    n_el = x.shape[1] * x.shape[2]
    grads: dict[str, np.ndarray] = {}

    def acc(g, scale=1.0):
        for k, v in g.items():
            grads[k] = grads[k] + scale * v if k in grads else scale * v

    dmu = np.zeros_like(mu)
    dlv = np.zeros_like(lv)
    if dvae:
        dsmu = np.zeros_like(smu)
        dslv = np.zeros_like(slv)

    rec = reg_t = cls_t = ie_reg = ie_cls = 0.0
    for m in range(n_mc):
        std = np.exp(0.5 * lv)
        z = mu + std * eps[m]
        if dvae:
            sstd = np.exp(0.5 * slv)
            zs = smu + sstd * eps_sex[m]
            zin = np.concatenate([z, zs], axis=1)
        else:
            zin = z
        out, c_dec = nets.dec.forward(p, zin, ctx)
        r = xt - out
        sq = np.sum(r * r, axis=(1, 2))
        rec_i = 0.5 * np.exp(-s) * sq + 0.5 * n_el * (s + LOG2PI)
        rec += float(np.mean(rec_i)) / n_mc

        # heads, discriminative routing
        reg_out, c_reg = nets.reg.forward(p, z, ctx)
        reg_m, reg_d = _mse(reg_out, target)
        reg_t += reg_m / n_mc
        if dvae:
            logits, c_cls = nets.cls.forward(p, zs, ctx)
            cls_m, probs = _cross_entropy(logits, sex)
            cls_t += cls_m / n_mc
            xreg_out, c_xreg = nets.reg.forward(p, zs, ie_ctx)
            xreg_m, xreg_d = _mse(xreg_out, target)
            xlogits, c_xcls = nets.cls.forward(p, z, ie_ctx)
            xcls_m, xprobs = _cross_entropy(xlogits, sex)
            ie_reg += xreg_m / n_mc
            ie_cls += xcls_m / n_mc

        if not need_grad:
            continue
        w = 1.0 / (b * n_mc)
        dout = -c_vae * np.exp(-s) * r * w
        if learned:
            acc({"dec.logvar": np.array([c_vae * np.mean(0.5 * (n_el - np.exp(-s) * sq)) / n_mc],
                                        dtype=x.dtype)})
        dzin, g = nets.dec.backward(p, c_dec, dout.astype(x.dtype))
        acc(g)
        dz = dzin[:, :d].copy()
        dreg = (2.0 * c_dc * w * reg_d)[:, None].astype(x.dtype)
        dz_r, g = nets.reg.backward(p, c_reg, dreg)
        acc(g)
        dz += dz_r
        if dvae:
            dzs = dzin[:, d:].copy()
            onehot = np.eye(2, dtype=x.dtype)[sex]
            dz_c, g = nets.cls.backward(p, c_cls, (c_dc * w * (probs - onehot)).astype(x.dtype))
            acc(g)
            dzs += dz_c
            # independence term: input gradients only, head parameters frozen
            dzs_x, _ = nets.reg.backward(p, c_xreg, (-2.0 * c_ie * w * xreg_d)[:, None].astype(x.dtype))
            dz_x, _ = nets.cls.backward(p, c_xcls, (-c_ie * w * (xprobs - onehot)).astype(x.dtype))
            dz += dz_x
            dzs += dzs_x
            dsmu += dzs
            dslv += dzs * eps_sex[m] * 0.5 * sstd
        dmu += dz
        dlv += dz * eps[m] * 0.5 * std

    kl_a = float(np.mean(kl_diag_gaussian(mu, lv)))
    kl_s = float(np.mean(kl_diag_gaussian(smu, slv))) if dvae else 0.0
    vae = rec + kl_a + kl_s
    dc = reg_t + cls_t
    ie = -(ie_reg + ie_cls) if dvae else 0.0
    lb = LossBreakdown(
        vae_loss=vae, reconstruction_term=rec, kl_agnostic=kl_a, kl_specific=kl_s,
        discriminative_loss=dc, regressor_term=reg_t, classifier_term=cls_t,
        independence_loss=ie, beta1=config.beta1, beta2=config.beta2,
        total=vae + config.beta1 * dc + config.beta2 * ie)
    if not np.isfinite(lb.total):
        raise NumericError(f"non-finite loss: {lb}")
    if not need_grad:
        return lb, None

    wb = 1.0 / b
    dmu += c_vae * wb * mu
    dlv += c_vae * wb * 0.5 * (np.exp(lv) - 1.0)
    acc(_encode_back(p, nets.enc, nets.enc_mu, nets.enc_lv, c_enc, dmu, dlv))
    if dvae:
        dsmu += c_vae * wb * smu
        dslv += c_vae * wb * 0.5 * (np.exp(slv) - 1.0)
        acc(_encode_back(p, nets.enc_sex, nets.enc_sex_mu, nets.enc_sex_lv, c_senc, dsmu, dslv))
    for k in trainable_names(params):
        if k not in grads:
            grads[k] = np.zeros_like(p[k])
    return lb, grads


def vae_loss(params: ModelParams, x, eps=None, eps_sex=None) -> LossBreakdown:
    """Reconstruction NLL plus both KL terms (eval-mode networks)."""
    cfg = TrainConfig(mode=params.mode, decoder_variance_mode=params.decoder_variance_mode)
    xb, _ = _as_batch(params, x)
    dummy_y = np.full(xb.shape[0], params.target_mean)
    dummy_s = np.zeros(xb.shape[0], dtype=int)
    lb, _ = forward_backward(params, xb, dummy_y, dummy_s, cfg, eps, eps_sex,
                             nn.Context(train=False), need_grad=False)
    return LossBreakdown(vae_loss=lb.vae_loss, reconstruction_term=lb.reconstruction_term,
                         kl_agnostic=lb.kl_agnostic, kl_specific=lb.kl_specific)


def total_loss(params: ModelParams, x, y_kg, y_sex, config: TrainConfig,
               eps=None, eps_sex=None, train: bool = False, rng=None) -> LossBreakdown:
    if len(np.atleast_1d(y_kg)) == 0:
        raise ParameterError("batch is empty")
    ctx = nn.Context(train=train, rng=np.random.default_rng(rng))
    lb, _ = forward_backward(params, x, y_kg, y_sex, config, eps, eps_sex, ctx, need_grad=False)
    return lb


# ---------------------------------------------------------------- training


def _batches(order, batch_size):
    chunks = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    # batch-norm needs at least two rows; fold a trailing singleton into its neighbour
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        chunks[-2] = np.concatenate([chunks[-2], chunks[-1]])
        chunks.pop()
    return chunks


def default_arch(dataset, **overrides) -> ArchConfig:
    return ArchConfig(cycle_length=dataset.cycle_length, n_channels=dataset.n_channels,
                      **overrides)


def train(dataset, config: TrainConfig = TrainConfig(), arch: ArchConfig | None = None):
    """Fit a model on a (normalised) Dataset.  Returns ``(params, log)`` where
    ``log`` holds one epoch-mean LossBreakdown per epoch."""
    if len(dataset) == 0:
        raise ParameterError("cannot train on an empty dataset")
    arch = arch or default_arch(dataset)
    if config.mode == "dvae" and len(set(dataset.sexes)) < 2:
        raise ParameterError("dvae training needs both sexes: the sex classifier "
                             "target is degenerate on a single-sex training set")
    rng = np.random.default_rng(config.seed)
    params = init_params(arch, config.mode, rng, config.decoder_variance_mode)
    params.train_config = config
    params.channel_stats = dataset.channel_stats
    y = np.asarray(dataset.weights, dtype=float)
    if config.target_standardization:
        params.target_mean = float(y.mean())
        params.target_std = float(y.std()) if y.std() > 0 else 1.0
    x_all = np.asarray(dataset.data, dtype=arch.dtype)
    sex_all = _sex_codes(np.array(dataset.sexes))
    opt = nn.Adam(config.learning_rate, config.adam_betas, config.adam_eps)
    shape = (config.mc_samples,)
    log = []
    for epoch in range(config.epochs):
        sums = dict.fromkeys(LossBreakdown.field_names(), 0.0)
        for idx in _batches(rng.permutation(len(dataset)), config.batch_size):
            b = len(idx)
            eps = rng.standard_normal(shape + (b, arch.latent_dim))
            eps_sex = (rng.standard_normal(shape + (b, arch.latent_dim))
                       if config.mode == "dvae" else None)
            ctx = nn.Context(train=True, rng=rng, stats={})
            try:
                lb, grads = forward_backward(params, x_all[idx], y[idx], sex_all[idx],
                                             config, eps, eps_sex, ctx)
            except NumericError as exc:
                raise NumericError(f"training diverged at epoch {epoch}: {exc}") from exc
            if lb.kl_agnostic < 0 or lb.kl_specific < 0:
                raise NumericError(f"negative KL at epoch {epoch}")
            opt.step(params.tensors, grads)
            params.tensors.update(ctx.stats)
            for k in sums:
                sums[k] += getattr(lb, k) * b
        log.append(LossBreakdown(**{k: v / len(dataset) for k, v in sums.items()}))
        logger.debug("epoch %d total %.4f", epoch, log[-1].total)
    bad = [k for k, v in params.tensors.items() if not np.all(np.isfinite(v))]
    if bad:
        raise NumericError(f"non-finite parameters after training: {bad[:3]}")
    return params, log


# ---------------------------------------------------------------- inference


def predict_weight(params: ModelParams, cycles):
    """Load in kg from the sex-agnostic posterior mean (no sampling)."""
    x, single = _as_batch(params, cycles)
    nets = networks(params.arch, params.mode)
    ctx = nn.Context(train=False)
    mu, _, _ = _encode_one(params.tensors, nets.enc, nets.enc_mu, nets.enc_lv,
                           x, ctx)
    out, _ = nets.reg.forward(params.tensors, mu, ctx)
    pred = out[:, 0].astype(float) * params.target_std + params.target_mean
    _check_finite("prediction", pred)
    return float(pred[0]) if single else pred


def predict_trial(params: ModelParams, cycles, trial_ids=None) -> float:
    """Mean of the per-cycle predictions of one trial."""
    cycles = np.asarray(cycles)
    if cycles.ndim == 2:
        cycles = cycles[None]
    if cycles.shape[0] == 0:
        raise ParameterError("predict_trial needs at least one cycle")
    if trial_ids is not None and len(set(trial_ids)) > 1:
        raise DataError(f"cycles come from several trials: {sorted(set(trial_ids))}")
    return float(np.mean(predict_weight(params, cycles)))


def export_latents(params: ModelParams, dataset, path=None) -> list[dict]:
    """Posterior means per cycle; written as CSV when ``path`` is given."""
    lat = encode(params, dataset.data)
    d = params.arch.latent_dim
    header = ["subject_id", "trial_id", "sex", "weight_kg"] + [f"z_mean_{i}" for i in range(d)]
    if params.mode == "dvae":
        header += [f"zsex_mean_{i}" for i in range(d)]
    rows = []
    for i in range(len(dataset)):
        row = {"subject_id": dataset.subject_ids[i], "trial_id": dataset.trial_ids[i],
               "sex": dataset.sexes[i], "weight_kg": float(dataset.weights[i])}
        row.update({f"z_mean_{j}": float(lat.z_mean[i, j]) for j in range(d)})
        if params.mode == "dvae":
            row.update({f"zsex_mean_{j}": float(lat.zsex_mean[i, j]) for j in range(d)})
        rows.append(row)
    if path is not None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=header)
            writer.writeheader()
            for row in rows:
                writer.writerow({k: (repr(v) if isinstance(v, float) else v)
                                 for k, v in row.items()})
    return rows


# ---------------------------------------------------------------- persistence


def save_model(params: ModelParams, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {
        "format_version": FORMAT_VERSION,
        "mode": params.mode,
        "arch": asdict(params.arch),
        "decoder_variance_mode": params.decoder_variance_mode,
        "target_mean": params.target_mean,
        "target_std": params.target_std,
        "train_config": None if params.train_config is None else asdict(params.train_config),
        "beta1": None if params.train_config is None else params.train_config.beta1,
        "beta2": None if params.train_config is None else params.train_config.beta2,
        "channel_stats": None if params.channel_stats is None else {
            "mean": np.asarray(params.channel_stats[0]).tolist(),
            "std": np.asarray(params.channel_stats[1]).tolist()},
    }
    (directory / "model.json").write_text(json.dumps(meta, indent=1))
    table, offset = [], 0
    for name, arr in params.tensors.items():
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
    header = json.dumps(table).encode()
    with open(directory / "params.f32", "wb") as fh:
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for arr in params.tensors.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return directory


def load_model(directory) -> ModelParams:
    directory = Path(directory)
    try:
        meta = json.loads((directory / "model.json").read_text())
        blob = (directory / "params.f32").read_bytes()
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read model in {directory}: {exc}") from exc
    if meta.get("format_version") != FORMAT_VERSION:
        raise DataError(f"unsupported model format {meta.get('format_version')!r}")
    try:
        (n,) = struct.unpack("<I", blob[:4])
        table = json.loads(blob[4:4 + n])
    except (struct.error, json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise DataError(f"corrupt tensor table in {directory}: {exc}") from exc
    payload = np.frombuffer(blob[4 + n:], dtype="<f4")
    needed = sum(int(np.prod(e["shape"])) for e in table)
    if payload.size != needed:
        raise DataError(f"params.f32 holds {payload.size} values, expected {needed}")
    arch = ArchConfig.from_dict(meta["arch"])
    tensors = {}
    for entry in table:
        size = int(np.prod(entry["shape"]))
        chunk = payload[entry["offset"]:entry["offset"] + size]
        tensors[entry["name"]] = chunk.reshape(entry["shape"]).astype(arch.dtype)
    stats = meta.get("channel_stats")
    tc = meta.get("train_config")
    return ModelParams(
        arch, meta["mode"], tensors, meta["decoder_variance_mode"],
        meta["target_mean"], meta["target_std"],
        None if stats is None else (np.array(stats["mean"]), np.array(stats["std"])),
        None if tc is None else TrainConfig.from_dict(tc))


def write_training_log(log, path) -> None:
    names = LossBreakdown.field_names()
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch"] + names)
        for i, lb in enumerate(log):
            writer.writerow([i] + [repr(float(getattr(lb, k))) for k in names])
