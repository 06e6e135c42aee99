"""Variational recurrent encoder-decoder with Bernoulli latent codes.

One timestep consumes a flattened window of normalized features ``x_t`` (size
``channels * window_frames``) and produces ``latent_dim`` bits.  The recurrent
state is advanced from decoder-side quantities only (the decoder output and
the latent code), so a decoder holding nothing but the bits tracks exactly the
same state as the encoder.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, FormatError, ShapeError
from .layers import DenseParams, LstmParams, LstmState, MlpParams, dense_forward, lstm_step, mlp_forward


@dataclass(frozen=True)
class VredConfig:
    latent_dim: int = 128
    hidden: int = 128
    feature_channels: int = 32
    window_frames: int = 32
    sequence_len: int = 8
    var_floor: float = 1e-4
    prob_eps: float = 1e-6
    feature_dim: int = 128  # width of the phi_x / phi_z / phi_dec feature maps
    mlp_hidden: int = 128

    def __post_init__(self):
        for name in ("latent_dim", "hidden", "feature_channels", "window_frames", "sequence_len",
                     "feature_dim", "mlp_hidden"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if not (self.var_floor > 0 and 0 < self.prob_eps < 0.5):
            raise ConfigError("var_floor must be > 0 and prob_eps in (0, 0.5)")
        if self.latent_dim > self.input_dim:
            raise ConfigError(
                f"latent_dim {self.latent_dim} exceeds the window size {self.input_dim}; nothing is compressed"
            )

    @property
    def input_dim(self) -> int:
        return self.feature_channels * self.window_frames


@dataclass
class VredParams:
    phi_x: DenseParams
    phi_z: DenseParams
    prior_net: list[DenseParams]
    enc_mlp: MlpParams
    dec_mlp: MlpParams
    phi_dec: DenseParams
    lstm: LstmParams

    @classmethod
    def init(cls, cfg: VredConfig, rng: np.random.Generator, dtype=np.float64) -> "VredParams":
        X, D, H, F, M = cfg.input_dim, cfg.latent_dim, cfg.hidden, cfg.feature_dim, cfg.mlp_hidden
        return cls(
            phi_x=DenseParams.init(X, F, rng, dtype),
            phi_z=DenseParams.init(D, F, rng, dtype),
            prior_net=[DenseParams.init(H, M, rng, dtype), DenseParams.init(M, D, rng, dtype)],
            enc_mlp=MlpParams.init(F + H, M, D, rng, dtype),
            dec_mlp=MlpParams.init(F + H, M, X, rng, dtype),
            phi_dec=DenseParams.init(X, F, rng, dtype),
            lstm=LstmParams.init(2 * F, H, rng, dtype),
        )


class Sample(NamedTuple):
    bits: np.ndarray  # uint8, same shape as p
    value: Tensor  # p + correction; equals bits as a value
    correction: np.ndarray  # the detached c


@dataclass
class LatentStep:
    prior_p: np.ndarray
    post_p: np.ndarray
    bits: np.ndarray
    reparam_value: np.ndarray
    p_x: np.ndarray | None = None  # decoder output the encoder tracked for this step


@dataclass
class Diagnostics:
    kl: list[float] = field(default_factory=list)  # per step, batch mean
    log_lik: list[float] = field(default_factory=list)
    corrections: list[np.ndarray] = field(default_factory=list)

    @property
    def total_kl(self) -> float:
        return float(sum(self.kl))

    @property
    def total_log_lik(self) -> float:
        return float(sum(self.log_lik))


def _clamp_prob(p: Tensor, cfg: VredConfig) -> Tensor:
    return ad.clamp(p, cfg.prob_eps, 1.0 - cfg.prob_eps)


def prior_step(params: VredParams, cfg: VredConfig, h_prev: Tensor) -> Tensor:
    first, second = params.prior_net
    hidden = ad.tanh(dense_forward(first, h_prev))
    return _clamp_prob(ad.sigmoid(dense_forward(second, hidden)), cfg)


def posterior_step(params: VredParams, cfg: VredConfig, x_t: Tensor, h_prev: Tensor) -> Tensor:
    if x_t.shape[0] != cfg.input_dim:
        raise ShapeError(f"feature window has size {x_t.shape[0]}, expected {cfg.input_dim}")
    feats = ad.tanh(dense_forward(params.phi_x, x_t))
    return _clamp_prob(mlp_forward(params.enc_mlp, ad.concat([feats, h_prev]), "sigmoid"), cfg)


def sample_reparam(p: Tensor, rng: np.random.Generator, correction: np.ndarray | None = None) -> Sample:
    """Draw ``t ~ Bern(p)`` and return ``p + c`` with ``c = t(1-p) - (1-t)p`` detached.

    The forward value is exactly ``t``; the gradient reaching ``p`` is the
    incoming gradient unchanged.  Passing ``correction`` replays a previous
    draw's ``c`` instead of sampling (used to probe the smooth surrogate).
    """
    if correction is None:
        t = (rng.random(p.shape) < p.data).astype(p.data.dtype)
        correction = t * (1.0 - p.data) - (1.0 - t) * p.data
    value = ad.add(p, ad.constant(correction))
    bits = (value.data >= 0.5).astype(np.uint8)
    return Sample(bits, value, correction)


def threshold_latent(p: np.ndarray | Tensor) -> np.ndarray:
    """Deterministic code: bit is 1 iff p >= 0.5."""
    data = p.data if isinstance(p, Tensor) else np.asarray(p)
    return (data >= 0.5).astype(np.uint8)


def generate_step(params: VredParams, cfg: VredConfig, z_value: Tensor, h_prev: Tensor) -> tuple[Tensor, Tensor]:
    """Decoder mean ``p_x`` and variance ``max(p_x (1 - p_x), var_floor)``."""
    if z_value.shape[0] != cfg.latent_dim:
        raise ShapeError(f"latent has size {z_value.shape[0]}, expected {cfg.latent_dim}")
    zf = ad.tanh(dense_forward(params.phi_z, z_value))
    p_x = mlp_forward(params.dec_mlp, ad.concat([zf, h_prev]), "sigmoid")
    sigma2 = ad.floor(ad.mul(p_x, ad.affine(p_x, -1.0, 1.0)), cfg.var_floor)
    return p_x, sigma2


def recurrence_step(params: VredParams, cfg: VredConfig, p_x: Tensor, z_value: Tensor, s: LstmState) -> LstmState:
    dec_feats = ad.tanh(dense_forward(params.phi_dec, p_x))
    zf = ad.tanh(dense_forward(params.phi_z, z_value))
    return lstm_step(params.lstm, ad.concat([dec_feats, zf]), s)


def calibrate_output(p_x: np.ndarray, var_floor: float) -> np.ndarray:
    """Map decoder means back to the feature values they are optimal for.

    Under N(p, p(1-p)) the likelihood of a target x is maximized by a p pushed
    away from 0.5 (x=0.4 gives p~0.18), so p_x itself is a biased point
    estimate.  Setting the derivative in p to zero gives a quadratic in
    e = x - p whose root is returned as ``p + e``, written in a form that is
    stable at p=0.5.  Where the variance floor is active the optimum is x=p.
    """
    p = np.asarray(p_x)
    v = p * (1.0 - p)
    dv = 1.0 - 2.0 * p
    e = v * dv / (v + np.sqrt(v * v + v * dv * dv))
    return np.where(v > var_floor, p + e, p)


def _initial_state(cfg: VredConfig, like: Tensor) -> LstmState:
    batch = like.shape[1] if like.data.ndim == 2 else None
    return LstmState.zeros(cfg.hidden, batch, like.data.dtype)


def _as_steps(x_seq) -> list[Tensor]:
    if isinstance(x_seq, np.ndarray):
        return [ad.constant(x) for x in x_seq]
    return [x if isinstance(x, Tensor) else ad.constant(x) for x in x_seq]


def elbo_loss(
    params: VredParams,
    cfg: VredConfig,
    x_seq,
    rng: np.random.Generator | None = None,
    corrections: Sequence[np.ndarray] | None = None,
) -> tuple[Tensor, Diagnostics]:
    """Negative sequential ELBO, summed over steps and coordinates.

    ``x_seq`` holds T windows, each ``[X]`` or ``[X, B]``; with a batch the
    loss is averaged over columns.  Latents are sampled from ``rng`` unless
    ``corrections`` replays the detached offsets of an earlier call.
    """
    steps = _as_steps(x_seq)
    if not steps:
        raise ShapeError("elbo_loss needs at least one timestep")
    batch = steps[0].shape[1] if steps[0].data.ndim == 2 else 1
    state = _initial_state(cfg, steps[0])
    diag = Diagnostics()
    terms = []
    for t, x_t in enumerate(steps):
        prior_p = prior_step(params, cfg, state.h)
        post_p = posterior_step(params, cfg, x_t, state.h)
        sample = sample_reparam(post_p, rng, None if corrections is None else corrections[t])
        p_x, sigma2 = generate_step(params, cfg, sample.value, state.h)
        state = recurrence_step(params, cfg, p_x, sample.value, state)
        kl = ad.total(ad.bernoulli_kl(post_p, prior_p))
        nll = ad.total(ad.gaussian_nll(x_t, p_x, sigma2))
        diag.kl.append(kl.item() / batch)
        diag.log_lik.append(-nll.item() / batch)
        diag.corrections.append(sample.correction)
        terms.append(ad.add(kl, nll))
    loss = terms[0]
    for term in terms[1:]:
        loss = ad.add(loss, term)
    if batch > 1:
        loss = ad.affine(loss, 1.0 / batch)
    return loss, diag


def encode_sequence(
    params: VredParams,
    cfg: VredConfig,
    x_seq: np.ndarray,
    mode: str = "threshold",
    seed: int | None = None,
) -> list[LatentStep]:
    """Encoder side: emit one code per window while replaying the decoder's recurrence."""
    if mode not in ("threshold", "sample"):
        raise ConfigError(f"unknown encode mode {mode!r}")
    rng = np.random.default_rng(seed)
    out: list[LatentStep] = []
    with ad.no_grad():
        state = None
        for x in np.asarray(x_seq):
            x_t = ad.constant(x)
            if state is None:
                state = _initial_state(cfg, x_t)
            prior_p = prior_step(params, cfg, state.h)
            post_p = posterior_step(params, cfg, x_t, state.h)
            if mode == "threshold":
                bits = threshold_latent(post_p)
                value = bits.astype(post_p.data.dtype)
            else:
                sample = sample_reparam(post_p, rng)
                bits, value = sample.bits, sample.value.data
            p_x, state = _decoder_step(params, cfg, bits, state)
            out.append(LatentStep(prior_p.data, post_p.data, bits, value, p_x))
    return out


def _decoder_step(params: VredParams, cfg: VredConfig, bits: np.ndarray, state: LstmState):
    # shared verbatim by encoder and decoder so both see identical arithmetic
    z = ad.constant(bits.astype(state.h.data.dtype))
    p_x, _ = generate_step(params, cfg, z, state.h)
    return p_x.data, recurrence_step(params, cfg, p_x, z, state)


def decode_sequence(params: VredParams, cfg: VredConfig, bits: Sequence[np.ndarray], dtype=np.float64) -> np.ndarray:
    """Decoder side: rebuild the feature windows ``[T, X]`` from codes alone."""
    windows = []
    with ad.no_grad():
        state = LstmState.zeros(cfg.hidden, None, dtype)
        for b in bits:
            b = np.asarray(b, dtype=np.uint8)
            if b.shape != (cfg.latent_dim,):
                raise FormatError(f"code has shape {b.shape}, expected ({cfg.latent_dim},)")
            p_x, state = _decoder_step(params, cfg, b, state)
            windows.append(p_x)
    if not windows:
        return np.zeros((0, cfg.input_dim), dtype=dtype)
    return np.stack(windows)
