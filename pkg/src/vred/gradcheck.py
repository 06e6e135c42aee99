"""Finite-difference checks of every differentiable op and both training objectives.

Each check builds a small random problem from a seed, reduces the op output
to a scalar through a fixed random weighting (so every output coordinate
matters), and compares :func:`autodiff.backward` with central differences.
Inputs are kept away from the kinks of ``clamp``/``floor``/``log``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .checkpoint import Checkpoint, CodecConfig
from .codec import fit_normalization, frames_to_windows, normalize
from .layers import (DenseParams, LstmParams, LstmState, MlpParams, conv_encode, dense_forward,
                     lstm_step, mlp_forward, named_parameters)
from .model import VredConfig, elbo_loss
from .trainer import deconv_tracking_loss, finetune_loss

TOLERANCE = 1e-4

# the small configuration used for objective-level checks
TINY_CODEC = CodecConfig(channels=4, kernel=8, stride=4)
TINY_VRED = VredConfig(latent_dim=8, hidden=8, feature_channels=4, window_frames=4, sequence_len=3,
                       feature_dim=8, mlp_hidden=8)


@dataclass
class CheckResult:
    name: str
    seed: int
    error: float

    @property
    def passed(self) -> bool:
        return self.error < TOLERANCE


@dataclass
class SuiteReport:
    results: list[CheckResult] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return bool(self.results) and all(r.passed for r in self.results)

    @property
    def max_error(self) -> float:
        return max((r.error for r in self.results), default=0.0)

    def worst_by_check(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for r in self.results:
            out[r.name] = max(out.get(r.name, 0.0), r.error)
        return out


def _param(rng, *shape, lo=-1.0, hi=1.0):
    return ad.parameter(rng.uniform(lo, hi, size=shape))


def _op_case(name: str, rng: np.random.Generator):
    """``(f, params)`` for one primitive op."""
    u = lambda *s, **k: _param(rng, *s, **k)  # noqa: E731
    if name == "matmul":
        a, b = u(3, 4), u(4, 2)
        return (lambda: ad.matmul(a, b)), [a, b]
    if name in ("add", "sub", "mul"):
        a, b = u(3, 2), u(3, 2)
        op = getattr(ad, name)
        return (lambda: op(a, b)), [a, b]
    if name == "affine":
        a = u(5)
        return (lambda: ad.affine(a, -1.7, 0.3)), [a]
    if name == "add_bias":
        a, b = u(2, 4, 3), u(4)
        return (lambda: ad.add_bias(a, b)), [a, b]
    if name in ("sigmoid", "tanh", "neg", "square"):
        a = u(6, lo=-3, hi=3)
        op = getattr(ad, name)
        return (lambda: op(a)), [a]
    if name == "log":
        a = u(6, lo=0.2, hi=3.0)
        return (lambda: ad.log(a)), [a]
    if name == "clamp":
        a = ad.parameter(np.concatenate([rng.uniform(0.05, 0.3, 3), rng.uniform(0.35, 0.65, 3),
                                         rng.uniform(0.7, 0.95, 3)]))
        return (lambda: ad.clamp(a, 0.32, 0.68)), [a]
    if name == "floor":
        a = ad.parameter(np.concatenate([rng.uniform(0.0, 0.2, 3), rng.uniform(0.3, 1.0, 3)]))
        return (lambda: ad.floor(a, 0.25)), [a]
    if name == "bernoulli_kl":
        q, p = u(5, lo=0.05, hi=0.95), u(5, lo=0.05, hi=0.95)
        return (lambda: ad.bernoulli_kl(q, p)), [q, p]
    if name == "gaussian_nll":
        x, m, v = u(5, lo=0.05, hi=0.95), u(5, lo=0.05, hi=0.95), u(5, lo=0.05, hi=0.5)
        return (lambda: ad.gaussian_nll(x, m, v)), [x, m, v]
    if name == "concat":
        a, b = u(2, 3), u(4, 3)
        return (lambda: ad.concat([a, b])), [a, b]
    if name == "reshape":
        a = u(2, 6)
        return (lambda: ad.reshape(a, (3, 4))), [a]
    if name == "transpose":
        a = u(2, 3, 4)
        return (lambda: ad.transpose(a, (2, 0, 1))), [a]
    if name == "take":
        a = u(4, 3)
        return (lambda: ad.take(a, 2)), [a]
    if name == "total":
        a = u(3, 3)
        return (lambda: ad.total(a)), [a]
    if name == "conv1d":
        x, k = u(2, 2, 16), u(3, 2, 8)
        return (lambda: ad.conv1d(x, k, stride=4, pad=(2, 2))), [x, k]
    if name == "conv1d_transposed":
        x, k = u(2, 3, 5), u(3, 2, 8)
        return (lambda: ad.conv1d_transposed(x, k, stride=4, crop=(2, 2))), [x, k]
    if name == "dense":
        p, x = DenseParams.init(4, 3, rng), u(4, 2)
        return (lambda: dense_forward(p, x)), [p.weight, p.bias, x]
    if name == "mlp":
        p, x = MlpParams.init(4, 5, 3, rng), u(4)
        return (lambda: mlp_forward(p, x, "sigmoid")), [t for _, t in named_parameters(p)] + [x]
    if name == "lstm_step":
        p, x = LstmParams.init(3, 4, rng), u(3, 2)
        h, c = u(4, 2, lo=-0.9, hi=0.9), u(4, 2)
        params = [t for _, t in named_parameters(p)]

        def f():
            s = lstm_step(p, x, LstmState(h, c))
            return ad.concat([s.h, s.c])

        return f, params + [x, h, c]
    raise KeyError(name)


OP_CHECKS = (
    "matmul", "add", "sub", "mul", "affine", "add_bias", "sigmoid", "tanh", "neg", "square", "log", "clamp",
    "floor", "bernoulli_kl", "gaussian_nll", "concat", "reshape", "transpose", "take", "total", "conv1d",
    "conv1d_transposed", "dense", "mlp", "lstm_step",
)


def check_op(name: str, seed: int) -> float:
    rng = np.random.default_rng(seed)
    f, params = _op_case(name, rng)
    weights_rng = np.random.default_rng([seed, 1])
    weights = None

    def scalar():
        nonlocal weights
        y = f()
        if y.size == 1:
            return y
        if weights is None:
            weights = ad.constant(weights_rng.standard_normal(y.shape))
        return ad.total(ad.mul(y, weights))

    return ad.finite_difference_check(scalar, params)


def tiny_checkpoint(seed: int, codec_cfg: CodecConfig = TINY_CODEC, vred_cfg: VredConfig = TINY_VRED,
                    batch: int = 2):
    """A random tiny model plus a matching audio batch ``[B, 1, T*S*W]`` and fitted normalization."""
    ckpt = Checkpoint.new(codec_cfg, vred_cfg, seed)
    rng = np.random.default_rng([seed, 2])
    n = vred_cfg.sequence_len * codec_cfg.stride * vred_cfg.window_frames
    audio = rng.uniform(-0.8, 0.8, size=(batch, 1, n))
    with ad.no_grad():
        feats = conv_encode(ckpt.codec, ad.constant(audio)).data
    ckpt.norm = fit_normalization(feats)
    return ckpt, audio


def check_stage2(seed: int, coords: int | None = 3) -> float:
    """Negative ELBO w.r.t. every VRED parameter, latent draws replayed."""
    ckpt, audio = tiny_checkpoint(seed)
    with ad.no_grad():
        feats = conv_encode(ckpt.codec, ad.constant(audio)).data
    windows = frames_to_windows(normalize(feats, ckpt.norm), ckpt.vred_cfg.window_frames)
    _, diag = elbo_loss(ckpt.vred, ckpt.vred_cfg, windows, np.random.default_rng(seed))
    corrections = diag.corrections

    def f():
        return elbo_loss(ckpt.vred, ckpt.vred_cfg, windows, corrections=corrections)[0]

    params = [t for _, t in ckpt.vred_parameters()]
    return ad.finite_difference_check(f, params, coords=coords, rng=np.random.default_rng([seed, 3]))


def check_stage3(seed: int, coords: int | None = 3) -> float:
    """Fine-tuning objective, latent draws replayed.

    The negative ELBO is checked through the whole conv -> VRED graph (conv
    kernels included).  The deconv tracking term sees the encoder features as
    constants, so its gradient is checked w.r.t. the deconv kernels only; a
    difference quotient in the encoder kernels would differentiate through the
    stop-gradient that the analytic gradient deliberately omits.
    """
    ckpt, audio = tiny_checkpoint(seed)
    _, diag = finetune_loss(ckpt, audio, np.random.default_rng(seed))
    corrections = diag.corrections
    rng = np.random.default_rng([seed, 4])

    def elbo():
        return finetune_loss(ckpt, audio, corrections=corrections)[0]

    params = [t for _, t in ckpt.parameters()]
    err = ad.finite_difference_check(elbo, params, coords=coords, rng=rng)
    tracking = ad.finite_difference_check(lambda: deconv_tracking_loss(ckpt, audio), [ckpt.codec.dec_kernels],
                                          coords=coords, rng=rng)
    return max(err, tracking)


def run_suite(seeds=range(20), coords: int | None = 3, progress: Callable[[CheckResult], None] | None = None
              ) -> SuiteReport:
    """Every op and both objectives over ``seeds``; ``coords`` subsamples objective coordinates."""
    start = time.perf_counter()
    report = SuiteReport()
    checks: list[tuple[str, Callable[[int], float]]] = [(name, lambda s, n=name: check_op(n, s)) for name in OP_CHECKS]
    checks += [("stage2_objective", lambda s: check_stage2(s, coords)),
               ("stage3_objective", lambda s: check_stage3(s, coords))]
    for seed in seeds:
        for name, check in checks:
            result = CheckResult(name, int(seed), check(int(seed)))
            report.results.append(result)
            if progress is not None:
                progress(result)
    report.seconds = time.perf_counter() - start
    return report
