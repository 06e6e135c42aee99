"""Parameterized building blocks: dense layers, 3-layer MLPs, the LSTM cell and
the strided conv/deconv feature codec.

Vectors flow as ``[n]`` or, for a batch, as ``[n, B]`` column stacks.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError


def _uniform(rng: np.random.Generator, shape, fan_in: float, dtype) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return ad.parameter(rng.uniform(-bound, bound, size=shape), dtype=dtype)


def named_parameters(obj, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Yield ``(dotted_name, tensor)`` for every Tensor field, depth first."""
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            if f.metadata.get("static"):
                continue
            value = getattr(obj, f.name)
            if value is not None:
                yield from named_parameters(value, f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_parameters(item, f"{prefix}.{i}")


# ---------------------------------------------------------------------------
# Dense / MLP
# ---------------------------------------------------------------------------


@dataclass
class DenseParams:
    weight: Tensor  # [out, in]
    bias: Tensor  # [out]

    @classmethod
    def init(cls, n_in: int, n_out: int, rng: np.random.Generator, dtype=np.float64) -> "DenseParams":
        return cls(_uniform(rng, (n_out, n_in), n_in, dtype), _uniform(rng, (n_out,), n_in, dtype))

    @property
    def n_in(self) -> int:
        return self.weight.shape[1]

    @property
    def n_out(self) -> int:
        return self.weight.shape[0]


def dense_forward(p: DenseParams, x: Tensor) -> Tensor:
    if x.shape[0] != p.n_in:
        raise ShapeError(f"dense: expected input of size {p.n_in}, got {x.shape}")
    return ad.add_bias(ad.matmul(p.weight, x), p.bias)


@dataclass
class MlpParams:
    layers: list[DenseParams]

    @classmethod
    def init(cls, n_in: int, hidden: int, n_out: int, rng, dtype=np.float64) -> "MlpParams":
        return cls(
            [
                DenseParams.init(n_in, hidden, rng, dtype),
                DenseParams.init(hidden, hidden, rng, dtype),
                DenseParams.init(hidden, n_out, rng, dtype),
            ]
        )


def mlp_forward(p: MlpParams, x: Tensor, output_activation: str = "identity") -> Tensor:
    """Three dense layers, tanh between them, ``sigmoid`` or ``identity`` at the end."""
    h = x
    for layer in p.layers[:-1]:
        h = ad.tanh(dense_forward(layer, h))
    out = dense_forward(p.layers[-1], h)
    if output_activation == "sigmoid":
        return ad.sigmoid(out)
    if output_activation != "identity":
        raise ValueError(f"unknown output activation {output_activation!r}")
    return out


# ---------------------------------------------------------------------------
# LSTM
# ---------------------------------------------------------------------------


@dataclass
class LstmParams:
    input_gate: DenseParams  # each block: [H, I + H]
    forget_gate: DenseParams
    output_gate: DenseParams
    candidate: DenseParams

    @classmethod
    def init(cls, n_input: int, hidden: int, rng, dtype=np.float64) -> "LstmParams":
        return cls(*(DenseParams.init(n_input + hidden, hidden, rng, dtype) for _ in range(4)))

    @property
    def hidden(self) -> int:
        return self.input_gate.n_out

    @property
    def n_input(self) -> int:
        return self.input_gate.n_in - self.hidden


@dataclass
class LstmState:
    h: Tensor
    c: Tensor

    @classmethod
    def zeros(cls, hidden: int, batch: int | None = None, dtype=np.float64) -> "LstmState":
        shape = (hidden,) if batch is None else (hidden, batch)
        return cls(ad.constant(np.zeros(shape, dtype=dtype)), ad.constant(np.zeros(shape, dtype=dtype)))


def lstm_step(p: LstmParams, x: Tensor, s: LstmState) -> LstmState:
    if x.shape[0] != p.n_input or s.h.shape[0] != p.hidden or s.c.shape != s.h.shape:
        raise ShapeError(
            f"lstm: input {x.shape}, state h{s.h.shape}/c{s.c.shape} for I={p.n_input}, H={p.hidden}"
        )
    xh = ad.concat([x, s.h], axis=0)
    i = ad.sigmoid(dense_forward(p.input_gate, xh))
    f = ad.sigmoid(dense_forward(p.forget_gate, xh))
    o = ad.sigmoid(dense_forward(p.output_gate, xh))
    g = ad.tanh(dense_forward(p.candidate, xh))
    c = ad.add(ad.mul(f, s.c), ad.mul(i, g))
    h = ad.mul(o, ad.tanh(c))
    return LstmState(h, c)


# ---------------------------------------------------------------------------
# Conv feature codec
# ---------------------------------------------------------------------------


def codec_padding(kernel: int, stride: int) -> tuple[int, int]:
    """Split ``kernel - stride`` zero padding between the two ends (extra sample on the right)."""
    if stride < 1 or kernel < stride:
        raise ConfigError(f"feature codec needs kernel >= stride >= 1, got kernel={kernel} stride={stride}")
    total = kernel - stride
    return total // 2, total - total // 2


@dataclass
class ConvCodecParams:
    enc_kernels: Tensor  # [C, 1, K]
    dec_kernels: Tensor  # [C, 1, K], transposed-conv layout
    stride: int = field(metadata={"static": True})
    enc_bias: Tensor | None = None  # [C]
    dec_bias: Tensor | None = None  # [1]

    @classmethod
    def init(
        cls, channels: int, kernel: int, stride: int, rng, bias: bool = False, dtype=np.float64
    ) -> "ConvCodecParams":
        codec_padding(kernel, stride)
        enc = _uniform(rng, (channels, 1, kernel), kernel, dtype)
        dec = _uniform(rng, (channels, 1, kernel), channels * kernel / stride, dtype)
        enc_b = dec_b = None
        if bias:
            enc_b = ad.parameter(np.zeros(channels), dtype=dtype)
            dec_b = ad.parameter(np.zeros(1), dtype=dtype)
        return cls(enc, dec, stride, enc_b, dec_b)

    @property
    def channels(self) -> int:
        return self.enc_kernels.shape[0]

    @property
    def kernel(self) -> int:
        return self.enc_kernels.shape[2]

    @property
    def pad(self) -> tuple[int, int]:
        return codec_padding(self.kernel, self.stride)


def conv_encode(p: ConvCodecParams, audio: Tensor) -> Tensor:
    """``[1, L]`` (or ``[B, 1, L]``) audio to ``[C, L/S]`` (or ``[B, C, L/S]``) features."""
    L = audio.shape[-1]
    if L % p.stride:
        raise ConfigError(f"signal length {L} is not a multiple of the stride {p.stride}")
    out = ad.conv1d(audio, p.enc_kernels, p.stride, p.pad)
    if p.enc_bias is not None:
        out = ad.add_bias(out, p.enc_bias)
    return out


def conv_decode(p: ConvCodecParams, features: Tensor) -> Tensor:
    """``[C, F]`` (or ``[B, C, F]``) features to ``[1, F*S]`` (or ``[B, 1, F*S]``) audio.

    No clipping here; callers clamp to [-1, 1] only when emitting audio.
    """
    if features.shape[-1] < 1:
        raise ShapeError("conv_decode needs at least one frame")
    out = ad.conv1d_transposed(features, p.dec_kernels, p.stride, p.pad)
    if p.dec_bias is not None:
        out = ad.add_bias(out, p.dec_bias)
    return out
