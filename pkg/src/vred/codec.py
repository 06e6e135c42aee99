"""Audio <-> bitstream codec built on a trained checkpoint.

Stream layout (all integers little-endian)::

    magic            4s   b"VRED"
    format_version   u16
    model_digest     32s  sha256 of the checkpoint's model section
    sample_rate      u32
    stride           u16
    kernel           u16
    channels         u16
    window_frames    u16
    latent_dim       u16
    num_steps        u64
    original_length  u64
    payload          ceil(latent_dim / 8) * num_steps bytes, LSB-first per code

Encoding is deterministic in ``threshold`` mode, so a decoder process holding
only the checkpoint and the stream reproduces the encoder's reconstruction
bit for bit.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import TYPE_CHECKING, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DegenerateCorpusError, DigestMismatchError, FormatError, SignalError
from .layers import conv_decode, conv_encode
from .model import calibrate_output, decode_sequence, encode_sequence

if TYPE_CHECKING:
    from .checkpoint import Checkpoint

MAGIC = b"VRED"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4sH32sIHHHHHQQ")
PROB_EPS = 1e-6


# ---------------------------------------------------------------------------
# Feature normalization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NormStats:
    feature_min: float
    feature_max: float
    margin: float = 0.05

    def __post_init__(self):
        if not self.feature_max > self.feature_min:
            raise DegenerateCorpusError(
                f"normalization range is empty: min={self.feature_min} max={self.feature_max}"
            )

    @property
    def span(self) -> float:
        return self.feature_max - self.feature_min


def fit_normalization(features: Sequence[np.ndarray] | np.ndarray, margin: float = 0.05) -> NormStats:
    """Min/max over every feature value, widened by ``margin * range`` on each side."""
    arrays = [np.asarray(f) for f in features] if not isinstance(features, np.ndarray) else [features]
    arrays = [a for a in arrays if a.size]
    if not arrays:
        raise DegenerateCorpusError("cannot fit normalization on an empty corpus")
    lo = min(float(a.min()) for a in arrays)
    hi = max(float(a.max()) for a in arrays)
    if not hi > lo:
        raise DegenerateCorpusError(f"all feature values equal {lo}; corpus is degenerate")
    pad = margin * (hi - lo)
    return NormStats(lo - pad, hi + pad, margin)


def normalize(f, stats: NormStats, eps: float = PROB_EPS):
    """Affine map of ``[min, max]`` onto ``[0, 1]``, clamped to ``[eps, 1 - eps]``.

    Works on arrays and on graph tensors (stage-3 fine-tuning).
    """
    scale = 1.0 / stats.span
    shift = -stats.feature_min * scale
    if isinstance(f, Tensor):
        return ad.clamp(ad.affine(f, scale, shift), eps, 1.0 - eps)
    return np.clip(np.asarray(f) * scale + shift, eps, 1.0 - eps)


def denormalize(u, stats: NormStats):
    if isinstance(u, Tensor):
        return ad.affine(u, stats.span, stats.feature_min)
    return np.asarray(u) * stats.span + stats.feature_min


# ---------------------------------------------------------------------------
# Feature frames <-> VRED windows
# ---------------------------------------------------------------------------


def frames_to_windows(features, window_frames: int):
    """``[C, T*W]`` -> ``[T, C*W]``; batched ``[B, C, T*W]`` -> ``[T, C*W, B]``.

    Each window is flattened channel-major.
    """
    is_tensor = isinstance(features, Tensor)
    shape = features.shape
    W = window_frames
    if shape[-1] % W:
        raise SignalError(f"{shape[-1]} frames do not split into windows of {W}")
    T = shape[-1] // W
    rs = ad.reshape if is_tensor else np.reshape
    tp = ad.transpose if is_tensor else np.transpose
    if len(shape) == 2:
        C = shape[0]
        return rs(tp(rs(features, (C, T, W)), (1, 0, 2)), (T, C * W))
    B, C = shape[0], shape[1]
    return rs(tp(rs(features, (B, C, T, W)), (2, 1, 3, 0)), (T, C * W, B))


def windows_to_frames(windows: np.ndarray, channels: int) -> np.ndarray:
    """Inverse of :func:`frames_to_windows` for the unbatched ``[T, C*W]`` layout."""
    T, X = windows.shape
    W = X // channels
    return windows.reshape(T, channels, W).transpose(1, 0, 2).reshape(channels, T * W)


# ---------------------------------------------------------------------------
# Bit packing and the stream container
# ---------------------------------------------------------------------------


def code_bytes(latent_dim: int) -> int:
    return (latent_dim + 7) // 8


def pack_bits(bits: Sequence[np.ndarray]) -> bytes:
    """Pack equal-length bit vectors LSB-first, one byte-aligned record per vector."""
    if len(bits) == 0:
        return b""
    arr = np.asarray(bits, dtype=np.uint8)
    if arr.ndim != 2:
        raise FormatError("bit vectors must all have the same length")
    if np.any(arr > 1):
        raise FormatError("bit vectors may only contain 0 and 1")
    return np.packbits(arr, axis=1, bitorder="little").tobytes()


def unpack_bits(payload: bytes, latent_dim: int, num_steps: int) -> list[np.ndarray]:
    nbytes = code_bytes(latent_dim)
    if len(payload) != nbytes * num_steps:
        raise FormatError(
            f"payload has {len(payload)} bytes, expected {nbytes * num_steps} "
            f"for {num_steps} codes of {latent_dim} bits"
        )
    if num_steps == 0:
        return []
    raw = np.frombuffer(payload, dtype=np.uint8).reshape(num_steps, nbytes)
    bits = np.unpackbits(raw, axis=1, bitorder="little")[:, :latent_dim]
    return list(bits)


@dataclass(frozen=True)
class StreamHeader:
    model_digest: bytes
    sample_rate: int
    stride: int
    kernel: int
    channels: int
    window_frames: int
    latent_dim: int
    num_steps: int
    original_length: int
    format_version: int = FORMAT_VERSION
    magic: bytes = MAGIC

    def to_bytes(self) -> bytes:
        return HEADER.pack(
            self.magic, self.format_version, self.model_digest, self.sample_rate, self.stride,
            self.kernel, self.channels, self.window_frames, self.latent_dim, self.num_steps,
            self.original_length,
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "StreamHeader":
        if len(data) < HEADER.size:
            raise FormatError(f"stream is {len(data)} bytes, shorter than the {HEADER.size}-byte header")
        (magic, version, digest, rate, stride, kernel, channels, window, latent, steps,
         length) = HEADER.unpack_from(data)
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}; not a .vred stream")
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported stream format version {version}")
        return cls(digest, rate, stride, kernel, channels, window, latent, steps, length, version, magic)


@dataclass(frozen=True)
class EncodedStream:
    header: StreamHeader
    payload: bytes

    def __post_init__(self):
        expected = code_bytes(self.header.latent_dim) * self.header.num_steps
        if len(self.payload) != expected:
            raise FormatError(f"payload has {len(self.payload)} bytes, header implies {expected}")

    def to_bytes(self) -> bytes:
        return self.header.to_bytes() + self.payload

    @classmethod
    def from_bytes(cls, data: bytes) -> "EncodedStream":
        header = StreamHeader.from_bytes(data)
        return cls(header, bytes(data[HEADER.size :]))

    def codes(self) -> list[np.ndarray]:
        return unpack_bits(self.payload, self.header.latent_dim, self.header.num_steps)


def write_stream(stream: EncodedStream, path) -> None:
    Path(path).write_bytes(stream.to_bytes())


def read_stream(path) -> EncodedStream:
    return EncodedStream.from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# Rate accounting
# ---------------------------------------------------------------------------


def compression_ratio(channels: int, stride: int, latent_dim: int, window_frames: int,
                      source_bits: int = 16) -> tuple[Fraction, Fraction]:
    """``(dimension_ratio, bit_ratio)``.

    The dimension ratio counts values: ``(C/S) * (D/(C*W))``.  The bit ratio
    counts bits: ``D`` code bits per ``S*W`` source samples of ``source_bits``.
    """
    dimension = Fraction(channels, stride) * Fraction(latent_dim, channels * window_frames)
    bits = Fraction(latent_dim, stride * window_frames * source_bits)
    return dimension, bits


# ---------------------------------------------------------------------------
# End-to-end audio coding
# ---------------------------------------------------------------------------


def _samples(signal) -> tuple[np.ndarray, int | None]:
    rate = getattr(signal, "sample_rate", None)
    samples = np.asarray(getattr(signal, "samples", signal), dtype=np.float64)
    if samples.ndim != 1:
        raise SignalError(f"expected a mono signal, got array of shape {samples.shape}")
    return samples, rate


def analyze(ckpt: "Checkpoint", samples: np.ndarray) -> np.ndarray:
    """Padded samples -> normalized feature windows ``[T, C*W]``."""
    with ad.no_grad():
        feats = conv_encode(ckpt.codec, ad.constant(samples[None, :])).data
    return frames_to_windows(normalize(feats, ckpt.norm), ckpt.vred_cfg.window_frames)


def synthesize(ckpt: "Checkpoint", windows: np.ndarray) -> np.ndarray:
    """Normalized feature windows ``[T, C*W]`` -> unclipped waveform."""
    feats = denormalize(windows_to_frames(windows, ckpt.codec.channels), ckpt.norm)
    with ad.no_grad():
        return conv_decode(ckpt.codec, ad.constant(feats)).data[0]


def encode_audio(ckpt: "Checkpoint", signal, mode: str = "threshold", seed: int | None = None) -> EncodedStream:
    samples, rate = _samples(signal)
    block = ckpt.codec.stride * ckpt.vred_cfg.window_frames
    n = samples.size
    if n < block:
        raise SignalError(f"signal has {n} samples; at least {block} (stride * window_frames) are needed")
    padded = np.concatenate([samples, np.zeros(-n % block)])
    steps = encode_sequence(ckpt.vred, ckpt.vred_cfg, analyze(ckpt, padded), mode=mode, seed=seed)
    header = StreamHeader(
        model_digest=ckpt.model_digest(),
        sample_rate=int(rate if rate is not None else ckpt.codec_cfg.sample_rate),
        stride=ckpt.codec.stride,
        kernel=ckpt.codec.kernel,
        channels=ckpt.codec.channels,
        window_frames=ckpt.vred_cfg.window_frames,
        latent_dim=ckpt.vred_cfg.latent_dim,
        num_steps=len(steps),
        original_length=n,
    )
    return EncodedStream(header, pack_bits([s.bits for s in steps]))


def check_compatible(ckpt: "Checkpoint", header: StreamHeader, force_digest: bool = False) -> None:
    expected = (ckpt.codec.stride, ckpt.codec.kernel, ckpt.codec.channels,
                ckpt.vred_cfg.window_frames, ckpt.vred_cfg.latent_dim)
    got = (header.stride, header.kernel, header.channels, header.window_frames, header.latent_dim)
    if expected != got:
        raise FormatError(f"stream geometry {got} does not match the model {expected} "
                          "(stride, kernel, channels, window_frames, latent_dim)")
    if header.model_digest != ckpt.model_digest() and not force_digest:
        raise DigestMismatchError(
            f"stream was encoded with model {header.model_digest.hex()[:16]}..., "
            f"this checkpoint is {ckpt.model_digest().hex()[:16]}..."
        )


def decode_audio(ckpt: "Checkpoint", stream: EncodedStream, force_digest: bool = False) -> np.ndarray:
    """Reconstruct ``original_length`` samples in [-1, 1] from a stream."""
    header = stream.header
    check_compatible(ckpt, header, force_digest)
    windows = decode_sequence(ckpt.vred, ckpt.vred_cfg, stream.codes())
    if windows.shape[0] == 0:
        return np.zeros(header.original_length)
    if ckpt.codec_cfg.reconstruction == "calibrated":
        windows = calibrate_output(windows, ckpt.vred_cfg.var_floor)
    audio = np.clip(synthesize(ckpt, windows), -1.0, 1.0)
    n = header.original_length
    if audio.size < n:
        audio = np.concatenate([audio, np.zeros(n - audio.size)])
    return audio[:n]
