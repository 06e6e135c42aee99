"""Model container and its on-disk format.

File layout::

    b"VCKP" | u16 version | u32 n | n bytes of JSON metadata | tensor data | sha256

Tensors are stored as little-endian float64 in the order listed in the
metadata; the trailing sha256 covers every preceding byte.  Metadata JSON is
written with sorted keys so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .codec import NormStats
from .errors import ConfigError, FormatError
from .layers import ConvCodecParams, named_parameters
from .model import VredConfig, VredParams
from .optim import AdamState

CKPT_MAGIC = b"VCKP"
CKPT_VERSION = 1
_PREFIX = struct.Struct("<4sHI")


@dataclass(frozen=True)
class CodecConfig:
    channels: int = 32
    kernel: int = 88
    stride: int = 44
    bias: bool = False
    sample_rate: int = 44100
    reconstruction: str = "calibrated"  # or "mean": use decoder means as-is

    def __post_init__(self):
        if self.reconstruction not in ("calibrated", "mean"):
            raise ConfigError(f"reconstruction must be 'calibrated' or 'mean', got {self.reconstruction!r}")
        if self.channels < 1 or self.stride < 1 or self.kernel < self.stride:
            raise ConfigError(
                f"invalid feature codec: channels={self.channels} kernel={self.kernel} stride={self.stride} "
                "(need kernel >= stride >= 1)"
            )


@dataclass
class Checkpoint:
    codec_cfg: CodecConfig
    vred_cfg: VredConfig
    codec: ConvCodecParams
    vred: VredParams
    norm: NormStats | None = None
    adam: AdamState | None = None
    stage: int = 0
    log_digest: str = ""

    @classmethod
    def new(cls, codec_cfg: CodecConfig, vred_cfg: VredConfig, seed: int = 0) -> "Checkpoint":
        if codec_cfg.channels != vred_cfg.feature_channels:
            raise ConfigError(
                f"codec channels {codec_cfg.channels} != VRED feature_channels {vred_cfg.feature_channels}"
            )
        rng = np.random.default_rng(seed)
        codec = ConvCodecParams.init(codec_cfg.channels, codec_cfg.kernel, codec_cfg.stride, rng, codec_cfg.bias)
        return cls(codec_cfg, vred_cfg, codec, VredParams.init(vred_cfg, rng))

    def codec_parameters(self):
        return list(named_parameters(self.codec, "codec"))

    def vred_parameters(self):
        return list(named_parameters(self.vred, "vred"))

    def parameters(self):
        return self.codec_parameters() + self.vred_parameters()

    def _model_meta(self) -> dict:
        return {
            "codec_config": dataclasses.asdict(self.codec_cfg),
            "vred_config": dataclasses.asdict(self.vred_cfg),
            "norm": None if self.norm is None else dataclasses.asdict(self.norm),
            "tensors": [[name, list(t.shape)] for name, t in self.parameters()],
        }

    def model_digest(self) -> bytes:
        """sha256 over configuration, normalization and parameter values."""
        h = hashlib.sha256(_dumps(self._model_meta()))
        for _, t in self.parameters():
            h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        return h.digest()

    def to_bytes(self) -> bytes:
        meta = self._model_meta()
        meta.update(format_version=CKPT_VERSION, stage=self.stage, log_digest=self.log_digest, adam=None)
        blobs = [np.ascontiguousarray(t.data, dtype="<f8").tobytes() for _, t in self.parameters()]
        if self.adam is not None:
            names = sorted(self.adam.m)
            meta["adam"] = {
                "t": self.adam.t, "beta1": self.adam.beta1, "beta2": self.adam.beta2, "eps": self.adam.eps,
                "names": names, "shapes": [list(self.adam.m[n].shape) for n in names],
            }
            for n in names:
                blobs.append(np.ascontiguousarray(self.adam.m[n], dtype="<f8").tobytes())
            for n in names:
                blobs.append(np.ascontiguousarray(self.adam.v[n], dtype="<f8").tobytes())
        header = _dumps(meta)
        body = _PREFIX.pack(CKPT_MAGIC, CKPT_VERSION, len(header)) + header + b"".join(blobs)
        return body + hashlib.sha256(body).digest()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if len(data) < _PREFIX.size + 32:
            raise FormatError("checkpoint file is truncated")
        body, digest = data[:-32], data[-32:]
        magic, version, n = _PREFIX.unpack_from(body)
        if magic != CKPT_MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r}")
        if version != CKPT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        if hashlib.sha256(body).digest() != digest:
            raise FormatError("checkpoint digest does not match its contents (corrupt file)")
        meta = json.loads(body[_PREFIX.size : _PREFIX.size + n])
        offset = _PREFIX.size + n
        codec_cfg = CodecConfig(**meta["codec_config"])
        vred_cfg = VredConfig(**meta["vred_config"])
        ckpt = cls.new(codec_cfg, vred_cfg, seed=0)
        ckpt.norm = None if meta["norm"] is None else NormStats(**meta["norm"])
        ckpt.stage = meta["stage"]
        ckpt.log_digest = meta["log_digest"]

        def read(shape):
            nonlocal offset
            count = int(np.prod(shape, dtype=np.int64))
            end = offset + 8 * count
            if end > len(body):
                raise FormatError("checkpoint tensor data is truncated")
            arr = np.frombuffer(body, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(shape)
            offset = end
            return arr

        params = dict(ckpt.parameters())
        for name, shape in meta["tensors"]:
            if name not in params or list(params[name].shape) != shape:
                raise FormatError(f"checkpoint tensor {name} {shape} does not fit the configured model")
            params[name].data = read(shape)
        if meta["adam"] is not None:
            a = meta["adam"]
            m = {n: read(s) for n, s in zip(a["names"], a["shapes"])}
            v = {n: read(s) for n, s in zip(a["names"], a["shapes"])}
            ckpt.adam = AdamState(m, v, a["t"], a["beta1"], a["beta2"], a["eps"])
        if offset != len(body):
            raise FormatError("checkpoint has trailing bytes")
        return ckpt

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


def _dumps(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
