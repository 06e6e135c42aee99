"""WAV I/O, excerpt slicing, SDR and a seeded synthetic corpus."""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DomainError, FormatError, SignalError

log = logging.getLogger(__name__)

DEFAULT_RATE = 44100
_FMT_PCM = 1
_FMT_FLOAT = 3
_FMT_EXTENSIBLE = 0xFFFE


@dataclass
class AudioSignal:
    samples: np.ndarray
    sample_rate: int = DEFAULT_RATE
    name: str = ""

    def __len__(self):
        return int(self.samples.size)

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


# ---------------------------------------------------------------------------
# WAV
# ---------------------------------------------------------------------------


def _chunks(data: bytes):
    pos = 12
    while pos + 8 <= len(data):
        cid, size = struct.unpack_from("<4sI", data, pos)
        body = pos + 8
        if body + size > len(data):
            raise FormatError(f"malformed WAV header: chunk {cid!r} claims {size} bytes, "
                              f"only {len(data) - body} remain")
        yield cid, data[body : body + size]
        pos = body + size + (size & 1)


def load_wav(path, expected_rate: int | None = None) -> AudioSignal:
    """Read PCM16 or float32 WAV (mono or stereo) as mono samples in [-1, 1]."""
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise FormatError(f"malformed WAV header in {path}: not a RIFF/WAVE file")
    fmt = None
    pcm = None
    for cid, body in _chunks(data):
        if cid == b"fmt ":
            if len(body) < 16:
                raise FormatError(f"malformed WAV header in {path}: fmt chunk too short")
            fmt = struct.unpack_from("<HHIIHH", body)
            if fmt[0] == _FMT_EXTENSIBLE:
                if len(body) < 26:
                    raise FormatError(f"malformed WAV header in {path}: short extensible fmt chunk")
                fmt = (struct.unpack_from("<H", body, 24)[0],) + fmt[1:]
        elif cid == b"data":
            pcm = body
    if fmt is None or pcm is None:
        raise FormatError(f"malformed WAV header in {path}: missing fmt or data chunk")
    code, channels, rate, _, block_align, bits = fmt
    if channels not in (1, 2):
        raise FormatError(f"{path}: {channels} channels unsupported (mono or stereo only)")
    if code == _FMT_PCM and bits == 16:
        raw = np.frombuffer(pcm[: len(pcm) // 2 * 2], dtype="<i2").astype(np.float64) / 32768.0
    elif code == _FMT_FLOAT and bits == 32:
        raw = np.frombuffer(pcm[: len(pcm) // 4 * 4], dtype="<f4").astype(np.float64)
    else:
        raise FormatError(f"{path}: unsupported encoding (format {code}, {bits} bits); "
                          "PCM16 and float32 are supported")
    frames = raw.size // channels
    samples = raw[: frames * channels].reshape(frames, channels).mean(axis=1)
    if expected_rate is not None and rate != expected_rate:
        log.warning("%s is sampled at %d Hz, model expects %d Hz; not resampling", path, rate, expected_rate)
    return AudioSignal(np.clip(samples, -1.0, 1.0), rate, path.stem)


def write_wav(signal: AudioSignal, path) -> None:
    """Write mono 16-bit PCM."""
    x = np.asarray(signal.samples, dtype=np.float64)
    if x.ndim != 1:
        raise SignalError("write_wav expects mono samples")
    if np.any(np.abs(x) > 1.0) or not np.all(np.isfinite(x)):
        raise SignalError("samples must be finite and within [-1, 1]")
    q = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")
    payload = q.tobytes()
    rate = int(signal.sample_rate)
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF", 36 + len(payload), b"WAVE",
        b"fmt ", 16, _FMT_PCM, 1, rate, rate * 2, 2, 16,
        b"data", len(payload),
    )
    Path(path).write_bytes(header + payload)


# ---------------------------------------------------------------------------
# Excerpts and SDR
# ---------------------------------------------------------------------------


def slice_excerpts(signal: AudioSignal, excerpt_samples: int, seed: int | None = 0,
                   multiple: int | None = None) -> list[AudioSignal]:
    """Non-overlapping excerpts in seeded random order; the remainder is dropped.

    With ``multiple`` the excerpt length is first trimmed down to a multiple of it.
    """
    n = int(excerpt_samples)
    if multiple:
        n -= n % multiple
    if n < 1:
        raise SignalError(f"excerpt length {excerpt_samples} is shorter than one block of {multiple}")
    count = len(signal) // n
    order = np.random.default_rng(seed).permutation(count)
    return [
        AudioSignal(signal.samples[i * n : (i + 1) * n].copy(), signal.sample_rate, f"{signal.name}#{i}")
        for i in order
    ]


def _as_samples(x) -> np.ndarray:
    return np.asarray(getattr(x, "samples", x), dtype=np.float64)


def sdr(target, estimate) -> float:
    """Signal-to-distortion ratio in dB; ``inf`` when the estimate is exact."""
    s, e = _as_samples(target), _as_samples(estimate)
    if s.shape != e.shape:
        raise SignalError(f"sdr: length mismatch {s.shape} vs {e.shape}")
    signal_energy = float(np.dot(s, s))
    if signal_energy == 0.0:
        raise DomainError("sdr: reference signal is all zeros, SDR is undefined")
    diff = e - s
    error_energy = float(np.dot(diff, diff))
    if error_energy == 0.0:
        return math.inf
    return 10.0 * math.log10(signal_energy / error_energy)


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------


def synth_signal(duration: float, rng: np.random.Generator, sample_rate: int = DEFAULT_RATE,
                 name: str = "") -> AudioSignal:
    """A mixture of sines, a linear chirp and an amplitude-modulated noise burst."""
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate
    x = np.zeros(n)
    for _ in range(rng.integers(1, 4)):
        f = rng.uniform(80.0, 2000.0)
        x += rng.uniform(0.2, 1.0) * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    f0, f1 = rng.uniform(100.0, 1000.0), rng.uniform(500.0, 4000.0)
    chirp_phase = 2 * np.pi * (f0 * t + 0.5 * (f1 - f0) * t * t / max(duration, 1e-9))
    x += rng.uniform(0.1, 0.5) * np.sin(chirp_phase)
    center, width = rng.uniform(0, duration), rng.uniform(0.05, 0.3) * duration
    envelope = np.exp(-0.5 * ((t - center) / max(width, 1e-9)) ** 2)
    envelope *= 0.5 * (1 + np.sin(2 * np.pi * rng.uniform(2.0, 10.0) * t))
    x += rng.uniform(0.02, 0.1) * envelope * rng.standard_normal(n)
    peak = np.max(np.abs(x))
    if peak > 0:
        x *= rng.uniform(0.5, 0.9) / peak
    return AudioSignal(x, sample_rate, name)


def synth_corpus(n_files: int, duration: float, seed: int = 0, sample_rate: int = DEFAULT_RATE) -> list[AudioSignal]:
    seeds = np.random.SeedSequence(seed).spawn(n_files)
    return [
        synth_signal(duration, np.random.default_rng(s), sample_rate, f"synth_{i:03d}")
        for i, s in enumerate(seeds)
    ]


def write_corpus(signals: list[AudioSignal], out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for sig in signals:
        p = out / f"{sig.name}.wav"
        write_wav(sig, p)
        paths.append(p)
    return paths


def load_corpus(source, expected_rate: int | None = None) -> list[AudioSignal]:
    """Load a single WAV file or every ``*.wav`` in a directory (sorted by name)."""
    source = Path(source)
    if not source.exists():
        raise FileNotFoundError(f"no such file or directory: {source}")
    files = sorted(source.glob("*.wav")) if source.is_dir() else [source]
    return [load_wav(f, expected_rate) for f in files]
