"""Corpus evaluation, the feature-codec configuration sweep, and CSV dumps for plotting."""

from __future__ import annotations

import csv
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .audio import AudioSignal, sdr
from .checkpoint import Checkpoint, CodecConfig
from .codec import decode_audio, encode_audio
from .errors import ConfigError, VredError
from .layers import codec_padding, conv_decode, conv_encode
from .model import VredConfig

log = logging.getLogger(__name__)

# (stride, kernel size, number of kernels)
TABLE1_CONFIGS: tuple[tuple[int, int, int], ...] = (
    (44, 88, 32), (44, 88, 64),
    (22, 44, 32), (22, 44, 64),
    (4, 88, 32), (4, 88, 64),
    (10, 21, 256), (10, 21, 128),
    (44, 100, 32), (44, 100, 64),
    (44, 80, 32), (44, 80, 64),
)
SWEEP_COLUMNS = ("stride", "kernel", "n_kernels", "sdr_train", "sdr_test", "wall_time")


@dataclass
class SdrReport:
    per_file: list[tuple[str, float]] = field(default_factory=list)
    files_failed: list[tuple[str, str]] = field(default_factory=list)

    @property
    def mean_sdr(self) -> float | None:
        """Arithmetic mean over finite per-file values; ``None`` when there are none."""
        finite = [v for _, v in self.per_file if math.isfinite(v)]
        return sum(finite) / len(finite) if finite else None

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("file", "sdr_db"))
            for name, value in self.per_file:
                w.writerow((name, repr(value)))
            mean = self.mean_sdr
            w.writerow(("mean", "" if mean is None else repr(mean)))


def codec_roundtrip(ckpt: Checkpoint) -> Callable[[AudioSignal], np.ndarray]:
    def run(signal: AudioSignal) -> np.ndarray:
        return decode_audio(ckpt, encode_audio(ckpt, signal))

    return run


def evaluate_corpus(
    ckpt: Checkpoint | None,
    signals: Sequence[AudioSignal],
    roundtrip: Callable[[AudioSignal], np.ndarray] | None = None,
) -> SdrReport:
    """Encode, decode and score every signal; failures are recorded, not raised.

    ``roundtrip`` replaces the checkpoint codec (e.g. a pass-through for wiring tests).
    """
    run = roundtrip or codec_roundtrip(ckpt)
    report = SdrReport()
    for i, sig in enumerate(signals):
        name = sig.name or f"file_{i}"
        try:
            estimate = np.asarray(run(sig))
            n = min(estimate.size, len(sig))
            report.per_file.append((name, sdr(sig.samples[:n], estimate[:n])))
        except (VredError, ValueError) as exc:
            log.warning("evaluation of %s failed: %s", name, exc)
            report.files_failed.append((name, str(exc)))
    return report


def feature_codec_sdr(ckpt: Checkpoint, signals: Sequence[AudioSignal]) -> float:
    """Mean SDR of conv-encode -> conv-decode alone (no latent coding)."""
    values = []
    stride = ckpt.codec.stride
    for sig in signals:
        x = sig.samples[: len(sig) - len(sig) % stride]
        if x.size == 0 or not np.any(x):
            continue
        with ad.no_grad():
            r = conv_decode(ckpt.codec, conv_encode(ckpt.codec, ad.constant(x[None, :]))).data[0]
        values.append(sdr(x, np.clip(r, -1.0, 1.0)))
    finite = [v for v in values if math.isfinite(v)]
    return sum(finite) / len(finite) if finite else math.nan


def _sweep_row(job) -> dict | None:
    """Train and score one configuration; ``None`` if its shape is invalid."""
    from .trainer import TrainLog, TrainPlan, pretrain_feature_codec

    (stride, kernel, channels), train, test, epochs, seed, lr, batch_size, excerpt_samples = job
    try:
        codec_padding(kernel, stride)
        codec_cfg = CodecConfig(channels=channels, kernel=kernel, stride=stride)
        # the VRED half is never trained here; keep it minimal
        vred_cfg = VredConfig(latent_dim=1, hidden=1, feature_channels=channels,
                              window_frames=max(1, excerpt_samples // stride), feature_dim=1, mlp_hidden=1)
    except ConfigError as exc:
        log.warning("skipping config stride=%d kernel=%d kernels=%d: %s", stride, kernel, channels, exc)
        return None
    start = time.perf_counter()
    plan = TrainPlan(stage=1, epochs=epochs, lr=lr, seed=seed, batch_size=batch_size, excerpt_windows=1)
    ckpt = pretrain_feature_codec(train, plan, codec_cfg, vred_cfg, TrainLog())
    row = {
        "stride": stride, "kernel": kernel, "n_kernels": channels,
        "sdr_train": feature_codec_sdr(ckpt, train),
        "sdr_test": feature_codec_sdr(ckpt, test),
        "wall_time": time.perf_counter() - start,
    }
    log.info("sweep %s", row)
    return row


def sweep_configs(
    train: Sequence[AudioSignal],
    test: Sequence[AudioSignal],
    configs: Sequence[tuple[int, int, int]] = TABLE1_CONFIGS,
    epochs: int = 5,
    seed: int = 0,
    lr: float = 1e-3,
    batch_size: int = 16,
    excerpt_samples: int = 1760,
    workers: int = 1,
) -> list[dict]:
    """Stage-1 training per (stride, kernel, n_kernels); one result row per valid config.

    Every configuration trains on excerpts of about ``excerpt_samples`` samples
    (rounded down to a multiple of its stride), so strides are compared on
    equal amounts of audio.  ``workers > 1`` trains rows in separate
    processes; each row owns its parameters, so results do not depend on it.
    """
    jobs = [(tuple(c), train, test, epochs, seed, lr, batch_size, excerpt_samples) for c in configs]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_row, jobs))
    else:
        results = [_sweep_row(job) for job in jobs]
    return [r for r in results if r is not None]


def write_sweep_csv(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for r in rows:
            w.writerow([r["stride"], r["kernel"], r["n_kernels"], repr(r["sdr_train"]),
                        repr(r["sdr_test"]), f"{r['wall_time']:.3f}"])


def dump_waveforms(path, original: np.ndarray, reconstruction: np.ndarray) -> None:
    n = min(original.size, reconstruction.size)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("sample", "original", "reconstruction"))
        for i in range(n):
            w.writerow((i, repr(float(original[i])), repr(float(reconstruction[i]))))


def spectrogram(x: np.ndarray, n_fft: int = 1024, hop: int = 256) -> np.ndarray:
    """Hann-windowed magnitude spectrogram in dB, ``[frames, n_fft // 2 + 1]``."""
    if x.size < n_fft:
        x = np.concatenate([x, np.zeros(n_fft - x.size)])
    frames = np.lib.stride_tricks.sliding_window_view(x, n_fft)[::hop]
    mag = np.abs(np.fft.rfft(frames * np.hanning(n_fft), axis=1))
    return 20.0 * np.log10(mag + 1e-10)


def dump_spectrogram(path, x: np.ndarray, n_fft: int = 1024, hop: int = 256) -> None:
    np.savetxt(path, spectrogram(x, n_fft, hop), delimiter=",", fmt="%.6g")
