"""Regenerate the golden bitstream fixtures (run only when the format changes on purpose).

    python3 tests/data/make_golden.py

Writes ``golden.ckpt`` (a seeded tiny model), ``golden.vred`` (a seeded
synthetic signal encoded with it) and ``golden.json`` (sha256 of the
decoded float64 little-endian waveform, plus file digests).
"""

import hashlib
import json
from pathlib import Path

import numpy as np

from vred import autodiff as ad
from vred.audio import synth_signal
from vred.checkpoint import Checkpoint, CodecConfig
from vred.codec import decode_audio, encode_audio, fit_normalization, write_stream
from vred.layers import conv_encode
from vred.model import VredConfig

HERE = Path(__file__).parent


def build():
    codec = CodecConfig(channels=4, kernel=8, stride=4)
    vred = VredConfig(latent_dim=12, hidden=8, feature_channels=4, window_frames=4, feature_dim=8, mlp_hidden=8)
    ckpt = Checkpoint.new(codec, vred, seed=2024)
    signal = synth_signal(0.01, np.random.default_rng(2024), name="golden")
    with ad.no_grad():
        ckpt.norm = fit_normalization(conv_encode(ckpt.codec, ad.constant(signal.samples[None, :400])).data)
    return ckpt, signal


def waveform_digest(audio: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(audio, dtype="<f8").tobytes()).hexdigest()


if __name__ == "__main__":
    ckpt, signal = build()
    stream = encode_audio(ckpt, signal)
    ckpt.save(HERE / "golden.ckpt")
    write_stream(stream, HERE / "golden.vred")
    audio = decode_audio(ckpt, stream)
    meta = {
        "waveform_sha256": waveform_digest(audio),
        "samples": int(audio.size),
        "vred_sha256": hashlib.sha256(stream.to_bytes()).hexdigest(),
        "ckpt_sha256": hashlib.sha256(ckpt.to_bytes()).hexdigest(),
    }
    (HERE / "golden.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    print(json.dumps(meta, indent=2))
