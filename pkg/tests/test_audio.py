import math
import struct

import numpy as np
import pytest

from vred.audio import AudioSignal, load_corpus, load_wav, sdr, slice_excerpts, synth_corpus, write_corpus, write_wav
from vred.errors import DomainError, FormatError, SignalError


def _wav_bytes(fmt_code, channels, rate, bits, payload, extensible=False):
    block = channels * bits // 8
    if extensible:
        fmt = struct.pack("<HHIIHHHHI16s", 0xFFFE, channels, rate, rate * block, block, bits, 22, bits, 0,
                          struct.pack("<H", fmt_code) + bytes(14))
    else:
        fmt = struct.pack("<HHIIHH", fmt_code, channels, rate, rate * block, block, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", len(payload)) + payload
    return b"RIFF" + struct.pack("<I", len(body)) + body


class TestWav:
    def test_pcm16_roundtrip_within_quantization(self, tmp_path, rng):
        x = rng.uniform(-1, 1, 1000)
        write_wav(AudioSignal(x, 16000), tmp_path / "a.wav")
        back = load_wav(tmp_path / "a.wav")
        assert back.sample_rate == 16000
        np.testing.assert_allclose(back.samples, x, atol=1 / 32768)

    def test_write_is_idempotent(self, tmp_path, rng):
        x = rng.uniform(-1, 1, 100)
        write_wav(AudioSignal(x), tmp_path / "a.wav")
        write_wav(load_wav(tmp_path / "a.wav"), tmp_path / "b.wav")
        assert (tmp_path / "a.wav").read_bytes() == (tmp_path / "b.wav").read_bytes()

    def test_silence_exact(self, tmp_path):
        write_wav(AudioSignal(np.zeros(50)), tmp_path / "z.wav")
        np.testing.assert_array_equal(load_wav(tmp_path / "z.wav").samples, np.zeros(50))

    def test_full_scale(self, tmp_path):
        write_wav(AudioSignal(np.array([-1.0, 1.0, 0.0])), tmp_path / "a.wav")
        np.testing.assert_array_equal(load_wav(tmp_path / "a.wav").samples, [-1.0, 32767 / 32768, 0.0])

    def test_stereo_float32_is_averaged(self, tmp_path):
        frames = np.array([[0.5, -0.5], [0.25, 0.75]], dtype="<f4")
        (tmp_path / "s.wav").write_bytes(_wav_bytes(3, 2, 44100, 32, frames.tobytes()))
        np.testing.assert_allclose(load_wav(tmp_path / "s.wav").samples, [0.0, 0.5])

    def test_extensible_pcm(self, tmp_path):
        payload = np.array([16384, -16384], dtype="<i2").tobytes()
        (tmp_path / "e.wav").write_bytes(_wav_bytes(1, 1, 8000, 16, payload, extensible=True))
        np.testing.assert_allclose(load_wav(tmp_path / "e.wav").samples, [0.5, -0.5])

    def test_malformed(self, tmp_path):
        (tmp_path / "x.wav").write_bytes(b"RIFX0000WAVE")
        with pytest.raises(FormatError, match="malformed WAV header"):
            load_wav(tmp_path / "x.wav")

    def test_truncated_chunk(self, tmp_path):
        data = _wav_bytes(1, 1, 8000, 16, bytes(100))
        (tmp_path / "t.wav").write_bytes(data[:-10])
        with pytest.raises(FormatError):
            load_wav(tmp_path / "t.wav")

    def test_unsupported_encoding(self, tmp_path):
        (tmp_path / "u.wav").write_bytes(_wav_bytes(1, 1, 8000, 8, bytes(10)))
        with pytest.raises(FormatError, match="unsupported"):
            load_wav(tmp_path / "u.wav")

    def test_out_of_range_write(self, tmp_path):
        with pytest.raises(SignalError):
            write_wav(AudioSignal(np.array([1.5])), tmp_path / "a.wav")

    def test_rate_mismatch_warns(self, tmp_path, caplog):
        write_wav(AudioSignal(np.zeros(4), 8000), tmp_path / "a.wav")
        load_wav(tmp_path / "a.wav", expected_rate=44100)
        assert "8000" in caplog.text


class TestSdr:
    def test_identities(self, rng):
        s = rng.standard_normal(500)
        assert sdr(s, s) == math.inf
        np.testing.assert_allclose(sdr(s, np.zeros_like(s)), 0.0, atol=1e-12)
        np.testing.assert_allclose(sdr(s, 2 * s), 0.0, atol=1e-12)
        np.testing.assert_allclose(sdr([1.0, 0.0], [1.0, 0.1]), 20.0, atol=1e-9)

    def test_error_scaling(self, rng):
        s, e = rng.standard_normal((2, 1000))
        np.testing.assert_allclose(sdr(s, s + e / 10) - sdr(s, s + e), 20.0, atol=1e-9)

    def test_zero_reference(self):
        with pytest.raises(DomainError):
            sdr(np.zeros(3), np.ones(3))

    def test_length_mismatch(self):
        with pytest.raises(SignalError):
            sdr(np.ones(3), np.ones(4))


class TestExcerpts:
    def test_non_overlapping_cover(self):
        sig = AudioSignal(np.arange(103, dtype=float))
        parts = slice_excerpts(sig, 10, seed=3)
        assert len(parts) == 10
        np.testing.assert_array_equal(np.sort(np.concatenate([p.samples for p in parts])), np.arange(100))

    def test_seeded_order(self):
        sig = AudioSignal(np.arange(100, dtype=float))
        a = [p.samples[0] for p in slice_excerpts(sig, 10, seed=1)]
        assert a == [p.samples[0] for p in slice_excerpts(sig, 10, seed=1)]

    def test_twenty_millisecond_chunks(self):
        parts = slice_excerpts(AudioSignal(np.zeros(44100)), int(44100 * 0.02), multiple=44)
        assert len(parts[0]) == 880 and len(parts) == 50

    def test_shorter_than_one_excerpt(self):
        assert slice_excerpts(AudioSignal(np.zeros(5)), 10) == []

    def test_multiple(self):
        assert len(slice_excerpts(AudioSignal(np.zeros(100)), 23, multiple=4)[0]) == 20


class TestSyntheticCorpus:
    def test_seeded_and_bounded(self):
        a, b = synth_corpus(3, 0.1, seed=4), synth_corpus(3, 0.1, seed=4)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.samples, y.samples)
            assert 0.5 <= np.max(np.abs(x.samples)) <= 0.9
        assert len(a[0]) == 4410

    def test_write_and_load(self, tmp_path):
        corpus = synth_corpus(2, 0.05, seed=0)
        write_corpus(corpus, tmp_path)
        loaded = load_corpus(tmp_path)
        assert [s.name for s in loaded] == ["synth_000", "synth_001"]
        np.testing.assert_allclose(loaded[1].samples, corpus[1].samples, atol=1 / 32768)

    def test_missing_corpus(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_corpus(tmp_path / "nope")
