from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vred import autodiff as ad
from vred.audio import AudioSignal
from vred.checkpoint import CodecConfig
from vred.codec import (HEADER, EncodedStream, NormStats, StreamHeader, code_bytes, compression_ratio, decode_audio,
                        denormalize, encode_audio, fit_normalization, frames_to_windows, normalize, pack_bits,
                        read_stream, unpack_bits, windows_to_frames, write_stream)
from vred.errors import DegenerateCorpusError, DigestMismatchError, FormatError, SignalError
from vred.model import VredConfig
from conftest import random_checkpoint


class TestNormalization:
    def test_margin(self):
        stats = fit_normalization(np.array([-2.0, 0.3, 2.0]))
        np.testing.assert_allclose([stats.feature_min, stats.feature_max], [-2.2, 2.2], rtol=1e-15)

    def test_degenerate(self):
        with pytest.raises(DegenerateCorpusError):
            fit_normalization(np.full(10, 0.7))
        with pytest.raises(DegenerateCorpusError):
            fit_normalization([])

    def test_endpoints(self):
        stats = NormStats(-1.0, 3.0)
        np.testing.assert_allclose(normalize(np.array([-1.0, 1.0, 3.0, 9.0]), stats), [1e-6, 0.5, 1 - 1e-6, 1 - 1e-6])

    def test_roundtrip(self, rng):
        stats = NormStats(-2.5, 4.0)
        f = rng.uniform(-2.4, 3.9, 1000)
        np.testing.assert_allclose(denormalize(normalize(f, stats), stats), f, atol=1e-12)

    def test_tensor_path_matches_array_path(self, rng):
        stats = NormStats(-1.0, 1.0)
        f = rng.uniform(-1.2, 1.2, 50)
        np.testing.assert_array_equal(normalize(ad.constant(f), stats).data, normalize(f, stats))


class TestWindows:
    def test_roundtrip(self, rng):
        f = rng.standard_normal((3, 20))
        w = frames_to_windows(f, 4)
        assert w.shape == (5, 12)
        np.testing.assert_array_equal(windows_to_frames(w, 3), f)

    def test_batched_layout(self, rng):
        f = rng.standard_normal((2, 3, 8))
        batched = frames_to_windows(f, 4)
        assert batched.shape == (2, 12, 2)
        for b in range(2):
            np.testing.assert_array_equal(batched[:, :, b], frames_to_windows(f[b], 4))

    def test_tensor_layout_matches(self, rng):
        f = rng.standard_normal((2, 3, 8))
        np.testing.assert_array_equal(frames_to_windows(ad.constant(f), 4).data, frames_to_windows(f, 4))

    def test_ragged(self):
        with pytest.raises(SignalError):
            frames_to_windows(np.zeros((2, 7)), 4)


class TestBitPacking:
    def test_lsb_first(self):
        bits = np.zeros(10, dtype=np.uint8)
        bits[[0, 9]] = 1
        assert pack_bits([bits]) == bytes([0b00000001, 0b00000010])

    def test_byte_value(self):
        assert pack_bits([np.array([1, 0, 1, 0, 0, 0, 0, 0], dtype=np.uint8)]) == b"\x05"
        assert pack_bits([np.zeros(16, dtype=np.uint8)]) == bytes(2)

    def test_random_roundtrip(self, rng):
        for _ in range(10_000):
            d = int(rng.integers(1, 40))
            codes = [rng.integers(0, 2, d, dtype=np.uint8) for _ in range(int(rng.integers(1, 3)))]
            back = unpack_bits(pack_bits(codes), d, len(codes))
            assert all(np.array_equal(a, b) for a, b in zip(codes, back))

    def test_payload_length_checked(self):
        with pytest.raises(FormatError):
            unpack_bits(b"\x00" * 3, 16, 2)

    def test_code_bytes(self):
        assert [code_bytes(d) for d in (1, 8, 9, 128)] == [1, 1, 2, 16]


def _header(**kw):
    fields = dict(model_digest=bytes(32), sample_rate=44100, stride=44, kernel=88, channels=32, window_frames=32,
                  latent_dim=128, num_steps=1, original_length=1408)
    fields.update(kw)
    return StreamHeader(**fields)


class TestStreamFormat:
    def test_header_size_and_roundtrip(self):
        h = _header()
        data = h.to_bytes()
        assert len(data) == HEADER.size == 68
        assert StreamHeader.from_bytes(data) == h

    def test_corrupted_magic(self):
        data = bytearray(EncodedStream(_header(), bytes(16)).to_bytes())
        data[0:4] = b"XRED"
        with pytest.raises(FormatError, match="magic"):
            EncodedStream.from_bytes(bytes(data))

    def test_corrupted_version(self):
        data = bytearray(EncodedStream(_header(), bytes(16)).to_bytes())
        data[4] = 99
        with pytest.raises(FormatError, match="version"):
            EncodedStream.from_bytes(bytes(data))

    def test_truncated(self):
        with pytest.raises(FormatError):
            EncodedStream.from_bytes(EncodedStream(_header(), bytes(16)).to_bytes()[:-1])
        with pytest.raises(FormatError):
            StreamHeader.from_bytes(b"VRED")

    def test_file_roundtrip(self, tmp_path):
        s = EncodedStream(_header(num_steps=2), bytes(range(32)))
        write_stream(s, tmp_path / "a.vred")
        assert read_stream(tmp_path / "a.vred") == s


class TestCompressionRatio:
    def test_default_config(self):
        dim, bits = compression_ratio(32, 44, 128, 32)
        assert dim == Fraction(1, 11)
        assert bits == Fraction(1, 176)


class TestEndToEnd:
    def test_payload_sizes(self, ckpt):
        block = ckpt.codec.stride * ckpt.vred_cfg.window_frames
        one = encode_audio(ckpt, np.zeros(block))
        two = encode_audio(ckpt, np.zeros(2 * block))
        assert one.header.num_steps == 1 and len(one.payload) == code_bytes(ckpt.vred_cfg.latent_dim)
        assert two.header.num_steps == 2 and len(two.payload) == 2 * code_bytes(ckpt.vred_cfg.latent_dim)

    def test_default_geometry_payload(self):
        ckpt = random_checkpoint(0, CodecConfig(), VredConfig())
        stream = encode_audio(ckpt, np.zeros(1408))
        assert stream.header.num_steps == 1 and len(stream.payload) == 16
        assert len(encode_audio(ckpt, np.zeros(2816)).payload) == 32

    def test_silence_is_deterministic(self, ckpt):
        a = encode_audio(ckpt, np.zeros(100)).to_bytes()
        assert a == encode_audio(ckpt, np.zeros(100)).to_bytes()

    def test_too_short(self, ckpt):
        with pytest.raises(SignalError):
            encode_audio(ckpt, np.zeros(ckpt.codec.stride * ckpt.vred_cfg.window_frames - 1))

    def test_non_mono(self, ckpt):
        with pytest.raises(SignalError):
            encode_audio(ckpt, np.zeros((2, 64)))

    @settings(max_examples=20, deadline=None)
    @given(n=st.integers(16, 200))
    def test_output_length_and_range(self, n):
        ckpt = random_checkpoint(1)
        x = np.random.default_rng(n).uniform(-1, 1, n)
        stream = encode_audio(ckpt, AudioSignal(x))
        y = decode_audio(ckpt, stream)
        assert y.shape == (n,) and np.all(np.abs(y) <= 1)

    def test_digest_mismatch(self, ckpt):
        stream = encode_audio(ckpt, np.zeros(64))
        other = random_checkpoint(5)
        with pytest.raises(DigestMismatchError):
            decode_audio(other, stream)
        assert decode_audio(other, stream, force_digest=True).shape == (64,)

    def test_geometry_mismatch_even_when_forced(self, ckpt):
        stream = encode_audio(ckpt, np.zeros(64))
        other = random_checkpoint(0, CodecConfig(channels=4, kernel=12, stride=4))
        with pytest.raises(FormatError):
            decode_audio(other, stream, force_digest=True)
