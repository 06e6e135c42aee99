import numpy as np
import pytest

from vred.checkpoint import Checkpoint, CodecConfig
from vred.errors import ConfigError, FormatError
from vred.model import VredConfig
from vred.optim import AdamState
from conftest import SMALL_CODEC, SMALL_VRED, random_checkpoint


class TestCheckpointFormat:
    def test_save_load_save_identical(self, tmp_path, ckpt):
        ckpt.adam = AdamState({"a": np.ones(3)}, {"a": np.full(3, 2.0)}, t=7)
        ckpt.stage, ckpt.log_digest = 2, "abc"
        ckpt.save(tmp_path / "m.ckpt")
        loaded = Checkpoint.load(tmp_path / "m.ckpt")
        assert loaded.to_bytes() == ckpt.to_bytes()
        assert loaded.model_digest() == ckpt.model_digest()
        assert loaded.adam.t == 7 and loaded.stage == 2 and loaded.norm == ckpt.norm

    def test_digest_tracks_parameters(self, ckpt):
        before = ckpt.model_digest()
        ckpt.vred.phi_x.weight.data[0, 0] += 1e-12
        assert ckpt.model_digest() != before

    def test_digest_ignores_optimizer_state(self, ckpt):
        before = ckpt.model_digest()
        ckpt.adam = AdamState(t=3)
        assert ckpt.model_digest() == before

    def test_corruption_detected(self, ckpt):
        data = bytearray(ckpt.to_bytes())
        data[len(data) // 2] ^= 1
        with pytest.raises(FormatError, match="corrupt"):
            Checkpoint.from_bytes(bytes(data))

    def test_bad_magic_and_truncation(self, ckpt):
        with pytest.raises(FormatError):
            Checkpoint.from_bytes(b"XXXX" + ckpt.to_bytes()[4:])
        with pytest.raises(FormatError):
            Checkpoint.from_bytes(b"VCKP")

    def test_seeded_init(self):
        assert Checkpoint.new(SMALL_CODEC, SMALL_VRED, 3).to_bytes() == Checkpoint.new(SMALL_CODEC, SMALL_VRED, 3).to_bytes()
        assert Checkpoint.new(SMALL_CODEC, SMALL_VRED, 3).to_bytes() != Checkpoint.new(SMALL_CODEC, SMALL_VRED, 4).to_bytes()

    def test_channel_mismatch(self):
        with pytest.raises(ConfigError):
            Checkpoint.new(CodecConfig(channels=8, kernel=8, stride=4), SMALL_VRED)

    def test_codec_config_validation(self):
        with pytest.raises(ConfigError):
            CodecConfig(kernel=4, stride=8)
        with pytest.raises(ConfigError):
            CodecConfig(reconstruction="median")

    def test_bias_parameters_roundtrip(self, tmp_path):
        ckpt = random_checkpoint(2, CodecConfig(channels=4, kernel=8, stride=4, bias=True))
        ckpt.codec.enc_bias.data[:] = [1, 2, 3, 4]
        loaded = Checkpoint.from_bytes(ckpt.to_bytes())
        np.testing.assert_array_equal(loaded.codec.enc_bias.data, [1, 2, 3, 4])
