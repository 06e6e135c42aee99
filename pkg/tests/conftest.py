import numpy as np
import pytest

from vred.checkpoint import Checkpoint, CodecConfig
from vred.codec import fit_normalization
from vred.layers import conv_encode
from vred.model import VredConfig
from vred import autodiff as ad

SMALL_CODEC = CodecConfig(channels=4, kernel=8, stride=4)
SMALL_VRED = VredConfig(latent_dim=8, hidden=8, feature_channels=4, window_frames=4, sequence_len=3,
                        feature_dim=8, mlp_hidden=8)


def random_checkpoint(seed: int = 0, codec_cfg=SMALL_CODEC, vred_cfg=SMALL_VRED) -> Checkpoint:
    """Untrained model with normalization fitted on random audio."""
    ckpt = Checkpoint.new(codec_cfg, vred_cfg, seed)
    audio = np.random.default_rng(seed + 1000).uniform(-0.9, 0.9, size=(1, 1, 64 * codec_cfg.stride))
    with ad.no_grad():
        ckpt.norm = fit_normalization(conv_encode(ckpt.codec, ad.constant(audio)).data)
    return ckpt


@pytest.fixture
def ckpt():
    return random_checkpoint(0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    """Print one PASS/FAIL line per acceptance criterion that ran."""
    import sys

    module = sys.modules.get("test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in module.summary_lines():
        terminalreporter.write_line(line)
