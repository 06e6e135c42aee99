"""VRED: a neural audio codec with a variational recurrent encoder-decoder and Bernoulli codes.

Audio goes through a learned strided convolution, is normalized to (0, 1),
grouped into windows, and each window is coded as ``latent_dim`` bits by a
recurrent VAE whose state depends only on what the decoder can see.
"""

from .audio import AudioSignal, load_wav, sdr, synth_corpus, write_wav
from .checkpoint import Checkpoint, CodecConfig
from .codec import EncodedStream, compression_ratio, decode_audio, encode_audio, read_stream, write_stream
from .errors import InternalError, VredError
from .model import VredConfig
from .trainer import TrainLog, TrainPlan, finetune, pretrain_feature_codec, run_pipeline, train_vred

__all__ = [
    "AudioSignal", "Checkpoint", "CodecConfig", "EncodedStream", "InternalError", "TrainLog", "TrainPlan",
    "VredConfig", "VredError", "compression_ratio", "decode_audio", "encode_audio", "finetune", "load_wav",
    "pretrain_feature_codec", "read_stream", "run_pipeline", "sdr", "synth_corpus", "train_vred", "write_stream",
    "write_wav",
]
