"""Three-stage training: feature-codec pretraining, frozen-codec VRED training,
and joint fine-tuning of everything on the sequential ELBO."""

from __future__ import annotations

import csv
import hashlib
import io
import logging
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .audio import AudioSignal, slice_excerpts
from .checkpoint import Checkpoint, CodecConfig
from .codec import fit_normalization, frames_to_windows, normalize
from .errors import FreezeViolation, SignalError, VredError
from .layers import conv_decode, conv_encode
from .model import VredConfig, elbo_loss
from .optim import AdamState, PlateauSchedule, adam_step

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "stage", "loss", "kl", "log_lik", "lr", "wall_time")
STAGE_EPOCHS = {1: 500, 2: 3000, 3: 500}


@dataclass
class TrainPlan:
    stage: int
    epochs: int | None = None
    lr: float = 1e-3
    lr_factor: float = 0.5
    lr_patience: int = 20
    lr_min: float = 1e-5
    seed: int = 0
    batch_size: int = 16
    excerpt_windows: int = 8
    max_steps: int | None = None  # stop early after this many optimizer steps
    clip_norm: float | None = None
    record_wall_time: bool = False

    def __post_init__(self):
        if self.stage not in STAGE_EPOCHS:
            raise VredError(f"stage must be 1, 2 or 3, got {self.stage}")
        if self.epochs is None:
            self.epochs = STAGE_EPOCHS[self.stage]
        if self.epochs <= 0 or not self.lr > 0 or self.batch_size < 1 or self.excerpt_windows < 1:
            raise VredError("epochs, lr, batch_size and excerpt_windows must be positive")


@dataclass
class TrainLog:
    """Per-epoch rows for the CSV log, plus raw per-step losses."""

    rows: list[tuple] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    step_kl: list[float] = field(default_factory=list)

    def add(self, epoch, stage, loss, kl, log_lik, lr, wall_time):
        self.rows.append((epoch, stage, loss, kl, log_lik, lr, wall_time))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for epoch, stage, loss, kl, ll, lr, wall in self.rows:
            w.writerow([epoch, stage, repr(loss), "" if kl is None else repr(kl),
                        "" if ll is None else repr(ll), repr(lr), "" if wall is None else f"{wall:.3f}"])
        return buf.getvalue()

    def digest(self) -> str:
        return hashlib.sha256(self.to_csv().encode()).hexdigest()


def _excerpts(corpus: Sequence[AudioSignal], n_samples: int, seed: int) -> np.ndarray:
    seeds = np.random.SeedSequence(seed).generate_state(max(len(corpus), 1))
    pieces = []
    for sig, s in zip(corpus, seeds):
        pieces.extend(e.samples for e in slice_excerpts(sig, n_samples, int(s)))
    if not pieces:
        raise SignalError(f"corpus has no excerpt of {n_samples} samples")
    return np.stack(pieces)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


def _grads_by_name(params, grads):
    return {name: grads[t] for name, t in params if t in grads}


def _snapshot(params) -> bytes:
    return b"".join(np.ascontiguousarray(t.data).tobytes() for _, t in params)


def _run_epochs(plan: TrainPlan, n_items: int, params, loss_fn, train_log: TrainLog, adam: AdamState):
    """Shared epoch/batch/Adam/schedule loop.

    ``loss_fn(idx, rng)`` returns ``(objective, loss, kl, log_lik)``: gradients
    come from ``objective``, logs and the schedule see the scalar ``loss``.
    """
    rng = np.random.default_rng(plan.seed)
    schedule = PlateauSchedule(plan.lr, plan.lr_factor, plan.lr_patience, plan.lr_min)
    steps = 0
    for epoch in range(1, plan.epochs + 1):
        start = time.perf_counter()
        lr = schedule.lr
        totals = np.zeros(3)
        count = 0
        for idx in _batches(n_items, plan.batch_size, rng):
            objective, value, kl, ll = loss_fn(idx, rng)
            grads = ad.backward(objective)
            adam_step(params, _grads_by_name(params, grads), adam, lr, plan.clip_norm)
            train_log.step_losses.append(value)
            if kl is not None:
                train_log.step_kl.append(kl)
            totals += (value, kl or 0.0, ll or 0.0)
            count += 1
            steps += 1
            if plan.max_steps is not None and steps >= plan.max_steps:
                break
        mean = totals / count
        schedule.step(mean[0])
        wall = time.perf_counter() - start if plan.record_wall_time else None
        has_kl = plan.stage != 1
        train_log.add(epoch, plan.stage, float(mean[0]), float(mean[1]) if has_kl else None,
                      float(mean[2]) if has_kl else None, lr, wall)
        log.info("stage %d epoch %d loss %.6g lr %.3g", plan.stage, epoch, mean[0], lr)
        if plan.max_steps is not None and steps >= plan.max_steps:
            break


def _finish(ckpt: Checkpoint, stage: int, adam: AdamState, train_log: TrainLog) -> Checkpoint:
    ckpt.stage = stage
    ckpt.adam = adam
    ckpt.log_digest = train_log.digest()
    return ckpt


# ---------------------------------------------------------------------------
# Stage 1
# ---------------------------------------------------------------------------


def pretrain_feature_codec(
    corpus: Sequence[AudioSignal],
    plan: TrainPlan,
    codec_cfg: CodecConfig,
    vred_cfg: VredConfig,
    train_log: TrainLog | None = None,
    ckpt: Checkpoint | None = None,
) -> Checkpoint:
    """Fit the conv/deconv pair on waveform MSE, then fit normalization on its features."""
    if plan.stage != 1:
        raise VredError("pretrain_feature_codec needs a stage-1 plan")
    if not corpus:
        raise SignalError("empty corpus")
    train_log = train_log if train_log is not None else TrainLog()
    ckpt = ckpt or Checkpoint.new(codec_cfg, vred_cfg, plan.seed)
    block = ckpt.codec.stride * ckpt.vred_cfg.window_frames
    excerpts = _excerpts(corpus, plan.excerpt_windows * block, plan.seed)
    audio = excerpts[:, None, :]
    params = ckpt.codec_parameters()

    def loss_fn(idx, rng):
        x = ad.constant(audio[idx])
        recon = conv_decode(ckpt.codec, conv_encode(ckpt.codec, x))
        loss = _mse(recon, x)
        return loss, loss.item(), None, None

    adam = AdamState()
    _run_epochs(plan, len(excerpts), params, loss_fn, train_log, adam)
    with ad.no_grad():
        feats = conv_encode(ckpt.codec, ad.constant(audio)).data
    ckpt.norm = fit_normalization(feats)
    return _finish(ckpt, 1, adam, train_log)


# ---------------------------------------------------------------------------
# Stages 2 and 3
# ---------------------------------------------------------------------------


def _sequence_excerpts(ckpt: Checkpoint, corpus, plan: TrainPlan) -> np.ndarray:
    if ckpt.norm is None:
        raise VredError("checkpoint has no normalization statistics; run stage 1 first")
    block = ckpt.codec.stride * ckpt.vred_cfg.window_frames
    return _excerpts(corpus, plan.excerpt_windows * block, plan.seed)


def train_vred(ckpt: Checkpoint, corpus: Sequence[AudioSignal], plan: TrainPlan,
               train_log: TrainLog | None = None) -> Checkpoint:
    """Minimize the negative ELBO over feature windows with the conv codec frozen."""
    if plan.stage != 2:
        raise VredError("train_vred needs a stage-2 plan")
    train_log = train_log if train_log is not None else TrainLog()
    excerpts = _sequence_excerpts(ckpt, corpus, plan)
    with ad.no_grad():
        feats = conv_encode(ckpt.codec, ad.constant(excerpts[:, None, :])).data
    windows = frames_to_windows(normalize(feats, ckpt.norm), ckpt.vred_cfg.window_frames)  # [T, X, N]
    frozen = ckpt.codec_parameters()
    before = _snapshot(frozen)
    params = ckpt.vred_parameters()

    def loss_fn(idx, rng):
        loss, diag = elbo_loss(ckpt.vred, ckpt.vred_cfg, windows[:, :, idx], rng)
        return loss, loss.item(), diag.total_kl, diag.total_log_lik

    adam = AdamState()
    _run_epochs(plan, excerpts.shape[0], params, loss_fn, train_log, adam)
    if _snapshot(frozen) != before:
        raise FreezeViolation("feature codec parameters changed during stage 2")
    return _finish(ckpt, 2, adam, train_log)


def _mse(a, b):
    err = ad.sub(a, b)
    return ad.affine(ad.total(ad.square(err)), 1.0 / err.size)


def finetune_loss(ckpt: Checkpoint, audio: np.ndarray, rng=None, corrections=None):
    """Negative ELBO of a ``[B, 1, L]`` audio batch through the trainable conv encoder."""
    feats = conv_encode(ckpt.codec, ad.constant(audio))
    windows = frames_to_windows(normalize(feats, ckpt.norm), ckpt.vred_cfg.window_frames)
    steps = [ad.take(windows, t) for t in range(windows.shape[0])]
    return elbo_loss(ckpt.vred, ckpt.vred_cfg, steps, rng, corrections)


def deconv_tracking_loss(ckpt: Checkpoint, audio: np.ndarray):
    """Waveform MSE of the deconv applied to *detached* encoder features.

    The ELBO never reaches the deconv kernels; this term moves only them, so
    the synthesis layer keeps inverting the encoder while it is fine-tuned.
    """
    with ad.no_grad():
        feats = conv_encode(ckpt.codec, ad.constant(audio))
    return _mse(conv_decode(ckpt.codec, feats), ad.constant(audio))


def finetune(ckpt: Checkpoint, corpus: Sequence[AudioSignal], plan: TrainPlan,
             train_log: TrainLog | None = None) -> Checkpoint:
    """Joint training of codec and VRED parameters on the sequential ELBO.

    Normalization statistics stay fixed so the meaning of the features the
    bitstream describes does not drift.
    """
    if plan.stage != 3:
        raise VredError("finetune needs a stage-3 plan")
    train_log = train_log if train_log is not None else TrainLog()
    excerpts = _sequence_excerpts(ckpt, corpus, plan)
    audio = excerpts[:, None, :]
    params = ckpt.parameters()

    def loss_fn(idx, rng):
        loss, diag = finetune_loss(ckpt, audio[idx], rng)
        objective = ad.add(loss, deconv_tracking_loss(ckpt, audio[idx]))
        return objective, loss.item(), diag.total_kl, diag.total_log_lik

    adam = AdamState()
    _run_epochs(plan, excerpts.shape[0], params, loss_fn, train_log, adam)
    return _finish(ckpt, 3, adam, train_log)


def run_pipeline(corpus, codec_cfg: CodecConfig, vred_cfg: VredConfig, plans: Sequence[TrainPlan],
                 train_log: TrainLog | None = None) -> Checkpoint:
    """Stages 1-3 in order with a shared log."""
    train_log = train_log if train_log is not None else TrainLog()
    p1, p2, p3 = plans
    ckpt = pretrain_feature_codec(corpus, p1, codec_cfg, vred_cfg, train_log)
    ckpt = train_vred(ckpt, corpus, p2, train_log)
    return finetune(ckpt, corpus, p3, train_log)
