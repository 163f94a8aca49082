"""Denoising pre-training: noisy windows in, clean windows out, MSE + Adam.

Seeds for shuffling and per-batch noise are derived from the base seed with
numpy SeedSequence counters, so runs are byte-reproducible while every batch
and epoch sees fresh noise.
"""
from __future__ import annotations

import csv
import hashlib
import time
from dataclasses import dataclass, field

import numpy as np

from .model import ModelConfig, ModelParams, forward, init_params, save_params, scaled_laplacian
from .skeleton import (PoseSequence, SkeletonGraph, WindowBatch, add_gaussian_noise,
                       concat_batches, partition_windows, shuffle_windows)
from .tensor import Tensor

GRAD_CLIP_NORM = 10.0


class TrainError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    learning_rate: float = 1e-4
    batch_size: int = 32
    sigma: float = 0.1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 0  # 0 = only final

    def __post_init__(self):
        if self.epochs < 1:
            raise TrainError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise TrainError("learning_rate must be positive")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise TrainError("adam betas must lie in [0, 1)")
        if self.sigma < 0:
            raise TrainError("sigma must be non-negative")
        if self.batch_size < 1:
            raise TrainError("batch_size must be >= 1")


@dataclass
class EpochStats:
    epoch: int
    train_mse: float
    val_mse: float
    seconds: float


@dataclass
class TrainReport:
    epochs: list[EpochStats] = field(default_factory=list)
    checkpoint_path: str | None = None
    skipped_clips: list[str] = field(default_factory=list)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_mse", "val_mse", "seconds"])
            for e in self.epochs:
                writer.writerow([e.epoch, repr(e.train_mse), repr(e.val_mse),
                                 f"{e.seconds:.3f}"])


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape:
        raise ValueError(f"mse_loss: shape mismatch {pred.shape} vs {target.shape}")
    diff = pred - target
    return (diff * diff).mean()


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @staticmethod
    def for_params(params: ModelParams) -> "AdamState":
        return AdamState(
            m={k: np.zeros_like(p.data) for k, p in params.tensors.items()},
            v={k: np.zeros_like(p.data) for k, p in params.tensors.items()})


def adam_step(params: ModelParams, grads: dict[str, np.ndarray],
              state: AdamState, config: TrainConfig) -> None:
    """One bias-corrected Adam update, in place on params and state."""
    state.t += 1
    b1, b2, eps = config.adam_beta1, config.adam_beta2, config.adam_epsilon
    lr = config.learning_rate
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, p in params.tensors.items():
        g = grads[name]
        if not np.isfinite(g).all():
            raise TrainError(f"non-finite gradient in parameter {name}")
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data = p.data - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> None:
    total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale


def holdout_split(clips: list[PoseSequence]) -> tuple[list[PoseSequence], list[PoseSequence]]:
    """Deterministic ~20% validation holdout by clip_id hash."""
    train, val = [], []
    for clip in clips:
        digest = hashlib.sha256(clip.clip_id.encode()).digest()
        (val if digest[0] % 5 == 0 else train).append(clip)
    if not train:  # tiny corpora: keep at least one training clip
        train, val = val[:1], val[1:]
    return train, val


def _derive_seed(base: int, *counters: int) -> int:
    return int(np.random.SeedSequence([base, *counters]).generate_state(1)[0])


def _batch_mse(params: ModelParams, batch: WindowBatch, graph: SkeletonGraph,
               scaled_lap: np.ndarray, sigma: float, seed: int) -> float:
    noisy = add_gaussian_noise(batch, sigma, seed)
    _, recon = forward(params, noisy, graph, scaled_lap=scaled_lap)
    return mse_loss(recon, Tensor(batch.windows)).item()


def evaluate_mse(params: ModelParams, clips: list[PoseSequence],
                 graph: SkeletonGraph, sigma: float, seed: int,
                 batch_size: int = 64,
                 scaled_lap: np.ndarray | None = None) -> float:
    """Mean denoising MSE over all windows of the given clips."""
    if scaled_lap is None:
        scaled_lap = scaled_laplacian(graph)
    w = params.config.window_size
    windows = concat_batches([partition_windows(c, w) for c in clips])
    total, count = 0.0, 0
    for start in range(0, windows.batch_size, batch_size):
        sub = WindowBatch(windows.windows[start:start + batch_size],
                          windows.origins[start:start + batch_size], w)
        total += _batch_mse(params, sub, graph, scaled_lap, sigma,
                            _derive_seed(seed, 0xEA1, start)) * sub.batch_size
        count += sub.batch_size
    return total / count


def train(data: list[PoseSequence], model_config: ModelConfig,
          train_config: TrainConfig, checkpoint_path=None,
          graph: SkeletonGraph | None = None,
          log=None) -> tuple[ModelParams, TrainReport]:
    """Full denoising pre-training loop; deterministic per (data, seeds)."""
    if not data:
        raise TrainError("no training clips")
    if graph is None:
        from .skeleton import build_mpii_skeleton
        graph = build_mpii_skeleton()

    report = TrainReport()
    w = model_config.window_size
    usable = []
    for clip in data:
        if clip.num_frames < w:
            report.skipped_clips.append(clip.clip_id)
        else:
            usable.append(clip)
    if not usable:
        raise TrainError("every clip is shorter than the window size")

    train_clips, val_clips = holdout_split(usable)
    scaled_lap = scaled_laplacian(graph)
    params = init_params(model_config)
    state = AdamState.for_params(params)
    base = train_config.seed
    all_windows = concat_batches([partition_windows(c, w) for c in train_clips])

    for epoch in range(train_config.epochs):
        t0 = time.perf_counter()
        shuffled = shuffle_windows(all_windows, _derive_seed(base, 1, epoch))
        total, count = 0.0, 0
        for bi, start in enumerate(range(0, shuffled.batch_size,
                                         train_config.batch_size)):
            clean = WindowBatch(shuffled.windows[start:start + train_config.batch_size],
                                shuffled.origins[start:start + train_config.batch_size], w)
            noisy = add_gaussian_noise(clean, train_config.sigma,
                                       _derive_seed(base, 2, epoch, bi))
            _, recon = forward(params, noisy, graph, scaled_lap=scaled_lap)
            loss = mse_loss(recon, Tensor(clean.windows))
            lv = loss.item()
            if not np.isfinite(lv):
                raise TrainError(f"non-finite loss at epoch {epoch}, batch {bi} "
                                 f"(first origin {clean.origins[0]})")
            params.zero_grads()
            loss.backward()
            grads = {k: p.grad for k, p in params.tensors.items()}
            clip_gradients(grads, GRAD_CLIP_NORM)
            adam_step(params, grads, state, train_config)
            total += lv * clean.batch_size
            count += clean.batch_size
        val = evaluate_mse(params, val_clips or train_clips, graph,
                           train_config.sigma, _derive_seed(base, 3),
                           scaled_lap=scaled_lap)
        stats = EpochStats(epoch=epoch, train_mse=total / count, val_mse=val,
                           seconds=time.perf_counter() - t0)
        report.epochs.append(stats)
        if log is not None:
            log(f"epoch {epoch:3d}  train_mse {stats.train_mse:.6f}  "
                f"val_mse {stats.val_mse:.6f}  ({stats.seconds:.2f}s)")
        if (checkpoint_path is not None and train_config.checkpoint_every
                and (epoch + 1) % train_config.checkpoint_every == 0):
            save_params(params, checkpoint_path)

    if checkpoint_path is not None:
        save_params(params, checkpoint_path)
        report.checkpoint_path = str(checkpoint_path)
    return params, report
