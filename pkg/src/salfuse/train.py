"""Toy trainer: Adam on the position-aware loss over synthetic or on-disk triples.

Determinism contract: a fixed run seed fixes the parameter init, the sample
order, and every augmentation draw, so two single-threaded runs produce
identical loss trajectories and identical weight files.  A non-finite loss
or parameter aborts the run, leaving the last finished epoch's weights as
the checkpoint.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import metrics
from . import nn
from .config import RunConfig
from .errors import NumericsError, ValidationError
from .loss import total_loss
from .mapio import resize_bilinear
from .model import FusionModel, build_model
from .synth import Sample


class Adam(object):
    """Standard Adam with bias correction; one slot pair per parameter."""

    def __init__(self, params: list[nn.Parameter], betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros(p.shape) for p in params]
        self.v = [np.zeros(p.shape) for p in params]

    def step(self, lr: float) -> None:
        self.t += 1
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad_value().astype(np.float64)
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            m_hat = m / (1.0 - self.b1 ** self.t)
            v_hat = v / (1.0 - self.b2 ** self.t)
            p.data = p.data - (lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype)


def lr_at_epoch(base_lr: float, decay_factor: float, decay_every: int, epoch: int) -> float:
    """Step schedule: divide by the factor once per full decay period."""
    return base_lr / decay_factor ** (epoch // decay_every)


def augment_sample(rgb: np.ndarray, depth: np.ndarray, gt: np.ndarray,
                   rng: np.random.Generator, hflip: bool, rotate: bool,
                   border_clip: bool) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Apply the enabled augmentations identically to all three planes."""
    if hflip and rng.random() < 0.5:
        rgb, depth, gt = rgb[..., ::-1], depth[..., ::-1], gt[..., ::-1]
    if rotate:
        k = int(rng.integers(0, 4))
        if k:
            rgb = np.rot90(rgb, k, axes=(-2, -1))
            depth = np.rot90(depth, k, axes=(-2, -1))
            gt = np.rot90(gt, k, axes=(-2, -1))
    if border_clip:
        h, w = gt.shape[-2:]
        # random crop of up to 10% per side, resized back
        top = int(rng.uniform(0.0, 0.1) * h)
        bottom = h - int(rng.uniform(0.0, 0.1) * h)
        left = int(rng.uniform(0.0, 0.1) * w)
        right = w - int(rng.uniform(0.0, 0.1) * w)
        rgb = resize_bilinear(rgb[..., top:bottom, left:right], h, w)
        depth = resize_bilinear(depth[..., top:bottom, left:right], h, w)
        gt = (resize_bilinear(gt[..., top:bottom, left:right], h, w) >= 0.5).astype(np.float64)
    return np.ascontiguousarray(rgb), np.ascontiguousarray(depth), np.ascontiguousarray(gt)


@dataclass
class EpochStats:
    epoch: int
    lr: float
    mean_loss: float


@dataclass
class TrainResult:
    stats: list[EpochStats]
    weights_path: Path
    log_path: Path
    train_mae: float


def _state_finite(model: FusionModel) -> bool:
    return all(np.all(np.isfinite(p.data)) for p in model.parameters())


def predict_map(model: FusionModel, sample: Sample) -> np.ndarray:
    """Single-image forward pass -> shared saliency probability map (H, W)."""
    out = model(ad.tensor(sample.rgb[None]), ad.tensor(sample.depth[None]))
    return np.asarray(ad.sigmoid(out.s_shared).data[0, 0], dtype=np.float64)


def train_mae(model: FusionModel, samples: list[Sample]) -> float:
    """Mean absolute error of the shared map over the training set, one image
    per forward pass so batch statistics never depend on grouping."""
    return float(np.mean([metrics.mae(predict_map(model, s), s.gt[0]) for s in samples]))


def train_toy(run: RunConfig, samples: list[Sample], out_dir) -> TrainResult:
    """Fit the model to the given triples; returns trajectory and artifacts."""
    run.validate()
    if not samples:
        raise ValidationError("training requires at least one sample")
    size = run.model.input_size
    for s in samples:
        if s.rgb.shape != (3, size, size) or s.depth.shape != (1, size, size) or s.gt.shape != (1, size, size):
            raise ValidationError(f"sample {s.name}: shapes do not match input size {size}")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    weights_path = out_dir / "weights.salf"
    log_path = out_dir / "loss.csv"

    model = build_model(run.model)
    optim = Adam(model.parameters(), betas=tuple(run.optimizer.betas), eps=run.optimizer.eps)
    rng = np.random.default_rng(np.random.SeedSequence([int(run.seed), 0x7121]))
    aug = run.augment

    stats: list[EpochStats] = []
    last_good = model.state_dict()
    for epoch in range(run.epochs):
        lr = lr_at_epoch(run.optimizer.lr, run.optimizer.lr_decay_factor,
                         run.optimizer.lr_decay_every_epochs, epoch)
        order = rng.permutation(len(samples))
        loss_sum = 0.0
        for start in range(0, len(order), run.batch_size):
            batch = [samples[i] for i in order[start:start + run.batch_size]]
            planes = [augment_sample(s.rgb, s.depth, s.gt, rng, aug.hflip, aug.rotate, aug.border_clip)
                      for s in batch]
            rgb = ad.tensor(np.stack([p[0] for p in planes]))
            depth = ad.tensor(np.stack([p[1] for p in planes]))
            gt = np.stack([p[2] for p in planes])
            model.zero_grad()
            loss = total_loss(model(rgb, depth), gt, run.loss)
            value = float(loss.data.reshape(()))
            if not np.isfinite(value):
                nn.save_params(weights_path, last_good)
                _write_log(log_path, stats)
                raise NumericsError(f"non-finite loss at epoch {epoch}; last-good weights kept")
            loss.backward()
            optim.step(lr)
            if not _state_finite(model):
                nn.save_params(weights_path, last_good)
                _write_log(log_path, stats)
                raise NumericsError(f"non-finite parameters at epoch {epoch}; last-good weights kept")
            loss_sum += value * len(batch)
        stats.append(EpochStats(epoch=epoch, lr=lr, mean_loss=loss_sum / len(samples)))
        last_good = model.state_dict()

    nn.save_params(weights_path, last_good)
    _write_log(log_path, stats)
    return TrainResult(stats=stats, weights_path=weights_path, log_path=log_path,
                       train_mae=train_mae(model, samples))


def _write_log(path: Path, stats: list[EpochStats]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "lr", "mean_loss"])
        for row in stats:
            writer.writerow([row.epoch, repr(row.lr), repr(row.mean_loss)])
