"""Two-stage training: MSE for backbone + point head, then NLL for the interval head.

Stage 1 fits the backbone and point head with mean squared error. Stage 2
freezes both (their batchnorm layers run on running statistics, so not a
single stored value changes) and fits only the interval head on the summed
truncated-normal NLL with sigma floored at ``SIGMA_FLOOR``. The joint
ablation trains everything at once on the NLL.

Learning rate: ``initial_lr * lr_gamma ** (epoch // lr_step_epochs)``.
Logged ``train_loss`` values are per-sample means so batch sizes compare.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np

from . import imaging
from . import tensor as T
from .data import PixelStats, standardize
from .metrics import interval_score
from .model import SIWNet
from .probdist import SIGMA_FLOOR, TruncatedNormal, batch_loss_tensor, interval


class NumericError(RuntimeError):
    pass


def _from_dict(cls, d: dict):
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**d)


@dataclass
class StageConfig:
    epochs: int = 60
    initial_lr: float = 0.1
    weight_decay: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 32
    lr_step_epochs: int = 20
    lr_gamma: float = 0.1

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if not 0.0 < self.lr_gamma <= 1.0:
            raise ValueError(f"lr_gamma must be in (0, 1], got {self.lr_gamma}")
        if self.batch_size < 1 or self.lr_step_epochs < 1:
            raise ValueError("batch_size and lr_step_epochs must be >= 1")

    @classmethod
    def stage1(cls, **kw) -> "StageConfig":
        return cls(**{"initial_lr": 0.1, "weight_decay": 1e-3, **kw})

    @classmethod
    def stage2(cls, **kw) -> "StageConfig":
        return cls(**{"initial_lr": 5e-4, "weight_decay": 1e-3, **kw})

    from_dict = classmethod(_from_dict)

    def lr_at(self, epoch: int) -> float:
        return self.initial_lr * self.lr_gamma ** (epoch // self.lr_step_epochs)


@dataclass
class AugmentConfig:
    enabled: bool = True
    horizontal_flip: bool = True
    rotation_degrees: tuple[float, float] = (-4.0, 4.0)
    color_jitter_scale: tuple[float, float] = (0.9, 1.1)

    def __post_init__(self):
        self.rotation_degrees = tuple(float(v) for v in self.rotation_degrees)
        self.color_jitter_scale = tuple(float(v) for v in self.color_jitter_scale)
        for name in ("rotation_degrees", "color_jitter_scale"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} range must be ordered, got {(lo, hi)}")

    @classmethod
    def off(cls) -> "AugmentConfig":
        return cls(enabled=False)

    from_dict = classmethod(_from_dict)


_STREAMS = {"init": 0, "shuffle": 1, "dropout": 2, "augment": 3}
_STAGE_KEYS = {"stage1": 1, "stage2": 2, "joint": 3}


@dataclass(frozen=True)
class RunSeed:
    """Master seed with named, independent derived streams."""

    master: int = 0

    def rng(self, stream: str, *keys: int) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence([self.master, _STREAMS[stream], *keys]))

    def init_seed(self) -> int:
        return int(self.rng("init").integers(2**31))


@dataclass
class Dataset:
    """Unstandardised images in [0, 1], (N, C, S, S), with labels in [0, 1]."""

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images vs {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx])


# ---------------------------------------------------------------- augmentation


def jitter(image: np.ndarray, scale: float) -> np.ndarray:
    """One brightness scale for all channels, clamped to the [0, 1] pixel range."""
    return np.clip(image * scale, 0.0, 1.0).astype(image.dtype)


def augment(image: np.ndarray, aug: AugmentConfig, seed, force_flip: bool | None = None) -> np.ndarray:
    """Random flip (p = 0.5), rotation and colour jitter of one (C, H, W) image."""
    if not aug.enabled:
        return image
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    flip = rng.random() < 0.5 if force_flip is None else force_flip
    angle = rng.uniform(*aug.rotation_degrees)
    scale = rng.uniform(*aug.color_jitter_scale)
    out = imaging.hflip(image) if (aug.horizontal_flip and flip) else image
    out = imaging.rotate(out, angle)
    return jitter(out, scale)


def augment_batch(images: np.ndarray, aug: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Vectorised :func:`augment` over an (N, C, H, W) batch."""
    if not aug.enabled:
        return images
    n = len(images)
    flips = rng.random(n) < 0.5
    angles = rng.uniform(*aug.rotation_degrees, size=n)
    scales = rng.uniform(*aug.color_jitter_scale, size=n)
    out = images.copy()
    if aug.horizontal_flip and flips.any():
        out[flips] = out[flips][..., ::-1]
    out = imaging.rotate_batch(out, angles)
    return np.clip(out * scales[:, None, None, None].astype(out.dtype), 0.0, 1.0).astype(images.dtype)


# ---------------------------------------------------------------- helpers


def _stats(model: SIWNet) -> PixelStats:
    mean, std = model.meta.get("pixel_mean"), model.meta.get("pixel_std")
    if mean is None or std is None:
        return PixelStats.identity(model.config.input_channels)
    return PixelStats(tuple(mean), tuple(std))


def ensure_pixel_stats(model: SIWNet, train: Dataset) -> None:
    """Fit pixel normalisation on the training images once and store it in the model."""
    if model.meta.get("pixel_mean") is None:
        s = PixelStats.from_images(train.images)
        model.meta["pixel_mean"] = list(s.mean)
        model.meta["pixel_std"] = list(s.std)


def predict(model: SIWNet, images: np.ndarray, batch_size: int = 128) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode point estimates and sigmas for unstandardised images.

    Point estimates are clamped to [0, 1] (a no-op with the output sigmoid)
    and sigmas floored at ``SIGMA_FLOOR`` so every output is a valid
    truncated normal.
    """
    x = standardize(np.asarray(images, dtype=np.float64), _stats(model))
    f, s = model.predict(x.astype(model.dtype), batch_size)
    f = np.clip(f.astype(np.float64), 0.0, 1.0)
    s = np.maximum(s.astype(np.float64), SIGMA_FLOOR)
    return f, s


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def _check_finite(value: float, stage: str, epoch: int) -> None:
    if not math.isfinite(value):
        raise NumericError(f"{stage}: non-finite training loss at epoch {epoch}")


def _val_entry(model: SIWNet, val: Dataset | None, with_intervals: bool) -> dict:
    if val is None or len(val) == 0:
        return {}
    f, s = predict(model, val.images)
    out = {"val_mae": float(np.mean(np.abs(f - val.labels)))}
    if with_intervals:
        scores = [
            interval_score(interval(TruncatedNormal(float(p), float(q))), float(y))
            for p, q, y in zip(f, s, val.labels)
        ]
        out["val_interval_score"] = math.fsum(scores) / len(scores)
    return out


LogFn = Callable[[dict], None]


def _run(
    model: SIWNet,
    train: Dataset,
    cfg: StageConfig,
    aug: AugmentConfig,
    seed: RunSeed,
    stage: str,
    params: list[T.Tensor],
    step_loss: Callable,
    val: Dataset | None,
    on_epoch: LogFn | None,
    after_epoch: Callable[[int], None] | None = None,
) -> list[dict]:
    if len(train) == 0:
        raise ValueError(f"{stage}: empty training set")
    ensure_pixel_stats(model, train)
    stats = _stats(model)
    opt = T.SGD(params, cfg.initial_lr, cfg.momentum, cfg.weight_decay)
    key = _STAGE_KEYS[stage]
    log = []
    for epoch in range(cfg.epochs):
        opt.lr = cfg.lr_at(epoch)
        shuffle = seed.rng("shuffle", key, epoch)
        aug_rng = seed.rng("augment", key, epoch)
        drop_rng = seed.rng("dropout", key, epoch)
        total = 0.0
        for idx in _batches(len(train), cfg.batch_size, shuffle):
            x = augment_batch(train.images[idx], aug, aug_rng)
            x = T.Tensor(standardize(x, stats).astype(model.dtype))
            opt.zero_grad()
            loss, per_sample_sum = step_loss(x, train.labels[idx], drop_rng)
            _check_finite(per_sample_sum, stage, epoch)
            loss.backward()
            opt.step()
            total += per_sample_sum
        entry = {"stage": stage, "epoch": epoch, "lr": opt.lr, "train_loss": total / len(train)}
        entry.update(_val_entry(model, val, with_intervals=stage != "stage1"))
        if after_epoch is not None:
            after_epoch(epoch)
        log.append(entry)
        if on_epoch is not None:
            on_epoch(entry)
    return log


def train_stage1(
    model: SIWNet,
    train: Dataset,
    cfg: StageConfig | None = None,
    aug: AugmentConfig | None = None,
    seed: RunSeed | int = 0,
    val: Dataset | None = None,
    on_epoch: LogFn | None = None,
) -> tuple[SIWNet, list[dict]]:
    """MSE training of backbone + point head; the interval head is not touched."""
    cfg = cfg or StageConfig.stage1()
    aug = aug or AugmentConfig()
    seed = seed if isinstance(seed, RunSeed) else RunSeed(seed)

    def step(x, y, _rng):
        f_hat = model.point(model.features(x, training=True))
        loss = T.mse_loss(f_hat, y)
        return loss, float(loss.data) * len(y)

    params = model.parameters(("backbone", "point_head"))
    log = _run(model, train, cfg, aug, seed, "stage1", params, step, val, on_epoch)
    model.meta["stage1_done"] = True
    return model, log


def train_stage2(
    model: SIWNet,
    train: Dataset,
    cfg: StageConfig | None = None,
    aug: AugmentConfig | None = None,
    seed: RunSeed | int = 0,
    val: Dataset | None = None,
    on_epoch: LogFn | None = None,
    verify_frozen: bool = False,
) -> tuple[SIWNet, list[dict]]:
    """NLL training of the interval head with backbone and point head frozen.

    With ``verify_frozen`` the frozen groups (parameters and batchnorm
    buffers) are hashed after every epoch and any change raises.
    """
    cfg = cfg or StageConfig.stage2()
    aug = aug or AugmentConfig()
    seed = seed if isinstance(seed, RunSeed) else RunSeed(seed)
    if not model.meta.get("stage1_done"):
        warnings.warn("train_stage2 on a model without stage-1 training; proceeding", stacklevel=2)

    def step(x, y, rng):
        with T.no_grad():
            feats = model.features(x, training=False)
            f_hat = model.point(feats)
        sigma = model.interval_head(T.Tensor(feats.data), T.Tensor(f_hat.data), training=True, rng=rng)
        mu = T.Tensor(np.clip(f_hat.data, 0.0, 1.0)) if not model.config.point_sigmoid else T.Tensor(f_hat.data)
        loss = batch_loss_tensor(mu, T.clamp_min(sigma, SIGMA_FLOOR), y)
        return loss, float(loss.data)

    frozen = ("backbone", "point_head")
    before = model.group_digest(frozen) if verify_frozen else None

    def check(epoch):
        if verify_frozen and model.group_digest(frozen) != before:
            raise AssertionError(f"stage2 modified frozen weights during epoch {epoch}")

    params = model.parameters("pi_head")
    log = _run(model, train, cfg, aug, seed, "stage2", params, step, val, on_epoch, check)
    model.meta["stage2_done"] = True
    return model, log


def train_joint_ablation(
    model: SIWNet,
    train: Dataset,
    cfg: StageConfig | None = None,
    aug: AugmentConfig | None = None,
    seed: RunSeed | int = 0,
    val: Dataset | None = None,
    on_epoch: LogFn | None = None,
) -> tuple[SIWNet, list[dict]]:
    """Single stage: the whole network on the summed NLL, nothing frozen."""
    cfg = cfg or StageConfig.stage2()
    aug = aug or AugmentConfig()
    seed = seed if isinstance(seed, RunSeed) else RunSeed(seed)

    def step(x, y, rng):
        f_hat, sigma = model.forward(x, training=True, rng=rng)
        mu = T.clamp(f_hat, 0.0, 1.0) if not model.config.point_sigmoid else f_hat
        loss = batch_loss_tensor(mu, T.clamp_min(sigma, SIGMA_FLOOR), y)
        return loss, float(loss.data)

    log = _run(model, train, cfg, aug, seed, "joint", model.parameters(), step, val, on_epoch)
    model.meta["joint_done"] = True
    return model, log


def write_log(entries: list[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(json.dumps(e, sort_keys=True) + "\n")


def config_dict(obj) -> dict:
    d = asdict(obj)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
