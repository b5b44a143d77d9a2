"""Progressive level-wise training: level 5 first, then 4, 3, 2, 1 and the final 2x head."""

from __future__ import annotations

import csv
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
import yaml

from . import rawio
from .checkpoint import (
    CheckpointData,
    optimizer_state_by_name,
    restore_optimizer,
    save_checkpoint,
)
from .errors import ConfigError, ContractError, ScheduleError, TrainingDivergedError
from .losses import (
    FeatureExtractor,
    LevelLossSpec,
    LossNormalizer,
    combine_terms,
    ms_ssim,
    raw_terms,
)
from .model import NUM_LEVELS, PyNet

log = logging.getLogger(__name__)

LEVELS = (5, 4, 3, 2, 1, 0)
UNTRAINED = NUM_LEVELS + 1


def _level_map(value, default, cast=int) -> dict:
    if value is None:
        return dict(default)
    if isinstance(value, (int, float)):
        return {lv: cast(value) for lv in LEVELS}
    return {int(k): cast(v) for k, v in value.items()}


@dataclass
class TrainConfig:
    # one rate for every level, or a {level: rate} map
    learning_rate: float | dict = 5e-5
    batch_size_per_level: dict = field(
        default_factory=lambda: {5: 50, 4: 50, 3: 32, 2: 16, 1: 10, 0: 10}
    )
    epochs_per_level: dict = field(default_factory=lambda: {lv: 10 for lv in LEVELS})
    # optional hard cap on optimizer steps per level; None means epochs decide
    max_steps_per_level: dict | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 0
    checkpoint_dir: str | None = None
    checkpoint_every: int = 1000
    norm_warmup: int = 100
    multiscale_ssim: bool = True
    feature_layer: str = "relu5_4"
    # path to VGG-19 weights, "random" for a seeded random extractor, or None for $PYNET_VGG_WEIGHTS
    perceptual_weights: str | None = None
    metrics_csv: str | None = None
    workers: int = 0

    def __post_init__(self):
        if isinstance(self.learning_rate, dict):
            self.learning_rate = _level_map(self.learning_rate, {}, cast=float)
        self.batch_size_per_level = _level_map(self.batch_size_per_level, {})
        self.epochs_per_level = _level_map(self.epochs_per_level, {})
        if self.max_steps_per_level is not None:
            self.max_steps_per_level = _level_map(self.max_steps_per_level, {})
        self.validate()

    def validate(self) -> None:
        for lv in LEVELS:
            lr = self.lr(lv)
            if lr is None or not lr > 0:
                raise ConfigError(f"learning rate for level {lv} must be positive, got {lr}")
            bs = self.batch_size_per_level.get(lv)
            ep = self.epochs_per_level.get(lv)
            if bs is None or not 1 <= bs <= 64:
                raise ConfigError(f"batch size for level {lv} must be in [1, 64], got {bs}")
            if ep is None or not 1 <= ep <= 100:
                raise ConfigError(f"epochs for level {lv} must be in [1, 100], got {ep}")
        if self.checkpoint_every < 1 or self.norm_warmup < 1:
            raise ConfigError("checkpoint_every and norm_warmup must be >= 1")

    def lr(self, level: int) -> float | None:
        if isinstance(self.learning_rate, dict):
            return self.learning_rate.get(level)
        return self.learning_rate

    def max_steps(self, level: int) -> float:
        if self.max_steps_per_level and level in self.max_steps_per_level:
            return self.max_steps_per_level[level]
        return math.inf

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_file(cls, path, **overrides) -> "TrainConfig":
        """Read a YAML ``key: value`` file; ``overrides`` (non-None) win."""
        data = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a mapping of keys to values")
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**data)


@dataclass
class TrainHistory:
    steps: list[dict] = field(default_factory=list)
    validation: list[dict] = field(default_factory=list)

    @property
    def next_step(self) -> int:
        return self.steps[-1]["step"] + 1 if self.steps else 0

    def losses(self, level: int | None = None) -> list[float]:
        return [r["loss"] for r in self.steps if level is None or r["level"] == level]

    def to_dict(self) -> dict:
        return {"steps": self.steps, "validation": self.validation}

    @classmethod
    def from_dict(cls, d: dict | None) -> "TrainHistory":
        d = d or {}
        return cls(list(d.get("steps", [])), list(d.get("validation", [])))


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


class PairDataset:
    """Training pairs from a dataset directory: (packed RAW CHW, RGB CHW in [0, 1])."""

    def __init__(self, root, split: str = "train", meta: dict | None = None):
        self.root = Path(root)
        self.meta = meta
        self.names = rawio.read_split(root, split)
        available = set(rawio.list_pairs(root))
        missing = [n for n in self.names if n not in available]
        if missing:
            raise ContractError(f"{root}: split {split!r} lists unmatched basenames {missing[:3]}")

    def __len__(self) -> int:
        return len(self.names)

    def __getitem__(self, i):
        packed, rgb = rawio.load_pair(self.root, self.names[i], self.meta)
        return (
            torch.from_numpy(np.ascontiguousarray(packed.data.transpose(2, 0, 1), dtype=np.float32)),
            torch.from_numpy(np.ascontiguousarray(rgb.data.transpose(2, 0, 1), dtype=np.float32)),
        )


class TensorPairDataset:
    """In-memory pairs; ``packed`` is (N, 4, h, w), ``rgb`` is (N, 3, 2h, 2w)."""

    def __init__(self, packed, rgb, names=None):
        self.packed = torch.as_tensor(packed, dtype=torch.float32)
        self.rgb = torch.as_tensor(rgb, dtype=torch.float32)
        if self.packed.shape[0] != self.rgb.shape[0]:
            raise ContractError("packed and rgb sets differ in length")
        if tuple(self.rgb.shape[-2:]) != tuple(2 * s for s in self.packed.shape[-2:]):
            raise ContractError("rgb must be twice the packed resolution")
        self.names = list(names) if names is not None else [f"{i:06d}" for i in range(len(self))]

    def __len__(self) -> int:
        return self.packed.shape[0]

    def __getitem__(self, i):
        return self.packed[i], self.rgb[i]


def load_batch(dataset, indices, workers: int = 0):
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            items = list(pool.map(dataset.__getitem__, indices))
    else:
        items = [dataset[i] for i in indices]
    packed, rgb = zip(*items)
    return torch.stack(packed), torch.stack(rgb)


def batch_order(n: int, batch_size: int, seed: int, level: int, epoch: int) -> list[list[int]]:
    """Batches for one epoch; a pure function of (seed, level, epoch)."""
    gen = torch.Generator().manual_seed(seed * 1_000_003 + level * 10_007 + epoch)
    perm = torch.randperm(n, generator=gen).tolist()
    return [perm[i: i + batch_size] for i in range(0, n, batch_size)]


def level_target(rgb: torch.Tensor, level: int) -> torch.Tensor:
    """Area-averaged target for ``level`` mapped to the tanh range."""
    factor = 2**level
    if rgb.shape[-1] % factor or rgb.shape[-2] % factor:
        raise ContractError(f"target side not divisible by {factor}")
    small = F.avg_pool2d(rgb, factor) if factor > 1 else rgb
    return 2.0 * small - 1.0


def make_level_targets(rgb, size: int = 448) -> dict[int, np.ndarray]:
    """Per-level targets (HWC, values in [-1, 1]) for one ``size`` x ``size`` RGB image."""
    arr = np.asarray(getattr(rgb, "data", rgb), dtype=np.float64)
    if arr.shape != (size, size, 3):
        raise ContractError(f"expected a {size}x{size}x3 image, got {arr.shape}")
    t = torch.from_numpy(arr.transpose(2, 0, 1).copy())[None]
    return {lv: level_target(t, lv)[0].permute(1, 2, 0).numpy() for lv in LEVELS}


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def resolve_extractor(cfg: TrainConfig) -> FeatureExtractor:
    if cfg.perceptual_weights == "random":
        return FeatureExtractor.random(cfg.seed, cfg.feature_layer)
    if cfg.perceptual_weights:
        return FeatureExtractor.from_weights(cfg.perceptual_weights, cfg.feature_layer)
    return FeatureExtractor.from_env(cfg.feature_layer)


class _MetricsLog:
    COLUMNS = ("step", "level", "loss", "MSE", "PERCEPTUAL", "SSIM", "val_psnr", "val_msssim")

    def __init__(self, path):
        self.path = Path(path) if path else None
        if self.path and not self.path.exists():
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("w", newline="") as fh:
                csv.writer(fh).writerow(self.COLUMNS)

    def write(self, **row) -> None:
        if self.path:
            with self.path.open("a", newline="") as fh:
                csv.writer(fh).writerow([row.get(c, "") for c in self.COLUMNS])


def validate_level(model: PyNet, dataset, level: int, batch_size: int = 8) -> dict:
    """Mean PSNR and MS-SSIM of the level output against its area-averaged target."""
    from .losses import psnr

    model.eval()
    psnrs, ssims = [], []
    with torch.no_grad():
        for start in range(0, len(dataset), batch_size):
            packed, rgb = load_batch(dataset, range(start, min(start + batch_size, len(dataset))))
            pred = (model(packed, level).double() + 1.0) / 2.0
            target = (level_target(rgb.double(), level) + 1.0) / 2.0
            for p, t in zip(pred.clamp(0, 1), target):
                psnrs.append(psnr(p.numpy(), t.numpy()))
                if min(p.shape[-2:]) >= 11:
                    ssims.append(float(ms_ssim(p[None], t[None])))
    model.train()
    return {
        "val_psnr": float(np.mean(psnrs)),
        "val_msssim": float(np.mean(ssims)) if ssims else float("nan"),
    }


def _progress_state(level, epoch, batch, steps_done, normalizer) -> dict:
    return {
        "level": level,
        "epoch": epoch,
        "batch": batch,
        "steps_done": steps_done,
        "normalizer": normalizer.state_dict(),
    }


def train_level(model: PyNet, dataset, level: int, cfg: TrainConfig, fx=None,
                history: TrainHistory | None = None, val_dataset=None,
                resume: CheckpointData | None = None):
    """Train the sub-graph that produces ``level`` (deeper levels included).

    Returns ``(model, history)``. ``resume`` continues an interrupted run of
    the same level from a mid-level checkpoint.
    """
    expected = UNTRAINED if level == NUM_LEVELS else level + 1
    if model.trained_level != expected:
        raise ScheduleError(
            f"level {level} needs trained_level {expected}, model is at {model.trained_level}"
        )
    if len(dataset) == 0:
        raise ContractError("empty training set")
    history = history or TrainHistory()
    spec = LevelLossSpec.for_level(level, multiscale_ssim=cfg.multiscale_ssim)
    if spec.needs_extractor and fx is None:
        fx = resolve_extractor(cfg)

    params = model.level_parameters(level)
    opt = torch.optim.Adam(params, lr=cfg.lr(level), betas=(cfg.beta1, cfg.beta2))
    normalizer = LossNormalizer(spec, cfg.norm_warmup)
    start_epoch, start_batch, steps_done = 0, 0, 0
    if resume is not None:
        state = resume.train_state
        if state.get("level") != level:
            raise ScheduleError(f"checkpoint is for level {state.get('level')}, not {level}")
        if resume.optimizer is not None:
            restore_optimizer(model, opt, resume.optimizer)
        normalizer = LossNormalizer.from_state(state["normalizer"])
        start_epoch, start_batch, steps_done = state["epoch"], state["batch"], state["steps_done"]

    ckpt_dir = Path(cfg.checkpoint_dir) if cfg.checkpoint_dir else None
    metrics = _MetricsLog(cfg.metrics_csv)
    batch_size = cfg.batch_size_per_level[level]
    max_steps = cfg.max_steps(level)
    log.info("training level %d: %d params, batch %d", level, sum(p.numel() for p in params), batch_size)

    def checkpoint(name, epoch, batch):
        if ckpt_dir is None:
            return
        save_checkpoint(
            model, history, ckpt_dir / name, optimizer_state_by_name(model, opt),
            _progress_state(level, epoch, batch, steps_done, normalizer),
        )

    model.train()
    t0 = time.perf_counter()
    for epoch in range(start_epoch, cfg.epochs_per_level[level]):
        if steps_done >= max_steps:
            break
        batches = batch_order(len(dataset), batch_size, cfg.seed, level, epoch)
        first = start_batch if epoch == start_epoch else 0
        for b in range(first, len(batches)):
            if steps_done >= max_steps:
                break
            packed, rgb = load_batch(dataset, batches[b], cfg.workers)
            pred = model(packed, level)
            terms = raw_terms(spec, pred, level_target(rgb, level), fx)
            spec = normalizer.update([t.item() for t in terms])
            loss = combine_terms(spec, terms)
            if not torch.isfinite(loss):
                checkpoint(f"diverged-level{level}.ckpt", epoch, b)
                raise TrainingDivergedError(f"non-finite loss at level {level}, epoch {epoch}, batch {b}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            steps_done += 1

            term_values = {t.kind.value: v.item() for t, v in zip(spec.terms, terms)}
            record = {
                "level": level, "epoch": epoch, "step": history.next_step,
                "loss": loss.item(), "terms": term_values,
                "time": time.perf_counter() - t0,
            }
            history.steps.append(record)
            metrics.write(step=record["step"], level=level, loss=record["loss"], **term_values)
            if steps_done % cfg.checkpoint_every == 0:
                checkpoint("latest.ckpt", epoch, b + 1)
        if val_dataset is not None and len(val_dataset):
            scores = validate_level(model, val_dataset, level)
            history.validation.append({"level": level, "epoch": epoch, **scores})
            metrics.write(step=history.next_step - 1, level=level, **scores)
            log.info("level %d epoch %d: %s", level, epoch, scores)

    model.trained_level = level
    if ckpt_dir is not None:
        save_checkpoint(model, history, ckpt_dir / f"level{level}.ckpt")
        save_checkpoint(model, history, ckpt_dir / "latest.ckpt")
    return model, history


def train_progressive(model: PyNet, dataset, cfg: TrainConfig, fx=None,
                      history: TrainHistory | None = None, val_dataset=None,
                      resume: CheckpointData | None = None, levels=LEVELS) -> PyNet:
    """Run the level schedule 5 -> 0, skipping levels the model has already finished."""
    history = history if history is not None else TrainHistory()
    pending = resume.train_state.get("level") if resume is not None else None
    for level in levels:
        if model.trained_level <= level:
            log.info("level %d already trained, skipping", level)
            continue
        model, _ = train_level(
            model, dataset, level, cfg, fx, history, val_dataset,
            resume=resume if pending == level else None,
        )
    return model
