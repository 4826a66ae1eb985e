"""Adam, learning-rate schedule, bottom cropping and the training loop."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .autodiff import ContractError, RunningStats, Tensor
from .geometry import DepthMap, subsample_depth
from .losses import MODES, LossReport, LossWeights, total_loss
from .network import Model, ModelConfig
from .scene import SceneSample

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class NumericError(ArithmeticError):
    """Non-finite loss or gradient; training stops."""


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "self_supervised"
    epochs: int = 12
    batch_size: int = 4
    lr_initial: float = 1e-4
    lr_after: float = 5e-5
    lr_drop_epoch: int = 6
    crop_height: int = 64
    crop_width: int = 96
    seed: int = 0
    level_of_sparsity: float = 1.0
    max_steps: int = 0
    precision: str = "float32"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ContractError(f"train.mode must be one of {MODES}, got {self.mode!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ContractError("train.epochs and train.batch_size must be >= 1")
        if not 0 <= self.lr_drop_epoch <= self.epochs:
            raise ContractError("train.lr_drop_epoch must lie in [0, train.epochs]")
        if self.crop_height < 1 or self.crop_width < 1:
            raise ContractError("train.crop_height/crop_width must be >= 1")
        if not 0 < self.level_of_sparsity <= 1:
            raise ContractError("train.level_of_sparsity must be in (0, 1]")
        if self.max_steps < 0:
            raise ContractError("train.max_steps must be >= 0 (0 = no cap)")
        if self.precision not in ("float32", "float64"):
            raise ContractError("train.precision must be float32 or float64")


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class OptimState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros(cls, params: dict) -> "OptimState":
        return cls({k: np.zeros_like(p.data) for k, p in params.items()},
                   {k: np.zeros_like(p.data) for k, p in params.items()}, 0)


def adam_step(params: dict, grads: dict, state: OptimState, lr: float):
    """One bias-corrected Adam update; returns replacement ``(params, state)``."""
    t = state.t + 1
    new_params, new_m, new_v = {}, {}, {}
    c1 = 1 - ADAM_BETA1 ** t
    c2 = 1 - ADAM_BETA2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ContractError(f"adam_step: gradient shape {g.shape} != parameter {name} {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name}")
        m = ADAM_BETA1 * state.m[name] + (1 - ADAM_BETA1) * g
        v = ADAM_BETA2 * state.v[name] + (1 - ADAM_BETA2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
        new_params[name] = ad.parameter((p.data - update).astype(p.dtype), name=name)
        new_m[name], new_v[name] = m.astype(p.dtype), v.astype(p.dtype)
    return new_params, OptimState(new_m, new_v, t)


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    if epoch < 0:
        raise ContractError("lr_schedule: epoch must be >= 0")
    return cfg.lr_initial if epoch < cfg.lr_drop_epoch else cfg.lr_after


# ---------------------------------------------------------------------------
# cropping

def crop_window(height: int, width: int, crop_h: int, crop_w: int, rng: np.random.Generator):
    """Bottom-anchored window ``(top, left)`` with a uniform horizontal offset."""
    if crop_h > height or crop_w > width:
        raise ContractError(f"crop {crop_h}x{crop_w} larger than image {height}x{width}")
    return height - crop_h, int(rng.integers(0, width - crop_w + 1))


def _crop_depth(d: DepthMap, top, left, h, w) -> DepthMap:
    return DepthMap(d.depth[top:top + h, left:left + w], d.valid[top:top + h, left:left + w])


def bottom_crop(sample: SceneSample, crop_h: int, crop_w: int, rng: np.random.Generator) -> SceneSample:
    h, w = sample.left_image.shape[:2]
    top, left = crop_window(h, w, crop_h, crop_w, rng)
    win = (slice(top, top + crop_h), slice(left, left + crop_w))
    return replace(
        sample,
        left_image=sample.left_image[win],
        right_image=sample.right_image[win],
        gt_depth=_crop_depth(sample.gt_depth, top, left, crop_h, crop_w),
        gt_disparity=replace(sample.gt_disparity, disparity=sample.gt_disparity.disparity[win]),
        sparse_depth=_crop_depth(sample.sparse_depth, top, left, crop_h, crop_w),
        occlusion=sample.occlusion[win],
        rig=sample.rig.cropped(top, left, crop_h, crop_w),
    )


# ---------------------------------------------------------------------------
# batches

@dataclass
class Batch:
    left: np.ndarray
    right: np.ndarray
    sparse: np.ndarray
    sparse_valid: np.ndarray
    target: np.ndarray
    target_valid: np.ndarray
    rig: object


def _sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, index])


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch, 2 ** 31 - 1]).permutation(n)


class _Cache:
    """Decoded samples; ground truth is only read when asked for."""

    def __init__(self, dataset):
        self.ds = dataset
        self.items = {}
        self.gt = {}

    def get(self, i):
        if i not in self.items:
            self.items[i] = (self.ds.left(i), self.ds.right(i), self.ds.sparse(i), self.ds.rig(i))
        return self.items[i]

    def get_gt(self, i):
        if i not in self.gt:
            self.gt[i] = self.ds.gt(i)
        return self.gt[i]


def make_batch(cache: _Cache, indices, cfg: TrainConfig, epoch: int) -> Batch:
    cols = {k: [] for k in ("left", "right", "sparse", "sparse_valid", "target", "target_valid")}
    rig = None
    for i in indices:
        left, right, sparse, rig_i = cache.get(int(i))
        rng = _sample_rng(cfg.seed, epoch, int(i))
        top, x0 = crop_window(left.shape[0], left.shape[1], cfg.crop_height, cfg.crop_width, rng)
        sub = subsample_depth(sparse, cfg.level_of_sparsity, int(rng.integers(2 ** 31)))
        sub = _crop_depth(sub, top, x0, cfg.crop_height, cfg.crop_width)
        win = (slice(top, top + cfg.crop_height), slice(x0, x0 + cfg.crop_width))
        cols["left"].append(left[win])
        cols["right"].append(right[win])
        cols["sparse"].append(sub.depth)
        cols["sparse_valid"].append(sub.valid)
        if cfg.mode == "supervised":
            gt = _crop_depth(cache.get_gt(int(i)), top, x0, cfg.crop_height, cfg.crop_width)
            cols["target"].append(gt.depth)
            cols["target_valid"].append(gt.valid)
        else:
            cols["target"].append(sub.depth)
            cols["target_valid"].append(sub.valid)
        cropped = rig_i.cropped(top, x0, cfg.crop_height, cfg.crop_width)
        if rig is not None and (rig.fb, rig.max_depth_m) != (cropped.fb, cropped.max_depth_m):
            raise ContractError("samples in one batch must share focal*baseline and max depth")
        rig = rig or cropped
    return Batch(**{k: np.stack(v) for k, v in cols.items()}, rig=rig)


def loss_on_batch(model: Model, params: dict, batch: Batch, weights: LossWeights, training: bool = True):
    disp, depth = model(batch.left, batch.right, batch.sparse, batch.sparse_valid, batch.rig,
                        training=training, params=params)
    return total_loss(batch.left, batch.right, batch.target, batch.target_valid, disp, depth, weights)


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, model: Model, state: OptimState, step: int, epoch: int, batch: int,
                    extra_meta: dict | None = None) -> None:
    from .config import model_config_lines

    tensors = {}
    for k, p in model.params.items():
        tensors[f"param/{k}"] = p.data
        tensors[f"adam_m/{k}"] = state.m[k]
        tensors[f"adam_v/{k}"] = state.v[k]
    for k, s in model.stats.items():
        tensors[f"bn_mean/{k}"] = s.mean
        tensors[f"bn_var/{k}"] = s.var
    meta = {"step": step, "epoch": epoch, "batch": batch, "adam_t": state.t}
    meta.update({f"model.{k}": v for k, v in model_config_lines(model.config).items()})
    meta.update(extra_meta or {})
    checkpoint.save(path, tensors, meta)


@dataclass
class Resume:
    model: Model
    state: OptimState
    step: int
    epoch: int
    batch: int
    meta: dict


def load_checkpoint(path) -> Resume:
    from .config import model_config_from_lines

    tensors, meta = checkpoint.load(path)
    cfg = model_config_from_lines({k[6:]: v for k, v in meta.items() if k.startswith("model.")})
    model = Model.create(cfg)
    params, m, v = {}, {}, {}
    for name, p in model.params.items():
        key = f"param/{name}"
        if key not in tensors:
            raise checkpoint.CheckpointError(f"{path}: missing parameter {name}")
        if tensors[key].shape != p.shape:
            raise checkpoint.CheckpointError(f"{path}: parameter {name} has shape {tensors[key].shape}, "
                                             f"expected {p.shape}")
        params[name] = ad.parameter(tensors[key], name=name)
        m[name] = tensors.get(f"adam_m/{name}", np.zeros_like(tensors[key]))
        v[name] = tensors.get(f"adam_v/{name}", np.zeros_like(tensors[key]))
    stats = {}
    for name, s in model.stats.items():
        rs = RunningStats(s.mean.shape[1], tensors[f"bn_mean/{name}"].dtype)
        rs.mean, rs.var = tensors[f"bn_mean/{name}"].copy(), tensors[f"bn_var/{name}"].copy()
        stats[name] = rs
    model = Model(cfg, params, stats, model.net)
    state = OptimState(m, v, int(meta.get("adam_t", 0)))
    return Resume(model, state, int(meta.get("step", 0)), int(meta.get("epoch", 0)),
                  int(meta.get("batch", 0)), meta)


# ---------------------------------------------------------------------------
# loop

def format_log_line(step: int, epoch: int, lr: float, r: LossReport) -> str:
    return (f"{step} {epoch} {lr:.6g} {r.total:.9g} {r.depth_term:.9g} "
            f"{r.photometric_term:.9g} {r.smooth_term:.9g}")


@dataclass
class TrainResult:
    model: Model
    state: OptimState
    step: int
    epoch: int
    log_lines: list = field(default_factory=list)
    reports: list = field(default_factory=list)


def train(dataset, model_config: ModelConfig, cfg: TrainConfig, weights: LossWeights | None = None,
          out_dir=None, resume_from=None, on_step=None, init_seed: int | None = None) -> TrainResult:
    """Train on ``dataset`` (SceneDataset-like).

    Writes ``epoch_XXX.ckpt``, ``last.ckpt`` and an append-only ``train.log``
    into ``out_dir`` when given.  ``on_step(step, params, batch, report)`` is
    called with the pre-update parameters of every step.
    """
    weights = weights or LossWeights.for_mode(cfg.mode)
    dtype = np.dtype(cfg.precision)
    with ad.precision(dtype):
        return _train(dataset, model_config, cfg, weights, out_dir, resume_from, on_step,
                      cfg.seed if init_seed is None else init_seed)


def _train(dataset, model_config, cfg, weights, out_dir, resume_from, on_step, init_seed):
    n = len(dataset)
    if n == 0:
        raise ContractError("train: dataset is empty")
    if resume_from is not None:
        res = load_checkpoint(resume_from)
        if res.model.config != model_config:
            raise ContractError("train: checkpoint model config differs from the requested one")
        model, state, step, epoch, batch0 = res.model, res.state, res.step, res.epoch, res.batch
    else:
        model = Model.create(model_config, init_seed)
        state = OptimState.zeros(model.params)
        step, epoch, batch0 = 0, 0, 0
    out = Path(out_dir) if out_dir is not None else None
    logfile = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        logfile = open(out / "train.log", "a")
    result = TrainResult(model, state, step, epoch)
    cache = _Cache(dataset)
    n_batches = -(-n // cfg.batch_size)
    try:
        while epoch < cfg.epochs:
            order = epoch_order(n, cfg.seed, epoch)
            lr = lr_schedule(epoch, cfg)
            for b in range(batch0, n_batches):
                if cfg.max_steps and step >= cfg.max_steps:
                    break
                batch = make_batch(cache, order[b * cfg.batch_size:(b + 1) * cfg.batch_size], cfg, epoch)
                loss, report = loss_on_batch(model, model.params, batch, weights)
                if not np.isfinite(report.total):
                    raise NumericError(f"non-finite loss at step {step}: {report}")
                ad.backward(loss)
                if on_step is not None:
                    on_step(step, model.params, batch, report)
                grads = {k: p.grad for k, p in model.params.items()}
                params, state = adam_step(model.params, grads, state, lr)
                model = Model(model.config, params, model.stats, model.net)
                line = format_log_line(step, epoch, lr, report)
                result.log_lines.append(line)
                result.reports.append(report)
                if logfile:
                    logfile.write(line + "\n")
                    logfile.flush()
                step += 1
                batch0 = b + 1
            else:
                epoch, batch0 = epoch + 1, 0
                if out is not None:
                    save_checkpoint(out / f"epoch_{epoch - 1:03d}.ckpt", model, state, step, epoch, 0)
                    save_checkpoint(out / "last.ckpt", model, state, step, epoch, 0)
                continue
            break
        if out is not None and batch0:
            save_checkpoint(out / "last.ckpt", model, state, step, epoch, batch0)
    finally:
        if logfile:
            logfile.close()
    result.model, result.state, result.step, result.epoch = model, state, step, epoch
    return result


def fields_of(cls) -> list[str]:
    return [f.name for f in fields(cls)]
