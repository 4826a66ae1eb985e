"""Central finite-difference checks for the differentiable primitives."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tolerance)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max abs difference normalised by the larger gradient magnitude."""
    denom = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / denom)


def numeric_grad(fn: Callable[[list[np.ndarray]], float], arrays: list[np.ndarray], which: int,
                 indices=None) -> np.ndarray:
    """Central differences with step ``1e-3 * max(1, |x|)`` for one input array."""
    base = arrays[which]
    grad = np.zeros_like(base)
    flat_idx = range(base.size) if indices is None else indices
    for i in flat_idx:
        pos = np.unravel_index(i, base.shape)
        h = 1e-3 * max(1.0, abs(float(base[pos])))
        plus = [a.copy() for a in arrays]
        minus = [a.copy() for a in arrays]
        plus[which][pos] += h
        minus[which][pos] -= h
        grad[pos] = (fn(plus) - fn(minus)) / (2 * h)
    return grad


def check_op(name: str, op: Callable[..., ad.Tensor], inputs: list[np.ndarray],
             diff_args=None, tolerance: float = 1e-4, seed: int = 0) -> GradCheckResult:
    """Compare autodiff gradients of ``sum(op(*inputs) * R)`` against finite differences.

    ``R`` is a fixed random projection so every output element contributes.
    ``diff_args`` selects which inputs are differentiated (default: all).
    """
    diff_args = range(len(inputs)) if diff_args is None else diff_args
    with ad.precision(np.float64):
        arrays = [np.array(a, dtype=np.float64) for a in inputs]
        probe = op(*[ad.Tensor(a) for a in arrays])
        proj = np.random.default_rng(seed).standard_normal(probe.shape)

        def scalar(arrs):
            with ad.no_grad():
                return float((op(*[ad.Tensor(a) for a in arrs]).data * proj).sum())

        leaves = [ad.Tensor(a.copy(), requires_grad=(i in diff_args)) for i, a in enumerate(arrays)]
        out = op(*leaves)
        loss = ad.sum(ad.mul(out, ad.Tensor(proj)))
        ad.backward(loss)
        worst = 0.0
        for i in diff_args:
            num = numeric_grad(scalar, arrays, i)
            ana = leaves[i].grad if leaves[i].grad is not None else np.zeros_like(arrays[i])
            worst = max(worst, relative_error(ana, num))
    return GradCheckResult(name, worst, tolerance)


def _away_from_zero(rng, shape, margin=0.1):
    return rng.uniform(margin, 1.0, shape) * rng.choice([-1.0, 1.0], shape)


def primitive_cases(seed: int = 0):
    """Small random instances (<= 1x4x6x8) for every differentiable primitive."""
    rng = np.random.default_rng(seed)
    r = rng.standard_normal
    mask = (rng.uniform(size=(1, 1, 6, 8)) > 0.4).astype(float)
    disp = rng.uniform(0.2, 3.8, (1, 1, 6, 8))
    disp = np.where(np.abs(disp - np.round(disp)) < 0.05, disp + 0.1, disp)
    bn_stats = ad.RunningStats(3, dtype=np.float64)
    bn_stats.mean = r((1, 3, 1, 1))
    bn_stats.var = rng.uniform(0.5, 2.0, (1, 3, 1, 1))
    return [
        ("conv2d", lambda x, w, b: ad.conv2d(x, w, b, 1, 1), [r((1, 2, 6, 8)), r((3, 2, 3, 3)), r((1, 3, 1, 1))]),
        ("conv2d_stride2", lambda x, w, b: ad.conv2d(x, w, b, 2, 2), [r((1, 2, 6, 8)), r((3, 2, 5, 5)), r((1, 3, 1, 1))]),
        ("sparse_conv2d", lambda x, w, b: ad.sparse_conv2d(x, mask, w, b, 1, 1)[0],
         [r((1, 2, 6, 8)), r((3, 2, 3, 3)), r((1, 3, 1, 1))]),
        ("batch_norm_train", lambda x, g, b: ad.batch_norm(x, g, b, None, True),
         [r((1, 3, 6, 8)), r((1, 3, 1, 1)), r((1, 3, 1, 1))]),
        ("batch_norm_eval", lambda x, g, b: ad.batch_norm(x, g, b, bn_stats, False),
         [r((1, 3, 6, 8)), r((1, 3, 1, 1)), r((1, 3, 1, 1))]),
        ("leaky_relu", ad.leaky_relu, [_away_from_zero(rng, (1, 4, 6, 8))]),
        ("bilinear_resize_up", lambda x: ad.bilinear_resize(x, 6, 8), [r((1, 2, 3, 4))]),
        ("bilinear_resize_down", lambda x: ad.bilinear_resize(x, 2, 3), [r((1, 2, 6, 8))]),
        ("adaptive_avg_pool2d", lambda x: ad.adaptive_avg_pool2d(x, 3, 3), [r((1, 2, 6, 8))]),
        ("softmax_channel", ad.softmax_channel, [r((1, 4, 6, 8))]),
        ("sample_horizontal", ad.sample_horizontal, [r((1, 3, 6, 8)), disp]),
        ("correlation", lambda a, b: ad.correlation(a, b, 3), [r((1, 4, 6, 8)), r((1, 4, 6, 8))]),
        ("concat_channels", lambda a, b: ad.concat_channels([a, b]), [r((1, 2, 6, 8)), r((1, 2, 6, 8))]),
        ("concat_batch", lambda a, b: ad.concat_batch([a, b]), [r((1, 2, 6, 8)), r((1, 2, 6, 8))]),
        ("slice_batch", lambda a, b: ad.slice_batch(ad.concat_batch([a, b]), 1, 2),
         [r((1, 2, 6, 8)), r((1, 2, 6, 8))]),
        ("add", ad.add, [r((1, 3, 6, 8)), r((1, 3, 1, 1))]),
        ("sub", ad.sub, [r((1, 3, 6, 8)), r((1, 1, 6, 8))]),
        ("mul", ad.mul, [r((1, 3, 6, 8)), r((1, 3, 6, 8))]),
        ("div", ad.div, [r((1, 3, 6, 8)), rng.uniform(0.5, 2.0, (1, 3, 6, 8))]),
        ("abs", ad.abs, [_away_from_zero(rng, (1, 3, 6, 8))]),
        ("exp", ad.exp, [r((1, 3, 6, 8))]),
        ("negate", ad.neg, [r((1, 3, 6, 8))]),
        ("scale", lambda x: ad.scale(x, 2.5), [r((1, 3, 6, 8))]),
        ("clip", lambda x: ad.clip(x, -0.5, 0.5), [_away_from_zero(rng, (1, 3, 6, 8)) * np.where(rng.uniform(size=(1, 3, 6, 8)) < 0.5, 0.4, 1.0) + 0.0]),
        ("maximum", lambda x: ad.maximum(x, 0.0), [_away_from_zero(rng, (1, 3, 6, 8))]),
        ("sum", lambda x: ad.sum(x, (2, 3)), [r((1, 3, 6, 8))]),
        ("mean", lambda x: ad.mean(x, (1,)), [r((1, 3, 6, 8))]),
        ("masked_mean", lambda x: ad.masked_mean(x, mask), [r((1, 1, 6, 8))]),
        ("avg_pool2d", lambda x: ad.avg_pool2d(x, 3, 1, 0), [r((1, 3, 6, 8))]),
        ("crop", lambda x: ad.crop(x, 1, 5, 2, 7), [r((1, 3, 6, 8))]),
    ]


def check_primitives(tolerance: float = 1e-4, seed: int = 0) -> list[GradCheckResult]:
    return [check_op(name, op, inputs, tolerance=tolerance, seed=seed)
            for name, op, inputs in primitive_cases(seed)]


def tiny_model_config():
    from .network import ModelConfig

    return ModelConfig(feature_stride=4, max_disparity_px=8, base_channels=2, encoder_blocks=(1,),
                       feature_channels=4, fusion_channels=4, fusion_residual_blocks=1, upsample_blocks=3,
                       psp_bins=(1, 2), psp_branch_channels=2)


def check_end_to_end(n_params: int = 20, tolerance: float = 1e-3, seed: int = 0,
                     model_config=None, lidar_branch_kind: str = "regular_conv") -> GradCheckResult:
    """Finite differences of the total loss w.r.t. randomly chosen network parameters."""
    from dataclasses import replace

    from .losses import LossWeights, total_loss
    from .network import Model
    from .scene import SceneSpec, generate_scene

    cfg = replace(model_config or tiny_model_config(), lidar_branch_kind=lidar_branch_kind)
    rng = np.random.default_rng(seed)
    with ad.precision(np.float64):
        samples = [generate_scene(SceneSpec(seed=seed + k)) for k in range(2)]
        h, w = 16, 32
        top, left = samples[0].left_image.shape[0] - h, 40
        win = (slice(top, top + h), slice(left, left + w))
        L = np.stack([s.left_image[win] for s in samples])
        R = np.stack([s.right_image[win] for s in samples])
        D = np.stack([s.sparse_depth.depth[win] for s in samples])
        V = D > 0
        rig = samples[0].rig.cropped(top, left, h, w)
        model = Model.create(cfg, seed)
        weights = LossWeights.for_mode("self_supervised")

        def loss_of(params):
            disp, depth = model(L, R, D, V, rig, training=True, params=params)
            return total_loss(L, R, D, V, disp, depth, weights)[0]

        names = sorted(model.params)
        picks = []
        while len(picks) < n_params:
            name = names[rng.integers(len(names))]
            idx = int(rng.integers(model.params[name].data.size))
            if (name, idx) not in picks:
                picks.append((name, idx))
        loss = loss_of(model.params)
        ad.backward(loss)
        analytic = np.array([model.params[n].grad.reshape(-1)[i] for n, i in picks])
        numeric = np.zeros(n_params)
        with ad.no_grad():
            for k, (name, idx) in enumerate(picks):
                base = model.params[name].data
                step = 1e-6 * max(1.0, abs(float(base.reshape(-1)[idx])))
                vals = []
                for sign in (1, -1):
                    arr = base.copy()
                    arr.reshape(-1)[idx] += sign * step
                    params = dict(model.params)
                    params[name] = ad.Tensor(arr)
                    vals.append(loss_of(params).item())
                numeric[k] = (vals[0] - vals[1]) / (2 * step)
    return GradCheckResult(f"end_to_end[{lidar_branch_kind}]", relative_error(analytic, numeric), tolerance)
