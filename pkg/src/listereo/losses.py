"""Training objectives: sparse depth L1, SSIM+L1 photometric, edge-aware smoothness."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
MODES = ("self_supervised", "supervised")


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 0.5
    gamma: float = 0.01
    lambda1: float = 0.85
    lambda2: float = 0.2

    def __post_init__(self):
        for key in ("alpha", "beta", "gamma", "lambda1", "lambda2"):
            if not getattr(self, key) >= 0:
                raise ContractError(f"loss.{key} must be >= 0, got {getattr(self, key)}")

    @classmethod
    def for_mode(cls, mode: str, **overrides) -> "LossWeights":
        """Mode defaults: smoothness weight 0.01 self-supervised, 0.001 supervised."""
        if mode not in MODES:
            raise ContractError(f"mode must be one of {MODES}, got {mode!r}")
        base = {"gamma": 0.01 if mode == "self_supervised" else 0.001}
        base.update(overrides)
        return cls(**base)


@dataclass(frozen=True)
class LossReport:
    total: float
    depth_term: float
    photometric_term: float
    smooth_term: float


def sparse_depth_loss(pred: Tensor, target: np.ndarray, valid: np.ndarray) -> Tensor:
    """Mean |pred - target| over valid target pixels (0 when none are valid)."""
    target = np.asarray(target)
    if target.ndim == 3:
        target, valid = target[:, None], np.asarray(valid)[:, None]
    if target.shape != pred.shape:
        raise ContractError(f"sparse_depth_loss: target {target.shape} vs pred {pred.shape}")
    t = np.where(valid, target, 0).astype(pred.dtype)
    return ad.masked_mean(ad.abs(ad.sub(pred, Tensor(t))), valid)


def warp_right_to_left(right: Tensor, disp_left: Tensor) -> Tensor:
    """Synthesize the left view by sampling the right image at x - disparity."""
    return ad.sample_horizontal(right, disp_left)


def ssim(a: Tensor, b: Tensor) -> Tensor:
    """Per-pixel SSIM from 3x3 window statistics (valid windows only: H-2 x W-2)."""
    a, b = ad._as_tensor(a), ad._as_tensor(b)
    pool = lambda t: ad.avg_pool2d(t, 3, 1, 0)  # noqa: E731
    mu_a, mu_b = pool(a), pool(b)
    mu_aa, mu_bb, mu_ab = ad.mul(mu_a, mu_a), ad.mul(mu_b, mu_b), ad.mul(mu_a, mu_b)
    var_a = ad.sub(pool(ad.mul(a, a)), mu_aa)
    var_b = ad.sub(pool(ad.mul(b, b)), mu_bb)
    cov = ad.sub(pool(ad.mul(a, b)), mu_ab)
    num = ad.mul(ad.add(ad.scale(mu_ab, 2.0), SSIM_C1), ad.add(ad.scale(cov, 2.0), SSIM_C2))
    den = ad.mul(ad.add(ad.add(mu_aa, mu_bb), SSIM_C1), ad.add(ad.add(var_a, var_b), SSIM_C2))
    return ad.div(num, den)


def photometric_loss(image: Tensor, warped: Tensor, weights: LossWeights = LossWeights()) -> Tensor:
    """Mean of lambda1*clip((1-SSIM)/2, 0, 1) + lambda2*|I - I'| over the SSIM-valid interior."""
    image, warped = ad._as_tensor(image), ad._as_tensor(warped)
    if image.shape != warped.shape:
        raise ContractError(f"photometric_loss: shapes differ {image.shape} vs {warped.shape}")
    h, w = image.shape[2:]
    dissim = ad.clip(ad.scale(ad.sub(1.0, ssim(image, warped)), 0.5), 0.0, 1.0)
    l1 = ad.abs(ad.sub(ad.crop(image, 1, h - 1, 1, w - 1), ad.crop(warped, 1, h - 1, 1, w - 1)))
    per_pixel = ad.add(ad.scale(dissim, weights.lambda1), ad.scale(l1, weights.lambda2))
    return ad.mean(per_pixel)


def _second_diff(t: Tensor, axis: int) -> Tensor:
    h, w = t.shape[2:]
    if axis == 3:
        parts = [ad.crop(t, 0, h, i, w - 2 + i) for i in range(3)]
    else:
        parts = [ad.crop(t, i, h - 2 + i, 0, w) for i in range(3)]
    return ad.add(ad.sub(parts[0], ad.scale(parts[1], 2.0)), parts[2])


def _image_weight(image: np.ndarray, axis: int) -> np.ndarray:
    """exp(-|channel-mean second derivative|) of the image along ``axis``."""
    if axis == 3:
        d2 = image[..., :-2] - 2 * image[..., 1:-1] + image[..., 2:]
    else:
        d2 = image[:, :, :-2] - 2 * image[:, :, 1:-1] + image[:, :, 2:]
    return np.exp(-np.abs(d2.mean(axis=1, keepdims=True)))


def edge_aware_smoothness(image: Tensor, field: Tensor) -> Tensor:
    """Sum over pixels of |d2x D| e^{-|d2x I|} + |d2y D| e^{-|d2y I|}, divided by N*H*W."""
    img = ad._as_tensor(image).data
    n, _, h, w = field.shape
    total = None
    for axis in (3, 2):
        if field.shape[axis] < 3:
            continue
        wgt = Tensor(_image_weight(img, axis).astype(field.dtype))
        term = ad.sum(ad.mul(ad.abs(_second_diff(field, axis)), wgt))
        total = term if total is None else ad.add(total, term)
    if total is None:
        return ad.constant(np.zeros((1, 1, 1, 1)))
    return ad.scale(total, 1.0 / (n * h * w))


def smoothness_loss(image: Tensor, disp: Tensor, depth: Tensor) -> Tensor:
    """Edge-aware smoothness on disparity plus on per-sample mean-normalized depth."""
    depth_norm = ad.div(depth, ad.mean(depth, axes=(1, 2, 3)))
    return ad.add(edge_aware_smoothness(image, disp), edge_aware_smoothness(image, depth_norm))


def total_loss(left: np.ndarray, right: np.ndarray, target_depth: np.ndarray, target_valid: np.ndarray,
               disp: Tensor, depth: Tensor, weights: LossWeights):
    """Weighted objective; returns ``(loss tensor, LossReport)``.

    ``left``/``right`` are (N,H,W,3) images in [0,1].  The depth target is the
    sparse input in self-supervised mode and ground truth in supervised mode;
    the caller picks which.
    """
    dtype = disp.dtype
    lt = Tensor(np.asarray(left).transpose(0, 3, 1, 2).astype(dtype))
    rt = Tensor(np.asarray(right).transpose(0, 3, 1, 2).astype(dtype))
    l_depth = sparse_depth_loss(depth, target_depth, target_valid)
    l_photo = photometric_loss(lt, warp_right_to_left(rt, disp), weights)
    l_smooth = smoothness_loss(lt, disp, depth)
    total = ad.add(ad.add(ad.scale(l_depth, weights.alpha), ad.scale(l_photo, weights.beta)),
                   ad.scale(l_smooth, weights.gamma))
    d, p, s = l_depth.item(), l_photo.item(), l_smooth.item()
    report = LossReport(weights.alpha * d + weights.beta * p + weights.gamma * s, d, p, s)
    return total, report
