"""Depth-completion metrics, sparsity sweeps, loss-weight ablation and reports."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import ContractError
from .geometry import DepthMap, subsample_depth
from .imageio import encode_ppm
from .losses import LossWeights
from .network import Model, ModelConfig
from .training import TrainConfig, train

PAPER_LABEL = "paper-kitti-scale"

# KITTI-scale RMSE (mm) reported by the original work; display only, never compared numerically.
PAPER_TRAIN_TIME_RMSE = {
    "self_supervised": {0.01: 3177.83, 0.1: 2030.36, 0.3: 1587.28, 0.6: 1438.79, 0.8: 1327.68, 1.0: 1277.36},
    "supervised": {0.01: 1371.28, 0.1: 1133.58, 0.3: 1042.62, 0.6: 976.35, 0.8: 940.25, 1.0: 898.77},
}
# (beta, gamma) -> RMSE (mm), alpha = 1
PAPER_LOSS_WEIGHT_RMSE = {
    (0.0, 0.01): 1970.63, (0.2, 0.01): 1522.03, (0.5, 0.01): 1277.36, (0.8, 0.01): 1388.58,
    (1.0, 0.01): 1356.96, (1.5, 0.01): 1344.96, (2.0, 0.01): 1434.89, (0.5, 0.001): 1424.01,
}


class EmptyGroundTruthError(ValueError):
    pass


@dataclass(frozen=True)
class MetricSet:
    rmse_mm: float
    mae_mm: float
    irmse_per_km: float
    imae_per_km: float
    valid_pixel_count: int


def _metrics_from_arrays(pred_m: np.ndarray, gt_m: np.ndarray) -> MetricSet:
    if gt_m.size == 0:
        raise EmptyGroundTruthError("ground truth has no valid pixels")
    err_mm = (pred_m - gt_m) * 1000.0
    # inverse depth in 1/km: 1 / (d / 1000) = 1000 / d
    ierr = 1000.0 / pred_m - 1000.0 / gt_m
    return MetricSet(
        rmse_mm=float(np.sqrt(np.mean(err_mm ** 2))),
        mae_mm=float(np.mean(np.abs(err_mm))),
        irmse_per_km=float(np.sqrt(np.mean(ierr ** 2))),
        imae_per_km=float(np.mean(np.abs(ierr))),
        valid_pixel_count=int(gt_m.size),
    )


def compute_metrics(pred: DepthMap, gt: DepthMap) -> MetricSet:
    """RMSE/MAE in mm and iRMSE/iMAE in 1/km over ground-truth-valid pixels."""
    pred_d = pred.depth if isinstance(pred, DepthMap) else np.asarray(pred, dtype=np.float64)
    if pred_d.shape != gt.shape:
        raise ContractError(f"compute_metrics: pred {pred_d.shape} vs gt {gt.shape}")
    p = pred_d[gt.valid]
    if np.any(p <= 0):
        raise ContractError("compute_metrics: predicted depth must be positive on valid pixels")
    return _metrics_from_arrays(p, gt.depth[gt.valid])


# ---------------------------------------------------------------------------
# model evaluation

def predict_dataset(model: Model, dataset, los: float, eval_seed: int, chunk: int = 5):
    """Dense depth predictions for every sample, LIDAR subsampled at ``los``."""
    preds = []
    for start in range(0, len(dataset), chunk):
        idx = range(start, min(start + chunk, len(dataset)))
        sparse = [subsample_depth(dataset.sparse(i), los, [eval_seed, i]) for i in idx]
        left = np.stack([dataset.left(i) for i in idx])
        right = np.stack([dataset.right(i) for i in idx])
        _, depth = model.predict(left, right, np.stack([s.depth for s in sparse]),
                                 np.stack([s.valid for s in sparse]), dataset.rig(start))
        preds.extend(depth.astype(np.float64))
    return preds


def evaluate_model(model: Model, dataset, los: float = 1.0, eval_seed: int = 0) -> MetricSet:
    """Metrics pooled over all ground-truth pixels of ``dataset``."""
    preds = predict_dataset(model, dataset, los, eval_seed)
    p, g = [], []
    for i, pred in enumerate(preds):
        gt = dataset.gt(i)
        p.append(pred[gt.valid])
        g.append(gt.depth[gt.valid])
    return _metrics_from_arrays(np.concatenate(p), np.concatenate(g))


# ---------------------------------------------------------------------------
# reports

@dataclass(frozen=True)
class SweepRow:
    los: float
    metrics: MetricSet | None
    variant: str
    mode: str
    kind: str
    paper_rmse_mm: float | None = None


@dataclass
class SweepReport:
    rows: list = field(default_factory=list)

    def measured(self, variant=None, mode=None, kind=None):
        out = [r for r in self.rows if r.metrics is not None
               and (variant is None or r.variant == variant)
               and (mode is None or r.mode == mode)
               and (kind is None or r.kind == kind)]
        return sorted(out, key=lambda r: r.los)

    def add_paper_rows(self, mode: str) -> None:
        for los, rmse in PAPER_TRAIN_TIME_RMSE[mode].items():
            self.rows.append(SweepRow(los, None, PAPER_LABEL, mode, "train_time", rmse))

    def to_csv(self) -> str:
        lines = ["los,rmse_mm,mae_mm,irmse,imae,variant,mode"]
        for r in self.rows:
            mode = f"{r.kind}/{r.mode}"
            if r.metrics is None:
                lines.append(f"{r.los:g},{r.paper_rmse_mm:.2f},,,,{r.variant},{mode}")
            else:
                m = r.metrics
                lines.append(f"{r.los:g},{m.rmse_mm:.2f},{m.mae_mm:.2f},{m.irmse_per_km:.4f},"
                             f"{m.imae_per_km:.4f},{r.variant},{mode}")
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        header = ("LoS", "RMSE(mm)", "MAE(mm)", "iRMSE(1/km)", "iMAE(1/km)", "variant", "mode")
        body = []
        for r in self.rows:
            mode = f"{r.kind}/{r.mode}"
            if r.metrics is None:
                body.append((f"{r.los:g}", f"{r.paper_rmse_mm:.2f}", "-", "-", "-", r.variant, mode))
            else:
                m = r.metrics
                body.append((f"{r.los:g}", f"{m.rmse_mm:.2f}", f"{m.mae_mm:.2f}", f"{m.irmse_per_km:.4f}",
                              f"{m.imae_per_km:.4f}", r.variant, mode))
        return _align([header] + body)

    def plot_ppm(self, width: int = 320, height: int = 240) -> bytes:
        series = {}
        for r in self.rows:
            if r.metrics is not None:
                series.setdefault((r.variant, r.mode, r.kind), []).append((r.los, r.metrics.rmse_mm))
        return plot_curves(list(series.values()), width, height)


def _align(rows) -> str:
    widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(row, widths)).rstrip() for row in rows) + "\n"


def flatness(report: SweepReport, variant: str, mode: str, kind: str, lo: float = 0.01, hi: float = 1.0) -> float:
    """RMSE(LoS=lo) / RMSE(LoS=hi); smaller means a flatter error curve."""
    rows = {r.los: r.metrics.rmse_mm for r in report.measured(variant, mode, kind)}
    return rows[lo] / rows[hi]


_SERIES_COLORS = [(214, 39, 40), (31, 119, 180), (44, 160, 44), (255, 127, 14), (148, 103, 189), (0, 0, 0)]


def plot_curves(curves, width: int = 320, height: int = 240, margin: int = 20) -> bytes:
    """Raster error-vs-LoS lines (log x axis, linear y) as binary PPM."""
    img = np.full((height, width, 3), 255, np.uint8)
    img[height - margin, margin:width - margin] = 0
    img[margin:height - margin + 1, margin] = 0
    pts = [p for c in curves for p in c]
    if not pts:
        return encode_ppm(img)
    xs = np.log10([p[0] for p in pts])
    ys = np.array([p[1] for p in pts])
    x0, x1 = xs.min(), xs.max() if xs.max() > xs.min() else xs.min() + 1
    y0, y1 = 0.0, ys.max() * 1.05 if ys.max() > 0 else 1.0

    def to_px(los, val):
        u = margin + (math.log10(los) - x0) / (x1 - x0) * (width - 2 * margin - 1)
        v = height - margin - (val - y0) / (y1 - y0) * (height - 2 * margin - 1)
        return u, v

    for k, curve in enumerate(curves):
        color = _SERIES_COLORS[k % len(_SERIES_COLORS)]
        pix = [to_px(*p) for p in sorted(curve)]
        for (ua, va), (ub, vb) in zip(pix, pix[1:]):
            n = int(max(abs(ub - ua), abs(vb - va))) + 1
            for t in np.linspace(0, 1, n + 1):
                img[int(round(va + t * (vb - va))), int(round(ua + t * (ub - ua)))] = color
        for u, v in pix:
            r, c = int(round(v)), int(round(u))
            img[max(r - 2, 0):r + 3, max(c - 2, 0):c + 3] = color
    return encode_ppm(img)


# ---------------------------------------------------------------------------
# sweeps

def sweep_train_time(levels, train_set, holdout, model_config: ModelConfig, train_config: TrainConfig,
                     weights: LossWeights | None = None, eval_seed: int = 0, variant: str = "listereo",
                     include_paper: bool = True, cache: dict | None = None) -> SweepReport:
    """Train one model per level (train-time LoS = level) and evaluate at the same level.

    ``cache`` maps ``(model_config, train_config, weights)`` to trained models so
    callers can share runs between sweeps.
    """
    levels = _check_levels(levels)
    model_config = replace(model_config, variant=variant)
    report = SweepReport()
    for los in levels:
        cfg = replace(train_config, level_of_sparsity=los)
        model = _trained(train_set, model_config, cfg, weights, cache)
        report.rows.append(SweepRow(los, evaluate_model(model, holdout, los, eval_seed), variant,
                                    train_config.mode, "train_time"))
    if include_paper:
        report.add_paper_rows(train_config.mode)
    return report


def sweep_inference_time(levels, model: Model, holdout, eval_seed: int = 0, mode: str = "self_supervised",
                         variant: str | None = None) -> SweepReport:
    """Evaluate one (full-density) model across input sparsity levels without retraining."""
    levels = _check_levels(levels)
    variant = variant or model.config.variant
    return SweepReport([SweepRow(los, evaluate_model(model, holdout, los, eval_seed), variant, mode,
                                 "inference_time") for los in levels])


@dataclass(frozen=True)
class AblationRow:
    beta: float
    gamma: float
    metrics: MetricSet | None
    label: str
    paper_rmse_mm: float | None = None


def ablate_loss_weights(betas, train_set, holdout, model_config: ModelConfig, train_config: TrainConfig,
                        base_weights: LossWeights | None = None, eval_seed: int = 0,
                        cache: dict | None = None) -> list:
    """Self-supervised training per beta; rows sorted by beta, paper rows appended."""
    train_config = replace(train_config, mode="self_supervised")
    base = base_weights or LossWeights.for_mode("self_supervised")
    rows = []
    for beta in sorted(set(float(b) for b in betas)):
        w = replace(base, beta=beta)
        model = _trained(train_set, model_config, train_config, w, cache)
        rows.append(AblationRow(beta, w.gamma, evaluate_model(model, holdout, train_config.level_of_sparsity,
                                                              eval_seed), "desk"))
    for (beta, gamma), rmse in sorted(PAPER_LOSS_WEIGHT_RMSE.items()):
        rows.append(AblationRow(beta, gamma, None, PAPER_LABEL, rmse))
    return rows


def ablation_csv(rows) -> str:
    lines = ["beta,gamma,rmse_mm,mae_mm,irmse,imae,variant,mode"]
    for r in rows:
        if r.metrics is None:
            lines.append(f"{r.beta:g},{r.gamma:g},{r.paper_rmse_mm:.2f},,,,{r.label},self_supervised")
        else:
            m = r.metrics
            lines.append(f"{r.beta:g},{r.gamma:g},{m.rmse_mm:.2f},{m.mae_mm:.2f},{m.irmse_per_km:.4f},"
                         f"{m.imae_per_km:.4f},{r.label},self_supervised")
    return "\n".join(lines) + "\n"


def ablation_table(rows) -> str:
    header = ("beta", "gamma", "RMSE(mm)", "MAE(mm)", "source")
    body = [(f"{r.beta:g}", f"{r.gamma:g}",
             f"{(r.metrics.rmse_mm if r.metrics else r.paper_rmse_mm):.2f}",
             f"{r.metrics.mae_mm:.2f}" if r.metrics else "-", r.label) for r in rows]
    return _align([header] + body)


def _check_levels(levels):
    levels = [float(v) for v in levels]
    if any(not 0 < v <= 1 for v in levels) or any(b <= a for a, b in zip(levels, levels[1:])):
        raise ContractError("sweep levels must be strictly increasing values in (0, 1]")
    return levels


def _trained(train_set, model_config, train_config, weights, cache):
    weights = weights or LossWeights.for_mode(train_config.mode)
    key = (model_config, train_config, weights)
    if cache is not None and key in cache:
        return cache[key]
    model = train(train_set, model_config, train_config, weights).model
    if cache is not None:
        cache[key] = model
    return model


# ---------------------------------------------------------------------------
# visualisation

# near (warm) -> far (cool)
COLORMAP_ANCHORS = np.array([
    [0.00, 255, 0, 0],
    [0.25, 255, 170, 30],
    [0.50, 150, 220, 100],
    [0.75, 30, 150, 220],
    [1.00, 10, 30, 230],
])


def colormap(t: np.ndarray) -> np.ndarray:
    """Piecewise-linear lookup of ``t`` in [0, 1] to uint8 RGB."""
    t = np.clip(np.asarray(t, dtype=np.float64), 0, 1)
    rgb = [np.interp(t, COLORMAP_ANCHORS[:, 0], COLORMAP_ANCHORS[:, k]) for k in (1, 2, 3)]
    return np.round(np.stack(rgb, axis=-1)).astype(np.uint8)


def colorize(depth: DepthMap, near: float | None = None, far: float | None = None) -> np.ndarray:
    """Depth map to RGB; nearer is warmer, invalid pixels are black."""
    out = np.zeros(depth.shape + (3,), np.uint8)
    if depth.count == 0:
        return out
    vals = depth.depth[depth.valid]
    near = vals.min() if near is None else near
    far = vals.max() if far is None else far
    t = (vals - near) / (far - near) if far > near else np.zeros_like(vals)
    out[depth.valid] = colormap(t)
    return out
