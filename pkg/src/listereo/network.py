"""LiStereo network and its monocular (LiMono) ablation.

Parameters live in a flat ``{dotted_name: Tensor}`` dict so the optimizer can
swap in replacement tensors; batch-norm running statistics are kept apart in
``{name: RunningStats}``.  Layer objects only know their names and shapes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, RunningStats, Tensor
from .geometry import CameraRig, DEFAULT_INVERSION_CAP_M, disparity_to_depth_tensor

LIDAR_BRANCH_KINDS = ("regular_conv", "sparse_conv")
VARIANTS = ("listereo", "limono")


@dataclass(frozen=True)
class ModelConfig:
    feature_stride: int = 4
    max_disparity_px: int = 32
    base_channels: int = 16
    encoder_blocks: tuple = (2, 2)
    feature_channels: int = 32
    fusion_channels: int = 32
    fusion_residual_blocks: int = 6
    upsample_blocks: int = 3
    psp_bins: tuple = (1, 2, 3, 6)
    psp_branch_channels: int = 8
    lidar_branch_kind: str = "regular_conv"
    variant: str = "listereo"
    inversion_cap_m: float = DEFAULT_INVERSION_CAP_M

    def __post_init__(self):
        object.__setattr__(self, "encoder_blocks", tuple(int(b) for b in self.encoder_blocks))
        object.__setattr__(self, "psp_bins", tuple(int(b) for b in self.psp_bins))
        s = self.feature_stride
        if s < 2 or s & (s - 1):
            raise ContractError(f"model.feature_stride must be a power of two >= 2, got {s}")
        if self.max_disparity_px % s:
            raise ContractError("model.max_disparity_px must be divisible by model.feature_stride")
        if self.upsample_blocks != int(math.log2(s)) + 1:
            raise ContractError("model.upsample_blocks must equal log2(feature_stride) + 1")
        if not self.encoder_blocks or min(self.encoder_blocks) < 1:
            raise ContractError("model.encoder_blocks needs at least one stage with >= 1 block")
        if self.fusion_residual_blocks < 1:
            raise ContractError("model.fusion_residual_blocks must be >= 1")
        if self.lidar_branch_kind not in LIDAR_BRANCH_KINDS:
            raise ContractError(f"model.lidar_branch_kind must be one of {LIDAR_BRANCH_KINDS}")
        if self.variant not in VARIANTS:
            raise ContractError(f"model.variant must be one of {VARIANTS}")

    @property
    def max_displacement(self) -> int:
        return self.max_disparity_px // self.feature_stride

    @property
    def output_channels(self) -> int:
        return self.max_disparity_px + 1

    @classmethod
    def paper(cls, **overrides) -> "ModelConfig":
        """Structural constants of the full-size model (stride 8, 192 px, 6 + 4 blocks)."""
        cfg = dict(feature_stride=8, max_disparity_px=192, base_channels=64, encoder_blocks=(3, 4, 6, 3),
                   feature_channels=256, fusion_channels=256, fusion_residual_blocks=6, upsample_blocks=4,
                   psp_bins=(1, 2, 3, 6), psp_branch_channels=64)
        cfg.update(overrides)
        return cls(**cfg)


# ---------------------------------------------------------------------------
# layers

def truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Zero-mean Gaussian resampled until every value lies within two std."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2
    return out * std


class Conv:
    """Plain convolution with bias (output layers)."""

    def __init__(self, name, cin, cout, k, stride=1):
        self.name, self.cin, self.cout, self.k, self.stride = name, cin, cout, k, stride

    def param_shapes(self):
        yield f"{self.name}.weight", (self.cout, self.cin, self.k, self.k), "he"
        yield f"{self.name}.bias", (1, self.cout, 1, 1), "zeros"

    def bn_layers(self):
        return ()

    def __call__(self, P, S, x, training):
        return ad.conv2d(x, P[f"{self.name}.weight"], P[f"{self.name}.bias"], self.stride, self.k // 2)


class ConvBN:
    """Convolution, batch norm, optional leaky ReLU."""

    def __init__(self, name, cin, cout, k, stride=1, act=True):
        self.name, self.cin, self.cout, self.k, self.stride, self.act = name, cin, cout, k, stride, act

    def param_shapes(self):
        yield f"{self.name}.weight", (self.cout, self.cin, self.k, self.k), "he"
        yield f"{self.name}.gamma", (1, self.cout, 1, 1), "ones"
        yield f"{self.name}.beta", (1, self.cout, 1, 1), "zeros"

    def bn_layers(self):
        yield self.name, self.cout

    def __call__(self, P, S, x, training):
        n = self.name
        y = ad.conv2d(x, P[f"{n}.weight"], None, self.stride, self.k // 2)
        y = ad.batch_norm(y, P[f"{n}.gamma"], P[f"{n}.beta"], S[n], training)
        return ad.leaky_relu(y) if self.act else y


class SparseConvAct:
    """Sparsity-invariant convolution + bias, optional leaky ReLU; threads the mask."""

    def __init__(self, name, cin, cout, k, stride=1, act=True):
        self.name, self.cin, self.cout, self.k, self.stride, self.act = name, cin, cout, k, stride, act

    def param_shapes(self):
        yield f"{self.name}.weight", (self.cout, self.cin, self.k, self.k), "he"
        yield f"{self.name}.bias", (1, self.cout, 1, 1), "zeros"

    def bn_layers(self):
        return ()

    def __call__(self, P, S, x, mask, training):
        n = self.name
        y, m = ad.sparse_conv2d(x, mask, P[f"{n}.weight"], P[f"{n}.bias"], self.stride, self.k // 2)
        return (ad.leaky_relu(y) if self.act else y), m


class ResBlock:
    """Three 3x3 layers plus (projected) shortcut, summed before the activation."""

    def __init__(self, name, cin, cout, stride=1, sparse=False):
        self.name, self.sparse = name, sparse
        if sparse:
            self.layers = [SparseConvAct(f"{name}.conv1", cin, cout, 3, stride),
                           SparseConvAct(f"{name}.conv2", cout, cout, 3),
                           SparseConvAct(f"{name}.conv3", cout, cout, 3, act=False)]
            self.short = SparseConvAct(f"{name}.short", cin, cout, 1, stride, act=False) \
                if (cin != cout or stride != 1) else None
        else:
            self.layers = [ConvBN(f"{name}.conv1", cin, cout, 3, stride),
                           ConvBN(f"{name}.conv2", cout, cout, 3),
                           ConvBN(f"{name}.conv3", cout, cout, 3, act=False)]
            self.short = ConvBN(f"{name}.short", cin, cout, 1, stride, act=False) \
                if (cin != cout or stride != 1) else None

    def sublayers(self):
        return self.layers + ([self.short] if self.short else [])

    def __call__(self, P, S, x, training, mask=None):
        if self.sparse:
            y, m = x, mask
            for layer in self.layers:
                y, m = layer(P, S, y, m, training)
            if self.short is not None:
                s, ms = self.short(P, S, x, mask, training)
            else:
                s, ms = x, mask
            return ad.leaky_relu(ad.add(y, s)), np.maximum(m.data, ms.data if isinstance(ms, Tensor) else ms)
        y = x
        for layer in self.layers:
            y = layer(P, S, y, training)
        s = self.short(P, S, x, training) if self.short is not None else x
        return ad.leaky_relu(ad.add(y, s))


class Encoder:
    """Residual encoder to 1/feature_stride; first two kernels are 7 and 5."""

    def __init__(self, name, cfg: ModelConfig, cin: int, sparse: bool = False):
        self.name, self.cfg, self.sparse = name, cfg, sparse
        b = cfg.base_channels
        first = SparseConvAct if sparse else ConvBN
        self.stem = first(f"{name}.stem", cin, b, 7, 2)
        stride2 = 2 if cfg.feature_stride >= 4 else 1
        self.conv2 = first(f"{name}.conv2", b, 2 * b, 5, stride2)
        cur_stride = 2 * stride2
        self.blocks = []
        c = 2 * b
        for i, n_blocks in enumerate(cfg.encoder_blocks):
            cout = 2 * b * 2 ** i
            for j in range(n_blocks):
                s = 2 if (j == 0 and cur_stride < cfg.feature_stride) else 1
                cur_stride *= s
                self.blocks.append(ResBlock(f"{name}.stage{i}.block{j}", c, cout, s, sparse))
                c = cout
        while cur_stride < cfg.feature_stride:
            self.blocks.append(ResBlock(f"{name}.down{cur_stride}", c, c, 2, sparse))
            cur_stride *= 2
        out_cls = SparseConvAct if sparse else Conv
        self.out = out_cls(f"{name}.out", c, cfg.feature_channels, 3, 1, **({"act": False} if sparse else {}))

    def layers(self):
        yield self.stem
        yield self.conv2
        for blk in self.blocks:
            yield from blk.sublayers()
        yield self.out

    def __call__(self, P, S, x, training, mask=None):
        """Returns (features, {stride: skip map})."""
        skips = {}
        if self.sparse:
            y, m = self.stem(P, S, x, mask, training)
            y, m = self.conv2(P, S, y, m, training)
            for blk in self.blocks:
                y, m = blk(P, S, y, training, mask=m)
            y, m = self.out(P, S, y, m, training)
            return y, skips
        y = self.stem(P, S, x, training)
        skips[2] = y
        y = self.conv2(P, S, y, training)
        if self.conv2.stride == 2:
            skips[4] = y
        for blk in self.blocks:
            y = blk(P, S, y, training)
        return self.out(P, S, y, training), skips


class PSP:
    """Pyramid pooling: per bin, adaptive average pool, 1x1 conv layer, resize back, concat."""

    def __init__(self, name, cin, bins, branch_channels):
        self.bins = bins
        self.branches = [ConvBN(f"{name}.bin{b}", cin, branch_channels, 1) for b in bins]
        self.out_channels = cin + len(bins) * branch_channels

    def layers(self):
        return list(self.branches)

    def __call__(self, P, S, x, training):
        h, w = x.shape[2:]
        outs = [x]
        for b, layer in zip(self.bins, self.branches):
            pooled = ad.adaptive_avg_pool2d(x, b, b)
            # batch norm needs >1 value per channel; a 1x1 bin on a batch of 1 skips it
            if training and pooled.shape[0] * b * b == 1:
                y = ad.leaky_relu(ad.conv2d(pooled, P[f"{layer.name}.weight"], None, 1, 0))
            else:
                y = layer(P, S, pooled, training)
            outs.append(ad.bilinear_resize(y, h, w))
        return ad.concat_channels(outs)


class LiStereoNet:
    """Model definition: layer graph + parameter initialisation."""

    def __init__(self, config: ModelConfig):
        self.config = cfg = config
        f = cfg.feature_channels
        self.image_encoder = Encoder("image", cfg, 3)
        self.lidar_encoder = Encoder("lidar", cfg, 1, sparse=cfg.lidar_branch_kind == "sparse_conv")
        self.psp = PSP("psp", f, cfg.psp_bins, cfg.psp_branch_channels)
        self.transform = ConvBN("transform", f, f, 1)
        match_ch = cfg.max_displacement + 1 if cfg.variant == "listereo" else f
        fused_in = match_ch + self.psp.out_channels + f + f
        self.fusion = [ResBlock(f"fusion.block{i}", fused_in if i == 0 else cfg.fusion_channels,
                                cfg.fusion_channels) for i in range(cfg.fusion_residual_blocks)]
        b = cfg.base_channels
        skip_ch = {2: b, 4: 2 * b} if cfg.feature_stride >= 4 else {2: b}
        self.decoder_strides = [cfg.feature_stride // 2 ** i for i in range(cfg.upsample_blocks)]
        self.decoder = []
        c = cfg.fusion_channels
        for i, s in enumerate(self.decoder_strides):
            cout = max(b, cfg.fusion_channels // 2 ** i)
            self.decoder.append(ConvBN(f"decoder.up{i}", c + skip_ch.get(s, 0), cout, 3))
            c = cout
        self.head = Conv("head", c, cfg.output_channels, 3)

    def layers(self):
        yield from self.image_encoder.layers()
        yield from self.lidar_encoder.layers()
        yield from self.psp.layers()
        yield self.transform
        for blk in self.fusion:
            yield from blk.sublayers()
        yield from self.decoder
        yield self.head

    def param_shapes(self):
        for layer in self.layers():
            yield from layer.param_shapes()

    def init_params(self, seed: int = 0) -> dict:
        rng = np.random.default_rng(seed)
        dtype = ad.get_dtype()
        params = {}
        for name, shape, kind in self.param_shapes():
            if kind == "he":
                fan_in = shape[1] * shape[2] * shape[3]
                arr = truncated_normal(rng, shape, math.sqrt(2.0 / fan_in))
            elif kind == "ones":
                arr = np.ones(shape)
            else:
                arr = np.zeros(shape)
            params[name] = ad.parameter(arr.astype(dtype), name=name)
        return params

    def init_stats(self) -> dict:
        stats = {}
        for layer in self.layers():
            for name, c in layer.bn_layers():
                stats[name] = RunningStats(c)
        return stats


def param_count(params: dict) -> int:
    return int(sum(p.data.size for p in params.values()))


# ---------------------------------------------------------------------------
# forward pass

def siamese_extract(net: LiStereoNet, P, S, left: Tensor, right: Tensor | None, training: bool):
    """Shared-weight features for both views; skips come from the left branch only."""
    cfg = net.config
    h, w = left.shape[2:]
    if h % cfg.feature_stride or w % cfg.feature_stride:
        raise ContractError(f"input {h}x{w} not divisible by feature_stride {cfg.feature_stride}")
    if right is None:
        fl, skips = net.image_encoder(P, S, left, training)
        return fl, None, skips
    # one pass over the stacked views keeps batch-norm statistics shared
    n = left.shape[0]
    f, skips = net.image_encoder(P, S, ad.concat_batch([left, right]), training)
    return (ad.slice_batch(f, 0, n), ad.slice_batch(f, n, 2 * n),
            {k: ad.slice_batch(v, 0, n) for k, v in skips.items()})


def lidar_branch(net: LiStereoNet, P, S, lidar_input: Tensor, mask: np.ndarray, training: bool) -> Tensor:
    feats, _ = net.lidar_encoder(P, S, lidar_input, training, mask=Tensor(mask))
    return feats


def fuse_and_decode(net: LiStereoNet, P, S, cost_volume, context, transformed, lidar_feat, skips,
                    out_hw, training: bool) -> Tensor:
    x = ad.concat_channels([cost_volume, context, transformed, lidar_feat])
    for blk in net.fusion:
        x = blk(P, S, x, training)
    h, w = out_hw
    for layer, s in zip(net.decoder, net.decoder_strides):
        x = ad.bilinear_resize(x, h // s, w // s)
        if s in skips:
            if skips[s].shape[2:] != x.shape[2:]:
                raise ContractError(f"skip at stride {s} has size {skips[s].shape[2:]}, expected {x.shape[2:]}")
            x = ad.concat_channels([x, skips[s]])
        x = layer(P, S, x, training)
    return net.head(P, S, x, training)


def soft_argmax(logits: Tensor) -> Tensor:
    """Expected disparity under the per-pixel softmax over D+1 channels."""
    p = ad.softmax_channel(logits)
    levels = np.arange(logits.shape[1], dtype=logits.dtype).reshape(1, -1, 1, 1)
    return ad.sum(ad.mul(p, ad.constant(levels)), axes=(1,))


def prepare_lidar(sparse_depth: np.ndarray, valid: np.ndarray, cap_m: float):
    """Depth-inverted, cap-normalised LIDAR input and its (N,1,H,W) mask."""
    valid = np.asarray(valid, dtype=bool)
    if np.any(sparse_depth[valid] > cap_m):
        raise ContractError(f"LIDAR depth exceeds inversion cap {cap_m} m")
    inverted = np.where(valid, cap_m - sparse_depth, 0.0) / cap_m
    dtype = ad.get_dtype()
    return Tensor(inverted[:, None].astype(dtype)), valid[:, None].astype(dtype)


def forward(net: LiStereoNet, params, stats, left: np.ndarray, right: np.ndarray, sparse_depth: np.ndarray,
            valid: np.ndarray, rig: CameraRig, training: bool):
    """Full pipeline.

    ``left``/``right`` are (N,H,W,3) images in [0,1]; ``sparse_depth``/``valid`` are (N,H,W).
    Returns ``(disparity, depth)`` tensors of shape (N,1,H,W).
    """
    cfg = net.config
    dtype = ad.get_dtype()
    to_t = lambda img: Tensor((np.asarray(img).transpose(0, 3, 1, 2) * 2.0 - 1.0).astype(dtype))  # noqa: E731
    lt = to_t(left)
    rt = to_t(right) if cfg.variant == "listereo" else None
    fl, fr, skips = siamese_extract(net, params, stats, lt, rt, training)
    if cfg.variant == "listereo":
        match = ad.correlation(fl, fr, cfg.max_displacement)
    else:
        match = fl
    context = net.psp(params, stats, fl, training)
    transformed = net.transform(params, stats, fl, training)
    lidar_in, mask = prepare_lidar(np.asarray(sparse_depth, dtype=np.float64), valid, cfg.inversion_cap_m)
    lidar_feat = lidar_branch(net, params, stats, lidar_in, mask, training)
    logits = fuse_and_decode(net, params, stats, match, context, transformed, lidar_feat, skips,
                             lt.shape[2:], training)
    disp = soft_argmax(logits)
    return disp, disparity_to_depth_tensor(disp, rig)


@dataclass
class Model:
    """Bundle of definition, parameters and batch-norm statistics."""

    config: ModelConfig
    params: dict
    stats: dict
    net: LiStereoNet = field(repr=False, default=None)

    @classmethod
    def create(cls, config: ModelConfig, seed: int = 0) -> "Model":
        net = LiStereoNet(config)
        return cls(config, net.init_params(seed), net.init_stats(), net)

    def __post_init__(self):
        if self.net is None:
            self.net = LiStereoNet(self.config)

    def __call__(self, left, right, sparse_depth, valid, rig, training=False, params=None):
        return forward(self.net, self.params if params is None else params, self.stats,
                       left, right, sparse_depth, valid, rig, training)

    def predict(self, left, right, sparse_depth, valid, rig):
        with ad.no_grad():
            disp, depth = self(left, right, sparse_depth, valid, rig, training=False)
        return disp.data[:, 0], depth.data[:, 0]
