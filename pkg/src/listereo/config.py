"""Plain-text run configuration: ``section.key = value`` lines.

Sections: ``model`` (ModelConfig), ``train`` (TrainConfig), ``loss``
(LossWeights; ``gamma = auto`` picks the mode default), ``scene`` (SceneSpec,
with the camera rig flattened to ``rig_*`` keys, plus ``count``), and
``sweep`` (SweepConfig).  Unknown keys are rejected by name.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields, replace

from .autodiff import ContractError
from .geometry import CameraRig
from .losses import LossWeights
from .network import ModelConfig
from .scene import SceneSpec
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LossSection:
    alpha: float = 1.0
    beta: float = 0.5
    gamma: str = "auto"
    lambda1: float = 0.85
    lambda2: float = 0.2

    def weights(self, mode: str) -> LossWeights:
        kw = {k: getattr(self, k) for k in ("alpha", "beta", "lambda1", "lambda2")}
        if self.gamma != "auto":
            kw["gamma"] = float(self.gamma)
        return LossWeights.for_mode(mode, **kw)


@dataclass(frozen=True)
class SceneSection:
    count: int = 200
    seed: int = 0
    num_planes: int = 2
    num_boxes: int = 1
    depth_near_m: float = 2.0
    depth_far_m: float = 14.0
    slant_deg: float = 35.0
    texture_octaves: int = 2
    texture_contrast: float = 0.6
    texture_cell_px: float = 7.0
    low_texture: bool = False
    lidar_beams: int = 16
    lidar_azimuth_step: int = 2
    rig_focal_px: float = 100.0
    rig_baseline_m: float = 0.56
    rig_cx: float = 63.5
    rig_cy: float = 31.5
    rig_width: int = 128
    rig_height: int = 64
    rig_max_depth_m: float = 100.0

    def rig(self) -> CameraRig:
        return CameraRig(self.rig_focal_px, self.rig_baseline_m, self.rig_cx, self.rig_cy,
                         self.rig_width, self.rig_height, self.rig_max_depth_m)

    def spec(self) -> SceneSpec:
        """Base spec; dataset sample i uses seed ``seed + i``."""
        kw = {f.name: getattr(self, f.name) for f in fields(SceneSpec) if f.name != "rig"}
        return SceneSpec(rig=self.rig(), **kw)


@dataclass(frozen=True)
class SweepSection:
    levels: tuple = (0.01, 0.1, 1.0)
    betas: tuple = (0.0, 0.5)
    holdout: int = 20
    holdout_seed: int = 100000
    eval_seed: int = 7
    variants: tuple = ("listereo",)
    modes: tuple = ("self_supervised",)


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossSection = field(default_factory=LossSection)
    scene: SceneSection = field(default_factory=SceneSection)
    sweep: SweepSection = field(default_factory=SweepSection)

    def loss_weights(self) -> LossWeights:
        return self.loss.weights(self.train.mode)

    def scene_specs(self):
        base = self.scene.spec()
        return [replace(base, seed=self.scene.seed + i) for i in range(self.scene.count)]


SECTIONS = tuple(f.name for f in fields(RunConfig))


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(text: str, default, where: str):
    text = text.strip()
    try:
        if isinstance(default, bool):
            if text.lower() not in ("true", "false"):
                raise ValueError
            return text.lower() == "true"
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = [t.strip() for t in text.split(",") if t.strip()]
            proto = default[0] if default else ""
            return tuple(_coerce(t, proto, where) for t in items)
        return text
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {text!r} as {type(default).__name__}") from None


def parse(text: str, base: RunConfig | None = None) -> RunConfig:
    """Apply ``section.key = value`` lines on top of ``base`` (defaults if None)."""
    base = base or RunConfig()
    updates = {s: {} for s in SECTIONS}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'section.key = value', got {raw!r}")
        lhs, rhs = (s.strip() for s in line.split("=", 1))
        section, _, key = lhs.partition(".")
        if section not in updates:
            raise ConfigError(f"unknown key {lhs} (line {lineno}); sections are {', '.join(SECTIONS)}")
        obj = getattr(base, section)
        names = {f.name for f in fields(obj)}
        if key not in names:
            raise ConfigError(f"unknown key {lhs} (line {lineno})")
        updates[section][key] = _coerce(rhs, getattr(obj, key), lhs)
    kw = {}
    for section in SECTIONS:
        obj = getattr(base, section)
        try:
            kw[section] = replace(obj, **updates[section])
        except (ContractError, ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from None
    cfg = RunConfig(**kw)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    t, s = cfg.train, cfg.scene
    try:
        cfg.loss_weights()
        cfg.scene.spec()
    except (ContractError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    if t.crop_height > s.rig_height or t.crop_width > s.rig_width:
        raise ConfigError("train.crop_height/crop_width exceed the scene image size")
    for key, value in (("train.crop_height", t.crop_height), ("train.crop_width", t.crop_width)):
        if value % cfg.model.feature_stride:
            raise ConfigError(f"{key} must be divisible by model.feature_stride")
    if s.count < 1:
        raise ConfigError("scene.count must be >= 1")
    levels = cfg.sweep.levels
    if any(not 0 < v <= 1 for v in levels) or list(levels) != sorted(set(levels)):
        raise ConfigError("sweep.levels must be strictly increasing values in (0, 1]")
    if any(b < 0 for b in cfg.sweep.betas):
        raise ConfigError("sweep.betas must be >= 0")
    for v in cfg.sweep.variants:
        if v not in ("listereo", "limono"):
            raise ConfigError(f"sweep.variants: unknown variant {v!r}")
    for m in cfg.sweep.modes:
        if m not in ("self_supervised", "supervised"):
            raise ConfigError(f"sweep.modes: unknown mode {m!r}")


def serialize(cfg: RunConfig) -> str:
    lines = []
    for section in SECTIONS:
        obj = getattr(cfg, section)
        for f in fields(obj):
            lines.append(f"{section}.{f.name} = {_format(getattr(obj, f.name))}")
        lines.append("")
    return "\n".join(lines)


def load(path) -> RunConfig:
    with open(path) as fh:
        return parse(fh.read())


def reference() -> str:
    """Every key with its default value, grouped by section."""
    return "# defaults for every configuration key\n" + serialize(RunConfig())


def model_config_from_lines(lines: dict) -> ModelConfig:
    """Rebuild a ModelConfig from ``{key: text}`` pairs (as stored in checkpoints)."""
    base = ModelConfig()
    kw = {}
    for key, text in lines.items():
        if key not in {f.name for f in fields(base)}:
            raise ConfigError(f"unknown key model.{key}")
        kw[key] = _coerce(text, getattr(base, key), f"model.{key}")
    return replace(base, **kw)


def model_config_lines(cfg: ModelConfig) -> dict:
    return {f.name: _format(getattr(cfg, f.name)) for f in dataclasses.fields(cfg)}
