"""Configuration dataclasses with validated, strict dict round-trips.

Unknown keys are rejected by name so a config file typo cannot silently fall
back to a default.  parse -> serialize -> parse is a fixed point.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

VARIANTS = ("global-only", "global-local", "+pn", "+pac", "full")


class ConfigError(ValueError):
    pass


def _strict_kwargs(cls, d: dict, where: str) -> dict:
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {sorted(unknown)}")
    return dict(d)


@dataclass
class LossWeights:
    """Objective weights: per-pathway/final pixel and perceptual terms plus
    the total-loss balance (pixel, perceptual, adversarial)."""

    alpha1: float = 0.1
    beta1: float = 0.5
    alpha2: float = 0.1
    beta2: float = 0.5
    lambda1: float = 1.0
    lambda2: float = 0.01
    lambda3: float = 0.01

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigError(f"loss weight {f.name} must be nonnegative")

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "LossWeights":
        return LossWeights(**_strict_kwargs(LossWeights, d, "loss_weights"))


@dataclass
class GlsgnConfig:
    """Model geometry and hyperparameters.

    ``geometry`` holds one (scale divisor, grid rows, grid cols) triple per
    local pathway, finest first; ``global_geometry`` describes the global
    pathway.  Defaults are desk scale: 64x64 inputs, a 4x4 full-resolution
    grid, a 2x2 half-resolution grid and intact quarter-resolution pathways.
    """

    input_h: int = 64
    input_w: int = 64
    local_pathways: int = 3
    geometry: list[tuple[int, int, int]] = field(
        default_factory=lambda: [(1, 4, 4), (2, 2, 2), (4, 1, 1)])
    global_geometry: tuple[int, int, int] = (4, 1, 1)
    base_channels: int = 16
    encoder_depth: int = 3
    residual_blocks: int = 2
    pac_sigma1: float = 0.5
    pac_sigma2: float = 0.5
    pn_epsilon: float = 1e-6
    loss_weights: LossWeights = field(default_factory=LossWeights)
    variant: str = "full"
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        self.geometry = [tuple(g) for g in self.geometry]
        self.global_geometry = tuple(self.global_geometry)
        self.validate()

    # -- capability switches per ablation variant ------------------------------

    @property
    def uses_local(self) -> bool:
        return self.variant != "global-only"

    @property
    def uses_pn(self) -> bool:
        return self.variant in ("+pn", "+pac", "full")

    @property
    def uses_pac(self) -> bool:
        return self.variant in ("+pac", "full")

    @property
    def uses_lp(self) -> bool:
        return self.variant == "full"

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def pathway_geometries(self) -> list[tuple[str, tuple[int, int, int]]]:
        """(name, (divisor, rows, cols)) in computation order: global first."""
        out = [("sg", self.global_geometry)]
        if self.uses_local:
            out += [(f"s{i + 1}", g) for i, g in enumerate(self.geometry)]
        return out

    def patch_size(self, geom: tuple[int, int, int]) -> tuple[int, int]:
        div, rows, cols = geom
        return self.input_h // div // rows, self.input_w // div // cols

    def validate(self) -> None:
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.input_h % 16 or self.input_w % 16:
            raise ConfigError(
                f"input size {self.input_h}x{self.input_w} must be divisible by 16")
        if self.local_pathways < 1:
            raise ConfigError("local_pathways must be >= 1")
        if len(self.geometry) != self.local_pathways:
            raise ConfigError(
                f"geometry needs {self.local_pathways} local entries, got {len(self.geometry)}")
        if self.encoder_depth < 1:
            raise ConfigError("encoder_depth must be >= 1")
        if self.residual_blocks < 1:
            raise ConfigError("residual_blocks must be >= 1")
        if self.base_channels < 1:
            raise ConfigError("base_channels must be >= 1")
        if not 0 <= self.pac_sigma1 <= 1 or not 0 <= self.pac_sigma2 <= 1:
            raise ConfigError("pac sigma weights must lie in [0, 1]")
        if self.pn_epsilon <= 0:
            raise ConfigError("pn_epsilon must be positive")

        if self.geometry[0][0] != 1:
            raise ConfigError("first local pathway must run at full resolution (divisor 1)")
        divisors = [g[0] for g in self.geometry]
        if any(b < a for a, b in zip(divisors, divisors[1:])):
            raise ConfigError(f"local pathway divisors must be nondecreasing, got {divisors}")

        unit = max(2, 1 << self.encoder_depth)
        for name, (div, rows, cols) in [("global", self.global_geometry)] + [
                (f"local {i + 1}", g) for i, g in enumerate(self.geometry)]:
            if div < 1 or rows < 1 or cols < 1:
                raise ConfigError(f"{name} geometry entries must be positive")
            if self.input_h % (div * rows) or self.input_w % (div * cols):
                raise ConfigError(
                    f"{name} pathway: input {self.input_h}x{self.input_w} not divisible "
                    f"by divisor {div} and grid {rows}x{cols}")
            ph, pw = self.input_h // div // rows, self.input_w // div // cols
            if ph % unit or pw % unit:
                raise ConfigError(
                    f"{name} pathway: patch {ph}x{pw} must be divisible by {unit} "
                    f"(encoder depth {self.encoder_depth})")

        if self.uses_lp:
            if self.local_pathways != 3:
                raise ConfigError("pyramid synthesis requires exactly 3 local pathways")
            d1, d2, d3 = (g[0] for g in self.geometry)
            dg = self.global_geometry[0]
            if (d1, d2) != (1, 2) or d3 != 4 or dg != 4:
                raise ConfigError(
                    "pyramid synthesis requires local divisors (1, 2, 4) and global "
                    f"divisor 4, got locals {(d1, d2, d3)} and global {dg}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["geometry"] = [list(g) for g in self.geometry]
        d["global_geometry"] = list(self.global_geometry)
        d["loss_weights"] = self.loss_weights.to_dict()
        return d

    @staticmethod
    def from_dict(d: dict) -> "GlsgnConfig":
        kw = _strict_kwargs(GlsgnConfig, d, "model")
        if "loss_weights" in kw and isinstance(kw["loss_weights"], dict):
            kw["loss_weights"] = LossWeights.from_dict(kw["loss_weights"])
        return GlsgnConfig(**kw)


@dataclass
class TrainRun:
    """One training run: schedule, crop geometry, optimizer settings, seed.

    Desk-scale defaults (64x64 crops, batch 2, 500 steps); full-scale values
    (batch 4, 960x540-style crops, epoch-long schedules) remain reachable
    through these fields.
    """

    steps: int = 500
    batch_size: int = 2
    crop_h: int = 64
    crop_w: int = 64
    log_every: int = 10
    seed: int = 0
    lr: float = 2e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    perceptual_seed: int = 7
    perceptual_weights_path: str | None = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.crop_h % 16 or self.crop_w % 16:
            raise ConfigError(
                f"crop {self.crop_h}x{self.crop_w} must be divisible by 16")
        if self.log_every < 1:
            raise ConfigError("log_every must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if not 0 <= self.adam_beta1 < 1 or not 0 <= self.adam_beta2 < 1:
            raise ConfigError("adam betas must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "TrainRun":
        return TrainRun(**_strict_kwargs(TrainRun, d, "train"))
