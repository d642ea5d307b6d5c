"""UNAEN networks: RCAN-style generators, VGG-style discriminators and the
artifact-subtraction / restoration compositions."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import BatchNorm2d, Conv2d, Module, count_parameters

LEAKY_SLOPE = 0.2
TAIL_INITS = ("he", "zero", "identity", "neutral")

ABLATIONS = (
    "explicit_with_gr",
    "implicit_with_gr",
    "explicit_without_gr",
    "implicit_without_gr",
)
ABLATION_LABELS = {
    "explicit_with_gr": "explicit w/ G_r",
    "implicit_with_gr": "implicit w/ G_r",
    "explicit_without_gr": "explicit w/o G_r",
    "implicit_without_gr": "implicit w/o G_r",
}


class ModeError(RuntimeError):
    """An operation was requested that the model's ablation mode does not have."""


@dataclass
class GeneratorConfig:
    n_groups: int = 5
    n_blocks_per_group: int = 5
    channels: int = 64
    ca_reduction: int = 16
    in_channels: int = 1
    out_channels: int = 1
    mode: str = "explicit"
    # "he": every conv He-normal; "zero": zero tail (output 0); "identity":
    # zero trunk and a tail solved so that tail(head(x)) == x; "neutral": zero
    # for explicit artifact extractors, identity otherwise
    tail_init: str = "neutral"

    def __post_init__(self):
        for name in ("n_groups", "n_blocks_per_group", "channels", "ca_reduction", "in_channels", "out_channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"GeneratorConfig.{name} must be positive")
        if self.channels % self.ca_reduction:
            raise ValueError(
                f"ca_reduction {self.ca_reduction} must divide channels {self.channels}"
            )
        if self.mode not in ("explicit", "implicit"):
            raise ValueError(f"mode must be 'explicit' or 'implicit', got {self.mode!r}")
        if self.tail_init not in TAIL_INITS:
            raise ValueError(f"tail_init must be one of {TAIL_INITS}, got {self.tail_init!r}")


@dataclass
class DiscriminatorConfig:
    base_channels: int = 64
    n_units: int = 8
    in_channels: int = 1

    def __post_init__(self):
        if self.base_channels < 1 or self.in_channels < 1 or self.n_units < 2:
            raise ValueError("DiscriminatorConfig needs positive channels and n_units >= 2")
        if self.n_units % 2:
            raise ValueError(f"n_units must be even, got {self.n_units}")

    @property
    def downsample(self) -> int:
        return 2 ** (self.n_units // 2)


@dataclass
class ModelConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    ablation: str = "explicit_with_gr"
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.generator, dict):
            self.generator = GeneratorConfig(**self.generator)
        if isinstance(self.discriminator, dict):
            self.discriminator = DiscriminatorConfig(**self.discriminator)
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        # the generator mode always follows the ablation
        self.generator.mode = self.ablation.split("_", 1)[0]

    @property
    def with_gr(self) -> bool:
        return self.ablation.endswith("_with_gr")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# ---------------------------------------------------------------------------
# generator
# ---------------------------------------------------------------------------


class ChannelAttention(Module):
    def __init__(self, channels: int, reduction: int, rng):
        self.reduce = Conv2d(channels, channels // reduction, kernel=1, rng=rng)
        self.expand = Conv2d(channels // reduction, channels, kernel=1, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        s = ad.global_avg_pool(x)
        s = ad.leaky_relu(self.reduce(s), LEAKY_SLOPE)
        s = ad.sigmoid(self.expand(s))
        return ad.scale_channels(x, s)


class RCAB(Module):
    """conv - leaky ReLU - conv - channel attention, plus the block skip."""

    def __init__(self, channels: int, reduction: int, rng):
        self.conv1 = Conv2d(channels, channels, rng=rng)
        self.conv2 = Conv2d(channels, channels, rng=rng)
        self.attention = ChannelAttention(channels, reduction, rng)

    def forward(self, x: Tensor) -> Tensor:
        h = self.conv2(ad.leaky_relu(self.conv1(x), LEAKY_SLOPE))
        return x + self.attention(h)


class ResidualGroup(Module):
    def __init__(self, channels: int, n_blocks: int, reduction: int, rng):
        self.blocks = [RCAB(channels, reduction, rng) for _ in range(n_blocks)]
        self.conv = Conv2d(channels, channels, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        h = x
        for block in self.blocks:
            h = block(h)
        return x + self.conv(h)


class Generator(Module):
    """RCAN backbone with its trunk skip, but no input-to-output skip."""

    def __init__(self, cfg: GeneratorConfig, rng, start: Optional[str] = None):
        self.cfg = cfg
        c = cfg.channels
        self.head = Conv2d(cfg.in_channels, c, rng=rng)
        self.groups = [
            ResidualGroup(c, cfg.n_blocks_per_group, cfg.ca_reduction, rng) for _ in range(cfg.n_groups)
        ]
        self.trunk = Conv2d(c, c, rng=rng)
        self.tail = Conv2d(c, cfg.out_channels, rng=rng)
        start = start or cfg.tail_init
        if start == "neutral":
            start = "zero" if cfg.mode == "explicit" else "identity"
        if start == "zero":
            self.tail.weight.data[...] = 0.0
        elif start == "identity":
            self._init_identity()

    def _init_identity(self) -> None:
        """Zero the trunk and fit the tail's centre taps so the head-tail
        path reproduces the input."""
        if self.cfg.in_channels != self.cfg.out_channels:
            raise ValueError("identity init needs in_channels == out_channels")
        self.trunk.weight.data[...] = 0.0
        self.trunk.bias.data[...] = 0.0
        head = self.head.weight.data.astype(np.float64)  # (C, in, 3, 3)
        c, cin = head.shape[:2]
        tail = np.zeros(self.tail.weight.shape)
        for o in range(cin):
            a = head[:, o].reshape(c, -1).T  # taps x channels
            target = np.zeros(a.shape[0])
            target[a.shape[0] // 2] = 1.0
            w, *_ = np.linalg.lstsq(a, target, rcond=None)
            tail[o, :, 1, 1] = w
        self.tail.weight.data[...] = tail

    def forward(self, x: Tensor) -> Tensor:
        f = self.head(x)
        h = f
        for group in self.groups:
            h = group(h)
        return self.tail(f + self.trunk(h))


def build_generator(cfg: GeneratorConfig, seed: int = 0, start: Optional[str] = None) -> Generator:
    """``start`` overrides ``cfg.tail_init`` (used for G_r, which maps images
    to images whatever the ablation mode)."""
    return Generator(cfg, np.random.default_rng(seed), start)


# ---------------------------------------------------------------------------
# discriminator
# ---------------------------------------------------------------------------


class ConvUnit(Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int, norm: bool, rng):
        self.conv = Conv2d(in_ch, out_ch, stride=stride, rng=rng)
        self.norm = BatchNorm2d(out_ch) if norm else None

    def forward(self, x: Tensor) -> Tensor:
        h = self.conv(x)
        if self.norm is not None:
            h = self.norm(h)
        return ad.leaky_relu(h, LEAKY_SLOPE)


class Discriminator(Module):
    """VGG-style stack of conv units ending in a 1-channel score map.

    Unit i has 3x3 conv (stride 2 on odd i), batch norm for i > 0, leaky
    ReLU; channels double after every pair of units.
    """

    def __init__(self, cfg: DiscriminatorConfig, rng):
        self.cfg = cfg
        units: List[ConvUnit] = []
        in_ch = cfg.in_channels
        for i in range(cfg.n_units):
            out_ch = cfg.base_channels * 2 ** (i // 2)
            units.append(ConvUnit(in_ch, out_ch, stride=2 if i % 2 else 1, norm=i > 0, rng=rng))
            in_ch = out_ch
        self.units = units
        self.score = Conv2d(in_ch, 1, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        side = min(x.shape[2:])
        if side < self.cfg.downsample:
            raise ad.DimensionError(
                f"discriminator with {self.cfg.n_units} units needs spatial axes (2, 3) >= "
                f"{self.cfg.downsample}, got {x.shape[2]}x{x.shape[3]}"
            )
        h = x
        for unit in self.units:
            h = unit(h)
        return self.score(h)


def build_discriminator(cfg: DiscriminatorConfig, seed: int = 0) -> Discriminator:
    return Discriminator(cfg, np.random.default_rng(seed))


# ---------------------------------------------------------------------------
# the full model
# ---------------------------------------------------------------------------


class UnaenModel(Module):
    """G_e and D_f, plus G_r and D_b when the ablation keeps the cycle."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        seeds = np.random.SeedSequence(cfg.seed).generate_state(4)
        self.ge = build_generator(cfg.generator, int(seeds[0]))
        self.df = build_discriminator(cfg.discriminator, int(seeds[1]))
        self.gr: Optional[Generator] = None
        self.db: Optional[Discriminator] = None
        if cfg.with_gr:
            gr_start = "identity" if cfg.generator.tail_init == "neutral" else None
            self.gr = build_generator(cfg.generator, int(seeds[2]), gr_start)
            self.db = build_discriminator(cfg.discriminator, int(seeds[3]))

    @property
    def explicit(self) -> bool:
        return self.cfg.generator.mode == "explicit"

    @property
    def with_gr(self) -> bool:
        return self.cfg.with_gr

    def generators(self) -> List[Generator]:
        return [g for g in (self.ge, self.gr) if g is not None]

    def discriminators(self) -> List[Discriminator]:
        return [d for d in (self.df, self.db) if d is not None]

    def generator_parameters(self) -> List[Tensor]:
        return [p for g in self.generators() for p in g.parameters()]

    def discriminator_parameters(self) -> List[Tensor]:
        return [p for d in self.discriminators() for p in d.parameters()]


def extract_artifact(model: UnaenModel, xa: Tensor) -> Tensor:
    """The artifact map the explicit model removes from ``xa``.

    This is G_e(xa) rounded onto the float grid of the subtraction, i.e.
    ``xa - reduce_artifacts(xa)``, so the two always add back to ``xa``
    exactly; it differs from the raw G_e output by at most one ulp of ``xa``.
    """
    if not model.explicit:
        raise ModeError("extract_artifact is undefined for an implicit-mode model")
    return xa - reduce_artifacts(model, xa)


def reduce_artifacts(model: UnaenModel, xa: Tensor, clip: bool = False) -> Tensor:
    """MA-reduced image: xa - G_e(xa) (explicit) or G_e(xa) (implicit).

    ``clip`` bounds the result to [0, 1] and is meant for inference only; it
    returns a detached tensor.
    """
    out = xa - model.ge(xa) if model.explicit else model.ge(xa)
    if clip:
        return Tensor(np.clip(out.data, 0.0, 1.0), dtype=out.dtype)
    return out


def restore(model: UnaenModel, x: Tensor) -> Tensor:
    """Restored corrupted image G_r(x)."""
    if model.gr is None:
        raise ModeError("restore needs a model built with G_r")
    return model.gr(x)


__all__ = [
    "ABLATIONS",
    "ABLATION_LABELS",
    "DiscriminatorConfig",
    "GeneratorConfig",
    "ModeError",
    "ModelConfig",
    "UnaenModel",
    "build_discriminator",
    "build_generator",
    "count_parameters",
    "extract_artifact",
    "reduce_artifacts",
    "restore",
]
