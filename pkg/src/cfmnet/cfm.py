"""Residual shifting-based conditional feature modulation (RS-CFM) blocks.

A block carries two feature streams: ``f`` from the noisy image and ``g``
from the noise level map.  Each shifting operation produces an image-path
update ``f_tilde`` and a conditional map from ``g`` (optionally fused with
``f``), then adds both to ``f`` residually while ``g`` is updated by its own
residual stack.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import ops
from .autodiff.nn import Conv2d, ConvUnit, Module
from .autodiff.tensor import Tensor
from .errors import ConfigError, ShapeError


class ModulationKind(str, enum.Enum):
    SHIFT = "shift"     # f + s
    SCALE = "scale"     # gamma * f
    AFFINE = "affine"   # gamma * f + s


@dataclass(frozen=True)
class RSCFMConfig:
    channels: int
    num_shifting_ops: int = 2
    kind: ModulationKind = ModulationKind.SHIFT
    use_residual: bool = True
    use_image_features: bool = True

    def __post_init__(self):
        object.__setattr__(self, "kind", ModulationKind(self.kind))
        if self.channels <= 0:
            raise ConfigError(f"channels must be positive, got {self.channels}")
        if not 1 <= self.num_shifting_ops <= 4:
            raise ConfigError(f"num_shifting_ops must be in [1, 4], got {self.num_shifting_ops}")


class ShiftingOp(Module):
    """One residual shifting operation.

    The first op of a block fuses ``concat(f, g)`` with three convs; later
    ops run two convs over ``g`` alone.  The map-producing conv has neither
    BN nor ReLU.
    """

    def __init__(self, cfg: RSCFMConfig, first: bool, rng: np.random.Generator):
        c = cfg.channels
        self.first = first
        self.kind = cfg.kind
        self.use_residual = cfg.use_residual
        self.concat_image = first and cfg.use_image_features
        n_fuse = 3 if first else 2
        fuse_in = 2 * c if self.concat_image else c
        self.fuse = [ConvUnit(fuse_in if i == 0 else c, c, rng) for i in range(n_fuse)]
        map_channels = 2 * c if cfg.kind is ModulationKind.AFFINE else c
        self.map_conv = Conv2d(c, map_channels, rng)
        if cfg.kind in (ModulationKind.SCALE, ModulationKind.AFFINE):
            # gamma channels start at exactly 1 everywhere
            self.map_conv.weight.data[:c] = 0.0
            self.map_conv.bias.data[:c] = 1.0
        self.image = [ConvUnit(c, c, rng) for _ in range(2)]
        self.last_map: Optional[np.ndarray] = None

    def __call__(self, f: Tensor, g: Tensor) -> tuple[Tensor, Tensor]:
        g_in = ops.concat_channels(f, g) if self.concat_image else g
        g_tilde = g_in
        for unit in self.fuse:
            g_tilde = unit(g_tilde)
        cond = self.map_conv(g_tilde)
        self.last_map = cond.data
        f_tilde = f
        for unit in self.image:
            f_tilde = unit(f_tilde)

        if self.kind is ModulationKind.SHIFT:
            update = f_tilde + cond
        elif self.kind is ModulationKind.SCALE:
            update = cond * f_tilde
        else:
            c = f.shape[1]
            gamma = ops.slice_channels(cond, 0, c)
            shift = ops.slice_channels(cond, c, 2 * c)
            update = gamma * f_tilde + shift

        if self.use_residual:
            return f + update, g + g_tilde
        return update, g_tilde


class RSCFM(Module):
    def __init__(self, cfg: RSCFMConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.ops = [ShiftingOp(cfg, i == 0, rng) for i in range(cfg.num_shifting_ops)]

    def __call__(self, f: Tensor, g: Tensor) -> tuple[Tensor, Tensor]:
        if f.shape != g.shape:
            raise ShapeError(f"RS-CFM needs f and g of identical shape, got {f.shape} and {g.shape}")
        for op in self.ops:
            f, g = op(f, g)
        return f, g


def rs_cfm_forward(f: Tensor, g: Tensor, block: RSCFM) -> tuple[Tensor, Tensor]:
    return block(f, g)


class ResidualBlock(Module):
    """Image-path-only stand-in for an RS-CFM block (the no-CFM ablation):
    each op computes ``f + f_tilde`` with no conditional map."""

    def __init__(self, channels: int, num_ops: int, rng: np.random.Generator):
        self.num_ops = num_ops
        self.units = [ConvUnit(channels, channels, rng) for _ in range(2 * num_ops)]

    def __call__(self, f: Tensor) -> Tensor:
        for i in range(0, len(self.units), 2):
            update = self.units[i + 1](self.units[i](f))
            f = f + update
        return f


def first_shift_map(block: RSCFM, f: Tensor, g: Tensor) -> np.ndarray:
    """The conditional map produced by the first shifting op of ``block``."""
    op = block.ops[0]
    op(f, g)
    return op.last_map


def shifting_map_is_spatially_variant(f: Tensor, g_uniform: Tensor, block: RSCFM, margin: Optional[int] = None,
                                      threshold: float = 1e-12) -> bool:
    """True iff the first conditional map varies over space away from the border.

    ``margin`` defaults to the number of 3x3 convs between the block input
    and the map (zero padding only disturbs that many border pixels).
    """
    s = first_shift_map(block, f, g_uniform)
    if margin is None:
        margin = len(block.ops[0].fuse) + 1
    return interior_spatial_std(s, margin) > threshold


def interior_spatial_std(s: np.ndarray, margin: int) -> float:
    """Largest per-(sample, channel) spatial std after trimming ``margin`` border pixels."""
    h, w = s.shape[2:]
    if margin:
        s = s[:, :, margin:h - margin, margin:w - margin]
    return float(s.std(axis=(2, 3)).max())
