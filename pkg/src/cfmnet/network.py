"""The two-branch U-Net denoiser with multi-layer RS-CFM conditioning.

Image branch ``f`` and noise-map branch ``g`` share the same U-Net layout:
three scales, 2x2 max pooling down, 2x2 transposed convolutions up and
intra-branch skip concatenations.  RS-CFM blocks sit at every scale of the
encoder, at the bottleneck and at every scale of the decoder; they are the
only place the two branches exchange information.  The output is
``y + R(y, M)``.
"""

from __future__ import annotations

import copy
import enum
from dataclasses import asdict, dataclass
from typing import Iterable, Optional, Union

import numpy as np

from .autodiff import ops
from .autodiff.nn import ConvTranspose2x2, Conv2d, ConvUnit, Module, he_normal
from .autodiff.tensor import Tensor, no_grad
from .cfm import RSCFM, ModulationKind, ResidualBlock, RSCFMConfig
from .errors import ConfigError, DomainError, ShapeError, StructuralError

POSITIONS = ("enc0", "enc1", "mid", "dec1", "dec0")
_POSITION_SCALE = {"enc0": 0, "enc1": 1, "mid": 2, "dec1": 1, "dec0": 0}


class Variant(str, enum.Enum):
    FULL = "full"
    NO_CFM = "no_cfm"        # single branch fed with concat(y, M)
    NO_RES = "no_res"        # RS-CFM without its short skip connections
    NO_IMMOD = "no_immod"    # conditional maps from noise features only


@dataclass(frozen=True)
class CFMNetConfig:
    in_channels: int = 1
    widths: tuple = (64, 128, 256)
    cfm_per_position: int = 2
    num_shifting_ops: int = 2
    kind: ModulationKind = ModulationKind.SHIFT
    variant: Variant = Variant.FULL

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "kind", ModulationKind(self.kind))
        object.__setattr__(self, "variant", Variant(self.variant))
        if self.in_channels not in (1, 3):
            raise ConfigError(f"in_channels must be 1 or 3, got {self.in_channels}")
        if len(self.widths) != 3:
            raise ConfigError(f"widths must list exactly three scales, got {self.widths}")
        if any(w <= 0 for w in self.widths) or not self.widths[0] < self.widths[1] < self.widths[2]:
            raise ConfigError(f"widths must be positive and strictly increasing, got {self.widths}")
        if self.cfm_per_position < 1:
            raise ConfigError("cfm_per_position must be at least 1")
        if not 1 <= self.num_shifting_ops <= 4:
            raise ConfigError(f"num_shifting_ops must be in [1, 4], got {self.num_shifting_ops}")

    def block_config(self, width: int) -> RSCFMConfig:
        return RSCFMConfig(
            channels=width,
            num_shifting_ops=self.num_shifting_ops,
            kind=self.kind,
            use_residual=self.variant is not Variant.NO_RES,
            use_image_features=self.variant is not Variant.NO_IMMOD,
        )

    @property
    def conditioned(self) -> bool:
        return self.variant is not Variant.NO_CFM

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["kind"] = self.kind.value
        d["variant"] = self.variant.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CFMNetConfig":
        return cls(**d)


class _Branch(Module):
    """Backbone layers of one branch (everything except the RS-CFM blocks)."""

    def __init__(self, in_channels: int, widths: tuple, rng: np.random.Generator):
        w0, w1, w2 = widths
        self.head = ConvUnit(in_channels, w0, rng, bn=False)
        self.down1 = ConvUnit(w0, w1, rng)
        self.down2 = ConvUnit(w1, w2, rng)
        self.up1 = ConvTranspose2x2(w2, w1, rng)
        self.merge1 = ConvUnit(2 * w1, w1, rng)
        self.up0 = ConvTranspose2x2(w1, w0, rng)
        self.merge0 = ConvUnit(2 * w0, w0, rng)


class CFMNet(Module):
    def __init__(self, config: CFMNetConfig, rng: np.random.Generator):
        self.config = config
        self.fused = False
        c = config.in_channels
        conditioned = config.conditioned
        self.image = _Branch(c if conditioned else c + 1, config.widths, rng)
        self.noise = _Branch(1, config.widths, rng) if conditioned else None
        for pos in POSITIONS:
            width = config.widths[_POSITION_SCALE[pos]]
            if conditioned:
                blocks = [RSCFM(config.block_config(width), rng) for _ in range(config.cfm_per_position)]
            else:
                blocks = [ResidualBlock(width, config.num_shifting_ops, rng) for _ in range(config.cfm_per_position)]
            setattr(self, pos, blocks)
        self.tail = Conv2d(config.widths[0], c, rng)
        # start as the identity map x_hat = y; the He draw above still
        # consumes the stream so every other layer is unaffected
        self.tail.weight.data[:] = 0.0

    # -- forward -------------------------------------------------------------
    def _stage(self, pos: str, f: Tensor, g: Optional[Tensor]):
        for block in getattr(self, pos):
            if g is None:
                f = block(f)
            else:
                f, g = block(f, g)
        return f, g

    def residual(self, y: Tensor, m: Tensor) -> Tensor:
        """R(y, M): the predicted correction added to the noisy input."""
        n, c, h, w = y.shape
        if c != self.config.in_channels:
            raise ShapeError(f"expected {self.config.in_channels} image channels, got {c}")
        if h % 4 or w % 4:
            raise ShapeError(f"height and width must be divisible by 4, got {h}x{w}")
        if m.shape != (n, 1, h, w):
            raise ShapeError(f"noise level map must have shape {(n, 1, h, w)}, got {m.shape}")

        img, nse = self.image, self.noise
        if nse is None:
            f, g = img.head(ops.concat_channels(y, m)), None
        else:
            f, g = img.head(y), nse.head(m)

        def both(fn_f, fn_g, f, g):
            return fn_f(f), (None if g is None else fn_g(g))

        f, g = self._stage("enc0", f, g)
        skip0 = (f, g)
        f, g = both(ops.max_pool2x2, ops.max_pool2x2, f, g)
        f, g = both(img.down1, nse and nse.down1, f, g)
        f, g = self._stage("enc1", f, g)
        skip1 = (f, g)
        f, g = both(ops.max_pool2x2, ops.max_pool2x2, f, g)
        f, g = both(img.down2, nse and nse.down2, f, g)
        f, g = self._stage("mid", f, g)

        f, g = both(lambda t: ops.relu(img.up1(t)), lambda t: ops.relu(nse.up1(t)), f, g)
        f = img.merge1(ops.concat_channels(f, skip1[0]))
        if g is not None:
            g = nse.merge1(ops.concat_channels(g, skip1[1]))
        f, g = self._stage("dec1", f, g)

        f, g = both(lambda t: ops.relu(img.up0(t)), lambda t: ops.relu(nse.up0(t)), f, g)
        f = img.merge0(ops.concat_channels(f, skip0[0]))
        if g is not None:
            g = nse.merge0(ops.concat_channels(g, skip0[1]))
        f, _ = self._stage("dec0", f, g)
        return self.tail(f)

    def __call__(self, y: Tensor, m: Tensor) -> Tensor:
        return y + self.residual(y, m)

    forward = __call__

    # -- structure -----------------------------------------------------------
    def conv_units(self) -> Iterable[ConvUnit]:
        return [m for m in self.modules() if isinstance(m, ConvUnit)]

    def receptive_radius(self) -> int:
        """Chebyshev radius (input pixels) beyond which inputs cannot reach an output pixel.

        Walks the layer inventory: a 3x3 conv at scale s widens the field by
        2**s on each side, pooling from scale s and the transposed conv into
        scale s widen it by at most 2**s.  Conservative, not tight.
        """
        cfg = self.config

        def block_radius(rf: int, rg: int, a: int) -> tuple[int, int]:
            if not cfg.conditioned:
                return rf + 2 * a * cfg.num_shifting_ops, rg
            for i in range(cfg.num_shifting_ops):
                if i == 0:
                    src = max(rf, rg) if cfg.variant is not Variant.NO_IMMOD else rg
                    g_tilde = src + 3 * a
                else:
                    g_tilde = rg + 2 * a
                s = g_tilde + a
                f_tilde = rf + 2 * a
                rf, rg = max(rf, f_tilde, s), max(rg, g_tilde)
            return rf, rg

        def stage(rf, rg, scale):
            for _ in range(cfg.cfm_per_position):
                rf, rg = block_radius(rf, rg, 2 ** scale)
            return rf, rg

        rf = rg = 1  # head conv
        rf, rg = stage(rf, rg, 0)
        s0 = (rf, rg)
        rf, rg = rf + 1 + 2, rg + 1 + 2            # pool from scale 0, conv at scale 1
        rf, rg = stage(rf, rg, 1)
        s1 = (rf, rg)
        rf, rg = rf + 2 + 4, rg + 2 + 4            # pool from scale 1, conv at scale 2
        rf, rg = stage(rf, rg, 2)
        rf, rg = rf + 2, rg + 2                    # transposed conv into scale 1
        rf, rg = max(rf, s1[0]) + 2, max(rg, s1[1]) + 2
        rf, rg = stage(rf, rg, 1)
        rf, rg = rf + 1, rg + 1                    # transposed conv into scale 0
        rf, rg = max(rf, s0[0]) + 1, max(rg, s0[1]) + 1
        rf, rg = stage(rf, rg, 0)
        return rf + 1                              # tail conv


def build(config: CFMNetConfig, seed: int = 0) -> CFMNet:
    """Construct a network with He-initialised convs; same seed, same parameters."""
    rng = np.random.default_rng(seed)
    return CFMNet(config, rng)


def randomize_tail(net: CFMNet, seed: int = 0) -> CFMNet:
    """Give the tail conv a fresh He draw, so R depends on every layer (used by checks)."""
    w = net.tail.weight
    fan_in = int(np.prod(w.shape[1:]))
    w.data = he_normal(np.random.default_rng(seed), w.shape, fan_in).astype(w.dtype)
    return net


def forward(net: CFMNet, y: Tensor, m: Tensor) -> Tensor:
    return net(y, m)


def fuse_batch_norm(net: CFMNet) -> CFMNet:
    """Copy of ``net`` with every conv+BN pair folded into one conv (eval semantics)."""
    units = [u for u in net.conv_units() if u.bn is not None]
    if not units:
        raise StructuralError("network has no batch-norm layers left to fuse")
    fused = copy.deepcopy(net)
    for unit in fused.conv_units():
        if unit.bn is not None:
            unit.fuse()
    fused.fused = True
    return fused.eval()


def strip_batch_norm(net: CFMNet) -> CFMNet:
    """Drop BN layers without folding; gives the structure of a fused network."""
    for unit in net.conv_units():
        unit.bn = None
    net.fused = True
    return net


def calibrate_batch_norm(net: CFMNet, batches: Iterable[tuple[np.ndarray, np.ndarray]]) -> None:
    """Reset BN running statistics to the exact average of batch statistics.

    Runs the network in training mode without recording over ``batches`` of
    ``(y, M)`` arrays.  Short desk-scale runs leave exponential running
    averages far from converged; this makes eval mode (and fusion) faithful.
    """
    bns = [u.bn for u in net.conv_units() if u.bn is not None]
    saved = [(bn.momentum, bn.num_batches) for bn in bns]
    for bn in bns:
        bn.running_mean[:] = 0.0
        bn.running_var[:] = 0.0
        bn.momentum = None
        bn.num_batches = 0
    was_training = net.training
    net.train()
    with no_grad():
        for y, m in batches:
            net(Tensor(y), Tensor(m))
    for bn, (momentum, count) in zip(bns, saved):
        bn.momentum = momentum
        bn.num_batches = count
    net.train(was_training)


@dataclass
class EquivalenceReport:
    max_abs_deviation: float
    channel_shift: np.ndarray
    passed: bool


def first_layer_equivalence_check(weight: np.ndarray, bias: np.ndarray, y: np.ndarray,
                                  noise_map: Union[float, np.ndarray], tolerance: float = 1e-5
                                  ) -> EquivalenceReport:
    """Compare a first conv over ``concat(y, M)`` with a conv over ``y`` plus a per-channel constant.

    For a uniform map of level sigma the extra input channel contributes
    ``sigma * sum(w[k, C])`` at every valid position, so the two agree.
    A spatially variant map breaks the identity (the constant uses the map mean).
    """
    y = np.asarray(y)
    n, c, h, w = y.shape
    if weight.shape[1] != c + 1:
        raise ShapeError(f"weight must have {c + 1} input channels, got {weight.shape[1]}")
    if np.isscalar(noise_map):
        m = np.full((n, 1, h, w), float(noise_map), dtype=y.dtype)
    else:
        m = np.asarray(noise_map, dtype=y.dtype).reshape(n, 1, h, w)
    sigma = float(m.mean())
    wt, bt = Tensor(weight), Tensor(bias)
    with no_grad():
        joint = ops.conv2d(ops.concat_channels(Tensor(y), Tensor(m)), wt, bt, "valid").data
        image_only = ops.conv2d(Tensor(y), Tensor(weight[:, :c]), None, "valid").data
    shift = sigma * weight[:, c].sum(axis=(1, 2)) + bias
    split = image_only + shift[None, :, None, None]
    dev = float(np.abs(joint - split).max())
    return EquivalenceReport(dev, shift, dev < tolerance)


def _pad_amount(size: int) -> int:
    return (-size) % 4


def denoise(net: CFMNet, y: np.ndarray, noise_map: np.ndarray) -> np.ndarray:
    """Denoise one (C, H, W) image given an (H, W) noise level map.

    Inputs whose sides are not multiples of 4 are reflect-padded and the
    result cropped back, so any size is accepted.
    """
    y = np.asarray(y)
    noise_map = np.asarray(noise_map)
    if y.ndim != 3:
        raise ShapeError(f"expected a (C, H, W) image, got {y.shape}")
    c, h, w = y.shape
    if noise_map.shape != (h, w):
        raise ShapeError(f"noise level map {noise_map.shape} does not match image {h}x{w}")
    if np.any(noise_map < 0):
        raise DomainError("noise level map has negative entries")
    ph, pw = _pad_amount(h), _pad_amount(w)
    mode = "reflect" if h > ph and w > pw else "edge"
    yp = np.pad(y, ((0, 0), (0, ph), (0, pw)), mode=mode)
    mp = np.pad(noise_map, ((0, ph), (0, pw)), mode=mode)
    dtype = net.tail.weight.dtype
    was_training = net.training
    net.eval()
    try:
        with no_grad():
            out = net(Tensor(yp[None].astype(dtype)), Tensor(mp[None, None].astype(dtype))).data[0]
    finally:
        net.train(was_training)
    return out[:, :h, :w]
