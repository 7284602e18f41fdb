"""Patch sampling, Adam, the learning-rate schedule and the training loop.

Training runs in two phases: a main phase with batch normalisation active,
then BN is folded into the convolutions and a short fine-tuning phase
continues at a lower learning rate.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, NamedTuple, Optional, Sequence

import numpy as np
from scipy import ndimage

from .autodiff import Tensor, mse_loss
from .errors import CheckpointError, ConfigError, DataError, DomainError, NonFiniteError
from .metrics import psnr
from .network import CFMNet, calibrate_batch_norm, denoise, fuse_batch_norm
from .noise import derive_seed, synthesize_noise, uniform_map
from . import store

log = logging.getLogger(__name__)

MAIN, FINETUNE = "main", "finetune"
RESCALE_FACTORS = (0.5, 1.0, 2.0)


@dataclass(frozen=True)
class TrainConfig:
    patch_size: int = 32
    batch_size: int = 8
    patches_per_epoch: int = 2048
    sigma_min: float = 0.0
    sigma_max: float = 75.0 / 255.0
    epochs_main: int = 75
    epochs_finetune: int = 10
    lr_start: float = 1e-4
    lr_end_main: float = 1e-6
    lr_end_ft: float = 1e-7
    flip: bool = True
    rotate: bool = True
    rescale: bool = False
    seed: int = 0
    val_sigma: float = 25.0 / 255.0
    calibration_batches: int = 8

    def __post_init__(self):
        if self.patch_size <= 0 or self.patch_size % 4:
            raise ConfigError(f"patch_size must be a positive multiple of 4, got {self.patch_size}")
        if self.batch_size < 1 or self.patches_per_epoch < 1:
            raise ConfigError("batch_size and patches_per_epoch must be positive")
        if self.sigma_min < 0 or self.sigma_max < self.sigma_min:
            raise ConfigError(f"need 0 <= sigma_min <= sigma_max, got [{self.sigma_min}, {self.sigma_max}]")
        if self.epochs_main < 1 or self.epochs_finetune < 0:
            raise ConfigError("epochs_main must be >= 1 and epochs_finetune >= 0")
        if not self.lr_start > self.lr_end_main > self.lr_end_ft > 0:
            raise ConfigError("learning rates must satisfy lr_start > lr_end_main > lr_end_ft > 0")

    @property
    def steps_per_epoch(self) -> int:
        return max(1, self.patches_per_epoch // self.batch_size)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


def lr_schedule(epoch: int, phase: str, config: TrainConfig) -> float:
    """Geometric interpolation between the phase's start and end rates.

    lr(e) = start * (end / start) ** (e / (E - 1)); the main phase runs
    lr_start -> lr_end_main, fine-tuning lr_end_main -> lr_end_ft.
    """
    if phase == MAIN:
        start, end, epochs = config.lr_start, config.lr_end_main, config.epochs_main
    elif phase == FINETUNE:
        start, end, epochs = config.lr_end_main, config.lr_end_ft, config.epochs_finetune
    else:
        raise ConfigError(f"unknown phase {phase!r}")
    if not 0 <= epoch < max(epochs, 1):
        raise DomainError(f"epoch {epoch} outside the {phase} phase of {epochs} epochs")
    if epochs <= 1:
        return start
    if epoch == epochs - 1:
        return end
    return start * (end / start) ** (epoch / (epochs - 1))


# -- optimiser ---------------------------------------------------------------

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, Optional[np.ndarray]], state: AdamState,
              lr: float) -> None:
    """One bias-corrected Adam update, in place.  Missing gradients count as zero.

    Every gradient is checked before any parameter moves, so a non-finite
    gradient leaves the model untouched.
    """
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class Adam:
    def __init__(self, net: CFMNet, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = OrderedDict(net.named_parameters())
        self.state = AdamState(beta1=beta1, beta2=beta2, eps=eps)

    def step(self, lr: float) -> None:
        adam_step(
            OrderedDict((n, p.data) for n, p in self.params.items()),
            OrderedDict((n, p.grad) for n, p in self.params.items()),
            self.state,
            lr,
        )

    def state_entries(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict()
        for name in self.params:
            if name in self.state.m:
                out[f"adam.m.{name}"] = self.state.m[name]
                out[f"adam.v.{name}"] = self.state.v[name]
        return out

    def load_state(self, entries: Mapping[str, np.ndarray], t: int) -> None:
        self.state.t = t
        for name, p in self.params.items():
            if f"adam.m.{name}" in entries:
                self.state.m[name] = np.array(entries[f"adam.m.{name}"], dtype=p.dtype)
                self.state.v[name] = np.array(entries[f"adam.v.{name}"], dtype=p.dtype)


# -- data --------------------------------------------------------------------

class PatchBatch(NamedTuple):
    y: np.ndarray       # noisy, (B, C, P, P)
    m: np.ndarray       # noise level map, (B, 1, P, P)
    x: np.ndarray       # clean, (B, C, P, P)
    sigma: np.ndarray   # (B,)


def prepare_corpus(images: Sequence[np.ndarray], patch_size: int) -> list[np.ndarray]:
    """Drop (with a warning) images too small to hold one patch."""
    kept = []
    for i, img in enumerate(images):
        if min(img.shape[1:]) < patch_size:
            log.warning("skipping corpus image %d of size %s (smaller than patch %d)", i, img.shape[1:], patch_size)
            continue
        kept.append(np.asarray(img, dtype=np.float64))
    if not kept:
        raise DataError("corpus has no image large enough for one patch")
    return kept


def batch_seed(base: int, *counters: int) -> int:
    seq = np.random.SeedSequence([int(base) & 0xFFFFFFFFFFFFFFFF, *counters])
    return int(seq.generate_state(1, dtype=np.uint64)[0])


def sample_patch_batch(corpus: Sequence[np.ndarray], config: TrainConfig, seed: int,
                       dtype=np.float32) -> PatchBatch:
    """Random crops with optional flips, 90-degree turns and rescaling.

    Each patch gets sigma ~ Uniform[sigma_min, sigma_max] stretched into a
    constant map; its noise is drawn with seed ``seed XOR patch_index``.
    """
    if not corpus:
        raise DataError("empty corpus")
    gen = np.random.Generator(np.random.Philox(seed))
    p = config.patch_size
    ys, ms, xs, sigmas = [], [], [], []
    for i in range(config.batch_size):
        img = corpus[int(gen.integers(len(corpus)))]
        if config.rescale:
            factor = RESCALE_FACTORS[int(gen.integers(len(RESCALE_FACTORS)))]
            if factor != 1.0:
                scaled = ndimage.zoom(img, (1, factor, factor), order=1)
                if min(scaled.shape[1:]) >= p:
                    img = scaled
        h, w = img.shape[1:]
        top = int(gen.integers(h - p + 1))
        left = int(gen.integers(w - p + 1))
        patch = img[:, top:top + p, left:left + p]
        if config.flip and gen.random() < 0.5:
            patch = patch[:, :, ::-1]
        if config.rotate:
            patch = np.rot90(patch, int(gen.integers(4)), axes=(1, 2))
        sigma = float(gen.uniform(config.sigma_min, config.sigma_max)) if config.sigma_max > config.sigma_min \
            else float(config.sigma_min)
        nmap = uniform_map(sigma, p, p)
        noisy = patch + synthesize_noise(nmap, derive_seed(seed, i), patch.shape[0])
        ys.append(noisy)
        ms.append(nmap.values[None])
        xs.append(patch)
        sigmas.append(sigma)
    return PatchBatch(np.stack(ys).astype(dtype), np.stack(ms).astype(dtype), np.stack(xs).astype(dtype),
                      np.array(sigmas))


# -- loop --------------------------------------------------------------------

class Trainer:
    """Owns a network and its optimiser; one call to ``step`` is one Adam update."""

    def __init__(self, net: CFMNet):
        self.net = net
        self.adam = Adam(net)

    def reset_optimizer(self) -> None:
        self.adam = Adam(self.net)

    def loss(self, y: np.ndarray, m: np.ndarray, x: np.ndarray) -> Tensor:
        out = self.net(Tensor(y), Tensor(m))
        return mse_loss(out, Tensor(x))

    def step(self, y: np.ndarray, m: np.ndarray, x: np.ndarray, lr: float) -> float:
        self.net.train()
        self.net.zero_grad()
        loss = self.loss(y, m, x)
        value = loss.item()
        if not np.isfinite(value):
            raise NonFiniteError(f"training loss became {value}")
        loss.backward()
        self.adam.step(lr)
        return value


@dataclass
class TrainResult:
    net: CFMNet
    log: list[str]
    checkpoints: list[Path]
    final_path: Optional[Path] = None
    steps: int = 0


LOG_HEADER = "epoch,step,lr,loss,val_psnr"


def validation_psnr(net: CFMNet, images: Sequence[np.ndarray], sigma: float, seed: int) -> float:
    if not images:
        return float("nan")
    scores = []
    for i, x in enumerate(images):
        nmap = uniform_map(sigma, *x.shape[1:])
        dtype = net.tail.weight.dtype
        y = (x + synthesize_noise(nmap, derive_seed(seed, i), x.shape[0])).astype(dtype)
        scores.append(psnr(x, denoise(net, y, nmap.values)))
    return float(np.mean(scores))


def _calibration_batches(corpus, config: TrainConfig):
    for k in range(config.calibration_batches):
        b = sample_patch_batch(corpus, config, batch_seed(config.seed, 7, k))
        yield b.y, b.m


def train(
    net: CFMNet,
    corpus: Sequence[np.ndarray],
    config: TrainConfig,
    out_dir=None,
    resume=None,
    val_images: Sequence[np.ndarray] = (),
    max_seconds: Optional[float] = None,
    on_epoch: Optional[Callable[[str], None]] = None,
) -> TrainResult:
    """Minimise the residual MSE loss over random patches.

    Main phase (BN active), BN calibration and fusion, then fine-tuning.
    With ``out_dir`` a checkpoint (parameters, BN buffers, Adam moments and
    the epoch cursor) is written after every epoch, plus ``model_final.cfmn``.
    ``resume`` continues from such a checkpoint and, single-threaded,
    reproduces the uninterrupted run bit for bit.  ``max_seconds`` stops the
    main phase early (desk-scale budget) and still fuses.
    """
    corpus = prepare_corpus(corpus, config.patch_size)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    digest = config.digest()
    phases = [(MAIN, config.epochs_main), (FINETUNE, config.epochs_finetune)]
    trainer = Trainer(net)
    start_phase, start_epoch, global_step = 0, 0, 0
    lines = [LOG_HEADER]
    checkpoints: list[Path] = []

    if resume is not None:
        net, meta, extras = store.load(resume, with_extras=True)
        if meta.get("train_digest") != digest:
            raise ConfigError(f"checkpoint {resume} was written with a different training config")
        trainer = Trainer(net)
        trainer.adam.load_state(extras, int(meta["adam_t"]))
        start_phase, start_epoch, global_step = meta["cursor"]
        lines = list(meta.get("log", lines))

    t0 = time.perf_counter()
    out_of_time = False
    epoch_offset = 0
    for phase_index, (phase, n_epochs) in enumerate(phases):
        if phase_index < start_phase:
            epoch_offset += n_epochs
            continue
        if phase == FINETUNE and not trainer.net.fused:
            calibrate_batch_norm(trainer.net, _calibration_batches(corpus, config))
            trainer = Trainer(fuse_batch_norm(trainer.net))
        first = start_epoch if phase_index == start_phase else 0
        for epoch in range(first, n_epochs):
            if out_of_time:
                break
            lr = lr_schedule(epoch, phase, config)
            losses = []
            for s in range(config.steps_per_epoch):
                b = sample_patch_batch(corpus, config, batch_seed(config.seed, phase_index, epoch, s),
                                       dtype=trainer.net.tail.weight.dtype)
                try:
                    losses.append(trainer.step(b.y, b.m, b.x, lr))
                except NonFiniteError:
                    if out is not None:
                        store.save(trainer.net, out / "crash_dump.cfmn", {"cursor": [phase_index, epoch, global_step]})
                    raise
                global_step += 1
                if max_seconds is not None and time.perf_counter() - t0 > max_seconds:
                    out_of_time = True
                    break
            val = validation_psnr(trainer.net, val_images, config.val_sigma, config.seed)
            line = f"{epoch_offset + epoch},{global_step},{lr:.9g},{float(np.mean(losses)):.9g},{val:.9g}"
            lines.append(line)
            if on_epoch is not None:
                on_epoch(line)
            log.info("%s epoch %d: %s", phase, epoch, line)
            if out is not None and not out_of_time:
                path = out / f"ckpt_{phase}_{epoch:03d}.cfmn"
                meta = {
                    "cursor": [phase_index, epoch + 1, global_step],
                    "rng_cursor": {"seed": config.seed, "phase": phase_index, "epoch": epoch + 1},
                    "adam_t": trainer.adam.state.t,
                    "train_digest": digest,
                    "train_config": asdict(config),
                    "log": lines,
                }
                store.save(trainer.net, path, meta, trainer.adam.state_entries())
                checkpoints.append(path)
                (out / "train.log").write_text("\n".join(lines) + "\n")
        epoch_offset += n_epochs

    if not trainer.net.fused:
        calibrate_batch_norm(trainer.net, _calibration_batches(corpus, config))
        trainer = Trainer(fuse_batch_norm(trainer.net))
    final_path = None
    if out is not None:
        final_path = out / "model_final.cfmn"
        store.save(trainer.net, final_path, {"train_digest": digest, "log": lines})
        (out / "train.log").write_text("\n".join(lines) + "\n")
    return TrainResult(trainer.net.eval(), lines, checkpoints, final_path, global_step)
