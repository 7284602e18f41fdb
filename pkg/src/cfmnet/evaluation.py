"""Denoising benchmarks: per-image and mean PSNR/SSIM over a test set."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError
from .imageio import list_images, read_image
from .metrics import psnr, ssim
from .network import CFMNet, denoise
from .noise import PEAKS, UNIFORM, derive_seed, peaks_map, synthesize_noise, uniform_map

log = logging.getLogger(__name__)

CSV_HEADER = ("image", "sigma", "psnr_noisy", "psnr", "ssim")


@dataclass(frozen=True)
class EvalRow:
    image: str
    sigma: float        # 0-255 scale
    psnr_noisy: float
    psnr: float
    ssim: float


@dataclass
class EvalTable:
    rows: list[EvalRow]
    skipped: list[str]

    @property
    def mean(self) -> EvalRow:
        if not self.rows:
            return EvalRow("mean", float("nan"), float("nan"), float("nan"), float("nan"))
        return EvalRow(
            "mean",
            float("nan"),
            float(np.mean([r.psnr_noisy for r in self.rows])),
            float(np.mean([r.psnr for r in self.rows])),
            float(np.mean([r.ssim for r in self.rows])),
        )

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for r in self.rows:
            writer.writerow([r.image, _fmt(r.sigma), _fmt(r.psnr_noisy), _fmt(r.psnr), _fmt(r.ssim)])
        m = self.mean
        writer.writerow(["mean", "", _fmt(m.psnr_noisy), _fmt(m.psnr), _fmt(m.ssim)])
        for name in self.skipped:
            writer.writerow(["skipped", name, "", "", ""])
        return buf.getvalue()


def _fmt(v: float) -> str:
    return "%.9g" % v


def parse_csv(text: str) -> EvalTable:
    """Inverse of :meth:`EvalTable.to_csv` for the data and trailer rows."""
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if tuple(header) != CSV_HEADER:
        raise DataError(f"unexpected CSV header {header}")
    rows, skipped = [], []
    for rec in reader:
        if rec[0] == "mean":
            continue
        if rec[0] == "skipped":
            skipped.append(rec[1])
            continue
        rows.append(EvalRow(rec[0], *(float(v) for v in rec[1:])))
    return EvalTable(rows, skipped)


def make_map(kind: str, sigma: float, height: int, width: int):
    if kind == UNIFORM:
        return uniform_map(sigma, height, width)
    if kind == PEAKS:
        return peaks_map(sigma, height, width)
    raise ConfigError(f"unknown map kind {kind!r}; expected {UNIFORM!r} or {PEAKS!r}")


def evaluate(net: CFMNet, testset: Sequence[tuple[str, np.ndarray]], sigmas: Sequence[float],
             map_kind: str = UNIFORM, seed: int = 0) -> EvalTable:
    """Add noise to every (name, image) pair at each sigma (in [0, 1] units) and denoise.

    The noise for pair k (image-major order) uses seed ``seed XOR k``.  The
    noisy input is rounded to the network's precision once and that same
    array is scored as the baseline, so a zero residual reproduces the
    baseline exactly.
    """
    dtype = net.tail.weight.dtype
    rows = []
    k = 0
    for name, x in testset:
        c, h, w = x.shape
        for sigma in sigmas:
            nmap = make_map(map_kind, sigma, h, w)
            y = (x + synthesize_noise(nmap, derive_seed(seed, k), c)).astype(dtype)
            k += 1
            x_hat = denoise(net, y, nmap.values)
            rows.append(EvalRow(name, float(sigma) * 255.0, psnr(x, y), psnr(x, x_hat), ssim(x, x_hat)))
    return EvalTable(rows, [])


def load_testset(directory) -> tuple[list[tuple[str, np.ndarray]], list[str]]:
    """Read every PGM/PPM in ``directory``; unreadable files are skipped and listed."""
    images, skipped = [], []
    for path in list_images(directory):
        try:
            images.append((path.name, read_image(path)))
        except DataError as exc:
            log.warning("skipping %s: %s", path, exc)
            skipped.append(path.name)
    return images, skipped
