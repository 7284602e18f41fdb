"""Ablation runs over architecture variant, modulation kind and shifting-op count.

Every selected variant is trained on the same corpus with the same budget,
scored on the same noisy test images and timed on a fixed input.  The
report sets the measured numbers beside full-scale reference values, which
are printed as annotations only.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .autodiff import Tensor, no_grad
from .evaluation import evaluate
from .network import CFMNet, CFMNetConfig, build
from .training import TrainConfig, train

log = logging.getLogger(__name__)

VARIANT_LABELS = {"no_cfm": "w/o CFM", "no_res": "w/o Res", "no_immod": "w/o ImMod", "full": "CFMNet"}
KIND_LABELS = {"shift": "shifting", "scale": "scaling", "affine": "affine"}

# full-scale reference numbers: (running time in s, PSNR, SSIM) at sigma = 50
REFERENCE = {
    ("variant", "no_cfm"): (0.0848, 29.50, 0.8150),
    ("variant", "no_res"): (0.1569, 29.56, 0.8173),
    ("variant", "no_immod"): (0.1487, 29.54, 0.8164),
    ("variant", "full"): (0.1621, 29.64, 0.8195),
    ("kind", "shift"): (0.1621, 29.64, 0.8195),
    ("kind", "scale"): (0.1663, 29.66, 0.8199),
    ("kind", "affine"): (0.1862, 29.66, 0.8200),
    ("ops", 1): (0.1142, 29.54, 0.8162),
    ("ops", 2): (0.1621, 29.64, 0.8195),
    ("ops", 3): (0.2228, 29.64, 0.8196),
    ("ops", 4): (0.2788, 29.65, 0.8198),
}

SECTIONS = (
    ("variant", "Components"),
    ("kind", "Modulation kind"),
    ("ops", "Shifting operations per block"),
)


@dataclass(frozen=True)
class AblationRun:
    """One distinct network to train; ``tags`` lists every table row it fills."""

    variant: str
    kind: str
    ops: int
    tags: tuple


@dataclass
class AblationResult:
    run: AblationRun
    psnr: float
    ssim: float
    psnr_noisy: float
    seconds: float
    params: int
    train_seconds: float


def plan(variants: Sequence[str] = ("full", "no_cfm", "no_res", "no_immod"),
         kinds: Sequence[str] = ("shift", "scale", "affine"),
         ops: Sequence[int] = (1, 2, 3, 4),
         base_kind: str = "shift", base_ops: int = 2) -> list[AblationRun]:
    """Distinct runs covering the three sweeps; shared rows are trained once.

    The component sweep holds kind and op count at the base values, the kind
    sweep uses the full variant, and the op sweep uses the full variant with
    the base kind.
    """
    tags: dict[tuple, list] = {}

    def add(key, tag):
        tags.setdefault(key, []).append(tag)

    for v in variants:
        add((v, base_kind, base_ops), ("variant", v))
    for k in kinds:
        add(("full", k, base_ops), ("kind", k))
    for n in ops:
        add(("full", base_kind, int(n)), ("ops", int(n)))
    return [AblationRun(v, k, n, tuple(t)) for (v, k, n), t in tags.items()]


def _timing_input(net: CFMNet, size: int, seed: int) -> tuple[Tensor, Tensor]:
    rng = np.random.default_rng(seed)
    dtype = net.tail.weight.dtype
    y = Tensor(rng.random((1, net.config.in_channels, size, size)).astype(dtype))
    m = Tensor(np.full((1, 1, size, size), 0.1, dtype=dtype))
    return y, m


def inference_seconds(net: CFMNet, size: int = 64, repeats: int = 5, seed: int = 0) -> float:
    """Best-of-``repeats`` wall time of one eval-mode forward pass on a fixed input."""
    return compare_inference_seconds([net], size, repeats, seed)[0]


def compare_inference_seconds(nets: Sequence[CFMNet], size: int = 64, repeats: int = 5, seed: int = 0) -> list[float]:
    """Best-of-``repeats`` forward time per network, measured in interleaved rounds.

    Each round times every network once, so slow spells on a shared CPU hit
    all of them rather than whichever happened to be measured at the time.
    """
    inputs = [_timing_input(net, size, seed) for net in nets]
    best = [float("inf")] * len(nets)
    with no_grad():
        for net, (y, m) in zip(nets, inputs):
            net.eval()
            net(y, m)  # warm-up
        for _ in range(repeats):
            for i, (net, (y, m)) in enumerate(zip(nets, inputs)):
                t0 = time.perf_counter()
                net(y, m)
                best[i] = min(best[i], time.perf_counter() - t0)
    return best


def run_ablation(base: CFMNetConfig, train_config: TrainConfig, corpus, testset, eval_sigma: float,
                 runs: Sequence[AblationRun], timing_size: int = 64, timing_repeats: int = 5,
                 seed: int = 0, on_result=None) -> list[AblationResult]:
    """Train and score every run, then time all trained networks together."""
    results, nets = [], []
    for run in runs:
        cfg = CFMNetConfig(in_channels=base.in_channels, widths=base.widths,
                           cfm_per_position=base.cfm_per_position, num_shifting_ops=run.ops,
                           kind=run.kind, variant=run.variant)
        net = build(cfg, seed=seed)
        params = net.num_parameters()  # before fusion drops the BN affine terms
        t0 = time.perf_counter()
        trained = train(net, corpus, train_config).net
        train_seconds = time.perf_counter() - t0
        mean = evaluate(trained, testset, [eval_sigma], seed=seed).mean
        results.append(AblationResult(run, mean.psnr, mean.ssim, mean.psnr_noisy, float("nan"), params, train_seconds))
        nets.append(trained)
        log.info("ablation %s/%s/%d: %.3f dB", run.variant, run.kind, run.ops, mean.psnr)
    for res, secs in zip(results, compare_inference_seconds(nets, timing_size, timing_repeats, seed)):
        res.seconds = secs
        if on_result is not None:
            on_result(res)
    return results


def _label(section: str, key) -> str:
    if section == "variant":
        return VARIANT_LABELS[key]
    if section == "kind":
        return KIND_LABELS[key]
    return f"{key} op" + ("s" if key != 1 else "")


def section_rows(results: Sequence[AblationResult], section: str) -> list[tuple]:
    rows = []
    for r in results:
        for sec, key in r.run.tags:
            if sec == section:
                rows.append((key, r))
    return rows


def format_report(results: Sequence[AblationResult], eval_sigma_255: float) -> str:
    lines = [
        f"# Ablation report (sigma = {eval_sigma_255:g})",
        "",
        "Measured columns come from this run at desk scale. The `ref` columns are",
        "full-scale reference figures, shown for orientation only; they are not",
        "reproduced here and are not expected to match.",
    ]
    for section, title in SECTIONS:
        rows = section_rows(results, section)
        if not rows:
            continue
        if section == "ops":
            rows.sort(key=lambda kr: kr[0])
        lines += [
            "",
            f"## {title}",
            "",
            "| setting | params | time (s) | PSNR | SSIM | noisy PSNR | ref time (s) | ref PSNR/SSIM |",
            "|---|---|---|---|---|---|---|---|",
        ]
        for key, r in rows:
            ref = REFERENCE.get((section, key))
            ref_t = f"{ref[0]:.4f}" if ref else "-"
            ref_q = f"{ref[1]:.2f}/{ref[2]:.4f}" if ref else "-"
            lines.append(
                f"| {_label(section, key)} | {r.params} | {r.seconds:.4f} | {r.psnr:.2f} | {r.ssim:.4f} "
                f"| {r.psnr_noisy:.2f} | {ref_t} | {ref_q} |")
        if section == "ops" and len(rows) > 1:
            times = [r.seconds for _, r in rows]
            verdict = "yes" if timing_strictly_increasing(times) else "no"
            lines += ["", f"Inference time strictly increasing with op count: {verdict}"]
    if any(sec == "variant" for r in results for sec, _ in r.run.tags):
        rows = dict(section_rows(results, "variant"))
        if "full" in rows and "no_cfm" in rows:
            delta = rows["full"].psnr - rows["no_cfm"].psnr
            ref = REFERENCE[("variant", "full")][1] - REFERENCE[("variant", "no_cfm")][1]
            lines += ["", f"CFMNet minus w/o CFM: measured {delta:+.2f} dB; reference {ref:+.2f} dB (annotation)"]
    return "\n".join(lines) + "\n"


def timing_strictly_increasing(times: Sequence[float]) -> bool:
    return all(b > a for a, b in zip(times, times[1:]))
