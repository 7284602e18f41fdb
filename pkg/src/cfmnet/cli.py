"""Command-line interface.

Exit codes: 0 success, 1 self-test failure, 2 configuration error,
3 data error, 4 argument domain error.  Noise levels are given on the
0-255 scale.
"""

from __future__ import annotations

import os

# single-threaded BLAS keeps runs bitwise reproducible; set before numpy loads
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__, store
from .errors import CheckpointError, ConfigError, DataError, DomainError, ShapeError

EXIT_OK, EXIT_SELFTEST, EXIT_CONFIG, EXIT_DATA, EXIT_DOMAIN = 0, 1, 2, 3, 4

log = logging.getLogger("cfmnet")


def _sigma(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    return value


def _sigma_list(text: str) -> list[float]:
    return [_sigma(t) for t in text.split(",") if t.strip()]


def _check_sigma(sigma: float) -> float:
    if not np.isfinite(sigma) or sigma < 0:
        raise DomainError(f"sigma must be a non-negative number on the 0-255 scale, got {sigma}")
    return sigma / 255.0


def read_map(path) -> np.ndarray:
    """Noise level map file: .npy of sigma values, or a PGM whose pixel value is sigma; both 0-255 scale."""
    p = Path(path)
    if p.suffix.lower() == ".npy":
        try:
            values = np.load(p)
        except (OSError, ValueError) as exc:
            raise DataError(f"cannot read map {p}: {exc}") from None
        values = np.asarray(values, dtype=np.float64)
        if values.ndim == 3 and values.shape[0] == 1:
            values = values[0]
    else:
        from .imageio import read_image
        img = read_image(p)
        if img.shape[0] != 1:
            raise DataError(f"map {p} must be single-channel")
        values = img[0] * 255.0
    if values.ndim != 2:
        raise DomainError(f"map {p} must be 2-D, got shape {values.shape}")
    if not np.all(np.isfinite(values)) or np.any(values < 0):
        raise DomainError(f"map {p} has negative or non-finite entries")
    return values / 255.0


def write_map(path, values: np.ndarray) -> None:
    p = Path(path)
    scaled = np.asarray(values, dtype=np.float64) * 255.0
    if p.suffix.lower() == ".npy":
        np.save(p, scaled)
    else:
        from .imageio import write_image
        write_image(p, scaled / 255.0)


def _load_corpus(directory, what: str) -> list[np.ndarray]:
    from .evaluation import load_testset
    if not directory:
        raise DataError(f"no {what} directory configured")
    images, _ = load_testset(directory)
    if not images:
        raise DataError(f"{what} directory {directory} has no readable PGM/PPM images")
    return [img for _, img in images]


# -- commands ----------------------------------------------------------------

def cmd_train(args) -> int:
    from . import config as runcfg
    from .network import build
    from .training import train

    cfg = runcfg.load(args.config)
    corpus = _load_corpus(cfg.corpus_dir, "corpus")
    val = _load_corpus(cfg.val_dir, "validation") if cfg.val_dir else []
    net = build(cfg.net_config(), seed=cfg.seed)
    print("epoch,step,lr,loss,val_psnr", flush=True)
    result = train(net, corpus, cfg.train_config(), out_dir=cfg.out_dir, resume=args.resume, val_images=val,
                   max_seconds=args.max_seconds, on_epoch=lambda line: print(line, flush=True))
    print(f"final model: {result.final_path}")
    return EXIT_OK


def cmd_denoise(args) -> int:
    from .imageio import read_image, write_image
    from .metrics import psnr
    from .network import denoise

    if (args.sigma is None) == (args.map is None):
        raise ConfigError("give exactly one of --sigma or --map")
    if args.sigma is not None:
        sigma = _check_sigma(args.sigma)
    net = _load_model(args.model)
    y = read_image(args.image)
    if y.shape[0] != net.config.in_channels:
        raise DataError(f"model expects {net.config.in_channels} channel(s), image has {y.shape[0]}")
    h, w = y.shape[1:]
    if args.sigma is not None:
        nmap = np.full((h, w), sigma)
    else:
        nmap = read_map(args.map)
        if nmap.shape != (h, w):
            raise DomainError(f"map is {nmap.shape[0]}x{nmap.shape[1]} but image is {h}x{w}")
    x_hat = denoise(net, y.astype(net.tail.weight.dtype), nmap)
    write_image(args.output, x_hat)
    if args.reference:
        clean = read_image(args.reference)
        if clean.shape != x_hat.shape:
            raise DataError(f"reference shape {clean.shape} differs from image shape {x_hat.shape}")
        print(f"psnr_noisy={psnr(clean, y):.4f} psnr={psnr(clean, np.clip(x_hat, 0, 1)):.4f}")
    return EXIT_OK


def _load_model(path):
    try:
        return store.load(path)
    except CheckpointError as exc:
        raise DataError(str(exc)) from None


def cmd_eval(args) -> int:
    from .evaluation import evaluate, load_testset

    sigmas = [_check_sigma(s) for s in args.sigmas]
    net = _load_model(args.model)
    images, skipped = load_testset(args.testdir)
    if not images:
        raise DataError(f"test directory {args.testdir} has no readable PGM/PPM images")
    table = evaluate(net, images, sigmas, map_kind=args.map_kind, seed=args.seed)
    table.skipped = skipped
    text = table.to_csv()
    if args.output:
        with open(args.output, "w", newline="\n", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_ablate(args) -> int:
    from . import config as runcfg
    from .ablation import format_report, plan, run_ablation

    cfg = runcfg.load(args.config)
    corpus = _load_corpus(cfg.corpus_dir, "corpus")
    test_dir = cfg.test_dir or cfg.val_dir
    from .evaluation import load_testset
    testset, _ = load_testset(test_dir) if test_dir else ([], [])
    if not testset:
        raise DataError("ablation needs test images (set test_dir or val_dir)")
    runs = plan(cfg.ablate_variants, cfg.ablate_kinds, cfg.ablate_ops, base_kind=cfg.kind,
                base_ops=cfg.num_shifting_ops)
    results = run_ablation(cfg.net_config(), cfg.train_config(), corpus, testset, cfg.eval_sigma / 255.0, runs,
                           cfg.timing_size, cfg.timing_repeats, cfg.seed,
                           on_result=lambda r: print(f"done {r.run.variant}/{r.run.kind}/{r.run.ops}: "
                                                     f"{r.psnr:.2f} dB, {r.seconds:.4f} s", flush=True))
    report = format_report(results, cfg.eval_sigma)
    out = Path(args.output) if args.output else Path(cfg.out_dir) / "ablation.md"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report, encoding="utf-8")
    print(report)
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .autodiff import ops
    from .selftest import run_selftest, summary, to_json

    for fault in args.inject_fault or ():
        if fault not in ("conv2d",):
            raise ConfigError(f"unknown fault {fault!r}")
        ops.FAULTS.add(fault)
    try:
        results = run_selftest()
    finally:
        ops.FAULTS.clear()
    if args.json:
        print(to_json(results))
    else:
        for r in results:
            print(f"{'PASS' if r.passed else 'FAIL'} {r.name} {r.value:.6g} {r.detail}".rstrip())
        s = summary(results)
        print("selftest passed" if s["passed"] else "selftest FAILED: " + ", ".join(s["failed"]))
    return EXIT_OK if all(r.passed for r in results) else EXIT_SELFTEST


def cmd_synth(args) -> int:
    from .synthetic import write_corpus

    paths = write_corpus(args.directory, args.count, args.size, args.channels, args.seed)
    print(f"wrote {len(paths)} images to {args.directory}")
    return EXIT_OK


def cmd_make_map(args) -> int:
    from .noise import peaks_map, uniform_map

    sigma = _check_sigma(args.sigma)
    fn = peaks_map if args.kind == "peaks" else uniform_map
    write_map(args.output, fn(sigma, args.height, args.width).values)
    return EXIT_OK


def cmd_add_noise(args) -> int:
    from .imageio import read_image, write_image
    from .noise import NoiseLevelMap, add_noise, uniform_map

    if (args.sigma is None) == (args.map is None):
        raise ConfigError("give exactly one of --sigma or --map")
    x = read_image(args.image)
    h, w = x.shape[1:]
    if args.sigma is not None:
        nmap = uniform_map(_check_sigma(args.sigma), h, w)
    else:
        values = read_map(args.map)
        if values.shape != (h, w):
            raise DomainError(f"map is {values.shape[0]}x{values.shape[1]} but image is {h}x{w}")
        nmap = NoiseLevelMap(values)
    y, _ = add_noise(x, nmap, args.seed)
    write_image(args.output, y)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cfmnet", description="Noise-map conditioned image denoising.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a key=value config")
    p.add_argument("config")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--max-seconds", type=float, help="wall-clock budget for the main phase")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("denoise", help="denoise one PGM/PPM image")
    p.add_argument("model")
    p.add_argument("image")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--sigma", type=_sigma, help="uniform noise level, 0-255 scale")
    p.add_argument("--map", help="noise level map (.npy or PGM, 0-255 scale)")
    p.add_argument("--reference", help="clean image; prints PSNR when given")
    p.set_defaults(func=cmd_denoise)

    p = sub.add_parser("eval", help="PSNR/SSIM table over a directory of clean images")
    p.add_argument("model")
    p.add_argument("testdir")
    p.add_argument("--sigmas", type=_sigma_list, default=[15.0, 25.0, 50.0], help="comma list, 0-255 scale")
    p.add_argument("--map-kind", choices=("uniform", "peaks"), default="uniform")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output", help="CSV path (default stdout)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and compare ablation variants")
    p.add_argument("config")
    p.add_argument("-o", "--output", help="report path (default <out_dir>/ablation.md)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("selftest", help="run the invariant suite")
    p.add_argument("--inject-fault", action="append", metavar="OP", help="test hook: corrupt OP's backward pass")
    p.add_argument("--json", action="store_true", help="print a machine-readable summary")
    p.set_defaults(func=cmd_selftest)

    p = sub.add_parser("synth", help="write a procedural image corpus")
    p.add_argument("directory")
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--channels", type=int, choices=(1, 3), default=1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("make-map", help="write a uniform or peaks noise level map")
    p.add_argument("kind", choices=("uniform", "peaks"))
    p.add_argument("--sigma", type=_sigma, required=True)
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--width", type=int, required=True)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_make_map)

    p = sub.add_parser("add-noise", help="add Gaussian noise to an image")
    p.add_argument("image")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--sigma", type=_sigma)
    p.add_argument("--map")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_add_noise)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DomainError, ShapeError) as exc:
        print(f"domain error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())
