"""Invariant suite behind ``cfmnet selftest``.

Each check is deterministic (fixed seeds) and returns a name, a verdict and
one headline number, so repeated runs give identical reports.  Timings are
deliberately left out of the report for that reason.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Callable, Iterable, Optional

import numpy as np
from scipy import stats

from .autodiff import Tensor, grad_check, high_precision, no_grad, ops, sample_coordinates
from .network import CFMNetConfig, build, first_layer_equivalence_check, fuse_batch_norm, randomize_tail
from .noise import peaks, peaks_map, synthesize_noise, uniform_map

GRAD_TOL = 1e-4
TINY = CFMNetConfig(in_channels=1, widths=(8, 16, 32))


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    detail: str = ""


def _projected(out: Tensor, rng: np.random.Generator) -> Tensor:
    # random linear functional of the output keeps every coordinate in play
    r = Tensor(rng.standard_normal(out.shape) / np.sqrt(out.data.size))
    return ops.sum_all(ops.mul(out, r))


def _away_from_zero(rng, shape, gap=0.05):
    x = rng.standard_normal(shape)
    return np.sign(x) * (np.abs(x) + gap)


def _grad_result(name: str, fn: Callable[[], Tensor], inputs, coords=None, step=1e-5) -> CheckResult:
    report = grad_check(fn, inputs, step=step, tolerance=GRAD_TOL, coords=coords)
    return CheckResult(name, report.passed, report.max_rel_error, report.message)


def primitive_grad_checks() -> list[CheckResult]:
    """Central-difference checks of every differentiable primitive, in float64."""
    out = []
    with high_precision():
        rng = np.random.default_rng(11)
        a = Tensor(rng.standard_normal((2, 3, 4, 4)), requires_grad=True)
        b = Tensor(rng.standard_normal((1, 3, 1, 1)), requires_grad=True)
        out.append(_grad_result("grad_check/add", lambda: _projected(ops.add(a, b), np.random.default_rng(1)), [a, b]))
        out.append(_grad_result("grad_check/mul", lambda: _projected(ops.mul(a, b), np.random.default_rng(2)), [a, b]))

        x = Tensor(_away_from_zero(rng, (2, 3, 5, 5)), requires_grad=True)
        out.append(_grad_result("grad_check/relu", lambda: _projected(ops.relu(x), np.random.default_rng(3)), [x]))

        p = Tensor(rng.standard_normal((2, 2, 3, 3)), requires_grad=True)
        q = Tensor(rng.standard_normal((2, 3, 3, 3)), requires_grad=True)
        out.append(_grad_result("grad_check/concat_channels",
                                lambda: _projected(ops.concat_channels(p, q), np.random.default_rng(4)), [p, q]))
        out.append(_grad_result("grad_check/slice_channels",
                                lambda: _projected(ops.slice_channels(q, 1, 3), np.random.default_rng(5)), [q]))

        cx = Tensor(rng.standard_normal((2, 3, 6, 7)), requires_grad=True)
        cw = Tensor(rng.standard_normal((4, 3, 3, 3)) * 0.3, requires_grad=True)
        cb = Tensor(rng.standard_normal(4), requires_grad=True)

        def conv_both():
            same = _projected(ops.conv2d(cx, cw, cb, "same"), np.random.default_rng(6))
            valid = _projected(ops.conv2d(cx, cw, cb, "valid"), np.random.default_rng(7))
            return ops.add(same, valid)

        out.append(_grad_result("grad_check/conv2d", conv_both, [cx, cw, cb]))

        tx = Tensor(rng.standard_normal((2, 4, 3, 3)), requires_grad=True)
        tw = Tensor(rng.standard_normal((3, 4, 2, 2)) * 0.3, requires_grad=True)
        tb = Tensor(rng.standard_normal(3), requires_grad=True)
        out.append(_grad_result("grad_check/conv_transpose2x2",
                                lambda: _projected(ops.conv_transpose2x2(tx, tw, tb), np.random.default_rng(8)),
                                [tx, tw, tb]))

        # distinct values spaced well apart so no window is near a tie
        mp = Tensor(rng.permutation(2 * 3 * 6 * 6).reshape(2, 3, 6, 6) * 0.01, requires_grad=True)
        out.append(_grad_result("grad_check/max_pool2x2",
                                lambda: _projected(ops.max_pool2x2(mp), np.random.default_rng(9)), [mp]))

        bx = Tensor(rng.standard_normal((3, 4, 3, 3)) * 2 + 1, requires_grad=True)
        gamma = Tensor(rng.standard_normal(4), requires_grad=True)
        beta = Tensor(rng.standard_normal(4), requires_grad=True)

        def bn_train():
            rm, rv = np.zeros(4), np.ones(4)
            return _projected(ops.batch_norm(bx, gamma, beta, rm, rv, training=True), np.random.default_rng(10))

        def bn_eval():
            rm, rv = np.linspace(-1, 1, 4), np.linspace(0.5, 2, 4)
            return _projected(ops.batch_norm(bx, gamma, beta, rm, rv, training=False), np.random.default_rng(12))

        out.append(_grad_result("grad_check/batch_norm", bn_train, [bx, gamma, beta]))
        out.append(_grad_result("grad_check/batch_norm_eval", bn_eval, [bx, gamma, beta]))

        pred = Tensor(rng.standard_normal((3, 2, 4, 4)), requires_grad=True)
        target = Tensor(rng.standard_normal((3, 2, 4, 4)), requires_grad=True)
        out.append(_grad_result("grad_check/mse_loss", lambda: ops.mse_loss(pred, target), [pred, target]))
    return out


def network_grad_check(coordinates: int = 100, size: int = 16, seed: int = 0) -> CheckResult:
    """Gradient check of the whole tiny network (BN in training mode) on sampled parameters."""
    with high_precision():
        net = randomize_tail(build(TINY, seed=seed), seed).astype(np.float64)
        net.train()
        rng = np.random.default_rng(seed + 1)
        y = Tensor(rng.random((2, 1, size, size)))
        m = Tensor(np.full((2, 1, size, size), 0.2))
        r = Tensor(rng.standard_normal((2, 1, size, size)) / (2 * size * size))

        def f():
            return ops.sum_all(ops.mul(net.residual(y, m), r))

        params = net.parameters()
        coords = sample_coordinates(params, coordinates, rng)
        return _grad_result("grad_check/cfmnet", f, params, coords)


def equivalence_checks(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    with high_precision():
        w = rng.standard_normal((8, 2, 3, 3))
        b = rng.standard_normal(8)
        y = rng.random((2, 1, 20, 20))
        same = first_layer_equivalence_check(w, b, y, 25.0 / 255.0)
        variant = np.broadcast_to(peaks_map(50.0 / 255.0, 20, 20).values, (2, 20, 20))
        control = first_layer_equivalence_check(w, b, y, variant)
    return [
        CheckResult("equivalence/uniform_map", same.max_abs_deviation < 1e-5, same.max_abs_deviation),
        CheckResult("equivalence/variant_control", control.max_abs_deviation > 1e-3, control.max_abs_deviation),
    ]


def _random_state(net, rng):
    # non-trivial BN statistics and affine parameters
    for unit in net.conv_units():
        if unit.bn is not None:
            ch = unit.bn.gamma.shape[0]
            unit.bn.running_mean[:] = rng.standard_normal(ch) * 0.1
            unit.bn.running_var[:] = rng.uniform(0.5, 2.0, ch)
            unit.bn.gamma.data[:] = rng.uniform(0.5, 1.5, ch)
            unit.bn.beta.data[:] = rng.standard_normal(ch) * 0.1


def bn_fusion_check(inputs: int = 10, size: int = 16, seed: int = 0) -> CheckResult:
    """Fused and unfused outputs agree; run in float64 so an untrained network's
    large activations measure the algebra rather than float32 rounding."""
    rng = np.random.default_rng(seed)
    with high_precision():
        net = randomize_tail(build(TINY, seed=seed), seed).astype(np.float64)
        _random_state(net, rng)
        net.eval()
        fused = fuse_batch_norm(net)
        worst = 0.0
        with no_grad():
            for _ in range(inputs):
                y = Tensor(rng.random((1, 1, size, size)))
                m = Tensor(np.full((1, 1, size, size), rng.uniform(0, 75 / 255)))
                worst = max(worst, float(np.abs(net(y, m).data - fused(y, m).data).max()))
    return CheckResult("bn_fusion", worst < 1e-4, worst)


def residual_identity_check(seed: int = 0) -> CheckResult:
    net = build(TINY, seed=seed)
    net.tail.weight.data[:] = 0
    net.tail.bias.data[:] = 0
    rng = np.random.default_rng(seed)
    y = rng.random((2, 1, 16, 16)).astype(np.float32)
    m = np.full((2, 1, 16, 16), 0.1, dtype=np.float32)
    net.eval()
    with no_grad():
        out = net(Tensor(y), Tensor(m)).data
    identical = out.dtype == y.dtype and np.array_equal(out.view(np.uint32), y.view(np.uint32))
    return CheckResult("residual_identity", bool(identical), float(np.abs(out - y).max()))


def locality_check(probes: int = 10, seed: int = 0) -> CheckResult:
    """Perturb every pixel beyond the analytic radius of a probe; the probe must not move."""
    net = randomize_tail(build(TINY, seed=seed), seed)
    radius = net.receptive_radius()
    size = 2 * radius + 48
    size += (-size) % 4
    rng = np.random.default_rng(seed)
    y = rng.random((1, 1, size, size)).astype(np.float32)
    m = np.full((1, 1, size, size), 0.1, dtype=np.float32)
    net.eval()
    with no_grad():
        base = net(Tensor(y), Tensor(m)).data
        worst = 0.0
        for _ in range(probes):
            py, px = (int(v) for v in rng.integers(0, size, 2))
            rows = np.abs(np.arange(size) - py)[:, None]
            cols = np.abs(np.arange(size) - px)[None, :]
            outside = (rows > radius) | (cols > radius)
            yp = y.copy()
            yp[0, 0][outside] = rng.random(int(outside.sum())).astype(np.float32)
            mp = m.copy()
            mp[0, 0][outside] = 0.3
            moved = net(Tensor(yp), Tensor(mp)).data
            worst = max(worst, float(np.abs(moved[0, :, py, px] - base[0, :, py, px]).max()))
        # positive control: the probe does react to its own neighbourhood
        near = y.copy()
        near[0, 0, py, px] += 0.5
        reach = float(np.abs(net(Tensor(near), Tensor(m)).data[0, :, py, px] - base[0, :, py, px]).max())
    return CheckResult("locality", worst == 0.0 and reach > 0.0, worst,
                       f"radius {radius}, image {size}x{size}, control {reach:.3g}")


def noise_checks(seed: int = 0) -> list[CheckResult]:
    sigma = 25.0 / 255.0
    n = synthesize_noise(uniform_map(sigma, 256, 256), seed).ravel()
    std_err = abs(n.std() / sigma - 1.0)
    skew = float(stats.skew(n))
    kurt = float(stats.kurtosis(n))
    pm = peaks_map(50.0 / 255.0, 96, 80).values
    peak_ok = pm.min() == 0.0 and pm.max() == 50.0 / 255.0
    f00 = abs(float(peaks(0.0, 0.0)) - 3.0 * np.exp(-1.0))
    return [
        CheckResult("noise/std", bool(std_err < 0.02), float(std_err)),
        CheckResult("noise/skew", abs(skew) < 0.05, skew),
        CheckResult("noise/excess_kurtosis", abs(kurt) < 0.1, kurt),
        CheckResult("noise/peaks_extremes", bool(peak_ok), float(pm.max() - 50.0 / 255.0)),
        CheckResult("noise/peaks_origin", bool(f00 < 1e-9), f00),
    ]


def _guard(name: str, fn: Callable[[], Iterable[CheckResult] | CheckResult]) -> list[CheckResult]:
    try:
        res = fn()
    except Exception as exc:  # a crashing check is a failed check
        return [CheckResult(name, False, float("nan"), f"{type(exc).__name__}: {exc}")]
    return [res] if isinstance(res, CheckResult) else list(res)


def run_selftest() -> list[CheckResult]:
    results: list[CheckResult] = []
    results += _guard("grad_check/primitives", primitive_grad_checks)
    results += _guard("grad_check/cfmnet", network_grad_check)
    results += _guard("equivalence", equivalence_checks)
    results += _guard("bn_fusion", bn_fusion_check)
    results += _guard("residual_identity", residual_identity_check)
    results += _guard("locality", locality_check)
    results += _guard("noise", noise_checks)
    return results


def summary(results: list[CheckResult]) -> dict:
    failed = [r.name for r in results if not r.passed]
    return {
        "passed": not failed,
        "failed": failed,
        "checks": [{**asdict(r), "value": _json_number(r.value)} for r in results],
    }


def _json_number(v: float):
    if np.isfinite(v):
        return float("%.6g" % v)
    return str(v)


def to_json(results: list[CheckResult]) -> str:
    return json.dumps(summary(results), indent=2, sort_keys=True)
