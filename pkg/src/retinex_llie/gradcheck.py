"""Finite-difference verification of every differentiable op and loss.

Each registered case builds a scalar function of a few small random
tensors. The analytic gradient (autograd, at the requested precision) is
compared with a central-difference estimate that is always taken in
float64, using ``||g - g_fd|| / (||g_fd|| + 1e-8)``.
"""

from __future__ import annotations

import time
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np
import torch

from . import autodiff as ad
from . import losses, nets

TOLERANCE = {32: 1e-3, 64: 1e-5}
FD_STEP = 1e-6

REGISTRY: "OrderedDict[str, callable]" = OrderedDict()


def register(name):
    def deco(fn):
        REGISTRY[name] = fn
        return fn
    return deco


def _unit(rng, shape):
    return rng.uniform(0.05, 0.95, size=shape)


def _signed(rng, shape):
    # keeps values away from the kinks of relu/abs
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.1, 1.0, size=shape)


def _projected(op):
    """Turn a tensor-valued op into a scalar via a fixed random linear functional."""
    cache = {}

    def f(*xs):
        out = op(*xs)
        outs = out if isinstance(out, tuple) else (out,)
        total = 0.0
        for i, o in enumerate(outs):
            key = (i, tuple(o.shape))
            if key not in cache:
                g = np.random.default_rng(1000 + i).normal(size=o.shape)
                cache[key] = g
            total = total + (o * torch.as_tensor(cache[key], dtype=o.dtype)).sum()
        return total
    return f


@register("conv2d")
def _(rng):
    return _projected(lambda x, w, b: ad.conv2d(x, w, b, stride=1, padding=1)), [
        rng.normal(size=(1, 2, 5, 5)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=(3,))]


@register("conv2d_stride2")
def _(rng):
    return _projected(lambda x, w, b: ad.conv2d(x, w, b, stride=2, padding=1)), [
        rng.normal(size=(2, 3, 8, 8)), rng.normal(size=(2, 3, 3, 3)), rng.normal(size=(2,))]


@register("upsample_nearest")
def _(rng):
    return _projected(lambda x: ad.upsample_nearest(x, 2)), [rng.normal(size=(2, 3, 4, 4))]


for _name in ("add", "sub", "mul"):
    def _make(name=_name):
        op = getattr(ad, name)
        return lambda rng: (_projected(op), [rng.normal(size=(2, 3, 8, 8)), rng.normal(size=(2, 3, 8, 8))])
    register(_name)(_make())

register("relu")(lambda rng: (_projected(ad.relu), [_signed(rng, (2, 3, 8, 8))]))
register("sigmoid")(lambda rng: (_projected(ad.sigmoid), [rng.normal(scale=3.0, size=(2, 3, 8, 8))]))
register("exp")(lambda rng: (_projected(ad.exp), [rng.normal(size=(2, 3, 8, 8))]))
register("abs")(lambda rng: (_projected(ad.abs), [_signed(rng, (2, 3, 8, 8))]))
register("square")(lambda rng: (_projected(ad.square), [rng.normal(size=(2, 3, 8, 8))]))
register("concat_channels")(lambda rng: (_projected(ad.concat_channels),
                                         [rng.normal(size=(2, 3, 8, 8)), rng.normal(size=(2, 1, 8, 8))]))
register("mean")(lambda rng: (lambda x: ad.mean(x) * 3.0, [rng.normal(size=(2, 3, 8, 8))]))
register("sum")(lambda rng: (lambda x: ad.sum(x * x), [rng.normal(size=(2, 3, 8, 8))]))
register("spatial_gradients")(lambda rng: (_projected(ad.spatial_gradients), [rng.normal(size=(2, 3, 8, 8))]))
register("reconstruct")(lambda rng: (_projected(nets.reconstruct), [_unit(rng, (2, 3, 8, 8)), _unit(rng, (2, 1, 8, 8))]))


@register("two_layer_net")
def _(rng):
    def f(x, w1, b1, w2, b2):
        h = ad.relu(ad.conv2d(x, w1, b1, padding=1))
        return ad.mean(ad.square(ad.conv2d(h, w2, b2, padding=1)))
    return f, [rng.normal(size=(1, 3, 6, 6)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=(4,)),
               rng.normal(size=(2, 4, 3, 3)), rng.normal(size=(2,))]


def _tiny_unet(cfg, seed):
    return OrderedDict((k, v.double()) for k, v in nets.init_unet(cfg, seed).items())


@register("decom_forward")
def _(rng):
    params = _tiny_unet(nets.decom_config(base_channels=4, depth=2), 0)

    def f(x):
        R, L = nets.decom_forward({k: v.to(x.dtype) for k, v in params.items()}, x)
        return _projected(lambda a, b: (a, b))(R, L)
    return f, [_unit(rng, (1, 3, 8, 8))]


@register("enhance_forward")
def _(rng):
    params = _tiny_unet(nets.enhance_config(base_channels=4, depth=2), 1)

    def f(r, l):
        return _projected(lambda a: a)(nets.enhance_forward({k: v.to(r.dtype) for k, v in params.items()}, r, l))
    return f, [_unit(rng, (1, 3, 8, 8)), _unit(rng, (1, 1, 8, 8))]


@register("ncbc_forward")
def _(rng):
    params = OrderedDict((k, v.double()) for k, v in nets.init_ncbc(nets.NCBCConfig(feat_channels=4, hidden_channels=4), 2).items())

    def f(x):
        return _projected(lambda a: a)(nets.ncbc_forward({k: v.to(x.dtype) for k, v in params.items()}, x))
    return f, [_unit(rng, (1, 3, 8, 8))]


def _rl(rng, b=2):
    """R_low, R_high, L_low, L_high, S_low, S_high."""
    return [_unit(rng, (b, 3, 8, 8)), _unit(rng, (b, 3, 8, 8)), _unit(rng, (b, 1, 8, 8)),
            _unit(rng, (b, 1, 8, 8)), _unit(rng, (b, 3, 8, 8)), _unit(rng, (b, 3, 8, 8))]


register("loss_reconstruction_decom")(lambda rng: (losses.loss_reconstruction_decom, _rl(rng)))
register("loss_equal")(lambda rng: (losses.loss_equal, _rl(rng)[:2]))
register("loss_smooth")(lambda rng: (
    lambda Ll, Lh, Rl, Rh: losses.loss_smooth(Ll, Lh, Rl, Rh),
    [_unit(rng, (2, 1, 8, 8)), _unit(rng, (2, 1, 8, 8)), 0.1 * _unit(rng, (2, 3, 8, 8)), 0.1 * _unit(rng, (2, 3, 8, 8))]))
register("loss_decom_total")(lambda rng: (losses.loss_decom_total, _rl(rng)))
register("loss_tv")(lambda rng: (losses.loss_tv, [rng.normal(size=(2, 3, 8, 8))]))
register("loss_mse")(lambda rng: (losses.loss_mse, _rl(rng)[:2]))
register("loss_noise")(lambda rng: (losses.loss_noise, [rng.normal(size=(2, 3, 8, 8))] + _rl(rng)[:2]))
register("loss_color")(lambda rng: (losses.loss_color, [rng.normal(size=(2, 3, 8, 8)), rng.normal(size=(2, 3, 8, 8))]))
register("loss_ncbc_total")(lambda rng: (losses.loss_ncbc_total,
                                         [rng.normal(size=(2, 3, 8, 8)), rng.normal(size=(2, 3, 8, 8))] + _rl(rng)[:2]))
register("loss_rc_enhance")(lambda rng: (losses.loss_rc_enhance,
                                         [_unit(rng, (2, 3, 8, 8)), _unit(rng, (2, 1, 8, 8)), _unit(rng, (2, 3, 8, 8))]))
register("loss_brighten")(lambda rng: (losses.loss_brighten, [_unit(rng, (2, 1, 8, 8)), _unit(rng, (2, 1, 8, 8))]))

_EXTRACTOR = None


def _extractor():
    global _EXTRACTOR
    if _EXTRACTOR is None:
        _EXTRACTOR = losses.PerceptualExtractor(seed=7, widths=(3, 4, 4, 4, 4, 4))
    return _EXTRACTOR


register("loss_perceptual")(lambda rng: (lambda o, s: losses.loss_perceptual(_extractor(), o, s),
                                         [_unit(rng, (2, 3, 8, 8)), _unit(rng, (2, 3, 8, 8))]))
register("loss_gradient")(lambda rng: (losses.loss_gradient, [_unit(rng, (2, 3, 8, 8)), _unit(rng, (2, 3, 8, 8))]))
register("loss_enhance_total")(lambda rng: (
    lambda R, Lo, Lh, S: losses.loss_enhance_total(R, Lo, Lh, S, _extractor()),
    [_unit(rng, (2, 3, 8, 8)), _unit(rng, (2, 1, 8, 8)), _unit(rng, (2, 1, 8, 8)), _unit(rng, (2, 3, 8, 8))]))


def analytic_grads(fn, arrays, dtype) -> list[np.ndarray]:
    xs = [torch.tensor(a, dtype=dtype, requires_grad=True) for a in arrays]
    out = fn(*xs)
    ad.backward(out)
    return [x.grad.double().numpy() if x.grad is not None else np.zeros(x.shape) for x in xs]


def numeric_grads(fn, arrays, h: float = FD_STEP) -> list[np.ndarray]:
    """Central differences in float64, one coordinate at a time."""
    base = [np.array(a, dtype=np.float64) for a in arrays]
    grads = []
    with torch.no_grad():
        for i, a in enumerate(base):
            g = np.zeros_like(a)
            flat, gflat = a.reshape(-1), g.reshape(-1)
            for j in range(flat.size):
                old = flat[j]
                flat[j] = old + h
                fp = float(fn(*[torch.from_numpy(b) for b in base]))
                flat[j] = old - h
                fm = float(fn(*[torch.from_numpy(b) for b in base]))
                flat[j] = old
                gflat[j] = (fp - fm) / (2 * h)
            grads.append(g)
    return grads


def relative_error(analytic, numeric) -> float:
    a = np.concatenate([g.ravel() for g in analytic])
    n = np.concatenate([g.ravel() for g in numeric])
    return float(np.linalg.norm(a - n) / (np.linalg.norm(n) + 1e-8))


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.error < self.tolerance


def run(precision: int = 32, seed: int = 0, names=None, corrupt: str | None = None) -> list[CheckResult]:
    """Check every registered case; ``corrupt`` scales one case's analytic gradient (fault injection)."""
    if precision not in TOLERANCE:
        raise ValueError(f"precision must be 32 or 64, got {precision}")
    if corrupt is not None and corrupt not in REGISTRY:
        raise KeyError(f"unknown gradient case {corrupt!r}")
    dtype = torch.float32 if precision == 32 else torch.float64
    results = []
    for k, (name, build) in enumerate(REGISTRY.items()):
        if names is not None and name not in names:
            continue
        rng = np.random.default_rng([seed, k])
        fn, arrays = build(rng)
        if precision == 32:
            # evaluate both routes at the same (float32-representable) point
            arrays = [np.asarray(a, dtype=np.float32).astype(np.float64) for a in arrays]
        ga = analytic_grads(fn, arrays, dtype)
        if name == corrupt:
            ga = [g * 1.1 + 1e-3 for g in ga]
        gn = numeric_grads(fn, arrays)
        results.append(CheckResult(name, relative_error(ga, gn), TOLERANCE[precision]))
    return results


def main_report(precision: int, seed: int, corrupt=None, out=print) -> bool:
    t0 = time.perf_counter()
    results = run(precision, seed, corrupt=corrupt)
    width = max(len(r.name) for r in results)
    for r in results:
        out(f"{r.name:<{width}}  rel_err={r.error:.3e}  tol={r.tolerance:.0e}  {'ok' if r.passed else 'FAIL'}")
    ok = all(r.passed for r in results)
    out(f"{len(results)} cases, {'all passed' if ok else 'FAILURES'} ({time.perf_counter() - t0:.1f}s, {precision}-bit)")
    return ok
