"""Training losses for the decomposition and enhancement phases.

Every norm is a per-element mean, so magnitudes do not depend on image
size. Illumination maps are broadcast across the reflectance channels
wherever the two are multiplied.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, fields

import torch

from . import autodiff as ad
from . import nets

Tensor = torch.Tensor


@dataclass
class LossWeights:
    lambda_same: float = 1.0
    lambda_cross: float = 0.001
    smooth_lambda: float = 10.0
    decom_rc: float = 1.0
    decom_smooth: float = 0.1
    decom_equal: float = 0.01
    noise_tv: float = 0.05
    noise_mse: float = 1.0
    ncbc_noise: float = 0.2
    ncbc_color: float = 0.1
    enh_rc: float = 1.0
    enh_bri: float = 1.0
    enh_per: float = 1.0
    enh_grad: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be >= 0")


def _l1(a: Tensor, b: Tensor) -> Tensor:
    return ad.mean(ad.abs(ad.sub(a, b)))


def _product(r: Tensor, l: Tensor) -> Tensor:
    return nets.reconstruct(r, l)


def loss_reconstruction_decom(R_low, R_high, L_low, L_high, S_low, S_high,
                              w: LossWeights = LossWeights()) -> Tensor:
    """Sum over (i, j) in {low, high}^2 of ``lambda_ij * mean|R_i * L_j - S_j|``."""
    R = {"low": R_low, "high": R_high}
    L = {"low": L_low, "high": L_high}
    S = {"low": S_low, "high": S_high}
    total = 0.0
    for i in ("low", "high"):
        for j in ("low", "high"):
            lam = w.lambda_same if i == j else w.lambda_cross
            total = total + lam * _l1(_product(R[i], L[j]), S[j])
    return total


def loss_equal(R_low, R_high) -> Tensor:
    return _l1(R_low, R_high)


def _smooth_term(L: Tensor, R: Tensor, lam: float) -> Tensor:
    lh, lv = ad.spatial_gradients(L)
    rh, rv = ad.spatial_gradients(R)
    # R has 3 channels, L one: collapse R's gradient over channels first
    rh = rh.mean(dim=1, keepdim=True)
    rv = rv.mean(dim=1, keepdim=True)
    th = ad.mean(ad.abs(ad.mul(lh, ad.exp(-lam * rh))))
    tv = ad.mean(ad.abs(ad.mul(lv, ad.exp(-lam * rv))))
    return th + tv


def loss_smooth(L_low, L_high, R_low, R_high, w: LossWeights = LossWeights()) -> Tensor:
    """Edge-aware illumination smoothness, gated by ``exp(-lambda * grad R)``."""
    lam = w.smooth_lambda
    return _smooth_term(L_low, R_low, lam) + _smooth_term(L_high, R_high, lam)


def decom_components(R_low, R_high, L_low, L_high, S_low, S_high,
                     w: LossWeights = LossWeights()) -> "OrderedDict[str, Tensor]":
    return OrderedDict(
        rc=loss_reconstruction_decom(R_low, R_high, L_low, L_high, S_low, S_high, w),
        smooth=loss_smooth(L_low, L_high, R_low, R_high, w),
        equal=loss_equal(R_low, R_high),
    )


def loss_decom_total(R_low, R_high, L_low, L_high, S_low, S_high,
                     w: LossWeights = LossWeights()) -> Tensor:
    c = decom_components(R_low, R_high, L_low, L_high, S_low, S_high, w)
    return w.decom_rc * c["rc"] + w.decom_smooth * c["smooth"] + w.decom_equal * c["equal"]


def loss_tv(feat: Tensor) -> Tensor:
    """Squared total variation: ``mean(dh^2) + mean(dv^2)``."""
    dh, dv = ad.spatial_gradients(feat)
    return ad.mean(ad.square(dh)) + ad.mean(ad.square(dv))


def loss_mse(R_low, R_high) -> Tensor:
    return ad.mean(ad.square(ad.sub(R_low, R_high)))


def loss_noise(feat_low, R_low, R_high, w: LossWeights = LossWeights()) -> Tensor:
    return w.noise_tv * loss_tv(feat_low) + w.noise_mse * loss_mse(R_low, R_high)


def loss_color(feat_low, feat_high) -> Tensor:
    return _l1(feat_low, feat_high)


def ncbc_components(feat_low, feat_high, R_low, R_high,
                    w: LossWeights = LossWeights()) -> "OrderedDict[str, Tensor]":
    return OrderedDict(
        tv=loss_tv(feat_low),
        mse=loss_mse(R_low, R_high),
        noise=loss_noise(feat_low, R_low, R_high, w),
        color=loss_color(feat_low, feat_high),
    )


def loss_ncbc_total(feat_low, feat_high, R_low, R_high, w: LossWeights = LossWeights()) -> Tensor:
    """``ncbc_noise * noise + ncbc_color * color``; ``ncbc_noise`` is the ablation knob."""
    return (w.ncbc_noise * loss_noise(feat_low, R_low, R_high, w)
            + w.ncbc_color * loss_color(feat_low, feat_high))


def loss_rc_enhance(R_low, L_output, S_high) -> Tensor:
    return _l1(_product(R_low, L_output), S_high)


def loss_brighten(L_output, L_high) -> Tensor:
    return _l1(L_output, L_high)


class PerceptualExtractor:
    """Frozen feature extractor for the perceptual loss.

    The default is a seeded, randomly initialised 5-layer conv stack whose
    second and fourth layers have stride 2. ``from_params`` wraps a loaded
    parameter map instead (e.g. from a checkpoint).
    """

    STRIDES = (1, 2, 1, 2, 1)

    def __init__(self, params=None, seed: int = 1234, widths=(3, 16, 32, 32, 64, 64), tap: int | None = None):
        if params is None:
            mode = "fixed-random"
            gen = torch.Generator().manual_seed(seed)
            params = OrderedDict()
            for i, (cin, cout) in enumerate(zip(widths[:-1], widths[1:])):
                bound = 1.0 / (cin * 9) ** 0.5
                params[f"conv{i}.weight"] = (torch.rand(cout, cin, 3, 3, generator=gen) * 2 - 1) * bound
                params[f"conv{i}.bias"] = (torch.rand(cout, generator=gen) * 2 - 1) * bound
        else:
            mode = "file-loaded"
        self.mode = mode
        self.params = ad.freeze(params)
        n = sum(1 for k in self.params if k.endswith(".weight"))
        self.tap = n if tap is None else tap
        if not 1 <= self.tap <= n:
            raise ValueError(f"tap {self.tap} outside 1..{n}")

    @classmethod
    def from_params(cls, params, tap: int | None = None) -> "PerceptualExtractor":
        return cls(params=params, tap=tap)

    def __call__(self, x: Tensor) -> Tensor:
        y = x
        for i in range(self.tap):
            w = self.params[f"conv{i}.weight"].to(x.dtype)
            b = self.params[f"conv{i}.bias"].to(x.dtype)
            stride = self.STRIDES[i] if i < len(self.STRIDES) else 1
            y = ad.relu(ad.conv2d(y, w, b, stride=stride, padding=1))
        return y


def loss_perceptual(extractor: PerceptualExtractor | None, out: Tensor, S_high: Tensor) -> Tensor:
    """``sum((phi(out) - phi(S_high))^2) / (B*C*H*W)`` with C, H, W of the input image."""
    if extractor is None:
        raise ValueError("perceptual loss needs a feature extractor")
    diff = ad.sub(extractor(out), extractor(S_high))
    return ad.sum(ad.square(diff)) / out.numel()


def loss_gradient(out: Tensor, S_high: Tensor) -> Tensor:
    oh, ov = ad.spatial_gradients(out)
    sh, sv = ad.spatial_gradients(S_high)
    return _l1(oh, sh) + _l1(ov, sv)


def enhance_components(R_low, L_output, L_high, S_high, extractor,
                       w: LossWeights = LossWeights()) -> "OrderedDict[str, Tensor]":
    out = _product(R_low, L_output)
    return OrderedDict(
        rc=loss_rc_enhance(R_low, L_output, S_high),
        bri=loss_brighten(L_output, L_high),
        per=loss_perceptual(extractor, out, S_high),
        grad=loss_gradient(out, S_high),
    )


def loss_enhance_total(R_low, L_output, L_high, S_high, extractor,
                       w: LossWeights = LossWeights()) -> Tensor:
    c = enhance_components(R_low, L_output, L_high, S_high, extractor, w)
    return w.enh_rc * c["rc"] + w.enh_bri * c["bri"] + w.enh_per * c["per"] + w.enh_grad * c["grad"]
