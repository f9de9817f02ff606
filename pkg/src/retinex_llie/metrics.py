"""Full-reference image quality and color-fidelity metrics.

All functions take single images as ``(1, C, H, W)`` or ``(C, H, W)``
arrays in [0, 1] and work in float64 internally.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import imgio

PSNR_INF = math.inf
GRAY_WEIGHTS = (0.299, 0.587, 0.114)
D65_WHITE = (0.95047, 1.0, 1.08883)
SRGB_TO_XYZ = np.array([[0.4124564, 0.3575761, 0.1804375],
                        [0.2126729, 0.7151522, 0.0721750],
                        [0.0193339, 0.1191920, 0.9503041]])


def _chw(img) -> np.ndarray:
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 4:
        if a.shape[0] != 1:
            raise ValueError(f"metrics take one image at a time, got batch {a.shape[0]}")
        a = a[0]
    if a.ndim != 3:
        raise ValueError(f"expected (C, H, W) image, got shape {a.shape}")
    return a


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a, b = _chw(a), _chw(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def to_gray(img) -> np.ndarray:
    """``0.299 R + 0.587 G + 0.114 B`` as an ``(H, W)`` array; 1-channel input passes through."""
    a = _chw(img)
    if a.shape[0] == 1:
        return a[0]
    r, g, b = GRAY_WEIGHTS
    return r * a[0] + g * a[1] + b * a[2]


def psnr(a, b) -> float:
    a, b = _pair(a, b)
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_INF
    return float(10.0 * np.log10(1.0 / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _local_moments(x: np.ndarray, y: np.ndarray, win: np.ndarray):
    """Windowed means, variances and covariance over every fully-contained window."""
    k = win.shape[0]
    h0, w0 = k // 2, k // 2
    h1, w1 = x.shape[0] - (k - 1 - k // 2), x.shape[1] - (k - 1 - k // 2)

    def filt(z):
        return ndimage.correlate(z, win, mode="constant")[h0:h1, w0:w1]

    mx, my = filt(x), filt(y)
    vx = filt(x * x) - mx * mx
    vy = filt(y * y) - my * my
    cxy = filt(x * y) - mx * my
    return mx, my, vx, vy, cxy


def ssim(a, b, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM of the grayscale images over all valid Gaussian windows."""
    a, b = _pair(a, b)
    x, y = to_gray(a), to_gray(b)
    if min(x.shape) < window:
        raise ValueError(f"image {x.shape} smaller than the {window}x{window} SSIM window")
    c1, c2 = k1 ** 2, k2 ** 2
    mx, my, vx, vy, cxy = _local_moments(x, y, gaussian_window(window, sigma))
    smap = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2))
    return float(smap.mean())


UQI_EPS = 1e-12


def uqi(a, b, window: int = 8) -> float:
    """Universal quality index over ``window x window`` sliding windows.

    Windows where both images are flat fall back to the luminance term;
    windows where the means are zero as well are skipped.
    """
    a, b = _pair(a, b)
    x, y = to_gray(a), to_gray(b)
    if min(x.shape) < window:
        raise ValueError(f"image {x.shape} smaller than the {window}x{window} UQI window")
    box = np.full((window, window), 1.0 / window ** 2)
    mx, my, vx, vy, cxy = _local_moments(x, y, box)
    var_term = vx + vy
    mean_term = mx ** 2 + my ** 2
    full = (var_term > UQI_EPS) & (mean_term > UQI_EPS)
    lum = (var_term <= UQI_EPS) & (mean_term > UQI_EPS)
    q = np.concatenate([
        4 * cxy[full] * mx[full] * my[full] / (var_term[full] * mean_term[full]),
        2 * mx[lum] * my[lum] / mean_term[lum],
    ])
    if q.size == 0:
        return 1.0 if np.array_equal(x, y) else math.nan
    return float(q.mean())


def angular_error(out, gt, min_norm: float = 1e-6) -> tuple[float, float, float]:
    """Per-pixel angle (degrees) between RGB vectors: (mean, median, (mean+median)/2).

    Pixels where either vector is shorter than ``min_norm`` count as 0 degrees.
    """
    a, b = _pair(out, gt)
    if a.shape[0] != 3:
        raise ValueError("angular error needs 3-channel images")
    a = a.reshape(3, -1)
    b = b.reshape(3, -1)
    na, nb = np.linalg.norm(a, axis=0), np.linalg.norm(b, axis=0)
    ok = (na >= min_norm) & (nb >= min_norm)
    # atan2 of |a x b| and a.b stays accurate near 0 and 180 degrees, unlike arccos
    cross = np.linalg.norm(np.cross(a, b, axis=0), axis=0)
    dot = np.sum(a * b, axis=0)
    theta = np.where(ok, np.degrees(np.arctan2(cross, dot)), 0.0)
    mean, median = float(theta.mean()), float(np.median(theta))
    return mean, median, (mean + median) / 2.0


def srgb_to_lab(img) -> np.ndarray:
    """sRGB in [0, 1] -> CIELAB (D65, 2 degree observer); returns ``(3, H, W)``."""
    a = _chw(img)
    if a.shape[0] == 1:
        a = np.repeat(a, 3, axis=0)
    lin = np.where(a <= 0.04045, a / 12.92, ((a + 0.055) / 1.055) ** 2.4)
    xyz = np.tensordot(SRGB_TO_XYZ, lin, axes=1)
    xyz = xyz / np.asarray(D65_WHITE)[:, None, None]
    eps, kappa = 216 / 24389, 24389 / 27
    f = np.where(xyz > eps, np.cbrt(xyz), (kappa * xyz + 16) / 116)
    L = 116 * f[1] - 16
    A = 500 * (f[0] - f[1])
    B = 200 * (f[1] - f[2])
    return np.stack([L, A, B])


def ciede2000(lab1, lab2, kL: float = 1.0, kC: float = 1.0, kH: float = 1.0) -> np.ndarray:
    """CIEDE2000 color difference between Lab arrays whose first axis is (L, a, b)."""
    L1, a1, b1 = (np.asarray(lab1, dtype=np.float64)[i] for i in range(3))
    L2, a2, b2 = (np.asarray(lab2, dtype=np.float64)[i] for i in range(3))
    C1 = np.hypot(a1, b1)
    C2 = np.hypot(a2, b2)
    Cbar7 = ((C1 + C2) / 2) ** 7
    G = 0.5 * (1 - np.sqrt(Cbar7 / (Cbar7 + 25.0 ** 7)))
    a1p, a2p = (1 + G) * a1, (1 + G) * a2
    C1p, C2p = np.hypot(a1p, b1), np.hypot(a2p, b2)
    h1p = np.degrees(np.arctan2(b1, a1p)) % 360
    h2p = np.degrees(np.arctan2(b2, a2p)) % 360
    h1p = np.where(C1p == 0, 0.0, h1p)
    h2p = np.where(C2p == 0, 0.0, h2p)

    dLp = L2 - L1
    dCp = C2p - C1p
    dh = h2p - h1p
    dh = np.where(dh > 180, dh - 360, dh)
    dh = np.where(dh < -180, dh + 360, dh)
    zero_c = (C1p * C2p) == 0
    dh = np.where(zero_c, 0.0, dh)
    dHp = 2 * np.sqrt(C1p * C2p) * np.sin(np.radians(dh) / 2)

    Lbar = (L1 + L2) / 2
    Cbar = (C1p + C2p) / 2
    hsum = h1p + h2p
    hbar = np.where(np.abs(h1p - h2p) <= 180, hsum / 2,
                    np.where(hsum < 360, (hsum + 360) / 2, (hsum - 360) / 2))
    hbar = np.where(zero_c, hsum, hbar)
    T = (1 - 0.17 * np.cos(np.radians(hbar - 30)) + 0.24 * np.cos(np.radians(2 * hbar))
         + 0.32 * np.cos(np.radians(3 * hbar + 6)) - 0.20 * np.cos(np.radians(4 * hbar - 63)))
    dtheta = 30 * np.exp(-(((hbar - 275) / 25) ** 2))
    Cbar7p = Cbar ** 7
    RC = 2 * np.sqrt(Cbar7p / (Cbar7p + 25.0 ** 7))
    SL = 1 + 0.015 * (Lbar - 50) ** 2 / np.sqrt(20 + (Lbar - 50) ** 2)
    SC = 1 + 0.045 * Cbar
    SH = 1 + 0.015 * Cbar * T
    RT = -np.sin(np.radians(2 * dtheta)) * RC
    tl, tc, th = dLp / (kL * SL), dCp / (kC * SC), dHp / (kH * SH)
    return np.sqrt(tl ** 2 + tc ** 2 + th ** 2 + RT * tc * th)


def delta_e_2000(out, gt) -> float:
    """Mean per-pixel CIEDE2000 between two sRGB images."""
    a, b = _pair(out, gt)
    return float(ciede2000(srgb_to_lab(a), srgb_to_lab(b)).mean())


def _hist_entropy(q: np.ndarray) -> float:
    counts = np.bincount(q.ravel(), minlength=256).astype(np.float64)
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log2(p)).sum()) + 0.0


def _quantize(x: np.ndarray) -> np.ndarray:
    return np.round(np.clip(x, 0.0, 1.0) * 255.0).astype(np.int64)


def entropy(img) -> tuple[float, float]:
    """Gray entropy and color entropy (sum of per-channel entropies), in bits.

    Both use 256-bin histograms of ``round(v * 255)``; a 1-channel image
    stands in for all three color channels.
    """
    a = _chw(img)
    ge = _hist_entropy(_quantize(to_gray(a)))
    chans = a if a.shape[0] == 3 else np.repeat(a[:1], 3, axis=0)
    ce = sum(_hist_entropy(_quantize(c)) for c in chans)
    return ge, ce


@dataclass
class MetricRow:
    name: str
    psnr: float
    ssim: float
    uqi: float
    ang_mean: float
    ang_median: float
    ang_average: float
    deltaE: float
    ge: float
    ce: float


COLUMNS = [f.name for f in fields(MetricRow)]
AVERAGE_NOTE = "ang_average = (ang_mean + ang_median) / 2 per image"


def compare(name: str, out, gt) -> MetricRow:
    """Every metric for one (output, reference) pair; entropies describe ``out``."""
    out, gt = _pair(out, gt)
    if out.shape[0] == 1:
        out, gt = np.repeat(out, 3, axis=0), np.repeat(gt, 3, axis=0)
    m, med, avg = angular_error(out, gt)
    ge, ce = entropy(out)
    return MetricRow(name, psnr(out, gt), ssim(out, gt), uqi(out, gt), m, med, avg,
                     delta_e_2000(out, gt), ge, ce)


@dataclass
class MetricReport:
    rows: list[MetricRow]

    def aggregate(self) -> MetricRow:
        vals = {c: float(np.mean([getattr(r, c) for r in self.rows])) for c in COLUMNS[1:]}
        return MetricRow("mean", **vals)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(COLUMNS)
            for r in self.rows + [self.aggregate()]:
                d = asdict(r)
                wr.writerow([d["name"]] + [repr(d[c]) for c in COLUMNS[1:]])

    def to_text(self) -> str:
        head = f"{'name':<24}" + "".join(f"{c:>12}" for c in COLUMNS[1:])
        lines = [f"# {AVERAGE_NOTE}", head, "-" * len(head)]
        for r in self.rows + [self.aggregate()]:
            d = asdict(r)
            lines.append(f"{d['name']:<24}" + "".join(f"{d[c]:>12.4f}" for c in COLUMNS[1:]))
        return "\n".join(lines)


def read_report(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (v if k == "name" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]


class UnmatchedImagesError(ValueError):
    pass


def match_dirs(dir_a, dir_b) -> list[tuple[Path, Path]]:
    a = {p.name: p for p in imgio.list_images(dir_a)}
    b = {p.name: p for p in imgio.list_images(dir_b)}
    orphans = sorted(set(a) ^ set(b))
    if orphans:
        raise UnmatchedImagesError("unmatched images: " + ", ".join(orphans))
    if not a:
        raise UnmatchedImagesError(f"no images found in {dir_a}")
    return [(a[n], b[n]) for n in sorted(a)]


def evaluate(dir_a, dir_b=None, workers: int | None = None) -> MetricReport:
    """Score every image in ``dir_a`` against its same-named partner in ``dir_b``.

    ``dir_a`` may instead be a :class:`~retinex_llie.imgio.PairedDataset`,
    in which case its low images are scored against its high images.
    """
    if isinstance(dir_a, imgio.PairedDataset):
        pairs = dir_a.pairs
    else:
        pairs = match_dirs(dir_a, dir_b)
    workers = workers or imgio.worker_count()

    def one(pair):
        pa, pb = pair
        return compare(pa.name, imgio.load_image(pa), imgio.load_image(pb))

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            rows = list(pool.map(one, pairs))
    else:
        rows = [one(p) for p in pairs]
    return MetricReport(rows)
