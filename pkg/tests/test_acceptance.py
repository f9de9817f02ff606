"""Acceptance suite: one PASS/FAIL/SKIP line per criterion.

Run with ``pytest tests/test_acceptance.py -v``; the verdict lines are
printed even when output capture is on. Criteria 4 (dataset part) and 9
need the LOL validation split: point ``LOL_VAL_DIR`` at a directory with
``low/`` and ``high/`` subfolders.

The overfit criteria (5-8) train the default-size networks on CPU and
take several minutes.
"""

import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from retinex_llie import checkpoint as ckpt
from retinex_llie import gradcheck, imgio, losses, metrics, nets, synthetic, trainer

# tolerances and budgets
GRAD_TOL = {32: 1e-3, 64: 1e-5}
GRAD_BUDGET_S = 60.0
ORACLE_TOL = 1e-6
CIEDE_TOL = 1e-4
LOL_GE, LOL_GE_TOL = 7.04, 0.05
LOL_CE, LOL_CE_TOL = 21.32, 0.15
LOL_PSNR, LOL_PSNR_TOL = 7.77, 0.05
LOL_SSIM, LOL_SSIM_TOL = 0.19, 0.01
DECOM_DROP = 0.90
DECOM_RECON = 0.05
DECOM_BUDGET_S = 600.0
ENH_PSNR = 25.0
MAX_STEPS = 2000

# overfit setup: two seeded 64x64 synthetic pairs
PAIR_SEEDS = (0, 1)
SYNTH = dict(gain=0.3, noise=0.003, exposure=0.7)
DECOM_CFG = dict(phase="decom", steps=2000, batch=2, patch=64, learn_rate=1e-3, seed=0)
ENH_CFG = dict(phase="enhance", steps=2000, batch=2, patch=64, learn_rate=1e-4, seed=0)
ABLATION = (0.2, 0.4, 0.7)

LOL_DIR = os.environ.get("LOL_VAL_DIR")


@pytest.fixture
def verdict(capsys):
    def emit(n, status, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE {n} {status}: {detail}")
    return emit


def check(verdict, n, ok, detail):
    verdict(n, "PASS" if ok else "FAIL", detail)
    assert ok, detail


def lol_dataset():
    if not LOL_DIR:
        return None
    return imgio.scan_dataset(LOL_DIR)


@pytest.fixture(scope="module")
def pairs():
    return [synthetic.make_pair(64, s, **SYNTH) for s in PAIR_SEEDS]


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    return {"root": tmp_path_factory.mktemp("acceptance")}


def decom_run(runs, pairs, weight, tag="a"):
    key = ("decom", weight, tag)
    if key not in runs:
        out = runs["root"] / f"decom_{weight}_{tag}"
        out.mkdir()
        t0 = time.perf_counter()
        res = trainer.train_decomposition(pairs, trainer.TrainConfig(**DECOM_CFG, ncbc_noise_weight=weight),
                                          out_dir=out)
        runs[key] = (res, out, time.perf_counter() - t0)
    return runs[key]


def enh_run(runs, pairs, tag="a"):
    key = ("enh", tag)
    if key not in runs:
        dres, dout, _ = decom_run(runs, pairs, 0.2, tag)
        decom = trainer.load_network(dout / "decom.blnt", "decom")
        before = ckpt.params_digest(decom)
        out = runs["root"] / f"enh_{tag}"
        out.mkdir()
        res = trainer.train_enhancement(pairs, decom, trainer.TrainConfig(**ENH_CFG), out_dir=out)
        runs[key] = (res, out, decom, before)
    return runs[key]


def test_1_gradient_suite(verdict):
    t0 = time.perf_counter()
    worst = {}
    for prec in (32, 64):
        res = gradcheck.run(prec, seed=0)
        bad = [r.name for r in res if not r.error < GRAD_TOL[prec]]
        worst[prec] = (max(r.error for r in res), bad, len(res))
    elapsed = time.perf_counter() - t0
    ok = not worst[32][1] and not worst[64][1] and elapsed < GRAD_BUDGET_S
    check(verdict, 1, ok,
          f"{worst[32][2]} cases; worst rel err 32-bit {worst[32][0]:.2e} (< {GRAD_TOL[32]:.0e}), "
          f"64-bit {worst[64][0]:.2e} (< {GRAD_TOL[64]:.0e}); failing {worst[32][1] + worst[64][1]}; "
          f"{elapsed:.1f}s (< {GRAD_BUDGET_S:.0f}s)")


def _gray(a):
    return 0.299 * a[0] + 0.587 * a[1] + 0.114 * a[2]


def _psnr_loop(a, b):
    return 10 * math.log10(1.0 / (sum((x - y) ** 2 for x, y in zip(a.ravel(), b.ravel())) / a.size))


def _ssim_loop(a, b, k=11, sigma=1.5):
    x, y = _gray(a), _gray(b)
    g = np.array([math.exp(-((i - (k - 1) / 2) ** 2) / (2 * sigma ** 2)) for i in range(k)])
    w = np.outer(g, g) / g.sum() ** 2
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    vals = []
    for i in range(x.shape[0] - k + 1):
        for j in range(x.shape[1] - k + 1):
            p, q = x[i:i + k, j:j + k], y[i:i + k, j:j + k]
            mx, my = (w * p).sum(), (w * q).sum()
            vx, vy = (w * p * p).sum() - mx * mx, (w * q * q).sum() - my * my
            cxy = (w * p * q).sum() - mx * my
            vals.append((2 * mx * my + c1) * (2 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


def _uqi_loop(a, b, k=8):
    x, y = _gray(a), _gray(b)
    vals = []
    for i in range(x.shape[0] - k + 1):
        for j in range(x.shape[1] - k + 1):
            p, q = x[i:i + k, j:j + k].ravel(), y[i:i + k, j:j + k].ravel()
            mx, my = p.mean(), q.mean()
            cxy = ((p - mx) * (q - my)).mean()
            vals.append(4 * cxy * mx * my / ((p.var() + q.var()) * (mx ** 2 + my ** 2)))
    return float(np.mean(vals))


def _sharma_pairs():
    rows = []
    with open(Path(__file__).parent / "data" / "ciede2000_pairs.csv") as fh:
        for line in fh:
            if line.startswith("#") or line.startswith("L1"):
                continue
            rows.append([float(v) for v in line.split(",")])
    arr = np.array(rows)
    return arr[:, :3].T, arr[:, 3:6].T, arr[:, 6]


def test_2_metric_oracles(verdict):
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(50):
        a = rng.uniform(size=(3, 16, 16))
        b = rng.uniform(size=(3, 16, 16))
        worst = max(worst,
                    abs(metrics.psnr(a, b) - _psnr_loop(a, b)),
                    abs(metrics.ssim(a, b) - _ssim_loop(a, b)),
                    abs(metrics.uqi(a, b) - _uqi_loop(a, b)))
    lab1, lab2, ref = _sharma_pairs()
    de_err = float(np.max(np.abs(metrics.ciede2000(lab1, lab2) - ref)))
    ok = worst < ORACLE_TOL and de_err < CIEDE_TOL and len(ref) == 34
    check(verdict, 2, ok, f"psnr/ssim/uqi worst |diff| {worst:.2e} (< {ORACLE_TOL:.0e}) over 50 pairs; "
                          f"CIEDE2000 {len(ref)} reference pairs worst |diff| {de_err:.2e} (< {CIEDE_TOL:.0e})")


def test_3_identity_metrics(verdict, tmp_path):
    rng = np.random.default_rng(3)
    for i in range(10):
        imgio.save_image(rng.uniform(size=(1, 3, 24, 24)), tmp_path / f"x{i}.png")
    rep = metrics.evaluate(tmp_path, tmp_path)
    bad = [r.name for r in rep.rows
           if not (r.psnr == math.inf and r.ssim == 1.0 and r.uqi == 1.0
                   and (r.ang_mean, r.ang_median, r.ang_average) == (0.0, 0.0, 0.0) and r.deltaE == 0.0)]
    check(verdict, 3, len(rep.rows) == 10 and not bad,
          f"{len(rep.rows)} images; psnr=inf, ssim=1, uqi=1, angular=(0,0,0), deltaE=0; mismatches {bad}")


def test_4_entropy(verdict):
    const = metrics.entropy(np.full((3, 16, 16), 0.37))
    ramp = np.repeat((np.arange(256) / 255.0).reshape(1, 16, 16), 3, axis=0)
    ge_uniform = metrics.entropy(ramp)[0]
    ok = const == (0.0, 0.0) and ge_uniform == 8.0
    detail = f"constant -> {const}; uniform histogram GE = {ge_uniform!r}"
    ds = lol_dataset()
    if ds is None:
        detail += "; LOL part skipped (LOL_VAL_DIR unset)"
    else:
        vals = [metrics.entropy(imgio.load_image(hp)) for _, hp in ds.pairs]
        ge, ce = float(np.mean([v[0] for v in vals])), float(np.mean([v[1] for v in vals]))
        ok = ok and abs(ge - LOL_GE) <= LOL_GE_TOL and abs(ce - LOL_CE) <= LOL_CE_TOL
        detail += (f"; LOL GT GE {ge:.4f} (target {LOL_GE} +/- {LOL_GE_TOL}), "
                   f"CE {ce:.4f} (target {LOL_CE} +/- {LOL_CE_TOL})")
    check(verdict, 4, ok, detail)


def test_5_decomposition_overfit(verdict, runs, pairs):
    res, out, elapsed = decom_run(runs, pairs, 0.2)
    h = res.history
    drop = 1 - h[-1]["total"] / h[0]["total"]
    with torch.no_grad():
        errs = []
        for low, _ in pairs:
            R, L = nets.decom_forward(res.params["decom"], torch.from_numpy(low))
            errs.append(float((nets.reconstruct(R, L) - torch.from_numpy(low)).abs().mean()))
    recon = float(np.mean(errs))
    ok = (len(h) <= MAX_STEPS and drop >= DECOM_DROP and recon < DECOM_RECON and elapsed <= DECOM_BUDGET_S)
    check(verdict, 5, ok, f"{len(h)} steps in {elapsed:.0f}s (<= {DECOM_BUDGET_S:.0f}s); total loss "
                          f"{h[0]['total']:.4f} -> {h[-1]['total']:.4f}, drop {drop:.1%} (>= {DECOM_DROP:.0%}); "
                          f"mean|R_low*L_low - S_low| {recon:.4f} (< {DECOM_RECON})")


def test_6_enhancement_overfit(verdict, runs, pairs):
    res, _, decom, before = enh_run(runs, pairs)
    vals = []
    with torch.no_grad():
        for low, high in pairs:
            R, L = nets.decom_forward(decom, torch.from_numpy(low))
            L_out = nets.enhance_forward(res.params["enh"], R, L)
            vals.append(metrics.psnr(nets.reconstruct(R, L_out).numpy(), high))
    unchanged = ckpt.params_digest(decom) == before
    ok = len(res.history) <= MAX_STEPS and min(vals) > ENH_PSNR and unchanged
    check(verdict, 6, ok, f"{len(res.history)} steps; PSNR per pair "
                          f"{', '.join(f'{v:.2f}' for v in vals)} dB (each > {ENH_PSNR}); "
                          f"decomposition params bit-unchanged: {unchanged}")


def converged_tv(res, pairs):
    """TV of the feature CNN's map of R_low, on the full images, with final parameters."""
    low = torch.from_numpy(np.concatenate([p[0] for p in pairs]))
    with torch.no_grad():
        R, _ = nets.decom_forward(res.params["decom"], low)
        return float(losses.loss_tv(nets.ncbc_forward(res.params["ncbc"], R)))


def test_7_ablation_monotone(verdict, runs, pairs):
    results = [decom_run(runs, pairs, w)[0] for w in ABLATION]
    tvs = [converged_tv(r, pairs) for r in results]
    ok = all(b <= a for a, b in zip(tvs, tvs[1:]))
    # context only: the R_low/R_high mse term the same knob scales
    mses = ", ".join(f"{r.history[-1]['mse']:.2e}" for r in results)
    check(verdict, 7, ok, "converged TV on phi(R_low): " +
          ", ".join(f"w={w}: {v:.3e}" for w, v in zip(ABLATION, tvs)) +
          f" (must be non-increasing); final mse term {mses}")


def test_8_determinism(verdict, runs, pairs):
    _, d1, _ = decom_run(runs, pairs, 0.2, "a")
    _, e1, _, _ = enh_run(runs, pairs, "a")
    _, d2, _ = decom_run(runs, pairs, 0.2, "b")
    _, e2, _, _ = enh_run(runs, pairs, "b")
    same_csv = ((d1 / "decom_loss.csv").read_bytes() == (d2 / "decom_loss.csv").read_bytes()
                and (e1 / "enh_loss.csv").read_bytes() == (e2 / "enh_loss.csv").read_bytes())
    roundtrip = True
    for path in (d1 / "decom.blnt", e1 / "enh.blnt"):
        groups, meta = ckpt.load_checkpoint(path)
        copy = path.with_name("copy.blnt")
        ckpt.save_checkpoint(copy, groups, meta)
        roundtrip &= copy.read_bytes() == path.read_bytes()
    check(verdict, 8, same_csv and roundtrip,
          f"re-run loss CSVs identical: {same_csv}; checkpoints round-trip bit-exactly: {roundtrip}")


def test_9_lol_input_metrics(verdict):
    ds = lol_dataset()
    if ds is None:
        verdict(9, "SKIP", "LOL validation split not available (set LOL_VAL_DIR)")
        pytest.skip("LOL_VAL_DIR unset")
    agg = metrics.evaluate(ds).aggregate()
    ok = abs(agg.psnr - LOL_PSNR) <= LOL_PSNR_TOL and abs(agg.ssim - LOL_SSIM) <= LOL_SSIM_TOL
    check(verdict, 9, ok, f"{len(ds)} pairs: PSNR {agg.psnr:.4f} (target {LOL_PSNR} +/- {LOL_PSNR_TOL}), "
                          f"SSIM {agg.ssim:.4f} (target {LOL_SSIM} +/- {LOL_SSIM_TOL})")
