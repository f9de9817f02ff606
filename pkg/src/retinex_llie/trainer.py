"""Two-phase training: decomposition (+ feature CNN) first, then enhancement."""

from __future__ import annotations

import csv
import logging
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import autodiff as ad
from . import checkpoint as ckpt
from . import imgio, losses, nets

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    phase: str = "decom"
    steps: int = 1000
    batch: int = 4
    patch: int = 64
    learn_rate: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    ncbc_noise_weight: float = 0.2
    checkpoint_every: int = 0
    base_channels: int = 16
    depth: int = 4
    ncbc_layers: int = 5
    ncbc_feat: int = 32

    def __post_init__(self):
        if self.phase not in ("decom", "enhance"):
            raise ValueError(f"phase must be 'decom' or 'enhance', got {self.phase!r}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.patch < 1:
            raise ValueError("patch must be >= 1")
        if not self.learn_rate > 0:
            raise ValueError("learn_rate must be positive")
        if self.ncbc_noise_weight < 0:
            raise ValueError("ncbc_noise_weight must be >= 0")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be >= 0")

    def weights(self) -> losses.LossWeights:
        return losses.LossWeights(ncbc_noise=self.ncbc_noise_weight)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(groups, state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update over every trainable tensor, then clear grads.

    ``groups`` maps a group name to a parameter map, so moment keys stay
    unique across networks trained together.
    """
    items = [(f"{g}.{n}", p) for g, params in groups.items() for n, p in params.items() if p.requires_grad]
    for key, p in items:
        if p.grad is None:
            raise TrainingError(f"adam_step: no gradient for {key}; call backward first")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    with torch.no_grad():
        for key, p in items:
            g = p.grad
            m = state.m.get(key)
            if m is None:
                m = state.m[key] = torch.zeros_like(p)
                state.v[key] = torch.zeros_like(p)
            v = state.v[key]
            m.mul_(beta1).add_(g, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            denom = (v / c2).sqrt_().add_(eps)
            p.addcdiv_(m, denom, value=-lr / c1)
            p.grad = None


@dataclass
class TrainResult:
    params: "dict[str, OrderedDict]"
    history: list[dict]
    adam: AdamState


def _pairs_from(data) -> list[tuple[np.ndarray, np.ndarray]]:
    if isinstance(data, imgio.PairedDataset):
        if len(data) == 0:
            raise TrainingError("dataset is empty")
        return data.load()
    pairs = [(imgio.as_image_tensor(a), imgio.as_image_tensor(b)) for a, b in data]
    if not pairs:
        raise TrainingError("dataset is empty")
    return pairs


def draw_batch(pairs, patch: int, batch: int, seed: int, step: int):
    """Aligned random crops for one step; a pure function of (seed, step)."""
    rng = np.random.default_rng([seed, step])
    idx = rng.integers(0, len(pairs), size=batch)
    lows, highs = [], []
    for i in idx.tolist():
        low, high = pairs[i]
        (y, x), = imgio.crop_offsets(low.shape[2:], patch, 1, rng)
        lows.append(low[0, :, y:y + patch, x:x + patch])
        highs.append(high[0, :, y:y + patch, x:x + patch])
    return torch.from_numpy(np.stack(lows)), torch.from_numpy(np.stack(highs))


def _check_patch(pairs, patch: int) -> None:
    for low, _ in pairs:
        h, w = low.shape[2:]
        if h < patch or w < patch:
            raise TrainingError(f"image {h}x{w} is smaller than patch {patch}")


def _check_finite(step: int, comps: dict) -> None:
    bad = {k: v for k, v in comps.items() if not math.isfinite(v)}
    if bad:
        raise TrainingError(f"non-finite loss at step {step}: {bad}")


def _adam_tensors(state: AdamState) -> dict:
    out = OrderedDict()
    for k in state.m:
        out[f"adam_m.{k}"] = state.m[k]
        out[f"adam_v.{k}"] = state.v[k]
    return out


def _restore_adam(groups: dict, step: int) -> AdamState:
    st = AdamState(step=step)
    for k, t in groups.get("adam_m", {}).items():
        st.m[k] = t.clone()
    for k, t in groups.get("adam_v", {}).items():
        st.v[k] = t.clone()
    return st


def _trainable(params) -> OrderedDict:
    return OrderedDict((k, v.detach().clone().float().requires_grad_(True)) for k, v in params.items())


def _write_checkpoint(path, groups: dict, state: AdamState, cfg: TrainConfig, step: int) -> None:
    meta = {"phase": cfg.phase, "step": step, "config": asdict(cfg)}
    payload = dict(groups)
    payload["adam_m"] = {k[len("adam_m."):]: v for k, v in _adam_tensors(state).items() if k.startswith("adam_m.")}
    payload["adam_v"] = {k[len("adam_v."):]: v for k, v in _adam_tensors(state).items() if k.startswith("adam_v.")}
    ckpt.save_checkpoint(path, payload, meta)


def _check_shapes(expected, loaded, what: str) -> None:
    exp = {k: tuple(v.shape) for k, v in expected.items()}
    got = {k: tuple(v.shape) for k, v in loaded.items()}
    if exp != got:
        raise TrainingError(f"{what} checkpoint does not match the configured network shape")


def train_decomposition(data, cfg: TrainConfig, out_dir=None, resume=None) -> TrainResult:
    """Fit the decomposition net and the feature CNN jointly.

    Each step decomposes the low and high crops with the shared net, runs
    the feature CNN on both reflectances and minimises the decomposition
    loss plus the noise/color-bias loss.
    """
    pairs = _pairs_from(data)
    _check_patch(pairs, cfg.patch)
    w = cfg.weights()
    decom = nets.init_unet(nets.decom_config(cfg.base_channels, cfg.depth), cfg.seed)
    ncbc = nets.init_ncbc(nets.NCBCConfig(layers=cfg.ncbc_layers, feat_channels=cfg.ncbc_feat), cfg.seed + 1)
    state, start = AdamState(), 0
    if resume is not None:
        groups, meta = ckpt.load_checkpoint(resume)
        _check_shapes(decom, groups.get("decom", {}), "decomposition")
        _check_shapes(ncbc, groups.get("ncbc", {}), "feature CNN")
        decom, ncbc = _trainable(groups["decom"]), _trainable(groups["ncbc"])
        start = int(meta.get("step", 0))
        state = _restore_adam(groups, start)
    groups = {"decom": decom, "ncbc": ncbc}
    history = []
    for step in range(start, cfg.steps):
        low, high = draw_batch(pairs, cfg.patch, cfg.batch, cfg.seed, step)
        n = low.shape[0]
        R, L = nets.decom_forward(decom, torch.cat([low, high]))
        R_low, R_high, L_low, L_high = R[:n], R[n:], L[:n], L[n:]
        feat = nets.ncbc_forward(ncbc, R)
        f_low, f_high = feat[:n], feat[n:]
        dc = losses.decom_components(R_low, R_high, L_low, L_high, low, high, w)
        nc = losses.ncbc_components(f_low, f_high, R_low, R_high, w)
        decom_total = w.decom_rc * dc["rc"] + w.decom_smooth * dc["smooth"] + w.decom_equal * dc["equal"]
        ncbc_total = w.ncbc_noise * nc["noise"] + w.ncbc_color * nc["color"]
        total = decom_total + ncbc_total
        row = {"step": step, **{k: v.item() for k, v in dc.items()},
               **{k: v.item() for k, v in nc.items()},
               "decom_total": decom_total.item(), "ncbc_total": ncbc_total.item(), "total": total.item()}
        _check_finite(step, row)
        history.append(row)
        ad.backward(total, [decom, ncbc])
        adam_step(groups, state, cfg.learn_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
        if out_dir and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            _write_checkpoint(Path(out_dir) / f"decom_step{step + 1:06d}.blnt", groups, state, cfg, step + 1)
    if out_dir:
        _write_checkpoint(Path(out_dir) / "decom.blnt", groups, state, cfg, cfg.steps)
        write_history(Path(out_dir) / "decom_loss.csv", history)
    return TrainResult(params=groups, history=history, adam=state)


def train_enhancement(data, decom_params, cfg: TrainConfig, out_dir=None, resume=None,
                      extractor: losses.PerceptualExtractor | None = None) -> TrainResult:
    """Fit the enhancement net on frozen decompositions of each batch."""
    pairs = _pairs_from(data)
    _check_patch(pairs, cfg.patch)
    w = cfg.weights()
    expected = nets.init_unet(nets.decom_config(cfg.base_channels, cfg.depth), 0)
    _check_shapes(expected, decom_params, "decomposition")
    decom = ad.freeze(decom_params)
    frozen_digest = ckpt.params_digest(decom)
    extractor = extractor or losses.PerceptualExtractor()
    enh = nets.init_unet(nets.enhance_config(cfg.base_channels, cfg.depth), cfg.seed + 3)
    state, start = AdamState(), 0
    if resume is not None:
        groups, meta = ckpt.load_checkpoint(resume)
        _check_shapes(enh, groups.get("enh", {}), "enhancement")
        enh = _trainable(groups["enh"])
        start = int(meta.get("step", 0))
        state = _restore_adam(groups, start)
    groups = {"enh": enh}
    history = []
    for step in range(start, cfg.steps):
        low, high = draw_batch(pairs, cfg.patch, cfg.batch, cfg.seed, step)
        n = low.shape[0]
        with torch.no_grad():
            R, L = nets.decom_forward(decom, torch.cat([low, high]))
        R_low, L_low, L_high = R[:n], L[:n], L[n:]
        L_out = nets.enhance_forward(enh, R_low, L_low)
        comps = losses.enhance_components(R_low, L_out, L_high, high, extractor, w)
        total = w.enh_rc * comps["rc"] + w.enh_bri * comps["bri"] + w.enh_per * comps["per"] + w.enh_grad * comps["grad"]
        row = {"step": step, **{k: v.item() for k, v in comps.items()}, "total": total.item()}
        _check_finite(step, row)
        history.append(row)
        ad.backward(total, [enh])
        adam_step(groups, state, cfg.learn_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
        if out_dir and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            _write_checkpoint(Path(out_dir) / f"enh_step{step + 1:06d}.blnt", groups, state, cfg, step + 1)
    if ckpt.params_digest(decom) != frozen_digest:
        raise TrainingError("decomposition parameters changed during enhancement training")
    if out_dir:
        _write_checkpoint(Path(out_dir) / "enh.blnt", groups, state, cfg, cfg.steps)
        write_history(Path(out_dir) / "enh_loss.csv", history)
    return TrainResult(params=groups, history=history, adam=state)


def write_history(path, history: list[dict]) -> None:
    if not history:
        Path(path).write_text("")
        return
    cols = list(history[0])
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(cols)
        for row in history:
            wr.writerow([row["step"]] + [repr(float(row[c])) for c in cols[1:]])


def read_history(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "step" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]


def load_network(path, group: str) -> OrderedDict:
    groups, _ = ckpt.load_checkpoint(path)
    if group not in groups:
        raise ckpt.CheckpointError(f"{path}: no '{group}' parameters (found {sorted(groups)})")
    return ad.freeze(groups[group])
