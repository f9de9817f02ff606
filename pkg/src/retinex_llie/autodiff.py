"""Differentiable tensor operations used by the networks and losses.

Nodes are ``torch.Tensor`` objects; reverse-mode gradients come from torch's
autograd engine. This module pins down the exact operation semantics the
rest of the package relies on (shape rules, the spatial-gradient stencil,
nearest-neighbour upsampling, scalar-only ``backward``) so they can be
checked independently against finite differences.
"""

from __future__ import annotations

import os
from collections import OrderedDict

import torch
import torch.nn.functional as F

Tensor = torch.Tensor
NetParams = "OrderedDict[str, torch.Tensor]"


def configure_threads(n: int | None = None) -> int:
    """Fix torch's intra-op thread count (``BLNET_THREADS``, default 1).

    A fixed thread count plus deterministic kernels makes repeated runs
    bit-identical.
    """
    if n is None:
        try:
            n = int(os.environ.get("BLNET_THREADS", "1"))
        except ValueError:
            n = 1
    n = max(1, n)
    torch.set_num_threads(n)
    torch.use_deterministic_algorithms(True)
    return n


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or a.dim() == 0 or b.dim() == 0 or a.numel() == 1 or b.numel() == 1:
        return
    raise ValueError(f"{op}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation (no kernel flip) with zero padding.

    ``w`` is ``(out, in, k, k)``; output size is
    ``floor((n + 2*padding - k) / stride) + 1`` per spatial axis.
    """
    if w.dim() != 4 or w.shape[2] != w.shape[3]:
        raise ValueError(f"conv2d: kernel must be square (out, in, k, k), got {tuple(w.shape)}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d: input has {x.shape[1]} channels, kernel expects {w.shape[1]}")
    k = w.shape[2]
    for n in x.shape[2:]:
        if n + 2 * padding < k:
            raise ValueError(f"conv2d: spatial size {n} too small for kernel {k} with padding {padding}")
    return F.conv2d(x, w, b, stride=stride, padding=padding)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Replicate each pixel into a ``factor x factor`` block."""
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return x
    return x.repeat_interleave(factor, dim=2).repeat_interleave(factor, dim=3)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return a + b


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    return a - b


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    return a * b


def relu(x: Tensor) -> Tensor:
    return torch.relu(x)


def sigmoid(x: Tensor) -> Tensor:
    return torch.sigmoid(x)


def exp(x: Tensor) -> Tensor:
    return torch.exp(x)


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors the op name
    return torch.abs(x)


def square(x: Tensor) -> Tensor:
    return x * x


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"concat_channels: {tuple(a.shape)} and {tuple(b.shape)} differ outside channels")
    return torch.cat([a, b], dim=1)


def mean(x: Tensor) -> Tensor:
    return x.mean()


def sum(x: Tensor) -> Tensor:  # noqa: A001
    return x.sum()


def spatial_gradients(x: Tensor) -> tuple[Tensor, Tensor]:
    """Forward differences along width (h) and height (v).

    ``dh[..., i, j] = x[..., i, j+1] - x[..., i, j]`` and
    ``dv[..., i, j] = x[..., i+1, j] - x[..., i, j]``; the last column of
    ``dh`` and last row of ``dv`` are zero so both keep ``x``'s shape.
    """
    dh = F.pad(x[..., :, 1:] - x[..., :, :-1], (0, 1, 0, 0))
    dv = F.pad(x[..., 1:, :] - x[..., :-1, :], (0, 0, 0, 1))
    return dh, dv


def backward(loss: Tensor, params=None) -> None:
    """Populate ``.grad`` on every tensor reachable from a scalar ``loss``.

    Trainable entries of ``params`` (a name -> tensor mapping or an iterable
    of mappings) that the loss does not reach get an all-zero gradient.
    """
    if loss.numel() != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if loss.requires_grad:
        loss.reshape(()).backward()
    if params is None:
        return
    groups = [params] if isinstance(params, dict) else list(params)
    for group in groups:
        for p in group.values():
            if p.requires_grad and p.grad is None:
                p.grad = torch.zeros_like(p)


def param_list(*groups) -> list[Tensor]:
    return [p for g in groups for p in g.values()]


def zero_grads(*groups) -> None:
    for p in param_list(*groups):
        p.grad = None


def freeze(params) -> "OrderedDict[str, Tensor]":
    """Detached, non-trainable copy of a parameter set."""
    return OrderedDict((k, v.detach().clone().requires_grad_(False)) for k, v in params.items())
