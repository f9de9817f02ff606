"""Image file I/O, dataset pairing and patch sampling.

Images travel through the package as ``float32`` arrays laid out
``(batch, channel, height, width)`` with values ``byte / 255`` (no gamma
linearization).
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".ppm")


class ImageFormatError(ValueError):
    """Raised for unreadable or unsupported image files."""


class DatasetError(ValueError):
    """Raised when a dataset root cannot be paired."""


def as_image_tensor(arr) -> np.ndarray:
    """Coerce ``arr`` to a 4-D float32 image tensor, validating its shape.

    3-D input is treated as a single ``(C, H, W)`` image.
    """
    a = np.asarray(arr, dtype=np.float32)
    if a.ndim == 3:
        a = a[None]
    if a.ndim != 4:
        raise ValueError(f"expected a 4-D (B, C, H, W) array, got shape {a.shape}")
    if min(a.shape) < 1:
        raise ValueError(f"empty dimension in shape {a.shape}")
    if a.shape[1] not in (1, 3, 4):
        raise ValueError(f"channel count must be 1, 3 or 4, got {a.shape[1]}")
    return a


def _read_ppm(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    tokens: list[bytes] = []
    pos = 0
    # header: magic, width, height, maxval, separated by whitespace and comments
    while len(tokens) < 4:
        if pos >= len(raw):
            raise ImageFormatError(f"{path}: truncated PPM header")
        c = raw[pos:pos + 1]
        if c == b"#":
            nl = raw.find(b"\n", pos)
            pos = len(raw) if nl < 0 else nl + 1
        elif c.isspace():
            pos += 1
        else:
            start = pos
            while pos < len(raw) and not raw[pos:pos + 1].isspace() and raw[pos:pos + 1] != b"#":
                pos += 1
            tokens.append(raw[start:pos])
    pos += 1  # single whitespace byte before the raster
    if tokens[0] != b"P6":
        raise ImageFormatError(f"{path}: not a binary PPM (P6) file")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise ImageFormatError(f"{path}: malformed PPM header") from None
    if maxval > 255:
        raise ImageFormatError(f"{path}: {maxval=} implies >8 bits per channel")
    if maxval < 1 or w < 1 or h < 1:
        raise ImageFormatError(f"{path}: malformed PPM header")
    data = raw[pos:pos + w * h * 3]
    if len(data) != w * h * 3:
        raise ImageFormatError(f"{path}: truncated PPM raster")
    px = np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3)
    if maxval != 255:
        # rescale to the 8-bit convention the rest of the package assumes
        px = np.round(px.astype(np.float64) * 255.0 / maxval).astype(np.uint8)
    return px


def _read_png(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode in ("I;16", "I;16B", "I;16L", "I", "F"):
                raise ImageFormatError(f"{path}: {mode} PNG has more than 8 bits per channel")
            if mode == "L":
                return np.asarray(im, dtype=np.uint8)[..., None]
            if mode == "LA":
                return np.asarray(im.convert("L"), dtype=np.uint8)[..., None]
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except ImageFormatError:
        raise
    except (OSError, ValueError) as exc:
        raise ImageFormatError(f"{path}: {exc}") from exc


def load_image(path) -> np.ndarray:
    """Read a PNG or binary PPM file into a ``(1, C, H, W)`` tensor in [0, 1].

    Grayscale PNGs load with one channel, everything else with three.
    """
    path = Path(path)
    if not path.is_file():
        raise ImageFormatError(f"{path}: no such file")
    suffix = path.suffix.lower()
    if suffix == ".ppm":
        px = _read_ppm(path)
    elif suffix == ".png":
        px = _read_png(path)
    else:
        raise ImageFormatError(f"{path}: unsupported format {suffix!r}")
    img = px.astype(np.float32) / np.float32(255.0)
    return np.ascontiguousarray(img.transpose(2, 0, 1)[None])


def to_bytes(img) -> np.ndarray:
    """Clamp to [0, 1] and quantize with ``round(v * 255)``; returns ``(H, W, C)`` uint8."""
    a = as_image_tensor(img)
    if a.shape[0] != 1:
        raise ValueError(f"expected batch size 1, got {a.shape[0]}")
    a = np.clip(a[0].astype(np.float64), 0.0, 1.0)
    return np.round(a * 255.0).astype(np.uint8).transpose(1, 2, 0)


def save_image(img, path) -> None:
    """Write a 1- or 3-channel single image to PNG or PPM (chosen by suffix)."""
    path = Path(path)
    px = to_bytes(img)
    if px.shape[2] not in (1, 3):
        raise ValueError(f"can only save 1- or 3-channel images, got {px.shape[2]}")
    suffix = path.suffix.lower()
    try:
        if suffix == ".ppm":
            if px.shape[2] == 1:
                px = np.repeat(px, 3, axis=2)
            h, w, _ = px.shape
            with open(path, "wb") as fh:
                fh.write(b"P6\n%d %d\n255\n" % (w, h))
                fh.write(px.tobytes())
        elif suffix == ".png":
            mode = "L" if px.shape[2] == 1 else "RGB"
            Image.fromarray(px[..., 0] if mode == "L" else px, mode=mode).save(path)
        else:
            raise ImageFormatError(f"{path}: unsupported format {suffix!r}")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


@dataclass
class PairedDataset:
    root: Path
    pairs: list[tuple[Path, Path]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.pairs)

    def load(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Decode every pair, checking that partners have equal spatial size."""
        out = []
        for low_path, high_path in self.pairs:
            low, high = load_image(low_path), load_image(high_path)
            if low.shape[2:] != high.shape[2:]:
                raise DatasetError(
                    f"{low_path.name}: low {low.shape[2:]} and high {high.shape[2:]} differ in size")
            out.append((low, high))
        return out


def _image_names(d: Path) -> set[str]:
    return {p.name for p in d.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES}


def scan_dataset(root) -> PairedDataset:
    """Pair ``root/low/<name>`` with ``root/high/<name>``.

    Files without a partner are logged and skipped; pairs come back sorted
    by filename.
    """
    root = Path(root)
    low_dir, high_dir = root / "low", root / "high"
    for d in (low_dir, high_dir):
        if not d.is_dir():
            raise DatasetError(f"{root}: missing subdirectory {d.name}/")
    low, high = _image_names(low_dir), _image_names(high_dir)
    for name in sorted(low - high):
        log.warning("skipping low/%s: no partner in high/", name)
    for name in sorted(high - low):
        log.warning("skipping high/%s: no partner in low/", name)
    names = sorted(low & high)
    if not names:
        raise DatasetError(f"{root}: zero matched low/high pairs")
    return PairedDataset(root=root, pairs=[(low_dir / n, high_dir / n) for n in names])


def list_images(path) -> list[Path]:
    """A single image file, or every supported image in a directory (sorted)."""
    path = Path(path)
    if path.is_dir():
        return sorted((p for p in path.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES),
                      key=lambda p: p.name)
    return [path]


def crop_offsets(shape: tuple[int, int], patch: int, count: int, rng: np.random.Generator):
    """Draw ``count`` top-left corners: all rows first, then all columns."""
    h, w = shape
    if h < patch or w < patch:
        raise ValueError(f"image {h}x{w} is smaller than patch {patch}")
    ys = rng.integers(0, h - patch + 1, size=count)
    xs = rng.integers(0, w - patch + 1, size=count)
    return list(zip(ys.tolist(), xs.tolist()))


def sample_patches(pair, patch: int, count: int, seed: int):
    """Random aligned crops from a (low, high) pair.

    Offsets come from ``numpy.random.default_rng(seed)`` via
    :func:`crop_offsets`. Returns ``(low_batch, high_batch, offsets)``.
    """
    low, high = (as_image_tensor(x) for x in pair)
    if low.shape[2:] != high.shape[2:]:
        raise ValueError("low and high images differ in spatial size")
    offsets = crop_offsets(low.shape[2:], patch, count, np.random.default_rng(seed))
    lows = [low[0, :, y:y + patch, x:x + patch] for y, x in offsets]
    highs = [high[0, :, y:y + patch, x:x + patch] for y, x in offsets]
    return np.stack(lows), np.stack(highs), offsets


def worker_count() -> int:
    """Worker cap from ``BLNET_THREADS`` (default 1)."""
    try:
        return max(1, int(os.environ.get("BLNET_THREADS", "1")))
    except ValueError:
        return 1
