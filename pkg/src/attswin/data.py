"""Synthetic lesion images and netpbm dataset directories."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

IMG_SUFFIXES = ("_img.ppm", "_img.pgm")
MASK_SUFFIX = "_mask.pgm"


class DatasetError(ValueError):
    pass


@dataclass
class Sample:
    image: np.ndarray  # (H, W, ch) float32 in [0, 1]
    mask: np.ndarray  # (H, W) uint8 in {0, 1}
    name: str = ""

    def __post_init__(self):
        if self.image.shape[:2] != self.mask.shape:
            raise DatasetError(f"{self.name}: image {self.image.shape} vs mask {self.mask.shape}")
        if not np.isin(self.mask, (0, 1)).all():
            raise DatasetError(f"{self.name}: mask is not binary")


def stack(samples: list[Sample]) -> tuple[np.ndarray, np.ndarray]:
    return (np.stack([s.image for s in samples]).astype(np.float32),
            np.stack([s.mask for s in samples]).astype(np.int64))


def _blob(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    cy, cx = rng.uniform(0.3, 0.7) * h, rng.uniform(0.3, 0.7) * w
    ry, rx = rng.uniform(0.15, 0.35) * h, rng.uniform(0.15, 0.35) * w
    theta = rng.uniform(0, np.pi)
    harmonics = [(k, rng.uniform(0, 0.12), rng.uniform(0, 2 * np.pi)) for k in range(2, 6)]
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    phi = np.arctan2(v / ry, u / rx)
    radius = np.hypot(u / rx, v / ry)
    boundary = 1.0 + sum(a * np.cos(k * phi + p) for k, a, p in harmonics)
    return radius <= boundary


def synth_lesions(n: int, height: int, width: int, seed: int, channels: int = 3) -> list[Sample]:
    """Dark irregular elliptical blobs on a lighter noisy background."""
    if n < 1:
        raise ValueError("synth_lesions: n must be at least 1")
    if height < 8 or width < 8:
        raise ValueError(f"synth_lesions: image {height}x{width} is smaller than 8x8")
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n):
        mask = _blob(rng, height, width)
        while not 0 < mask.mean() < 0.9:
            mask = _blob(rng, height, width)
        background = rng.uniform(0.6, 0.9, size=channels)
        yy, xx = np.mgrid[0:height, 0:width]
        tilt = rng.uniform(-0.05, 0.05, size=2)
        shading = tilt[0] * (yy / height - 0.5) + tilt[1] * (xx / width - 0.5)
        depth = rng.uniform(0.25, 0.5) * rng.uniform(0.8, 1.0, size=channels)
        img = background[None, None, :] + shading[..., None]
        img = img - depth[None, None, :] * mask[..., None]
        img = img + rng.normal(0.0, 0.04, size=img.shape)
        samples.append(Sample(np.clip(img, 0, 1).astype(np.float32),
                              mask.astype(np.uint8), f"synth{i:04d}"))
    return samples


def _to_unit(img: Image.Image, path: Path) -> np.ndarray:
    arr = np.asarray(img)
    if arr.dtype == np.uint8:
        return arr.astype(np.float32) / 255.0
    if np.issubdtype(arr.dtype, np.integer):
        return arr.astype(np.float32) / 65535.0
    raise DatasetError(f"{path}: unsupported pixel format {img.mode}")


def resize_bilinear(channel: np.ndarray, size: int) -> np.ndarray:
    if channel.shape == (size, size):
        return channel.astype(np.float32)
    im = Image.fromarray(channel.astype(np.float32), mode="F")
    return np.asarray(im.resize((size, size), Image.Resampling.BILINEAR), dtype=np.float32)


def resize_nearest(channel: np.ndarray, size: int) -> np.ndarray:
    if channel.shape == (size, size):
        return channel
    im = Image.fromarray(channel.astype(np.float32), mode="F")
    return np.asarray(im.resize((size, size), Image.Resampling.NEAREST))


def resize_samples(samples: list[Sample], size: int) -> list[Sample]:
    out = []
    for s in samples:
        img = np.stack([resize_bilinear(s.image[..., c], size) for c in range(s.image.shape[-1])], -1)
        mask = (resize_nearest(s.mask.astype(np.float32), size) > 0.5).astype(np.uint8)
        out.append(Sample(np.clip(img, 0, 1), mask, s.name))
    return out


def _open(path: Path) -> Image.Image:
    try:
        img = Image.open(path)
        img.load()
    except Exception as exc:  # Pillow raises several unrelated types
        raise DatasetError(f"{path}: unreadable image ({exc})") from exc
    return img


def load_dataset(path: str | Path, size: int, channels: int = 3) -> list[Sample]:
    """Read ``<name>_img.ppm|pgm`` / ``<name>_mask.pgm`` pairs, resized to size x size."""
    root = Path(path)
    if not root.is_dir():
        raise DatasetError(f"{root}: dataset directory does not exist")
    images, masks = {}, {}
    for f in sorted(root.iterdir()):
        for suffix in IMG_SUFFIXES:
            if f.name.endswith(suffix):
                images[f.name[: -len(suffix)]] = f
        if f.name.endswith(MASK_SUFFIX):
            masks[f.name[: -len(MASK_SUFFIX)]] = f
    for name in sorted(set(images) ^ set(masks)):
        raise DatasetError(f"{images.get(name) or masks.get(name)}: has no matching image/mask file")
    if not images:
        raise DatasetError(f"{root}: no image/mask pairs found")
    samples = []
    for name in sorted(images):
        img = _to_unit(_open(images[name]), images[name])
        if img.ndim == 2:
            img = img[..., None]
        if img.shape[-1] != channels:
            img = np.repeat(img[..., :1], channels, axis=-1) if img.shape[-1] == 1 else None
            if img is None:
                raise DatasetError(f"{images[name]}: cannot convert to {channels} channels")
        img = np.stack([resize_bilinear(img[..., c], size) for c in range(channels)], axis=-1)
        raw = _to_unit(_open(masks[name]), masks[name])
        if raw.ndim == 3:
            raise DatasetError(f"{masks[name]}: mask must be single-channel")
        mask = (resize_nearest(raw * 255.0, size) > 127).astype(np.uint8)
        samples.append(Sample(np.clip(img, 0, 1).astype(np.float32), mask, name))
    return samples


def write_mask(path: str | Path, mask: np.ndarray) -> None:
    """Binary P5 file with values 0 / 255."""
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255, mode="L").save(path, format="PPM")


def write_image(path: str | Path, image: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim == 3 and arr.shape[-1] == 1:
        arr = arr[..., 0]
    Image.fromarray(arr, mode="L" if arr.ndim == 2 else "RGB").save(path, format="PPM")


def write_dataset(path: str | Path, samples: list[Sample]) -> list[Path]:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    written = []
    for s in samples:
        ext = "pgm" if s.image.shape[-1] == 1 else "ppm"
        img_path, mask_path = root / f"{s.name}_img.{ext}", root / f"{s.name}{MASK_SUFFIX}"
        write_image(img_path, s.image)
        write_mask(mask_path, s.mask)
        written += [img_path, mask_path]
    return written
