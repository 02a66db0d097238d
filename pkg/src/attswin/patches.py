"""Patch embedding, merging (downsampling), expanding (upsampling) and the head."""
from __future__ import annotations

import numpy as np

from .nn import LayerNorm, Linear, Module
from .tensor import ShapeError, Tensor


class PatchEmbed(Module):
    """Non-overlapping p x p patches, flattened row-major channel-last, projected to C."""

    def __init__(self, patch: int, in_chans: int, dim: int, rng: np.random.Generator):
        self.patch = patch
        self.in_chans = in_chans
        self.proj = Linear(patch * patch * in_chans, dim, rng)
        self.norm = LayerNorm(dim)

    def __call__(self, img: Tensor) -> Tensor:
        b, h, w, ch = img.shape
        p = self.patch
        if h % p or w % p:
            raise ShapeError(f"patch_embed: image {h}x{w} not divisible by patch size {p}")
        if ch != self.in_chans:
            raise ShapeError(f"patch_embed: expected {self.in_chans} channels, got {ch}")
        x = img.reshape(b, h // p, p, w // p, p, ch).transpose(0, 1, 3, 2, 4, 5)
        x = x.reshape(b, (h // p) * (w // p), p * p * ch)
        return self.norm(self.proj(x))


def merge_gather(z: Tensor, height: int, width: int) -> Tensor:
    """(B, H*W, C) -> (B, H*W/4, 4C) in the order
    (even row, even col), (odd row, even col), (even row, odd col), (odd row, odd col)."""
    b, n, c = z.shape
    if height % 2 or width % 2:
        raise ShapeError(f"patch_merge: grid {height}x{width} has an odd extent")
    if n != height * width:
        raise ShapeError(f"patch_merge: {n} tokens for a {height}x{width} grid")
    x = z.reshape(b, height // 2, 2, width // 2, 2, c)
    # axes -> (B, H/2, W/2, col offset, row offset, C)
    x = x.transpose(0, 1, 3, 4, 2, 5)
    return x.reshape(b, n // 4, 4 * c)


def expand_rearrange(x: Tensor, height: int, width: int, factor: int) -> Tensor:
    """(B, H*W, f*f*c) -> (B, H*f*W*f, c); channel group g lands at offset divmod(g, f)."""
    b, n, cc = x.shape
    c = cc // (factor * factor)
    x = x.reshape(b, height, width, factor, factor, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, n * factor * factor, c)


class PatchMerge(Module):
    def __init__(self, dim: int, rng: np.random.Generator):
        self.norm = LayerNorm(4 * dim)
        self.reduction = Linear(4 * dim, 2 * dim, rng, bias=False)

    def __call__(self, z: Tensor, height: int, width: int) -> Tensor:
        return self.reduction(self.norm(merge_gather(z, height, width)))


class PatchExpand(Module):
    """Linear C -> 2C, then each token's channels unfold into a 2x2 block of C/2."""

    def __init__(self, dim: int, rng: np.random.Generator):
        if (2 * dim) % 4:
            raise ShapeError(f"patch_expand: 2*{dim} channels not divisible by 4")
        self.expand = Linear(dim, 2 * dim, rng, bias=False)
        self.norm = LayerNorm(dim // 2)

    def __call__(self, z: Tensor, height: int, width: int) -> Tensor:
        return self.norm(expand_rearrange(self.expand(z), height, width, 2))


class FinalExpandHead(Module):
    """x patch-size spatial expansion followed by a per-pixel linear classifier."""

    def __init__(self, dim: int, factor: int, num_classes: int, rng: np.random.Generator):
        self.factor = factor
        self.expand = Linear(dim, factor * factor * dim, rng, bias=False)
        self.norm = LayerNorm(dim)
        self.head = Linear(dim, num_classes, rng)

    def __call__(self, z: Tensor, height: int, width: int) -> Tensor:
        f = self.factor
        x = self.norm(expand_rearrange(self.expand(z), height, width, f))
        logits = self.head(x)
        return logits.reshape(z.shape[0], height * f, width * f, logits.shape[-1])
