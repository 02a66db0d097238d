"""Attention on the skip path: encoder-map transfer and global-token cross attention."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import Linear, Module
from .swin import AttentionMap, SwinBlock
from .tensor import ShapeError, Tensor, concat, concat_channels, matmul, mean_tokens, softmax_last


@dataclass
class SkipBundle:
    """What one encoder stage hands to the decoder stage at the same scale."""

    scale: int
    tokens: Tensor
    maps: tuple[AttentionMap, AttentionMap] | None = None
    height: int = 0
    width: int = 0


class CrossContextualAttention(Module):
    """Decoder global token queries [skip global token || decoder tokens].

    The single aggregated token per head is projected back to C and added to
    every decoder token.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ShapeError(f"channels {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.w_query = Linear(dim, dim, rng, bias=False)
        self.w_key = Linear(dim, dim, rng, bias=False)
        self.w_value = Linear(dim, dim, rng, bias=False)
        self.proj = Linear(dim, dim, rng)

    def context(self, z_skip: Tensor, z_dec: Tensor) -> tuple[Tensor, Tensor]:
        """Per-head aggregated token (B, 1, C) and the weights A (B, heads, 1, N+1)."""
        if z_skip.shape != z_dec.shape:
            raise ShapeError(
                f"cross attention: skip {z_skip.shape} vs decoder {z_dec.shape}"
            )
        b, n, c = z_dec.shape
        h, d = self.heads, c // self.heads
        skip_global = mean_tokens(z_skip).reshape(b, 1, c)
        dec_global = mean_tokens(z_dec).reshape(b, 1, c)
        fused = concat([skip_global, z_dec], axis=1)
        q = self.w_query(dec_global).reshape(b, 1, h, d).transpose(0, 2, 1, 3)
        k = self.w_key(fused).reshape(b, n + 1, h, d).transpose(0, 2, 1, 3)
        v = self.w_value(fused).reshape(b, n + 1, h, d).transpose(0, 2, 1, 3)
        attn = softmax_last(matmul(q, k.swap_last()) * (1.0 / np.sqrt(d)))
        ca = matmul(attn, v).transpose(0, 2, 1, 3).reshape(b, 1, c)
        return ca, attn

    def __call__(self, z_skip: Tensor, z_dec: Tensor) -> Tensor:
        ca, _ = self.context(z_skip, z_dec)
        return z_dec + self.proj(ca)


class SkipFusion(Module):
    """Channel concat [skip || decoder] then linear 2C -> C."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.linear = Linear(2 * dim, dim, rng)

    def __call__(self, z_skip: Tensor, z_dec: Tensor) -> Tensor:
        if z_skip.shape != z_dec.shape:
            raise ShapeError(f"fuse_skip: skip {z_skip.shape} vs decoder {z_dec.shape}")
        return self.linear(concat_channels(z_skip, z_dec))


def spatial_attention_transfer(
    blocks: list[SwinBlock],
    z: Tensor,
    bundle: SkipBundle | None,
    normalize_transfer: bool = False,
) -> tuple[Tensor, list[tuple[AttentionMap, AttentionMap]]]:
    """Run a decoder stage, adding the encoder's maps into every block's attention.

    The encoder W-MSA map feeds each W-MSA sub-block and the SW-MSA map each
    SW-MSA sub-block. Without a bundle (or without maps) this is the plain stage.
    """
    external = None
    label = ""
    if bundle is not None and bundle.maps is not None:
        external = (bundle.maps[0].values, bundle.maps[1].values)
        label = f"decoder scale {bundle.scale}"
    maps = []
    for block in blocks:
        z, pair = block(z, external, normalize_transfer, label)
        maps.append(pair)
    return z, maps
