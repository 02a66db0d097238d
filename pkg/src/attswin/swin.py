"""Window attention and the two-sub-block Swin transformer block."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import DTYPE, LayerNorm, Linear, Module, trunc_normal
from .tensor import Parameter, ShapeError, Tensor, gelu, matmul, roll, softmax_last

MASK_VALUE = -100.0


class SkipTransferError(ValueError):
    """An injected encoder attention map does not fit the decoder windows."""


@dataclass(frozen=True)
class WindowGrid:
    height: int
    width: int
    window: int
    shift: int = 0

    def __post_init__(self):
        if self.window < 1 or self.height % self.window or self.width % self.window:
            raise ShapeError(
                f"grid {self.height}x{self.width} is not divisible by window {self.window}"
            )
        if not 0 <= self.shift < self.window:
            raise ShapeError(f"shift {self.shift} must lie in [0, {self.window})")

    @classmethod
    def for_stage(cls, height: int, width: int, window: int, shifted: bool) -> "WindowGrid":
        """Clamp the window to small grids; a grid no larger than one window never shifts."""
        if min(height, width) <= window:
            window = min(height, width)
            shifted = False
        return cls(height, width, window, window // 2 if shifted else 0)

    @property
    def tokens(self) -> int:
        return self.height * self.width

    @property
    def num_windows(self) -> int:
        return (self.height // self.window) * (self.width // self.window)

    @property
    def window_area(self) -> int:
        return self.window * self.window


@dataclass
class AttentionMap:
    """Post-softmax window attention of one sub-block, (B*windows, heads, M^2, M^2)."""

    kind: str
    values: Tensor
    scale: int | None = None
    combined: Tensor | None = None


def window_partition(z: Tensor, grid: WindowGrid) -> Tensor:
    """(B, H*W, C) -> (B*windows, M*M, C), tiles and tokens in row-major order."""
    b, n, c = z.shape
    if n != grid.tokens:
        raise ShapeError(f"window_partition: {n} tokens for a {grid.height}x{grid.width} grid")
    m = grid.window
    x = z.reshape(b, grid.height // m, m, grid.width // m, m, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b * grid.num_windows, m * m, c)


def window_reverse(w: Tensor, grid: WindowGrid) -> Tensor:
    """Inverse of :func:`window_partition`."""
    bw, t, c = w.shape
    if bw % grid.num_windows or t != grid.window_area:
        raise ShapeError(
            f"window_reverse: {bw} windows of {t} tokens do not tile a "
            f"{grid.height}x{grid.width} grid with window {grid.window}"
        )
    b = bw // grid.num_windows
    m = grid.window
    x = w.reshape(b, grid.height // m, grid.width // m, m, m, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, grid.tokens, c)


def cyclic_shift(z: Tensor, grid: WindowGrid, direction: int) -> Tensor:
    """Roll the token grid by (-s, -s) for direction +1 and (+s, +s) for -1."""
    if direction not in (1, -1):
        raise ValueError("direction must be +1 or -1")
    s = grid.shift
    if s == 0:
        return z
    b, n, c = z.shape
    x = z.reshape(b, grid.height, grid.width, c)
    x = roll(x, (-direction * s, -direction * s), (1, 2))
    return x.reshape(b, n, c)


def shifted_attention_mask(grid: WindowGrid) -> np.ndarray:
    """Additive mask (windows, M^2, M^2): 0 within a pre-shift region, -100 across."""
    if grid.shift == 0:
        raise ValueError("shifted_attention_mask: shift is zero, no mask applies")
    m, s = grid.window, grid.shift
    labels = np.zeros((grid.height, grid.width), dtype=np.int64)
    bands = (slice(0, -m), slice(-m, -s), slice(-s, None))
    region = 0
    for hs in bands:
        for ws in bands:
            labels[hs, ws] = region
            region += 1
    tiles = labels.reshape(grid.height // m, m, grid.width // m, m).transpose(0, 2, 1, 3)
    tiles = tiles.reshape(grid.num_windows, m * m)
    same = tiles[:, :, None] == tiles[:, None, :]
    return np.where(same, 0.0, MASK_VALUE).astype(DTYPE)


def relative_position_index(window: int) -> np.ndarray:
    """(M^2, M^2) row of the (2M-1)^2 bias table for each patch pair."""
    coords = np.stack(np.meshgrid(np.arange(window), np.arange(window), indexing="ij"))
    flat = coords.reshape(2, -1)
    rel = flat[:, :, None] - flat[:, None, :] + (window - 1)
    return rel[0] * (2 * window - 1) + rel[1]


class WindowAttention(Module):
    """Windowed multi-head self-attention with a relative position bias table."""

    def __init__(self, dim: int, heads: int, window: int, rng: np.random.Generator):
        if dim % heads:
            raise ShapeError(f"channels {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.window = window
        self.head_dim = dim // heads
        self.scale = self.head_dim ** -0.5
        self.qkv = Linear(dim, 3 * dim, rng)
        self.proj = Linear(dim, dim, rng)
        self.bias_table = Parameter(trunc_normal(rng, ((2 * window - 1) ** 2, heads)))
        self._index = relative_position_index(window).reshape(-1)

    def position_bias(self) -> Tensor:
        t = self.window * self.window
        b = self.bias_table[self._index].reshape(t, t, self.heads)
        return b.transpose(2, 0, 1)

    def __call__(
        self,
        w: Tensor,
        mask: np.ndarray | None = None,
        external_map: Tensor | None = None,
        normalize_transfer: bool = False,
        label: str = "",
    ) -> tuple[Tensor, Tensor, Tensor | None]:
        """Returns (projected output, softmax map A, A + external map or None)."""
        bw, t, c = w.shape
        h, d = self.heads, self.head_dim
        qkv = self.qkv(w).reshape(bw, t, 3, h, d).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        logits = matmul(q * self.scale, k.swap_last()) + self.position_bias()
        if mask is not None:
            nw = mask.shape[0]
            logits = logits.reshape(bw // nw, nw, h, t, t) + mask[None, :, None].astype(w.dtype)
            logits = logits.reshape(bw, h, t, t)
        attn = softmax_last(logits)
        weights = attn
        combined = None
        if external_map is not None:
            if external_map.shape != attn.shape:
                raise SkipTransferError(
                    f"{label or 'decoder'}: encoder map {external_map.shape} "
                    f"vs decoder attention {attn.shape}"
                )
            combined = attn + external_map
            if normalize_transfer:
                combined = combined * 0.5
            weights = combined
        out = matmul(weights, v).transpose(0, 2, 1, 3).reshape(bw, t, c)
        return self.proj(out), attn, combined


class Mlp(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


class SwinSubBlock(Module):
    """LN -> (S)W-MSA -> residual -> LN -> MLP -> residual."""

    def __init__(self, dim: int, heads: int, grid: WindowGrid, rng: np.random.Generator,
                 kind: str = "W-MSA"):
        self.grid = grid
        self.kind = kind
        self.norm1 = LayerNorm(dim)
        self.attn = WindowAttention(dim, heads, grid.window, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(dim, 4 * dim, rng)
        self._mask = shifted_attention_mask(grid) if grid.shift else None

    def __call__(
        self,
        z: Tensor,
        external_map: Tensor | None = None,
        normalize_transfer: bool = False,
        label: str = "",
    ) -> tuple[Tensor, AttentionMap]:
        b, n, c = z.shape
        if n != self.grid.tokens:
            raise ShapeError(f"{self.kind}: {n} tokens for a {self.grid.tokens}-token grid")
        x = cyclic_shift(self.norm1(z), self.grid, +1)
        w = window_partition(x, self.grid)
        out, attn, combined = self.attn(
            w, self._mask, external_map, normalize_transfer, label=f"{label} {self.kind}".strip()
        )
        x = cyclic_shift(window_reverse(out, self.grid), self.grid, -1)
        z_hat = x + z
        z_out = self.mlp(self.norm2(z_hat)) + z_hat
        return z_out, AttentionMap(self.kind, attn, combined=combined)


class SwinBlock(Module):
    """A W-MSA sub-block followed by a shifted-window sub-block."""

    def __init__(self, dim: int, heads: int, height: int, width: int, window: int,
                 rng: np.random.Generator):
        self.regular = SwinSubBlock(dim, heads, WindowGrid.for_stage(height, width, window, False), rng)
        self.shifted = SwinSubBlock(dim, heads, WindowGrid.for_stage(height, width, window, True), rng,
                                    kind="SW-MSA")

    def __call__(
        self,
        z: Tensor,
        external_maps: tuple[Tensor, Tensor] | None = None,
        normalize_transfer: bool = False,
        label: str = "",
    ) -> tuple[Tensor, tuple[AttentionMap, AttentionMap]]:
        ext_w, ext_sw = external_maps if external_maps is not None else (None, None)
        z, map_w = self.regular(z, ext_w, normalize_transfer, label)
        z, map_sw = self.shifted(z, ext_sw, normalize_transfer, label)
        return z, (map_w, map_sw)
