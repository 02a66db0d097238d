"""Att-SwinU-Net assembly, configuration and ablation switches."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .nn import Module
from .patches import FinalExpandHead, PatchEmbed, PatchExpand, PatchMerge
from .skip import CrossContextualAttention, SkipBundle, SkipFusion, spatial_attention_transfer
from .swin import AttentionMap, SwinBlock, WindowGrid
from .tensor import ShapeError, Tensor

NUM_STAGES = 3
MODEL_SCALES = ("tiny", "base", "large")


class ConfigError(ValueError):
    """A ModelConfig violates one of its invariants."""


@dataclass
class ModelConfig:
    img_size: int = 224
    in_chans: int = 3
    patch_size: int = 4
    embed_dim: int = 96
    depths: tuple[int, ...] = (2, 2, 2)
    bottleneck_depth: int = 2
    num_heads: tuple[int, ...] = (3, 6, 12)
    bottleneck_heads: int = 24
    window_size: int = 7
    num_classes: int = 2
    attn_skips: int = 3
    spatial_attention: bool = True
    cross_attention: bool = True
    normalize_transfer: bool = False
    model_scale: str = "tiny"

    def __post_init__(self):
        self.depths = tuple(int(d) for d in self.depths)
        self.num_heads = tuple(int(h) for h in self.num_heads)

    @classmethod
    def toy(cls, **overrides) -> "ModelConfig":
        base = dict(img_size=32, patch_size=2, embed_dim=16, window_size=4,
                    num_heads=(1, 2, 4), bottleneck_heads=8)
        base.update(overrides)
        return cls(**base)

    def stage_dim(self, scale: int) -> int:
        return self.embed_dim * 2 ** scale

    def stage_grid(self, scale: int) -> int:
        return self.img_size // self.patch_size // 2 ** scale

    def heads_at(self, scale: int) -> int:
        return self.bottleneck_heads if scale == NUM_STAGES else self.num_heads[scale]

    @property
    def attention_scales(self) -> tuple[int, ...]:
        """Decoder scales whose skip carries attention, shallowest first."""
        return tuple(range(self.attn_skips))

    def validate(self) -> None:
        def fail(msg: str):
            raise ConfigError(f"invalid ModelConfig: {msg}")

        if len(self.depths) != NUM_STAGES or len(self.num_heads) != NUM_STAGES:
            fail(f"depths and num_heads need {NUM_STAGES} entries")
        if self.patch_size < 1 or self.img_size % self.patch_size:
            fail(f"img_size {self.img_size} not divisible by patch_size {self.patch_size}")
        if (self.img_size // self.patch_size) % 2 ** NUM_STAGES:
            fail(f"token grid {self.img_size // self.patch_size} not divisible by 8 (three merges)")
        for d in (*self.depths, self.bottleneck_depth):
            if d < 2 or d % 2:
                fail(f"stage depth {d} must be a positive even number (W-MSA/SW-MSA pairs)")
        for s in range(NUM_STAGES + 1):
            dim, heads = self.stage_dim(s), self.heads_at(s)
            if heads < 1 or dim % heads:
                fail(f"channels {dim} at scale {s} not divisible by {heads} heads")
            g = self.stage_grid(s)
            try:
                WindowGrid.for_stage(g, g, self.window_size, True)
            except ShapeError:
                fail(f"scale {s} grid {g}x{g} incompatible with window {self.window_size}")
        if not 0 <= self.attn_skips <= NUM_STAGES:
            fail(f"attn_skips {self.attn_skips} outside 0..{NUM_STAGES}")
        if self.num_classes < 2:
            fail("num_classes must be at least 2")
        if self.model_scale not in MODEL_SCALES:
            fail(f"model_scale {self.model_scale!r} not in {MODEL_SCALES}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["depths"] = list(self.depths)
        d["num_heads"] = list(self.num_heads)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown ModelConfig keys: {unknown}")
        return cls(**d)


ABLATION_ROWS: dict[str, str] = {
    "skip1": "Using 1 skip connection",
    "skip2": "Using 2 skip connection",
    "skip3": "Using 3 skip connection",
    "input384": "Input image size 384x384",
    "large": "Large Model",
    "no_spatial": "Eliminating the spatial attention module",
    "no_cross": "Eliminating the cross contextual attention module",
}


def apply_ablation(cfg: ModelConfig, row: str, input_size: int = 384) -> ModelConfig:
    """Return ``cfg`` with exactly one ablation-table setting applied.

    ``row`` is a short id from ABLATION_ROWS or its label. ``input_size`` lets
    desk-scale sweeps substitute a size their token ladder supports.
    """
    labels = {v: k for k, v in ABLATION_ROWS.items()}
    key = labels.get(row, row)
    if key not in ABLATION_ROWS:
        raise KeyError(f"unknown ablation row {row!r}")
    if key.startswith("skip"):
        return dataclasses.replace(cfg, attn_skips=int(key[-1]))
    if key == "input384":
        resized = dataclasses.replace(cfg, img_size=input_size)
        try:
            resized.validate()
        except ConfigError:
            # window 7 does not tile 96/48/24/12 grids; Swin's 384 models use the bottleneck grid
            resized = dataclasses.replace(resized, window_size=resized.stage_grid(NUM_STAGES))
        return resized
    if key == "large":
        if cfg.model_scale == "large":
            return dataclasses.replace(cfg)
        return dataclasses.replace(
            cfg,
            embed_dim=cfg.embed_dim * 2,
            num_heads=tuple(h * 2 for h in cfg.num_heads),
            bottleneck_heads=cfg.bottleneck_heads * 2,
            model_scale="large",
        )
    if key == "no_spatial":
        return dataclasses.replace(cfg, spatial_attention=False)
    return dataclasses.replace(cfg, cross_attention=False)


@dataclass
class ForwardTrace:
    """Instrumentation filled by :meth:`AttSwinUNet.forward`."""

    encoder_maps: dict[int, tuple[AttentionMap, AttentionMap]] = field(default_factory=dict)
    decoder_maps: dict[int, list[tuple[AttentionMap, AttentionMap]]] = field(default_factory=dict)
    transfer_scales: list[int] = field(default_factory=list)
    cross_scales: list[int] = field(default_factory=list)
    bottleneck_shape: tuple[int, ...] = ()


class AttSwinUNet(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        C = cfg.embed_dim
        self.embed = PatchEmbed(cfg.patch_size, cfg.in_chans, C, rng)
        self.encoder = []
        self.merges = []
        for s in range(NUM_STAGES):
            g = cfg.stage_grid(s)
            self.encoder.append([
                SwinBlock(cfg.stage_dim(s), cfg.heads_at(s), g, g, cfg.window_size, rng)
                for _ in range(cfg.depths[s] // 2)
            ])
            self.merges.append(PatchMerge(cfg.stage_dim(s), rng))
        g = cfg.stage_grid(NUM_STAGES)
        self.bottleneck = [
            SwinBlock(cfg.stage_dim(NUM_STAGES), cfg.heads_at(NUM_STAGES), g, g, cfg.window_size, rng)
            for _ in range(cfg.bottleneck_depth // 2)
        ]
        # decoder lists are indexed by the scale they produce
        self.expands = [PatchExpand(cfg.stage_dim(s + 1), rng) for s in range(NUM_STAGES)]
        self.fusions = [SkipFusion(cfg.stage_dim(s), rng) for s in range(NUM_STAGES)]
        self.cross = [
            CrossContextualAttention(cfg.stage_dim(s), cfg.heads_at(s), rng)
            if cfg.cross_attention and s in cfg.attention_scales else None
            for s in range(NUM_STAGES)
        ]
        self.decoder = []
        for s in range(NUM_STAGES):
            g = cfg.stage_grid(s)
            self.decoder.append([
                SwinBlock(cfg.stage_dim(s), cfg.heads_at(s), g, g, cfg.window_size, rng)
                for _ in range(cfg.depths[s] // 2)
            ])
        self.final = FinalExpandHead(C, cfg.patch_size, cfg.num_classes, rng)
        self.assign_names()

    @property
    def dtype(self):
        return self.embed.proj.weight.dtype

    def _input(self, img) -> Tensor:
        x = img if isinstance(img, Tensor) else Tensor(np.asarray(img, dtype=self.dtype))
        if x.dtype != self.dtype:
            x = Tensor(x.data.astype(self.dtype))
        if x.ndim == 3:
            x = x.reshape(1, *x.shape)
        cfg = self.cfg
        if x.ndim != 4 or x.shape[1:] != (cfg.img_size, cfg.img_size, cfg.in_chans):
            raise ShapeError(
                f"forward: expected images (B, {cfg.img_size}, {cfg.img_size}, {cfg.in_chans}),"
                f" got {x.shape}"
            )
        return x

    def encode(self, img) -> tuple[Tensor, list[SkipBundle]]:
        z = self.embed(self._input(img))
        g = self.cfg.stage_grid(0)
        bundles = []
        for s in range(NUM_STAGES):
            maps = None
            for block in self.encoder[s]:
                z, maps = block(z)
            for m in maps:
                m.scale = s
            bundles.append(SkipBundle(s, z, maps, g, g))
            z = self.merges[s](z, g, g)
            g //= 2
        for block in self.bottleneck:
            z, _ = block(z)
        return z, bundles

    def forward(self, img, trace: ForwardTrace | None = None) -> Tensor:
        """Images (B, H, W, ch) -> logits (B, H, W, num_classes)."""
        cfg = self.cfg
        z, bundles = self.encode(img)
        if trace is not None:
            trace.bottleneck_shape = z.shape
            trace.encoder_maps = {b.scale: b.maps for b in bundles}
        g = cfg.stage_grid(NUM_STAGES)
        for s in reversed(range(NUM_STAGES)):
            z = self.expands[s](z, g, g)
            g *= 2
            skip = bundles[s]
            transfer = None
            if s in cfg.attention_scales:
                if self.cross[s] is not None:
                    z = self.cross[s](skip.tokens, z)
                    if trace is not None:
                        trace.cross_scales.append(s)
                if cfg.spatial_attention:
                    transfer = skip
                    if trace is not None:
                        trace.transfer_scales.append(s)
            z = self.fusions[s](skip.tokens, z)
            z, maps = spatial_attention_transfer(self.decoder[s], z, transfer, cfg.normalize_transfer)
            if trace is not None:
                for pair in maps:
                    for m in pair:
                        m.scale = s
                trace.decoder_maps[s] = maps
        return self.final(z, g, g)

    __call__ = forward


def forward_baseline(model: AttSwinUNet, img) -> Tensor:
    """Plain Swin-U-Net pass (concat + linear skips) over ``model``'s parameters."""
    cfg = model.cfg
    z, bundles = model.encode(img)
    g = cfg.stage_grid(NUM_STAGES)
    for s in reversed(range(NUM_STAGES)):
        z = model.expands[s](z, g, g)
        g *= 2
        z = model.fusions[s](bundles[s].tokens, z)
        for block in model.decoder[s]:
            z, _ = block(z)
    return model.final(z, g, g)


def build(cfg: ModelConfig, seed: int = 0) -> AttSwinUNet:
    return AttSwinUNet(cfg, seed)
