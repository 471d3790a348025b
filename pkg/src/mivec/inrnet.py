"""Implicit network mapping a (view, time) coordinate to a frame.

Feature path: multi-level temporal grids + view grid, summed, then a cascade of
Conv Blocks (3x3 conv -> depth-to-space -> + tiled per-view embedding -> GELU).
The last block feeds an RGB head and an auxiliary head producing 2-channel flow
and a 1-channel fusion weight.  A 3x3 refinement conv used by inter-view
compensation is owned here so that every trainable tensor lives in one model.

Grids keep the storage layout (entries, h, w, c); conv weights use the torch
(out, in, kh, kw) layout.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigurationError

LEVEL_STRIDES = (1, 2, 4)
MIN_CHANNELS = 12
GRID_INIT = 1e-2


@dataclass(frozen=True)
class BlockSpec:
    scale: int
    c_in: int
    c_out: int

    def __post_init__(self):
        if self.scale < 1:
            raise ConfigurationError(f"upscale factor must be >= 1, got {self.scale}")


def channel_schedule(c: int, num_blocks: int) -> list[int]:
    """First block keeps ``c``, later ones halve with a floor of 12."""
    chans = [c]
    for _ in range(num_blocks - 1):
        chans.append(max(chans[-1] // 2, MIN_CHANNELS))
    return chans


@dataclass(frozen=True)
class ModelConfig:
    """Architecture of an :class:`ImplicitModel`; also the serialized arch block."""

    height: int
    width: int
    num_frames: int
    num_views: int
    grid_h: int
    grid_w: int
    grid_c: int
    factors: tuple[int, ...] = (5, 3, 2, 2, 2)
    channels: tuple[int, ...] | None = None
    seed: int = 0
    grid_fea_t: bool = True
    grid_fea_v: bool = True
    grid_emb: bool = True
    ivc: bool = True

    def __post_init__(self):
        object.__setattr__(self, "factors", tuple(int(s) for s in self.factors))
        if self.channels is not None:
            object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
            if len(self.channels) != len(self.factors):
                raise ConfigurationError("channel override needs one entry per block")
        for name in ("height", "width", "num_frames", "num_views", "grid_h", "grid_w", "grid_c"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if not self.factors:
            raise ConfigurationError("at least one Conv Block is required")
        up = math.prod(self.factors)
        if self.grid_h * up != self.height or self.grid_w * up != self.width:
            raise ConfigurationError(
                f"grid {self.grid_h}x{self.grid_w} upscaled by {up} gives "
                f"{self.grid_h * up}x{self.grid_w * up}, frames are {self.height}x{self.width}"
            )

    @property
    def temporal_sizes(self) -> tuple[int, ...]:
        return tuple(math.ceil(self.num_frames / s) for s in LEVEL_STRIDES)

    @property
    def block_channels(self) -> list[int]:
        return list(self.channels) if self.channels else channel_schedule(self.grid_c, len(self.factors))

    @property
    def blocks(self) -> list[BlockSpec]:
        outs = self.block_channels
        ins = [self.grid_c] + outs[:-1]
        return [BlockSpec(s, ci, co) for s, ci, co in zip(self.factors, ins, outs)]

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        raw = json.loads(text)
        raw["factors"] = tuple(raw["factors"])
        if raw.get("channels") is not None:
            raw["channels"] = tuple(raw["channels"])
        return cls(**raw)

    @classmethod
    def for_resolution(cls, height, width, num_frames, num_views, grid_c, factors=(5, 3, 2, 2, 2), **kw):
        up = math.prod(factors)
        if height % up or width % up:
            raise ConfigurationError(
                f"{height}x{width} is not divisible by the total upscale {up}; pass grid size and factors"
            )
        return cls(height, width, num_frames, num_views, height // up, width // up, grid_c, tuple(factors), **kw)


# ---------------------------------------------------------------------------
# Functional building blocks
# ---------------------------------------------------------------------------


def temporal_lookup(grids: Sequence[torch.Tensor], t):
    """Sum the three temporal levels at ``t``, ``t // 2`` and ``t // 4``.

    ``t`` may be an int (returns h x w x c) or a LongTensor of indices (returns B x h x w x c).
    """
    if len(grids) != len(LEVEL_STRIDES):
        raise ValueError(f"expected {len(LEVEL_STRIDES)} temporal levels, got {len(grids)}")
    t = torch.as_tensor(t, dtype=torch.long)
    limit = grids[0].shape[0]
    if torch.any(t < 0) or torch.any(t >= limit):
        raise IndexError(f"time index outside [0, {limit})")
    out = grids[0][t]
    for g, stride in zip(grids[1:], LEVEL_STRIDES[1:]):
        out = out + g[torch.div(t, stride, rounding_mode="floor")]
    return out


def view_lookup(grid: torch.Tensor, j):
    j = torch.as_tensor(j, dtype=torch.long)
    if torch.any(j < 0) or torch.any(j >= grid.shape[0]):
        raise IndexError(f"view index outside [0, {grid.shape[0]})")
    return grid[j]


def fuse_features(fea_ti: torch.Tensor, fea_vi: torch.Tensor) -> torch.Tensor:
    if fea_ti.shape != fea_vi.shape:
        raise ValueError(f"feature shapes differ: {tuple(fea_ti.shape)} vs {tuple(fea_vi.shape)}")
    return fea_ti + fea_vi


def tile_embedding(emb: torch.Tensor, reps_h: int, reps_w: int) -> torch.Tensor:
    """(B, s, s, c) embedding -> (B, c, s*reps_h, s*reps_w) periodic map."""
    return emb.permute(0, 3, 1, 2).repeat(1, 1, reps_h, reps_w)


def conv_block_forward(
    fea: torch.Tensor,
    weight: torch.Tensor,
    bias: torch.Tensor | None,
    scale: int,
    emb: torch.Tensor | None,
) -> torch.Tensor:
    """GELU(DepthToSpace(Conv3x3(fea)) + Tile(emb)) on a (B, C, h, w) map."""
    x = F.pixel_shuffle(F.conv2d(fea, weight, bias, padding=1), scale)
    if emb is not None:
        if emb.dim() == 3:
            emb = emb.unsqueeze(0)
        if emb.shape[1:3] != (scale, scale) or emb.shape[-1] != x.shape[1]:
            raise ValueError(f"embedding {tuple(emb.shape)} does not fit block output {tuple(x.shape)}")
        x = x + tile_embedding(emb, fea.shape[2], fea.shape[3])
    return F.gelu(x)


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


def _uniform(shape, bound, gen):
    return (torch.rand(shape, generator=gen, dtype=torch.float64) * 2 - 1).mul_(bound).float()


class ImplicitModel(nn.Module):
    """Trainable (view, time) -> frame network.

    ``param_transform`` (set by quantization-aware training) maps
    ``(name, tensor)`` to the tensor actually used in the forward pass for every
    quantizable parameter.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.param_transform: Callable[[str, torch.Tensor], torch.Tensor] | None = None
        gen = torch.Generator().manual_seed(config.seed)
        h, w, c = config.grid_h, config.grid_w, config.grid_c

        def grid(name, entries, hh, ww, cc):
            self.register_parameter(name, nn.Parameter(_uniform((entries, hh, ww, cc), GRID_INIT, gen)))

        if config.grid_fea_t:
            for k, size in enumerate(config.temporal_sizes, 1):
                grid(f"grid_t{k}", size, h, w, c)
        if not (config.grid_fea_t and config.grid_fea_v):
            grid("grid_glo", 1, h, w, c)
        if config.grid_fea_v:
            grid("grid_view", config.num_views, h, w, c)
        if config.grid_emb:
            for k, blk in enumerate(config.blocks):
                grid(f"emb{k}", config.num_views, blk.scale, blk.scale, blk.c_out)

        def conv(name, c_in, c_out, zero=False):
            bound = 1.0 / math.sqrt(c_in * 9)
            shape = (c_out, c_in, 3, 3)
            wt = torch.zeros(shape) if zero else _uniform(shape, bound, gen)
            bs = torch.zeros(c_out) if zero else _uniform((c_out,), bound, gen)
            self.register_parameter(f"{name}_weight", nn.Parameter(wt))
            self.register_parameter(f"{name}_bias", nn.Parameter(bs))

        for k, blk in enumerate(config.blocks):
            conv(f"block{k}", blk.c_in, blk.c_out * blk.scale**2)
        last = config.blocks[-1].c_out
        conv("rgb_head", last, 3)
        conv("aux_head", last, 3)
        conv("refine", 3, 3, zero=True)

    # -- bookkeeping ---------------------------------------------------------

    @staticmethod
    def is_quantizable(name: str) -> bool:
        return not name.endswith("_bias")

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def effective(self) -> dict[str, torch.Tensor]:
        """Parameters as seen by the forward pass (after any fake quantization)."""
        out = {}
        for name, p in self.named_parameters():
            if self.param_transform is not None and self.is_quantizable(name):
                p = self.param_transform(name, p)
            out[name] = p
        return out

    # -- forward -------------------------------------------------------------

    def features(self, j, t, params=None) -> torch.Tensor:
        """Integrated grid features for coordinate batch, (B, c, h, w)."""
        p = self.effective() if params is None else params
        cfg = self.config
        j = torch.as_tensor(j, dtype=torch.long).reshape(-1)
        t = torch.as_tensor(t, dtype=torch.long).reshape(-1)
        if torch.any(t < 0) or torch.any(t >= cfg.num_frames):
            raise IndexError(f"time index outside [0, {cfg.num_frames})")
        if torch.any(j < 0) or torch.any(j >= cfg.num_views):
            raise IndexError(f"view index outside [0, {cfg.num_views})")
        # disabled grids are replaced by one globally shared tensor
        parts = []
        if cfg.grid_fea_t:
            parts.append(temporal_lookup([p["grid_t1"], p["grid_t2"], p["grid_t3"]], t))
        if cfg.grid_fea_v:
            parts.append(view_lookup(p["grid_view"], j))
        if "grid_glo" in p:
            parts.append(p["grid_glo"].expand(len(t), -1, -1, -1))
        fea = parts[0]
        for extra in parts[1:]:
            fea = fuse_features(fea, extra)
        return fea.permute(0, 3, 1, 2)

    def trunk(self, j, t, params=None) -> torch.Tensor:
        p = self.effective() if params is None else params
        j = torch.as_tensor(j, dtype=torch.long).reshape(-1)
        x = self.features(j, t, p)
        for k, blk in enumerate(self.config.blocks):
            emb = p[f"emb{k}"][j] if self.config.grid_emb else None
            x = conv_block_forward(x, p[f"block{k}_weight"], p[f"block{k}_bias"], blk.scale, emb)
        return x

    def forward(self, j, t, params=None):
        """Returns (rgb, flow, weight) shaped (B,3,H,W), (B,2,H,W), (B,1,H,W)."""
        p = self.effective() if params is None else params
        x = self.trunk(j, t, p)
        rgb = F.conv2d(x, p["rgb_head_weight"], p["rgb_head_bias"], padding=1)
        aux = F.conv2d(x, p["aux_head_weight"], p["aux_head_bias"], padding=1)
        return rgb, aux[:, :2], torch.sigmoid(aux[:, 2:3])


def init_model(config: ModelConfig) -> ImplicitModel:
    return ImplicitModel(config)


def parameter_breakdown(model: ImplicitModel) -> dict[str, int]:
    return {name: p.numel() for name, p in model.named_parameters()}
