"""Inter-view compensation: warp the explicit basic-view frame, refine, fuse."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F


@dataclass
class CompensationOutput:
    warped: torch.Tensor | None
    refined: torch.Tensor | None
    fused: torch.Tensor


def backward_warp(src: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Bilinear sample ``src`` at ``(x + flow_x, y + flow_y)``, clamped to the border.

    ``src`` is (B, C, H, W), ``flow`` is (B, 2, H, W) with channel 0 = dx and
    channel 1 = dy in pixels.  Zero flow returns ``src`` bit-exactly.
    """
    if src.dim() != 4 or flow.dim() != 4 or flow.shape[1] != 2:
        raise ValueError(f"expected (B,C,H,W) src and (B,2,H,W) flow, got {tuple(src.shape)}, {tuple(flow.shape)}")
    b, c, h, w = src.shape
    if flow.shape[0] != b or flow.shape[2:] != (h, w):
        raise ValueError(f"flow {tuple(flow.shape)} does not match src {tuple(src.shape)}")
    ys = torch.arange(h, dtype=flow.dtype, device=flow.device).view(1, h, 1)
    xs = torch.arange(w, dtype=flow.dtype, device=flow.device).view(1, 1, w)
    sx = (xs + flow[:, 0]).clamp(0, w - 1)
    sy = (ys + flow[:, 1]).clamp(0, h - 1)
    x0 = sx.detach().floor()
    y0 = sy.detach().floor()
    wx = sx - x0
    wy = sy - y0
    x0 = x0.long()
    y0 = y0.long()
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)

    flat = src.reshape(b, c, h * w)

    def gather(yy, xx):
        idx = (yy * w + xx).reshape(b, 1, h * w).expand(b, c, h * w)
        return flat.gather(2, idx).reshape(b, c, h, w)

    wx = wx.unsqueeze(1)
    wy = wy.unsqueeze(1)
    top = (1 - wx) * gather(y0, x0) + wx * gather(y0, x1)
    bottom = (1 - wx) * gather(y1, x0) + wx * gather(y1, x1)
    return (1 - wy) * top + wy * bottom


def refine(warped: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None) -> torch.Tensor:
    """Residual 3x3 refinement, no activation."""
    return warped + F.conv2d(warped, weight, bias, padding=1)


def fuse(implicit: torch.Tensor, compensated: torch.Tensor, weight: torch.Tensor) -> torch.Tensor:
    return (implicit + weight * compensated).clamp(0.0, 1.0)


def reconstruct(model, j, t, explicit: torch.Tensor, params=None) -> CompensationOutput:
    """Final reconstruction for a coordinate batch.

    ``explicit`` holds the basic-view reconstructions as (T, 3, H, W); frame
    ``t`` is the warp source for coordinate ``(j, t)``.
    """
    p = model.effective() if params is None else params
    t = torch.as_tensor(t, dtype=torch.long).reshape(-1)
    rgb, flow, w = model(j, t, p)
    if not model.config.ivc:
        return CompensationOutput(None, None, rgb.clamp(0.0, 1.0))
    warped = backward_warp(explicit[t].to(flow.dtype), flow)
    refined = refine(warped, p["refine_weight"], p["refine_bias"])
    return CompensationOutput(warped, refined, fuse(rgb, refined, w))
