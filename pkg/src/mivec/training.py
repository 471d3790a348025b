"""Fitting the implicit model and its quantization-aware fine-tuning."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from . import ivc, metrics, modelzip
from .errors import TrainingDivergedError, ValidationError
from .inrnet import ImplicitModel
from .seqdata import MultiViewSequence

logger = logging.getLogger(__name__)

QMAX = 127


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    batch_size: int = 2
    lr: float = 5e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    alpha: float = 0.7
    seed: int = 0
    qat_epochs: int = 30
    prune_fraction: float = 0.4

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValidationError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not 0.0 <= self.prune_fraction < 1.0:
            raise ValidationError(f"prune_fraction must lie in [0, 1), got {self.prune_fraction}")
        if self.epochs < 0 or self.qat_epochs < 0 or self.batch_size < 1:
            raise ValidationError("epochs must be >= 0 and batch_size >= 1")


@dataclass
class TrainReport:
    epoch_losses: list[float] = field(default_factory=list)
    view_psnr: dict[int, float] = field(default_factory=dict)
    view_ssim: dict[int, float] = field(default_factory=dict)
    wall_clock: float = 0.0
    parameter_count: int = 0

    @property
    def epochs(self) -> int:
        return len(self.epoch_losses)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(list(self.view_psnr.values()))) if self.view_psnr else float("nan")


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def _gauss_kernel(dtype, size=metrics.SSIM_WIN, sigma=metrics.SSIM_SIGMA):
    return torch.as_tensor(metrics.gaussian_window(size, sigma), dtype=dtype)


def ssim_torch(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Differentiable SSIM of (B, C, H, W) images in [0, 1]; one value per image.

    Same window and constants as :func:`mivec.metrics.ssim`, on the unit scale.
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    bsz, ch = a.shape[:2]
    g = _gauss_kernel(a.dtype)
    kx = g.view(1, 1, 1, -1).repeat(ch, 1, 1, 1)
    ky = g.view(1, 1, -1, 1).repeat(ch, 1, 1, 1)

    def blur(x):
        return F.conv2d(F.conv2d(x, kx, groups=ch), ky, groups=ch)

    c1 = metrics.SSIM_K1**2
    c2 = metrics.SSIM_K2**2
    mx, my = blur(a), blur(b)
    sxx = blur(a * a) - mx * mx
    syy = blur(b * b) - my * my
    sxy = blur(a * b) - mx * my
    smap = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
    return smap.mean(dim=(1, 2, 3))


def joint_loss(gt: torch.Tensor, pred: torch.Tensor, alpha: float) -> torch.Tensor:
    """alpha * L1 + (1 - alpha) * (1 - SSIM), averaged over the batch."""
    if gt.shape != pred.shape:
        raise ValueError(f"shape mismatch: {tuple(gt.shape)} vs {tuple(pred.shape)}")
    if gt.dim() == 3:
        gt, pred = gt.unsqueeze(0), pred.unsqueeze(0)
    l1 = (gt - pred).abs().mean(dim=(1, 2, 3))
    loss = alpha * l1
    if alpha < 1.0:
        loss = loss + (1.0 - alpha) * (1.0 - ssim_torch(gt, pred))
    return loss.mean()


# ---------------------------------------------------------------------------
# Straight-through fake quantization
# ---------------------------------------------------------------------------


class _FakeQuant(torch.autograd.Function):
    @staticmethod
    def forward(ctx, d, qmax):
        return fake_quantize(d, qmax)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output, None


def fake_quantize(d: torch.Tensor, qmax: int = QMAX) -> torch.Tensor:
    """Dequantized value level / qmax; levels computed in float64 like modelzip.quantize."""
    dd = d.detach().double()
    level = torch.sign(dd) * torch.floor(dd.tanh().abs() * qmax)
    return (level.to(d.dtype) / qmax).to(d.dtype)


def ste(d: torch.Tensor, qmax: int = QMAX) -> torch.Tensor:
    return _FakeQuant.apply(d, qmax)


def ste_quantize_params(model: ImplicitModel, qmax: int = QMAX) -> ImplicitModel:
    """Turn on fake quantization of every quantizable tensor in the forward pass."""
    model.param_transform = lambda name, p: ste(p, qmax)
    return model


def clear_fake_quant(model: ImplicitModel) -> ImplicitModel:
    model.param_transform = None
    return model


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def frames_to_tensor(frames: np.ndarray) -> torch.Tensor:
    """(..., H, W, 3) numpy -> (..., 3, H, W) float32 tensor."""
    x = torch.from_numpy(np.array(frames, dtype=np.float32, copy=True))
    return x.movedim(-1, -3).contiguous()


def training_coordinates(num_views: int, num_frames: int, basic_index: int) -> list[tuple[int, int]]:
    return [(j, t) for j in range(num_views) if j != basic_index for t in range(num_frames)]


@torch.no_grad()
def render(model: ImplicitModel, explicit: torch.Tensor, coords, batch_size: int = 4) -> np.ndarray:
    """Final fused reconstructions for ``coords`` as (len, H, W, 3) float32."""
    out = []
    for start in range(0, len(coords), batch_size):
        chunk = coords[start:start + batch_size]
        j = torch.tensor([c[0] for c in chunk])
        t = torch.tensor([c[1] for c in chunk])
        fused = ivc.reconstruct(model, j, t, explicit).fused
        out.append(fused.movedim(1, -1).numpy())
    if not out:
        return np.zeros((0,) + tuple(explicit.shape[-2:]) + (3,), np.float32)
    return np.concatenate(out).astype(np.float32, copy=False)


def evaluate(model: ImplicitModel, seq: MultiViewSequence, basic_index: int, explicit_recon: np.ndarray):
    """Per-view PSNR / SSIM of the final reconstructions of every non-basic view."""
    explicit = frames_to_tensor(explicit_recon)
    psnrs, ssims = {}, {}
    for j in range(seq.num_views):
        if j == basic_index:
            continue
        rec = render(model, explicit, [(j, t) for t in range(seq.num_frames)])
        psnrs[j] = float(np.mean([metrics.psnr(seq.frames[j, t], rec[t]) for t in range(seq.num_frames)]))
        ssims[j] = float(np.mean([metrics.ssim(seq.frames[j, t], rec[t]) for t in range(seq.num_frames)]))
    return psnrs, ssims


def _apply_masks(model: ImplicitModel, masks: dict[str, torch.Tensor] | None) -> None:
    if not masks:
        return
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name in masks:
                p.mul_(masks[name])


def train(
    model: ImplicitModel,
    seq: MultiViewSequence,
    basic_index: int,
    explicit_recon: np.ndarray,
    cfg: TrainConfig,
    epochs: int | None = None,
    masks: dict[str, torch.Tensor] | None = None,
    evaluate_at_end: bool = True,
) -> tuple[ImplicitModel, TrainReport]:
    """Fit ``model`` to every non-basic view; ``masks`` pins pruned entries at zero."""
    epochs = cfg.epochs if epochs is None else epochs
    explicit_recon = np.asarray(explicit_recon)
    if explicit_recon.shape != seq.frames.shape[1:]:
        raise ValidationError(
            f"explicit reconstruction {explicit_recon.shape} does not match view shape {seq.frames.shape[1:]}"
        )
    report = TrainReport(parameter_count=model.parameter_count())
    gt = frames_to_tensor(seq.frames)
    explicit = frames_to_tensor(explicit_recon)
    coords = training_coordinates(seq.num_views, seq.num_frames, basic_index)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(cfg.adam_beta1, cfg.adam_beta2))
    gen = torch.Generator().manual_seed(cfg.seed)
    start = time.perf_counter()
    model.train()
    _apply_masks(model, masks)

    for epoch in range(epochs):
        order = torch.randperm(len(coords), generator=gen).tolist()
        total, steps = 0.0, 0
        for b in range(0, len(order), cfg.batch_size):
            idx = order[b:b + cfg.batch_size]
            j = torch.tensor([coords[k][0] for k in idx])
            t = torch.tensor([coords[k][1] for k in idx])
            pred = ivc.reconstruct(model, j, t, explicit).fused
            loss = joint_loss(gt[j, t], pred, cfg.alpha)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDivergedError(f"loss became {value} at epoch {epoch}, step {steps}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            _apply_masks(model, masks)
            total += value
            steps += 1
        report.epoch_losses.append(total / max(steps, 1))
        if epoch % 50 == 0 or epoch == epochs - 1:
            logger.info("epoch %d/%d loss %.5f", epoch + 1, epochs, report.epoch_losses[-1])

    model.eval()
    report.wall_clock = time.perf_counter() - start
    if evaluate_at_end:
        report.view_psnr, report.view_ssim = evaluate(model, seq, basic_index, explicit_recon)
    return model, report


@dataclass
class CompressionResult:
    model: ImplicitModel  # dequantized model exactly as a decoder rebuilds it
    compressed: modelzip.CompressedModel
    prune: modelzip.PruneResult | None
    qat_report: TrainReport


def compress_train_schedule(
    model: ImplicitModel,
    seq: MultiViewSequence,
    basic_index: int,
    explicit_recon: np.ndarray,
    cfg: TrainConfig,
    entropy: bool = True,
) -> CompressionResult:
    """Prune -> quantization-aware fine-tuning with the mask frozen -> integer levels."""
    prune_result = None
    masks = None
    if cfg.prune_fraction > 0:
        prune_result = modelzip.prune(modelzip.flatten_quantizable(model), cfg.prune_fraction)
        masks = modelzip.split_mask(model, prune_result.mask)
        _apply_masks(model, masks)
    ste_quantize_params(model)
    try:
        model, qat_report = train(
            model, seq, basic_index, explicit_recon, cfg, epochs=cfg.qat_epochs, masks=masks, evaluate_at_end=False
        )
    finally:
        clear_fake_quant(model)
    mask = None if prune_result is None else prune_result.mask
    compressed = modelzip.compress_model(model, mask, entropy=entropy)
    return CompressionResult(modelzip.decompress_model(compressed), compressed, prune_result, qat_report)
