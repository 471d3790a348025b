"""Full encoder and decoder.

Encoder: view selection -> explicit coding of the basic view -> implicit
training with inter-view compensation -> prune / QAT / entropy coding -> mux.
The decoder re-runs the quantized model; it never receives reconstructions.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .. import explicit2d, metrics, modelzip, training
from ..errors import CorruptModelError, CorruptStreamError, MivecError, ValidationError
from ..explicit2d import BACKENDS, ExplicitCodecConfig
from ..inrnet import ImplicitModel, ModelConfig, init_model
from ..seqdata import MultiViewSequence
from ..training import TrainConfig
from ..viewselect import select_basic_view
from .container import BitstreamContainer, decode_cameras, encode_cameras

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CodecConfig:
    """Everything the encoder needs besides the sequence."""

    grid_c: int = 24
    factors: tuple[int, ...] = (5, 3, 2, 2, 2)
    grid_h: int | None = None  # derived from the frame size when omitted
    grid_w: int | None = None
    channels: tuple[int, ...] | None = None
    grid_fea_t: bool = True
    grid_fea_v: bool = True
    grid_emb: bool = True
    ivc: bool = True
    explicit: ExplicitCodecConfig = field(default_factory=ExplicitCodecConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    basic_view: int | None = None
    entropy: bool = True

    def model_config(self, seq: MultiViewSequence) -> ModelConfig:
        flags = dict(
            channels=self.channels,
            seed=self.train.seed,
            grid_fea_t=self.grid_fea_t,
            grid_fea_v=self.grid_fea_v,
            grid_emb=self.grid_emb,
            ivc=self.ivc,
        )
        dims = (seq.height, seq.width, seq.num_frames, seq.num_views)
        if self.grid_h is None and self.grid_w is None:
            return ModelConfig.for_resolution(*dims, self.grid_c, tuple(self.factors), **flags)
        gh = self.grid_h if self.grid_h is not None else self.grid_w
        gw = self.grid_w if self.grid_w is not None else self.grid_h
        return ModelConfig(*dims, gh, gw, self.grid_c, tuple(self.factors), **flags)

    @property
    def ablations(self) -> dict[str, bool]:
        return {
            "no_grid_fea_t": not self.grid_fea_t,
            "no_grid_fea_v": not self.grid_fea_v,
            "no_grid_emb": not self.grid_emb,
            "no_ivc": not self.ivc,
        }


@dataclass(eq=False)
class EncodeReport:
    bpp: float
    total_bits: int
    basic_view: int
    view_psnr: dict[int, float]
    view_ssim: dict[int, float]
    segment_bytes: dict[str, int]
    parameter_count: int
    kept_parameters: int
    model_ratio: float
    float_view_psnr: dict[int, float]
    timings: dict[str, float]
    ablations: dict[str, bool]
    reconstruction: np.ndarray | None = field(default=None, repr=False)  # (N, T, H, W, 3)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(list(self.view_psnr.values())))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(list(self.view_ssim.values())))

    def to_dict(self) -> dict:
        out = {k: v for k, v in asdict(self).items() if k != "reconstruction"}
        for key in ("view_psnr", "view_ssim", "float_view_psnr"):
            out[key] = {str(j): v for j, v in out[key].items()}
        out["mean_psnr"] = self.mean_psnr
        out["mean_ssim"] = self.mean_ssim
        return out


def render_view(model: ImplicitModel, explicit: torch.Tensor, j: int, num_frames: int) -> np.ndarray:
    """Reconstruct every frame of view ``j`` one coordinate at a time.

    One frame per forward call keeps the float operation order independent of
    which views are requested, so partial and full decodes agree bit-exactly.
    """
    return training.render(model, explicit, [(j, t) for t in range(num_frames)], batch_size=1)


def _quality(seq: MultiViewSequence, recon: np.ndarray):
    psnrs, ssims = {}, {}
    for j in range(seq.num_views):
        psnrs[j] = float(np.mean([metrics.psnr(seq.frames[j, t], recon[j, t]) for t in range(seq.num_frames)]))
        ssims[j] = float(np.mean([metrics.ssim(seq.frames[j, t], recon[j, t]) for t in range(seq.num_frames)]))
    return psnrs, ssims


def _tag(exc: MivecError, stage: str) -> MivecError:
    if exc.stage is None:
        exc.stage = stage
    return exc


def encode_sequence(seq: MultiViewSequence, cfg: CodecConfig) -> tuple[BitstreamContainer, EncodeReport]:
    timings = {}
    start = time.perf_counter()
    model_cfg = cfg.model_config(seq)
    try:
        selection = select_basic_view(seq, cfg.basic_view)
    except MivecError as exc:
        raise _tag(exc, "viewselect")
    i = selection.basic_view_index

    t0 = time.perf_counter()
    explicit_res = explicit2d.encode_view(seq.view(i), cfg.explicit)
    timings["explicit"] = time.perf_counter() - t0
    logger.info("basic view %d coded in %d bytes", i, len(explicit_res.payload))

    torch.manual_seed(cfg.train.seed)
    model = init_model(model_cfg)
    t0 = time.perf_counter()
    model, float_report = training.train(model, seq, i, explicit_res.reconstructed, cfg.train)
    timings["train"] = time.perf_counter() - t0
    logger.info("float model mean PSNR %.2f dB", float_report.mean_psnr)

    t0 = time.perf_counter()
    comp = training.compress_train_schedule(model, seq, i, explicit_res.reconstructed, cfg.train, entropy=cfg.entropy)
    implicit_bytes = modelzip.serialize(comp.compressed)
    timings["compress"] = time.perf_counter() - t0

    container = BitstreamContainer(
        num_views=seq.num_views,
        num_frames=seq.num_frames,
        height=seq.height,
        width=seq.width,
        basic_index=i,
        backend_id=cfg.explicit.backend_id,
        qp=cfg.explicit.qp,
        grid_config=model_cfg.to_json(),
        metadata=encode_cameras(seq.cameras),
        explicit=explicit_res.payload,
        implicit=implicit_bytes,
    )

    t0 = time.perf_counter()
    explicit_t = training.frames_to_tensor(explicit_res.reconstructed)
    recon = np.empty(seq.frames.shape, np.float32)
    for j in range(seq.num_views):
        recon[j] = explicit_res.reconstructed if j == i else render_view(comp.model, explicit_t, j, seq.num_frames)
    timings["render"] = time.perf_counter() - t0
    psnrs, ssims = _quality(seq, recon)
    timings["total"] = time.perf_counter() - start

    total_bits = container.total_bits
    report = EncodeReport(
        bpp=metrics.bpp(total_bits, seq.num_views, seq.num_frames, seq.height, seq.width),
        total_bits=total_bits,
        basic_view=i,
        view_psnr=psnrs,
        view_ssim=ssims,
        segment_bytes=container.segment_sizes(),
        parameter_count=comp.model.parameter_count(),
        kept_parameters=comp.compressed.kept_count,
        model_ratio=modelzip.compression_ratio(comp.compressed, implicit_bytes),
        float_view_psnr=float_report.view_psnr,
        timings=timings,
        ablations=cfg.ablations,
        reconstruction=recon,
    )
    return container, report


def _explicit_config(container: BitstreamContainer, explicit: ExplicitCodecConfig | None) -> ExplicitCodecConfig:
    if container.backend_id >= len(BACKENDS):
        raise CorruptStreamError(f"unknown explicit backend id {container.backend_id}", segment="header")
    backend = BACKENDS[container.backend_id]
    if backend == "builtin_dct":
        return ExplicitCodecConfig("builtin_dct", container.qp)
    if explicit is None or explicit.backend != "external":
        raise ValidationError("container uses an external explicit codec; pass its decode command")
    return ExplicitCodecConfig(
        "external", container.qp, explicit.external_command_template, explicit.external_decode_template
    )


def _as_container(data) -> BitstreamContainer:
    if isinstance(data, BitstreamContainer):
        return data
    return BitstreamContainer.from_bytes(data)


def decode_explicit(container: BitstreamContainer, explicit: ExplicitCodecConfig | None = None) -> np.ndarray:
    cfg = _explicit_config(container, explicit)
    try:
        return explicit2d.decode_view(container.explicit, cfg, container.height, container.width, container.num_frames)
    except CorruptStreamError as exc:
        exc.segment = "explicit"
        raise
    except MivecError as exc:
        raise _tag(exc, "explicit2d")


def load_model(container: BitstreamContainer) -> ImplicitModel:
    cm = modelzip.deserialize(container.implicit)
    if cm.architecture != container.grid_config:
        raise CorruptModelError("model architecture disagrees with the container header", segment="implicit")
    cfg = cm.config
    if (cfg.num_views, cfg.num_frames, cfg.height, cfg.width) != (
        container.num_views, container.num_frames, container.height, container.width,
    ):
        raise CorruptModelError("model dimensions disagree with the container header", segment="implicit")
    return modelzip.decompress_model(cm)


def decode_views(data, views=None, explicit: ExplicitCodecConfig | None = None) -> dict[int, np.ndarray]:
    """Reconstruct the requested views as {j: (T, H, W, 3)}; all views when ``views`` is None."""
    container = _as_container(data)
    n = container.num_views
    views = list(range(n)) if views is None else sorted(set(int(v) for v in views))
    bad = [v for v in views if not 0 <= v < n]
    if bad:
        raise ValidationError(f"view indices {bad} outside [0, {n})")
    decode_cameras(container.metadata)
    basic = decode_explicit(container, explicit)
    out = {}
    model = None
    explicit_t = training.frames_to_tensor(basic)
    for j in views:
        if j == container.basic_index:
            out[j] = basic
            continue
        if model is None:
            model = load_model(container)
        out[j] = render_view(model, explicit_t, j, container.num_frames)
    return out


def decode_sequence(data, explicit: ExplicitCodecConfig | None = None) -> MultiViewSequence:
    container = _as_container(data)
    views = decode_views(container, None, explicit)
    frames = np.stack([views[j] for j in range(container.num_views)])
    return MultiViewSequence(frames, decode_cameras(container.metadata))


def salvage_explicit(data: bytes, explicit: ExplicitCodecConfig | None = None) -> tuple[int, np.ndarray]:
    """Recover the basic view from a container whose implicit segment is damaged."""
    container = BitstreamContainer.from_bytes(data, allow_corrupt=("implicit",))
    return container.basic_index, decode_explicit(container, explicit)
