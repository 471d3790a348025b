"""Multi-view sequences: in-memory model, PNG directory I/O and a synthetic scene."""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .errors import LoadError, ValidationError

VIEW_DIR = "v{j:02d}"
FRAME_FILE = "f{t:04d}.png"
CAMERA_FILE = "cameras.json"


@dataclass(frozen=True)
class CameraParams:
    view_id: int
    position: tuple[float, float, float]
    orientation: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "position", tuple(float(v) for v in self.position))
        object.__setattr__(self, "orientation", tuple(float(v) for v in self.orientation))
        if len(self.position) != 3 or len(self.orientation) != 3:
            raise ValidationError("camera position and orientation must be 3-vectors")
        if not all(math.isfinite(v) for v in self.position + self.orientation):
            raise ValidationError(f"camera {self.view_id} has non-finite parameters")

    def to_json(self) -> dict:
        return {
            "view_id": self.view_id,
            "position": list(self.position),
            "orientation": list(self.orientation),
        }


@dataclass(frozen=True)
class FrameCoordinate:
    view_index: int
    time_index: int

    def check(self, num_views: int, num_frames: int) -> None:
        if not 0 <= self.view_index < num_views:
            raise IndexError(f"view index {self.view_index} outside [0, {num_views})")
        if not 0 <= self.time_index < num_frames:
            raise IndexError(f"time index {self.time_index} outside [0, {num_frames})")


@dataclass(frozen=True, eq=False)
class MultiViewSequence:
    """N views x T frames of H x W RGB, components in [0, 1].

    ``frames`` is a read-only float32 array of shape (N, T, H, W, 3).
    """

    frames: np.ndarray
    cameras: tuple[CameraParams, ...] = field(default=())

    def __post_init__(self):
        frames = np.array(self.frames, dtype=np.float32, copy=True)
        if frames.ndim != 5 or frames.shape[-1] != 3:
            raise ValidationError(f"frames must have shape (N, T, H, W, 3), got {frames.shape}")
        if frames.shape[0] < 2:
            raise ValidationError("a multi-view sequence needs at least two views")
        if not np.all(np.isfinite(frames)) or frames.min(initial=0.0) < 0.0 or frames.max(initial=0.0) > 1.0:
            raise ValidationError("frame components must be finite and within [0, 1]")
        frames.setflags(write=False)
        object.__setattr__(self, "frames", frames)

        cameras = tuple(sorted(self.cameras, key=lambda c: c.view_id))
        if not cameras:
            cameras = tuple(CameraParams(j, (float(j), 0.0, 0.0)) for j in range(frames.shape[0]))
        if len(cameras) != frames.shape[0]:
            raise ValidationError(f"{len(cameras)} cameras for {frames.shape[0]} views")
        if sorted(c.view_id for c in cameras) != list(range(len(cameras))):
            raise ValidationError("camera view ids must be unique and cover [0, N)")
        object.__setattr__(self, "cameras", cameras)

    @property
    def num_views(self) -> int:
        return self.frames.shape[0]

    @property
    def num_frames(self) -> int:
        return self.frames.shape[1]

    @property
    def height(self) -> int:
        return self.frames.shape[2]

    @property
    def width(self) -> int:
        return self.frames.shape[3]

    def view(self, j: int) -> np.ndarray:
        return self.frames[j]

    def frame(self, coord: FrameCoordinate) -> np.ndarray:
        coord.check(self.num_views, self.num_frames)
        return self.frames[coord.view_index, coord.time_index]

    def __eq__(self, other):
        if not isinstance(other, MultiViewSequence):
            return NotImplemented
        return self.cameras == other.cameras and np.array_equal(self.frames, other.frames)


def to_bytes(x: np.ndarray) -> np.ndarray:
    """Float components to 8-bit with clamping and half-up rounding."""
    return np.floor(np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def from_bytes(b: np.ndarray) -> np.ndarray:
    return np.asarray(b, dtype=np.float32) / np.float32(255.0)


def read_cameras(path: Path) -> tuple[CameraParams, ...]:
    try:
        raw = json.loads(Path(path).read_text())
        cams = tuple(
            CameraParams(int(c["view_id"]), tuple(c["position"]), tuple(c["orientation"]))
            for c in raw
        )
    except FileNotFoundError as exc:
        raise LoadError(f"missing camera file {path}") from exc
    except (ValueError, KeyError, TypeError) as exc:
        raise LoadError(f"malformed camera file {path}: {exc}", stage="parse") from exc
    return tuple(sorted(cams, key=lambda c: c.view_id))


def write_cameras(path: Path, cameras: Iterable[CameraParams]) -> None:
    Path(path).write_text(json.dumps([c.to_json() for c in cameras], indent=2))


def _read_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def load_sequence(
    root_path,
    view_pattern: str = VIEW_DIR,
    frame_pattern: str = FRAME_FILE,
    workers: int = 4,
) -> MultiViewSequence:
    """Load ``root/v{j:02d}/f{t:04d}.png`` frames plus ``root/cameras.json``."""
    root = Path(root_path)
    cameras = read_cameras(root / CAMERA_FILE)
    num_views = len(cameras)
    if num_views == 0:
        raise LoadError(f"{root / CAMERA_FILE} lists no cameras", stage="parse")

    first = root / view_pattern.format(j=0)
    num_frames = 0
    while (first / frame_pattern.format(t=num_frames)).is_file():
        num_frames += 1
    if num_frames == 0:
        raise LoadError(f"missing frame (j=0, t=0) under {first}")

    paths = []
    for j in range(num_views):
        for t in range(num_frames):
            p = root / view_pattern.format(j=j) / frame_pattern.format(t=t)
            if not p.is_file():
                raise LoadError(f"missing frame (j={j}, t={t}): {p}")
            paths.append(p)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        images = list(pool.map(_read_png, paths))
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise LoadError(f"inconsistent frame resolutions: {sorted(shapes)}", stage="structure")
    stack = np.stack(images).reshape(num_views, num_frames, *images[0].shape)
    return MultiViewSequence(from_bytes(stack), cameras)


def save_frames(
    seq: MultiViewSequence,
    root_path,
    views: Sequence[int] | None = None,
    view_pattern: str = VIEW_DIR,
    frame_pattern: str = FRAME_FILE,
) -> None:
    root = Path(root_path)
    root.mkdir(parents=True, exist_ok=True)
    data = to_bytes(seq.frames)
    for j in range(seq.num_views) if views is None else views:
        vdir = root / view_pattern.format(j=j)
        vdir.mkdir(exist_ok=True)
        for t in range(seq.num_frames):
            Image.fromarray(data[j, t]).save(vdir / frame_pattern.format(t=t))
    write_cameras(root / CAMERA_FILE, seq.cameras)


def shift_horizontal(img: np.ndarray, shift: float) -> np.ndarray:
    """``out[:, x] = img[:, x + shift]`` with linear interpolation and clamp-to-edge."""
    width = img.shape[1]
    src = np.clip(np.arange(width, dtype=np.float64) + shift, 0.0, width - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, width - 1)
    frac = (src - lo)[None, :, None]
    return (1.0 - frac) * img[:, lo] + frac * img[:, hi]


def _background(height: int, width: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    img = np.empty((height, width, 3))
    for ch in range(3):
        acc = np.zeros((height, width))
        for _ in range(4):
            period = rng.uniform(12.0, 40.0)
            theta = rng.uniform(0.0, np.pi)
            phase = rng.uniform(0.0, 2 * np.pi)
            acc += np.sin(2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / period + phase)
        img[..., ch] = 0.5 + 0.09 * acc
    return img


def generate_synthetic(
    num_views: int,
    num_frames: int,
    height: int,
    width: int,
    disparity_px: float,
    seed: int,
) -> MultiViewSequence:
    """Textured background with one square moving 1 px/frame to the right.

    View ``j`` is view 0 shifted left by ``j * disparity_px`` (clamp-to-edge), so
    ``view_j[:, k] == view_0[:, k + j * disparity_px]`` wherever that column exists.
    """
    if num_views < 2 or num_frames < 1:
        raise ValidationError("need num_views >= 2 and num_frames >= 1")
    if height < 16 or width < 16:
        raise ValidationError("synthetic frames must be at least 16x16")
    if not (0 <= disparity_px * (num_views - 1) < width / 4):
        raise ValidationError("disparity_px * (N - 1) must lie in [0, W/4)")

    rng = np.random.default_rng(seed)
    background = _background(height, width, rng)
    size = max(4, min(height, width) // 4)
    fg_color = rng.uniform(0.05, 0.95, size=3)
    yy, xx = np.mgrid[0:size, 0:size]
    fg = fg_color + 0.15 * np.sin(2 * np.pi * (xx + yy) / size)[..., None] * np.array([1.0, -1.0, 0.5])
    fg = np.clip(fg, 0.0, 1.0)
    y0 = int(rng.integers(0, height - size + 1))
    x0 = int(rng.integers(0, width - size + 1))
    travel = width - size + 1

    frames = np.empty((num_views, num_frames, height, width, 3))
    for t in range(num_frames):
        base = background.copy()
        x = (x0 + t) % travel
        base[y0:y0 + size, x:x + size] = fg
        for j in range(num_views):
            frames[j, t] = shift_horizontal(base, j * disparity_px)
    cameras = tuple(CameraParams(j, (j * disparity_px, 0.0, 0.0)) for j in range(num_views))
    return MultiViewSequence(np.clip(frames, 0.0, 1.0), cameras)
