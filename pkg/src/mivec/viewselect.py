"""Choice of the basic view, the one coded by the explicit 2D codec."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .seqdata import MultiViewSequence


@dataclass(frozen=True)
class ViewSelection:
    basic_view_index: int
    score_per_view: tuple[float, ...] | None = None


def centrality_scores(positions) -> np.ndarray:
    """Negative distance of each camera to the camera centroid."""
    pos = np.asarray(positions, dtype=np.float64)
    return -np.linalg.norm(pos - pos.mean(axis=0), axis=1)


def _argmax_lowest(scores: np.ndarray, scale: float) -> int:
    # Relative tolerance keeps ties stable under rescaling of the rig.
    tol = 1e-9 * max(scale, 1e-300)
    best = scores.max()
    return int(np.flatnonzero(scores >= best - tol)[0])


def select_basic_view(seq: MultiViewSequence, override: int | None = None) -> ViewSelection:
    if override is not None:
        if not 0 <= override < seq.num_views:
            raise ValidationError(f"basic view {override} outside [0, {seq.num_views})")
        return ViewSelection(int(override))
    positions = np.array([cam.position for cam in seq.cameras])
    scores = centrality_scores(positions)
    spread = float(np.ptp(positions, axis=0).max()) if len(positions) else 0.0
    return ViewSelection(_argmax_lowest(scores, spread), tuple(float(s) for s in scores))
