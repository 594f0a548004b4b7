"""Expression normalization, highly-variable-gene selection, and patch extraction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Spot, STDataset
from .errors import BoundsError, DegenerateSpotError, ParameterError

DEFAULT_PATCH = 50
DEFAULT_N_HVG = 1000
DEFAULT_TARGET_SUM = 1e4


@dataclass(frozen=True)
class PreprocessConfig:
    patch_w: int = DEFAULT_PATCH
    patch_h: int = DEFAULT_PATCH
    n_hvg: int = DEFAULT_N_HVG
    normalize_target_sum: float = DEFAULT_TARGET_SUM

    def __post_init__(self):
        if self.patch_w < 1 or self.patch_h < 1:
            raise ParameterError("patch_w and patch_h must be >= 1")
        if self.n_hvg < 1:
            raise ParameterError("n_hvg must be >= 1")
        if self.normalize_target_sum <= 0:
            raise ParameterError("normalize_target_sum must be positive")


@dataclass(frozen=True)
class PatchTensor:
    """A (patch_h, patch_w, 3) float window around one spot, scaled to [0, 1]."""

    spot_id: str
    pixels: np.ndarray

    def __post_init__(self):
        pixels = np.asarray(self.pixels, dtype=np.float64)
        pixels.setflags(write=False)
        object.__setattr__(self, "pixels", pixels)


def normalize_expression(raw: np.ndarray, target_sum: float = DEFAULT_TARGET_SUM) -> np.ndarray:
    """Scale each spot row to ``target_sum`` total, then apply log(1 + x).

    Raises DegenerateSpotError naming the first all-zero row.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if np.any(raw < 0):
        raise ParameterError("expression values must be non-negative")
    row_sums = raw.sum(axis=1)
    zero_rows = np.flatnonzero(row_sums == 0)
    if zero_rows.size:
        raise DegenerateSpotError(
            f"spot row {int(zero_rows[0])} has zero total expression and cannot be normalized"
        )
    scaled = raw * (target_sum / row_sums)[:, None]
    return np.log1p(scaled)


def select_hvg(normalized: np.ndarray, n_hvg: int):
    """Top ``n_hvg`` genes by variance of the normalized values.

    Ties break toward the lower gene index; the returned columns keep their
    original relative order. Returns ``(matrix, selected_indices)``.
    """
    normalized = np.asarray(normalized, dtype=np.float64)
    n_genes = normalized.shape[1]
    if n_hvg > n_genes:
        raise ParameterError(f"n_hvg={n_hvg} exceeds the {n_genes} available genes")
    variances = normalized.var(axis=0)
    # Stable sort on (-variance, index): equal variances keep index order.
    order = np.lexsort((np.arange(n_genes), -variances))
    selected = np.sort(order[:n_hvg])
    return normalized[:, selected], selected


def extract_patch(ds: STDataset, spot: Spot, cfg: PreprocessConfig) -> PatchTensor:
    """Patch centered on the spot; borders are filled by edge replication.

    Window rows are [y - h//2, y - h//2 + h) and columns likewise; 8-bit
    pixel values are divided by 255.
    """
    h_img, w_img = ds.image.shape[:2]
    if not (0 <= spot.x_px < w_img and 0 <= spot.y_px < h_img):
        raise BoundsError(
            f"spot {spot.spot_id!r} at ({spot.x_px}, {spot.y_px}) is outside the image"
        )
    y0 = spot.y_px - cfg.patch_h // 2
    x0 = spot.x_px - cfg.patch_w // 2
    rows = np.clip(np.arange(y0, y0 + cfg.patch_h), 0, h_img - 1)
    cols = np.clip(np.arange(x0, x0 + cfg.patch_w), 0, w_img - 1)
    window = ds.image[np.ix_(rows, cols)].astype(np.float64) / 255.0
    return PatchTensor(spot_id=spot.spot_id, pixels=window)


def rgb_feature(patch: PatchTensor) -> np.ndarray:
    """Per-channel mean over all patch pixels; a length-3 vector in [0, 1]."""
    return patch.pixels.mean(axis=(0, 1))
