"""Construction of unmeasured spot coordinates by polar translation.

Each measured spot is translated by N-1 fixed (radius, angle) pairs scaled
to the grid pitch R, densifying the lattice N-fold. The 8-fold table is:

    (R/2, 0), (R/(2*sqrt(2)), pi/4), (R/(2*sqrt(2)), 3*pi/4),
    (R/(2*sqrt(2)), 7*pi/4), (R/(2*sqrt(2)), 5*pi/4), (R/2, pi), (R/2, pi/2)

Tables for other factors are artifact-defined subsets:

    N=2: (R/2, 0)
    N=4: (R/2, 0), (R/2, pi/2), (R/(2*sqrt(2)), pi/4)
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .data import Spot
from .errors import DegenerateGridError, ParameterError

SUPPORTED_FACTORS = (2, 4, 8)

# Candidates within this Euclidean distance (pixels) of an accepted spot are
# dropped by construct_unmeasured.
DUPLICATE_RADIUS_PX = 1.0


@dataclass(frozen=True)
class UpsampleScheme:
    """N-fold densification: N-1 polar translations (radius px, angle rad)."""

    factor: int
    translations: tuple[tuple[float, float], ...]

    def __post_init__(self):
        if self.factor < 2:
            raise ParameterError(f"upsample factor must be >= 2, got {self.factor}")
        if len(self.translations) != self.factor - 1:
            raise ParameterError(
                f"{self.factor}-fold scheme needs {self.factor - 1} translations, "
                f"got {len(self.translations)}"
            )
        if len(set(self.translations)) != len(self.translations):
            raise ParameterError("scheme translations must be distinct")
        for r, _ in self.translations:
            if r <= 0:
                raise ParameterError("translation radius must be positive")

    def offsets(self) -> np.ndarray:
        """Cartesian (dx, dy) offsets, one row per translation."""
        return np.array(
            [(r * math.cos(theta), r * math.sin(theta)) for r, theta in self.translations],
            dtype=np.float64,
        )


def nearest_neighbor_spacing(spots: list[Spot]) -> float:
    """Median nearest-neighbor distance over the measured spots.

    The median is robust to missing lattice sites; coincident coordinates
    raise DegenerateGridError.
    """
    if len(spots) < 2:
        raise ParameterError("need at least 2 spots to estimate spacing")
    pts = np.array([(s.x_px, s.y_px) for s in spots], dtype=np.float64)
    tree = cKDTree(pts)
    dists, _ = tree.query(pts, k=2)
    nearest = dists[:, 1]
    if np.any(nearest == 0):
        i = int(np.flatnonzero(nearest == 0)[0])
        raise DegenerateGridError(
            f"spot {spots[i].spot_id!r} coincides with another spot"
        )
    return float(np.median(nearest))


def eightfold_scheme(spacing: float) -> UpsampleScheme:
    """The seven-translation table for 8-fold densification at pitch ``spacing``."""
    if spacing <= 0:
        raise ParameterError(f"spacing must be positive, got {spacing}")
    half = spacing / 2.0
    diag = spacing / (2.0 * math.sqrt(2.0))
    return UpsampleScheme(
        factor=8,
        translations=(
            (half, 0.0),
            (diag, math.pi / 4.0),
            (diag, 3.0 * math.pi / 4.0),
            (diag, 7.0 * math.pi / 4.0),
            (diag, 5.0 * math.pi / 4.0),
            (half, math.pi),
            (half, math.pi / 2.0),
        ),
    )


def upsample_scheme(factor: int, spacing: float) -> UpsampleScheme:
    """Translation table for a supported factor (2, 4, or 8)."""
    if factor not in SUPPORTED_FACTORS:
        raise ParameterError(
            f"unsupported upsample factor {factor}; supported: {SUPPORTED_FACTORS}"
        )
    if spacing <= 0:
        raise ParameterError(f"spacing must be positive, got {spacing}")
    if factor == 8:
        return eightfold_scheme(spacing)
    half = spacing / 2.0
    diag = spacing / (2.0 * math.sqrt(2.0))
    if factor == 2:
        translations = ((half, 0.0),)
    else:  # factor == 4
        translations = ((half, 0.0), (half, math.pi / 2.0), (diag, math.pi / 4.0))
    return UpsampleScheme(factor=factor, translations=translations)


def construct_unmeasured(
    spots: list[Spot], scheme: UpsampleScheme, image_bounds: tuple[int, int]
) -> list[Spot]:
    """New unmeasured spots from every (spot, translation) pair.

    Candidates are rounded to the nearest integer pixel, then dropped if they
    fall outside ``image_bounds`` (w, h) or within DUPLICATE_RADIUS_PX of any
    measured spot or earlier-accepted candidate (spot-major, scheme-order
    iteration; the earlier spot wins). New ids are ``<parent>_u<k>`` with k
    the translation index.
    """
    w, h = image_bounds
    offsets = scheme.offsets()
    # After integer rounding, "within 1 px" means the same pixel or a
    # 4-neighbor, so an occupancy set over pixels suffices.
    occupied: set[tuple[int, int]] = {(s.x_px, s.y_px) for s in spots}

    def collides(x: int, y: int) -> bool:
        return any(
            p in occupied
            for p in ((x, y), (x - 1, y), (x + 1, y), (x, y - 1), (x, y + 1))
        )

    out: list[Spot] = []
    for spot in spots:
        for k, (dx, dy) in enumerate(offsets):
            x = int(round(spot.x_px + dx))
            y = int(round(spot.y_px + dy))
            if not (0 <= x < w and 0 <= y < h):
                continue
            if collides(x, y):
                continue
            occupied.add((x, y))
            out.append(Spot(spot_id=f"{spot.spot_id}_u{k}", x_px=x, y_px=y, measured=False))
    return out
