"""Canonical data model and on-disk format for spatial-transcriptomics slices.

A slice lives in a directory:

    image.png | image.tiff      RGB histology raster
    coords.csv                  spot_id,x_px,y_px[,measured]
    expression.csv              spot_id,<gene names...>   (or expression.bin)
    gene_names.txt              one gene name per line
    annotations.csv             spot_id,region            (optional)

``expression.bin`` is a dense binary alternative for large matrices:
8-byte magic ``HSGEXPR1``, little-endian u32 version, u64 n_spots,
u64 n_genes, then row-major float64 values in coords.csv row order.

All CSVs are UTF-8 with a header row, comma-separated, ``.`` decimal point.
Datasets are immutable after construction and safe to share across threads.
"""

from __future__ import annotations

import dataclasses
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from PIL import Image

from .errors import AlignmentError, DataFormatError, ParameterError, ValidationError

_EXPR_MAGIC = b"HSGEXPR1"
_EXPR_VERSION = 1


@dataclass(frozen=True)
class Spot:
    """One sequencing location: pixel coordinates on the paired image.

    ``measured`` is False for spots constructed by polar translation, whose
    expression is predicted rather than assayed.
    """

    spot_id: str
    x_px: int
    y_px: int
    measured: bool = True

    def __post_init__(self):
        if self.x_px < 0 or self.y_px < 0:
            raise ValidationError(
                f"spot {self.spot_id!r} has negative coordinates ({self.x_px}, {self.y_px})"
            )


@dataclass(frozen=True)
class STDataset:
    """One tissue slice: image, spot table, expression matrix, annotations."""

    slice_id: str
    image: np.ndarray  # (H, W, 3) uint8
    spots: tuple[Spot, ...]
    expression: np.ndarray  # (n_spots, n_genes) float64
    gene_names: tuple[str, ...]
    annotations: dict[str, str] | None = None

    def __post_init__(self):
        object.__setattr__(self, "spots", tuple(self.spots))
        object.__setattr__(self, "gene_names", tuple(self.gene_names))
        image = np.asarray(self.image)
        expression = np.asarray(self.expression, dtype=np.float64)
        image.setflags(write=False)
        expression.setflags(write=False)
        object.__setattr__(self, "image", image)
        object.__setattr__(self, "expression", expression)
        self.validate()

    @property
    def n_spots(self) -> int:
        return len(self.spots)

    @property
    def n_genes(self) -> int:
        return len(self.gene_names)

    @property
    def spot_ids(self) -> tuple[str, ...]:
        return tuple(s.spot_id for s in self.spots)

    def coords(self) -> np.ndarray:
        """Spot pixel coordinates as an (n_spots, 2) float array of (x, y)."""
        return np.array([(s.x_px, s.y_px) for s in self.spots], dtype=np.float64)

    def validate(self) -> None:
        """Check every structural invariant; raise ValidationError on the first failure."""
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValidationError(f"image must be HxWx3, got shape {self.image.shape}")
        if self.image.dtype != np.uint8:
            raise ValidationError(f"image must be 8-bit per channel, got {self.image.dtype}")
        if self.n_spots < 1:
            raise ValidationError("dataset must contain at least one spot")
        ids = [s.spot_id for s in self.spots]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise ValidationError(f"duplicate spot ids: {dupes[:10]}")
        if self.expression.ndim != 2:
            raise ValidationError("expression must be a 2-D matrix")
        if self.expression.shape[0] != self.n_spots:
            raise ValidationError(
                f"expression has {self.expression.shape[0]} rows for {self.n_spots} spots"
            )
        if self.expression.shape[1] != self.n_genes:
            raise ValidationError(
                f"expression has {self.expression.shape[1]} columns for {self.n_genes} genes"
            )
        if len(set(self.gene_names)) != len(self.gene_names):
            raise ValidationError("gene names are not unique")
        if not np.all(np.isfinite(self.expression)):
            raise ValidationError("expression contains non-finite values")
        if np.any(self.expression < 0):
            raise ValidationError("expression contains negative values")
        h, w = self.image.shape[:2]
        for s in self.spots:
            # Edge replication in the patch extractor covers any margin, so
            # in-bounds pixel coordinates are sufficient.
            if not (0 <= s.x_px < w and 0 <= s.y_px < h):
                raise ValidationError(
                    f"spot {s.spot_id!r} at ({s.x_px}, {s.y_px}) is outside the {w}x{h} image"
                )
        if self.annotations is not None:
            unknown = set(self.annotations) - set(ids)
            if unknown:
                raise ValidationError(
                    f"annotations reference unknown spot ids: {sorted(unknown)[:10]}"
                )

    def take_spots(self, indices) -> "STDataset":
        """New dataset restricted to the given spot indices (original order kept)."""
        indices = list(indices)
        spots = tuple(self.spots[i] for i in indices)
        expression = self.expression[indices, :].copy()
        annotations = None
        if self.annotations is not None:
            kept = {s.spot_id for s in spots}
            annotations = {k: v for k, v in self.annotations.items() if k in kept}
        return dataclasses.replace(
            self, spots=spots, expression=expression, annotations=annotations
        )

    def dropout_rate(self) -> float:
        """Fraction of zero entries in the expression matrix."""
        return float(np.mean(self.expression == 0.0))


def _read_image(path: Path) -> np.ndarray:
    for name in ("image.png", "image.tiff", "image.tif"):
        f = path / name
        if f.exists():
            with Image.open(f) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
            return arr
    raise DataFormatError(f"no image file (image.png or image.tiff) in {path}")


def _read_coords(path: Path) -> pd.DataFrame:
    f = path / "coords.csv"
    if not f.exists():
        raise DataFormatError(f"missing coords.csv in {path}")
    df = pd.read_csv(f, dtype={"spot_id": str})
    for col in ("spot_id", "x_px", "y_px"):
        if col not in df.columns:
            raise DataFormatError(f"coords.csv lacks required column {col!r}")
    if "measured" not in df.columns:
        df["measured"] = True
    else:
        df["measured"] = df["measured"].astype(bool)
    return df


def _read_gene_names(path: Path) -> list[str]:
    f = path / "gene_names.txt"
    if not f.exists():
        raise DataFormatError(f"missing gene_names.txt in {path}")
    names = [line.rstrip("\n") for line in f.read_text(encoding="utf-8").splitlines()]
    return [n for n in names if n]


def _read_expression(path: Path, coords: pd.DataFrame, gene_names: list[str]) -> np.ndarray:
    csv = path / "expression.csv"
    binf = path / "expression.bin"
    if csv.exists():
        df = pd.read_csv(csv, dtype={"spot_id": str})
        if "spot_id" not in df.columns:
            raise DataFormatError("expression.csv lacks a spot_id column")
        file_genes = [c for c in df.columns if c != "spot_id"]
        if file_genes != gene_names:
            raise AlignmentError(
                "expression.csv columns do not match gene_names.txt "
                f"(first mismatch near {_first_mismatch(file_genes, gene_names)!r})"
            )
        expr_ids = list(df["spot_id"])
        coord_ids = list(coords["spot_id"])
        missing = sorted(set(coord_ids) - set(expr_ids))
        extra = sorted(set(expr_ids) - set(coord_ids))
        if missing or extra:
            raise AlignmentError(
                f"spot_id mismatch between coords.csv and expression.csv: "
                f"missing from expression {missing[:10]}, not in coords {extra[:10]}"
            )
        # Align expression rows to coords row order by spot_id join.
        df = df.set_index("spot_id").loc[coord_ids]
        return df.to_numpy(dtype=np.float64)
    if binf.exists():
        raw = binf.read_bytes()
        header = struct.calcsize("<8sIQQ")
        if len(raw) < header:
            raise DataFormatError("expression.bin is truncated")
        magic, version, n_spots, n_genes = struct.unpack_from("<8sIQQ", raw, 0)
        if magic != _EXPR_MAGIC:
            raise DataFormatError(f"expression.bin has bad magic {magic!r}")
        if version != _EXPR_VERSION:
            raise DataFormatError(f"unsupported expression.bin version {version}")
        expected = header + 8 * n_spots * n_genes
        if len(raw) != expected:
            raise DataFormatError(
                f"expression.bin payload is {len(raw)} bytes, expected {expected}"
            )
        if n_spots != len(coords):
            raise AlignmentError(
                f"expression.bin has {n_spots} rows for {len(coords)} coords rows"
            )
        if n_genes != len(gene_names):
            raise AlignmentError(
                f"expression.bin has {n_genes} columns for {len(gene_names)} gene names"
            )
        mat = np.frombuffer(raw, dtype="<f8", offset=header).reshape(n_spots, n_genes)
        return mat.astype(np.float64)
    raise DataFormatError(f"no expression.csv or expression.bin in {path}")


def _first_mismatch(a: list[str], b: list[str]):
    for x, y in zip(a, b):
        if x != y:
            return (x, y)
    return (len(a), len(b))


def load_dataset(path) -> STDataset:
    """Load and validate one slice directory. See the module docstring for the layout."""
    path = Path(path)
    if not path.is_dir():
        raise DataFormatError(f"dataset path {path} is not a directory")
    image = _read_image(path)
    coords = _read_coords(path)
    gene_names = _read_gene_names(path)
    expression = _read_expression(path, coords, gene_names)
    annotations = None
    ann_file = path / "annotations.csv"
    if ann_file.exists():
        ann = pd.read_csv(ann_file, dtype=str)
        for col in ("spot_id", "region"):
            if col not in ann.columns:
                raise DataFormatError(f"annotations.csv lacks required column {col!r}")
        annotations = dict(zip(ann["spot_id"], ann["region"]))
    spots = tuple(
        Spot(spot_id=str(r.spot_id), x_px=int(r.x_px), y_px=int(r.y_px), measured=bool(r.measured))
        for r in coords.itertuples(index=False)
    )
    return STDataset(
        slice_id=path.name,
        image=image,
        spots=spots,
        expression=expression,
        gene_names=tuple(gene_names),
        annotations=annotations,
    )


def save_dataset(ds: STDataset, path, expression_format: str = "csv") -> None:
    """Write a slice directory; ``load_dataset`` round-trips it exactly.

    ``expression_format`` is ``"csv"`` (text, exact float round-trip via
    shortest repr) or ``"binary"`` (``expression.bin``).
    """
    if expression_format not in ("csv", "binary"):
        raise ParameterError(f"unknown expression_format {expression_format!r}")
    ds.validate()
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    Image.fromarray(ds.image, mode="RGB").save(path / "image.png")
    coords = pd.DataFrame(
        {
            "spot_id": [s.spot_id for s in ds.spots],
            "x_px": [s.x_px for s in ds.spots],
            "y_px": [s.y_px for s in ds.spots],
            "measured": [s.measured for s in ds.spots],
        }
    )
    coords.to_csv(path / "coords.csv", index=False)
    (path / "gene_names.txt").write_text(
        "".join(f"{g}\n" for g in ds.gene_names), encoding="utf-8"
    )
    if expression_format == "csv":
        expr = pd.DataFrame(ds.expression, columns=list(ds.gene_names))
        expr.insert(0, "spot_id", [s.spot_id for s in ds.spots])
        expr.to_csv(path / "expression.csv", index=False)
        (path / "expression.bin").unlink(missing_ok=True)
    else:
        mat = np.ascontiguousarray(ds.expression, dtype="<f8")
        header = struct.pack(
            "<8sIQQ", _EXPR_MAGIC, _EXPR_VERSION, ds.n_spots, ds.n_genes
        )
        (path / "expression.bin").write_bytes(header + mat.tobytes())
        (path / "expression.csv").unlink(missing_ok=True)
    ann_file = path / "annotations.csv"
    if ds.annotations is not None:
        ann = pd.DataFrame(
            {
                "spot_id": [s.spot_id for s in ds.spots if s.spot_id in ds.annotations],
                "region": [
                    ds.annotations[s.spot_id] for s in ds.spots if s.spot_id in ds.annotations
                ],
            }
        )
        ann.to_csv(ann_file, index=False)
    else:
        ann_file.unlink(missing_ok=True)


def split_spots(ds: STDataset, holdout_fraction: float, seed: int):
    """Disjoint random spot partition into (train, test).

    ``|test| = round(holdout_fraction * n_spots)`` with round-half-up.
    The permutation comes from numpy's PCG64 generator seeded with ``seed``,
    so partitions reproduce across platforms. Both halves keep the original
    spot order and share the image array.
    """
    if not (0.0 < holdout_fraction < 1.0):
        raise ParameterError(f"holdout_fraction must be in (0, 1), got {holdout_fraction}")
    n = ds.n_spots
    if n < 2:
        raise ParameterError("need at least 2 spots to split")
    n_test = int(math.floor(holdout_fraction * n + 0.5))
    if n_test == 0 or n_test == n:
        raise ParameterError(
            f"holdout_fraction {holdout_fraction} leaves an empty side for {n} spots"
        )
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    test_idx = sorted(int(i) for i in perm[:n_test])
    train_idx = sorted(int(i) for i in perm[n_test:])
    return ds.take_spots(train_idx), ds.take_spots(test_idx)
