"""Prediction-quality metrics (PCC/MSE/MAE), ARI, and k-means domain labels."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    EvaluationError,
    ParameterError,
    ShapeContractError,
    UndefinedCorrelationError,
)


def pcc(x, y) -> float:
    """Pearson correlation: Cov(x, y) / (std(x) * std(y)).

    Raises UndefinedCorrelationError when either vector has zero variance.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ShapeContractError(f"pcc needs equal-length vectors, got {x.shape} and {y.shape}")
    if x.shape[0] < 2:
        raise ShapeContractError("pcc needs at least 2 observations")
    dx = x - x.mean()
    dy = y - y.mean()
    sx = math.sqrt(float(dx @ dx))
    sy = math.sqrt(float(dy @ dy))
    if sx == 0.0 or sy == 0.0:
        raise UndefinedCorrelationError("zero variance makes the correlation undefined")
    r = float(dx @ dy) / (sx * sy)
    return min(1.0, max(-1.0, r))


def mse(x_obs, x_pred) -> float:
    """Mean over all entries of the squared difference."""
    x_obs = np.asarray(x_obs, dtype=np.float64)
    x_pred = np.asarray(x_pred, dtype=np.float64)
    if x_obs.shape != x_pred.shape:
        raise ShapeContractError(f"shape mismatch: {x_obs.shape} vs {x_pred.shape}")
    return float(np.mean((x_obs - x_pred) ** 2))


def mae(x_obs, x_pred) -> float:
    """Mean over all entries of the absolute difference."""
    x_obs = np.asarray(x_obs, dtype=np.float64)
    x_pred = np.asarray(x_pred, dtype=np.float64)
    if x_obs.shape != x_pred.shape:
        raise ShapeContractError(f"shape mismatch: {x_obs.shape} vs {x_pred.shape}")
    return float(np.mean(np.abs(x_obs - x_pred)))


@dataclass
class MetricsReport:
    """Per-gene and aggregate prediction metrics.

    ``per_gene_pcc`` holds NaN where a gene's correlation is undefined
    (zero variance in either matrix); those genes are excluded from
    ``mean_pcc`` and counted in ``n_undefined_pcc``.
    """

    per_gene_pcc: np.ndarray
    mean_pcc: float
    mse: float
    mae: float
    n_spots: int
    n_genes: int
    n_undefined_pcc: int
    gene_names: tuple[str, ...] | None = None
    ari: float | None = None
    pcc_axis: str = "gene"

    def to_dict(self) -> dict:
        d = {
            "mean_pcc": self.mean_pcc,
            "mse": self.mse,
            "mae": self.mae,
            "n_spots": self.n_spots,
            "n_genes": self.n_genes,
            "n_undefined_pcc": self.n_undefined_pcc,
            "pcc_axis": self.pcc_axis,
            "per_gene_pcc": [None if np.isnan(v) else float(v) for v in self.per_gene_pcc],
        }
        if self.gene_names is not None:
            d["gene_names"] = list(self.gene_names)
        if self.ari is not None:
            d["ari"] = self.ari
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        lines = [
            f"spots:           {self.n_spots}",
            f"genes:           {self.n_genes}",
            f"mean PCC ({self.pcc_axis}): {self.mean_pcc:.6f}",
            f"MSE:             {self.mse:.6f}",
            f"MAE:             {self.mae:.6f}",
            f"undefined PCC:   {self.n_undefined_pcc}",
        ]
        if self.ari is not None:
            lines.append(f"ARI:             {self.ari:.6f}")
        return "\n".join(lines)

    def per_gene_csv(self) -> str:
        names = self.gene_names or tuple(str(i) for i in range(self.n_genes))
        rows = ["gene,pcc"]
        for name, v in zip(names, self.per_gene_pcc):
            rows.append(f"{name},{'' if np.isnan(v) else repr(float(v))}")
        return "\n".join(rows) + "\n"


def evaluate(x_obs, x_pred, gene_names=None, pcc_axis: str = "gene") -> MetricsReport:
    """Aggregate report over aligned (spots x genes) matrices.

    PCC defaults to per-gene (across spots); ``pcc_axis="spot"`` correlates
    row-wise instead. Genes (or spots) with undefined correlation are
    excluded from the mean and counted.
    """
    x_obs = np.asarray(x_obs, dtype=np.float64)
    x_pred = np.asarray(x_pred, dtype=np.float64)
    if x_obs.shape != x_pred.shape:
        raise ShapeContractError(f"shape mismatch: {x_obs.shape} vs {x_pred.shape}")
    if pcc_axis not in ("gene", "spot"):
        raise ParameterError(f"pcc_axis must be 'gene' or 'spot', got {pcc_axis!r}")
    n_spots, n_genes = x_obs.shape
    n_series = n_genes if pcc_axis == "gene" else n_spots
    per = np.full(n_series, np.nan)
    for j in range(n_series):
        a = x_obs[:, j] if pcc_axis == "gene" else x_obs[j, :]
        b = x_pred[:, j] if pcc_axis == "gene" else x_pred[j, :]
        try:
            per[j] = pcc(a, b)
        except UndefinedCorrelationError:
            pass
    defined = per[~np.isnan(per)]
    if defined.size == 0:
        raise EvaluationError("correlation is undefined for every series")
    return MetricsReport(
        per_gene_pcc=per,
        mean_pcc=float(defined.mean()),
        mse=mse(x_obs, x_pred),
        mae=mae(x_obs, x_pred),
        n_spots=n_spots,
        n_genes=n_genes,
        n_undefined_pcc=int(np.isnan(per).sum()),
        gene_names=tuple(gene_names) if gene_names is not None and pcc_axis == "gene" else None,
        pcc_axis=pcc_axis,
    )


def _comb2(v: np.ndarray) -> np.ndarray:
    return v * (v - 1) / 2.0


def ari(labels_a, labels_b) -> float:
    """Adjusted Rand index from the pair-counting contingency table.

    1.0 for identical partitions up to relabeling; 1.0 by convention when the
    chance-correction denominator is zero (e.g. single cluster vs single
    cluster).
    """
    a = np.asarray(labels_a).ravel()
    b = np.asarray(labels_b).ravel()
    if a.shape != b.shape:
        raise ShapeContractError(f"label lists differ in length: {a.shape} vs {b.shape}")
    n = a.shape[0]
    if n < 2:
        raise ShapeContractError("ari needs at least 2 samples")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    contingency = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
    np.add.at(contingency, (ai, bi), 1)
    sum_nij = _comb2(contingency.astype(np.float64)).sum()
    sum_a = _comb2(contingency.sum(axis=1).astype(np.float64)).sum()
    sum_b = _comb2(contingency.sum(axis=0).astype(np.float64)).sum()
    total = n * (n - 1) / 2.0
    expected = sum_a * sum_b / total
    max_index = (sum_a + sum_b) / 2.0
    if max_index == expected:
        return 1.0
    return float((sum_nij - expected) / (max_index - expected))


def kmeans_domains(expression, k: int, seed: int) -> np.ndarray:
    """Spatial-domain labels by k-means over spot rows.

    When the matrix has more than 50 columns it is first reduced by PCA to
    50 components (deterministic full SVD). Lloyd iterations with k-means++
    seeding, iteration cap 300, center-movement tolerance 1e-4; labels are
    deterministic per seed.
    """
    from sklearn.cluster import KMeans
    from sklearn.decomposition import PCA

    x = np.asarray(expression, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeContractError("expression must be 2-D (spots x genes)")
    n_spots = x.shape[0]
    if k < 2:
        raise ParameterError(f"k must be >= 2, got {k}")
    if k > n_spots:
        raise ParameterError(f"k={k} exceeds the {n_spots} spots")
    if x.shape[1] > 50:
        n_comp = min(50, n_spots)
        x = PCA(n_components=n_comp, svd_solver="full", random_state=seed).fit_transform(x)
    km = KMeans(
        n_clusters=k,
        init="k-means++",
        n_init=10,
        max_iter=300,
        tol=1e-4,
        random_state=seed,
        algorithm="lloyd",
    )
    return km.fit_predict(x)
