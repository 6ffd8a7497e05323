"""Ground-truth density maps, the masked counting loss, and MAE/RMSE metrics.

Each annotated head contributes a truncated 2-D Gaussian renormalized to unit
mass after truncation and boundary clipping, so the total mass of a map is
exactly its head count (up to float rounding).  Counts are always read back
as the sum over the whole map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

GROUND_TRUTH = "ground_truth"
PREDICTED = "predicted"


@dataclass(frozen=True)
class KernelConfig:
    """Fixed-bandwidth Gaussian kernel; truncated at ``truncation_radius`` cells."""

    sigma: float = 4.0
    truncation_radius: int = 16

    def __post_init__(self) -> None:
        if self.sigma <= 0:
            raise ValueError("sigma must be > 0")
        if self.truncation_radius < 2 * self.sigma:
            raise ValueError("truncation_radius must be >= 2*sigma")


@dataclass
class DensityMap:
    values: np.ndarray  # (H, W) float64
    source: str = PREDICTED

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("density map must be 2-D")
        if self.source not in (GROUND_TRUTH, PREDICTED):
            raise ValueError(f"unknown source tag {self.source!r}")

    @property
    def count(self) -> float:
        return float(self.values.sum())


@dataclass
class CountMetrics:
    mae: float
    rmse: float
    per_sample_errors: list[float] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not (self.rmse >= self.mae >= 0):
            raise ValueError("metrics must satisfy rmse >= mae >= 0")


def generate_density_map(
    heads: np.ndarray, shape: tuple[int, int], kernel: KernelConfig = KernelConfig()
) -> DensityMap:
    """Convolve head points with renormalized truncated Gaussians.

    ``heads`` is an (n, 2) array of (row, col) coordinates inside the grid.
    """
    h, w = shape
    heads = np.asarray(heads, dtype=np.float64).reshape(-1, 2)
    if heads.size and (
        heads[:, 0].min() < 0
        or heads[:, 1].min() < 0
        or heads[:, 0].max() >= h
        or heads[:, 1].max() >= w
    ):
        raise ValueError("head coordinate out of bounds")

    values = np.zeros((h, w))
    radius = kernel.truncation_radius
    inv_two_var = 1.0 / (2.0 * kernel.sigma**2)
    for r, c in heads:
        r0, r1 = max(0, math.floor(r - radius)), min(h, math.ceil(r + radius) + 1)
        c0, c1 = max(0, math.floor(c - radius)), min(w, math.ceil(c + radius) + 1)
        rows = np.arange(r0, r1, dtype=np.float64) - r
        cols = np.arange(c0, c1, dtype=np.float64) - c
        bump = np.exp(-(rows[:, None] ** 2 + cols[None, :] ** 2) * inv_two_var)
        bump[rows[:, None] ** 2 + cols[None, :] ** 2 > radius**2] = 0.0
        values[r0:r1, c0:c1] += bump / bump.sum()
    return DensityMap(values=values, source=GROUND_TRUTH)


def _as_bool_mask(mask) -> np.ndarray:
    selected = getattr(mask, "selected", mask)
    return np.asarray(selected, dtype=bool)


def masked_euclidean_loss(pred: DensityMap, gt: DensityMap, mask) -> float:
    """Half the mean squared difference over masked cells.

    ``mask`` is a boolean grid or anything exposing one via ``.selected``.
    A full mask reduces to the plain per-image counting loss.
    """
    p, g = pred.values, gt.values
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
    m = _as_bool_mask(mask)
    if m.shape != p.shape:
        raise ValueError(f"mask shape {m.shape} does not match {p.shape}")
    n = int(m.sum())
    if n == 0:
        raise ValueError("mask selects no cells")
    diff = p[m] - g[m]
    return float(0.5 * np.dot(diff, diff) / n)


def evaluate(preds: list[DensityMap], gts: list[DensityMap]) -> CountMetrics:
    """MAE and RMSE of per-map counts (map sums)."""
    if not preds:
        raise ValueError("empty prediction list")
    if len(preds) != len(gts):
        raise ValueError("prediction/ground-truth length mismatch")
    errors = []
    for p, g in zip(preds, gts):
        if p.values.shape != g.values.shape:
            raise ValueError("shape mismatch in evaluate")
        errors.append(p.count - g.count)
    err = np.array(errors)
    mae = float(np.abs(err).mean())
    # rmse >= mae exactly by Jensen; max() only sweeps up float dust
    rmse = max(float(np.sqrt((err**2).mean())), mae)
    return CountMetrics(mae=mae, rmse=rmse, per_sample_errors=errors)
