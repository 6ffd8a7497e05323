"""Vertical strip partitions and labeling-region selection strategies.

A scene is split into full-height strips of (near) equal width; a labeling
budget buys a subset of strips per scene.  Strategies:

* ``random``  — uniform strips without replacement
* ``max``     — strips with the largest predicted density mass
* ``mdc``     — multi-level density vectors clustered by a GMM, one
                representative strip per cluster (the vector nearest its
                cluster mean)
* ``ratio``   — a randomly placed rectangle with a requested aspect ratio
                instead of strips (used for aspect-ratio comparisons)

Adjacent selected strips are recorded as merged runs; the run bookkeeping
models annotation ergonomics and never changes the selected cell set.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .densitymap import DensityMap
from .gmm import ClusterAssignment, EmConfig, GmmModel, em_fit

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class StripPartition:
    n_strips: int
    strip_bounds: tuple[tuple[int, int], ...]  # half-open column intervals
    strip_width_fraction: float
    height: int
    width: int

    def __post_init__(self) -> None:
        bounds = self.strip_bounds
        if len(bounds) != self.n_strips:
            raise ValueError("n_strips does not match strip_bounds")
        cursor = 0
        for start, end in bounds:
            if start != cursor or end <= start:
                raise ValueError("strip bounds must be contiguous and non-empty")
            cursor = end
        if cursor != self.width:
            raise ValueError("strips must cover the full width")

    def columns_of(self, strip: int) -> np.ndarray:
        start, end = self.strip_bounds[strip]
        return np.arange(start, end)


@dataclass
class LabelMask:
    selected: np.ndarray  # (H, W) bool
    selected_strips: tuple[int, ...] = ()
    merged_runs: tuple[tuple[int, int], ...] = ()  # half-open strip-index runs
    strategy: str = ""
    budget_fraction: float = 0.0
    seed: int | None = None
    rect: tuple[int, int, int, int] | None = None  # (top, left, height, width)

    def __post_init__(self) -> None:
        self.selected = np.asarray(self.selected, dtype=bool)

    @property
    def n_selected_cells(self) -> int:
        return int(self.selected.sum())

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "budget_fraction": self.budget_fraction,
            "seed": self.seed,
            "shape": list(self.selected.shape),
            "strip_indices": list(self.selected_strips),
            "merged_runs": [list(run) for run in self.merged_runs],
            "rect": list(self.rect) if self.rect is not None else None,
        }


def merge_adjacent(strips: tuple[int, ...]) -> tuple[tuple[int, int], ...]:
    """Maximal runs of consecutive strip indices, as half-open (start, stop)."""
    runs = []
    for s in sorted(strips):
        if runs and s == runs[-1][1]:
            runs[-1][1] = s + 1
        else:
            runs.append([s, s + 1])
    return tuple((a, b) for a, b in runs)


def partition_strips(shape: tuple[int, int], strip_width_fraction: float) -> StripPartition:
    """Split the width into ``round(1/fraction)`` strips; the last one absorbs
    the rounding remainder."""
    h, w = shape
    if not 0 < strip_width_fraction <= 1:
        raise ValueError("strip_width_fraction must be in (0, 1]")
    n_strips = max(1, round(1.0 / strip_width_fraction))
    base = w // n_strips
    if base == 0:
        raise ValueError(f"fraction {strip_width_fraction} yields zero-width strips for W={w}")
    bounds = [(i * base, (i + 1) * base) for i in range(n_strips - 1)]
    bounds.append(((n_strips - 1) * base, w))
    return StripPartition(
        n_strips=n_strips,
        strip_bounds=tuple(bounds),
        strip_width_fraction=strip_width_fraction,
        height=h,
        width=w,
    )


@dataclass
class MultiLevelDensityVector:
    levels: int
    entries: np.ndarray  # length levels*(levels+1)/2
    strip_index: int = -1

    def __post_init__(self) -> None:
        self.entries = np.asarray(self.entries, dtype=np.float64)
        expected = self.levels * (self.levels + 1) // 2
        if self.entries.shape != (expected,):
            raise ValueError(f"expected {expected} entries for L={self.levels}")


def multilevel_density_vector(
    density: DensityMap | np.ndarray,
    bounds: tuple[int, int],
    levels: int,
    strip_index: int = -1,
) -> MultiLevelDensityVector:
    """Concatenated row-block sums of one strip at granularities 1..levels.

    At level k the strip rows split into k blocks of height H//k (the last
    block absorbs any remainder rows, so every row is counted exactly once
    per level) and each block sum is rescaled by k/levels to put all levels
    on a common magnitude.
    """
    values = density.values if isinstance(density, DensityMap) else np.asarray(density)
    h = values.shape[0]
    if levels < 1:
        raise ValueError("levels must be >= 1")
    if levels > h:
        raise ValueError(f"levels={levels} exceeds height {h}")
    start, end = bounds
    strip = values[:, start:end]
    row_sums = strip.sum(axis=1)
    entries = []
    for k in range(1, levels + 1):
        block = h // k
        for i in range(k):
            top = i * block
            bottom = (i + 1) * block if i < k - 1 else h
            entries.append(row_sums[top:bottom].sum() * k / levels)
    return MultiLevelDensityVector(
        levels=levels, entries=np.array(entries), strip_index=strip_index
    )


def partition_density_vectors(
    density: DensityMap | np.ndarray, partition: StripPartition, levels: int
) -> np.ndarray:
    """Density-vector matrix for every strip, shape (n_strips, L(L+1)/2)."""
    return np.stack(
        [
            multilevel_density_vector(density, b, levels, strip_index=j).entries
            for j, b in enumerate(partition.strip_bounds)
        ]
    )


def _strips_to_mask(
    partition: StripPartition,
    strips: tuple[int, ...],
    strategy: str,
    budget_fraction: float,
    seed: int | None = None,
) -> LabelMask:
    selected = np.zeros((partition.height, partition.width), dtype=bool)
    for s in strips:
        start, end = partition.strip_bounds[s]
        selected[:, start:end] = True
    return LabelMask(
        selected=selected,
        selected_strips=tuple(sorted(strips)),
        merged_runs=merge_adjacent(strips),
        strategy=strategy,
        budget_fraction=budget_fraction,
        seed=seed,
    )


def _check_n_l(partition: StripPartition, n_l: int) -> None:
    if not 1 <= n_l <= partition.n_strips:
        raise ValueError(f"n_l={n_l} out of range [1, {partition.n_strips}]")


def select_random(
    partition: StripPartition, n_l: int, rng: np.random.Generator
) -> LabelMask:
    """Uniform sample of ``n_l`` strips without replacement."""
    _check_n_l(partition, n_l)
    strips = tuple(sorted(rng.choice(partition.n_strips, size=n_l, replace=False).tolist()))
    return _strips_to_mask(partition, strips, "random_strips", n_l / partition.n_strips)


def strip_masses(partition: StripPartition, density: DensityMap | np.ndarray) -> np.ndarray:
    values = density.values if isinstance(density, DensityMap) else np.asarray(density)
    return np.array([values[:, a:b].sum() for a, b in partition.strip_bounds])


def select_max(
    partition: StripPartition, predicted_map: DensityMap, n_l: int
) -> LabelMask:
    """The ``n_l`` strips with the largest predicted mass; ties take the lower index."""
    _check_n_l(partition, n_l)
    masses = strip_masses(partition, predicted_map)
    order = sorted(range(partition.n_strips), key=lambda j: (-masses[j], j))
    return _strips_to_mask(
        partition, tuple(order[:n_l]), "max_strips", n_l / partition.n_strips
    )


def _representatives(
    vectors: np.ndarray, model: GmmModel, assignment: ClusterAssignment
) -> list[int]:
    """One strip per cluster: the vector closest to its cluster mean (Euclidean,
    ties to the lowest strip index); empty clusters backfilled with the
    unselected strip farthest from all current picks (max-min distance)."""
    n_strips = vectors.shape[0]
    chosen: list[int] = []
    empty_clusters = 0
    for comp in range(model.n_components):
        members = np.flatnonzero(assignment.tags == comp)
        if members.size == 0:
            empty_clusters += 1
            continue
        dists = np.linalg.norm(vectors[members] - model.means[comp], axis=1)
        chosen.append(int(members[np.argmin(dists)]))
    for _ in range(empty_clusters):
        remaining = [j for j in range(n_strips) if j not in chosen]
        if not remaining:
            break
        if chosen:
            min_dist = [
                min(np.linalg.norm(vectors[j] - vectors[c]) for c in chosen)
                for j in remaining
            ]
            chosen.append(remaining[int(np.argmax(min_dist))])
        else:
            chosen.append(remaining[0])
    return chosen


def select_mdc_detailed(
    partition: StripPartition,
    predicted_map: DensityMap,
    levels: int,
    n_l: int,
    em_config: EmConfig = EmConfig(),
) -> tuple[LabelMask, GmmModel | None, ClusterAssignment | None, np.ndarray]:
    """Density-aware clustering selection, returning the fitted mixture and
    assignment for auditing alongside the mask."""
    _check_n_l(partition, n_l)
    vectors = partition_density_vectors(predicted_map, partition, levels)
    budget = n_l / partition.n_strips

    if predicted_map.values.sum() == 0.0:
        # An untrained counter can emit an all-zero map; clustering carries no
        # information then, so fall back to a seeded random pick.
        logger.warning("all-zero predicted map: mdc falling back to random selection")
        rng = np.random.default_rng([em_config.seed & 0xFFFF_FFFF_FFFF_FFFF, 0xFB])
        mask = select_random(partition, n_l, rng)
        mask.strategy = "mdc"
        mask.seed = em_config.seed
        return mask, None, None, vectors

    model, assignment = em_fit(vectors, n_components=n_l, config=em_config)
    chosen = _representatives(vectors, model, assignment)
    mask = _strips_to_mask(
        partition, tuple(chosen), "mdc", budget, seed=em_config.seed
    )
    return mask, model, assignment, vectors


def select_mdc(
    partition: StripPartition,
    predicted_map: DensityMap,
    levels: int,
    n_l: int,
    em_config: EmConfig = EmConfig(),
) -> LabelMask:
    return select_mdc_detailed(partition, predicted_map, levels, n_l, em_config)[0]


def _parse_ratio(ratio: str) -> tuple[float, float]:
    try:
        v_str, h_str = ratio.split(":")
        v = math.inf if v_str.strip() in ("inf", "∞") else float(v_str)
        h = math.inf if h_str.strip() in ("inf", "∞") else float(h_str)
    except ValueError as exc:
        raise ValueError(f"bad ratio tag {ratio!r}, expected 'v:h'") from exc
    if v <= 0 or h <= 0 or (math.isinf(v) and math.isinf(h)):
        raise ValueError(f"bad ratio tag {ratio!r}")
    return v, h


def select_ratio_rect(
    shape: tuple[int, int],
    budget_fraction: float,
    ratio: str,
    rng: np.random.Generator,
) -> LabelMask:
    """A randomly positioned rectangle of ``budget_fraction`` of the area with
    aspect ``ratio`` (vertical:horizontal).  ``inf:1`` pins the height to H,
    ``1:inf`` pins the width to W."""
    h, w = shape
    if not 0 < budget_fraction <= 1:
        raise ValueError("budget_fraction must be in (0, 1]")
    v, hz = _parse_ratio(ratio)
    area = budget_fraction * h * w
    if budget_fraction == 1.0:
        rect_h, rect_w = h, w
    elif math.isinf(v):
        rect_h, rect_w = h, min(w, max(1, round(budget_fraction * w)))
    elif math.isinf(hz):
        rect_h, rect_w = min(h, max(1, round(budget_fraction * h))), w
    else:
        ideal_h = math.sqrt(area * v / hz)
        ideal_w = area / ideal_h
        rect_h, rect_w = max(1, round(ideal_h)), max(1, round(ideal_w))
        if rect_h > h or rect_w > w:
            raise ValueError(
                f"ratio {ratio} infeasible for budget {budget_fraction} at {shape}"
            )
    top = int(rng.integers(0, h - rect_h + 1))
    left = int(rng.integers(0, w - rect_w + 1))
    selected = np.zeros((h, w), dtype=bool)
    selected[top : top + rect_h, left : left + rect_w] = True
    return LabelMask(
        selected=selected,
        strategy="ratio_rect",
        budget_fraction=budget_fraction,
        rect=(top, left, rect_h, rect_w),
    )


def full_mask(shape: tuple[int, int]) -> LabelMask:
    """Every cell labeled (whole-image annotation)."""
    return LabelMask(
        selected=np.ones(shape, dtype=bool),
        strategy="none_or_all",
        budget_fraction=1.0,
    )


def save_mask(mask: LabelMask, path: Path | str) -> None:
    Path(path).write_text(json.dumps(mask.to_dict(), indent=2))


def load_mask(path: Path | str, partition: StripPartition | None = None) -> LabelMask:
    d = json.loads(Path(path).read_text())
    shape = tuple(d["shape"])
    strips = tuple(d["strip_indices"])
    rect = tuple(d["rect"]) if d.get("rect") is not None else None
    selected = np.zeros(shape, dtype=bool)
    if strips:
        if partition is None:
            raise ValueError("strip mask requires the partition to rebuild cells")
        for s in strips:
            a, b = partition.strip_bounds[s]
            selected[:, a:b] = True
    elif rect is not None:
        top, left, rh, rw = rect
        selected[top : top + rh, left : left + rw] = True
    else:
        selected[:, :] = True
    return LabelMask(
        selected=selected,
        selected_strips=strips,
        merged_runs=tuple(tuple(r) for r in d["merged_runs"]),
        strategy=d["strategy"],
        budget_fraction=d["budget_fraction"],
        seed=d.get("seed"),
        rect=rect,
    )
