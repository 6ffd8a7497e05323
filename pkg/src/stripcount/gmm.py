"""Diagonal-covariance Gaussian mixtures fit by EM.

Sized for clustering a handful of strip density vectors, not for large data:
dense responsibilities, farthest-point seeding, and a variance floor that
keeps tiny or degenerate point sets from collapsing a component.  All density
arithmetic happens in log space.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class EmConfig:
    max_iters: int = 200
    tol: float = 1e-8
    variance_floor: float = 1e-6
    seed: int = 0
    n_restarts: int = 4

    def __post_init__(self) -> None:
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.tol <= 0:
            raise ValueError("tol must be > 0")
        if self.variance_floor <= 0:
            raise ValueError("variance_floor must be > 0")
        if self.n_restarts < 1:
            raise ValueError("n_restarts must be >= 1")


@dataclass
class GmmModel:
    weights: np.ndarray  # (n_components,) simplex
    means: np.ndarray  # (n_components, dim)
    covariances: np.ndarray  # (n_components, dim) diagonal entries

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.covariances = np.atleast_2d(np.asarray(self.covariances, dtype=np.float64))
        if abs(self.weights.sum() - 1.0) > 1e-12 or (self.weights < 0).any():
            raise ValueError("weights must form a simplex vector")
        if (self.covariances <= 0).any():
            raise ValueError("covariance entries must be positive")

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]


@dataclass
class ClusterAssignment:
    responsibilities: np.ndarray  # (n_points, n_components)
    tags: np.ndarray  # (n_points,) argmax component per point
    final_log_likelihood: float
    log_likelihood_path: np.ndarray = field(default_factory=lambda: np.array([]))


def _validate_points(points: np.ndarray) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if not np.isfinite(pts).all():
        raise ValueError("points must be finite")
    return pts


def _log_gaussians(model: GmmModel, points: np.ndarray) -> np.ndarray:
    """log alpha_n + log N(x_j; mu_n, diag Sigma_n), shape (n_points, n_components)."""
    diff = points[:, None, :] - model.means[None, :, :]
    quad = (diff**2 / model.covariances[None, :, :]).sum(axis=2)
    logdet = np.log(model.covariances).sum(axis=1)
    log_norm = -0.5 * (model.dim * _LOG_2PI + logdet)
    with np.errstate(divide="ignore"):
        log_w = np.log(model.weights)
    return log_w[None, :] + log_norm[None, :] - 0.5 * quad


def log_likelihood(model: GmmModel, points: np.ndarray) -> float:
    """Total log-likelihood of ``points`` under the mixture (log-sum-exp stable)."""
    pts = _validate_points(points)
    if pts.shape[1] != model.dim:
        raise ValueError(f"dimension mismatch: points {pts.shape[1]}, model {model.dim}")
    return float(logsumexp(_log_gaussians(model, pts), axis=1).sum())


def posterior(model: GmmModel, point: np.ndarray) -> np.ndarray:
    """Responsibility of each component for a single point; sums to 1."""
    pts = _validate_points(point).reshape(1, -1)
    if pts.shape[1] != model.dim:
        raise ValueError(f"dimension mismatch: point {pts.shape[1]}, model {model.dim}")
    log_joint = _log_gaussians(model, pts)[0]
    return np.exp(log_joint - logsumexp(log_joint))


def _responsibilities(model: GmmModel, points: np.ndarray) -> tuple[np.ndarray, float]:
    log_joint = _log_gaussians(model, points)
    norm = logsumexp(log_joint, axis=1)
    return np.exp(log_joint - norm[:, None]), float(norm.sum())


def _farthest_point_means(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++-style seeding: random first center, then max-min-distance picks."""
    n = points.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = ((points - points[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        nxt = int(np.argmax(d2))  # argmax takes the lowest index on ties
        chosen.append(nxt)
        d2 = np.minimum(d2, ((points - points[nxt]) ** 2).sum(axis=1))
    return points[chosen].copy()


def _initial_model(points: np.ndarray, k: int, config: EmConfig, rng: np.random.Generator) -> GmmModel:
    pooled = np.maximum(points.var(axis=0), config.variance_floor)
    return GmmModel(
        weights=np.full(k, 1.0 / k),
        means=_farthest_point_means(points, k, rng),
        covariances=np.tile(pooled, (k, 1)),
    )


def _em_single(
    points: np.ndarray, init: GmmModel, config: EmConfig
) -> tuple[GmmModel, ClusterAssignment]:
    model = init
    path = []
    resp = None
    for _ in range(config.max_iters):
        resp, ll = _responsibilities(model, points)
        path.append(ll)
        if len(path) > 1 and abs(path[-1] - path[-2]) < config.tol:
            break
        nk = resp.sum(axis=0)
        safe_nk = np.maximum(nk, 1e-300)
        means = (resp.T @ points) / safe_nk[:, None]
        diff2 = (points[:, None, :] - means[None, :, :]) ** 2
        cov = (resp[:, :, None] * diff2).sum(axis=0) / safe_nk[:, None]
        model = GmmModel(
            weights=nk / nk.sum(),
            means=means,
            covariances=np.maximum(cov, config.variance_floor),
        )
    resp, ll = _responsibilities(model, points)
    if not path or path[-1] != ll:
        path.append(ll)
    assignment = ClusterAssignment(
        responsibilities=resp,
        tags=np.argmax(resp, axis=1),
        final_log_likelihood=ll,
        log_likelihood_path=np.array(path),
    )
    return model, assignment


def em_fit(
    points: np.ndarray,
    n_components: int,
    config: EmConfig = EmConfig(),
    init: GmmModel | None = None,
) -> tuple[GmmModel, ClusterAssignment]:
    """Fit a diagonal GMM by EM; best of ``config.n_restarts`` by final log-likelihood.

    With an explicit ``init`` model, a single EM run starts from it and the
    restart schedule is skipped; this is the hook for equivariance checks and
    externally seeded fits.
    """
    pts = _validate_points(points)
    if n_components < 1:
        raise ValueError("n_components must be >= 1")
    if pts.shape[0] < n_components:
        raise ValueError(
            f"need at least {n_components} points, got {pts.shape[0]}"
        )
    if init is not None:
        if init.dim != pts.shape[1] or init.n_components != n_components:
            raise ValueError("init model shape mismatch")
        return _em_single(pts, init, config)

    best: tuple[GmmModel, ClusterAssignment] | None = None
    for restart in range(config.n_restarts):
        rng = np.random.default_rng([config.seed & 0xFFFF_FFFF_FFFF_FFFF, restart])
        model0 = _initial_model(pts, n_components, config, rng)
        model, assignment = _em_single(pts, model0, config)
        if best is None or assignment.final_log_likelihood > best[1].final_log_likelihood:
            best = (model, assignment)
    assert best is not None
    return best


def model_to_dict(model: GmmModel, seed: int | None = None, final_ll: float | None = None) -> dict:
    out = {
        "weights": model.weights.tolist(),
        "means": model.means.tolist(),
        "covariances": model.covariances.tolist(),
    }
    if seed is not None:
        out["seed"] = seed
    if final_ll is not None:
        out["final_log_likelihood"] = final_ll
    return out


def model_from_dict(d: dict) -> GmmModel:
    return GmmModel(
        weights=np.array(d["weights"]),
        means=np.array(d["means"]),
        covariances=np.array(d["covariances"]),
    )


def save_model(path: Path | str, model: GmmModel, seed: int | None = None, final_ll: float | None = None) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model, seed, final_ll), indent=2))


def load_model(path: Path | str) -> GmmModel:
    return model_from_dict(json.loads(Path(path).read_text()))
