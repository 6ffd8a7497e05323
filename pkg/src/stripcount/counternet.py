"""A three-layer density-map counter with exact, hand-derived gradients.

conv 3x3 -> ReLU -> conv 3x3 -> ReLU gives the feature map; a 1x1 head with a
final ReLU reads out the predicted density.  Everything runs in float64 numpy
so analytic gradients can be checked against central finite differences to
tight tolerances.  Training is batch-size-1 over scenes with a masked counting
loss; when affinity propagation is enabled, labeled-position features are
blended with unlabeled ones (see ``cap``) before the head, which is how
labeled supervision reaches unlabeled regions.  Inference is a plain forward
pass and never touches the affinity branch.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .cap import cap_backward, cap_forward
from .densitymap import PREDICTED, DensityMap, evaluate
from .gridio import read_grid, write_grid

_INIT_STREAM = 3
_TRAIN_STREAM = 4

LABELED_REGION = "labeled_region"
UNLABELED_REGION = "unlabeled_region"
FULL = "full"


@dataclass
class FeatureMap:
    values: np.ndarray  # (C_f, H, W)
    origin: str = FULL


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 30
    cap_enabled: bool = False
    cap_eps: float = 1e-6
    flip_augment: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass
class CounterParams:
    w1: np.ndarray  # (C_f, C_in, 3, 3)
    b1: np.ndarray  # (C_f,)
    w2: np.ndarray  # (C_f, C_f, 3, 3)
    b2: np.ndarray  # (C_f,)
    w_head: np.ndarray  # (C_f,)
    b_head: float
    gamma: float  # affinity blend scalar, trained jointly

    @property
    def c_in(self) -> int:
        return self.w1.shape[1]

    @property
    def c_f(self) -> int:
        return self.w1.shape[0]

    def copy(self) -> "CounterParams":
        return CounterParams(
            w1=self.w1.copy(),
            b1=self.b1.copy(),
            w2=self.w2.copy(),
            b2=self.b2.copy(),
            w_head=self.w_head.copy(),
            b_head=float(self.b_head),
            gamma=float(self.gamma),
        )


@dataclass
class Gradients:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w_head: np.ndarray
    b_head: float
    gamma: float
    input_grid: np.ndarray


def init_params(c_in: int, c_f: int = 8, seed: int = 0, gamma_init: float = 0.2) -> CounterParams:
    """Symmetric uniform fan-in initialization; biases start at zero."""
    rng = np.random.default_rng([seed & 0xFFFF_FFFF_FFFF_FFFF, _INIT_STREAM])

    def uniform(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    return CounterParams(
        w1=uniform((c_f, c_in, 3, 3), c_in * 9),
        b1=np.zeros(c_f),
        w2=uniform((c_f, c_f, 3, 3), c_f * 9),
        b2=np.zeros(c_f),
        w_head=uniform((c_f,), c_f),
        # start the output ReLU in its active region; a zero bias lets an
        # unlucky init drive every head pre-activation negative, after which
        # no gradient can revive the prediction path
        b_head=0.1,
        gamma=float(gamma_init),
    )


def _patches(x: np.ndarray) -> np.ndarray:
    """3x3 same-padding patches of a (C, H, W) grid, shape (C, H, W, 3, 3)."""
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    return sliding_window_view(xp, (3, 3), axis=(1, 2))


def _conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    out = np.einsum("ocij,chwij->ohw", w, _patches(x), optimize=True)
    if b is not None:
        out += b[:, None, None]
    return out


def _conv2d_transpose(dz: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Gradient of _conv2d w.r.t. its input: correlate dz with the flipped,
    channel-transposed kernel."""
    w_t = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    return _conv2d(dz, w_t)


def _conv2d_weight_grad(dz: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.einsum("ohw,chwij->ocij", dz, _patches(x), optimize=True)


@dataclass
class _ForwardCache:
    x: np.ndarray
    z1: np.ndarray
    a1: np.ndarray
    z2: np.ndarray
    a2: np.ndarray
    z3: np.ndarray
    pred: np.ndarray


def _forward_cache(params: CounterParams, x: np.ndarray) -> _ForwardCache:
    if x.ndim != 3 or x.shape[0] != params.c_in:
        raise ValueError(
            f"input grid shape {x.shape} does not match {params.c_in} input channels"
        )
    z1 = _conv2d(x, params.w1, params.b1)
    a1 = np.maximum(z1, 0.0)
    z2 = _conv2d(a1, params.w2, params.b2)
    a2 = np.maximum(z2, 0.0)
    z3 = np.einsum("c,chw->hw", params.w_head, a2) + params.b_head
    pred = np.maximum(z3, 0.0)
    return _ForwardCache(x=x, z1=z1, a1=a1, z2=z2, a2=a2, z3=z3, pred=pred)


def forward(params: CounterParams, input_grid: np.ndarray) -> tuple[FeatureMap, DensityMap]:
    cache = _forward_cache(params, np.asarray(input_grid, dtype=np.float64))
    return (
        FeatureMap(values=cache.a2, origin=FULL),
        DensityMap(values=cache.pred, source=PREDICTED),
    )


def _backward_convs(
    params: CounterParams, cache: _ForwardCache, da2: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Backprop from a feature-map gradient down to the input grid."""
    dz2 = da2 * (cache.z2 > 0)
    dw2 = _conv2d_weight_grad(dz2, cache.a1)
    db2 = dz2.sum(axis=(1, 2))
    da1 = _conv2d_transpose(dz2, params.w2)
    dz1 = da1 * (cache.z1 > 0)
    dw1 = _conv2d_weight_grad(dz1, cache.x)
    db1 = dz1.sum(axis=(1, 2))
    dx = _conv2d_transpose(dz1, params.w1)
    return dw1, db1, dw2, db2, dx


def backward(
    params: CounterParams, input_grid: np.ndarray, upstream: np.ndarray
) -> Gradients:
    """Exact gradients of the plain forward pass given an upstream gradient on
    the predicted density map."""
    x = np.asarray(input_grid, dtype=np.float64)
    cache = _forward_cache(params, x)
    if upstream.shape != cache.pred.shape:
        raise ValueError(f"upstream shape {upstream.shape} != {cache.pred.shape}")
    dz3 = upstream * (cache.z3 > 0)
    dw_head = np.einsum("hw,chw->c", dz3, cache.a2)
    db_head = float(dz3.sum())
    da2 = params.w_head[:, None, None] * dz3[None, :, :]
    dw1, db1, dw2, db2, dx = _backward_convs(params, cache, da2)
    return Gradients(
        w1=dw1, b1=db1, w2=dw2, b2=db2,
        w_head=dw_head, b_head=db_head, gamma=0.0, input_grid=dx,
    )


def train_step_loss_and_grads(
    params: CounterParams,
    input_grid: np.ndarray,
    gt_values: np.ndarray,
    mask_bool: np.ndarray,
    cap_enabled: bool,
    cap_eps: float = 1e-6,
) -> tuple[float, Gradients]:
    """Masked counting loss and its exact gradients for one scene.

    With the affinity branch enabled, labeled-position features are rerouted
    through normalize/similarity/propagate before the head, so the returned
    gradients carry signal from unlabeled positions as well.
    """
    x = np.asarray(input_grid, dtype=np.float64)
    cache = _forward_cache(params, x)
    mask = np.asarray(mask_bool, dtype=bool)
    if mask.shape != gt_values.shape or mask.shape != cache.pred.shape:
        raise ValueError("mask/ground-truth/prediction shapes disagree")
    n_labeled = int(mask.sum())
    if n_labeled == 0:
        raise ValueError("mask selects no cells")

    c_f = params.c_f
    flat_mask = mask.ravel()
    labeled_idx = np.flatnonzero(flat_mask)
    unlabeled_idx = np.flatnonzero(~flat_mask)
    gt_l = gt_values.ravel()[labeled_idx]
    a2_flat = cache.a2.reshape(c_f, -1)

    use_cap = cap_enabled and unlabeled_idx.size > 0
    if use_cap:
        f_l_raw = a2_flat[:, labeled_idx]
        f_u_raw = a2_flat[:, unlabeled_idx]
        blended, cap_cache = cap_forward(f_l_raw, f_u_raw, params.gamma, cap_eps)
        z3_l = params.w_head @ blended + params.b_head
        pred_l = np.maximum(z3_l, 0.0)
        diff = pred_l - gt_l
        loss = float(0.5 * np.dot(diff, diff) / n_labeled)
        dz3 = (diff / n_labeled) * (z3_l > 0)
        dw_head = blended @ dz3
        db_head = float(dz3.sum())
        d_blended = params.w_head[:, None] * dz3[None, :]
        d_f_l, d_f_u, d_gamma = cap_backward(d_blended, cap_cache)
        da2_flat = np.zeros_like(a2_flat)
        da2_flat[:, labeled_idx] = d_f_l
        da2_flat[:, unlabeled_idx] = d_f_u
        da2 = da2_flat.reshape(cache.a2.shape)
    else:
        diff = cache.pred.ravel()[labeled_idx] - gt_l
        loss = float(0.5 * np.dot(diff, diff) / n_labeled)
        upstream = np.zeros(flat_mask.shape)
        upstream[labeled_idx] = diff / n_labeled
        upstream = upstream.reshape(mask.shape)
        dz3 = upstream * (cache.z3 > 0)
        dw_head = np.einsum("hw,chw->c", dz3, cache.a2)
        db_head = float(dz3.sum())
        da2 = params.w_head[:, None, None] * dz3[None, :, :]
        d_gamma = 0.0

    if not np.isfinite(loss):
        raise RuntimeError(f"non-finite training loss {loss}")
    dw1, db1, dw2, db2, dx = _backward_convs(params, cache, da2)
    return loss, Gradients(
        w1=dw1, b1=db1, w2=dw2, b2=db2,
        w_head=dw_head, b_head=db_head, gamma=d_gamma, input_grid=dx,
    )


_TRAINABLE = ("w1", "b1", "w2", "b2", "w_head", "b_head", "gamma")


class Adam:
    """Adaptive-moment optimizer over the counter's parameter fields."""

    def __init__(self, config: TrainConfig):
        self.lr = config.learning_rate
        self.beta1 = config.beta1
        self.beta2 = config.beta2
        self.eps = config.adam_eps
        self.t = 0
        self.m: dict[str, np.ndarray | float] = {}
        self.v: dict[str, np.ndarray | float] = {}

    def step(self, params: CounterParams, grads: Gradients) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name in _TRAINABLE:
            g = getattr(grads, name)
            m = self.m.get(name, 0.0)
            v = self.v.get(name, 0.0)
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            self.m[name] = m
            self.v[name] = v
            update = self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            value = getattr(params, name)
            if isinstance(value, np.ndarray):
                value -= update
            else:
                setattr(params, name, value - float(update))
        # the blend scalar reads as a convex weight; keep it in [0, 1]
        params.gamma = float(np.clip(params.gamma, 0.0, 1.0))


def train(
    scenes: list,
    masks: list,
    gt_maps: list[DensityMap],
    config: TrainConfig,
    init: CounterParams | None = None,
    c_f: int = 8,
    val_scenes: list | None = None,
    val_gt_maps: list[DensityMap] | None = None,
) -> tuple[CounterParams, list[dict]]:
    """Minimize the masked counting loss over scenes; batch size 1.

    ``scenes`` entries expose ``.input_grid``; ``masks`` entries expose
    ``.selected``.  Returns the trained parameters and a per-epoch log of
    mean loss (and validation MAE when a validation split is given).
    """
    if not scenes:
        raise ValueError("no scenes to train on")
    if not (len(scenes) == len(masks) == len(gt_maps)):
        raise ValueError("scenes, masks, and gt_maps must align")
    grids = [np.asarray(s.input_grid, dtype=np.float64) for s in scenes]
    sel = [np.asarray(m.selected, dtype=bool) for m in masks]
    gts = [g.values for g in gt_maps]
    for m, g in zip(sel, gts):
        if m.sum() == 0:
            raise ValueError("every scene needs a nonempty label mask")
        if m.shape != g.shape:
            raise ValueError("mask and ground-truth shapes disagree")

    params = init.copy() if init is not None else init_params(
        c_in=grids[0].shape[0], c_f=c_f, seed=config.seed
    )
    rng = np.random.default_rng([config.seed & 0xFFFF_FFFF_FFFF_FFFF, _TRAIN_STREAM])
    optimizer = Adam(config)
    log: list[dict] = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(grids))
        losses = []
        for i in order:
            x, gt, m = grids[i], gts[i], sel[i]
            if config.flip_augment and rng.random() < 0.5:
                x = x[:, :, ::-1].copy()
                gt = gt[:, ::-1].copy()
                m = m[:, ::-1].copy()
            loss, grads = train_step_loss_and_grads(
                params, x, gt, m, config.cap_enabled, config.cap_eps
            )
            optimizer.step(params, grads)
            losses.append(loss)
        entry = {"epoch": epoch, "loss": float(np.mean(losses)), "val_mae": float("nan")}
        if val_scenes:
            preds = [infer(params, s) for s in val_scenes]
            entry["val_mae"] = evaluate(preds, val_gt_maps).mae
        log.append(entry)
    return params, log


def infer(params: CounterParams, scene) -> DensityMap:
    """Plain forward pass; the affinity branch never participates."""
    grid = getattr(scene, "input_grid", scene)
    _, pred = forward(params, np.asarray(grid, dtype=np.float64))
    return pred


def save_params(params: CounterParams, bin_path: Path | str, json_path: Path | str) -> None:
    header = {
        "dtype": "<f8",
        "fields": [
            {"name": "w1", "shape": list(params.w1.shape)},
            {"name": "b1", "shape": list(params.b1.shape)},
            {"name": "w2", "shape": list(params.w2.shape)},
            {"name": "b2", "shape": list(params.b2.shape)},
            {"name": "w_head", "shape": list(params.w_head.shape)},
            {"name": "b_head", "shape": []},
            {"name": "gamma", "shape": []},
        ],
    }
    flat = np.concatenate(
        [
            params.w1.ravel(),
            params.b1.ravel(),
            params.w2.ravel(),
            params.b2.ravel(),
            params.w_head.ravel(),
            [params.b_head, params.gamma],
        ]
    )
    write_grid(bin_path, flat)
    Path(json_path).write_text(json.dumps(header, indent=2))


def load_params(bin_path: Path | str, json_path: Path | str) -> CounterParams:
    header = json.loads(Path(json_path).read_text())
    sizes = [int(np.prod(f["shape"])) if f["shape"] else 1 for f in header["fields"]]
    flat = read_grid(bin_path, (sum(sizes),))
    values = {}
    offset = 0
    for f, size in zip(header["fields"], sizes):
        chunk = flat[offset : offset + size]
        values[f["name"]] = chunk.reshape(f["shape"]) if f["shape"] else float(chunk[0])
        offset += size
    return CounterParams(**values)
