"""Command-line entry points.

Subcommands: ``synth`` (generate a dataset), ``select`` (emit a label mask for
one scene), ``train`` (run the pipeline into a replayable run directory),
``eval`` (score saved parameters on a dataset split), ``bench`` (run a named
ablation), ``dump-affinity`` (numeric affinity rows for chosen labeled
positions), and ``replay`` (re-execute a run directory and verify metrics).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import harness
from .cap import cap_normalize, cap_similarity
from .counternet import forward, infer, load_params
from .densitymap import KernelConfig, evaluate
from .gmm import EmConfig
from .harness import BudgetConfig, ground_truth_maps, replay_run, run_ablation, run_pipeline, split_dataset
from .regionselect import (
    load_mask,
    partition_strips,
    save_mask,
    select_max,
    select_mdc,
    select_random,
    select_ratio_rect,
)
from .synthcrowd import DatasetError, SceneSpec, generate_dataset, load_dataset, save_dataset


def _add_spec_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--channels", type=int, default=3)
    p.add_argument("--heads-min", type=int, default=20)
    p.add_argument("--heads-max", type=int, default=200)
    p.add_argument("--gain", type=float, default=2.0)
    p.add_argument("--zones", type=int, default=3)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)


def _spec_from_args(args: argparse.Namespace) -> SceneSpec:
    return SceneSpec(
        height=args.height,
        width=args.width,
        channels=args.channels,
        n_heads_range=(args.heads_min, args.heads_max),
        perspective_gain=args.gain,
        n_horizontal_zones=args.zones,
        noise_std=args.noise,
        seed=args.seed,
    )


def _cmd_synth(args: argparse.Namespace) -> int:
    dataset = generate_dataset(_spec_from_args(args), args.n_scenes)
    save_dataset(dataset, args.out)
    print(f"wrote {args.n_scenes} scenes to {args.out}")
    return 0


def _cmd_select(args: argparse.Namespace) -> int:
    dataset = load_dataset(args.dataset)
    scene = dataset[args.scene]
    spec = scene.spec
    shape = (spec.height, spec.width)
    partition = partition_strips(shape, args.strip_fraction)
    rng = np.random.default_rng([args.seed & 0xFFFF_FFFF_FFFF_FFFF, 0x5E])
    if args.strategy == "ratio":
        if not args.ratio:
            raise ValueError("--ratio is required for the ratio strategy")
        mask = select_ratio_rect(shape, args.budget, args.ratio, rng)
    else:
        n_l = harness._strip_count(args.budget, partition.n_strips)
        if args.strategy == "random":
            mask = select_random(partition, n_l, rng)
        else:
            if not args.model:
                raise ValueError(
                    f"strategy {args.strategy!r} needs --model (a warm-up counter)"
                )
            params = load_params(args.model, Path(args.model).with_suffix(".json"))
            predicted = infer(params, scene)
            if args.strategy == "max":
                mask = select_max(partition, predicted, n_l)
            else:
                mask = select_mdc(
                    partition, predicted, args.levels, n_l, EmConfig(seed=args.seed)
                )
    mask.seed = args.seed
    save_mask(mask, args.out)
    print(f"wrote mask for scene {args.scene} ({mask.strategy}) to {args.out}")
    return 0


def _budget_from_args(args: argparse.Namespace) -> BudgetConfig:
    return BudgetConfig(
        budget_fraction=args.budget,
        warmup_fraction=args.warmup,
        strategy=args.strategy,
        ratio=args.ratio,
        levels=args.levels,
        seeds=(args.seed,),
    )


def _cmd_train(args: argparse.Namespace) -> int:
    dataset = load_dataset(args.dataset)
    result = run_pipeline(
        dataset,
        _budget_from_args(args),
        seed=args.seed,
        cap_enabled=args.cap,
        epochs=args.epochs,
        pretrain_epochs=args.pretrain_epochs,
        run_dir=args.out,
    )
    print(
        f"run dir {args.out}: mae={result.metrics.mae:.4f} "
        f"rmse={result.metrics.rmse:.4f}"
    )
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    dataset = load_dataset(args.dataset)
    params = load_params(args.params, args.params_header)
    if args.split == "test":
        _, scenes = split_dataset(dataset)
    elif args.split == "train":
        scenes, _ = split_dataset(dataset)
    else:
        scenes = dataset.scenes
    gts = ground_truth_maps(scenes, KernelConfig(sigma=args.sigma))
    preds = [infer(params, s) for s in scenes]
    metrics = evaluate(preds, gts)
    print(f"mae={metrics.mae:.17g} rmse={metrics.rmse:.17g} n={len(scenes)}")
    return 0


def _cmd_bench(args: argparse.Namespace) -> int:
    budgets = tuple(float(b) for b in args.budgets.split(",")) if args.budgets else None
    seeds = tuple(range(args.seeds))
    reports = run_ablation(
        args.ablation,
        _spec_from_args(args),
        n_scenes=args.n_scenes,
        budgets=budgets,
        seeds=seeds,
        epochs=args.epochs,
        pretrain_epochs=args.pretrain_epochs,
        out_dir=args.out,
    )
    for rep in reports:
        print(
            f"{args.ablation} {rep.label}: mean_mae={rep.mean_mae:.4f} "
            f"mean_rmse={rep.mean_rmse:.4f} "
            f"heads={rep.mean_annotated_heads:.1f}"
        )
    print(f"reports written under {args.out}")
    return 0


def _cmd_dump_affinity(args: argparse.Namespace) -> int:
    dataset = load_dataset(args.dataset)
    scene = dataset[args.scene]
    params = load_params(args.params, args.params_header)
    spec = scene.spec
    partition = partition_strips((spec.height, spec.width), args.strip_fraction)
    mask = load_mask(args.mask, partition)
    features, _ = forward(params, scene.input_grid)
    c_f = features.values.shape[0]
    flat = features.values.reshape(c_f, -1)
    sel = mask.selected.ravel()
    labeled_idx = np.flatnonzero(sel)
    unlabeled_idx = np.flatnonzero(~sel)
    if unlabeled_idx.size == 0:
        raise ValueError("mask labels every cell; no unlabeled positions to dump")
    n_l = cap_normalize(flat[:, labeled_idx], args.eps)
    n_u = cap_normalize(flat[:, unlabeled_idx], args.eps)
    affinity = cap_similarity(n_l, n_u)
    width = spec.width
    positions = []
    for token in args.positions.split(";"):
        r, c = (int(t) for t in token.split(","))
        flat_index = r * width + c
        hits = np.flatnonzero(labeled_idx == flat_index)
        if hits.size == 0:
            raise ValueError(f"position ({r},{c}) is not a labeled cell")
        positions.append((r, c, int(hits[0])))
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row", "col"] + [f"u{int(j)}" for j in unlabeled_idx])
        for r, c, li in positions:
            w.writerow([r, c] + [f"{v:.17g}" for v in affinity.weights[li]])
    print(f"wrote {len(positions)} affinity rows to {args.out}")
    return 0


def _cmd_replay(args: argparse.Namespace) -> int:
    ok, detail = replay_run(args.run)
    print(f"replay of {args.run}: {detail}")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stripcount",
        description="Strip-budget labeling and affinity-propagation counting experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset directory")
    _add_spec_args(p)
    p.add_argument("--n-scenes", type=int, default=harness.DEFAULT_N_SCENES)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("select", help="emit a label mask for one scene")
    p.add_argument("--dataset", required=True)
    p.add_argument("--scene", type=int, default=0)
    p.add_argument("--strategy", choices=("random", "max", "mdc", "ratio"), required=True)
    p.add_argument("--budget", type=float, default=0.1)
    p.add_argument("--ratio", default=None)
    p.add_argument("--levels", type=int, default=4)
    p.add_argument("--strip-fraction", type=float, default=0.1)
    p.add_argument("--model", default=None, help="params.bin of a warm-up counter")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_select)

    p = sub.add_parser("train", help="run the full pipeline into a run directory")
    p.add_argument("--dataset", required=True)
    p.add_argument("--strategy", choices=harness.STRATEGIES, default="mdc")
    p.add_argument("--budget", type=float, default=0.1)
    p.add_argument("--warmup", type=float, default=0.2)
    p.add_argument("--ratio", default=None)
    p.add_argument("--levels", type=int, default=4)
    p.add_argument("--cap", action="store_true", help="enable affinity propagation during training")
    p.add_argument("--epochs", type=int, default=harness.DEFAULT_EPOCHS)
    p.add_argument("--pretrain-epochs", type=int, default=harness.DEFAULT_PRETRAIN_EPOCHS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate saved parameters on a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--params-header", required=True)
    p.add_argument("--split", choices=("train", "test", "all"), default="test")
    p.add_argument("--sigma", type=float, default=4.0)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("bench", help="run a named ablation")
    p.add_argument("ablation", choices=harness.ABLATIONS)
    _add_spec_args(p)
    p.add_argument("--n-scenes", type=int, default=harness.DEFAULT_N_SCENES)
    p.add_argument("--budgets", default=None, help="comma-separated budget fractions")
    p.add_argument("--seeds", type=int, default=5, help="number of seeds (0..n-1)")
    p.add_argument("--epochs", type=int, default=harness.DEFAULT_EPOCHS)
    p.add_argument("--pretrain-epochs", type=int, default=harness.DEFAULT_PRETRAIN_EPOCHS)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("dump-affinity", help="write affinity rows for labeled positions")
    p.add_argument("--dataset", required=True)
    p.add_argument("--scene", type=int, default=0)
    p.add_argument("--params", required=True)
    p.add_argument("--params-header", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--strip-fraction", type=float, default=0.1)
    p.add_argument("--positions", required=True, help="semicolon-separated row,col pairs")
    p.add_argument("--eps", type=float, default=1e-6)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_dump_affinity)

    p = sub.add_parser("replay", help="re-run a run directory and verify metrics")
    p.add_argument("--run", required=True)
    p.set_defaults(func=_cmd_replay)

    return parser


def cli(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ValueError, DatasetError, FileNotFoundError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
