"""Command-line entry point.

Commands: gen-data, train, eval, ablate, nesy, plot. Every run writes its
fully resolved configuration next to its outputs, so reruns from that file
alone reproduce it. Exit codes: 0 success, 2 usage/configuration error,
3 numerical failure, 4 I/O or file-format error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint
from .data import Dataset, gen_circles, gen_moons, load_cache, save_cache
from .errors import ConfigError, ContractViolation, FormatError, NumericalFailure
from .evaluate import EvalReport, cluster_accuracy, direct_accuracy, nmi, scatter_plot
from .presets import get_preset, preset_names
from .train import DataConfig, RunMetrics, TrainConfig, build_datasets, run_training

DATA_ROOT_ENV = "GEDI_DATA_ROOT"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gedi", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset cache file")
    p.add_argument("--dataset", required=True, choices=["moons", "circles"])
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--noise", type=float, default=None)
    p.add_argument("--inner-scale", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output cache file path")

    p = sub.add_parser("train", help="run two-stage training")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--preset", choices=preset_names())
    group.add_argument("--config", help="path to a JSON training configuration")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--t-steps", type=int, default=None, help="override DAM walk length")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", default=None, help="cache file path; defaults to the checkpoint's own data config")
    p.add_argument("--out", required=True)

    p = sub.add_parser("ablate", help="run an ablation/T-sweep matrix")
    p.add_argument("--dataset", required=True, choices=["moons", "circles"])
    p.add_argument("--ablations", default="gedi", help="comma-separated variant names")
    p.add_argument("--t-steps", default="10", help="comma-separated DAM walk lengths")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)

    p = sub.add_parser("nesy", help="digit-addition experiment")
    p.add_argument("--n", type=int, default=100, help="number of addition triplets")
    p.add_argument("--constraint", choices=["on", "off"], default="on")
    p.add_argument("--gedi", choices=["on", "off"], default="on")
    p.add_argument("--data-root", default=None, help=f"directory with IDX digit files (default ${DATA_ROOT_ENV})")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--out", required=True)

    p = sub.add_parser("plot", help="emit a cluster scatter SVG for 2-D data")
    p.add_argument("--dataset", required=True, help="cache file path")
    p.add_argument("--checkpoint", default=None, help="color by this model's assignments instead of true labels")
    p.add_argument("--out", required=True, help="output SVG path")

    return parser


def cmd_gen_data(args) -> int:
    if args.dataset == "moons":
        ds = gen_moons(args.n, 0.05 if args.noise is None else args.noise, seed=args.seed)
    else:
        ds = gen_circles(args.n, 0.03 if args.noise is None else args.noise, args.inner_scale, seed=args.seed)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_cache(ds, args.out)
    print(f"wrote {ds.n} x {ds.dim} {args.dataset} points to {args.out}")
    return EXIT_OK


def _load_train_config(args) -> TrainConfig:
    if args.config:
        cfg = TrainConfig.from_json(args.config)
    else:
        seed = args.seed if args.seed is not None else 0
        t_steps = args.t_steps if args.t_steps is not None else 10
        data_root = os.environ.get(DATA_ROOT_ENV)
        cfg = get_preset(args.preset, seed=seed, t_steps=t_steps, data_root=data_root)
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.data.seed = args.seed
    if args.t_steps is not None:
        cfg.dam.steps = args.t_steps
    return cfg


def cmd_train(args) -> int:
    cfg = _load_train_config(args)
    if cfg.data.kind == "addition" and not cfg.data.data_root:
        cfg.data.data_root = os.environ.get(DATA_ROOT_ENV)
    model, metrics, final = run_training(cfg, out_dir=args.out)
    print(f"final: {json.dumps(final, sort_keys=True)}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.build_model()
    if args.dataset:
        test = load_cache(args.dataset)
    else:
        if not ckpt.train_config:
            raise ConfigError("checkpoint carries no data config; pass --dataset")
        cfg = TrainConfig.from_dict(ckpt.train_config)
        _, test, _ = build_datasets(cfg)
    if test.dim != model.config.input_dim:
        raise ConfigError(f"dataset dimension {test.dim} does not match model input {model.config.input_dim}")

    assignments = []
    for start in range(0, test.n, 2048):
        assignments.append(model.assign_clusters(test.points[start : start + 2048]))
    assignments = np.concatenate(assignments)

    report = EvalReport(
        nmi=nmi(assignments, test.labels),
        cluster_accuracy=cluster_accuracy(assignments, test.labels),
        direct_accuracy=direct_accuracy(assignments, test.labels),
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "eval_report.json", "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
    if test.dim == 2:
        scatter_plot(test.points, assignments, out / "clusters.svg")
        scatter_plot(test.points, test.labels, out / "ground_truth.svg")
    print(f"nmi={report.nmi:.4f} cluster_accuracy={report.cluster_accuracy:.4f}")
    return EXIT_OK


def _ablate_single(task) -> dict:
    dataset, variant, t_steps, seed, out_dir = task
    cfg = get_preset(f"{dataset}-{variant}" if variant != "gedi" else f"{dataset}-gedi", seed=seed, t_steps=t_steps)
    _, _, final = run_training(cfg, out_dir=out_dir)
    return {"ablation": variant, "t_steps": t_steps, "seed": seed, **final}


def cmd_ablate(args) -> int:
    ablations = [a.strip() for a in args.ablations.split(",") if a.strip()]
    t_values = [int(t) for t in args.t_steps.split(",")]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tasks = []
    for variant in ablations:
        for t in t_values:
            for seed in range(args.seeds):
                run_dir = out / f"{variant}-t{t}-seed{seed}"
                tasks.append((args.dataset, variant, t, seed, str(run_dir)))
    if args.jobs > 1:
        import multiprocessing as mp

        with mp.get_context("spawn").Pool(args.jobs) as pool:
            results = pool.map(_ablate_single, tasks)
    else:
        results = [_ablate_single(t) for t in tasks]

    rows = []
    for variant in ablations:
        for t in t_values:
            nmis = [r["nmi"] for r in results if r["ablation"] == variant and r["t_steps"] == t]
            rows.append({
                "ablation": variant,
                "t_steps": t,
                "seeds": len(nmis),
                "nmi_mean": float(np.mean(nmis)),
                "nmi_std": float(np.std(nmis)),
            })
    with open(out / "ablation_table.json", "w", encoding="utf-8") as fh:
        json.dump({"dataset": args.dataset, "rows": rows, "runs": results}, fh, indent=2, sort_keys=True)
    header = f"{'ablation':<18}{'T':>4}{'seeds':>7}{'NMI mean':>10}{'NMI std':>9}"
    lines = [header, "-" * len(header)]
    for row in rows:
        lines.append(f"{row['ablation']:<18}{row['t_steps']:>4}{row['seeds']:>7}{row['nmi_mean']:>10.3f}{row['nmi_std']:>9.3f}")
    table = "\n".join(lines)
    (out / "ablation_table.txt").write_text(table + "\n", encoding="utf-8")
    print(table)
    return EXIT_OK


def cmd_nesy(args) -> int:
    data_root = args.data_root or os.environ.get(DATA_ROOT_ENV)
    if not data_root:
        raise ConfigError(f"no data root: pass --data-root or set ${DATA_ROOT_ENV}")
    from .presets import addition_preset

    cfg = addition_preset(
        n_triplets=args.n,
        constraint=args.constraint == "on",
        gedi=args.gedi == "on",
        seed=args.seed,
        data_root=data_root,
        epochs=args.epochs,
    )
    # triplet grouping requires batches of whole triplets
    if cfg.batch_size % 3 != 0:
        cfg.batch_size += 3 - cfg.batch_size % 3
    model, metrics, final = run_training(cfg, out_dir=args.out)
    print(f"final: {json.dumps(final, sort_keys=True)}")
    return EXIT_OK


def cmd_plot(args) -> int:
    test = load_cache(args.dataset)
    if test.dim != 2:
        raise ConfigError("plot requires 2-D data")
    if args.checkpoint:
        ckpt = load_checkpoint(args.checkpoint)
        model = ckpt.build_model()
        if model.config.input_dim != 2:
            raise ConfigError("checkpoint model is not 2-D")
        colors = model.assign_clusters(test.points)
    else:
        colors = test.labels
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    scatter_plot(test.points, colors, args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "nesy": cmd_nesy,
    "plot": cmd_plot,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ContractViolation) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalFailure as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, OSError) as err:
        print(f"i/o error: {err}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
