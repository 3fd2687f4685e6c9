"""Command-line pipeline: generate, train, evaluate, ablate, trajectory.

Config files are flat JSON objects whose keys mirror the relevant
dataclass fields exactly (SyntheticConfig for generate, TrainConfig for
train/ablate); unknown keys are rejected rather than ignored.
"""

import argparse
import json
import sys

import numpy as np

from .cohort import SyntheticConfig, generate_cohort, load_cohort, save_cohort, split_folds
from .errors import CheckpointError, CohortFormatError, ConfigurationError, TrainingDiverged
from .evalkit import (ABLATION_GRIDS, classification_metrics, export_trajectory,
                      run_ablation)
from .model import predict_records
from .trainer import TrainConfig, load_checkpoint, save_checkpoint, train_model

_EVAL_STREAM = 23
_TRAJECTORY_STREAM = 29


def _read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise ConfigurationError(f"cannot read config file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config file {path} is not valid JSON: {exc}") from exc


def _fold_records(cohort, k, split_seed, fold):
    splits = split_folds(cohort, k=int(k), seed=int(split_seed))
    if not 0 <= int(fold) < len(splits):
        raise ConfigurationError(f"fold must be in [0, {len(splits)})")
    split = splits[int(fold)]
    by_id = {r.id: r for r in cohort}
    pick = lambda ids: [by_id[i] for i in ids]
    return pick(split.train_ids), pick(split.val_ids), pick(split.test_ids)


def cmd_generate(args):
    payload = _read_json(args.config) if args.config else {}
    config = SyntheticConfig.from_dict(payload)
    cohort = generate_cohort(config)
    save_cohort(cohort, args.out)
    positives = sum(r.label for r in cohort)
    print(f"wrote {len(cohort)} records to {args.out} "
          f"({positives} positive, {len(cohort) - positives} negative)")
    return 0


def cmd_train(args):
    payload = _read_json(args.config) if args.config else {}
    config = TrainConfig.from_dict(payload)
    cohort = load_cohort(args.cohort)
    train, val, _ = _fold_records(cohort, config.folds, config.split_seed, args.fold)
    print(f"fold {args.fold}: {len(train)} train / {len(val)} val records")
    checkpoint = train_model(train, val, config)
    save_checkpoint(checkpoint, args.out)
    print(f"best validation accuracy {checkpoint.best_val_accuracy:.4f} "
          f"at epoch {checkpoint.best_epoch}; saved {args.out}")
    return 0


def cmd_evaluate(args):
    checkpoint = load_checkpoint(args.ckpt)
    cohort = load_cohort(args.cohort)
    _, _, test = _fold_records(cohort, checkpoint.config.folds,
                               checkpoint.config.split_seed, args.fold)
    chains = args.chains if args.chains is not None else checkpoint.config.sample_chains
    rng = np.random.default_rng([int(args.seed), _EVAL_STREAM, int(args.fold)])
    pred, _ = predict_records(checkpoint.model, test, rng=rng, chains=int(chains),
                              reverse_mode=checkpoint.config.reverse_mode)
    report = classification_metrics(pred, [r.label for r in test])
    with open(args.out, "w") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
        fh.write("\n")
    for name in ("accuracy", "precision", "recall", "f1"):
        print(f"{name:>10}: {report[name]:7.2f}%")
    print(f"report written to {args.out}")
    return 0


def cmd_ablate(args):
    payload = _read_json(args.config) if args.config else {}
    config = TrainConfig.from_dict(payload)
    cohort = load_cohort(args.cohort)
    seeds = tuple(int(s) for s in str(args.seeds).split(",") if s.strip())
    if not seeds:
        raise ConfigurationError("--seeds needs at least one integer")

    def progress(name, fold, seed, report):
        print(f"{name}: fold {fold} seed {seed} accuracy {report['accuracy']:.2f}%")

    results = run_ablation(cohort, config, grid=args.grid, folds=args.folds,
                           seeds=seeds, fold_seed=args.fold_seed, progress=progress)
    with open(args.out, "w") as fh:
        json.dump(results, fh, indent=1)
        fh.write("\n")
    width = max(len(r["name"]) for r in results["rows"])
    for row in results["rows"]:
        acc = row["metrics"]["accuracy"]
        print(f"{row['name']:<{width}}  accuracy {acc['mean']:6.2f} ± {acc['std']:.2f}")
    if "note" in results:
        print(f"note: {results['note']}")
    print(f"results written to {args.out}")
    return 0


def cmd_trajectory(args):
    checkpoint = load_checkpoint(args.ckpt)
    cohort = load_cohort(args.cohort)
    _, _, test = _fold_records(cohort, checkpoint.config.folds,
                               checkpoint.config.split_seed, args.fold)
    rng = np.random.default_rng([int(args.seed), _TRAJECTORY_STREAM, int(args.fold)])
    dump = export_trajectory(checkpoint, test, chains=int(args.chains), rng=rng,
                             out_path=args.out,
                             reverse_mode=checkpoint.config.reverse_mode)
    print(f"{len(dump)} snapshots over timesteps {dump.timesteps[0]}..0")
    print(f"cluster score: {dump.db_scores[0]:.4f} at start, "
          f"{dump.db_scores[-1]:.4f} at end")
    print(f"dump written to {args.out}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="mmfusion",
        description="Synthetic multi-modal cohorts, two-stage training, and "
                    "evaluation for the guided-diffusion fusion classifier.")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="synthesize a cohort and save it")
    g.add_argument("--config", help="JSON file with generator fields")
    g.add_argument("--out", required=True, help="output cohort directory")
    g.set_defaults(handler=cmd_generate)

    t = sub.add_parser("train", help="train one cross-validation fold")
    t.add_argument("--config", help="JSON file with training fields")
    t.add_argument("--cohort", required=True, help="cohort directory")
    t.add_argument("--fold", type=int, default=0, help="fold index")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.set_defaults(handler=cmd_train)

    e = sub.add_parser("evaluate", help="score a checkpoint on a fold's test split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--cohort", required=True)
    e.add_argument("--fold", type=int, default=0)
    e.add_argument("--out", required=True, help="metrics report JSON path")
    e.add_argument("--chains", type=int, default=None,
                   help="reverse chains per record (default: training config)")
    e.add_argument("--seed", type=int, default=0, help="sampling seed")
    e.set_defaults(handler=cmd_evaluate)

    a = sub.add_parser("ablate", help="train and compare model variants")
    a.add_argument("--cohort", required=True)
    a.add_argument("--config", help="JSON file with shared training fields")
    a.add_argument("--grid", choices=ABLATION_GRIDS, default="ablation")
    a.add_argument("--folds", type=int, default=3)
    a.add_argument("--seeds", default="0", help="comma-separated training seeds")
    a.add_argument("--fold-seed", type=int, default=0, help="split shuffling seed")
    a.add_argument("--out", required=True, help="results JSON path")
    a.set_defaults(handler=cmd_ablate)

    r = sub.add_parser("trajectory", help="dump reverse-chain snapshots per timestep")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--cohort", required=True)
    r.add_argument("--fold", type=int, default=0)
    r.add_argument("--chains", type=int, default=100)
    r.add_argument("--seed", type=int, default=0, help="sampling seed")
    r.add_argument("--out", required=True, help="manifest JSON path")
    r.set_defaults(handler=cmd_trajectory)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except (ConfigurationError, CohortFormatError, CheckpointError,
            TrainingDiverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
