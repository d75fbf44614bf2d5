"""
CLI for generating synthetic data, training, evaluating, sweeping loss weights
and exporting completed embeddings.
"""
import argparse
import json
import os
import sys

from .base import ConfigError, DataError, ImvcError
from .datasets import (
    DataSources,
    SyntheticSpec,
    apply_mask,
    export_dataset,
    generate_mask,
    read_labels,
    synthesize,
)
from .io import RunWriter
from .metrics import evaluate
from .trainers import SWEEP_GRID, TrainConfig, export_embeddings, run, sweep

ABLATIONS = {"rec": "use_rec", "ebm": "use_ebm", "caa": "use_caa"}


def _read_run(path):
    try:
        with open(path) as f:
            return json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"{path}: no such config file")
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: {e}")


def resolve_config(args):
    """
    Config from --config (a plain config or a previous run.json) or the desk
    defaults, with --seed and --ablate applied on top.
    """
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    for name in getattr(args, "ablate", None) or []:
        overrides[ABLATIONS[name]] = False
    if getattr(args, "full_scale", False):
        config = TrainConfig.full_scale()
    elif args.config:
        config = TrainConfig.from_json(args.config)
    else:
        config = TrainConfig.desk()
    return TrainConfig.from_dict(config.to_dict() | overrides)


def resolve_sources(args):
    if args.data:
        return DataSources.from_dir(args.data)
    if args.views:
        return DataSources(args.views, args.mask, args.labels)
    if args.config:
        record = _read_run(args.config)
        if "data" in record:
            return DataSources.from_dict(record["data"])
    raise DataError("no dataset given: pass --data DIR, --views PATH..., or a run.json --config")


def cmd_generate(args):
    spec = SyntheticSpec(
        n=args.n,
        v_count=args.views,
        k=args.k,
        latent_dim=args.latent_dim,
        view_dims=args.dims or ([20, 12] + [16] * max(0, args.views - 2))[: args.views],
        separation=args.separation,
        noise=args.noise,
        seed=args.seed if args.seed is not None else 0,
    ).validate()
    mask = generate_mask(spec.n, spec.v_count, args.eta, spec.seed)
    dataset = apply_mask(synthesize(spec), mask)
    sources = export_dataset(dataset, args.out, spec, args.eta)
    RunWriter(args.out).write_run("generate", spec.to_dict() | {"eta": args.eta}, sources.to_dict())
    print(f"Wrote {spec.n} samples in {spec.v_count} views to {args.out}")


def cmd_pretrain(args):
    run(resolve_config(args), resolve_sources(args), args.out, finetune=False, command="pretrain")


def cmd_train(args):
    pretrained = None
    if args.pretrained:
        pretrained = os.path.join(args.pretrained, "checkpoint.dhia")
    run(resolve_config(args), resolve_sources(args), args.out, pretrained=pretrained, command="train")


def cmd_evaluate(args):
    pred, true = read_labels(args.pred), read_labels(args.truth)
    report = evaluate(pred, true)
    writer = RunWriter(args.out)
    writer.write_run("evaluate", {}, {"labels": args.pred, "truth": args.truth})
    writer.write_metrics(report)
    print(f"ACC: {report.acc:.4f}, NMI: {report.nmi:.4f}, PUR: {report.pur:.4f}")


def cmd_sweep(args):
    config = resolve_config(args)
    sources = resolve_sources(args)
    sweep(config, sources, args.out, args.alphas, args.betas, jobs=args.jobs)
    print(f"Wrote {os.path.join(args.out, 'sweep.csv')}")


def cmd_export_embeddings(args):
    config = resolve_config(args)
    sources = resolve_sources(args)
    export_embeddings(args.checkpoint, sources, args.out, config)
    RunWriter(args.out).write_run(
        "export-embeddings", config.to_dict(), sources.to_dict(), checkpoint=args.checkpoint
    )
    print(f"Wrote embeddings to {args.out}")


def _add_common(parser):
    parser.add_argument("--config", type=str, help="TrainConfig JSON or a previous run.json")
    parser.add_argument("--out", type=str, required=True, help="Output directory, created if absent")
    parser.add_argument("--seed", type=int, default=None, help="Random seed")


def _add_data(parser):
    group = parser.add_argument_group("Data Arguments")
    group.add_argument("--data", type=str, help="Directory with view_<v>.csv, mask.csv, labels.txt")
    group.add_argument("--views", type=str, nargs="+", help="View CSV files")
    group.add_argument("--mask", type=str, help="Mask CSV (N x V, 0/1)")
    group.add_argument("--labels", type=str, help="Ground-truth labels, one per line")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="imvc", description="Incomplete multi-view clustering with hierarchical imputation."
    )
    commands = parser.add_subparsers(dest="command", required=True)

    generate = commands.add_parser("generate", help="Write a seeded synthetic dataset")
    _add_common(generate)
    generate.add_argument("--n", type=int, default=300, help="Number of samples")
    generate.add_argument("--views", type=int, default=2, help="Number of views")
    generate.add_argument("--k", type=int, default=3, help="Number of clusters")
    generate.add_argument("--latent-dim", type=int, default=4, help="Latent Gaussian dimension")
    generate.add_argument("--dims", type=int, nargs="+", help="Width of every view")
    generate.add_argument("--separation", type=float, default=6.0, help="Distance between cluster centres")
    generate.add_argument("--noise", type=float, default=0.1, help="Per-view observation noise")
    generate.add_argument("--eta", type=float, default=0.0, help="Missing ratio per view")
    generate.set_defaults(func=cmd_generate)

    pretrain = commands.add_parser("pretrain", help="Pretrain the autoencoders only")
    _add_common(pretrain)
    _add_data(pretrain)
    pretrain.add_argument("--full-scale", action="store_true", help="Use the full-scale profile")
    pretrain.set_defaults(func=cmd_pretrain)

    train = commands.add_parser("train", help="Pretrain, fine-tune and cluster")
    _add_common(train)
    _add_data(train)
    train.add_argument("--full-scale", action="store_true", help="Use the full-scale profile")
    train.add_argument(
        "--ablate", choices=sorted(ABLATIONS), action="append", help="Drop a loss term (repeatable)"
    )
    train.add_argument("--pretrained", type=str, help="Output directory of a pretrain run")
    train.set_defaults(func=cmd_train)

    evaluate_ = commands.add_parser("evaluate", help="Score predicted labels against the truth")
    _add_common(evaluate_)
    evaluate_.add_argument("--pred", type=str, required=True, help="Predicted labels file")
    evaluate_.add_argument("--truth", type=str, required=True, help="Ground-truth labels file")
    evaluate_.set_defaults(func=cmd_evaluate)

    sweep_ = commands.add_parser("sweep", help="Train over an alpha x beta grid")
    _add_common(sweep_)
    _add_data(sweep_)
    sweep_.add_argument("--ablate", choices=sorted(ABLATIONS), action="append", help="Drop a loss term")
    sweep_.add_argument("--alphas", type=float, nargs="+", default=list(SWEEP_GRID))
    sweep_.add_argument("--betas", type=float, nargs="+", default=list(SWEEP_GRID))
    sweep_.add_argument("--jobs", type=int, default=1, help="Cells trained in parallel")
    sweep_.set_defaults(func=cmd_sweep)

    export = commands.add_parser("export-embeddings", help="Write completed latents and a 2-D projection")
    _add_common(export)
    _add_data(export)
    export.add_argument("--checkpoint", type=str, required=True, help="checkpoint.dhia of a run")
    export.set_defaults(func=cmd_export_embeddings)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except ImvcError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"error: {e.filename}: {e.strerror}", file=sys.stderr)
        return DataError.exit_code
    return 0
