"""Command line entry point: ``lotsbench <subcommand> ...``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import data as datamod
from . import experiment, nn
from .lots import AttackConfig, iterative_lots
from .openmax import UNKNOWN, OpenmaxHead, OpenmaxModel, SoftmaxHead, build_openmax
from .pass_metric import pass_score
from .targets import compute_mavs, make_cav, mav_target

log = logging.getLogger("lotsbench")


def _load_data(args):
    if args.format == "synthetic":
        return datamod.make_synthetic(seed=args.seed)
    if not args.dataset:
        raise SystemExit("--dataset is required unless --format synthetic")
    return datamod.load_dataset(args.dataset, args.format)


def cmd_make_dataset(args):
    ds = datamod.make_synthetic(args.per_class, args.test_per_class, seed=args.seed)
    if args.format == "png-tree":
        datamod.save_png_tree(ds, args.out)
    else:
        datamod.save_idx(ds, args.out)
    print(f"wrote {len(ds.train)} train / {len(ds.test)} test images to {args.out}")


def cmd_train(args):
    ds = _load_data(args)
    net = nn.default_architecture(ds.train.image_shape, ds.num_classes, pooling=args.pooling, seed=args.seed)
    net = nn.train(net, ds.train.images, ds.train.labels,
                   nn.TrainConfig(epochs=args.epochs, seed=args.seed), log=log.info)
    acc = nn.accuracy(net, ds.test.images, ds.test.labels)
    net.meta["test_accuracy"] = acc
    nn.save_model(net, args.model)
    print(f"test accuracy {acc:.4f}; model written to {args.model}")


def cmd_build_openmax(args):
    ds = _load_data(args)
    net = nn.load_model(args.model)
    mavs = compute_mavs(net, ds.train.images, ds.train.labels)
    model = build_openmax(net, mavs, ds.train.images, ds.train.labels, args.tail_size, args.alpha)
    model.save(args.openmax_model)
    print(f"Openmax model (tail {model.tail_size}, alpha {model.alpha}) written to {args.openmax_model}")


def cmd_attack(args):
    net = nn.load_model(args.model)
    model = OpenmaxModel.load(args.openmax_model) if args.openmax_model else None
    if args.head == "openmax" and model is None:
        raise SystemExit("--openmax-model is required for the openmax head")
    if args.kind == "MAV" and model is None:
        raise SystemExit("--openmax-model is required for MAV targets (it stores the MAVs)")
    head = OpenmaxHead(net, model) if args.head == "openmax" else SoftmaxHead(net)
    image = datamod.read_png(args.image)
    target = make_cav(args.target, net.num_classes) if args.kind == "CAV" else mav_target(model.mavs, args.target)
    res = iterative_lots(net, head, image, target, AttackConfig(args.max_steps))
    achieved = "unknown" if res.achieved_class == UNKNOWN else res.achieved_class
    line = f"success={res.success} reason={res.reason} steps={res.steps_used} achieved={achieved} " \
           f"certainty={res.certainty:.4f}"
    if res.success:
        line += f" PASS={pass_score(res.perturbed, image).value:.4f}"
    print(line)
    if args.out:
        datamod.write_png(args.out, res.perturbed)


def cmd_matrix(args):
    ds = _load_data(args)
    net = nn.load_model(args.model)
    if args.openmax_model and Path(args.openmax_model).exists():
        model = OpenmaxModel.load(args.openmax_model)
    else:
        mavs = compute_mavs(net, ds.train.images, ds.train.labels)
        model = build_openmax(net, mavs, ds.train.images, ds.train.labels, args.tail_size, args.alpha)
    heads = [SoftmaxHead(net), OpenmaxHead(net, model)]
    probes = experiment.select_probes(ds.test, heads, args.probes)
    probes += experiment.default_canvases(ds.train.image_shape, args.seed)
    report = experiment.run_matrix(net, model, probes, AttackConfig(args.max_steps), args.out, args.workers)
    print(experiment.markdown_table(report))


def cmd_pass(args):
    a = datamod.read_png(args.perturbed)
    b = datamod.read_png(args.original)
    score = pass_score(a, b)
    print(f"PASS={score.value:.6f} aligned={score.aligned}")


def cmd_report(args):
    attempts = experiment.read_attempts_csv(Path(args.out) / "attempts.csv")
    report = experiment.ExperimentReport.from_attempts(attempts)
    experiment.emit_report(report, args.out)
    print(experiment.markdown_table(report))


def build_parser():
    p = argparse.ArgumentParser(prog="lotsbench", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def data_args(sp):
        sp.add_argument("--dataset", help="dataset directory")
        sp.add_argument("--format", choices=["idx", "png-tree", "synthetic"], default="idx")
        sp.add_argument("--seed", type=int, default=0)

    sp = sub.add_parser("make-dataset", help="write the synthetic texture dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--format", choices=["idx", "png-tree"], default="idx")
    sp.add_argument("--per-class", type=int, default=600)
    sp.add_argument("--test-per-class", type=int, default=100)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_make_dataset)

    sp = sub.add_parser("train", help="train the default network")
    data_args(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--epochs", type=int, default=nn.TrainConfig.epochs)
    sp.add_argument("--pooling", choices=["max", "avg"], default="avg")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("build-openmax", help="fit MAVs and Weibull tails")
    data_args(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--openmax-model", required=True)
    sp.add_argument("--tail-size", type=int, default=20)
    sp.add_argument("--alpha", type=int, default=None)
    sp.set_defaults(func=cmd_build_openmax)

    sp = sub.add_parser("attack", help="attack one PNG image towards one class")
    sp.add_argument("--model", required=True)
    sp.add_argument("--openmax-model")
    sp.add_argument("--image", required=True)
    sp.add_argument("--target", type=int, required=True)
    sp.add_argument("--kind", choices=["CAV", "MAV"], default="CAV", type=str.upper)
    sp.add_argument("--head", choices=["softmax", "openmax"], default="softmax")
    sp.add_argument("--max-steps", type=int, default=500)
    sp.add_argument("--out", help="where to write the perturbed PNG")
    sp.set_defaults(func=cmd_attack)

    sp = sub.add_parser("matrix", help="run the full softmax/openmax x CAV/MAV experiment")
    data_args(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--openmax-model")
    sp.add_argument("--tail-size", type=int, default=20)
    sp.add_argument("--alpha", type=int, default=None)
    sp.add_argument("--probes", type=int, default=8)
    sp.add_argument("--max-steps", type=int, default=500)
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_matrix)

    sp = sub.add_parser("pass", help="PASS between two PNG images")
    sp.add_argument("perturbed")
    sp.add_argument("original")
    sp.set_defaults(func=cmd_pass)

    sp = sub.add_parser("report", help="rebuild summary files from attempts.csv")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
