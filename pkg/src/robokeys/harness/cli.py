"""Command-line entry point: ``robokeys <command> ...``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys

from ..net import load_checkpoint, save_checkpoint
from .config import ExperimentConfig

log = logging.getLogger("robokeys")


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if getattr(args, "config", None) else ExperimentConfig()
    overrides = {}
    for name in ("seed", "epochs", "sim_count", "samples_per_epoch", "validation_size", "lr", "channels"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    if getattr(args, "feedback", None) is not None:
        overrides["feedback_enabled"] = args.feedback
    if getattr(args, "transport", None):
        overrides["transport"] = args.transport
    return cfg.with_overrides(**overrides)


def cmd_simulate(args) -> int:
    from .simulator import Simulator, serve

    cfg = ExperimentConfig(
        seed=args.seed,
        image_size=(args.width, args.height),
        distractors=tuple(args.distractors),
        bins=args.bins,
        injector_distractors=args.injector_distractors,
        sim_count=args.sim_id + 1,
        target_sim_ids=(),
    )
    sim = Simulator(args.sim_id, args.seed, cfg.render_config, bins=args.bins)
    n = serve(sim, args.endpoint, args.control, args.count)
    log.info("simulator %d published %d samples", args.sim_id, n)
    return 0


def cmd_train(args) -> int:
    from .training import run_training

    cfg = _config(args)
    report = run_training(cfg)
    if args.checkpoint:
        save_checkpoint(report.params, args.checkpoint)
    if args.report:
        with open(args.report, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("epoch", "error_pct", "miss_rate", "train_loss", "val_loss"))
            for e, row in enumerate(zip(report.errors, report.miss_rates, report.losses, report.validation_losses)):
                w.writerow((e, *(f"{v:.6f}" for v in row)))
    summary = {
        "final_error_pct": report.errors[-1] if report.errors else None,
        "final_miss_rate": report.miss_rates[-1] if report.miss_rates else None,
        "epochs_to_threshold": report.epochs_to_threshold,
        "sim_step_ms": [report.sim_step.mean_ms, report.sim_step.std_ms],
        "train_step_ms": [report.train_step.mean_ms, report.train_step.std_ms],
        "final_theta": report.final_theta,
    }
    print(json.dumps(summary, indent=2))
    return 0


def cmd_experiment(args) -> int:
    from .experiment import run_feedback_experiment

    cfg = _config(args)
    result = run_feedback_experiment(cfg, args.pairs)
    result.write_csv(args.out, args.summary)
    print(f"feedback-on faster in {result.faster_count()}/{len(result.pairs)} pairs; "
          f"on <= off at {100 * result.fraction_on_not_worse():.0f}% of epochs")
    return 0


def cmd_eval(args) -> int:
    from ..metrics import aggregate, csv_rows, write_csv
    from .simulator import Simulator
    from .training import validate

    params = load_checkpoint(args.checkpoint)
    cfg = _config(args)
    sim = Simulator(0, cfg.seed, cfg.render_config, bins=cfg.bins)
    samples = [sim.validation_sample(0, i, args.samples) for i in range(args.samples)]
    _, evals = validate(params, samples, cfg)
    mean, miss = aggregate(evals, cfg.miss_penalty)
    if args.csv:
        write_csv(args.csv, [r for m, ev in zip(samples, evals) for r in csv_rows(m.sample_id, ev)])
    print(f"mean error {mean:.3f}% of diagonal, miss rate {miss:.3f} over {args.samples} samples")
    return 0


def cmd_render_preview(args) -> int:
    from .runtime import render_preview

    params = load_checkpoint(args.checkpoint) if args.checkpoint else None
    paths = render_preview(args.seed, args.count, args.out, params=params)
    for p in paths:
        print(p)
    return 0


def cmd_runtimes(args) -> int:
    from .runtime import measure_runtimes

    table = measure_runtimes(_config(args), steps=args.steps, warmup=args.warmup)
    if args.out:
        table.write_csv(args.out)
    for name, mean, std, n in table.rows():
        print(f"{name:16s} {mean:10.2f} ms  +/- {std:8.2f} ms  (n={n})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="robokeys", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON experiment config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--sim-count", type=int)
        sp.add_argument("--samples-per-epoch", type=int)
        sp.add_argument("--validation-size", type=int)
        sp.add_argument("--lr", type=float)
        sp.add_argument("--channels", type=int)

    s = sub.add_parser("simulate", help="run one simulator process")
    s.add_argument("--endpoint", required=True, help="tcp://host:port of the trainer")
    s.add_argument("--sim-id", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--control", help="endpoint to bind for PRIOR_UPDATE messages")
    s.add_argument("--count", type=int, help="stop after this many samples")
    s.add_argument("--width", type=int, default=64)
    s.add_argument("--height", type=int, default=64)
    s.add_argument("--distractors", type=int, nargs=2, default=(0, 3))
    s.add_argument("--bins", type=int, default=8)
    s.add_argument("--injector-distractors", type=int, default=0)
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("train", help="train a model")
    common(t)
    t.add_argument("--feedback", action=argparse.BooleanOptionalAction, default=None)
    t.add_argument("--transport", choices=("inproc", "tcp"))
    t.add_argument("--checkpoint", help="write the trained weights here")
    t.add_argument("--report", help="write per-epoch curves (CSV) here")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("experiment", help="paired feedback-off/on runs")
    common(e)
    e.add_argument("--pairs", type=int, default=10)
    e.add_argument("--out", default="feedback_curves.csv")
    e.add_argument("--summary", default="feedback_summary.csv")
    e.set_defaults(func=cmd_experiment)

    v = sub.add_parser("eval", help="evaluate a checkpoint on fresh samples")
    common(v)
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--samples", type=int, default=200)
    v.add_argument("--csv", help="per-joint error rows")
    v.set_defaults(func=cmd_eval)

    r = sub.add_parser("render-preview", help="write PPM previews with belief overlays")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--count", type=int, default=8)
    r.add_argument("--out", required=True)
    r.add_argument("--checkpoint", help="overlay predictions of this model instead of ground truth")
    r.set_defaults(func=cmd_render_preview)

    m = sub.add_parser("runtimes", help="time simulation and train steps")
    common(m)
    m.add_argument("--steps", type=int, default=200)
    m.add_argument("--warmup", type=int, default=20)
    m.add_argument("--out", help="timing table CSV")
    m.set_defaults(func=cmd_runtimes)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
