"""Command-line entry point: ``kivla <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import env
from .train import (TrainConfig, TrainingError, InsulationError, PRESETS, evaluate_params, load_checkpoint,
                    preset_config, tiny_grad_check, train)


def parse_value(text: str):
    """JSON literal when it parses (numbers, booleans, lists), else the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(d: dict, pairs) -> dict:
    """Apply ``key=value`` pairs; dotted keys reach into nested dicts (``model.width=32``)."""
    d = json.loads(json.dumps(d))
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep or not key:
            raise ValueError(f"override {pair!r} is not key=value")
        *path, last = key.split(".")
        node = d
        for p in path:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ValueError(f"override {key!r}: {p!r} is not a nested table")
        node[last] = parse_value(value)
    return d


def load_config(path: str | None, preset: str | None, overrides) -> TrainConfig:
    if path:
        d = json.loads(Path(path).read_text())
    elif preset:
        d = preset_config(preset).to_dict()
    else:
        d = TrainConfig().to_dict()
    return TrainConfig.from_dict(apply_overrides(d, overrides))


def _print(row) -> None:
    print(json.dumps(row, sort_keys=True), flush=True)


def cmd_gen_data(args) -> int:
    recs = env.generate_dataset(args.count, seed=args.seed, ambiguous_fraction=args.ambiguous_fraction,
                                caption_fraction=args.caption_fraction, subtask_fraction=args.subtask_fraction,
                                split=args.split)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    env.write_jsonl(recs, args.out)
    n_cap = sum(r["kind"] == "caption" for r in recs)
    print(f"wrote {len(recs)} records ({n_cap} caption) to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.preset, args.overrides)
    train(cfg, args.out, log=None if args.quiet else _print)
    print(f"wrote {args.out}/metrics.csv and {args.out}/model.ckpt")
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    cfg = ckpt.config
    if args.variant and args.variant != cfg.variant:
        raise ValueError(f"checkpoint was trained as variant {cfg.variant!r}, not {args.variant!r}")
    summary = evaluate_params(cfg, ckpt.params, ckpt.codec, args.episodes, args.ood_episodes,
                              mode=args.mode, seed=args.seed)
    _print({"eval_score": summary.score, "follow_rate": summary.follow_rate,
            "ood_follow_rate": summary.ood_follow_rate, "forward_passes": summary.forward_passes,
            "failures": summary.failures, "preset": cfg.preset, "seed": cfg.seed})
    return 0


def cmd_bench_latency(args) -> int:
    from .experiment import latency_for_checkpoint
    for rep in latency_for_checkpoint(args.checkpoint, args.observations, args.modes or None):
        _print(rep.as_row())
    return 0


def cmd_grad_check(args) -> int:
    report, names = tiny_grad_check(args.variant, args.seed, args.tolerance)
    worst = int(np.argmax(report.max_rel_error))
    print(f"max relative error {report.max_rel_error[worst]:.3e} ({names[worst]}), "
          f"tolerance {report.tolerance:g}: {'passed' if report.passed else 'FAILED'}")
    return 0 if report.passed else 1


def cmd_step_time(args) -> int:
    from .train import TrainingData, step_time
    records = env.read_jsonl(args.data)
    row = {}
    for preset in args.presets:
        cfg = preset_config(preset)
        row[preset] = step_time(cfg, TrainingData(records, cfg.codec), n_steps=args.steps)
    if "ours" in row and "pi0-fast" in row:
        row["ratio_ours_pi0_fast"] = row["ours"] / row["pi0-fast"]
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(row, sort_keys=True, indent=1) + "\n")
    _print(row)
    return 0


def cmd_experiment(args) -> int:
    from .experiment import run_matrix, write_report
    if args.report_only:
        write_report(args.out)
        print(f"regenerated report in {args.out}")
        return 0
    overrides = apply_overrides({}, args.overrides)
    run_matrix(args.presets, args.seeds, args.out, args.data, overrides, latency_obs=args.latency_observations,
               resume=not args.fresh, log=lambda m: print(m, flush=True))
    print(f"wrote {args.out}/summary.csv")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kivla", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the gridworld demonstration dataset")
    g.add_argument("--out", default="data/train.jsonl")
    g.add_argument("--count", type=int, default=2000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--ambiguous-fraction", type=float, default=0.5)
    g.add_argument("--caption-fraction", type=float, default=0.2)
    g.add_argument("--subtask-fraction", type=float, default=0.5)
    g.add_argument("--split", default="train")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one configuration")
    t.add_argument("--config", help="JSON file with TrainConfig fields")
    t.add_argument("--preset", choices=sorted(PRESETS), help="start from a preset instead of a file")
    t.add_argument("--out", required=True)
    t.add_argument("--quiet", action="store_true")
    t.add_argument("overrides", nargs="*", metavar="key=value")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="closed-loop evaluation of a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--episodes", type=int, default=100)
    e.add_argument("--ood-episodes", type=int, default=100)
    e.add_argument("--mode", choices=("flow", "ar", "parallel"))
    e.add_argument("--variant", help="refuse the checkpoint unless it was trained as this variant")
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench-latency", help="per-chunk decode cost of a checkpoint")
    b.add_argument("checkpoint")
    b.add_argument("--observations", type=int, default=20)
    b.add_argument("--modes", nargs="*", choices=("flow", "ar", "parallel"))
    b.set_defaults(func=cmd_bench_latency)

    c = sub.add_parser("grad-check", help="finite-difference check of the full toy model")
    c.add_argument("--variant", default="ours")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--tolerance", type=float, default=1e-4)
    c.set_defaults(func=cmd_grad_check)

    s = sub.add_parser("step-time", help="median seconds per optimisation step, per preset")
    s.add_argument("--data", default="data/train.jsonl")
    s.add_argument("--presets", nargs="+", default=["ours", "pi0-fast", "pi0"], choices=sorted(PRESETS))
    s.add_argument("--steps", type=int, default=20)
    s.add_argument("--out", help="also write the timings to this JSON file")
    s.set_defaults(func=cmd_step_time)

    x = sub.add_parser("experiment", help="train a preset x seed matrix and write the report")
    x.add_argument("--presets", nargs="+", default=["ours", "pi0"], choices=sorted(PRESETS))
    x.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2])
    x.add_argument("--out", required=True)
    x.add_argument("--data", default="data/train.jsonl")
    x.add_argument("--latency-observations", type=int, default=20)
    x.add_argument("--fresh", action="store_true", help="retrain runs that already have a checkpoint")
    x.add_argument("--report-only", action="store_true", help="only regenerate summary and plots")
    x.add_argument("overrides", nargs="*", metavar="key=value")
    x.set_defaults(func=cmd_experiment)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, KeyError, TrainingError, InsulationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
