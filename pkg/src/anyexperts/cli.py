"""Command-line entry point: train, sweep, trace, check-grad and ablate."""

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from .baselines import BaselineConfig
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, config, load_run_config
from .errors import AnyExpertsError, ConfigError
from .exports import (
    ABLATION_COLUMNS,
    LOSS_CURVE_COLUMNS,
    SWEEP_COLUMNS,
    decision_records,
    spans_path,
    write_csv,
    write_json,
    write_jsonl,
)
from .harness import (
    EvalResult,
    TrainState,
    ablation,
    baseline_training,
    budget_sweep,
    data_from_config,
    evaluate,
    export_importance_trace,
    model_from_config,
    run_gradient_suites,
    standard_variants,
    train,
)
from .numerics import bind, no_grad
from .routing import RouterConfig
from .synthetic import generate

logger = logging.getLogger("anyexperts")

DEFAULT_SCALES = "0.6,0.7,0.8,0.9,1.0"


def parse_floats(text: str, key: str) -> list[float]:
    try:
        return [float(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ConfigError(f"expected a comma-separated list of numbers, got {text!r}", key=key) from None


def parse_ints(text: str, key: str) -> tuple[int, ...]:
    try:
        return tuple(int(part) for part in text.split(",") if part.strip())
    except ValueError:
        raise ConfigError(f"expected a comma-separated list of integers, got {text!r}", key=key) from None


def _out_dir(args: argparse.Namespace) -> Path:
    return Path(args.out) if args.out else config.out_dir


def _dynamic_router(cfg: RunConfig, command: str) -> RouterConfig:
    router = cfg.training_router()
    if isinstance(router, BaselineConfig):
        raise ConfigError(f"{command} needs a checkpoint trained with the anyexperts router", key="router")
    return router


def cmd_train(args: argparse.Namespace) -> int:
    cfg = load_run_config(args.config, seed=args.seed)
    out = _out_dir(args)
    router = cfg.training_router()
    train_data = data_from_config(cfg, "train")
    eval_data = data_from_config(cfg, "eval")
    logger.info("training %d steps (seed %d, router %s) into %s", cfg.steps, cfg.seed, cfg.router.value, out)

    written: set[int] = set()

    def on_eval(step: int, result: EvalResult) -> None:
        write_json(out / "load_stats" / f"step_{step:06d}.json", result.load_stats)
        written.add(step)

    state = TrainState.initial(model_from_config(cfg), cfg.seed)
    state, curve = train(
        state,
        train_data,
        router,
        cfg.steps,
        cfg.lr,
        lambda_tir=cfg.lambda_tir,
        lambda_bal=cfg.lambda_bal,
        eval_data=eval_data,
        eval_every=cfg.eval_every,
        on_eval=on_eval,
    )

    final = evaluate(state, eval_data, router)
    if state.step not in written:
        on_eval(state.step, final)
    with no_grad():
        decisions = state.model.forward(bind(state.params), eval_data, router).layer.decisions

    save_checkpoint(out / "checkpoint.bin", cfg, state)
    write_csv(out / "loss_curve.csv", curve, LOSS_CURVE_COLUMNS)
    write_json(out / "eval.json", final.model_dump(mode="json"))
    write_jsonl(out / "decisions.jsonl", decision_records(decisions, eval_data.modalities))
    print(
        f"trained {cfg.steps} steps: loss {curve[0].total:.4f} -> {curve[-1].total:.4f}, "
        f"eval accuracy {final.accuracy:.3f}, avg k_real {final.avg_k_real:.3f}"
    )
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    cfg = checkpoint.config
    router = _dynamic_router(cfg, "sweep")
    scales = parse_floats(args.scales, "scales")
    baselines = None
    if args.baselines is not None:
        training = baseline_training(cfg)
        if args.baselines != "config":
            training = replace(training, ks=parse_ints(args.baselines, "baselines"))
        baselines = training

    report = budget_sweep(checkpoint.state, data_from_config(cfg, "eval"), scales, router, baselines=baselines)
    path = write_csv(_out_dir(args) / "sweep.csv", report.rows, SWEEP_COLUMNS)
    print(f"wrote {len(report.rows)} sweep rows to {path}")
    return 0


def cmd_trace(args: argparse.Namespace) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    cfg = checkpoint.config
    router = _dynamic_router(cfg, "trace")
    seed = cfg.seed if args.seed is None else args.seed
    streams = generate(seed, cfg.eval_sequences, cfg.seq_len, cfg.redundancy, cfg.vocab, stream="eval")
    trace = export_importance_trace(checkpoint.state, streams, router)

    path = Path(args.out) if args.out else config.out_dir / "trace.jsonl"
    if path.suffix != ".jsonl":
        path = path / "trace.jsonl"
    write_jsonl(path, trace.records)
    write_jsonl(spans_path(path), trace.spans)
    print(f"wrote {len(trace.records)} token records and {len(trace.spans)} span aggregates")
    return 0


def cmd_check_grad(args: argparse.Namespace) -> int:
    failed = 0
    for name, report in run_gradient_suites(seed=args.seed, max_coordinates=args.max_coordinates):
        status = "ok" if report.passed else "FAILED"
        print(
            f"{name}: {status} max_rel_err={report.max_relative_error:.3e} "
            f"coords={report.coordinates_checked} worst={report.worst_parameter}[{report.worst_index}]"
        )
        failed += not report.passed
    return 1 if failed else 0


def cmd_ablate(args: argparse.Namespace) -> int:
    cfg = load_run_config(args.config, seed=args.seed)
    rows = ablation(
        standard_variants(_dynamic_router(cfg, "ablate")),
        data_from_config(cfg, "train"),
        data_from_config(cfg, "eval"),
        seed=cfg.seed,
        vocab=cfg.vocab,
        d=cfg.d,
        d_ff=cfg.ffn_width,
        steps=cfg.steps,
        lr=cfg.lr,
        lambda_tir=cfg.lambda_tir,
        lambda_bal=cfg.lambda_bal,
    )
    path = write_csv(_out_dir(args) / "ablation.csv", rows, ABLATION_COLUMNS)
    print(f"wrote {len(rows)} ablation rows to {path}")
    return 0


COMMANDS = {
    "train": cmd_train,
    "sweep": cmd_sweep,
    "trace": cmd_trace,
    "check-grad": cmd_check_grad,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="anyexperts", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train the desk model and write checkpoint, loss curve and load stats")
    p.add_argument("--config", required=True, help="flat key = value run config")
    p.add_argument("--out", help="output directory (default: ANYEXPERTS_OUT_DIR)")
    p.add_argument("--seed", type=int, help="overrides the config seed")

    p = sub.add_parser("sweep", help="evaluate a checkpoint across budget scales")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scales", default=DEFAULT_SCALES, help="comma-separated budget scales")
    p.add_argument(
        "--baselines",
        nargs="?",
        const="config",
        help="also train static Top-K baselines (comma-separated k; default: the config's baseline_ks)",
    )
    p.add_argument("--out", help="output directory")

    p = sub.add_parser("trace", help="export per-token importance and per-span aggregates")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--seed", type=int, help="data seed (default: the checkpoint's seed)")
    p.add_argument("--out", help="trace .jsonl path or directory")

    p = sub.add_parser("check-grad", help="compare tape gradients with central differences")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-coordinates", type=int, help="sample at most this many coordinates per suite")

    p = sub.add_parser("ablate", help="train one model per ablation variant")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    return parser


def configure_logging() -> None:
    config.validate()
    logging.basicConfig(
        stream=sys.stderr,
        level=config.logging_level,
        format="[%(name)s] %(message)s",
        force=True,
    )


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run one command; returns 0 on success, 1 on runtime failure, 2 on usage or config errors."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    try:
        configure_logging()
        return COMMANDS[args.command](args)

    except ConfigError as e:
        print(f"Config error: {e.message}", file=sys.stderr)
        return 2

    except AnyExpertsError as e:
        print(f"Error: {e.message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
