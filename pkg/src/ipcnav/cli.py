"""Command-line entry point: train, eval, ablate, demo-record, metrics, gradcheck."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _str_list(text: str) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ipcnav", description="Instance-aware predictive control for a 2D driving world.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="run the closed training loop")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    t.add_argument("--resume", help="checkpoint (.ipck) to continue from")
    t.add_argument("--steps", type=int, help="override total_steps")

    e = sub.add_parser("eval", help="drive fresh episodes with a trained checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--episodes", type=int, required=True)
    e.add_argument("--agents", type=int, default=8)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--map", default="loop")
    e.add_argument("--eps", type=float, default=0.0)
    e.add_argument("--variant", default="ipc")
    e.add_argument("--out", default="eval")

    a = sub.add_parser("ablate", help="train variants x seeds and report reward curves")
    a.add_argument("--variants", type=_str_list, required=True)
    a.add_argument("--seeds", type=_int_list, required=True)
    a.add_argument("--config", required=True)
    a.add_argument("--out")
    a.add_argument("--steps", type=int, help="override total_steps")
    a.add_argument("--window", type=int, default=1000)

    d = sub.add_parser("demo-record", help="record expert demonstrations as JSONL")
    d.add_argument("--episodes", type=int, required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--map", default="loop")
    d.add_argument("--agents", type=int, default=8)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--target-speed", type=float)

    m = sub.add_parser("metrics", help="recompute driving statistics from a JSONL log")
    m.add_argument("--log", required=True)
    m.add_argument("--out", help="CSV destination (default: print)")
    m.add_argument("--window", type=int, default=1000)

    g = sub.add_parser("gradcheck", help="finite-difference check of the predictor gradients")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--params", type=int, default=240)
    return p


def _train(args) -> int:
    from ipcnav.runtime import RunConfig, train_run

    cfg = RunConfig.from_json(args.config)
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.out:
        over["output_dir"] = args.out
    if args.steps is not None:
        over["total_steps"] = args.steps
    cfg = dataclasses.replace(cfg, **over)
    if args.resume and not os.path.exists(args.resume):
        raise FileNotFoundError(args.resume)
    state = train_run(cfg, resume=args.resume)
    print(json.dumps({"steps": state.step, "grad_steps": state.grad_steps, "episodes": state.episode}))
    return EXIT_OK


def _eval(args) -> int:
    from ipcnav.runtime import ConfigError, eval_run

    if not os.path.exists(args.checkpoint):
        raise ConfigError(f"checkpoint not found: {args.checkpoint}")
    res = eval_run(args.checkpoint, args.episodes, args.agents, args.seed, args.map, args.out, args.eps, args.variant)
    print(json.dumps(res.get("driving", {"steps": res["steps"]})))
    return EXIT_OK


def _ablate(args) -> int:
    from ipcnav.evaluation import VARIANTS, ordering_report, run_benchmark
    from ipcnav.runtime import ConfigError, RunConfig

    cfg = RunConfig.from_json(args.config)
    bad = [v for v in args.variants if v not in VARIANTS]
    if bad or not args.variants or not args.seeds:
        raise ConfigError(f"variants must be a non-empty subset of {VARIANTS}; seeds non-empty")
    if args.steps is not None:
        cfg = dataclasses.replace(cfg, total_steps=args.steps)
    out = args.out or os.path.join(cfg.output_dir, "ablate")
    workers = max(1, int(os.environ.get("IPC_THREADS", "1")))
    res = run_benchmark(cfg, args.variants, args.seeds, out, args.window, workers)
    report = ordering_report(res["final"])
    with open(os.path.join(out, "metrics", "report.txt"), "w", encoding="utf-8") as f:
        f.write(report)
    print(report, end="")
    return EXIT_OK


def _demo_record(args) -> int:
    from ipcnav.experience import ingest_expert, write_episode_log
    from ipcnav.runtime import ConfigError

    if args.episodes < 1:
        raise ConfigError("--episodes must be >= 1")
    eps = ingest_expert(args.map, args.agents, args.episodes, args.seed, args.target_speed)
    write_episode_log(args.out, eps, map=args.map, n_agents=args.agents)
    print(json.dumps({"episodes": len(eps), "rewards": [round(e.total_reward, 3) for e in eps]}))
    return EXIT_OK


def _metrics(args) -> int:
    from ipcnav.evaluation import driving_stats, reward_curve, write_csv
    from ipcnav.experience import read_episode_log

    lines = read_episode_log(args.log)
    ds = driving_stats(lines)
    rows = [(k, float(v)) for k, v in dataclasses.asdict(ds).items()]
    rows += [(f"mean_reward@{s}", r) for s, r in reward_curve([ln["reward"] for ln in lines], args.window)]
    if args.out:
        write_csv(args.out, ["metric", "value"], rows)
    for k, v in rows:
        print(f"{k},{v:.6f}")
    return EXIT_OK


def _gradcheck(args) -> int:
    from ipcnav.predictor.gradcheck import gradient_check

    res = gradient_check(seed=args.seed, n_params=args.params)
    print(f"max relative error {res.max_rel_error:.3e} over {res.n_checked} parameters (worst: {res.worst})")
    return EXIT_OK if res.max_rel_error < 1e-4 else EXIT_RUNTIME


COMMANDS = {
    "train": _train,
    "eval": _eval,
    "ablate": _ablate,
    "demo-record": _demo_record,
    "metrics": _metrics,
    "gradcheck": _gradcheck,
}


def main(argv=None) -> int:
    from ipcnav.runtime import ConfigError
    from ipcnav.world import MapError

    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, MapError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - any failure after startup is a runtime failure
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
