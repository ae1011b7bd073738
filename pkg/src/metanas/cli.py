"""Command-line entry point: ``metanas {pretrain,search,resume,report,enumerate}``.

Exit codes: 0 ok, 2 configuration or missing input, 3 pretraining task
failure, 4 checkpoint problem, 5 enumeration bound exceeded.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .engine import (
    CheckpointError,
    SearchConfig,
    SearchState,
    config_from_canonical,
    hypervolume_trajectory,
    normalized_hypervolume,
    read_checkpoint,
    run_search,
)
from .enumeration import (
    RESTRICTED_MACRO,
    RESTRICTED_SPACE,
    SpaceTooLargeError,
    fixture_json,
    ground_truth_front,
)
from .evaluator import EvaluationError, MalformedFileError
from .metalr import NonFiniteLossError, TaskFailure, pretrain_controller, write_params_json, \
    write_schedule_csv
from .moea import read_front_csv

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_TASK = 3
EXIT_CHECKPOINT = 4
EXIT_BOUND = 5

TOGGLES = {
    "no-metalr": "search.metalr=false",
    "no-surrogate": "search.surrogate=false",
    "no-period-mutation": "search.period_mutation=false",
}

class CliError(Exception):
    def __init__(self, message: str, code: int) -> None:
        super().__init__(message)
        self.code = code


# --------------------------------------------------------------------------
# Config assembly
# --------------------------------------------------------------------------


def _sections(args) -> cfgmod.Sections:
    sections = cfgmod.load(args.config) if getattr(args, "config", None) else {}
    overrides = list(getattr(args, "override", None) or [])
    # explicit flags win over both the file and --override
    if getattr(args, "seed", None) is not None:
        overrides.append(f"search.seed={args.seed}")
    if getattr(args, "evaluator", None):
        overrides.append(f"search.evaluator={args.evaluator}")
    for toggle in getattr(args, "toggle", None) or []:
        overrides.append(TOGGLES[toggle])
    if getattr(args, "literal_eq8", False):
        overrides.append("mutation.literal_eq8=true")
    return cfgmod.apply_overrides(sections, overrides)


def _search_config(args) -> SearchConfig:
    return cfgmod.build_search_config(_sections(args))


def _has_config_input(args) -> bool:
    return bool(args.config or args.override or args.seed is not None or args.evaluator
                or args.toggle or args.literal_eq8)


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------


def cmd_pretrain(args) -> int:
    sections = _sections(args)
    task = cfgmod.build_task(sections)
    es = cfgmod.build_es(sections)
    seed = args.seed if args.seed is not None else cfgmod.section(sections, "es")["seed"]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        result = pretrain_controller(task, es, np.random.default_rng(seed), log=print)
    except (TaskFailure, NonFiniteLossError, FloatingPointError) as exc:
        raise CliError(f"pretraining failed: {exc}", EXIT_TASK) from exc
    write_schedule_csv(out / "schedule.csv", result.schedule)
    write_params_json(out / "controller.json", result.params)
    print(f"initial meta-score: {result.initial_score:.6g}")
    print(f"final meta-score: {result.score:.6g}")
    print(f"wrote {out / 'schedule.csv'} and {out / 'controller.json'}")
    return EXIT_OK


def _table_header() -> None:
    print(f"{'gen':>4} {'tau':>8} {'H_t':>9} {'best_f1':>9} {'front':>6} {'full':>5}")


def _print_generation(state: SearchState) -> None:
    row = state.history[-1]
    tau = "-" if row["tau"] is None else f"{row['tau']:.4f}"
    best = min((r.objectives.f1 for r in state.ranked), default=float("nan"))
    print(f"{row['gen']:>4} {tau:>8} {row['H_t']:>9.5f} {best:>9.5f} "
          f"{len(state.front0()):>6} {row['n_full_evals']:>5}", flush=True)


def _run(cfg: SearchConfig, args, resume: bool) -> int:
    _table_header()
    state = run_search(cfg, args.out, workers=args.workers, resume=resume,
                       stop_after=args.stop_after, on_generation=_print_generation)
    if state.generation < cfg.generations:
        print(f"stopped after generation {state.generation}; resume with "
              f"`metanas resume --out {args.out}`")
    return EXIT_OK


def cmd_search(args) -> int:
    return _run(_search_config(args), args, resume=False)


def cmd_resume(args) -> int:
    ckpt = Path(args.out) / "checkpoint.json"
    if not ckpt.exists():
        raise CliError(f"no checkpoint at {ckpt}", EXIT_CHECKPOINT)
    if _has_config_input(args):
        cfg = _search_config(args)
    else:
        payload = read_checkpoint(ckpt)
        try:
            cfg = config_from_canonical(payload["config"])
        except (TypeError, ValueError) as exc:
            raise CliError(f"{ckpt}: stored config is unreadable: {exc}", EXIT_CHECKPOINT) from exc
    return _run(cfg, args, resume=True)


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    front_path, ckpt_path = run_dir / "front.csv", run_dir / "checkpoint.json"
    for path in (front_path, ckpt_path):
        if not path.exists():
            raise CliError(f"missing artifact {path}", EXIT_CONFIG)
    ranked = read_front_csv(front_path)
    history = read_checkpoint(ckpt_path)["history"]
    front = sorted((r for r in ranked if r.front == 0), key=lambda r: (r.objectives.f1, r.id))
    max_params = max(max((p[1] for row in history for p in row["front"]), default=1.0), 1.0)

    print(f"Pareto front ({len(front)} points, sorted by f1)")
    print(f"{'id':>6} {'f1_error':>12} {'f2_params':>12} {'crowding':>10}")
    for r in front:
        print(f"{r.id:>6} {r.objectives.f1:>12.6f} {int(r.objectives.f2):>12d} {r.crowding:>10.4g}")
    print()
    print(f"hypervolume trajectory (reference f1=1, f2={max_params:g})")
    print(f"{'gen':>4} {'hypervolume':>12}")
    for row, hv in zip(history, hypervolume_trajectory(history)):
        print(f"{row['gen']:>4} {hv:>12.6f}")
    final = normalized_hypervolume([(r.objectives.f1, r.objectives.f2) for r in front], max_params)
    print(f"front.csv hypervolume: {final:.6f}")
    if args.plot_data:
        lines = ["# f1_error f2_params id"]
        lines += [f"{r.objectives.f1!r} {int(r.objectives.f2)} {r.id}" for r in front]
        Path(args.plot_data).write_text("\n".join(lines) + "\n")
        print(f"wrote {args.plot_data}")
    return EXIT_OK


def cmd_enumerate(args) -> int:
    if args.config or args.override:
        sections = cfgmod.apply_overrides(cfgmod.load(args.config) if args.config else {},
                                          args.override or [])
        space, macro = cfgmod.build_space(sections), cfgmod.build_macro(sections)
        enum = cfgmod.section(sections, "enumerate")
    else:
        space, macro = RESTRICTED_SPACE, RESTRICTED_MACRO
        enum = cfgmod.section({}, "enumerate")
    try:
        truth = ground_truth_front(space, macro, enum["epochs"], enum["bound"])
    except SpaceTooLargeError as exc:
        raise CliError(str(exc), EXIT_BOUND) from exc
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(fixture_json(truth, space, macro))
    print(f"space size: {truth.size}")
    print(f"front size: {len(truth.front)}")
    for p in truth.front:
        print(f"  f1={p.f1:.6f} f2={p.f2} genotypes={p.count}")
    print(f"wrote {out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="INI configuration file")
    p.add_argument("--override", action="append", metavar="KEY=VALUE",
                   help="override a config value as section.key=value (repeatable)")


def _add_search_flags(p: argparse.ArgumentParser) -> None:
    _add_config_flags(p)
    p.add_argument("--seed", type=int, metavar="U64", help="master seed (overrides search.seed)")
    p.add_argument("--out", required=True, metavar="DIR", help="run directory for artifacts")
    p.add_argument("--workers", type=int, default=1, metavar="N",
                   help="evaluation processes (default 1)")
    p.add_argument("--evaluator", choices=("oracle", "tiny"), help="evaluation backend")
    p.add_argument("--toggle", action="append", choices=sorted(TOGGLES),
                   help="ablation switch (repeatable)")
    p.add_argument("--literal-eq8", action="store_true",
                   help="invert the period-mutation windows: base rates inside, elevated outside")
    p.add_argument("--stop-after", type=int, metavar="GEN",
                   help="stop once this generation is written (resume later)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="metanas",
                                     description="Surrogate-assisted evolutionary architecture search.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="pretrain the learning-rate controller")
    _add_config_flags(p)
    p.add_argument("--seed", type=int, metavar="U64", help="ES seed (overrides es.seed)")
    p.add_argument("--out", required=True, metavar="DIR",
                   help="directory for schedule.csv and controller.json")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("search", help="run a search from scratch")
    _add_search_flags(p)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("resume", help="continue a search from DIR/checkpoint.json")
    _add_search_flags(p)
    p.set_defaults(func=cmd_resume)

    p = sub.add_parser("report", help="summarize a run directory")
    p.add_argument("run_dir", metavar="DIR", help="run directory")
    p.add_argument("--plot-data", metavar="PATH", help="write gnuplot data for the front")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("enumerate", help="exhaustively score a small space and write its front")
    _add_config_flags(p)
    p.add_argument("--out", required=True, metavar="PATH", help="fixture JSON to write")
    p.set_defaults(func=cmd_enumerate)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (cfgmod.ConfigError, MalformedFileError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except EvaluationError as exc:
        print(f"evaluation error: {exc}", file=sys.stderr)
        return EXIT_TASK
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
