"""
Command line for training, optimization runs, benchmarks, posterior dumps and reports

Exit codes: 0 success, 2 configuration error, 3 runtime error, 4 partial bench failure.
"""
import os
import sys
import glob
import logging
import argparse
from typing import Dict, List, Optional, Sequence

from core.schemas.schemas import RunManifest, TrainRunConfig
from core.services.benchmarks import SYNTHETIC_SUITE, get_problem
from core.services.pfn_model import load_checkpoint
from core.services.services import (
    ALGORITHMS,
    POSTERIOR_HEADER,
    REPORT_HEADER,
    TOOL_VERSION,
    OptimizationService,
    report_rows,
    run_bench,
    run_file_name,
)
from core.services.trainer import dry_run, train
from helpers.config import configure_logging, load_json_config, load_settings
from helpers.errors import ConfigError, FomemoError
from helpers.persistence import config_hash, file_hash, read_manifest, utc_now, write_csv, write_manifest

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_PARTIAL = 4


def parse_preferences(text: str) -> List[List[float]]:
    """'0.2,0.8;0.5,0.5' -> [[0.2, 0.8], [0.5, 0.5]]"""
    try:
        return [[float(v) for v in group.split(",")] for group in text.split(";") if group.strip()]
    except ValueError as e:
        raise ConfigError(f"cannot parse preferences {text!r}: {e}") from e


def check_run_args(args: argparse.Namespace) -> None:
    """Reject run sizes the optimization loops cannot honor"""
    if args.budget < 0:
        raise ConfigError(f"--budget must be nonnegative, got {args.budget}")
    if args.q < 1:
        raise ConfigError(f"--q must be at least 1, got {args.q}")
    if getattr(args, "seeds", 1) < 1:
        raise ConfigError(f"--seeds must be at least 1, got {args.seeds}")


def record_manifest(
    out_dir: str,
    argv: Sequence[str],
    settings: Dict,
    master_seed: int,
    artifacts: Sequence[str],
    checkpoint_id: Optional[str] = None,
    derived_seeds: Optional[Dict[str, int]] = None,
    started_at: Optional[str] = None,
) -> None:
    """Write the directory's manifest, keeping artifacts of earlier commands that still exist"""
    previous = read_manifest(out_dir) or {}
    names = set(previous.get("artifacts", [])) | set(artifacts)
    seeds = dict(previous.get("derived_seeds", {}))
    seeds.update(derived_seeds or {})
    manifest = RunManifest(
        tool_version=TOOL_VERSION,
        command_line=list(argv),
        config_hash=config_hash(settings),
        master_seed=master_seed,
        derived_seeds=seeds,
        started_at=started_at or utc_now(),
        finished_at=utc_now(),
        checkpoint_id=checkpoint_id,
        artifacts=sorted(n for n in names if os.path.exists(os.path.join(out_dir, n))),
    )
    write_manifest(out_dir, manifest)


def _output_dir(path: str) -> str:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    return directory


def _load_service(ckpt: Optional[str], device: str):
    if not ckpt:
        return OptimizationService(), None
    return OptimizationService(load_checkpoint(ckpt, device=device).model), file_hash(ckpt)


def cmd_train(args: argparse.Namespace, argv: Sequence[str]) -> int:
    settings = load_settings()
    config = load_json_config(args.config, TrainRunConfig)
    if args.dry_run:
        loss = dry_run(config, device=settings.device)
        logger.info(f"Config {args.config} is valid; one step gave loss {loss:.4f}")
        return EXIT_OK
    started = utc_now()
    result = train(config, args.out, resume_from=args.resume, device=settings.device, progress=not args.no_progress)
    record_manifest(
        args.out,
        argv,
        config.model_dump(by_alias=True),
        config.train.seed,
        [os.path.basename(result.checkpoint_path), os.path.basename(result.metrics_path)],
        checkpoint_id=file_hash(result.checkpoint_path),
        started_at=started,
    )
    logger.info(f"Training finished after {result.steps} steps, checkpoint {result.checkpoint_path}")
    return EXIT_OK


def cmd_optimize(args: argparse.Namespace, argv: Sequence[str]) -> int:
    check_run_args(args)
    settings = load_settings()
    service, checkpoint_id = _load_service(args.ckpt, settings.device)
    algo = f"fomemo-{args.acq}"
    os.makedirs(args.out, exist_ok=True)
    run_name = run_file_name(args.problem if not args.problem.startswith("external:") else "external", algo, args.seed)
    run_path = os.path.join(args.out, run_name)
    if os.path.exists(run_path):
        os.remove(run_path)
    started = utc_now()
    with get_problem(args.problem, d=args.dim, m=args.n_obj, timeout=settings.external_timeout) as problem:
        try:
            count = service.write_run(run_path, service.run_records(problem, algo, args.budget, args.seed, q=args.q, beta=args.beta))
        finally:
            record_manifest(
                args.out,
                argv,
                {"problem": args.problem, "algo": algo, "budget": args.budget, "q": args.q, "beta": args.beta, "dim": problem.d},
                args.seed,
                [run_name],
                checkpoint_id=checkpoint_id,
                derived_seeds={run_name[: -len(".jsonl")]: args.seed},
                started_at=started,
            )
    logger.info(f"Wrote {count} records to {run_path}")
    return EXIT_OK


def cmd_bench(args: argparse.Namespace, argv: Sequence[str]) -> int:
    check_run_args(args)
    settings = load_settings()
    algos = [a.strip() for a in args.algos.split(",") if a.strip()]
    unknown = [a for a in algos if a not in ALGORITHMS]
    if unknown:
        raise ConfigError(f"unknown algorithms {unknown}; choose from {', '.join(ALGORITHMS)}")
    needs_model = any(a.startswith("fomemo-") for a in algos)
    if needs_model and not args.ckpt:
        raise ConfigError("--ckpt is required for fomemo-* algorithms")
    service, checkpoint_id = _load_service(args.ckpt if needs_model else None, settings.device)
    problems = args.problems.split(",") if args.problems else list(SYNTHETIC_SUITE)
    outcome = run_bench(
        service,
        problems,
        algos,
        seeds=args.seeds,
        budget=args.budget,
        out_dir=args.out,
        master_seed=args.seed,
        q=args.q,
        threads=args.threads or settings.threads,
        dim=args.dim,
        command_line=list(argv),
        checkpoint_id=checkpoint_id,
    )
    if outcome.failed:
        logger.error(f"{len(outcome.failed)} bench cells failed: {', '.join(outcome.failed)}")
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_posterior(args: argparse.Namespace, argv: Sequence[str]) -> int:
    settings = load_settings()
    service, checkpoint_id = _load_service(args.ckpt, settings.device)
    preferences = parse_preferences(args.preferences)
    out_dir = _output_dir(args.out)
    started = utc_now()
    with get_problem(args.problem, d=args.dim, m=args.n_obj, timeout=settings.external_timeout) as problem:
        rows = service.posterior_curves(problem, args.n_traj, preferences, args.grid, args.seed, beta=args.beta)
    write_csv(args.out, POSTERIOR_HEADER, rows)
    record_manifest(
        out_dir,
        argv,
        {"problem": args.problem, "n_traj": args.n_traj, "preferences": preferences, "grid": args.grid, "beta": args.beta},
        args.seed,
        [os.path.basename(args.out)],
        checkpoint_id=checkpoint_id,
        started_at=started,
    )
    logger.info(f"Wrote {len(rows)} posterior rows to {args.out}")
    return EXIT_OK


def cmd_report(args: argparse.Namespace, argv: Sequence[str]) -> int:
    paths = sorted(glob.glob(os.path.join(args.runs, "*.jsonl")))
    if not paths:
        raise ConfigError(f"no run files (*.jsonl) in {args.runs}")
    started = utc_now()
    rows = report_rows(paths, args.metric, reference=args.reference)
    out_dir = _output_dir(args.out)
    write_csv(args.out, REPORT_HEADER, rows)
    record_manifest(
        out_dir,
        argv,
        {"runs": [os.path.basename(p) for p in paths], "metric": args.metric, "reference": args.reference},
        0,
        [os.path.basename(args.out)],
        started_at=started,
    )
    logger.info(f"Wrote {len(rows)} report rows for {len(paths)} runs to {args.out}")
    return EXIT_OK


def cmd_serve(args: argparse.Namespace, argv: Sequence[str]) -> int:
    import uvicorn

    if args.ckpt:
        os.environ["FOMEMO_CHECKPOINT"] = args.ckpt
    uvicorn.run("app:app", host=args.host, port=args.port)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fomemo", description="In-context multi-objective Bayesian optimization")
    parser.add_argument("--log-level", default=None, help="Overrides FOMEMO_LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="Pre-train the aggregation model on the synthetic prior")
    p.add_argument("--config", required=True, help="JSON training config with \"schema\": 1")
    p.add_argument("--out", default="runs/train", help="Output directory")
    p.add_argument("--dry-run", action="store_true", help="Validate the config and run a single step")
    p.add_argument("--resume", default=None, help="Checkpoint to resume from")
    p.add_argument("--no-progress", action="store_true", help="Disable the progress bar")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("optimize", help="Run in-context optimization on one problem")
    p.add_argument("--ckpt", required=True, help="Trained checkpoint")
    p.add_argument("--problem", required=True, help="Registered problem or external:<command>")
    p.add_argument("--acq", choices=["ei", "ucb", "uhvi"], default="ucb")
    p.add_argument("--budget", type=int, default=40, help="Evaluations after the initial design")
    p.add_argument("--q", type=int, default=1, help="Candidates per round")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--beta", type=float, default=1.0, help="UCB exploration weight")
    p.add_argument("--dim", type=int, default=None, help="Decision dimension override")
    p.add_argument("--n-obj", type=int, default=None, help="Objective count (external problems)")
    p.add_argument("--out", default="runs/optimize", help="Output directory")
    p.set_defaults(handler=cmd_optimize)

    p = sub.add_parser("bench", help="Run problems x algorithms x seeds")
    p.add_argument("--ckpt", default=None, help="Trained checkpoint (needed by fomemo-* algorithms)")
    p.add_argument("--suite", choices=["synthetic"], default="synthetic")
    p.add_argument("--problems", default=None, help="Comma-separated problems overriding the suite")
    p.add_argument("--algos", default=",".join(ALGORITHMS), help="Comma-separated algorithms")
    p.add_argument("--seeds", type=int, default=10, help="Replicates per cell")
    p.add_argument("--seed", type=int, default=0, help="Master seed")
    p.add_argument("--budget", type=int, default=40)
    p.add_argument("--q", type=int, default=1)
    p.add_argument("--dim", type=int, default=None)
    p.add_argument("--threads", type=int, default=None, help="Overrides FOMEMO_THREADS")
    p.add_argument("--out", default="runs/bench")
    p.set_defaults(handler=cmd_bench)

    p = sub.add_parser("posterior", help="Dump posterior curves on a 1-d problem")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--problem", required=True)
    p.add_argument("--n-traj", type=int, default=5, help="Sobol observations in the context")
    p.add_argument("--preferences", required=True, help="Preferences as 'w1,w2;w1,w2;...'")
    p.add_argument("--grid", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--dim", type=int, default=1)
    p.add_argument("--n-obj", type=int, default=None)
    p.add_argument("--out", required=True, help="CSV path")
    p.set_defaults(handler=cmd_posterior)

    p = sub.add_parser("report", help="Anytime IGD+ or HV curves from run files")
    p.add_argument("--runs", required=True, help="Directory of run JSONL files")
    p.add_argument("--metric", choices=["igdplus", "hv"], default="igdplus")
    p.add_argument("--reference", default="analytic", help="'analytic' or a CSV of reference objective vectors")
    p.add_argument("--out", required=True, help="CSV path")
    p.set_defaults(handler=cmd_report)

    p = sub.add_parser("serve", help="Start the HTTP service")
    p.add_argument("--ckpt", default=None, help="Overrides FOMEMO_CHECKPOINT")
    p.add_argument("--host", default="0.0.0.0")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(handler=cmd_serve)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        return args.handler(args, ["fomemo"] + argv)
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG
    except FomemoError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_RUNTIME
    except Exception as e:
        logger.exception(f"Unexpected failure: {e}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
