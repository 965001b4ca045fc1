"""
Command-line entry point: `opflayer <command> [case] [options]`
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from pydantic import ValidationError

from .casefile import (
    load_case,
    write_alignment_csv,
    write_history_csv,
    write_metrics_csv,
)
from .config import SolverConfig, load_run_config
from .enums import RefinementKind
from .error import ConfigError, OpfLayerError
from .grid import build_grid
from .loss import DualState
from .model import save_checkpoint
from .study import OpfStudy
from .utils import enable_debug, setup_logging, write_manifest

log = logging.getLogger(__name__)

GRAD_CHECK_LIMIT = 1e-4
VJP_ABS_LIMIT = 1e-10


def _common(parser: argparse.ArgumentParser, case_required: bool) -> None:
    if case_required:
        parser.add_argument("case", help="MATPOWER case file")
    else:
        parser.add_argument("case", nargs="?", help="MATPOWER case file (default: config 'case')")
    parser.add_argument("--config", help="Run config file (YAML or JSON)")
    parser.add_argument("--profile", help="Config profile to overlay")
    parser.add_argument("--preset", help="Built-in hyperparameter preset, e.g. case57-nr")
    parser.add_argument("--output-dir", help="Artifact directory (default: $OPFLAYER_OUTPUT_DIR)")
    parser.add_argument("--seed", type=int, help="Master seed override")
    parser.add_argument("--workers", type=int, help="Per-sample worker threads")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="More logging")
    parser.add_argument(
        "--log-level",
        type=str.upper,
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help="Explicit logging level",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="opflayer",
        description="Unsupervised AC-OPF learning with an embedded fixed-point power-flow layer",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("parse", help="Parse a case and print counts and partition sizes")
    _common(p, case_required=True)

    p = sub.add_parser("pf", help="Solve the nominal power flow and print the mismatch trace")
    _common(p, case_required=True)
    p.add_argument("--solver", choices=["hybrid", "nr", "fdpf"], default="hybrid")
    p.add_argument("--kg", type=int, help="FDPF guide steps K_G")
    p.add_argument("--kr", type=int, help="Refinement steps K_R")
    p.add_argument("--refine", choices=["nr", "fdpf"], help="Refinement kind")
    p.add_argument("--tol", type=float, help="Mismatch tolerance (p.u.)")
    p.add_argument("--max-iter", type=int, help="Iteration cap for nr/fdpf")

    p = sub.add_parser("gen-data", help="Generate the perturbed-load dataset")
    _common(p, case_required=False)

    p = sub.add_parser("train", help="Primal-dual training")
    _common(p, case_required=False)

    p = sub.add_parser("eval", help="Metrics of a checkpoint on a dataset split")
    _common(p, case_required=False)
    p.add_argument("--checkpoint", help="Model checkpoint (default: config 'checkpoint')")
    p.add_argument("--split", choices=["train", "test"], default="test")

    p = sub.add_parser("estimate-constants", help="Theorem constants and the alignment study")
    _common(p, case_required=False)
    p.add_argument("--checkpoint", help="Model checkpoint (default: config 'checkpoint')")
    p.add_argument("--duals", help="Multipliers saved by `train` (default: zero)")

    p = sub.add_parser("grad-check", help="Run every sensitivity oracle at the nominal point")
    _common(p, case_required=False)
    p.add_argument("--checkpoint", help="Network for the parameter oracle (default: fresh)")
    p.add_argument("--kr", type=int, default=4, help="Refinement depth checked")

    p = sub.add_parser("ablate", help="Train once per refinement depth with K_G fixed")
    _common(p, case_required=False)
    return parser


def _configure_logging(args: argparse.Namespace) -> None:
    if args.log_level:
        setup_logging(args.log_level)
    elif args.verbose >= 2:
        enable_debug()
    elif args.verbose == 1:
        setup_logging("INFO")
    else:
        setup_logging("WARNING")


def _study(args: argparse.Namespace) -> OpfStudy:
    config = load_run_config(
        args.config,
        args.profile,
        args.preset,
        overrides={
            "case": args.case,
            "seed": args.seed,
            "workers": args.workers,
            "output_dir": args.output_dir,
            "checkpoint": getattr(args, "checkpoint", None),
        },
    )
    return OpfStudy(config=config)


def _finish(study: OpfStudy, args, argv, artifacts: List[str]) -> None:
    write_manifest(
        study.output_dir,
        args.command,
        argv,
        study.config.model_dump(mode="json"),
        study.config.seed,
        artifacts,
    )
    for name in artifacts:
        print(f"wrote {study.output_dir / name}")


def _cmd_parse(args, argv) -> int:
    grid = build_grid(load_case(args.case))
    p = grid.partition
    print(grid.summary())
    print(
        f"|R|={p.slack.size} |G|={p.gen.size} |D|={p.load.size} n_tilde={p.n_tilde} "
        f"inequalities={grid.n_ineq} equalities={grid.n_eq}"
    )
    config = load_run_config(
        args.config, args.profile, args.preset, {"output_dir": args.output_dir}
    )
    write_manifest(
        config.resolved_output_dir(),
        args.command,
        argv,
        config.model_dump(mode="json"),
        args.seed if args.seed is not None else config.seed,
    )
    return 0


def _solver_from_flags(base: SolverConfig, args) -> SolverConfig:
    updates: Dict[str, object] = {}
    if args.kg is not None:
        updates["guide_iterations"] = args.kg
    if args.refine is not None:
        refinement = RefinementKind.SINGLE_NR if args.refine == "nr" else RefinementKind.KSTEP_FDPF
        updates["refinement"] = refinement
        if args.kr is None and refinement == RefinementKind.SINGLE_NR:
            updates["refinement_iterations"] = 1
    if args.kr is not None:
        updates["refinement_iterations"] = args.kr
    if args.tol is not None:
        updates["tolerance"] = args.tol
    try:
        return SolverConfig.model_validate({**base.model_dump(), **updates})
    except ValidationError as e:
        raise ConfigError(f"Invalid solver flags: {e}", key="solver") from e


def _cmd_pf(args, argv) -> int:
    study = _study(args)
    solver_cfg = _solver_from_flags(study.config.solver, args)
    result = study.solve(args.solver, solver_cfg, args.tol, args.max_iter)
    print(f"{study.grid.summary()}")
    if args.solver == "hybrid":
        print(f"solver: {solver_cfg!r}")
    for i, mismatch in enumerate(result.trace, start=1):
        print(f"{i:4d}  {mismatch:.6e}")
    print(repr(result))
    _finish(study, args, argv, [])
    return 0 if result.converged else 1


def _cmd_gen_data(args, argv) -> int:
    study = _study(args)
    dataset = study.generate_data()
    dataset.save(study.output_dir / "dataset.npz")
    print(f"{len(dataset)} samples ({dataset.train_idx.size} train / {dataset.test_idx.size} test)")
    _finish(study, args, argv, ["dataset.npz"])
    return 0


def _cmd_train(args, argv) -> int:
    study = _study(args)
    out = study.output_dir
    outcome = study.train()
    save_checkpoint(outcome.network, study.grid, out / "model.pt")
    outcome.duals.save(out / "duals.npz")
    write_metrics_csv(outcome.history.train_records(), out / "metrics_train.csv")
    write_metrics_csv(outcome.history.test_records(), out / "metrics_test.csv")
    write_history_csv(outcome.history, out / "history.csv")
    print(outcome.history.summary())
    _finish(
        study,
        args,
        argv,
        ["model.pt", "duals.npz", "metrics_train.csv", "metrics_test.csv", "history.csv"],
    )
    return 0


def _cmd_eval(args, argv) -> int:
    study = _study(args)
    metrics = study.evaluate(study.load_network(), args.split)
    write_metrics_csv([metrics], study.output_dir / f"metrics_{args.split}.csv")
    print(repr(metrics))
    _finish(study, args, argv, [f"metrics_{args.split}.csv"])
    return 0


def _cmd_estimate_constants(args, argv) -> int:
    study = _study(args)
    network = study.load_network()
    duals = DualState.load(args.duals) if args.duals else None
    rows = study.alignment(network, duals)
    write_alignment_csv(rows, study.output_dir / "alignment.csv")
    constants = [row.constants.model_dump(mode="json") for row in rows]
    with open(study.output_dir / "constants.json", "w", encoding="utf-8") as f:
        json.dump(constants, f, indent=2)
    for row in rows:
        c = row.constants
        print(
            f"K_R={row.K_R}: cos={row.cosine_mean:.4f}±{row.cosine_std:.4f} "
            f"relerr={row.relerr_mean:.3e} rho={c.rho_k:.3e} eps_k={c.eps_k:.3e} "
            f"bound={c.bound:.4f}"
        )
    _finish(study, args, argv, ["alignment.csv", "constants.json"])
    return 0


def _cmd_grad_check(args, argv) -> int:
    study = _study(args)
    network = study.load_network() if study.config.checkpoint else None
    report = study.grad_check(network, K_R=args.kr)
    failed = False
    for name, value in report.items():
        limit = VJP_ABS_LIMIT if name == "kstep_vjp_abs" else GRAD_CHECK_LIMIT
        status = "ok" if value <= limit else "FAIL"
        failed |= value > limit
        print(f"{name:28s} {value:.3e}  {status}")
    relative = [v for k, v in report.items() if k != "kstep_vjp_abs"]
    print(f"max relative error: {max(relative):.3e}")
    _finish(study, args, argv, [])
    return 1 if failed else 0


def _cmd_ablate(args, argv) -> int:
    study = _study(args)
    outcomes = study.ablate()
    artifacts = []
    for K_R, outcome in outcomes.items():
        name = f"metrics_test_kr{K_R}.csv"
        write_metrics_csv(outcome.history.test_records(), study.output_dir / name)
        write_history_csv(outcome.history, study.output_dir / f"history_kr{K_R}.csv")
        artifacts += [name, f"history_kr{K_R}.csv"]
        print(f"K_R={K_R}: {outcome.history.summary()}")
    _finish(study, args, argv, artifacts)
    return 0


COMMANDS = {
    "parse": _cmd_parse,
    "pf": _cmd_pf,
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "estimate-constants": _cmd_estimate_constants,
    "grad-check": _cmd_grad_check,
    "ablate": _cmd_ablate,
}


def dispatch(argv: Optional[Sequence[str]] = None) -> int:
    """Run one command; returns 0 on success, 1 on domain errors, 2 on usage errors"""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    _configure_logging(args)

    try:
        return COMMANDS[args.command](args, argv)
    except ConfigError as e:
        print(f"opflayer {args.command}: configuration error: {e}", file=sys.stderr)
        return 2
    except (OpfLayerError, OSError) as e:
        print(f"opflayer {args.command}: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
