"""Command-line front end.

One subcommand per pipeline stage plus an end-to-end `run`.  Machine
readable files go to the output directory; a short human summary goes to
stdout.  Exit codes: 0 success, 2 configuration/parsing, 3 numerical,
4 game/LP solver.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .attack import SeBudget, classify_meters, make_problem, solve_attack_se
from .errors import (
    CalibrationMismatchError,
    ConfigError,
    DegenerateDataError,
    DegenerateError,
    DegenerateGameError,
    EmptySetError,
    GridGameError,
    MissingThresholdError,
    NonconvergenceError,
    NumericalError,
    ParseError,
    SingularError,
    UnboundedError,
    UnknownBranchError,
    ValidationError,
)
from .game import (
    attacker_mixed_strategy,
    defender_mixed_strategy,
    find_pure_strategy,
    game_matrix_from_csv,
    game_value_check,
    minimax_values,
    support_key,
)
from .grid_model import build_estimator, build_jacobian, line_sensitivity, load_case
from .scenario import (
    load_experiment_config,
    run_full_pipeline,
    strategies_to_json,
    write_reports,
)

EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_SOLVER = 4

_CONFIG_ERRORS = (ConfigError, ParseError, ValidationError, UnknownBranchError, FileNotFoundError)
_NUMERICAL_ERRORS = (
    NumericalError, SingularError, DegenerateError, NonconvergenceError,
    DegenerateDataError, EmptySetError, UnboundedError, CalibrationMismatchError,
)
_SOLVER_ERRORS = (DegenerateGameError, MissingThresholdError)


def _exit_code(exc):
    if isinstance(exc, _SOLVER_ERRORS):
        return EXIT_SOLVER
    if isinstance(exc, _NUMERICAL_ERRORS):
        return EXIT_NUMERICAL
    if isinstance(exc, _CONFIG_ERRORS):
        return EXIT_CONFIG
    return EXIT_NUMERICAL


def _prepare_outdir(path, force):
    out = Path(path)
    if out.exists() and any(out.iterdir()) and not force:
        raise ConfigError(f"output directory {out} is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_case_info(args):
    case, meters = load_case(args.case)
    H = build_jacobian(case, meters)
    rank = int(np.linalg.matrix_rank(H))
    stealth_dim = H.shape[0] - rank
    print(
        f"{case.n_buses} buses, {len(case.branches)} branches, "
        f"{len(meters)} meters, rank(H)={rank}, stealth subspace dim={stealth_dim}"
    )
    return 0


def cmd_run(args):
    config = load_experiment_config(
        args.config,
        overrides={
            "seed": args.seed,
            "noise_sigma": args.noise_sigma,
            "detector": args.detector,
        },
    )
    out = _prepare_outdir(args.out, args.force)
    try:
        result = run_full_pipeline(config, threads=args.threads)
    except GridGameError as e:
        (out / "FAILED").write_text(f"{type(e).__name__}: {e}\n")
        raise
    write_reports(result, out)
    means = result.manifest["mean_payoff_mw"]
    for det in sorted(means):
        print(f"mean attacker payoff [{det}]: {means[det]:.2f} MW")
    if result.awareness is not None:
        for (bdd, mode), rate in sorted(result.awareness.rates.items()):
            print(f"detection[{bdd}, {mode}] = {rate:.3f}")
    print(f"run written to {out}")
    return 0


def cmd_solve_game(args):
    gm = game_matrix_from_csv(Path(args.matrix).read_text())
    mm, mx = minimax_values(gm)
    pure = find_pure_strategy(gm)
    if pure is None:
        print(f"no pure strategy; minimax={mm:.2f} maximin={mx:.2f}")
    else:
        print(
            f"saddle point at ({gm.row_labels[pure.row]}, {gm.col_labels[pure.col]}) "
            f"value={pure.value:.2f}"
        )
    q = defender_mixed_strategy(gm)
    u = attacker_mixed_strategy(gm)
    chk = game_value_check(gm, q.probabilities, u.probabilities)
    print(f"game value = {q.game_value:.4f} MW (duality gap {chk.duality_gap:.2e})")
    for label, p in zip(gm.row_labels, q.probabilities):
        print(f"  defend {label}: {p:.3f}")
    for label, p in zip(gm.col_labels, u.probabilities):
        print(f"  attack {label}: {p:.3f}")
    if args.out:
        payload = strategies_to_json(
            {("game", "defender"): q, ("game", "attacker"): u}, {"game": pure},
            games={"game": gm},
        )
        payload["minimax"] = mm
        payload["maximin"] = mx
        Path(args.out).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        print(f"strategies written to {args.out}")
    return 0


def cmd_calibrate(args):
    config = load_experiment_config(args.config, overrides={"seed": args.seed})
    out = _prepare_outdir(args.out, args.force)
    result = run_full_pipeline(
        replace_detector(config, "se")
    )
    write_reports(result, out)
    for rec in result.calibration:
        print(f"{rec.support}: zeta={rec.zeta_mw:.3f} MW fa_se={rec.fa_se:.3f} fa_mlp={rec.fa_mlp:.3f}")
    return 0


def replace_detector(config, detector):
    from dataclasses import replace

    return replace(config, detector=detector)


def cmd_attack(args):
    config = load_experiment_config(args.config, overrides={"seed": args.seed})
    case, meters = load_case(config.case_path)
    H = build_jacobian(case, meters)
    sigma = config.noise_sigma
    model = build_estimator(H, np.full(H.shape[0], sigma * sigma if sigma > 0 else 1.0))
    sens = line_sensitivity(model, case, tuple(config.target_line))
    partition = classify_meters(sens)
    labels = args.support.split(",") if args.support else list(config.candidate_meters)
    support = [meters.index_of(l) for l in labels]
    if args.zeta is not None:
        zeta = args.zeta
    elif config.thresholds and frozenset(labels) in config.thresholds:
        zeta = config.thresholds[frozenset(labels)]
    else:
        raise ConfigError("no budget: pass --zeta or configure thresholds")
    problem = make_problem(partition, support, SeBudget(zeta), len(meters))
    res = solve_attack_se(model, problem, sensitivity=sens)
    report = {
        "support": labels,
        "support_key": support_key(labels),
        "zeta_mw": zeta,
        "objective_signs": [float(v) for v in problem.c],
        "z_a_mw": [float(v) for v in res.z_a],
        "objective_mw": res.objective_value,
        "utility_mw": res.utility,
        "feasible": res.feasible,
        "detector_margin_mw": res.detector_margin,
        "diagnostics": res.diagnostics,
    }
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
        print(f"attack report written to {args.out}")
    else:
        print(text)
    return 0


def cmd_game_build(args):
    config = load_experiment_config(
        args.config, overrides={"seed": args.seed, "detector": args.detector}
    )
    out = _prepare_outdir(args.out, args.force)
    result = run_full_pipeline(config, threads=args.threads)
    write_reports(result, out)
    for det in ("se", "mlp"):
        gm = getattr(result, f"game_{det}")
        if gm is not None:
            print(f"game_{det}.csv: {gm.S.shape[0]}x{gm.S.shape[1]} mean={gm.S.mean():.2f} MW")
    return 0


def cmd_awareness(args):
    config = load_experiment_config(args.config, overrides={"seed": args.seed})
    out = _prepare_outdir(args.out, args.force)
    result = run_full_pipeline(config, threads=args.threads)
    write_reports(result, out)
    for (bdd, mode), rate in sorted(result.awareness.rates.items()):
        print(f"detection[{bdd}, {mode}] = {rate:.3f}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="gridgame", description=__doc__)
    p.add_argument("--version", action="version", version=f"gridgame {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("case-info", help="validate a case file and print its dimensions")
    sp.add_argument("case")
    sp.set_defaults(func=cmd_case_info)

    def common(sp, threads=True):
        sp.add_argument("--config", required=True, help="experiment file (TOML or JSON)")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=None, help="master seed override")
        sp.add_argument("--force", action="store_true", help="overwrite a non-empty output dir")
        if threads:
            sp.add_argument("--threads", type=int, default=1)

    sp = sub.add_parser("run", help="full pipeline: train, calibrate, games, awareness")
    common(sp)
    sp.add_argument("--noise-sigma", dest="noise_sigma", type=float, default=None)
    sp.add_argument("--detector", choices=("se", "mlp", "both"), default=None)
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("calibrate", help="train the net and calibrate the residual threshold")
    common(sp, threads=False)
    sp.set_defaults(func=cmd_calibrate)

    sp = sub.add_parser("attack", help="solve one residual-budget attack")
    sp.add_argument("--config", required=True)
    sp.add_argument("--support", help="comma-separated meter labels (default: candidates)")
    sp.add_argument("--zeta", type=float, default=None, help="budget override (MW)")
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--out", default=None, help="write the JSON report here")
    sp.set_defaults(func=cmd_attack)

    sp = sub.add_parser("game-build", help="build the payoff matrices")
    common(sp)
    sp.add_argument("--detector", choices=("se", "mlp", "both"), default=None)
    sp.set_defaults(func=cmd_game_build)

    sp = sub.add_parser("solve-game", help="saddle point and mixed strategies of a matrix CSV")
    sp.add_argument("matrix")
    sp.add_argument("--out", default=None, help="write strategies JSON here")
    sp.set_defaults(func=cmd_solve_game)

    sp = sub.add_parser("awareness", help="aware/unaware detection study")
    common(sp)
    sp.set_defaults(func=cmd_awareness)

    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (GridGameError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return _exit_code(e)


if __name__ == "__main__":
    sys.exit(main())
