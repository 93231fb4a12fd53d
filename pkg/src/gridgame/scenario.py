"""End-to-end experiments: train, calibrate, build both games, measure.

A single experiment config drives the whole chain: load the case, fit the
estimator, train the learned detector on generated safe/attacked samples,
match the residual detector's false-alarm rate to it, build the payoff
matrix against each detector, solve both games, and run the aware/unaware
detection study.  Every stage draws randomness from a named substream of
one master seed, so a run is a pure function of (config, seed) and re-runs
produce byte-identical reports.
"""

from __future__ import annotations

import hashlib
import json
import re
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .attack import (
    MlpAttackConfig,
    MlpBoundary,
    SeBudget,
    classify_meters,
    make_problem,
    solve_attack_mlp,
    solve_attack_se,
)
from .bdd import (
    SeDetector,
    TrainConfig,
    calibrate_threshold,
    detection_rate,
    detector_to_json,
    false_alarm_rate,
    generate_dataset,
    mlp_train,
)
from .errors import CalibrationMismatchError, ConfigError, GridGameError, ParseError
from .game import (
    GameEngine,
    attacker_mixed_strategy,
    build_game_matrix,
    defender_mixed_strategy,
    find_pure_strategy,
    game_matrix_to_csv,
    game_value_check,
    minimax_values,
    support_key,
)
from .grid_model import (
    build_estimator,
    build_jacobian,
    dc_state_from_injections,
    line_sensitivity,
    load_case,
)

_LABEL_RE = re.compile(r"[A-Za-z]+\d+")


def substream(master_seed, name):
    """Stable derived seed for a named stage of the pipeline."""
    digest = hashlib.sha256(f"{master_seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


def split_support_key(key):
    """Inverse of support_key for labels of the form <letters><digits>."""
    labels = _LABEL_RE.findall(key)
    if not labels or "".join(labels) != key:
        raise ConfigError(f"cannot split support key {key!r}")
    return frozenset(labels)


@dataclass(frozen=True)
class ExperimentConfig:
    case_path: str
    target_line: tuple[int, int]
    candidate_meters: tuple[str, ...]
    noise_sigma: float = 1.0
    seed: int = 0
    load_profile: dict = None
    x0: tuple | None = None
    thresholds: dict | None = None  # frozenset(labels) -> zeta MW
    mlp_hidden: tuple[int, ...] = (16, 8)
    mlp_activation: str = "sigmoid"
    mlp_learning_rate: float = 0.05
    mlp_epochs: int = 200
    mlp_batch_size: int = 32
    mlp_normalize: bool = True
    dataset_n_total: int = 10000
    dataset_zeta_star: float = 8.0
    dataset_support_sizes: tuple[int, ...] = (1, 2)
    calibration_n_safe: int = 2000
    calibration_n_holdout: int = 2000
    awareness_n_trials: int = 1000
    awareness_attack_meters: tuple[str, ...] | None = None
    detector: str = "both"  # which payoff matrices to build
    raw: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        if not self.candidate_meters:
            raise ConfigError("candidate meter list is empty")
        if len(self.target_line) != 2:
            raise ConfigError("target_line must name two buses")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be nonnegative")
        if self.load_profile is None and self.x0 is None:
            raise ConfigError("config needs either load_profile or x0")
        if self.detector not in ("se", "mlp", "both"):
            raise ConfigError(f"unknown detector restriction {self.detector!r}")
        if self.dataset_n_total <= 0 or self.dataset_n_total % 2:
            raise ConfigError("dataset n_total must be positive and even")

    def action_sets(self):
        """Defense/attack actions: all 2-element candidate subsets, in order."""
        c = list(self.candidate_meters)
        pairs = [
            frozenset((c[i], c[j]))
            for i in range(len(c))
            for j in range(i + 1, len(c))
        ]
        return pairs

    def digest(self):
        blob = json.dumps(self.raw, sort_keys=True) if self.raw else repr(self)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def load_experiment_config(path, overrides=None):
    """Read a TOML or JSON experiment file; paths resolve against it."""
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {path}")
    text = p.read_text()
    if p.suffix.lower() == ".toml":
        if sys.version_info >= (3, 11):
            import tomllib as toml
        else:
            import tomli as toml
        try:
            raw = toml.loads(text)
        except toml.TOMLDecodeError as e:
            raise ParseError(f"{path}: {e}")
    else:
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as e:
            raise ParseError(f"{path}: line {e.lineno}: {e.msg}")
    return experiment_config_from_dict(raw, base_dir=p.parent, overrides=overrides)


def experiment_config_from_dict(raw, base_dir=".", overrides=None):
    raw = dict(raw)
    for key, val in (overrides or {}).items():
        if val is not None:
            raw[key] = val
    mlp = raw.get("mlp", {})
    ds = raw.get("dataset", {})
    cal = raw.get("calibration", {})
    aw = raw.get("awareness", {})
    thresholds = None
    if "thresholds" in raw:
        thresholds = {
            split_support_key(k): float(v) for k, v in raw["thresholds"].items()
        }
    try:
        case_path = str(Path(base_dir) / raw["case"])
        cfg = ExperimentConfig(
            case_path=case_path,
            target_line=tuple(int(b) for b in raw["target_line"]),
            candidate_meters=tuple(raw["candidate_meters"]),
            noise_sigma=float(raw.get("noise_sigma", 1.0)),
            seed=int(raw.get("seed", 0)),
            load_profile={int(k): float(v) for k, v in raw["load_profile"].items()}
            if "load_profile" in raw
            else None,
            x0=tuple(float(v) for v in raw["x0"]) if "x0" in raw else None,
            thresholds=thresholds,
            mlp_hidden=tuple(int(h) for h in mlp.get("hidden", (16, 8))),
            mlp_activation=str(mlp.get("activation", "sigmoid")),
            mlp_learning_rate=float(mlp.get("learning_rate", 0.05)),
            mlp_epochs=int(mlp.get("epochs", 200)),
            mlp_batch_size=int(mlp.get("batch_size", 32)),
            mlp_normalize=bool(mlp.get("normalize", True)),
            dataset_n_total=int(ds.get("n_total", 10000)),
            dataset_zeta_star=float(ds.get("zeta_star", 8.0)),
            dataset_support_sizes=tuple(int(s) for s in ds.get("support_sizes", (1, 2))),
            calibration_n_safe=int(cal.get("n_safe", 2000)),
            calibration_n_holdout=int(cal.get("n_holdout", 2000)),
            awareness_n_trials=int(aw.get("n_trials", 1000)),
            awareness_attack_meters=tuple(aw["attack_meters"])
            if "attack_meters" in aw
            else None,
            detector=str(raw.get("detector", "both")),
            raw=raw,
        )
    except KeyError as e:
        raise ConfigError(f"config missing required field {e.args[0]!r}")
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad config value: {e}")
    return cfg


@dataclass(frozen=True)
class CalibrationRecord:
    support: str
    zeta_mw: float
    fa_mlp: float
    fa_se: float
    n_samples: int
    seed: int


@dataclass(frozen=True)
class AwarenessReport:
    """Detection rates of each detector against aware/unaware attackers."""

    rates: dict  # (bdd, awareness) -> rate
    n_trials: int
    attack_stats: dict  # attack id -> {objective_mw, utility_mw, norm_mw}
    fa_se: float
    fa_mlp: float

    def __post_init__(self):
        for rate in self.rates.values():
            if not 0.0 <= rate <= 1.0:
                raise ConfigError("detection rates must lie in [0, 1]")


@dataclass(frozen=True)
class PipelineResult:
    config: object
    meters: object
    model: object
    sensitivity: object
    partition: object
    x0: np.ndarray
    mlp: object
    se_detector: object
    calibration: tuple
    game_se: object  # GameMatrix or None under a detector restriction
    game_mlp: object
    strategies: dict  # (detector, side) -> MixedStrategy
    pure: dict  # detector -> PureStrategy or None
    awareness: object  # AwarenessReport or None
    manifest: dict


def make_attack_generator(model, partition, attackable, zeta_star, support_sizes):
    """Sampler of stealth injections for training data.

    Draws a random support among the attackable meters (size from
    support_sizes), a budget uniform in [zeta_star/2, 2 zeta_star], and
    returns the residual-optimal injection for that support.
    """
    attackable = list(attackable)
    sizes = [s for s in support_sizes if s <= len(attackable)]
    if not attackable or not sizes:
        raise ConfigError("no attackable meters for the dataset generator")
    n = model.n_meters

    def gen(rng):
        for _ in range(16):
            size = sizes[rng.integers(len(sizes))]
            support = list(rng.choice(attackable, size=size, replace=False))
            zeta = rng.uniform(0.5 * zeta_star, 2.0 * zeta_star)
            problem = make_problem(partition, support, SeBudget(zeta), n)
            try:
                return solve_attack_se(model, problem).z_a
            except GridGameError:
                continue
        raise ConfigError("attack generator failed 16 times in a row")

    return gen


def _safe_samples(model, x0, sigma, n, seed):
    rng = np.random.default_rng(seed)
    z0 = model.H @ x0
    noise = rng.normal(0.0, sigma, size=(n, model.n_meters)) if sigma > 0 else np.zeros((n, model.n_meters))
    return z0 + noise


def awareness_experiment(context, se_det, mlp_det, attack_labels, n_trials, seed,
                         mlp_config=None, threads=1, fa_tolerance=0.05):
    """Detection rates for every (detector, attacker-awareness) pairing.

    The aware attacker optimizes against the deployed detector's own
    parameters; the unaware one against the other detector family.  Each
    cell scores n_trials noisy attacked samples.  Requires the detectors'
    false-alarm rates to agree within fa_tolerance on fresh safe samples.
    """
    model, meters, partition, x0, sigma = (
        context["model"], context["meters"], context["partition"],
        context["x0"], context["noise_sigma"],
    )
    z0 = model.H @ x0
    n = model.n_meters

    fa_samples = _safe_samples(model, x0, sigma, max(n_trials, 500), substream(seed, "fa-check"))
    fa_se = false_alarm_rate(se_det, fa_samples)
    fa_mlp = false_alarm_rate(mlp_det, fa_samples)
    if abs(fa_se - fa_mlp) > fa_tolerance:
        raise CalibrationMismatchError(
            f"false-alarm mismatch {fa_se:.3f} vs {fa_mlp:.3f} exceeds {fa_tolerance}"
        )

    support = [meters.index_of(l) for l in attack_labels]
    se_problem = make_problem(partition, support, SeBudget(se_det.zeta), n)
    z_se = solve_attack_se(model, se_problem).z_a
    mlp_problem = make_problem(partition, support, MlpBoundary(z0), n)
    z_mlp = solve_attack_mlp(mlp_det, mlp_problem, config=mlp_config).z_a

    cells = {
        ("mlp", "aware"): (mlp_det, z_mlp),
        ("mlp", "unaware"): (mlp_det, z_se),
        ("se", "aware"): (se_det, z_se),
        ("se", "unaware"): (se_det, z_mlp),
    }

    def run_cell(item):
        key, (det, z_a) = item
        cell_seed = substream(seed, f"awareness:{key[0]}:{key[1]}")
        samples = _safe_samples(model, x0, sigma, n_trials, cell_seed) + z_a
        return key, detection_rate(det, samples)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rates = dict(pool.map(run_cell, cells.items()))
    else:
        rates = dict(map(run_cell, cells.items()))

    c = np.asarray(se_problem.c)
    stats = {
        "vs_se": {
            "objective_mw": float(c @ z_se),
            "norm_mw": float(np.linalg.norm(z_se)),
        },
        "vs_mlp": {
            "objective_mw": float(c @ z_mlp),
            "norm_mw": float(np.linalg.norm(z_mlp)),
        },
    }
    return AwarenessReport(
        rates=rates, n_trials=n_trials, attack_stats=stats, fa_se=fa_se, fa_mlp=fa_mlp
    )


def average_attacker_utility(gm):
    """Arithmetic mean over all payoff cells (MW)."""
    S = gm.S if hasattr(gm, "S") else np.asarray(gm, dtype=float)
    if S.size == 0:
        raise ConfigError("empty payoff matrix")
    return float(S.mean())


def run_full_pipeline(config, threads=1):
    """Execute every stage; deterministic given config (incl. master seed)."""
    stage = "load-case"
    try:
        case, meters = load_case(config.case_path)
        for label in config.candidate_meters:
            meters.index_of(label)

        stage = "estimator"
        H = build_jacobian(case, meters)
        sigma = config.noise_sigma
        model = build_estimator(H, np.full(H.shape[0], sigma * sigma if sigma > 0 else 1.0))

        stage = "sensitivity"
        sens = line_sensitivity(model, case, tuple(config.target_line))
        partition = classify_meters(sens)

        stage = "operating-point"
        if config.x0 is not None:
            x0 = np.asarray(config.x0, dtype=float)
        else:
            x0 = dc_state_from_injections(case, config.load_profile)
        z0 = model.H @ x0

        stage = "dataset"
        attackable = [meters.index_of(l) for l in config.candidate_meters]
        gen = make_attack_generator(
            model, partition, attackable, config.dataset_zeta_star, config.dataset_support_sizes
        )
        data = generate_dataset(
            model,
            {"x0": x0, "noise_sigma": sigma, "attack_generator": gen,
             "n_total": config.dataset_n_total},
            substream(config.seed, "dataset"),
        )

        stage = "training"
        train_cfg = TrainConfig(
            hidden=config.mlp_hidden,
            activation=config.mlp_activation,
            learning_rate=config.mlp_learning_rate,
            epochs=config.mlp_epochs,
            batch_size=config.mlp_batch_size,
            seed=substream(config.seed, "training") % (2**32),
            normalize=config.mlp_normalize,
        )
        mlp = mlp_train(data, train_cfg)

        stage = "calibration"
        cal_samples = _safe_samples(
            model, x0, sigma, config.calibration_n_safe, substream(config.seed, "cal-safe")
        )
        holdout = _safe_samples(
            model, x0, sigma, config.calibration_n_holdout, substream(config.seed, "cal-holdout")
        )
        fa_mlp_cal = false_alarm_rate(mlp, cal_samples)
        supports = sorted(
            {frozenset(a - d) for d in config.action_sets() for a in config.action_sets() if a - d}
            | {frozenset({l}) for l in config.candidate_meters},
            key=lambda s: support_key(s),
        )
        records = []
        zeta_cal = None
        for sup in supports:
            zeta = calibrate_threshold(mlp, model, sup, cal_samples)
            zeta_cal = zeta  # identical across supports under this noise model
            se_det_tmp = SeDetector(model=model, zeta=zeta)
            records.append(
                CalibrationRecord(
                    support=support_key(sup),
                    zeta_mw=zeta,
                    fa_mlp=false_alarm_rate(mlp, holdout),
                    fa_se=false_alarm_rate(se_det_tmp, holdout),
                    n_samples=cal_samples.shape[0],
                    seed=config.seed,
                )
            )
        se_det = SeDetector(model=model, zeta=zeta_cal)

        stage = "game-se"
        game_se = None
        if config.detector in ("se", "both"):
            thresholds = config.thresholds or {
                sup: rec.zeta_mw for sup, rec in zip(supports, records)
            }
            engine = GameEngine(
                model=model, meters=meters, sensitivity=sens, partition=partition,
                detector="se", thresholds=thresholds,
            )
            game_se = build_game_matrix(engine, config.action_sets(), config.action_sets())

        stage = "game-mlp"
        game_mlp = None
        mlp_cfg = MlpAttackConfig(model=model, reference_zeta=zeta_cal)
        if config.detector in ("mlp", "both"):
            engine = GameEngine(
                model=model, meters=meters, sensitivity=sens, partition=partition,
                detector="mlp", mlp=mlp, z0=z0, mlp_config=mlp_cfg,
            )
            game_mlp = build_game_matrix(engine, config.action_sets(), config.action_sets())

        stage = "strategies"
        strategies, pure = {}, {}
        for name, gm in (("se", game_se), ("mlp", game_mlp)):
            if gm is None:
                continue
            qs = defender_mixed_strategy(gm)
            us = attacker_mixed_strategy(gm)
            chk = game_value_check(gm, qs.probabilities, us.probabilities)
            if chk.duality_gap > 1e-6:
                raise GridGameError(f"duality gap {chk.duality_gap:.2e} for {name} game")
            strategies[(name, "defender")] = qs
            strategies[(name, "attacker")] = us
            pure[name] = find_pure_strategy(gm)

        stage = "awareness"
        awareness = None
        if config.detector == "both":
            attack_labels = config.awareness_attack_meters or config.candidate_meters
            awareness = awareness_experiment(
                {"model": model, "meters": meters, "partition": partition,
                 "x0": x0, "noise_sigma": sigma},
                se_det, mlp, attack_labels, config.awareness_n_trials,
                substream(config.seed, "awareness"), mlp_config=mlp_cfg, threads=threads,
            )

        stage = "manifest"
        manifest = {
            "config_digest": config.digest(),
            "master_seed": config.seed,
            "substreams": {
                name: substream(config.seed, name)
                for name in ("dataset", "training", "cal-safe", "cal-holdout", "awareness")
            },
            "package_version": __version__,
            "detector_restriction": config.detector,
            "zeta_calibrated_mw": zeta_cal,
            "fa_mlp_calibration": fa_mlp_cal,
            "mean_payoff_mw": {
                name: average_attacker_utility(gm)
                for name, gm in (("se", game_se), ("mlp", game_mlp))
                if gm is not None
            },
            "game_values_mw": {
                name: strategies[(name, "defender")].game_value
                for name in ("se", "mlp")
                if (name, "defender") in strategies
            },
        }
        return PipelineResult(
            config=config, meters=meters, model=model, sensitivity=sens,
            partition=partition, x0=x0, mlp=mlp, se_detector=se_det,
            calibration=tuple(records), game_se=game_se, game_mlp=game_mlp,
            strategies=strategies, pure=pure, awareness=awareness, manifest=manifest,
        )
    except GridGameError as e:
        e.args = (f"[stage {stage}] {e}",)
        raise


def _fmt(x):
    return f"{x:.10g}"


def strategies_to_json(strategies, pure, games=None):
    """Serializable strategy report (also the strategies.json layout)."""
    games = games or {}
    gaps = {}
    for det, gm in games.items():
        if (det, "defender") in strategies and (det, "attacker") in strategies:
            chk = game_value_check(
                gm,
                strategies[(det, "defender")].probabilities,
                strategies[(det, "attacker")].probabilities,
            )
            gaps[det] = float(chk.duality_gap)
    out = {"mixed": [], "pure": {}}
    for (det, side), st in sorted(strategies.items()):
        gm = games.get(det)
        labels = None
        if gm is not None:
            labels = list(gm.row_labels if side == "defender" else gm.col_labels)
        out["mixed"].append(
            {
                "detector": det,
                "side": st.side,
                "labels": labels,
                "probabilities": [float(p) for p in st.probabilities],
                "value_mw": float(st.game_value),
                "duality_gap": gaps.get(det),
                "scale": float(st.scale),
                "shift_applied": float(st.shift),
            }
        )
    for det, ps in sorted(pure.items()):
        out["pure"][det] = (
            None if ps is None else {"row": ps.row, "col": ps.col, "value": ps.value}
        )
    return out


def write_reports(result, outdir):
    """Emit the run directory: CSV/JSON reports, plot data and manifest."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "plotdata").mkdir(exist_ok=True)
    written = []

    lines = ["support,zeta_mw,fa_mlp,fa_se,n_samples,seed"]
    for rec in result.calibration:
        lines.append(
            f"{rec.support},{_fmt(rec.zeta_mw)},{_fmt(rec.fa_mlp)},"
            f"{_fmt(rec.fa_se)},{rec.n_samples},{rec.seed}"
        )
    (out / "calibration.csv").write_text("\n".join(lines) + "\n")
    written.append("calibration.csv")

    for name, gm in (("se", result.game_se), ("mlp", result.game_mlp)):
        if gm is None:
            continue
        (out / f"game_{name}.csv").write_text(game_matrix_to_csv(gm))
        written.append(f"game_{name}.csv")

    games = {
        name: gm
        for name, gm in (("se", result.game_se), ("mlp", result.game_mlp))
        if gm is not None
    }
    payload = strategies_to_json(result.strategies, result.pure, games)
    for name, gm in games.items():
        mm, mx = minimax_values(gm)
        payload.setdefault("bounds", {})[name] = {"minimax": mm, "maximin": mx}
    (out / "strategies.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    written.append("strategies.json")

    if result.awareness is not None:
        aw = result.awareness
        lines = ["bdd,awareness,detection_rate,n_trials"]
        for (bdd, mode), rate in sorted(aw.rates.items()):
            lines.append(f"{bdd},{mode},{_fmt(rate)},{aw.n_trials}")
        (out / "awareness.csv").write_text("\n".join(lines) + "\n")
        written.append("awareness.csv")

    lines = ["detector,side,action,probability"]
    for (det, side), st in sorted(result.strategies.items()):
        gm = result.game_se if det == "se" else result.game_mlp
        acts = gm.row_labels if side == "defender" else gm.col_labels
        for a, p in zip(acts, st.probabilities):
            lines.append(f"{det},{side},{a},{_fmt(float(p))}")
    (out / "plotdata" / "strategy_probabilities.csv").write_text("\n".join(lines) + "\n")
    written.append("plotdata/strategy_probabilities.csv")

    lines = ["detector,defense,attack,utility_mw"]
    for det, gm in (("se", result.game_se), ("mlp", result.game_mlp)):
        if gm is None:
            continue
        for i, rl in enumerate(gm.row_labels):
            for j, cl in enumerate(gm.col_labels):
                lines.append(f"{det},{rl},{cl},{_fmt(float(gm.S[i, j]))}")
    (out / "plotdata" / "payoff_cells.csv").write_text("\n".join(lines) + "\n")
    written.append("plotdata/payoff_cells.csv")

    if result.awareness is not None:
        lines = ["bdd,awareness,rate"]
        for (bdd, mode), rate in sorted(result.awareness.rates.items()):
            lines.append(f"{bdd},{mode},{_fmt(rate)}")
        (out / "plotdata" / "detection_rates.csv").write_text("\n".join(lines) + "\n")
        written.append("plotdata/detection_rates.csv")

    (out / "detector_mlp.json").write_text(detector_to_json(result.mlp) + "\n")
    written.append("detector_mlp.json")

    manifest = dict(result.manifest)
    manifest["files"] = sorted(written)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out
