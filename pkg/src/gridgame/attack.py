"""Optimal stealth injections against each detector.

The attacker picks an injection z_a supported on the meters it can reach
and maximizes the signed sum  sum_{i in K} z_a(i) - sum_{j in L} z_a(j),
where K and L collect the meters whose positive perturbation raises or
lowers the estimated flow on the target line (sign of the sensitivity G).

Against the residual detector the feasible set is the ellipsoid
||W z_a|| <= zeta restricted to the support.  Writing A for the support
columns of W and B = A'A, the maximizer of c'y over y'By <= zeta^2 is

    y* = zeta B^+ c / sqrt(c' B^+ c),      value  zeta sqrt(c' B^+ c),

provided no null direction of B improves the objective; such a direction
is a zero-residual ray, the problem is unbounded and the direction is
returned as a certificate.  A projected-gradient solver over the same
ellipsoid serves as an independent check of the closed form.

Against the learned detector the constraint is score(z0 + z_a) <= 0.5.
The solver walks the residual-optimal direction until the score boundary
(bisection), then optionally polishes with gradient ascent under a log
barrier on the remaining score margin.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .bdd import MlpDetector, mlp_forward, mlp_gradient
from .errors import (
    ConfigError,
    DimensionError,
    InfeasibleBaseline,
    NonconvergenceError,
    UnboundedError,
)
from .grid_model import LineSensitivity

NULLSPACE_RTOL = 1e-10


@dataclass(frozen=True)
class MeterPartition:
    """Meters split by the sign of the line sensitivity."""

    K: tuple[int, ...]  # positive group: pushing these up raises the flow
    L: tuple[int, ...]  # negative group
    neutral: tuple[int, ...]  # |G_i| below tolerance


@dataclass(frozen=True)
class SeBudget:
    zeta: float


@dataclass(frozen=True)
class MlpBoundary:
    z0: np.ndarray  # baseline measurement vector the injection rides on


@dataclass(frozen=True)
class AttackProblem:
    support: tuple[int, ...]  # meter indices the attacker can touch
    c: np.ndarray  # objective signs over all meters (+1 K, -1 L, 0 neutral)
    constraint: object  # SeBudget or MlpBoundary


@dataclass(frozen=True)
class AttackResult:
    z_a: np.ndarray
    objective_value: float
    utility: float | None  # sensitivity-weighted payoff, when G was supplied
    feasible: bool
    detector_margin: float  # zeta - ||W z_a||, or 0.5 - score
    diagnostics: dict = field(default_factory=dict, compare=False)


@dataclass(frozen=True)
class MlpAttackConfig:
    """Knobs for the boundary attack; all have workable defaults.

    model/reference_zeta feed the search direction and the step cap (ten
    times the residual-optimal magnitude at that budget); without them the
    direction falls back to the raw objective signs.
    """

    model: object = None  # EstimatorModel, for the search direction
    reference_zeta: float | None = None
    alpha_max: float | None = None
    score_tol: float = 1e-6
    max_bisect: int = 100
    refine: bool = True
    barrier_rounds: int = 5
    barrier_steps: int = 200
    step_size: float = 1e-2


def classify_meters(sensitivity, eps=None):
    """Partition meters by sensitivity sign; |G_i| <= eps goes to neutral.

    Default eps is 1e-9 of the largest |G| entry.
    """
    G = sensitivity.G if isinstance(sensitivity, LineSensitivity) else np.asarray(sensitivity)
    if eps is None:
        eps = 1e-9 * float(np.max(np.abs(G)))
    if eps < 0:
        raise ConfigError("eps must be nonnegative")
    K = tuple(int(i) for i in np.flatnonzero(G > eps))
    L = tuple(int(i) for i in np.flatnonzero(G < -eps))
    neutral = tuple(int(i) for i in np.flatnonzero(np.abs(G) <= eps))
    return MeterPartition(K=K, L=L, neutral=neutral)


def objective_signs(partition, n_meters):
    """Objective coefficient vector c from a partition."""
    c = np.zeros(n_meters)
    c[list(partition.K)] = 1.0
    c[list(partition.L)] = -1.0
    return c


def make_problem(partition, support, constraint, n_meters):
    return AttackProblem(
        support=tuple(sorted(int(i) for i in set(support))),
        c=objective_signs(partition, n_meters),
        constraint=constraint,
    )


def _support_system(model, problem):
    S = list(problem.support)
    if not S:
        raise ConfigError("attack support is empty")
    if max(S) >= model.n_meters or min(S) < 0:
        raise DimensionError("support indices out of range")
    cS = np.asarray(problem.c, dtype=float)[S]
    A = model.W[:, S]
    B = A.T @ A
    return S, cS, B


def _embed(indices, y, m):
    z = np.zeros(m)
    z[indices] = y
    return z


def _finish(model, problem, z_a, objective, sensitivity, diagnostics):
    _, norm = _residual_of(model, z_a)
    zeta = problem.constraint.zeta
    utility = None
    if sensitivity is not None:
        G = sensitivity.G if isinstance(sensitivity, LineSensitivity) else np.asarray(sensitivity)
        utility = float(G @ z_a)
    return AttackResult(
        z_a=z_a,
        objective_value=float(objective),
        utility=utility,
        feasible=norm <= zeta + 1e-6,
        detector_margin=float(zeta - norm),
        diagnostics=diagnostics,
    )


def _residual_of(model, z_a):
    rho = model.W @ z_a
    return rho, float(np.linalg.norm(rho))


def solve_attack_se(model, problem, sensitivity=None):
    """Closed-form maximizer of c'z_a under ||W z_a|| <= zeta on the support."""
    if not isinstance(problem.constraint, SeBudget):
        raise ConfigError("problem does not carry a residual budget")
    zeta = float(problem.constraint.zeta)
    if zeta < 0:
        raise ConfigError("zeta must be nonnegative")
    S, cS, B = _support_system(model, problem)
    m = model.n_meters

    if not np.any(cS):
        return _finish(model, problem, np.zeros(m), 0.0, sensitivity, {"method": "closed_form"})

    d, V = np.linalg.eigh(B)
    dmax = max(float(d[-1]), 0.0)
    null_cut = NULLSPACE_RTOL * max(dmax, 1.0)
    ct = V.T @ cS
    null = d <= null_cut
    if np.any(null):
        # a zero-residual direction that moves the objective => unbounded ray
        gain = np.abs(ct[null])
        worst = int(np.argmax(gain))
        if gain[worst] > 1e-9 * np.linalg.norm(cS):
            v = V[:, np.flatnonzero(null)[worst]]
            if ct[np.flatnonzero(null)[worst]] < 0:
                v = -v
            raise UnboundedError(
                "support admits a zero-residual ray with positive objective gain",
                direction=_embed(S, v, m),
            )
    inv = np.where(null, 0.0, 1.0 / np.where(null, 1.0, d))
    quad = float(np.sum(ct * ct * inv))  # c' B^+ c
    if quad <= 0:
        return _finish(model, problem, np.zeros(m), 0.0, sensitivity, {"method": "closed_form"})
    y = zeta * (V @ (inv * ct)) / np.sqrt(quad)
    z_a = _embed(S, y, m)
    return _finish(
        model, problem, z_a, zeta * np.sqrt(quad), sensitivity, {"method": "closed_form"}
    )


def _project_ellipsoid(p, d, V, zeta2):
    """Euclidean projection of p onto {y : y' V diag(d) V' y <= zeta2}.

    Zero-eigenvalue directions are unconstrained and pass through. Solves
    the scalar KKT equation sum d_i q_i^2/(1+mu d_i)^2 = zeta2 by bisection.
    """
    q = V.T @ p
    val = float(np.sum(d * q * q))
    if val <= zeta2:
        return p
    lo, hi = 0.0, 1.0
    def g(mu):
        return float(np.sum(d * q * q / (1.0 + mu * d) ** 2))
    while g(hi) > zeta2:
        hi *= 2.0
        if hi > 1e18:
            break
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if g(mid) > zeta2:
            lo = mid
        else:
            hi = mid
    mu = 0.5 * (lo + hi)
    return V @ (q / (1.0 + mu * d))


def solve_attack_se_iterative(
    model, problem, steps=20000, tol=1e-6, sensitivity=None, start=None
):
    """Projected gradient ascent oracle for the residual-budget attack.

    Ascends c'y with exact projection onto the support ellipsoid each step
    and stops when the KKT alignment between the objective and the active
    constraint normal is within `tol`.  Raises after `steps` iterations
    without a certificate.  Expects the restricted quadratic to be positive
    definite (no zero-residual ray inside the support).
    """
    if not isinstance(problem.constraint, SeBudget):
        raise ConfigError("problem does not carry a residual budget")
    zeta = float(problem.constraint.zeta)
    S, cS, B = _support_system(model, problem)
    m = model.n_meters
    diagnostics = {"method": "projected_gradient", "iterations": 0}

    if not np.any(cS) or zeta == 0.0:
        z = np.zeros(m)
        return _finish(model, problem, z, 0.0, sensitivity, diagnostics)

    d, V = np.linalg.eigh(B)
    if d[0] <= NULLSPACE_RTOL * max(float(d[-1]), 1.0):
        raise NonconvergenceError(
            "restricted quadratic is singular; use the closed form to certify unboundedness"
        )
    zeta2 = zeta * zeta
    cnorm = float(np.linalg.norm(cS))
    # longest semi-axis sets the natural step scale
    step0 = (zeta / np.sqrt(float(d[0]))) / cnorm

    y = np.zeros(len(S)) if start is None else np.asarray(start, dtype=float)[S]
    y = _project_ellipsoid(y, d, V, zeta2)
    best_y, best_obj = y.copy(), float(cS @ y)
    converged = False
    for t in range(1, steps + 1):
        y = _project_ellipsoid(y + (step0 / np.sqrt(t)) * cS, d, V, zeta2)
        obj = float(cS @ y)
        if obj > best_obj:
            best_obj, best_y = obj, y.copy()
        quad = float(y @ B @ y)
        if quad >= zeta2 * (1.0 - 1e-9):
            normal = B @ y
            nn = float(np.linalg.norm(normal))
            if nn > 0:
                align = float(cS @ normal) / (cnorm * nn)
                if align >= 1.0 - tol:
                    diagnostics["iterations"] = t
                    converged = True
                    break
    if not converged:
        raise NonconvergenceError(
            f"no stationarity certificate after {steps} projected-gradient steps"
        )
    z_a = _embed(S, best_y, m)
    return _finish(model, problem, z_a, best_obj, sensitivity, diagnostics)


def _se_direction(model, problem):
    """Support direction with unit objective gain, cheapest in residual."""
    S, cS, B = _support_system(model, problem)
    d, V = np.linalg.eigh(B)
    null = d <= NULLSPACE_RTOL * max(float(d[-1]), 1.0)
    ct = V.T @ cS
    inv = np.where(null, 0.0, 1.0 / np.where(null, 1.0, d))
    y = V @ (inv * ct)
    quad = float(cS @ y)  # = c' B^+ c
    if quad <= 0:
        # fall back to the raw signs when c lies in the null space image
        y = cS.copy()
        quad = float(cS @ y)
        if quad <= 0:
            raise ConfigError("objective vanishes on the support")
    return _embed(S, y / quad, model.n_meters), S, cS


def solve_attack_mlp(det, problem, config=None, sensitivity=None):
    """Maximize c'z_a subject to score(z0 + z_a) <= 0.5 on the support.

    Phase 1 bisects along the residual-optimal direction for the largest
    feasible step; if the detector never rejects within the cap the capped
    point is returned with diagnostics["capped"] set.  Phase 2 (optional)
    polishes with projected gradient ascent under a log barrier on the
    score margin and keeps whichever feasible point scores better.
    """
    if not isinstance(problem.constraint, MlpBoundary):
        raise ConfigError("problem does not carry a detector boundary")
    if not isinstance(det, MlpDetector):
        raise ConfigError("solve_attack_mlp needs an MlpDetector")
    config = config or MlpAttackConfig()
    z0 = np.asarray(problem.constraint.z0, dtype=float)
    if z0.shape != (det.input_dim,):
        raise DimensionError(f"baseline has shape {z0.shape}, expected ({det.input_dim},)")

    score0 = mlp_forward(det, z0)
    if score0 > 0.5 + config.score_tol:
        raise InfeasibleBaseline(f"baseline already scores {score0:.4f} > 0.5")

    if config.model is not None:
        d_full, S, cS = _se_direction(config.model, problem)
    else:
        m = det.input_dim
        S = list(problem.support)
        cS = np.asarray(problem.c, dtype=float)[S]
        if not np.any(cS):
            raise ConfigError("objective vanishes on the support")
        d_full = _embed(S, cS / float(cS @ cS), m)
    c_full = np.asarray(problem.c, dtype=float)

    alpha_max = config.alpha_max
    if alpha_max is None:
        if config.model is not None and config.reference_zeta is not None:
            ref = solve_attack_se(
                config.model,
                replace(problem, constraint=SeBudget(config.reference_zeta)),
            )
            alpha_max = 10.0 * max(ref.objective_value, 1e-6)
        else:
            alpha_max = 1e3 * (1.0 + float(np.max(np.abs(z0))))

    def score_at(alpha):
        return mlp_forward(det, z0 + alpha * d_full)

    diagnostics = {"method": "bisection", "alpha_max": float(alpha_max), "capped": False}
    if score_at(alpha_max) <= 0.5:
        # boundary never brackets along this ray; report the budget-capped point
        alpha = alpha_max
        diagnostics["capped"] = True
        diagnostics["bisect_iterations"] = 0
    else:
        lo, hi = 0.0, float(alpha_max)
        it = 0
        for it in range(1, config.max_bisect + 1):
            mid = 0.5 * (lo + hi)
            if score_at(mid) <= 0.5:
                lo = mid
            else:
                hi = mid
            if 0.5 - score_at(lo) <= config.score_tol:
                break
        alpha = lo
        diagnostics["bisect_iterations"] = it
        diagnostics["bracket"] = (lo, hi)
    z_best = alpha * d_full
    obj_best = float(c_full @ z_best)

    if config.refine and not diagnostics["capped"]:
        y = np.asarray(z_best[S]) * 0.95  # start strictly inside the barrier
        cs = cS
        margin0 = 0.5 - mlp_forward(det, z0 + _embed(S, y, len(z0)))
        mu = 0.1 * max(margin0, 1e-8) * max(1.0, abs(obj_best))
        step = config.step_size * (1.0 + float(np.max(np.abs(y)))) / max(
            float(np.linalg.norm(cs)), 1e-12
        )
        for _ in range(config.barrier_rounds):
            for _ in range(config.barrier_steps):
                z_try = z0 + _embed(S, y, len(z0))
                margin = 0.5 - mlp_forward(det, z_try)
                if margin <= 0:
                    break
                g_score = mlp_gradient(det, z_try)[S]
                g = cs + (mu / margin) * (-g_score)
                y_new = y + step * g
                margin_new = 0.5 - mlp_forward(det, z0 + _embed(S, y_new, len(z0)))
                if margin_new <= 0:
                    step *= 0.5
                    continue
                y = y_new
            mu *= 0.1
        z_ref = _embed(S, y, len(z0))
        obj_ref = float(c_full @ z_ref)
        if (
            obj_ref > obj_best
            and mlp_forward(det, z0 + z_ref) <= 0.5 + config.score_tol
        ):
            z_best, obj_best = z_ref, obj_ref
            diagnostics["refined"] = True

    score = mlp_forward(det, z0 + z_best)
    utility = None
    if sensitivity is not None:
        G = sensitivity.G if isinstance(sensitivity, LineSensitivity) else np.asarray(sensitivity)
        utility = float(G @ z_best)
    return AttackResult(
        z_a=z_best,
        objective_value=obj_best,
        utility=utility,
        feasible=score <= 0.5 + config.score_tol,
        detector_margin=float(0.5 - score),
        diagnostics=diagnostics,
    )


def attack_utility(sensitivity, z_a):
    """Shift of the estimated target-line power caused by z_a (MW).

    This is the attacker's payoff; the defender's is its negation.
    """
    G = sensitivity.G if isinstance(sensitivity, LineSensitivity) else np.asarray(sensitivity)
    z_a = np.asarray(z_a, dtype=float)
    if z_a.shape != G.shape:
        raise DimensionError(f"z_a has shape {z_a.shape}, expected {G.shape}")
    return float(G @ z_a)
