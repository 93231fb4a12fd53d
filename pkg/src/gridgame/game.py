"""Zero-sum meter-protection game: payoff matrix, saddle points, mixed play.

Rows of the payoff matrix are defended meter sets, columns attacked meter
sets, entries the attacker's payoff (MW shift of the estimated target-line
flow under the optimal stealth injection on the undefended part of the
attacked set).  A saddle point exists iff min over rows of the row maximum
equals max over columns of the column minimum.

Mixed strategies come from the classical linear programs

    defender:  max 1'q~  s.t.  S'q~ <= 1,  q~ >= 0
    attacker:  min 1'u~  s.t.  S u~ >= 1,  u~ >= 0

whose optima normalize to probability vectors with value 1/sum(q~).  The
reformulation needs a positive game value, so the matrix is shifted by
k = 1 + |min S| before solving and the value shifted back afterwards; the
strategies are shift-invariant.

The LP solver is a dense-tableau two-phase primal simplex with Bland's
anti-cycling rule; problems here have at most a dozen variables.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .attack import MlpBoundary, SeBudget, attack_utility, make_problem, solve_attack_mlp, solve_attack_se
from .errors import (
    DegenerateGameError,
    DimensionError,
    GridGameError,
    MissingThresholdError,
    NumericalError,
    ParseError,
)

PIVOT_MIN = 1e-11
REDCOST_TOL = 1e-9
FEAS_TOL = 1e-8


@dataclass(frozen=True)
class GameMatrix:
    row_labels: tuple[str, ...]  # defended meter sets
    col_labels: tuple[str, ...]  # attacked meter sets
    S: np.ndarray  # attacker payoff, MW

    def __post_init__(self):
        if self.S.shape != (len(self.row_labels), len(self.col_labels)):
            raise DimensionError("payoff shape does not match labels")
        if not np.all(np.isfinite(self.S)):
            raise DimensionError("payoff entries must be finite")


@dataclass(frozen=True)
class PureStrategy:
    row: int
    col: int
    value: float


@dataclass(frozen=True)
class MixedStrategy:
    side: str  # "defender" or "attacker"
    probabilities: np.ndarray
    game_value: float
    scaled: np.ndarray  # the raw LP solution (pre-normalization)
    scale: float  # 1/sum(scaled): the shifted game value
    shift: float  # positivity shift applied to the matrix


@dataclass(frozen=True)
class LpProblem:
    """min/max c'x subject to rows (a, rel, b) with rel in <=, >=, =; x >= 0."""

    c: np.ndarray
    A: np.ndarray
    relations: tuple[str, ...]
    b: np.ndarray
    sense: str = "max"


@dataclass(frozen=True)
class LpSolution:
    status: str  # "optimal" | "unbounded" | "infeasible"
    x: np.ndarray | None
    objective: float | None
    certificate: np.ndarray | None = None  # improving ray when unbounded
    iterations: int = 0


def _pivot(T, basis, row, col):
    piv = T[row, col]
    if abs(piv) < PIVOT_MIN:
        raise NumericalError(f"pivot magnitude {abs(piv):.2e} below 1e-11")
    T[row] /= piv
    for r in range(T.shape[0]):
        if r != row and T[r, col] != 0.0:
            T[r] -= T[r, col] * T[row]
    basis[row] = col


def _simplex(T, basis, n_real, iterations=0, max_iter=100000):
    """Minimize the cost row of tableau T in place; Bland's rule.

    T layout: m constraint rows [A | b], final row = reduced costs with the
    negated objective value in the last cell.  Returns (status, iterations,
    entering_col_for_ray).
    """
    m = T.shape[0] - 1
    while True:
        # Bland: first column with a negative reduced cost
        col = -1
        for j in range(T.shape[1] - 1):
            if T[-1, j] < -REDCOST_TOL:
                col = j
                break
        if col < 0:
            return "optimal", iterations, -1
        ratios = []
        for r in range(m):
            if T[r, col] > PIVOT_MIN:
                ratios.append((T[r, -1] / T[r, col], basis[r], r))
        if not ratios:
            return "unbounded", iterations, col
        # smallest ratio, ties by smallest basic variable index (Bland)
        _, _, row = min(ratios, key=lambda t: (t[0], t[1]))
        _pivot(T, basis, row, col)
        iterations += 1
        if iterations > max_iter:
            raise NumericalError("simplex iteration limit exceeded")


def solve_lp(problem):
    """Two-phase dense-tableau primal simplex over nonnegative variables."""
    c = np.asarray(problem.c, dtype=float)
    A = np.atleast_2d(np.asarray(problem.A, dtype=float))
    b = np.asarray(problem.b, dtype=float)
    rels = tuple(problem.relations)
    m, n = A.shape
    if c.shape != (n,) or b.shape != (m,) or len(rels) != m:
        raise DimensionError("LP dimensions disagree")
    if not all(r in ("<=", ">=", "=") for r in rels):
        raise ParseError(f"bad relation in {rels}")
    if not (np.all(np.isfinite(c)) and np.all(np.isfinite(A)) and np.all(np.isfinite(b))):
        raise DimensionError("LP coefficients must be finite")

    minimize = problem.sense == "min"
    obj = c if minimize else -c

    # standard form: flip negative-rhs rows, add slacks/surplus, artificials
    A = A.copy()
    b = b.copy()
    rels = list(rels)
    for i in range(m):
        if b[i] < 0:
            A[i] *= -1.0
            b[i] *= -1.0
            rels[i] = {"<=": ">=", ">=": "<=", "=": "="}[rels[i]]
    n_slack = sum(1 for r in rels if r in ("<=", ">="))
    art_rows = [i for i, r in enumerate(rels) if r in (">=", "=")]
    n_art = len(art_rows)
    total = n + n_slack + n_art
    M = np.zeros((m, total))
    M[:, :n] = A
    sj = n
    slack_col = {}
    for i, r in enumerate(rels):
        if r == "<=":
            M[i, sj] = 1.0
            slack_col[i] = sj
            sj += 1
        elif r == ">=":
            M[i, sj] = -1.0
            slack_col[i] = sj
            sj += 1
    art_col = {}
    for i in art_rows:
        M[i, sj] = 1.0
        art_col[i] = sj
        sj += 1

    basis = [0] * m
    for i, r in enumerate(rels):
        basis[i] = art_col[i] if i in art_rows else slack_col[i]

    iterations = 0
    if n_art:
        T = np.zeros((m + 1, total + 1))
        T[:m, :total] = M
        T[:m, -1] = b
        cost1 = np.zeros(total)
        cost1[n + n_slack :] = 1.0
        T[-1, :total] = cost1
        for i in art_rows:  # price out the artificial basis
            T[-1] -= T[i]
        status, iterations, _ = _simplex(T, basis, n)
        if status != "optimal":
            raise NumericalError("phase-1 simplex failed to terminate at an optimum")
        if T[-1, -1] < -FEAS_TOL:
            return LpSolution(status="infeasible", x=None, objective=None, iterations=iterations)
        # drive remaining artificials out of the basis
        for r in range(m):
            if basis[r] >= n + n_slack:
                for j in range(n + n_slack):
                    if abs(T[r, j]) > PIVOT_MIN:
                        _pivot(T, basis, r, j)
                        iterations += 1
                        break
        keep = list(range(n + n_slack)) + [total]
        T = T[:, keep][:m]
        drop = [r for r in range(m) if basis[r] >= n + n_slack]
        if drop:  # redundant rows left with a zero artificial
            T = np.delete(T, drop, axis=0)
            basis = [bv for r, bv in enumerate(basis) if r not in drop]
            m = T.shape[0]
        M = T[:, :-1]
        b = T[:, -1].copy()
        total = n + n_slack

    T = np.zeros((m + 1, total + 1))
    T[:m, :total] = M[:, :total]
    T[:m, -1] = b
    T[-1, :n] = obj
    for r in range(m):  # price out the starting basis
        if T[-1, basis[r]] != 0.0:
            T[-1] -= T[-1, basis[r]] * T[r]
    status, iterations, ray_col = _simplex(T, basis, n, iterations)
    if status == "unbounded":
        ray = np.zeros(total)
        ray[ray_col] = 1.0
        for r in range(m):
            ray[basis[r]] = -T[r, ray_col]
        return LpSolution(
            status="unbounded", x=None, objective=None,
            certificate=ray[:n], iterations=iterations,
        )
    x = np.zeros(total)
    for r in range(m):
        x[basis[r]] = T[r, -1]
    value = float(-T[-1, -1])
    return LpSolution(
        status="optimal",
        x=x[:n],
        objective=value if minimize else -value,
        iterations=iterations,
    )


def _as_matrix(S):
    if isinstance(S, GameMatrix):
        return S.S
    return np.atleast_2d(np.asarray(S, dtype=float))


def find_pure_strategy(S):
    """Saddle cell when min(row max) == max(col min); ties to lowest index."""
    A = _as_matrix(S)
    row_max = A.max(axis=1)
    col_min = A.min(axis=0)
    minimax = float(row_max.min())
    maximin = float(col_min.max())
    if abs(minimax - maximin) > 1e-12:
        return None
    i = int(np.argmin(row_max))
    j = int(np.argmax(col_min))
    return PureStrategy(row=i, col=j, value=minimax)


def minimax_values(S):
    """(min of row maxima, max of column minima)."""
    A = _as_matrix(S)
    return float(A.max(axis=1).min()), float(A.min(axis=0).max())


def _positive_shift(A):
    return 1.0 + abs(float(A.min()))


def defender_mixed_strategy(S):
    """Defender's optimal mixture and the game value."""
    A = _as_matrix(S)
    r, ccount = A.shape
    k = _positive_shift(A)
    Ap = A + k
    sol = solve_lp(
        LpProblem(
            c=np.ones(r),
            A=Ap.T,
            relations=("<=",) * ccount,
            b=np.ones(ccount),
            sense="max",
        )
    )
    if sol.status != "optimal":
        raise DegenerateGameError(f"defender LP ended {sol.status}")
    qt = np.maximum(sol.x, 0.0)
    total = float(qt.sum())
    if total <= 1e-12:
        raise DegenerateGameError("defender LP solution sums to zero")
    q = qt / total
    value = 1.0 / total - k
    worst = float((q @ A).max())
    if worst - value > 1e-8:
        raise NumericalError(f"defender guarantee violated by {worst - value:.2e}")
    return MixedStrategy(
        side="defender", probabilities=q, game_value=value,
        scaled=qt, scale=1.0 / total, shift=k,
    )


def attacker_mixed_strategy(S):
    """Attacker's optimal mixture; dual construction of the defender's LP."""
    A = _as_matrix(S)
    r, ccount = A.shape
    k = _positive_shift(A)
    Ap = A + k
    sol = solve_lp(
        LpProblem(
            c=np.ones(ccount),
            A=Ap,
            relations=(">=",) * r,
            b=np.ones(r),
            sense="min",
        )
    )
    if sol.status != "optimal":
        raise DegenerateGameError(f"attacker LP ended {sol.status}")
    ut = np.maximum(sol.x, 0.0)
    total = float(ut.sum())
    if total <= 1e-12:
        raise DegenerateGameError("attacker LP solution sums to zero")
    u = ut / total
    value = 1.0 / total - k
    worst = float((A @ u).min())
    if value - worst > 1e-8:
        raise NumericalError(f"attacker guarantee violated by {value - worst:.2e}")
    return MixedStrategy(
        side="attacker", probabilities=u, game_value=value,
        scaled=ut, scale=1.0 / total, shift=k,
    )


@dataclass(frozen=True)
class GameValueCheck:
    v_def: float  # best response value against q
    v_att: float  # best response value against u
    duality_gap: float
    expected_payoff: float  # q' S u


def game_value_check(S, q, u):
    A = _as_matrix(S)
    q = np.asarray(q, dtype=float)
    u = np.asarray(u, dtype=float)
    v_def = float((q @ A).max())
    v_att = float((A @ u).min())
    return GameValueCheck(
        v_def=v_def,
        v_att=v_att,
        duality_gap=v_def - v_att,
        expected_payoff=float(q @ A @ u),
    )


@dataclass(frozen=True)
class GameEngine:
    """Everything a payoff cell needs: estimator, sensitivity, detector."""

    model: object  # EstimatorModel
    meters: object  # MeterSet
    sensitivity: object  # LineSensitivity
    partition: object  # MeterPartition
    detector: str  # "se" or "mlp"
    thresholds: dict | None = None  # frozenset of labels -> zeta (se only)
    mlp: object = None  # MlpDetector (mlp only)
    z0: np.ndarray | None = None  # baseline vector (mlp only)
    mlp_config: object = None  # MlpAttackConfig


def support_key(labels):
    """Canonical name of a meter set: labels joined in numeric order."""
    return "".join(sorted(labels, key=lambda s: (len(s), s)))


def build_game_matrix(engine, defenses, attacks):
    """Payoff over (defense set, attack set) pairs.

    The attack solver runs on the effective support attack - defense; an
    empty effective support pays zero.  Residual-detector cells read their
    budget from engine.thresholds keyed by the effective support.
    """
    meters = engine.meters
    n = len(meters)
    row_sets = [frozenset(d) for d in defenses]
    col_sets = [frozenset(a) for a in attacks]
    S = np.zeros((len(row_sets), len(col_sets)))
    for i, dset in enumerate(row_sets):
        for j, aset in enumerate(col_sets):
            eff = aset - dset
            if not eff:
                continue
            try:
                if engine.detector == "se":
                    if engine.thresholds is None or frozenset(eff) not in engine.thresholds:
                        raise MissingThresholdError(
                            f"no budget for compromised set {support_key(eff)}"
                        )
                    problem = make_problem(
                        engine.partition,
                        [meters.index_of(l) for l in eff],
                        SeBudget(engine.thresholds[frozenset(eff)]),
                        n,
                    )
                    res = solve_attack_se(engine.model, problem, sensitivity=engine.sensitivity)
                elif engine.detector == "mlp":
                    problem = make_problem(
                        engine.partition,
                        [meters.index_of(l) for l in eff],
                        MlpBoundary(engine.z0),
                        n,
                    )
                    res = solve_attack_mlp(
                        engine.mlp, problem, config=engine.mlp_config,
                        sensitivity=engine.sensitivity,
                    )
                else:
                    raise ParseError(f"unknown detector kind {engine.detector!r}")
            except GridGameError as e:
                e.args = (
                    f"cell ({i},{j}) defense={support_key(dset)} "
                    f"attack={support_key(aset)}: {e}",
                )
                raise
            S[i, j] = res.utility if res.utility is not None else attack_utility(
                engine.sensitivity, res.z_a
            )
    return GameMatrix(
        row_labels=tuple(support_key(d) for d in defenses),
        col_labels=tuple(support_key(a) for a in attacks),
        S=S,
    )


def game_matrix_to_csv(gm):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([r"def\att", *gm.col_labels])
    for label, row in zip(gm.row_labels, gm.S):
        w.writerow([label, *[f"{v:.10g}" for v in row]])
    return buf.getvalue()


def game_matrix_from_csv(text):
    try:
        rows = list(csv.reader(io.StringIO(text)))
        header = rows[0][1:]
        labels, data = [], []
        for row in rows[1:]:
            if not row:
                continue
            labels.append(row[0])
            data.append([float(v) for v in row[1:]])
        S = np.array(data, dtype=float)
        if S.ndim != 2 or S.shape != (len(labels), len(header)):
            raise ValueError("ragged matrix")
        return GameMatrix(row_labels=tuple(labels), col_labels=tuple(header), S=S)
    except (IndexError, ValueError) as e:
        raise ParseError(f"bad game matrix CSV: {e}")
