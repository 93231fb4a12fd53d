import numpy as np
import pytest

from conftest import two_bus_case_dict

from gridgame.attack import (
    AttackProblem,
    MeterPartition,
    MlpAttackConfig,
    MlpBoundary,
    SeBudget,
    attack_utility,
    classify_meters,
    make_problem,
    solve_attack_mlp,
    solve_attack_se,
    solve_attack_se_iterative,
)
from gridgame.bdd import MlpDetector, MlpLayer, mlp_forward
from gridgame.errors import (
    ConfigError,
    DimensionError,
    InfeasibleBaseline,
    UnboundedError,
)
from gridgame.grid_model import build_estimator, build_jacobian, load_case

CANDIDATES = [0, 3, 4, 9]  # z1, z4, z5, z10


def closed_form_oracle(model, support, c_full, zeta):
    """Independent pseudo-inverse evaluation of the budget attack."""
    S = sorted(support)
    A = np.asarray(model.W)[:, S]
    B = A.T @ A
    c = np.asarray(c_full)[S]
    Bi = np.linalg.pinv(B)
    quad = float(c @ Bi @ c)
    y = zeta * (Bi @ c) / np.sqrt(quad)
    z = np.zeros(model.n_meters)
    z[S] = y
    return z, zeta * np.sqrt(quad)


def flat_detector(dim, score):
    """Constant-score net: zero weights, output bias at logit(score)."""
    bias = float(np.log(score / (1.0 - score)))
    return MlpDetector(
        layers=(
            MlpLayer(np.zeros((2, dim)), np.zeros(2), "sigmoid"),
            MlpLayer(np.zeros((1, 2)), np.array([bias]), "sigmoid"),
        ),
        input_offset=np.zeros(dim),
        input_scale=np.ones(dim),
    )


def ramp_detector(z0, d, crossing, sharpness=30.0):
    """Score crosses 0.5 exactly `crossing` objective units along d from z0."""
    w1 = d[None, :] / float(d @ d)  # reads off the step length alpha
    b1 = np.array([-float(w1[0] @ z0) - crossing])
    return MlpDetector(
        layers=(
            MlpLayer(w1 * sharpness, b1 * sharpness, "sigmoid"),
            MlpLayer(np.array([[4.0]]), np.array([-2.0]), "sigmoid"),
        ),
        input_offset=np.zeros(len(z0)),
        input_scale=np.ones(len(z0)),
    )


class TestClassifyMeters:
    def test_three_way_split(self):
        p = classify_meters(np.array([1.0, -1.0, 0.0]), eps=1e-9)
        assert p.K == (0,) and p.L == (1,) and p.neutral == (2,)

    def test_sign_symmetry(self):
        rng = np.random.default_rng(0)
        G = rng.normal(size=8)
        a, b = classify_meters(G), classify_meters(-G)
        assert a.K == b.L and a.L == b.K and a.neutral == b.neutral

    def test_partition_covers_everything(self, pjm5_partition):
        all_idx = sorted(pjm5_partition.K + pjm5_partition.L + pjm5_partition.neutral)
        assert all_idx == list(range(11))

    def test_candidate_meters_not_neutral(self, pjm5_partition):
        signed = set(pjm5_partition.K) | set(pjm5_partition.L)
        assert set(CANDIDATES) <= signed

    def test_negative_eps_rejected(self):
        with pytest.raises(ConfigError):
            classify_meters(np.ones(3), eps=-1.0)


class TestSolveSe:
    def test_zero_budget_zero_attack(self, pjm5_model, pjm5_partition):
        prob = make_problem(pjm5_partition, [3], SeBudget(0.0), 11)
        res = solve_attack_se(pjm5_model, prob)
        np.testing.assert_array_equal(res.z_a, np.zeros(11))
        assert res.objective_value == 0.0
        assert res.feasible

    def test_budget_homogeneity(self, pjm5_model, pjm5_partition):
        p1 = make_problem(pjm5_partition, CANDIDATES, SeBudget(3.0), 11)
        p2 = make_problem(pjm5_partition, CANDIDATES, SeBudget(6.0), 11)
        r1, r2 = solve_attack_se(pjm5_model, p1), solve_attack_se(pjm5_model, p2)
        np.testing.assert_allclose(r2.z_a, 2.0 * r1.z_a, rtol=1e-9)
        assert r2.objective_value == pytest.approx(2 * r1.objective_value, rel=1e-9)

    def test_matches_pinv_oracle(self, pjm5_model, pjm5_partition):
        rng = np.random.default_rng(1)
        for _ in range(20):
            size = int(rng.integers(1, 3))
            support = list(rng.choice(CANDIDATES, size=size, replace=False))
            zeta = float(rng.uniform(1.0, 12.0))
            prob = make_problem(pjm5_partition, support, SeBudget(zeta), 11)
            res = solve_attack_se(pjm5_model, prob)
            z_star, obj_star = closed_form_oracle(pjm5_model, support, prob.c, zeta)
            assert res.objective_value == pytest.approx(obj_star, rel=1e-9)
            np.testing.assert_allclose(res.z_a, z_star, rtol=1e-8, atol=1e-10)

    def test_stealth_support_unbounded(self, two_bus_file):
        # single meter, single state: W == 0, any injection is invisible
        case, meters = load_case(two_bus_file(two_bus_case_dict()))
        model = build_estimator(build_jacobian(case, meters), np.ones(1))
        prob = AttackProblem(support=(0,), c=np.array([1.0]), constraint=SeBudget(1.0))
        with pytest.raises(UnboundedError) as exc:
            solve_attack_se(model, prob)
        d = exc.value.direction
        assert d is not None
        assert np.linalg.norm(model.W @ d) <= 1e-9
        assert float(prob.c @ d) > 0

    def test_support_discipline(self, pjm5_model, pjm5_partition):
        prob = make_problem(pjm5_partition, [0, 4], SeBudget(5.0), 11)
        res = solve_attack_se(pjm5_model, prob)
        off = [i for i in range(11) if i not in (0, 4)]
        assert np.all(res.z_a[off] == 0.0)

    def test_feasibility_margin(self, pjm5_model, pjm5_partition):
        prob = make_problem(pjm5_partition, CANDIDATES, SeBudget(7.0), 11)
        res = solve_attack_se(pjm5_model, prob)
        assert np.linalg.norm(pjm5_model.W @ res.z_a) <= 7.0 + 1e-6
        assert res.detector_margin >= -1e-6

    def test_monotone_in_budget(self, pjm5_model, pjm5_partition):
        objs = [
            solve_attack_se(
                pjm5_model, make_problem(pjm5_partition, CANDIDATES, SeBudget(z), 11)
            ).objective_value
            for z in np.linspace(0.0, 12.0, 7)
        ]
        assert all(a <= b + 1e-12 for a, b in zip(objs, objs[1:]))

    def test_shrinking_support_never_helps(self, pjm5_model, pjm5_partition):
        full = solve_attack_se(
            pjm5_model, make_problem(pjm5_partition, CANDIDATES, SeBudget(8.0), 11)
        ).objective_value
        for drop in CANDIDATES:
            sub = [i for i in CANDIDATES if i != drop]
            obj = solve_attack_se(
                pjm5_model, make_problem(pjm5_partition, sub, SeBudget(8.0), 11)
            ).objective_value
            assert obj <= full + 1e-9

    def test_empty_support_rejected(self, pjm5_model, pjm5_partition):
        prob = make_problem(pjm5_partition, [], SeBudget(1.0), 11)
        with pytest.raises(ConfigError):
            solve_attack_se(pjm5_model, prob)

    def test_neutral_only_support_gives_zero(self, pjm5_model):
        partition = MeterPartition(K=(), L=(), neutral=tuple(range(11)))
        prob = make_problem(partition, [0, 1], SeBudget(5.0), 11)
        res = solve_attack_se(pjm5_model, prob)
        assert res.objective_value == 0.0


class TestSolveSeIterative:
    def test_agrees_with_closed_form(self, pjm5_model, pjm5_partition):
        rng = np.random.default_rng(2)
        for _ in range(10):
            size = int(rng.integers(1, 3))
            support = list(rng.choice(CANDIDATES, size=size, replace=False))
            zeta = float(rng.uniform(1.0, 12.0))
            prob = make_problem(pjm5_partition, support, SeBudget(zeta), 11)
            closed = solve_attack_se(pjm5_model, prob)
            iterative = solve_attack_se_iterative(pjm5_model, prob)
            rel = abs(closed.objective_value - iterative.objective_value) / closed.objective_value
            assert rel <= 1e-4

    def test_zero_budget_immediate(self, pjm5_model, pjm5_partition):
        prob = make_problem(pjm5_partition, [3], SeBudget(0.0), 11)
        res = solve_attack_se_iterative(pjm5_model, prob)
        assert res.objective_value == 0.0
        assert res.diagnostics["iterations"] == 0

    def test_stationary_at_optimum(self, pjm5_model, pjm5_partition):
        prob = make_problem(pjm5_partition, [3, 9], SeBudget(6.0), 11)
        closed = solve_attack_se(pjm5_model, prob)
        warm = solve_attack_se_iterative(pjm5_model, prob, start=closed.z_a, tol=1e-8)
        # no meaningful improvement over the optimum, certified quickly
        assert warm.objective_value <= closed.objective_value * (1 + 1e-8)
        assert warm.diagnostics["iterations"] <= 2


class TestSolveMlp:
    def test_constant_half_detector_capped(self, pjm5_model, pjm5_partition):
        det = flat_detector(11, 0.5)  # never rejects: boundary cannot bracket
        prob = make_problem(pjm5_partition, CANDIDATES, MlpBoundary(np.zeros(11)), 11)
        cfg = MlpAttackConfig(model=pjm5_model, alpha_max=25.0, refine=False)
        res = solve_attack_mlp(det, prob, config=cfg)
        assert res.diagnostics["capped"]
        assert res.feasible
        assert res.objective_value == pytest.approx(25.0, rel=1e-9)

    def test_boundary_located(self, pjm5_model, pjm5_partition):
        z0 = np.zeros(11)
        prob = make_problem(pjm5_partition, CANDIDATES, MlpBoundary(z0), 11)
        from gridgame.attack import _se_direction

        d, _, _ = _se_direction(pjm5_model, prob)
        det = ramp_detector(z0, d, crossing=7.5)
        cfg = MlpAttackConfig(model=pjm5_model, alpha_max=50.0, refine=False)
        res = solve_attack_mlp(det, prob, config=cfg)
        assert res.objective_value == pytest.approx(7.5, abs=1e-3)
        assert res.feasible

    def test_refinement_never_worse(self, pjm5_model, pjm5_partition):
        z0 = np.zeros(11)
        prob = make_problem(pjm5_partition, CANDIDATES, MlpBoundary(z0), 11)
        rng = np.random.default_rng(3)
        det = MlpDetector(
            layers=(
                MlpLayer(rng.normal(scale=0.15, size=(6, 11)), rng.normal(scale=0.1, size=6), "sigmoid"),
                MlpLayer(rng.normal(scale=0.5, size=(1, 6)), np.array([-0.4]), "sigmoid"),
            ),
            input_offset=np.zeros(11),
            input_scale=np.ones(11),
        )
        if mlp_forward(det, z0) > 0.5:
            pytest.skip("random baseline infeasible for this seed")
        cfg_plain = MlpAttackConfig(model=pjm5_model, alpha_max=100.0, refine=False)
        cfg_refined = MlpAttackConfig(model=pjm5_model, alpha_max=100.0, refine=True)
        plain = solve_attack_mlp(det, prob, config=cfg_plain)
        refined = solve_attack_mlp(det, prob, config=cfg_refined)
        assert refined.objective_value >= plain.objective_value - 1e-12
        assert refined.feasible

    def test_infeasible_baseline(self, pjm5_partition):
        det = flat_detector(11, 0.7)
        prob = make_problem(pjm5_partition, CANDIDATES, MlpBoundary(np.zeros(11)), 11)
        with pytest.raises(InfeasibleBaseline):
            solve_attack_mlp(det, prob, config=MlpAttackConfig(alpha_max=5.0))

    def test_support_discipline(self, pjm5_model, pjm5_partition):
        z0 = np.zeros(11)
        prob = make_problem(pjm5_partition, [3, 4], MlpBoundary(z0), 11)
        from gridgame.attack import _se_direction

        d, _, _ = _se_direction(pjm5_model, prob)
        det = ramp_detector(z0, d, crossing=3.0)
        res = solve_attack_mlp(
            det, prob, config=MlpAttackConfig(model=pjm5_model, alpha_max=30.0)
        )
        off = [i for i in range(11) if i not in (3, 4)]
        assert np.all(res.z_a[off] == 0.0)
        assert mlp_forward(det, z0 + res.z_a) <= 0.5 + 1e-6


class TestAttackUtility:
    def test_zero(self, pjm5_sensitivity):
        assert attack_utility(pjm5_sensitivity, np.zeros(11)) == 0.0

    def test_linearity(self, pjm5_sensitivity):
        rng = np.random.default_rng(4)
        z = rng.normal(size=11)
        assert attack_utility(pjm5_sensitivity, 2 * z) == pytest.approx(
            2 * attack_utility(pjm5_sensitivity, z), rel=1e-12
        )

    def test_matches_oracle_on_pair_attack(self, pjm5_model, pjm5_partition, pjm5_sensitivity):
        # defended {z1, z4}, attacked {z5, z10}: effective support {z5, z10}
        prob = make_problem(pjm5_partition, [4, 9], SeBudget(9.48), 11)
        res = solve_attack_se(pjm5_model, prob, sensitivity=pjm5_sensitivity)
        z_star, _ = closed_form_oracle(pjm5_model, [4, 9], prob.c, 9.48)
        assert res.utility == pytest.approx(float(pjm5_sensitivity.G @ z_star), rel=1e-9)
        assert res.utility == pytest.approx(attack_utility(pjm5_sensitivity, res.z_a))

    def test_dimension_checked(self, pjm5_sensitivity):
        with pytest.raises(DimensionError):
            attack_utility(pjm5_sensitivity, np.zeros(5))
