"""Tests for storage synthesis, certificates and Lyapunov / D-stability audits."""
import numpy as np
import pytest

from measure_mdp.core.dissimilarity import DissimilarityKind
from measure_mdp.core.dissipativity import (
    CertificateStatus,
    ClassKInftyFn,
    StabilityConfig,
    StorageFunctional,
    SynthesisConfig,
    TrajectoryConfig,
    audit_storage,
    check_d_stability,
    check_lyapunov,
    check_rotated_equivalence,
    eval_storage,
    lyapunov_tolerance,
    fsdsd_residuals,
    rotated_cost,
    rotated_value,
    simulate_measures,
    synthesize_storage,
)
from measure_mdp.core.errors import InputError
from measure_mdp.core.functionals import (
    LinearValueOracle,
    StageCostFunctional,
    discounted_rollout,
    optimal_steady_state,
    relative_mdp,
    solve_optimal_linear,
)
from measure_mdp.core.json_encoder import dumps
from measure_mdp.core.mdp import FiniteMdp, dirac, enumerate_policies, make_measure, random_mdp
from measure_mdp.core.sampling import make_rng, sample_simplex


def _pipeline(mdp, n_samples=100, seed=0, use_quadratic=False):
    functional = StageCostFunctional.linear(mdp)
    steady = optimal_steady_state(mdp, functional)
    shifted = steady.shifted(functional)
    solution = solve_optimal_linear(relative_mdp(mdp, steady.l0))
    value = LinearValueOracle(solution)
    dissim = DissimilarityKind.from_name("tv", mdp.n_states)
    certificate = synthesize_storage(
        mdp,
        shifted,
        value,
        steady.rho_star,
        steady.policy,
        dissim,
        SynthesisConfig(n_samples=n_samples, seed=seed, use_quadratic=use_quadratic),
    )
    return certificate, shifted, value, solution, steady, dissim


def test_eval_storage_normalization():
    storage = StorageFunctional.normalized([1.0, 2.0], None, make_measure([0.5, 0.5]))
    assert storage.normalization == pytest.approx(1.5)
    assert eval_storage(storage, make_measure([1.0, 0.0])) == pytest.approx(-0.5)
    assert eval_storage(storage, make_measure([0.5, 0.5])) == pytest.approx(0.0, abs=1e-12)


def test_zero_storage_leaves_stage_cost_unchanged(dissipative_mdp):
    functional = StageCostFunctional.linear(dissipative_mdp)
    rho = make_measure([0.2, 0.3, 0.5])
    zero = StorageFunctional.zero(3)
    rotated = rotated_cost(functional, zero, dissipative_mdp, rho, (0, 1, 0))
    assert rotated == functional.evaluate(rho, (0, 1, 0))
    assert rotated_value(lambda r: 4.0, zero, rho) == 4.0


def test_class_k_function_validation():
    alpha = ClassKInftyFn(2.0, 2.0)
    assert alpha(0.0) == 0.0
    assert alpha(0.5) == pytest.approx(0.5)
    with pytest.raises(InputError):
        ClassKInftyFn(0.0)
    with pytest.raises(InputError):
        ClassKInftyFn(1.0, 0.5)


def test_dissipative_instance_is_certified(dissipative_mdp):
    certificate, shifted, value, solution, steady, dissim = _pipeline(dissipative_mdp)
    assert certificate.status is CertificateStatus.CERTIFIED
    assert certificate.margin >= -1e-9
    assert certificate.alpha.c >= 1e-6
    assert certificate.storage(steady.rho_star) == pytest.approx(0.0, abs=1e-12)
    residuals = r_at_rho_star(dissipative_mdp, certificate, shifted, value, dissim, steady)
    assert residuals == pytest.approx((0.0, 0.0), abs=1e-9)


def r_at_rho_star(mdp, certificate, shifted, value, dissim, steady):
    return fsdsd_residuals(
        mdp, shifted, certificate.storage, certificate.alpha, value, dissim,
        steady.rho_star, steady.rho_star, steady.policy,
    )


def test_certificate_survives_fresh_large_audit(dissipative_mdp):
    certificate, shifted, value, _, steady, dissim = _pipeline(dissipative_mdp)
    audit = audit_storage(
        dissipative_mdp,
        shifted,
        value,
        dissim,
        steady.rho_star,
        certificate.storage,
        certificate.alpha,
        sample_simplex(3, 10000, make_rng(2024)),
        enumerate_policies(dissipative_mdp),
    )
    assert audit.min_residual >= -1e-9


def test_rotated_cost_lower_bound_on_certified_instance(dissipative_mdp):
    certificate, shifted, _, _, steady, dissim = _pipeline(dissipative_mdp)
    for rho in sample_simplex(3, 500, make_rng(5)):
        for policy in enumerate_policies(dissipative_mdp):
            bound = certificate.alpha(dissim(rho, steady.rho_star))
            assert rotated_cost(shifted, certificate.storage, dissipative_mdp, rho, policy) >= bound - 1e-9


def test_rotated_value_matches_rotated_rollout(dissipative_mdp):
    certificate, shifted, value, solution, _, _ = _pipeline(dissipative_mdp)
    for rho in sample_simplex(3, 10, make_rng(6)):
        rollout = discounted_rollout(
            dissipative_mdp,
            lambda r, p: rotated_cost(shifted, certificate.storage, dissipative_mdp, r, p),
            solution.pi_star,
            rho,
            tol=1e-10,
        )
        assert rollout.value == pytest.approx(rotated_value(value, certificate.storage, rho), abs=1e-7)


def test_quadratic_storage_is_also_certified(dissipative_mdp):
    certificate, _, _, _, steady, _ = _pipeline(dissipative_mdp, n_samples=60, use_quadratic=True)
    assert certificate.certified
    assert certificate.storage(steady.rho_star) == pytest.approx(0.0, abs=1e-12)


def test_certificate_is_deterministic(dissipative_mdp):
    first = _pipeline(dissipative_mdp, n_samples=50, seed=9)[0]
    second = _pipeline(dissipative_mdp, n_samples=50, seed=9)[0]
    assert dumps(first) == dumps(second)


def test_anti_dissipative_instance_is_not_certified(anti_dissipative_mdp):
    certificate, shifted, value, _, steady, dissim = _pipeline(anti_dissipative_mdp)
    assert certificate.status is CertificateStatus.NOT_CERTIFIED
    assert certificate.worst_point is not None
    assert certificate.worst_point.residual < 0.0
    # staying at a vertex costs nothing and never approaches rho*, whatever the storage
    rng = make_rng(8)
    for _ in range(5):
        storage = StorageFunctional.normalized(rng.normal(size=2), None, steady.rho_star)
        _, r_b = fsdsd_residuals(
            anti_dissipative_mdp, shifted, storage, ClassKInftyFn(1e-6), value, dissim,
            steady.rho_star, dirac(0, 2), (0, 0),
        )
        assert r_b < 0.0


def test_residuals_coincide_as_gamma_approaches_one(dissipative_mdp):
    mdp = FiniteMdp(dissipative_mdp.transition, dissipative_mdp.cost_table, 0.999999)
    functional = StageCostFunctional.linear(mdp)
    value = LinearValueOracle(solve_optimal_linear(mdp))
    dissim = DissimilarityKind.from_name("tv", 3)
    rho_star = dirac(0, 3)
    storage = StorageFunctional.normalized([0.3, -0.2, 0.7], None, rho_star)
    alpha = ClassKInftyFn(0.1)
    for rho in sample_simplex(3, 20, make_rng(12)):
        r_a, r_b = fsdsd_residuals(mdp, functional, storage, alpha, value, dissim, rho_star, rho, (0, 1, 1))
        scale = abs(storage(rho)) + abs(value(rho))
        assert abs(r_a - r_b) <= 1e-4 * max(scale, 1.0)


def test_telescoping_identity_for_arbitrary_storage():
    rng = make_rng(21)
    for draw in range(50):
        mdp = random_mdp(3, 2, 0.9, draw % 5)
        functional = StageCostFunctional.linear(mdp)
        m = rng.normal(size=(3, 3))
        storage = StorageFunctional(rng.normal(size=3), m + m.T, rng.normal())
        rho0 = sample_simplex(3, 1, rng)[0]
        policy = tuple(int(a) for a in rng.integers(0, 2, size=3))
        original = discounted_rollout(mdp, functional.evaluate, policy, rho0, 1e-10).value
        rotated = discounted_rollout(
            mdp, lambda r, p: rotated_cost(functional, storage, mdp, r, p), policy, rho0, 1e-10
        ).value
        assert abs(rotated - original - storage(rho0)) <= 1e-7


def test_rotated_equivalence_with_zero_storage(dissipative_mdp):
    _, shifted, value, solution, _, _ = _pipeline(dissipative_mdp, n_samples=20)
    report = check_rotated_equivalence(
        dissipative_mdp, shifted, StorageFunctional.zero(3), value, n_test=5, pi_star=solution.pi_star
    )
    assert report.passed


def test_rotated_equivalence_with_certified_storage(dissipative_mdp):
    certificate, shifted, value, solution, _, _ = _pipeline(dissipative_mdp)
    report = check_rotated_equivalence(
        dissipative_mdp, shifted, certificate.storage, value, n_test=10, pi_star=solution.pi_star
    )
    assert report.passed
    assert report.max_telescoping_gap <= 1e-7


def test_rotated_equivalence_only_needs_bounded_storage(dissipative_mdp):
    certificate, shifted, value, solution, _, _ = _pipeline(dissipative_mdp)
    w = certificate.storage.linear_weights.copy()
    w[0] += 10.0
    corrupted = StorageFunctional(w, certificate.storage.quadratic_weights, certificate.storage.normalization)
    report = check_rotated_equivalence(
        dissipative_mdp, shifted, corrupted, value, n_test=10, pi_star=solution.pi_star
    )
    assert report.passed


def test_lyapunov_descent_on_certified_instance(dissipative_mdp):
    certificate, _, value, solution, steady, dissim = _pipeline(dissipative_mdp)
    report = check_lyapunov(
        dissipative_mdp,
        certificate.storage,
        certificate.alpha,
        value,
        dissim,
        steady.rho_star,
        solution.pi_star,
        TrajectoryConfig(n_trajectories=20, steps=200, seed=3),
    )
    assert report.passed
    assert report.alpha1 is not None
    assert max(report.final_dissimilarities) < 1e-6


def test_trajectory_from_rho_star_is_constant(dissipative_mdp):
    certificate, _, value, solution, steady, dissim = _pipeline(dissipative_mdp, n_samples=20)
    trajectory = simulate_measures(
        dissipative_mdp, solution.pi_star, steady.rho_star, 10, dissim, steady.rho_star, value,
        certificate.storage,
    )
    assert np.allclose(trajectory.dissimilarities, 0.0)
    assert np.allclose(trajectory.lyapunov, 0.0)
    frame = trajectory.to_frame()
    assert list(frame.columns) == ["k", "rho_0", "rho_1", "rho_2", "D", "V_bar"]
    assert len(frame) == 11


def test_d_stability_of_attracting_steady_state(dissipative_mdp):
    solution = solve_optimal_linear(dissipative_mdp)
    report = check_d_stability(
        dissipative_mdp,
        solution.pi_star,
        dirac(0, 3),
        DissimilarityKind.from_name("tv", 3),
        eps_grid=(0.5, 0.1),
        config=StabilityConfig(n_samples=10),
    )
    assert report.stable
    assert report.asymptotically_stable
    assert report.accepted_delta[0.5] == pytest.approx(0.5)


def test_two_cycle_is_stable_but_not_asymptotically(two_cycle_mdp):
    report = check_d_stability(
        two_cycle_mdp,
        (0, 0),
        make_measure([0.5, 0.5]),
        DissimilarityKind.from_name("tv", 2),
        eps_grid=(0.3, 0.05),
        config=StabilityConfig(n_samples=10, steps=50),
    )
    assert report.stable
    assert not report.asymptotically_stable


def test_certified_storage_weights_stay_well_inside_the_bound(dissipative_mdp):
    certificate, *_ = _pipeline(dissipative_mdp)
    config = SynthesisConfig()
    assert certificate.certified
    assert np.abs(certificate.storage.linear_weights).max() < config.weight_bound / 10
    assert certificate.alpha.c <= config.c_max


def test_certified_margin_is_reported_unclamped(dissipative_mdp):
    certificate, *_ = _pipeline(dissipative_mdp)
    assert certificate.certified
    assert certificate.margin <= certificate.worst_point.residual
    assert certificate.to_dict()["margin"] == certificate.margin


def test_lyapunov_tolerance_scales_with_the_trajectory():
    assert lyapunov_tolerance([]) == pytest.approx(1e-9)
    assert lyapunov_tolerance([0.5, -0.2]) == pytest.approx(1e-9)
    assert lyapunov_tolerance([3.0, -2500.0]) == pytest.approx(2.5e-6)


def test_slope_fraction_is_validated():
    with pytest.raises(InputError):
        SynthesisConfig(slope_fraction=0.0)
    with pytest.raises(InputError):
        SynthesisConfig(slope_fraction=1.5)
