"""Tests for fitted Q-iteration and the theta lift of learned action values."""
import json
import logging

import numpy as np
import pytest
from numpy.testing import assert_allclose

from measure_mdp.core.dissimilarity import DissimilarityKind
from measure_mdp.core.dissipativity import ClassKInftyFn
from measure_mdp.core.errors import InputError, LearningFailure
from measure_mdp.core.functionals import (
    LinearValueOracle,
    StageCostFunctional,
    optimal_steady_state,
    relative_mdp,
    solve_optimal_linear,
)
from measure_mdp.core.learning import (
    LearningConfig,
    QParameterization,
    TransitionBatch,
    collection_schedule,
    expected_q_iteration,
    fitted_q_learning,
    greedy_policy,
    q_eval,
    theta_from_learned,
)
from measure_mdp.core.mdp import FiniteMdp, dirac, enumerate_policies
from measure_mdp.core.ocp import q_theta

from .conftest import load_mdp, problem_path


def _bundled_config(**overrides) -> LearningConfig:
    with open(problem_path("learning"), "r", encoding="utf-8") as f:
        data = json.load(f)
    data.update(overrides)
    return LearningConfig.from_dict(data)


def test_q_eval_on_both_parameterizations():
    table = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert q_eval(QParameterization.tabular(table), 1, 0) == 3.0
    linear = QParameterization.linear(np.ones((2, 2, 1)), np.array([5.0]))
    assert q_eval(linear, 0, 1) == 5.0
    with pytest.raises(InputError):
        q_eval(linear, 2, 0)


def test_one_hot_features_equal_the_table():
    table = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    one_hot = QParameterization.one_hot(3, 2).with_weights(table.reshape(-1))
    assert_allclose(one_hot.table(), table)
    for s in range(3):
        for a in range(2):
            assert q_eval(one_hot, s, a) == table[s, a]


def test_parameterization_shape_checks():
    with pytest.raises(InputError):
        QParameterization("tabular", np.zeros(5), 3, 2)
    with pytest.raises(InputError):
        QParameterization("linear_features", np.zeros(2), 3, 2)
    with pytest.raises(InputError):
        QParameterization.linear(np.ones((3, 2, 2)), np.zeros(3))


def test_greedy_policy_breaks_ties_low(three_state_mdp):
    assert greedy_policy(QParameterization.tabular([[1.0, 1.0], [2.0, 0.0]])) == (0, 1)
    q_star = solve_optimal_linear(three_state_mdp).q_star
    assert greedy_policy(QParameterization.tabular(q_star)) == (0, 1, 1)
    perturbed = q_star + 1e-9 * np.arange(6).reshape(3, 2)
    assert greedy_policy(QParameterization.tabular(perturbed)) == (0, 1, 1)


def test_transition_batch_counts():
    batch = TransitionBatch.from_transitions([(0, 1, 0.5, 0), (0, 1, 0.5, 0), (2, 0, 2.0, 2)])
    assert batch.size == 3
    counts = batch.visit_counts(3, 2)
    assert counts[0, 1] == 2
    assert counts[2, 0] == 1
    assert counts.sum() == 3


def test_fitted_q_converges_on_three_state(three_state_mdp):
    steady = optimal_steady_state(three_state_mdp, StageCostFunctional.linear(three_state_mdp))
    mdp = relative_mdp(three_state_mdp, steady.l0)
    q_star = solve_optimal_linear(mdp).q_star
    result = fitted_q_learning(mdp, QParameterization.zeros(mdp), _bundled_config(), q_star)
    assert result.final_error < 1e-3
    assert result.unvisited == []
    assert greedy_policy(result.param) == (0, 1, 1)
    frame = result.history_frame()
    assert list(frame.columns) == ["iteration", "sup_error", "ls_residual", "change"]


def test_fitted_q_is_deterministic(three_state_mdp):
    config = _bundled_config(n_episodes=200, n_iterations=50)
    first = fitted_q_learning(three_state_mdp, QParameterization.zeros(three_state_mdp), config)
    second = fitted_q_learning(three_state_mdp, QParameterization.zeros(three_state_mdp), config)
    assert np.array_equal(first.param.weights, second.param.weights)
    assert first.history == second.history


def test_single_state_learns_geometric_series():
    mdp = load_mdp("single_state")
    config = LearningConfig(n_episodes=5, episode_length=5, n_iterations=300)
    result = fitted_q_learning(mdp, QParameterization.zeros(mdp), config, np.array([[10.0]]))
    assert q_eval(result.param, 0, 0) == pytest.approx(10.0, abs=1e-6)


def test_one_hot_features_follow_the_tabular_trajectory(three_state_mdp):
    config = _bundled_config(n_episodes=100, n_iterations=40)
    tabular = fitted_q_learning(three_state_mdp, QParameterization.zeros(three_state_mdp), config)
    one_hot = fitted_q_learning(three_state_mdp, QParameterization.one_hot(3, 2), config)
    assert_allclose(one_hot.param.table(), tabular.param.table(), atol=1e-10)
    for a, b in zip(tabular.history, one_hot.history):
        assert a["change"] == pytest.approx(b["change"], abs=1e-10)


def test_expected_iteration_contracts(random_mdps):
    for mdp in random_mdps[:10]:
        q_star = solve_optimal_linear(mdp).q_star
        tables = expected_q_iteration(mdp, QParameterization.zeros(mdp), 30)
        initial = np.abs(tables[0] - q_star).max()
        for k, table in enumerate(tables):
            assert np.abs(table - q_star).max() <= mdp.gamma**k * initial + 1e-9


def test_unvisited_pairs_are_reported(three_state_mdp, caplog):
    config = LearningConfig(
        n_episodes=3,
        episode_length=5,
        n_iterations=5,
        epsilon=0.0,
        epsilon_min=0.0,
        start_states=[2],
        collection_rounds=1,
    )
    with caplog.at_level(logging.WARNING):
        result = fitted_q_learning(three_state_mdp, QParameterization.zeros(three_state_mdp), config)
    assert (2, 0) not in result.unvisited
    assert (0, 0) in result.unvisited
    assert len(result.unvisited) == 5
    assert "unvisited" in caplog.text


def test_config_validation(three_state_mdp):
    with pytest.raises(InputError):
        LearningConfig.from_dict({"n_episodes": 10, "momentum": 0.9})
    with pytest.raises(InputError):
        LearningConfig.from_dict({"epsilon": 1.5})
    with pytest.raises(InputError):
        LearningConfig.from_dict({"step_decay": 0.0})
    with pytest.raises(InputError):
        LearningConfig(start_states=[5]).validate(three_state_mdp)
    assert LearningConfig.from_dict({}).to_dict() == LearningConfig().to_dict()


def test_off_policy_linear_features_diverge():
    mdp = FiniteMdp([[[0.0, 1.0]], [[0.0, 1.0]]], [[0.0], [0.0]], 0.9)
    param0 = QParameterization.linear(np.array([[[1.0]], [[2.0]]]), np.array([1.0]))
    config = LearningConfig(n_episodes=1, episode_length=1, n_iterations=100, start_states=[0])
    with pytest.raises(LearningFailure) as info:
        fitted_q_learning(mdp, param0, config, np.zeros((2, 1)))
    history = info.value.history
    assert len(history) < 100
    assert history[-1]["sup_error"] >= 10 * history[0]["sup_error"]


def _lift_setup(mdp):
    functional = StageCostFunctional.linear(mdp)
    steady = optimal_steady_state(mdp, functional)
    solution = solve_optimal_linear(relative_mdp(mdp, steady.l0))
    dissim = DissimilarityKind.from_name("tv", mdp.n_states)
    return steady.shifted(functional), solution, steady, dissim


def test_lift_accepts_exact_action_values(dissipative_mdp):
    shifted, solution, steady, dissim = _lift_setup(dissipative_mdp)
    learned = QParameterization.tabular(solution.q_star)
    alpha0 = ClassKInftyFn(1e-6)
    candidate = theta_from_learned(dissipative_mdp, shifted, learned, steady.rho_star, dissim, alpha0)
    assert candidate.accepted, candidate.message
    assert candidate.bellman_residual <= 1e-6
    assert candidate.stage_margin >= -1e-6
    for s in range(3):
        for policy in enumerate_policies(dissipative_mdp):
            q = q_theta(dissipative_mdp, candidate.theta, dirac(s, 3), policy)
            assert q == pytest.approx(solution.q_star[s, policy[s]], abs=1e-6)
    oracle = LinearValueOracle(solution)
    for s in range(3):
        assert q_theta(dissipative_mdp, candidate.theta, dirac(s, 3), solution.pi_star) == pytest.approx(
            oracle(dirac(s, 3)), abs=1e-6
        )


def test_lift_rejects_inconsistent_values(dissipative_mdp):
    shifted, _, steady, dissim = _lift_setup(dissipative_mdp)
    candidate = theta_from_learned(
        dissipative_mdp,
        shifted,
        QParameterization.zeros(dissipative_mdp),
        steady.rho_star,
        dissim,
        ClassKInftyFn(1e-6),
    )
    assert not candidate.accepted
    assert "Bellman" in candidate.message


def test_collection_schedule_splits_episodes_into_rounds():
    schedule = collection_schedule(LearningConfig(n_episodes=10, n_iterations=100, collection_rounds=4))
    assert list(schedule) == [1, 26, 51, 76]
    assert [list(episodes) for episodes in schedule.values()] == [
        [0, 1],
        [2, 3, 4],
        [5, 6],
        [7, 8, 9],
    ]
    assert list(collection_schedule(LearningConfig(n_episodes=2, collection_rounds=4))) == [1, 151]
    with pytest.raises(InputError):
        LearningConfig(collection_rounds=0).validate()


def test_later_rounds_follow_the_learned_greedy_policy(three_state_mdp):
    base = dict(
        n_episodes=2, episode_length=5, n_iterations=20, epsilon=0.0, epsilon_min=0.0, start_states=[2]
    )
    frozen = fitted_q_learning(
        three_state_mdp, QParameterization.zeros(three_state_mdp), LearningConfig(**base, collection_rounds=1)
    )
    assert frozen.unvisited == [(0, 0), (0, 1), (1, 0), (1, 1), (2, 1)]

    refreshed = fitted_q_learning(
        three_state_mdp, QParameterization.zeros(three_state_mdp), LearningConfig(**base, collection_rounds=2)
    )
    # the second round leaves state 2 once q(2, 0) has grown above the unvisited q(2, 1) = 0
    assert refreshed.n_transitions == 10
    assert refreshed.unvisited == [(0, 0), (0, 1), (1, 1)]
