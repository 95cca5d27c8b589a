"""Least-squares fitted Q-iteration and the lift of learned q back to theta parameters."""
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .dissimilarity import DissimilarityKind
from .dissipativity import ClassKInftyFn, StorageFunctional
from .errors import InputError, LearningFailure
from .functionals import StageCostFunctional, first_minimizer
from .mdp import FiniteMdp, Measure, Policy, enumerate_policies, sample_trajectory
from .ocp import ThetaParameters, audit_measures, fit_storage_weights, q_theta
from .sampling import spawn_rngs

logger = logging.getLogger(__name__)

DIVERGENCE_FACTOR = 10.0
DIVERGENCE_PATIENCE = 5


class QKind(str, Enum):
    TABULAR = "tabular"
    LINEAR_FEATURES = "linear_features"


@dataclass(frozen=True, eq=False)
class QParameterization:
    """q(s, a) as a table or as features(s, a) . weights."""

    kind: QKind
    weights: np.ndarray
    n_states: int
    n_actions: int
    features: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", QKind(self.kind))
        weights = np.asarray(self.weights, dtype=float)
        if self.kind is QKind.TABULAR:
            weights = weights.reshape(-1)
            if weights.size != self.n_states * self.n_actions:
                raise InputError(
                    f"tabular weights need {self.n_states}x{self.n_actions} entries, got {weights.size}"
                )
        else:
            if self.features is None:
                raise InputError("linear_features parameterization needs a feature tensor")
            features = np.asarray(self.features, dtype=float)
            if features.shape[:2] != (self.n_states, self.n_actions) or features.ndim != 3:
                raise InputError(f"feature tensor must be (n_states, n_actions, d), got {features.shape}")
            if weights.shape != (features.shape[2],):
                raise InputError(f"weights length {weights.size} != feature dimension {features.shape[2]}")
            object.__setattr__(self, "features", features)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def tabular(cls, table: np.ndarray) -> "QParameterization":
        table = np.asarray(table, dtype=float)
        return cls(QKind.TABULAR, table.reshape(-1), table.shape[0], table.shape[1])

    @classmethod
    def zeros(cls, mdp: FiniteMdp) -> "QParameterization":
        return cls.tabular(np.zeros((mdp.n_states, mdp.n_actions)))

    @classmethod
    def linear(cls, features: np.ndarray, weights: Optional[np.ndarray] = None) -> "QParameterization":
        features = np.asarray(features, dtype=float)
        n, m, d = features.shape
        return cls(QKind.LINEAR_FEATURES, np.zeros(d) if weights is None else weights, n, m, features)

    @classmethod
    def one_hot(cls, n_states: int, n_actions: int) -> "QParameterization":
        eye = np.eye(n_states * n_actions).reshape(n_states, n_actions, -1)
        return cls.linear(eye)

    def design(self) -> np.ndarray:
        """Feature tensor (n, m, d); one-hot for the tabular kind."""
        if self.kind is QKind.TABULAR:
            return np.eye(self.n_states * self.n_actions).reshape(self.n_states, self.n_actions, -1)
        return self.features

    def with_weights(self, weights: np.ndarray) -> "QParameterization":
        return QParameterization(self.kind, weights, self.n_states, self.n_actions, self.features)

    def table(self) -> np.ndarray:
        return self.design() @ self.weights

    def to_dict(self) -> Dict[str, Any]:
        payload: Dict[str, Any] = {"kind": self.kind, "weights": self.weights, "q_table": self.table()}
        if self.features is not None:
            payload["features"] = self.features
        return payload


def q_eval(param: QParameterization, s: int, a: int) -> float:
    if not (0 <= s < param.n_states and 0 <= a < param.n_actions):
        raise InputError(f"(s, a) = ({s}, {a}) out of range for {param.n_states}x{param.n_actions}")
    if param.kind is QKind.TABULAR:
        return float(param.weights[s * param.n_actions + a])
    return float(param.features[s, a] @ param.weights)


def greedy_policy(param: QParameterization) -> Policy:
    """argmin_a q(s, a), lowest action index on ties."""
    return tuple(first_minimizer(row) for row in param.table())


@dataclass
class LearningConfig:
    n_episodes: int = 2000
    episode_length: int = 20
    batch_size: int = 0
    n_iterations: int = 300
    step_size: float = 1.0
    step_decay: float = 1.0
    epsilon: float = 1.0
    epsilon_min: float = 0.05
    epsilon_decay: float = 0.995
    target_update: int = 1
    seed: int = 0
    tolerance: float = 1e-12
    start_states: Optional[List[int]] = None
    collection_rounds: int = 4

    def validate(self, mdp: Optional[FiniteMdp] = None) -> None:
        if self.n_episodes < 1 or self.episode_length < 1:
            raise InputError("n_episodes and episode_length must be >= 1")
        if self.batch_size < 0 or self.n_iterations < 1 or self.target_update < 1:
            raise InputError("batch_size must be >= 0; n_iterations and target_update >= 1")
        if self.collection_rounds < 1:
            raise InputError("collection_rounds must be >= 1")
        if not self.step_size > 0 or not 0 < self.step_decay <= 1:
            raise InputError("step_size must be > 0 and step_decay in (0, 1]")
        for name in ("epsilon", "epsilon_min", "epsilon_decay"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise InputError(f"{name} must lie in [0, 1]")
        if mdp is not None and self.start_states is not None:
            bad = [s for s in self.start_states if not 0 <= s < mdp.n_states]
            if bad:
                raise InputError(f"start states out of range: {bad}")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "LearningConfig":
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(data) - known)
        if unknown:
            raise InputError(f"unknown learning config field(s): {', '.join(unknown)}")
        config = cls(**data)
        config.validate()
        return config

    def to_dict(self) -> Dict[str, Any]:
        return {name: getattr(self, name) for name in self.__dataclass_fields__}


@dataclass
class TransitionBatch:
    states: np.ndarray
    actions: np.ndarray
    costs: np.ndarray
    next_states: np.ndarray

    @classmethod
    def from_transitions(cls, transitions: Sequence[Tuple[int, int, float, int]]) -> "TransitionBatch":
        arr = list(zip(*transitions)) if transitions else ([], [], [], [])
        return cls(
            np.array(arr[0], dtype=int),
            np.array(arr[1], dtype=int),
            np.array(arr[2], dtype=float),
            np.array(arr[3], dtype=int),
        )

    @classmethod
    def empty(cls) -> "TransitionBatch":
        return cls.from_transitions([])

    @property
    def size(self) -> int:
        return int(self.states.size)

    def extend(self, other: "TransitionBatch") -> "TransitionBatch":
        return TransitionBatch(
            np.concatenate([self.states, other.states]),
            np.concatenate([self.actions, other.actions]),
            np.concatenate([self.costs, other.costs]),
            np.concatenate([self.next_states, other.next_states]),
        )

    def sample(self, batch_size: int, rng: np.random.Generator) -> "TransitionBatch":
        idx = np.sort(rng.choice(self.size, size=batch_size, replace=False))
        return TransitionBatch(self.states[idx], self.actions[idx], self.costs[idx], self.next_states[idx])

    def visit_counts(self, n_states: int, n_actions: int) -> np.ndarray:
        counts = np.zeros((n_states, n_actions), dtype=int)
        np.add.at(counts, (self.states, self.actions), 1)
        return counts


@dataclass
class LearningResult:
    param: QParameterization
    history: List[Dict[str, float]]
    unvisited: List[Tuple[int, int]] = field(default_factory=list)
    n_transitions: int = 0

    @property
    def final_error(self) -> Optional[float]:
        if not self.history:
            return None
        return self.history[-1]["sup_error"]

    def history_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.history, columns=["iteration", "sup_error", "ls_residual", "change"])

    def to_dict(self) -> Dict[str, Any]:
        return {
            "param": self.param,
            "greedy_policy": list(greedy_policy(self.param)),
            "final_error": self.final_error,
            "iterations": len(self.history),
            "n_transitions": self.n_transitions,
            "unvisited": [list(pair) for pair in self.unvisited],
        }


def collection_schedule(config: LearningConfig) -> Dict[int, range]:
    """Iteration at which each collection round runs, mapped to the episodes it collects."""
    rounds = min(config.collection_rounds, config.n_iterations, config.n_episodes)
    schedule: Dict[int, range] = {}
    for r in range(rounds):
        first = (r * config.n_episodes) // rounds
        last = ((r + 1) * config.n_episodes) // rounds
        schedule[1 + (r * config.n_iterations) // rounds] = range(first, last)
    return schedule


def collect_transitions(
    mdp: FiniteMdp,
    behaviour: QParameterization,
    config: LearningConfig,
    rng: np.random.Generator,
    episodes: Sequence[int],
    epsilon: float,
) -> Tuple[TransitionBatch, float]:
    """Epsilon-greedy episodes around greedy_policy(behaviour), started from Dirac states.

    Epsilon decays geometrically per episode; the decayed value is returned for the next round.
    """
    greedy = greedy_policy(behaviour)
    transitions: List[Tuple[int, int, float, int]] = []
    for episode in episodes:
        if config.start_states:
            s0 = int(config.start_states[episode % len(config.start_states)])
        else:
            s0 = int(rng.integers(mdp.n_states))
        seed = int(rng.integers(2**31))
        traj = sample_trajectory(mdp, greedy, s0, config.episode_length, seed, epsilon)
        transitions.extend(zip(traj.states[:-1], traj.actions, traj.costs, traj.states[1:]))
        epsilon = max(config.epsilon_min, epsilon * config.epsilon_decay)
    return TransitionBatch.from_transitions(transitions), epsilon


def fitted_q_learning(
    mdp: FiniteMdp,
    param0: QParameterization,
    config: Optional[LearningConfig] = None,
    q_star: Optional[np.ndarray] = None,
) -> LearningResult:
    """Batch fitted Q-iteration with a frozen target refreshed every ``target_update`` iterations.

    Each iteration solves min_theta sum (q_theta(s, a) - [l(s, a) + gamma min_a' q_target(s', a')])^2
    by least squares and relaxes toward the solution with the scheduled step size.
    """
    config = config or LearningConfig()
    config.validate(mdp)
    collect_rng, batch_rng = spawn_rngs(config.seed, 2)
    schedule = collection_schedule(config)
    data = TransitionBatch.empty()
    epsilon = config.epsilon

    design = param0.design()
    weights = param0.weights.copy()
    target = weights.copy()
    history: List[Dict[str, float]] = []
    initial_error: Optional[float] = None
    strikes = 0
    iteration = 1
    while iteration <= config.n_iterations:
        if iteration in schedule:
            behaviour = param0.with_weights(weights)
            fresh, epsilon = collect_transitions(
                mdp, behaviour, config, collect_rng, schedule[iteration], epsilon
            )
            data = data.extend(fresh)
        batch = data
        if 0 < config.batch_size < data.size:
            batch = data.sample(config.batch_size, batch_rng)
        target_table = design @ target
        y = batch.costs + mdp.gamma * target_table[batch.next_states].min(axis=1)
        phi = design[batch.states, batch.actions]
        if batch.size:
            solution, _, _, _ = np.linalg.lstsq(phi, y, rcond=None)
        else:
            solution = weights.copy()
        ls_residual = float(np.sqrt(np.mean((phi @ solution - y) ** 2))) if batch.size else 0.0
        step = min(1.0, config.step_size * config.step_decay ** (iteration - 1))
        updated = (1.0 - step) * weights + step * solution
        change = float(np.abs(design @ updated - design @ weights).max())
        weights = updated
        if iteration % config.target_update == 0:
            target = weights.copy()
        error = float(np.abs(design @ weights - q_star).max()) if q_star is not None else change
        history.append(
            {"iteration": iteration, "sup_error": error, "ls_residual": ls_residual, "change": change}
        )

        if initial_error is None:
            initial_error = error
        elif initial_error > 0 and error >= DIVERGENCE_FACTOR * initial_error:
            strikes += 1
            if strikes >= DIVERGENCE_PATIENCE:
                raise LearningFailure(
                    f"fitted Q-iteration diverged: error {error:.3e} >= {DIVERGENCE_FACTOR:g}x initial "
                    f"for {DIVERGENCE_PATIENCE} iterations",
                    history=history,
                )
        else:
            strikes = 0
        if change <= config.tolerance and iteration % config.target_update == 0:
            pending = [start for start in schedule if start > iteration]
            if not pending:
                logger.info(f"fitted Q-iteration converged after {iteration} iterations")
                break
            # converged on the data so far; jump to the next collection round
            iteration = min(pending)
            continue
        iteration += 1
    else:
        logger.info(f"fitted Q-iteration stopped at the cap of {config.n_iterations} iterations")

    counts = data.visit_counts(mdp.n_states, mdp.n_actions)
    unvisited = [(int(s), int(a)) for s, a in zip(*np.nonzero(counts == 0))]
    if unvisited:
        logger.warning(f"unvisited (s,a) pairs: {unvisited}")
    return LearningResult(
        param=param0.with_weights(weights), history=history, unvisited=unvisited, n_transitions=data.size
    )


def expected_q_iteration(mdp: FiniteMdp, param0: QParameterization, n_iterations: int) -> List[np.ndarray]:
    """Exact-expectation sweeps q <- l + gamma P min_a q; returns q_0, ..., q_n."""
    tables = [param0.table()]
    for _ in range(n_iterations):
        tables.append(mdp.cost_table + mdp.gamma * (mdp.transition @ tables[-1].min(axis=1)))
    return tables


@dataclass
class ThetaCandidate:
    theta: Optional[ThetaParameters]
    accepted: bool
    bellman_residual: float
    fit_residual: float
    stage_margin: float
    message: str = ""

    def to_dict(self) -> Dict[str, Any]:
        return {
            "theta": self.theta,
            "accepted": self.accepted,
            "bellman_residual": self.bellman_residual,
            "fit_residual": self.fit_residual,
            "stage_margin": self.stage_margin,
            "message": self.message,
        }


@dataclass
class LiftConfig:
    horizon: int = 1
    n_samples: int = 50
    seed: int = 0
    tolerance: float = 1e-6
    policy_cap: int = 4096


def _lifted_q(q: np.ndarray, rho: Measure, policy: Policy) -> float:
    return float(np.asarray(rho) @ q[np.arange(q.shape[0]), np.array(policy)])


def theta_from_learned(
    mdp: FiniteMdp,
    functional: StageCostFunctional,
    learned: QParameterization,
    rho_star: Measure,
    dissim: DissimilarityKind,
    alpha0: ClassKInftyFn,
    config: Optional[LiftConfig] = None,
) -> ThetaCandidate:
    """Lift a learned classic q to theta so that Q_theta[delta_s, pi] = q(s, pi(s)).

    ``learned`` must approximate the action values of the shifted linear functional.
    The structural stage q - P min_a q and terminal min_a q come straight from q;
    the affine storage comes from an LP with T_theta >= 0 and the stage margin
    active.  The candidate is rejected when q is not Bellman-consistent with the
    MDP, when the lifted Q_theta misses the linear lift of q, or when no storage
    keeps the stage margin nonnegative.
    """
    config = config or LiftConfig()
    if not functional.is_linear:
        raise InputError("lifting learned values needs a linear stage-cost functional")
    n = mdp.n_states
    q = learned.table()
    v = q.min(axis=1)
    shifted_costs = mdp.cost_table - functional.shift
    bellman_residual = float(np.abs(q - (shifted_costs + mdp.gamma * (mdp.transition @ v))).max())
    structural = q - mdp.transition @ v

    measures = audit_measures(n, rho_star, config.n_samples, config.seed)
    distances = np.array([dissim(rho, rho_star) for rho in measures])
    policies = enumerate_policies(mdp, config.policy_cap)
    w, margin = fit_storage_weights(mdp, structural, v, measures, distances, alpha0, rho_star, policies)
    if w is None:
        return ThetaCandidate(None, False, bellman_residual, np.inf, margin, "storage LP infeasible")

    storage = StorageFunctional.normalized(w, None, rho_star)
    table = structural + w[:, None] - mdp.transition @ w
    terminal_w = v + w - storage.normalization
    rho_star = np.asarray(rho_star, dtype=float)
    theta = ThetaParameters(storage, terminal_w, table, config.horizon, rho_star=rho_star)

    fit_residual = max(
        abs(q_theta(mdp, theta, rho, policy, config.policy_cap) - _lifted_q(q, rho, policy))
        for rho in measures
        for policy in policies
    )
    problems = []
    if bellman_residual > config.tolerance:
        problems.append(f"Bellman inconsistency {bellman_residual:.3e}")
    if fit_residual > config.tolerance:
        problems.append(f"fit residual {fit_residual:.3e}")
    if margin < -config.tolerance:
        problems.append(f"stage margin {margin:.3e} < 0")
    accepted = not problems
    if not accepted:
        logger.warning(f"theta candidate rejected: {'; '.join(problems)}")
    return ThetaCandidate(
        theta=theta,
        accepted=accepted,
        bellman_residual=bellman_residual,
        fit_residual=float(fit_residual),
        stage_margin=margin,
        message="accepted" if accepted else "; ".join(problems),
    )
