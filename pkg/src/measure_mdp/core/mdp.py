"""Finite MDPs, measures on the state set and closed-loop measure propagation."""
import itertools
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .errors import InputError, NumericalError, SizeError
from .sampling import make_rng

logger = logging.getLogger(__name__)

SIMPLEX_ATOL = 1e-12
STATIONARY_TOL = 1e-10
STATIONARY_MAX_STEPS = 10**6

# A measure is a dense probability vector; a policy maps state index -> action index.
Measure = np.ndarray
Policy = Tuple[int, ...]


@dataclass(frozen=True, eq=False)
class FiniteMdp:
    """Transition tensor P[s][a][s'], stage costs l[s][a] and discount gamma."""

    transition: np.ndarray
    cost_table: np.ndarray
    gamma: float

    def __post_init__(self):
        transition = np.array(self.transition, dtype=float)
        cost_table = np.array(self.cost_table, dtype=float)
        if transition.ndim != 3 or transition.shape[0] != transition.shape[2]:
            raise InputError(
                f"transition must have shape (n_states, n_actions, n_states), got {transition.shape}"
            )
        if cost_table.shape != transition.shape[:2]:
            raise InputError(
                f"cost table shape {cost_table.shape} does not match (n_states, n_actions) "
                f"= {transition.shape[:2]}"
            )
        transition.setflags(write=False)
        cost_table.setflags(write=False)
        object.__setattr__(self, "transition", transition)
        object.__setattr__(self, "cost_table", cost_table)
        object.__setattr__(self, "gamma", float(self.gamma))

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    def with_costs(self, cost_table: np.ndarray) -> "FiniteMdp":
        return FiniteMdp(self.transition, cost_table, self.gamma)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "FiniteMdp":
        """Build from the problem-file layout."""
        missing = [k for k in ("n_states", "n_actions", "transition", "cost", "gamma") if k not in data]
        if missing:
            raise InputError(f"problem is missing field(s): {', '.join(missing)}")
        transition = np.array(data["transition"], dtype=float)
        mdp = cls(transition, np.array(data["cost"], dtype=float), data["gamma"])
        if mdp.n_states != int(data["n_states"]) or mdp.n_actions != int(data["n_actions"]):
            raise InputError(
                f"declared size ({data['n_states']}, {data['n_actions']}) does not match "
                f"arrays ({mdp.n_states}, {mdp.n_actions})"
            )
        return mdp

    def to_dict(self) -> Dict[str, Any]:
        return {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "transition": self.transition,
            "cost": self.cost_table,
            "gamma": self.gamma,
        }


@dataclass(frozen=True)
class StateTrajectory:
    states: List[int]
    actions: List[int]
    costs: List[float]
    seed: int

    def __post_init__(self):
        if not (len(self.actions) == len(self.costs) == len(self.states) - 1):
            raise InputError("trajectory lengths must satisfy |actions| = |costs| = |states| - 1")


@dataclass(frozen=True, eq=False)
class StationaryMeasure:
    measure: Measure
    unique: bool
    n_recurrent_classes: int
    residual: float
    steps: int = field(default=0)


def validate_mdp(mdp: FiniteMdp) -> List[str]:
    """Return the violated invariants; an empty list means the MDP is valid."""
    violations: List[str] = []
    if not (0.0 < mdp.gamma < 1.0):
        violations.append(f"gamma out of (0,1): {mdp.gamma}")
    if not np.all(np.isfinite(mdp.cost_table)):
        violations.append("cost table contains non-finite entries")
    if not np.all(np.isfinite(mdp.transition)):
        violations.append("transition tensor contains non-finite entries")
        return violations
    for s, a in itertools.product(range(mdp.n_states), range(mdp.n_actions)):
        row = mdp.transition[s, a]
        if np.any(row < 0):
            violations.append(f"row ({s},{a}) has negative entries")
        total = row.sum()
        if abs(total - 1.0) > SIMPLEX_ATOL:
            violations.append(f"row ({s},{a}) sums to {total:.12g}")
    return violations


def require_valid(mdp: FiniteMdp) -> None:
    violations = validate_mdp(mdp)
    if violations:
        raise InputError("invalid MDP: " + "; ".join(violations))


def make_measure(weights: Sequence[float], renormalize: bool = False) -> Measure:
    """Validate (and optionally renormalize) a probability vector."""
    rho = np.array(weights, dtype=float).reshape(-1)
    if rho.size == 0 or not np.all(np.isfinite(rho)):
        raise InputError("measure weights must be a non-empty finite vector")
    if np.any(rho < 0):
        raise InputError(f"measure has negative weights: {rho.tolist()}")
    total = rho.sum()
    if renormalize:
        if total <= 0:
            raise InputError("cannot renormalize a zero measure")
        rho = rho / total
    elif abs(total - 1.0) > SIMPLEX_ATOL:
        raise InputError(f"measure sums to {total:.15g}, not 1")
    rho.setflags(write=False)
    return rho


def dirac(s: int, n: int) -> Measure:
    """Unit mass at state s."""
    if not 0 <= s < n:
        raise InputError(f"state index {s} out of range [0, {n})")
    rho = np.zeros(n)
    rho[s] = 1.0
    rho.setflags(write=False)
    return rho


def uniform_measure(n: int) -> Measure:
    rho = np.full(n, 1.0 / n)
    rho.setflags(write=False)
    return rho


def make_policy(actions: Sequence[int], mdp: FiniteMdp) -> Policy:
    policy = tuple(int(a) for a in actions)
    if len(policy) != mdp.n_states:
        raise InputError(f"policy has {len(policy)} entries, MDP has {mdp.n_states} states")
    bad = [s for s, a in enumerate(policy) if not 0 <= a < mdp.n_actions]
    if bad:
        raise InputError(f"invalid action index at state(s) {bad}")
    return policy


def policy_count(mdp: FiniteMdp) -> int:
    return mdp.n_actions**mdp.n_states


def enumerate_policies(mdp: FiniteMdp, cap: int = 4096) -> List[Policy]:
    """All deterministic stationary policies in lexicographic order."""
    count = policy_count(mdp)
    if count > cap:
        raise SizeError(count, cap)
    return list(itertools.product(range(mdp.n_actions), repeat=mdp.n_states))


def closed_loop_matrix(mdp: FiniteMdp, policy: Policy) -> np.ndarray:
    """Row-stochastic matrix with entry (s, s') = P[s][policy(s)][s']."""
    policy = make_policy(policy, mdp)
    return mdp.transition[np.arange(mdp.n_states), np.array(policy), :]


def closed_loop_costs(mdp: FiniteMdp, policy: Policy) -> np.ndarray:
    return mdp.cost_table[np.arange(mdp.n_states), np.array(policy)]


def apply_transition(mdp: FiniteMdp, policy: Policy, rho: Measure) -> Measure:
    """One step of the measure dynamics: rho+(s') = sum_s P[s][pi(s)][s'] rho(s)."""
    return np.asarray(rho, dtype=float) @ closed_loop_matrix(mdp, policy)


def propagate(mdp: FiniteMdp, policy: Policy, rho0: Measure, steps: int) -> Iterator[Measure]:
    """Yield rho_0, rho_1, ..., rho_steps."""
    matrix = closed_loop_matrix(mdp, policy)
    rho = np.asarray(rho0, dtype=float)
    yield rho
    for _ in range(steps):
        rho = rho @ matrix
        yield rho


def recurrent_classes(matrix: np.ndarray) -> List[np.ndarray]:
    """State sets of the closed strongly connected components, ordered by lowest state."""
    graph = csr_matrix(matrix > 0)
    n_components, labels = connected_components(graph, directed=True, connection="strong")
    closed = np.ones(n_components, dtype=bool)
    rows, cols = graph.nonzero()
    for i, j in zip(rows, cols):
        if labels[i] != labels[j]:
            closed[labels[i]] = False
    classes = [np.flatnonzero(labels == c) for c in range(n_components) if closed[c]]
    return sorted(classes, key=lambda states: int(states[0]))


def count_recurrent_classes(matrix: np.ndarray) -> int:
    """Closed strongly connected components of the transition graph."""
    return len(recurrent_classes(matrix))


def class_measure(states: Sequence[int], n: int) -> Measure:
    """Uniform measure on a set of states."""
    rho = np.zeros(n)
    rho[np.asarray(states, dtype=int)] = 1.0 / len(states)
    rho.setflags(write=False)
    return rho


def stationary_measure(
    mdp: FiniteMdp,
    policy: Policy,
    rho0: Optional[Measure] = None,
    tol: float = STATIONARY_TOL,
    max_steps: int = STATIONARY_MAX_STEPS,
) -> StationaryMeasure:
    """Cesaro limit of the closed-loop iterates started from rho0 (default uniform).

    The lazy chain (I + P)/2 has the same Cesaro projector as P and no
    periodic part, so its plain power limit is the Cesaro limit of P.  The
    power is taken by repeated squaring; ``steps`` counts lazy-chain steps.
    """
    matrix = closed_loop_matrix(mdp, policy)
    n = mdp.n_states
    start = uniform_measure(n) if rho0 is None else np.asarray(rho0, dtype=float)
    lazy = 0.5 * (np.eye(n) + matrix)
    steps = 1
    rho = start @ lazy
    residual = float(np.abs(rho @ matrix - rho).max())
    while residual > tol and steps < max_steps:
        lazy = lazy @ lazy
        lazy /= lazy.sum(axis=1, keepdims=True)
        steps *= 2
        rho = start @ lazy
        residual = float(np.abs(rho @ matrix - rho).max())
    if residual > tol:
        raise NumericalError(
            f"stationary measure did not converge after {steps} steps (residual {residual:.3e})",
            residual=residual,
        )
    classes = recurrent_classes(matrix)
    # stationary measures vanish off the recurrent states
    transient = np.ones(n, dtype=bool)
    for states in classes:
        transient[states] = False
    rho = np.where(transient, 0.0, rho)
    rho = rho / rho.sum()
    n_classes = len(classes)
    if n_classes > 1:
        logger.warning(
            f"policy {policy} has {n_classes} recurrent classes; stationary measure depends on the start"
        )
    rho.setflags(write=False)
    return StationaryMeasure(
        measure=rho, unique=n_classes == 1, n_recurrent_classes=n_classes, residual=residual, steps=steps
    )


def sample_trajectory(
    mdp: FiniteMdp, policy: Policy, s0: int, horizon: int, seed: int, epsilon: float = 0.0
) -> StateTrajectory:
    """Simulate the closed loop for ``horizon`` steps from state s0.

    With ``epsilon > 0`` each step takes a uniformly random action with
    probability epsilon instead of policy(s).
    """
    if horizon < 1:
        raise InputError("horizon must be >= 1")
    if not 0 <= s0 < mdp.n_states:
        raise InputError(f"start state {s0} out of range [0, {mdp.n_states})")
    if not 0.0 <= epsilon <= 1.0:
        raise InputError(f"epsilon must lie in [0, 1], got {epsilon}")
    policy = make_policy(policy, mdp)
    cdf = np.cumsum(mdp.transition, axis=2)
    rng = make_rng(seed)
    states = [int(s0)]
    actions: List[int] = []
    costs: List[float] = []
    s = int(s0)
    for _ in range(horizon):
        a = policy[s]
        if epsilon > 0.0 and rng.random() < epsilon:
            a = int(rng.integers(mdp.n_actions))
        row = cdf[s, a]
        actions.append(a)
        costs.append(float(mdp.cost_table[s, a]))
        s = min(int(np.searchsorted(row, rng.random() * row[-1], side="right")), mdp.n_states - 1)
        states.append(s)
    return StateTrajectory(states=states, actions=actions, costs=costs, seed=seed)


def random_mdp(n_states: int, n_actions: int, gamma: float, seed: int) -> FiniteMdp:
    """Seeded random instance with dense transitions and costs in [0, 1)."""
    rng = make_rng(seed)
    transition = rng.exponential(1.0, size=(n_states, n_actions, n_states))
    transition /= transition.sum(axis=2, keepdims=True)
    return FiniteMdp(transition, rng.random((n_states, n_actions)), gamma)
