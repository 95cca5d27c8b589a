"""Stage-cost functionals, discounted value functionals and their optimal solutions."""
import logging
from dataclasses import dataclass, replace
from enum import Enum
from typing import Any, Callable, Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np
from scipy import linalg
from scipy.special import rel_entr

from .errors import DomainError, InputError, NumericalError
from .mdp import (
    FiniteMdp,
    Measure,
    Policy,
    apply_transition,
    class_measure,
    closed_loop_costs,
    closed_loop_matrix,
    dirac,
    enumerate_policies,
    recurrent_classes,
    stationary_measure,
)
from .sampling import parallel_map

logger = logging.getLogger(__name__)

VALUE_ITERATION_TOL = 1e-12
VALUE_ITERATION_MAX_ITER = 10**6
ROLLOUT_MAX_STEPS = 10**6
TIE_TOL = 1e-12

__all__ = [
    "StageCostKind",
    "StageCostFunctional",
    "ValueSolution",
    "SteadyState",
    "RolloutResult",
    "ValueOracle",
    "LinearValueOracle",
    "RolloutValueOracle",
    "eval_stage",
    "solve_optimal_linear",
    "policy_value_linear",
    "value_functional",
    "q_functional",
    "advantage_functional",
    "discounted_rollout",
    "nonlinear_rollout_value",
    "solve_optimal_nonlinear",
    "optimal_steady_state",
    "relative_mdp",
    "first_minimizer",
    "dirac",
]


class StageCostKind(str, Enum):
    LINEAR = "linear"
    LINEAR_PLUS_VARIANCE = "linear_plus_variance"
    LINEAR_PLUS_KL = "linear_plus_kl"


@dataclass(frozen=True, eq=False)
class StageCostFunctional:
    """L[rho, pi] = E_rho[l(s, pi(s))] + nonlinear term - shift."""

    kind: StageCostKind
    cost_table: np.ndarray
    beta: float = 0.0
    reference: Optional[np.ndarray] = None
    shift: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", StageCostKind(self.kind))
        object.__setattr__(self, "cost_table", np.asarray(self.cost_table, dtype=float))
        if self.beta < 0:
            raise InputError(f"beta must be >= 0, got {self.beta}")
        if self.kind is StageCostKind.LINEAR_PLUS_KL:
            if self.reference is None:
                raise InputError("linear_plus_kl requires a reference measure")
            object.__setattr__(self, "reference", np.asarray(self.reference, dtype=float))

    @classmethod
    def linear(cls, mdp: FiniteMdp, shift: float = 0.0) -> "StageCostFunctional":
        return cls(StageCostKind.LINEAR, mdp.cost_table, shift=shift)

    @classmethod
    def from_descriptor(cls, descriptor: Dict[str, Any], mdp: FiniteMdp) -> "StageCostFunctional":
        """Parse ``{"kind": ..., "beta": ..., "reference": [...]}``."""
        try:
            kind = StageCostKind(descriptor.get("kind", "linear"))
        except ValueError:
            raise InputError(f"unknown functional kind '{descriptor.get('kind')}'")
        reference = descriptor.get("reference")
        return cls(
            kind,
            mdp.cost_table,
            beta=float(descriptor.get("beta", 0.0)),
            reference=None if reference is None else np.asarray(reference, dtype=float),
        )

    @property
    def is_linear(self) -> bool:
        return self.kind is StageCostKind.LINEAR or self.beta == 0.0

    def with_shift(self, shift: float) -> "StageCostFunctional":
        return replace(self, shift=float(shift))

    def stage_vector(self, policy: Policy) -> np.ndarray:
        return self.cost_table[np.arange(self.cost_table.shape[0]), np.array(policy)]

    def evaluate(self, rho: Measure, policy: Policy) -> float:
        rho = np.asarray(rho, dtype=float)
        stage = self.stage_vector(policy)
        mean = float(rho @ stage)
        value = mean
        if self.kind is StageCostKind.LINEAR_PLUS_VARIANCE and self.beta != 0.0:
            variance = max(float(rho @ (stage - mean) ** 2), 0.0)
            value += self.beta * variance
        elif self.kind is StageCostKind.LINEAR_PLUS_KL and self.beta != 0.0:
            if np.any(self.reference <= 0):
                raise DomainError("KL stage cost requires a strictly positive reference measure")
            value += self.beta * float(rel_entr(rho, self.reference).sum())
        return value - self.shift

    def to_dict(self) -> Dict[str, Any]:
        payload: Dict[str, Any] = {"kind": self.kind, "beta": self.beta, "shift": self.shift}
        if self.reference is not None:
            payload["reference"] = self.reference
        return payload


@dataclass(frozen=True, eq=False)
class ValueSolution:
    v_star: np.ndarray
    q_star: np.ndarray
    pi_star: Policy
    residual: float
    gamma: float
    iterations: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "v_star": self.v_star,
            "q_star": self.q_star,
            "pi_star": list(self.pi_star),
            "residual": self.residual,
            "iterations": self.iterations,
        }


@dataclass(frozen=True, eq=False)
class SteadyState:
    rho_star: Measure
    l0: float
    policy: Policy
    unique: bool = True

    def shifted(self, functional: StageCostFunctional) -> StageCostFunctional:
        return functional.with_shift(self.l0)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "rho_star": self.rho_star,
            "l0": self.l0,
            "policy": list(self.policy),
            "unique": self.unique,
        }


@dataclass(frozen=True)
class RolloutResult:
    value: float
    steps: int
    bound: float


class ValueOracle(Protocol):
    def __call__(self, rho: Measure) -> float:
        ...


class LinearValueOracle:
    """V*[rho] = v* . rho - shift / (1 - gamma) for the shifted linear functional."""

    def __init__(self, solution: ValueSolution, shift: float = 0.0):
        self.solution = solution
        self.offset = shift / (1.0 - solution.gamma)

    def __call__(self, rho: Measure) -> float:
        return value_functional(self.solution, rho) - self.offset


class RolloutValueOracle:
    """V*[rho] by enumerating stationary policies; results cached per measure."""

    def __init__(
        self,
        mdp: FiniteMdp,
        functional: StageCostFunctional,
        tol: float = 1e-10,
        policy_cap: int = 4096,
        threads: int = 1,
    ):
        self.mdp = mdp
        self.functional = functional
        self.tol = tol
        self.policy_cap = policy_cap
        self.threads = threads
        self._cache: Dict[bytes, float] = {}

    def __call__(self, rho: Measure) -> float:
        rho = np.asarray(rho, dtype=float)
        key = rho.tobytes()
        if key not in self._cache:
            value, _ = solve_optimal_nonlinear(
                self.mdp, self.functional, rho, self.tol, self.policy_cap, self.threads
            )
            self._cache[key] = value
        return self._cache[key]


def first_minimizer(values: Sequence[float], atol: float = TIE_TOL) -> int:
    """Lowest index whose value is within atol (relative to scale) of the minimum."""
    arr = np.asarray(values, dtype=float)
    best = float(arr.min())
    slack = atol * max(1.0, abs(best))
    return int(np.flatnonzero(arr <= best + slack)[0])


def eval_stage(functional: StageCostFunctional, rho: Measure, policy: Policy) -> float:
    return functional.evaluate(rho, policy)


def relative_mdp(mdp: FiniteMdp, shift: float) -> FiniteMdp:
    """Same dynamics with costs l - shift, so classic values match the shifted functional."""
    return mdp.with_costs(mdp.cost_table - shift)


def _backup(mdp: FiniteMdp, v: np.ndarray) -> np.ndarray:
    return mdp.cost_table + mdp.gamma * (mdp.transition @ v)


def _greedy(q: np.ndarray) -> Policy:
    return tuple(first_minimizer(row) for row in q)


def policy_value_linear(mdp: FiniteMdp, policy: Policy) -> np.ndarray:
    """Exact solve of v = l_pi + gamma P_pi v."""
    matrix = closed_loop_matrix(mdp, policy)
    lhs = np.eye(mdp.n_states) - mdp.gamma * matrix
    return linalg.solve(lhs, closed_loop_costs(mdp, policy))


def solve_optimal_linear(
    mdp: FiniteMdp, tol: float = VALUE_ITERATION_TOL, max_iter: int = VALUE_ITERATION_MAX_ITER
) -> ValueSolution:
    """Value iteration on the classic Bellman equation.

    Each sweep also evaluates the current greedy policy exactly; once that
    policy's value is a Bellman fixed point (within tol relative to the value
    scale) it is returned, which keeps gamma close to 1 tractable.
    """
    v = np.zeros(mdp.n_states)
    residual = np.inf
    for iteration in range(1, max_iter + 1):
        q = _backup(mdp, v)
        policy = _greedy(q)
        v_pi = policy_value_linear(mdp, policy)
        q_pi = _backup(mdp, v_pi)
        residual = float(np.abs(v_pi - q_pi.min(axis=1)).max())
        scale = max(1.0, float(np.abs(v_pi).max()))
        if residual <= tol * scale:
            pi_star = _greedy(q_pi)
            logger.info(f"value iteration converged after {iteration} sweeps (residual {residual:.3e})")
            return ValueSolution(
                v_star=q_pi.min(axis=1),
                q_star=q_pi,
                pi_star=pi_star,
                residual=residual,
                gamma=mdp.gamma,
                iterations=iteration,
            )
        v = q_pi.min(axis=1)
    raise NumericalError(
        f"value iteration hit the cap of {max_iter} sweeps (residual {residual:.3e})",
        residual=residual,
    )


def value_functional(solution: ValueSolution, rho: Measure) -> float:
    """V*[rho] = E_rho[v*(s)]."""
    return float(np.dot(solution.v_star, rho))


def q_functional(
    mdp: FiniteMdp,
    functional: StageCostFunctional,
    value: Callable[[Measure], float],
    rho: Measure,
    policy: Policy,
) -> float:
    """Q[rho, pi] = L[rho, pi] + gamma V[T_pi rho]."""
    return functional.evaluate(rho, policy) + mdp.gamma * value(apply_transition(mdp, policy, rho))


def advantage_functional(
    mdp: FiniteMdp,
    functional: StageCostFunctional,
    value: Callable[[Measure], float],
    rho: Measure,
    policy: Policy,
) -> float:
    return q_functional(mdp, functional, value, rho, policy) - value(rho)


def _vertex_bound(mdp: FiniteMdp, stage_fn: Callable[[Measure, Policy], float], policy: Policy) -> float:
    return max(abs(stage_fn(dirac(s, mdp.n_states), policy)) for s in range(mdp.n_states))


def discounted_rollout(
    mdp: FiniteMdp,
    stage_fn: Callable[[Measure, Policy], float],
    policy: Policy,
    rho0: Measure,
    tol: float = 1e-10,
    max_steps: int = ROLLOUT_MAX_STEPS,
) -> RolloutResult:
    """Truncated sum_k gamma^k stage(rho_k, pi).

    Stops once gamma^N * B / (1 - gamma) <= tol, with B twice the largest
    |stage| seen on the trajectory and at the simplex vertices.
    """
    gamma = mdp.gamma
    matrix = closed_loop_matrix(mdp, policy)
    bound = _vertex_bound(mdp, stage_fn, policy)
    rho = np.asarray(rho0, dtype=float)
    total = 0.0
    weight = 1.0
    for step in range(1, max_steps + 1):
        cost = stage_fn(rho, policy)
        if not np.isfinite(cost):
            raise NumericalError(f"stage cost diverged at step {step - 1}: {cost}")
        bound = max(bound, abs(cost))
        total += weight * cost
        weight *= gamma
        if weight * 2.0 * bound / (1.0 - gamma) <= tol:
            return RolloutResult(value=total, steps=step, bound=2.0 * bound)
        rho = rho @ matrix
    raise NumericalError(f"rollout did not reach tolerance {tol} within {max_steps} steps")


def nonlinear_rollout_value(
    mdp: FiniteMdp,
    functional: StageCostFunctional,
    policy: Policy,
    rho0: Measure,
    tol: float = 1e-10,
) -> RolloutResult:
    return discounted_rollout(mdp, functional.evaluate, policy, rho0, tol)


def solve_optimal_nonlinear(
    mdp: FiniteMdp,
    functional: StageCostFunctional,
    rho0: Measure,
    tol: float = 1e-10,
    policy_cap: int = 4096,
    threads: int = 1,
) -> Tuple[float, Policy]:
    """Best stationary deterministic policy for the discounted functional OCP from rho0."""
    policies = enumerate_policies(mdp, policy_cap)
    values = parallel_map(
        lambda pi: nonlinear_rollout_value(mdp, functional, pi, rho0, tol).value, policies, threads
    )
    best = first_minimizer(values, atol=tol)
    return values[best], policies[best]


def optimal_steady_state(
    mdp: FiniteMdp, functional: StageCostFunctional, policy_cap: int = 4096, threads: int = 1
) -> SteadyState:
    """Stationary (rho, pi) pair minimizing the unshifted stage cost.

    A closed loop with several recurrent classes contributes the measure
    reached from the uniform start and the stationary measure of each class.
    """
    raw = functional.with_shift(0.0)
    policies = enumerate_policies(mdp, policy_cap)

    def score(policy: Policy) -> List[Tuple[float, Any]]:
        stationary = stationary_measure(mdp, policy)
        candidates = [stationary]
        if stationary.n_recurrent_classes > 1:
            for states in recurrent_classes(closed_loop_matrix(mdp, policy)):
                candidates.append(stationary_measure(mdp, policy, class_measure(states, mdp.n_states)))
        return [(raw.evaluate(c.measure, policy), c) for c in candidates]

    scored = parallel_map(score, policies, threads)
    flat = [
        (value, stationary, policy) for policy, group in zip(policies, scored) for value, stationary in group
    ]
    best = first_minimizer([value for value, _, _ in flat])
    l0, stationary, policy = flat[best]
    logger.info(f"optimal steady state under policy {policy} with L0 = {l0:.6g}")
    return SteadyState(rho_star=stationary.measure, l0=float(l0), policy=policy, unique=stationary.unique)
