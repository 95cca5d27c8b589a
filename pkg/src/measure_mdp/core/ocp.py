"""Undiscounted finite-horizon OCPs over measures and their parameterized approximators."""
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linprog

from .dissimilarity import DissimilarityKind
from .dissipativity import (
    ClassKInftyFn,
    StorageFunctional,
    audit_storage,
)
from .errors import InputError
from .functionals import StageCostFunctional, first_minimizer, q_functional
from .mdp import FiniteMdp, Measure, Policy, apply_transition, closed_loop_matrix, dirac, enumerate_policies
from .sampling import parallel_map, sample_simplex, simplex_vertices, spawn_rngs

logger = logging.getLogger(__name__)

EXACTNESS_TOL = 1e-8
Q_MATCH_TOL = 1e-6
NONNEG_TOL = 1e-12

ValueFn = Callable[[Measure], float]
StageFn = Callable[[Measure, Policy], float]


@dataclass(frozen=True)
class FiniteHorizonOcp:
    """min_pi terminal[rho_N] + sum_{k<N} stage[rho_k, pi]."""

    horizon: int
    terminal: ValueFn
    stage: StageFn

    def __post_init__(self):
        if self.horizon < 1:
            raise InputError(f"horizon must be >= 1, got {self.horizon}")

    def cost(self, mdp: FiniteMdp, policy: Policy, rho0: Measure) -> float:
        matrix = closed_loop_matrix(mdp, policy)
        rho = np.asarray(rho0, dtype=float)
        total = 0.0
        for _ in range(self.horizon):
            total += self.stage(rho, policy)
            rho = rho @ matrix
        return total + self.terminal(rho)


def finite_horizon_value(
    mdp: FiniteMdp,
    ocp: FiniteHorizonOcp,
    rho0: Measure,
    policy_cap: int = 4096,
    threads: int = 1,
) -> Tuple[float, Policy]:
    """Exact minimum over stationary deterministic policies, lowest index on ties."""
    policies = enumerate_policies(mdp, policy_cap)
    costs = parallel_map(lambda policy: ocp.cost(mdp, policy, rho0), policies, threads)
    best = first_minimizer(costs)
    return float(costs[best]), policies[best]


def exactness_construction(
    value: ValueFn, mdp: FiniteMdp, functional: StageCostFunctional, horizon: int = 1
) -> FiniteHorizonOcp:
    """Terminal V*, stage Q*[rho, pi] - V*[T_pi rho]."""

    def stage(rho: Measure, policy: Policy) -> float:
        nxt = apply_transition(mdp, policy, rho)
        return q_functional(mdp, functional, value, rho, policy) - value(nxt)

    return FiniteHorizonOcp(horizon=horizon, terminal=value, stage=stage)


@dataclass
class HorizonExactnessReport:
    n_test: int
    horizons: List[int]
    violations: List[Dict[str, Any]] = field(default_factory=list)
    max_value_gap: float = 0.0
    max_q_gap: float = 0.0

    @property
    def passed(self) -> bool:
        return not self.violations

    def to_dict(self) -> Dict[str, Any]:
        return {
            "passed": self.passed,
            "n_test": self.n_test,
            "horizons": self.horizons,
            "violations": self.violations,
            "max_value_gap": self.max_value_gap,
            "max_q_gap": self.max_q_gap,
        }


def check_horizon_exactness(
    mdp: FiniteMdp,
    functional: StageCostFunctional,
    value: ValueFn,
    pi_star: Policy,
    n_test: int = 10,
    seed: int = 0,
    horizons: Sequence[int] = (1, 2, 3, 4, 5),
    terminal: Optional[ValueFn] = None,
    policy_cap: int = 4096,
    tol: float = EXACTNESS_TOL,
) -> HorizonExactnessReport:
    """Finite-horizon policy, value and action-value identities against the discounted solution.

    ``terminal`` replaces V* as the terminal cost, which lets callers check
    that a corrupted construction is caught.
    """
    policies = enumerate_policies(mdp, policy_cap)
    (rng,) = spawn_rngs(seed, 1)
    starts = sample_simplex(mdp.n_states, n_test, rng)
    report = HorizonExactnessReport(n_test=n_test, horizons=list(horizons))
    pi_star = tuple(pi_star)
    for horizon in horizons:
        ocp = exactness_construction(value, mdp, functional, horizon)
        if terminal is not None:
            ocp = FiniteHorizonOcp(horizon, terminal, ocp.stage)
        for rho0 in starts:
            best, policy = finite_horizon_value(mdp, ocp, rho0, policy_cap)
            if policy != pi_star and ocp.cost(mdp, pi_star, rho0) > best + tol:
                report.violations.append(
                    {
                        "item": "policy",
                        "N": horizon,
                        "rho0": rho0,
                        "policy": list(policy),
                        "expected": list(pi_star),
                    }
                )
            gap = abs(best - value(rho0))
            report.max_value_gap = max(report.max_value_gap, gap)
            if gap > tol:
                report.violations.append({"item": "value", "N": horizon, "rho0": rho0, "gap": gap})
            for candidate in policies:
                nxt = apply_transition(mdp, candidate, rho0)
                q_hat = ocp.stage(rho0, candidate) + finite_horizon_value(mdp, ocp, nxt, policy_cap)[0]
                q_gap = abs(q_hat - q_functional(mdp, functional, value, rho0, candidate))
                report.max_q_gap = max(report.max_q_gap, q_gap)
                if q_gap > tol:
                    report.violations.append(
                        {"item": "q", "N": horizon, "rho0": rho0, "policy": list(candidate), "gap": q_gap}
                    )
    if report.violations:
        logger.warning(f"finite-horizon exactness: {len(report.violations)} violation(s)")
    return report


@dataclass(frozen=True, eq=False)
class ThetaParameters:
    """Storage lambda_theta, terminal T_theta[rho] = terminal_w . rho and stage L_theta.

    L_theta[rho, pi] = table_pi . rho + d_weight D(rho || rho*).
    """

    storage: StorageFunctional
    terminal_w: np.ndarray
    stage_table: np.ndarray
    horizon: int
    stage_d_weight: float = 0.0
    rho_star: Optional[np.ndarray] = None
    dissimilarity: Optional[DissimilarityKind] = None

    def __post_init__(self):
        terminal_w = np.asarray(self.terminal_w, dtype=float)
        table = np.asarray(self.stage_table, dtype=float)
        n = self.storage.linear_weights.size
        if terminal_w.shape != (n,) or table.ndim != 2 or table.shape[0] != n:
            raise InputError(
                f"theta shapes disagree: lambda_w {n}, terminal_w {terminal_w.shape}, "
                f"stage_table {table.shape}"
            )
        if self.horizon < 1:
            raise InputError(f"horizon must be >= 1, got {self.horizon}")
        if self.stage_d_weight and (self.rho_star is None or self.dissimilarity is None):
            raise InputError("a D-term in the stage needs rho_star and a dissimilarity")
        object.__setattr__(self, "terminal_w", terminal_w)
        object.__setattr__(self, "stage_table", table)

    @classmethod
    def zero(cls, mdp: FiniteMdp, horizon: int = 1) -> "ThetaParameters":
        n = mdp.n_states
        return cls(StorageFunctional.zero(n), np.zeros(n), np.zeros((n, mdp.n_actions)), horizon)

    def terminal(self, rho: Measure) -> float:
        return float(self.terminal_w @ np.asarray(rho, dtype=float))

    def stage(self, rho: Measure, policy: Policy) -> float:
        rho = np.asarray(rho, dtype=float)
        value = float(rho @ self.stage_table[np.arange(rho.size), np.array(policy)])
        if self.stage_d_weight:
            value += self.stage_d_weight * self.dissimilarity(rho, self.rho_star)
        return value

    def ocp(self) -> FiniteHorizonOcp:
        return FiniteHorizonOcp(self.horizon, self.terminal, self.stage)

    def with_storage(self, storage: StorageFunctional) -> "ThetaParameters":
        return ThetaParameters(
            storage,
            self.terminal_w,
            self.stage_table,
            self.horizon,
            self.stage_d_weight,
            self.rho_star,
            self.dissimilarity,
        )

    def to_dict(self) -> Dict[str, Any]:
        payload: Dict[str, Any] = {
            "lambda_w": self.storage.linear_weights,
            "lambda_M": self.storage.quadratic_weights,
            "lambda_offset": self.storage.normalization,
            "terminal_w": self.terminal_w,
            "stage_table": self.stage_table,
            "stage_d_weight": self.stage_d_weight,
            "N": self.horizon,
        }
        if self.rho_star is not None:
            payload["rho_star"] = self.rho_star
        return payload

    @classmethod
    def from_dict(
        cls, data: Dict[str, Any], dissimilarity: Optional[DissimilarityKind] = None
    ) -> "ThetaParameters":
        missing = [k for k in ("lambda_w", "terminal_w", "stage_table", "N") if k not in data]
        if missing:
            raise InputError(f"theta file is missing field(s): {', '.join(missing)}")
        w = np.asarray(data["lambda_w"], dtype=float)
        m = data.get("lambda_M")
        quadratic = np.zeros((w.size, w.size)) if m is None else m
        storage = StorageFunctional(w, quadratic, data.get("lambda_offset", 0.0))
        rho_star = data.get("rho_star")
        return cls(
            storage,
            data["terminal_w"],
            data["stage_table"],
            int(data["N"]),
            float(data.get("stage_d_weight", 0.0)),
            None if rho_star is None else np.asarray(rho_star, dtype=float),
            dissimilarity,
        )


def theta_value(
    mdp: FiniteMdp, theta: ThetaParameters, rho0: Measure, policy_cap: int = 4096, threads: int = 1
) -> Tuple[float, Policy]:
    """V_theta[rho0] = -lambda_theta[rho0] + min_pi T_theta[rho_N] + sum L_theta.

    The storage term is constant in pi, so the minimizing policy never depends on it.
    """
    best, policy = finite_horizon_value(mdp, theta.ocp(), rho0, policy_cap, threads)
    return best - theta.storage(rho0), policy


def psi_theta(mdp: FiniteMdp, theta: ThetaParameters, rho0: Measure, policy_cap: int = 4096) -> float:
    """Psi_theta = lambda_theta + V_theta."""
    return theta.storage(rho0) + theta_value(mdp, theta, rho0, policy_cap)[0]


def psi_theta_direct(mdp: FiniteMdp, theta: ThetaParameters, rho0: Measure, policy_cap: int = 4096) -> float:
    """Psi_theta from the storage-free OCP."""
    return finite_horizon_value(mdp, theta.ocp(), rho0, policy_cap)[0]


def q_theta(
    mdp: FiniteMdp, theta: ThetaParameters, rho: Measure, policy: Policy, policy_cap: int = 4096
) -> float:
    """Q_theta[rho, pi] = -lambda_theta[rho] + L_theta[rho, pi] + Psi_theta[T_pi rho]."""
    nxt = apply_transition(mdp, policy, rho)
    return -theta.storage(rho) + theta.stage(rho, policy) + psi_theta(mdp, theta, nxt, policy_cap)


def exact_theta(
    mdp: FiniteMdp,
    functional: StageCostFunctional,
    value: ValueFn,
    storage: StorageFunctional,
    horizon: int = 1,
    rho_star: Optional[Measure] = None,
) -> ThetaParameters:
    """Tabular parameters reproducing Q* exactly.

    T_theta = V* + lambda and L_theta = L_hat + lambda - lambda o T.

    Needs a linear functional and an affine storage so both pieces stay linear in rho.
    """
    if not functional.is_linear:
        raise InputError("exact theta construction needs a linear stage-cost functional")
    if not storage.is_affine:
        raise InputError("exact theta construction needs an affine storage functional")
    n = mdp.n_states
    v = np.array([value(dirac(s, n)) for s in range(n)])
    w = storage.linear_weights
    next_v = mdp.transition @ v
    next_w = mdp.transition @ w
    table = (
        mdp.cost_table
        - functional.shift
        + (mdp.gamma - 1.0) * next_v
        + w[:, None]
        - next_w
    )
    terminal_w = v + w - storage.normalization
    return ThetaParameters(
        storage,
        terminal_w,
        table,
        horizon,
        rho_star=None if rho_star is None else np.asarray(rho_star, dtype=float),
    )


def fit_storage_weights(
    mdp: FiniteMdp,
    structural_table: np.ndarray,
    v: np.ndarray,
    measures: np.ndarray,
    distances: np.ndarray,
    alpha0: ClassKInftyFn,
    rho_star: Measure,
    policies: Sequence[Policy],
    weight_bound: float = 1e4,
) -> Tuple[Optional[np.ndarray], float]:
    """Affine storage w maximizing the stage margin with T_theta >= 0 at the vertices.

    Rows: rho . (L_hat_pi + w - P_pi w) - alpha0(D) >= t and v(s) + w(s) - w . rho* >= 0.
    """
    n = mdp.n_states
    rho_star = np.asarray(rho_star, dtype=float)
    rows, rhs = [], []
    for rho, distance in zip(measures, distances):
        for policy in policies:
            matrix = closed_loop_matrix(mdp, policy)
            base = float(rho @ structural_table[np.arange(n), np.array(policy)])
            grad = rho - rho @ matrix
            # -grad . w + t <= base - alpha0(D)
            rows.append(np.concatenate([-grad, [1.0]]))
            rhs.append(base - alpha0(distance))
    for s in range(n):
        # -(e_s - rho*) . w <= v(s)
        rows.append(np.concatenate([-(np.eye(n)[s] - rho_star), [0.0]]))
        rhs.append(v[s])
    objective = np.zeros(n + 1)
    objective[-1] = -1.0
    res = linprog(
        objective,
        A_ub=np.vstack(rows),
        b_ub=np.array(rhs),
        bounds=[(-weight_bound, weight_bound)] * n + [(None, 1.0)],
        method="highs",
    )
    if res.status != 0:
        return None, -np.inf
    return res.x[:n], float(res.x[n])


@dataclass
class AuditConfig:
    n_samples: int = 50
    seed: int = 0
    policy_cap: int = 4096
    q_tol: float = Q_MATCH_TOL
    fsdsd_tol: float = 1e-8


@dataclass
class ThetaStorageReport:
    terminal_nonneg_ok: bool
    q_match_ok: bool
    stage_bound_ok: bool
    fsdsd_holds: Optional[bool]
    max_q_gap: float
    stage_margin: float
    fsdsd_min_residual: Optional[float]
    failed: Optional[str] = None
    worst_point: Optional[Dict[str, Any]] = None
    storage: Optional[StorageFunctional] = None

    @property
    def passed(self) -> bool:
        return bool(self.fsdsd_holds)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "passed": self.passed,
            "terminal_nonneg_ok": self.terminal_nonneg_ok,
            "q_match_ok": self.q_match_ok,
            "stage_bound_ok": self.stage_bound_ok,
            "fsdsd_holds": self.fsdsd_holds,
            "max_q_gap": self.max_q_gap,
            "stage_margin": self.stage_margin,
            "fsdsd_min_residual": self.fsdsd_min_residual,
            "failed": self.failed,
            "worst_point": self.worst_point,
            "storage": self.storage,
        }


def nonneg_tolerance(theta: ThetaParameters) -> float:
    """NONNEG_TOL scaled by the largest terminal or storage weight."""
    scale = max(
        1.0,
        float(np.abs(theta.terminal_w).max()),
        float(np.abs(theta.storage.linear_weights).max()),
    )
    return NONNEG_TOL * scale


def audit_measures(n: int, rho_star: Measure, n_samples: int, seed: int) -> np.ndarray:
    """Vertices, rho* and seeded interior samples."""
    (rng,) = spawn_rngs(seed, 1)
    rho_star = np.asarray(rho_star, dtype=float)
    return np.vstack([simplex_vertices(n), rho_star[None, :], sample_simplex(n, n_samples, rng)])


def check_theta_storage(
    mdp: FiniteMdp,
    functional: StageCostFunctional,
    theta: ThetaParameters,
    value: ValueFn,
    rho_star: Measure,
    dissim: DissimilarityKind,
    alpha0: ClassKInftyFn,
    config: Optional[AuditConfig] = None,
) -> ThetaStorageReport:
    """Audit T_theta >= 0, Q_theta ~ Q* and L_theta >= alpha0(D).

    Only when all three hold is lambda_theta checked against both dissipation inequalities.
    """
    config = config or AuditConfig()
    n = mdp.n_states
    rho_star = np.asarray(rho_star, dtype=float)
    measures = audit_measures(n, rho_star, config.n_samples, config.seed)
    policies = enumerate_policies(mdp, config.policy_cap)

    terminal_at_vertices = theta.terminal_w
    terminal_nonneg_ok = bool(terminal_at_vertices.min() >= -nonneg_tolerance(theta))

    max_q_gap = 0.0
    for rho in measures:
        for policy in policies:
            gap = abs(
                q_theta(mdp, theta, rho, policy, config.policy_cap)
                - q_functional(mdp, functional, value, rho, policy)
            )
            max_q_gap = max(max_q_gap, gap)
    q_match_ok = max_q_gap <= config.q_tol

    stage_margin = np.inf
    worst: Optional[Dict[str, Any]] = None
    for rho in measures:
        bound = alpha0(dissim(rho, rho_star))
        for policy in policies:
            margin = theta.stage(rho, policy) - bound
            if margin < stage_margin:
                stage_margin = margin
                worst = {"rho": rho, "policy": list(policy), "margin": margin}
    stage_bound_ok = stage_margin >= -config.fsdsd_tol

    report = ThetaStorageReport(
        terminal_nonneg_ok=terminal_nonneg_ok,
        q_match_ok=q_match_ok,
        stage_bound_ok=stage_bound_ok,
        fsdsd_holds=None,
        max_q_gap=max_q_gap,
        stage_margin=float(stage_margin),
        fsdsd_min_residual=None,
        worst_point=worst,
    )
    checks = (
        (terminal_nonneg_ok, "terminal_nonneg"),
        (q_match_ok, "q_match"),
        (stage_bound_ok, "stage_bound"),
    )
    for ok, name in checks:
        if not ok:
            report.failed = name
            if name == "q_match":
                logger.warning("Q_theta never reaches Q*; instance may be non-FSDSD")
            logger.warning(f"theta audit failed at {name}; no dissipativity conclusion drawn")
            return report

    storage = StorageFunctional.normalized(
        theta.storage.linear_weights, theta.storage.quadratic_weights, rho_star
    )
    audit = audit_storage(mdp, functional, value, dissim, rho_star, storage, alpha0, measures, policies)
    report.storage = storage
    report.fsdsd_min_residual = audit.min_residual
    report.fsdsd_holds = audit.min_residual >= -config.fsdsd_tol
    if audit.worst is not None and not report.fsdsd_holds:
        report.worst_point = audit.worst.to_dict()
    return report
