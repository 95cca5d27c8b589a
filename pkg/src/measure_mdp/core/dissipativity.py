"""Storage functionals, FSDSD certificates and Lyapunov / D-stability audits.

A storage functional lambda is affine-plus-quadratic in the measure and
normalized to vanish at the optimal steady state rho*.  Synthesis samples the
simplex, turns both dissipation inequalities into rows that are linear in the
storage weights and the slope of alpha(x) = c x, and solves a linear program
with HiGHS.  "Certified" always means certified on the audited sample set.
"""
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.optimize import linprog

from .dissimilarity import DissimilarityKind
from .errors import InputError
from .functionals import StageCostFunctional, discounted_rollout, first_minimizer
from .mdp import (
    FiniteMdp,
    Measure,
    Policy,
    apply_transition,
    closed_loop_matrix,
    enumerate_policies,
    policy_count,
)
from .sampling import parallel_map, sample_simplex, simplex_vertices, spawn_rngs

logger = logging.getLogger(__name__)

CERT_TOL = 1e-9
LYAPUNOV_TOL = 1e-9
D_FLOOR = 1e-12

ValueFn = Callable[[Measure], float]


class CertificateStatus(str, Enum):
    CERTIFIED = "Certified"
    NOT_CERTIFIED = "NotCertified"
    INCONCLUSIVE = "Inconclusive"


@dataclass(frozen=True, eq=False)
class StorageFunctional:
    """lambda[rho] = w . rho + rho^T M rho - normalization."""

    linear_weights: np.ndarray
    quadratic_weights: np.ndarray
    normalization: float = 0.0

    def __post_init__(self):
        w = np.asarray(self.linear_weights, dtype=float)
        m = np.asarray(self.quadratic_weights, dtype=float)
        if m.shape != (w.size, w.size):
            raise InputError(f"quadratic weights must be {w.size}x{w.size}, got {m.shape}")
        object.__setattr__(self, "linear_weights", w)
        object.__setattr__(self, "quadratic_weights", 0.5 * (m + m.T))
        object.__setattr__(self, "normalization", float(self.normalization))

    @classmethod
    def zero(cls, n: int) -> "StorageFunctional":
        return cls(np.zeros(n), np.zeros((n, n)), 0.0)

    @classmethod
    def normalized(
        cls, linear_weights: np.ndarray, quadratic_weights: Optional[np.ndarray], rho_star: Measure
    ) -> "StorageFunctional":
        """Choose the offset so that lambda[rho*] = 0."""
        w = np.asarray(linear_weights, dtype=float)
        m = np.zeros((w.size, w.size)) if quadratic_weights is None else np.asarray(quadratic_weights)
        raw = cls(w, m, 0.0)
        return cls(raw.linear_weights, raw.quadratic_weights, raw(rho_star))

    @property
    def is_affine(self) -> bool:
        return not np.any(self.quadratic_weights)

    def __call__(self, rho: Measure) -> float:
        rho = np.asarray(rho, dtype=float)
        return float(self.linear_weights @ rho + rho @ self.quadratic_weights @ rho) - self.normalization

    def to_dict(self) -> Dict[str, Any]:
        return {
            "linear_weights": self.linear_weights,
            "quadratic_weights": self.quadratic_weights,
            "normalization": self.normalization,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "StorageFunctional":
        w = np.asarray(data["linear_weights"], dtype=float)
        m = data.get("quadratic_weights")
        return cls(w, np.zeros((w.size, w.size)) if m is None else m, data.get("normalization", 0.0))


@dataclass(frozen=True)
class ClassKInftyFn:
    """alpha(x) = c * x**p with c > 0 and p >= 1."""

    c: float
    p: float = 1.0

    def __post_init__(self):
        if not self.c > 0:
            raise InputError(f"class-K-infinity coefficient must be > 0, got {self.c}")
        if self.p < 1:
            raise InputError(f"class-K-infinity exponent must be >= 1, got {self.p}")

    def __call__(self, x: float) -> float:
        return self.c * max(x, 0.0) ** self.p

    def to_dict(self) -> Dict[str, Any]:
        return {"c": self.c, "p": self.p}


@dataclass
class AuditPoint:
    rho: Measure
    policy: Policy
    residual: float
    condition: str

    def to_dict(self) -> Dict[str, Any]:
        return {
            "rho": self.rho,
            "policy": list(self.policy),
            "residual": self.residual,
            "condition": self.condition,
        }


@dataclass
class AuditResult:
    min_residual: float
    worst: Optional[AuditPoint]
    n_points: int
    n_policies: int

    @property
    def passed(self) -> bool:
        return self.min_residual >= -CERT_TOL


@dataclass
class SynthesisConfig:
    n_samples: int = 200
    seed: int = 0
    policy_cap: int = 64
    use_quadratic: bool = False
    audit_factor: int = 10
    c_min: float = 1e-6
    c_max: float = 1e3
    slope_fraction: float = 0.5
    weight_bound: float = 1e4
    threads: int = 1

    def __post_init__(self):
        if self.n_samples < 1:
            raise InputError("n_samples must be >= 1")
        if not 0.0 < self.slope_fraction <= 1.0:
            raise InputError(f"slope_fraction must be in (0, 1], got {self.slope_fraction}")
        if self.audit_factor < 1:
            raise InputError("audit_factor must be >= 1")


@dataclass
class FsdsdCertificate:
    storage: StorageFunctional
    alpha: ClassKInftyFn
    margin: float
    dissimilarity: DissimilarityKind
    sample_manifest: Dict[str, Any]
    status: CertificateStatus
    rho_star: Measure
    worst_point: Optional[AuditPoint] = None
    lp_objective: Optional[float] = None
    message: str = ""

    @property
    def certified(self) -> bool:
        return self.status is CertificateStatus.CERTIFIED

    def to_dict(self) -> Dict[str, Any]:
        return {
            "status": self.status,
            "storage": self.storage,
            "alpha": self.alpha,
            "margin": self.margin,
            "dissimilarity": self.dissimilarity,
            "sample_manifest": self.sample_manifest,
            "rho_star": self.rho_star,
            "worst_point": self.worst_point,
            "lp_objective": self.lp_objective,
            "message": self.message,
        }


@dataclass
class MeasureTrajectory:
    measures: np.ndarray
    dissimilarities: np.ndarray
    lyapunov: np.ndarray

    def __post_init__(self):
        if not (len(self.measures) == len(self.dissimilarities) == len(self.lyapunov)):
            raise InputError("trajectory columns must have equal length")

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(
            self.measures, columns=[f"rho_{s}" for s in range(self.measures.shape[1])]
        )
        frame.insert(0, "k", np.arange(len(self.measures)))
        frame["D"] = self.dissimilarities
        frame["V_bar"] = self.lyapunov
        return frame


def eval_storage(storage: StorageFunctional, rho: Measure) -> float:
    return storage(rho)


def rotated_cost(
    functional: StageCostFunctional,
    storage: StorageFunctional,
    mdp: FiniteMdp,
    rho: Measure,
    policy: Policy,
) -> float:
    """L[rho, pi] - gamma lambda[T_pi rho] + lambda[rho]."""
    nxt = apply_transition(mdp, policy, rho)
    return functional.evaluate(rho, policy) - mdp.gamma * storage(nxt) + storage(rho)


def rotated_value(value: ValueFn, storage: StorageFunctional, rho: Measure) -> float:
    """V_bar[rho] = V*[rho] + lambda[rho]."""
    return value(rho) + storage(rho)


def fsdsd_residuals(
    mdp: FiniteMdp,
    functional: StageCostFunctional,
    storage: StorageFunctional,
    alpha: ClassKInftyFn,
    value: ValueFn,
    dissim: DissimilarityKind,
    rho_star: Measure,
    rho: Measure,
    policy: Policy,
) -> Tuple[float, float]:
    """Slacks of both dissipation inequalities at (rho, pi); both >= 0 means they hold."""
    nxt = apply_transition(mdp, policy, rho)
    stage = functional.evaluate(rho, policy)
    decrease = alpha(dissim(rho, rho_star))
    lam_rho, lam_next = storage(rho), storage(nxt)
    r_a = stage - mdp.gamma * lam_next + lam_rho - decrease
    r_b = stage - lam_next + lam_rho + (mdp.gamma - 1.0) * value(nxt) - decrease
    return r_a, r_b


def storage_features(rho: Measure, rho_star: Measure, use_quadratic: bool) -> np.ndarray:
    """phi(rho) with lambda[rho] = theta . phi(rho) and phi(rho*) = 0."""
    rho = np.asarray(rho, dtype=float)
    rho_star = np.asarray(rho_star, dtype=float)
    parts = [rho - rho_star]
    if use_quadratic:
        iu = np.triu_indices(rho.size)
        scale = np.where(iu[0] == iu[1], 1.0, 2.0)
        parts.append(scale * (np.outer(rho, rho)[iu] - np.outer(rho_star, rho_star)[iu]))
    return np.concatenate(parts)


def storage_from_theta(
    theta: np.ndarray, n: int, rho_star: Measure, use_quadratic: bool
) -> StorageFunctional:
    w = np.array(theta[:n])
    m = np.zeros((n, n))
    if use_quadratic:
        iu = np.triu_indices(n)
        m[iu] = theta[n:]
        m = m + m.T - np.diag(np.diag(m))
    return StorageFunctional.normalized(w, m, rho_star)


def sample_policies(
    mdp: FiniteMdp, cap: int, rng: np.random.Generator, always: Sequence[Policy] = ()
) -> List[Policy]:
    """All policies when there are at most ``cap``, else a seeded random subset."""
    if policy_count(mdp) <= cap:
        return enumerate_policies(mdp, cap)
    chosen = set(tuple(p) for p in always)
    while len(chosen) < cap:
        chosen.add(tuple(int(a) for a in rng.integers(0, mdp.n_actions, size=mdp.n_states)))
    return sorted(chosen)


@dataclass
class _ConstraintSet:
    """Rows of residual = const + theta . grad - c * d."""

    const: np.ndarray
    grad: np.ndarray
    d: np.ndarray
    points: List[Tuple[int, Policy, str]] = field(default_factory=list)


def _build_constraints(
    mdp: FiniteMdp,
    functional: StageCostFunctional,
    value: ValueFn,
    dissim: DissimilarityKind,
    rho_star: Measure,
    measures: np.ndarray,
    policies: Sequence[Policy],
    use_quadratic: bool,
    threads: int,
) -> _ConstraintSet:
    gamma = mdp.gamma
    distances = parallel_map(lambda rho: dissim(rho, rho_star), list(measures), threads)
    features = [storage_features(rho, rho_star, use_quadratic) for rho in measures]

    def rows_for(index: int) -> List[Tuple[float, np.ndarray, float, Tuple[int, Policy, str]]]:
        rho = measures[index]
        out = []
        for policy in policies:
            nxt = rho @ closed_loop_matrix(mdp, policy)
            stage = functional.evaluate(rho, policy)
            phi_next = storage_features(nxt, rho_star, use_quadratic)
            row = features[index] - gamma * phi_next
            out.append((stage, row, distances[index], (index, policy, "stage")))
            out.append(
                (
                    stage + (gamma - 1.0) * value(nxt),
                    features[index] - phi_next,
                    distances[index],
                    (index, policy, "decrease"),
                )
            )
        return out

    rows = [row for chunk in parallel_map(rows_for, range(len(measures)), threads) for row in chunk]
    return _ConstraintSet(
        const=np.array([r[0] for r in rows]),
        grad=np.vstack([r[1] for r in rows]),
        d=np.array([r[2] for r in rows]),
        points=[r[3] for r in rows],
    )


def _residuals(constraints: _ConstraintSet, theta: np.ndarray, c: float) -> np.ndarray:
    return constraints.const + constraints.grad @ theta - c * constraints.d


def _solve_max_slack(
    constraints: _ConstraintSet, config: SynthesisConfig
) -> Tuple[bool, np.ndarray, float, float, str]:
    """Phase 1: maximize the minimum slack t over (theta, c, t)."""
    k = constraints.grad.shape[1]
    n_rows = constraints.const.size
    # -theta.grad + c d + t <= const
    a_ub = np.hstack([-constraints.grad, constraints.d[:, None], np.ones((n_rows, 1))])
    objective = np.zeros(k + 2)
    objective[-1] = -1.0
    bounds = [(-config.weight_bound, config.weight_bound)] * k + [(config.c_min, config.c_max), (None, 1.0)]
    res = linprog(objective, A_ub=a_ub, b_ub=constraints.const, bounds=bounds, method="highs")
    if res.status != 0:
        return False, np.zeros(k), config.c_min, -np.inf, str(res.message)
    return True, res.x[:k], float(res.x[k]), float(res.x[k + 1]), str(res.message)


def _solve_max_slope(
    constraints: _ConstraintSet, config: SynthesisConfig
) -> Optional[Tuple[np.ndarray, float]]:
    """Phase 2: with every row kept feasible, push the slope c as high as possible."""
    k = constraints.grad.shape[1]
    a_ub = np.hstack([-constraints.grad, constraints.d[:, None]])
    objective = np.zeros(k + 1)
    objective[-1] = -1.0
    bounds = [(-config.weight_bound, config.weight_bound)] * k + [(config.c_min, config.c_max)]
    res = linprog(objective, A_ub=a_ub, b_ub=constraints.const + CERT_TOL, bounds=bounds, method="highs")
    if res.status != 0:
        return None
    return res.x[:k], float(res.x[k])


def slope_cap(constraints: _ConstraintSet, config: SynthesisConfig) -> float:
    """Largest slope worth reporting: residual constants over the largest dissimilarity."""
    d_max = float(constraints.d.max()) if constraints.d.size else 0.0
    if d_max <= 0.0:
        return config.c_min
    scale = float(np.abs(constraints.const).max()) / d_max
    return float(np.clip(scale, config.c_min, config.c_max))


def _solve_min_weights(
    constraints: _ConstraintSet, c: float, config: SynthesisConfig
) -> Optional[np.ndarray]:
    """Phase 3: at a fixed slope, the storage weights of least l1 norm."""
    k = constraints.grad.shape[1]
    eye = np.eye(k)
    # variables (theta, u) with |theta| <= u
    a_ub = np.vstack(
        [
            np.hstack([-constraints.grad, np.zeros_like(constraints.grad)]),
            np.hstack([eye, -eye]),
            np.hstack([-eye, -eye]),
        ]
    )
    b_ub = np.concatenate([constraints.const - c * constraints.d + CERT_TOL, np.zeros(2 * k)])
    objective = np.concatenate([np.zeros(k), np.ones(k)])
    bounds = [(-config.weight_bound, config.weight_bound)] * k + [(0.0, config.weight_bound)] * k
    res = linprog(objective, A_ub=a_ub, b_ub=b_ub, bounds=bounds, method="highs")
    if res.status != 0:
        return None
    return res.x[:k]


def audit_storage(
    mdp: FiniteMdp,
    functional: StageCostFunctional,
    value: ValueFn,
    dissim: DissimilarityKind,
    rho_star: Measure,
    storage: StorageFunctional,
    alpha: ClassKInftyFn,
    measures: np.ndarray,
    policies: Sequence[Policy],
    threads: int = 1,
) -> AuditResult:
    """Minimum of both residuals over measures x policies."""

    def worst_at(rho: Measure) -> AuditPoint:
        best: Optional[AuditPoint] = None
        for policy in policies:
            r_a, r_b = fsdsd_residuals(mdp, functional, storage, alpha, value, dissim, rho_star, rho, policy)
            for residual, condition in ((r_a, "stage"), (r_b, "decrease")):
                if best is None or residual < best.residual:
                    best = AuditPoint(np.array(rho), tuple(policy), float(residual), condition)
        return best

    per_point = parallel_map(worst_at, list(measures), threads)
    worst = per_point[first_minimizer([p.residual for p in per_point], atol=0.0)] if per_point else None
    return AuditResult(
        min_residual=worst.residual if worst else np.inf,
        worst=worst,
        n_points=len(per_point),
        n_policies=len(policies),
    )


def synthesize_storage(
    mdp: FiniteMdp,
    functional: StageCostFunctional,
    value: ValueFn,
    rho_star: Measure,
    steady_policy: Policy,
    dissim: DissimilarityKind,
    config: Optional[SynthesisConfig] = None,
) -> FsdsdCertificate:
    """Search a storage functional satisfying both dissipation inequalities.

    ``functional`` must already be shifted so that L0 = 0 and ``value`` must
    evaluate V* of that shifted functional.
    """
    config = config or SynthesisConfig()
    n = mdp.n_states
    sample_rng, policy_rng, audit_rng = spawn_rngs(config.seed, 3)
    rho_star = np.asarray(rho_star, dtype=float)
    interior = sample_simplex(n, config.n_samples, sample_rng)
    measures = np.vstack([simplex_vertices(n), rho_star[None, :], interior])
    policies = sample_policies(mdp, config.policy_cap, policy_rng, always=[steady_policy])
    manifest: Dict[str, Any] = {
        "seed": config.seed,
        "n_samples": config.n_samples,
        "n_constraint_points": int(measures.shape[0]),
        "n_audit_points": config.audit_factor * config.n_samples,
        "policies": "all" if policy_count(mdp) <= config.policy_cap else f"random subset of {len(policies)}",
        "n_policies": len(policies),
        "use_quadratic": config.use_quadratic,
    }
    logger.info(f"building {2 * len(measures) * len(policies)} dissipation constraints")
    constraints = _build_constraints(
        mdp, functional, value, dissim, rho_star, measures, policies, config.use_quadratic, config.threads
    )

    def failed(
        status: CertificateStatus, theta: np.ndarray, c: float, objective: Optional[float], message: str
    ) -> FsdsdCertificate:
        residuals = _residuals(constraints, theta, c)
        index = int(np.argmin(residuals))
        point_index, policy, condition = constraints.points[index]
        worst = AuditPoint(measures[point_index], policy, float(residuals[index]), condition)
        logger.warning(f"storage synthesis: {status.value} ({message})")
        return FsdsdCertificate(
            storage=storage_from_theta(theta, n, rho_star, config.use_quadratic),
            alpha=ClassKInftyFn(c),
            margin=float(residuals.min()),
            dissimilarity=dissim,
            sample_manifest=manifest,
            status=status,
            rho_star=rho_star,
            worst_point=worst,
            lp_objective=objective,
            message=message,
        )

    ok, theta, c, slack, message = _solve_max_slack(constraints, config)
    if not ok:
        return failed(CertificateStatus.NOT_CERTIFIED, theta, c, None, f"LP failed: {message}")
    if slack < -CERT_TOL:
        return failed(CertificateStatus.NOT_CERTIFIED, theta, c, slack, f"best minimum slack {slack:.3e} < 0")

    refined = _solve_max_slope(constraints, config)
    if refined is not None:
        theta, c_top = refined
        c_fit = min(c_top, slope_cap(constraints, config))
        lean = _solve_min_weights(constraints, c_fit, config)
        if lean is not None:
            theta = lean
        # alpha keeps (1 - slope_fraction) c_fit D of slack on every row
        c = max(config.c_min, config.slope_fraction * c_fit)
    storage = storage_from_theta(theta, n, rho_star, config.use_quadratic)
    alpha = ClassKInftyFn(c)
    training_margin = float(_residuals(constraints, theta, c).min())

    audit_measures = sample_simplex(n, config.audit_factor * config.n_samples, audit_rng)
    audit = audit_storage(
        mdp, functional, value, dissim, rho_star, storage, alpha, audit_measures, policies, config.threads
    )
    margin = min(training_margin, audit.min_residual)
    if not audit.passed:
        logger.warning(f"fresh-sample audit failed with residual {audit.min_residual:.3e}")
        return FsdsdCertificate(
            storage=storage,
            alpha=alpha,
            margin=margin,
            dissimilarity=dissim,
            sample_manifest=manifest,
            status=CertificateStatus.INCONCLUSIVE,
            rho_star=rho_star,
            worst_point=audit.worst,
            lp_objective=slack,
            message="constraints hold on the synthesis sample but fail on the fresh audit sample",
        )
    logger.info(f"certified: alpha slope {c:.6g}, margin {margin:.3e}")
    return FsdsdCertificate(
        storage=storage,
        alpha=alpha,
        margin=margin,
        dissimilarity=dissim,
        sample_manifest=manifest,
        status=CertificateStatus.CERTIFIED,
        rho_star=rho_star,
        worst_point=audit.worst,
        lp_objective=slack,
        message="certified on the audited set",
    )


@dataclass
class RotatedEquivalenceReport:
    n_test: int
    violations: List[Dict[str, Any]]
    max_value_gap: float
    max_telescoping_gap: float

    @property
    def passed(self) -> bool:
        return not self.violations

    def to_dict(self) -> Dict[str, Any]:
        return {
            "passed": self.passed,
            "n_test": self.n_test,
            "violations": self.violations,
            "max_value_gap": self.max_value_gap,
            "max_telescoping_gap": self.max_telescoping_gap,
        }


def check_rotated_equivalence(
    mdp: FiniteMdp,
    functional: StageCostFunctional,
    storage: StorageFunctional,
    value: ValueFn,
    n_test: int = 20,
    seed: int = 0,
    pi_star: Optional[Policy] = None,
    policy_cap: int = 4096,
    tol: float = 1e-7,
    threads: int = 1,
) -> RotatedEquivalenceReport:
    """Rotated OCP keeps the optimal policy and shifts the value by lambda[rho0]."""
    policies = enumerate_policies(mdp, policy_cap)
    (rng,) = spawn_rngs(seed, 1)
    starts = sample_simplex(mdp.n_states, n_test, rng)

    def rotated_stage(rho: Measure, policy: Policy) -> float:
        return rotated_cost(functional, storage, mdp, rho, policy)

    violations: List[Dict[str, Any]] = []
    max_value_gap = 0.0
    max_telescoping_gap = 0.0
    for rho0 in starts:
        original = parallel_map(
            lambda p: discounted_rollout(mdp, functional.evaluate, p, rho0, 1e-10).value, policies, threads
        )
        rotated = parallel_map(
            lambda p: discounted_rollout(mdp, rotated_stage, p, rho0, 1e-10).value, policies, threads
        )
        lam0 = storage(rho0)
        telescoping = max(abs(r - o - lam0) for r, o in zip(rotated, original))
        max_telescoping_gap = max(max_telescoping_gap, telescoping)
        reference = pi_star if pi_star is not None else policies[first_minimizer(original, atol=1e-9)]
        best_rotated = policies[first_minimizer(rotated, atol=1e-9)]
        min_rotated = min(rotated)
        ref_rotated = rotated[policies.index(tuple(reference))]
        value_gap = abs(min_rotated - (value(rho0) + lam0))
        max_value_gap = max(max_value_gap, value_gap)
        if best_rotated != tuple(reference) and ref_rotated > min_rotated + tol:
            violations.append(
                {
                    "rho0": rho0,
                    "kind": "policy",
                    "rotated_argmin": list(best_rotated),
                    "expected": list(reference),
                }
            )
        if value_gap > tol:
            violations.append({"rho0": rho0, "kind": "value", "gap": value_gap})
        if telescoping > tol:
            violations.append({"rho0": rho0, "kind": "telescoping", "gap": telescoping})
    return RotatedEquivalenceReport(n_test, violations, max_value_gap, max_telescoping_gap)


@dataclass
class TrajectoryConfig:
    n_trajectories: int = 20
    steps: int = 200
    seed: int = 0
    include_rho_star: bool = True


def simulate_measures(
    mdp: FiniteMdp,
    policy: Policy,
    rho0: Measure,
    steps: int,
    dissim: DissimilarityKind,
    rho_star: Measure,
    value: Optional[ValueFn] = None,
    storage: Optional[StorageFunctional] = None,
) -> MeasureTrajectory:
    """Closed-loop measure trajectory with D(rho_k || rho*) and V_bar[rho_k] columns."""
    matrix = closed_loop_matrix(mdp, policy)
    measures = [np.asarray(rho0, dtype=float)]
    for _ in range(steps):
        measures.append(measures[-1] @ matrix)
    stacked = np.vstack(measures)
    distances = np.array([dissim(rho, rho_star) for rho in stacked])
    lyapunov = np.array(
        [(value(rho) if value else 0.0) + (storage(rho) if storage else 0.0) for rho in stacked]
    )
    return MeasureTrajectory(stacked, distances, lyapunov)


def lyapunov_tolerance(v_bar: Sequence[float]) -> float:
    """LYAPUNOV_TOL scaled by the largest |V_bar| along a trajectory."""
    scale = float(np.abs(np.asarray(v_bar, dtype=float)).max()) if len(v_bar) else 0.0
    return LYAPUNOV_TOL * max(1.0, scale)


@dataclass
class LyapunovReport:
    lower_violations: List[Dict[str, Any]]
    descent_violations: List[Dict[str, Any]]
    alpha1: Optional[ClassKInftyFn]
    envelope_violated: bool
    final_dissimilarities: List[float]
    trajectories: List[MeasureTrajectory] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not (self.lower_violations or self.descent_violations or self.envelope_violated)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "passed": self.passed,
            "lower_violations": self.lower_violations,
            "descent_violations": self.descent_violations,
            "alpha1": self.alpha1,
            "envelope_violated": self.envelope_violated,
            "final_dissimilarities": self.final_dissimilarities,
        }


def check_lyapunov(
    mdp: FiniteMdp,
    storage: StorageFunctional,
    alpha: ClassKInftyFn,
    value: ValueFn,
    dissim: DissimilarityKind,
    rho_star: Measure,
    policy: Policy,
    config: Optional[TrajectoryConfig] = None,
    alpha1_exponent: float = 1.0,
) -> LyapunovReport:
    """Sandwich bounds and per-step descent of V_bar = V* + lambda along closed-loop trajectories.

    alpha1 is fitted as the smallest c1 with V_bar <= c1 D^p over every visited measure.
    """
    config = config or TrajectoryConfig()
    (rng,) = spawn_rngs(config.seed, 1)
    starts = list(sample_simplex(mdp.n_states, config.n_trajectories, rng))
    if config.include_rho_star:
        starts.insert(0, np.asarray(rho_star, dtype=float))

    lower: List[Dict[str, Any]] = []
    descent: List[Dict[str, Any]] = []
    trajectories: List[MeasureTrajectory] = []
    c1 = 0.0
    envelope_violated = False
    for index, rho0 in enumerate(starts):
        traj = simulate_measures(mdp, policy, rho0, config.steps, dissim, rho_star, value, storage)
        trajectories.append(traj)
        d, v_bar = traj.dissimilarities, traj.lyapunov
        tol = lyapunov_tolerance(v_bar)
        for k in range(len(d)):
            if alpha(d[k]) > v_bar[k] + tol:
                lower.append({"trajectory": index, "k": k, "alpha_D": alpha(d[k]), "V_bar": v_bar[k]})
            if d[k] > D_FLOOR:
                c1 = max(c1, v_bar[k] / d[k] ** alpha1_exponent)
            elif v_bar[k] > tol:
                envelope_violated = True
            if k + 1 < len(d) and v_bar[k + 1] - v_bar[k] > -alpha(d[k]) + tol:
                descent.append(
                    {"trajectory": index, "k": k, "decrease": v_bar[k + 1] - v_bar[k], "bound": -alpha(d[k])}
                )
    alpha1 = None if envelope_violated else ClassKInftyFn(max(c1, alpha.c), alpha1_exponent)
    if envelope_violated:
        logger.warning("V_bar stays positive where D vanishes: no finite upper envelope")
    return LyapunovReport(
        lower_violations=lower,
        descent_violations=descent,
        alpha1=alpha1,
        envelope_violated=envelope_violated,
        final_dissimilarities=[float(t.dissimilarities[-1]) for t in trajectories],
        trajectories=trajectories,
    )


@dataclass
class StabilityConfig:
    n_samples: int = 20
    steps: int = 200
    burn_in: int = 0
    seed: int = 0
    delta_factors: Tuple[float, ...] = (1.0, 0.5, 0.1, 0.01, 0.001)


@dataclass
class DStabilityReport:
    accepted_delta: Dict[float, Optional[float]]
    final_dissimilarities: List[float]
    stable: bool
    asymptotically_stable: bool

    def to_dict(self) -> Dict[str, Any]:
        return {
            "accepted_delta": {str(eps): delta for eps, delta in self.accepted_delta.items()},
            "final_dissimilarities": self.final_dissimilarities,
            "stable": self.stable,
            "asymptotically_stable": self.asymptotically_stable,
        }


def _start_within(
    dissim: DissimilarityKind, rho_star: np.ndarray, direction: np.ndarray, delta: float
) -> Optional[np.ndarray]:
    """Shrink rho* + t (direction - rho*) until D falls below delta."""
    t = 1.0
    for _ in range(60):
        rho = rho_star + t * (direction - rho_star)
        if dissim(rho, rho_star) < delta:
            return rho
        t *= 0.5
    return None


def check_d_stability(
    mdp: FiniteMdp,
    policy: Policy,
    rho_star: Measure,
    dissim: DissimilarityKind,
    eps_grid: Sequence[float] = (0.5, 0.1, 0.01),
    config: Optional[StabilityConfig] = None,
    asymptotic_tol: float = 1e-6,
) -> DStabilityReport:
    """Empirical (epsilon, delta) audit of D-stability around rho*."""
    config = config or StabilityConfig()
    (rng,) = spawn_rngs(config.seed, 1)
    rho_star = np.asarray(rho_star, dtype=float)
    directions = sample_simplex(mdp.n_states, config.n_samples, rng)
    accepted: Dict[float, Optional[float]] = {}
    finals: List[float] = []
    for eps in eps_grid:
        accepted[eps] = None
        for factor in config.delta_factors:
            delta = eps * factor
            candidates = (_start_within(dissim, rho_star, d, delta) for d in directions)
            starts = [rho_star] + [s for s in candidates if s is not None]
            ok = True
            for rho0 in starts:
                traj = simulate_measures(mdp, policy, rho0, config.steps, dissim, rho_star)
                if np.any(traj.dissimilarities[config.burn_in :] >= eps):
                    ok = False
                    break
            if ok:
                accepted[eps] = delta
                break
    for direction in directions:
        traj = simulate_measures(mdp, policy, direction, config.steps, dissim, rho_star)
        finals.append(float(traj.dissimilarities[-1]))
    return DStabilityReport(
        accepted_delta=accepted,
        final_dissimilarities=finals,
        stable=all(delta is not None for delta in accepted.values()),
        asymptotically_stable=all(f < asymptotic_tol for f in finals),
    )
