"""Dissimilarity measures between probability vectors on a finite state set."""
from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, Optional

import numpy as np
from scipy.optimize import linprog
from scipy.sparse import identity, kron, vstack
from scipy.special import rel_entr

from .errors import DomainError, InputError, NumericalError
from .mdp import Measure

METRIC_ATOL = 1e-12

# HiGHS defaults are 1e-7.
_HIGHS_OPTIONS = {"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10}


class DissimilarityName(str, Enum):
    TOTAL_VARIATION = "tv"
    KULLBACK_LEIBLER = "kl"
    WASSERSTEIN1 = "w1"


def line_metric(n: int) -> np.ndarray:
    """d(i, j) = |i - j|."""
    idx = np.arange(n, dtype=float)
    return np.abs(idx[:, None] - idx[None, :])


def validate_ground_metric(metric: np.ndarray) -> None:
    metric = np.asarray(metric, dtype=float)
    if metric.ndim != 2 or metric.shape[0] != metric.shape[1]:
        raise DomainError(f"ground metric must be square, got shape {metric.shape}")
    if not np.all(np.isfinite(metric)) or np.any(metric < 0):
        raise DomainError("ground metric entries must be finite and non-negative")
    if np.abs(np.diag(metric)).max() > METRIC_ATOL:
        raise DomainError("ground metric must have a zero diagonal")
    if np.abs(metric - metric.T).max() > METRIC_ATOL:
        raise DomainError("ground metric must be symmetric")
    # shortest two-hop path through any k must not beat the direct entry
    two_hop = np.min(metric[:, :, None] + metric[None, :, :], axis=1)
    if np.any(metric > two_hop + METRIC_ATOL):
        raise DomainError("ground metric violates the triangle inequality")


@dataclass(frozen=True, eq=False)
class DissimilarityKind:
    kind: DissimilarityName = DissimilarityName.TOTAL_VARIATION
    ground_metric: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", DissimilarityName(self.kind))
        if self.kind is DissimilarityName.WASSERSTEIN1:
            if self.ground_metric is None:
                raise InputError("Wasserstein-1 requires a ground metric")
            metric = np.array(self.ground_metric, dtype=float)
            validate_ground_metric(metric)
            metric.setflags(write=False)
            object.__setattr__(self, "ground_metric", metric)

    @classmethod
    def from_name(cls, name: str, n_states: int, metric: Optional[np.ndarray] = None) -> "DissimilarityKind":
        """CLI helper; Wasserstein-1 defaults to the line metric |i - j|."""
        try:
            kind = DissimilarityName(name)
        except ValueError:
            raise InputError(f"unknown dissimilarity '{name}' (expected tv, kl or w1)")
        if kind is DissimilarityName.WASSERSTEIN1 and metric is None:
            metric = line_metric(n_states)
        return cls(kind, metric if kind is DissimilarityName.WASSERSTEIN1 else None)

    def __call__(self, rho: Measure, rho_prime: Measure) -> float:
        return dissimilarity(self, rho, rho_prime)

    def to_dict(self) -> Dict[str, Any]:
        payload: Dict[str, Any] = {"kind": self.kind}
        if self.ground_metric is not None:
            payload["ground_metric"] = self.ground_metric
        return payload


def total_variation(rho: Measure, rho_prime: Measure) -> float:
    return 0.5 * float(np.abs(np.asarray(rho) - np.asarray(rho_prime)).sum())


def kullback_leibler(rho: Measure, rho_prime: Measure) -> float:
    rho = np.asarray(rho, dtype=float)
    rho_prime = np.asarray(rho_prime, dtype=float)
    if np.any((rho > 0) & (rho_prime <= 0)):
        raise DomainError("KL(rho||rho') undefined: rho is not absolutely continuous w.r.t. rho'")
    return max(float(rel_entr(rho, rho_prime).sum()), 0.0)


def wasserstein1(rho: Measure, rho_prime: Measure, metric: np.ndarray) -> float:
    """Exact optimal-transport cost as an LP over the n x n transport polytope."""
    n = metric.shape[0]
    ones = np.ones((1, n))
    eye = identity(n, format="csr")
    # row sums of the plan equal rho, column sums equal rho'
    a_eq = vstack([kron(eye, ones), kron(ones, eye)]).tocsr()
    b_eq = np.concatenate([np.asarray(rho, dtype=float), np.asarray(rho_prime, dtype=float)])
    res = linprog(
        metric.reshape(-1),
        A_eq=a_eq,
        b_eq=b_eq,
        bounds=(0, None),
        method="highs-ds",
        options=_HIGHS_OPTIONS,
    )
    if res.status != 0:
        raise NumericalError(f"transport LP failed: {res.message}")
    return max(float(res.fun), 0.0)


def dissimilarity(kind: DissimilarityKind, rho: Measure, rho_prime: Measure) -> float:
    """D(rho || rho') >= 0 with D(rho || rho) = 0."""
    if kind.kind is DissimilarityName.TOTAL_VARIATION:
        return total_variation(rho, rho_prime)
    if kind.kind is DissimilarityName.KULLBACK_LEIBLER:
        return kullback_leibler(rho, rho_prime)
    return wasserstein1(rho, rho_prime, kind.ground_metric)
