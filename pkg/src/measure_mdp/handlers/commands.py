"""Command handlers: each returns a (report, exit_code) pair for main() to print."""
import logging
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from ..config.settings import ToolConfig
from ..core.dissimilarity import DissimilarityKind, DissimilarityName
from ..core.dissipativity import (
    ClassKInftyFn,
    StorageFunctional,
    StabilityConfig,
    SynthesisConfig,
    TrajectoryConfig,
    check_d_stability,
    check_lyapunov,
    check_rotated_equivalence,
    lyapunov_tolerance,
    simulate_measures,
    synthesize_storage,
)
from ..core.errors import InputError, LearningFailure, UsageError
from ..core.functionals import (
    LinearValueOracle,
    RolloutValueOracle,
    StageCostFunctional,
    optimal_steady_state,
    relative_mdp,
    solve_optimal_linear,
    solve_optimal_nonlinear,
)
from ..core.learning import (
    LearningConfig,
    LiftConfig,
    QParameterization,
    fitted_q_learning,
    theta_from_learned,
)
from ..core.mdp import (
    FiniteMdp,
    Measure,
    dirac,
    make_measure,
    make_policy,
    policy_count,
    require_valid,
    uniform_measure,
    validate_mdp,
)
from ..core.ocp import AuditConfig, check_theta_storage
from .artifacts import ArtifactWriter, RunManifest, load_json, load_metric, load_problem

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_DOMAIN = 1
EXIT_USAGE = 2
EXIT_NOT_CERTIFIED = 3
EXIT_LEARNING = 4

HISTORY_COLUMNS = ["iteration", "sup_error", "ls_residual", "change"]

Report = Tuple[Dict[str, Any], int]


def parse_vector(text: str) -> List[float]:
    """'0.5,0.5' -> [0.5, 0.5]."""
    try:
        return [float(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise InputError(f"expected comma-separated numbers, got '{text}'")


def _functional(
    mdp: FiniteMdp, problem: Dict[str, Any], kind: Optional[str], beta: Optional[float]
) -> StageCostFunctional:
    descriptor = dict(problem.get("functional", {}))
    if kind is not None:
        descriptor["kind"] = kind
    if beta is not None:
        descriptor["beta"] = beta
    return StageCostFunctional.from_descriptor(descriptor, mdp)


def _value_oracle(mdp: FiniteMdp, shifted: StageCostFunctional, config: ToolConfig):
    """V* of the shifted functional plus pi* when it is state-feedback (linear case)."""
    if shifted.is_linear:
        solution = solve_optimal_linear(relative_mdp(mdp, shifted.shift))
        return LinearValueOracle(solution), solution.pi_star
    return RolloutValueOracle(mdp, shifted, policy_cap=config.policy_cap, threads=config.threads), None


def _manifest(command: str, argv: Sequence[str], seed: Optional[int], *inputs: Optional[str]) -> RunManifest:
    manifest = RunManifest(command=command, argv=list(argv), seed=seed)
    for path in inputs:
        manifest.add_input(path)
    return manifest


def _require_kl_support(dissim: DissimilarityKind, rho_star: Measure) -> None:
    """KL(rho || rho*) is finite on the whole simplex only when rho* has full support."""
    if dissim.kind is not DissimilarityName.KULLBACK_LEIBLER:
        return
    empty = [int(s) for s in np.flatnonzero(np.asarray(rho_star) <= 0.0)]
    if empty:
        raise UsageError(
            f"--dissimilarity kl needs rho* with full support, but rho* has no mass on state(s) {empty}; "
            "use tv or w1 for this problem"
        )


def cmd_validate(problem_path: str, out_dir: str, argv: Sequence[str] = ()) -> Report:
    mdp, _ = load_problem(problem_path)
    violations = validate_mdp(mdp)
    report = {
        "problem": problem_path,
        "valid": not violations,
        "violations": violations,
        "n_states": mdp.n_states,
        "n_actions": mdp.n_actions,
    }
    writer = ArtifactWriter(out_dir, _manifest("validate", argv, None, problem_path))
    writer.write_json("report.json", report)
    writer.finalize()
    return report, EXIT_OK if not violations else EXIT_DOMAIN


def cmd_solve(
    problem_path: str,
    out_dir: str,
    config: ToolConfig,
    argv: Sequence[str] = (),
    functional_kind: Optional[str] = None,
    beta: Optional[float] = None,
    rho0: Optional[str] = None,
    seed: int = 0,
) -> Report:
    mdp, problem = load_problem(problem_path)
    require_valid(mdp)
    functional = _functional(mdp, problem, functional_kind, beta)
    steady = optimal_steady_state(mdp, functional, config.policy_cap, config.threads)
    report: Dict[str, Any] = {
        "rho_star": steady.rho_star,
        "l0": steady.l0,
        "steady_policy": list(steady.policy),
        "steady_unique": steady.unique,
    }
    if functional.is_linear:
        solution = solve_optimal_linear(mdp)
        report.update(
            v_star=solution.v_star,
            q_star=solution.q_star,
            pi_star=list(solution.pi_star),
            residual=solution.residual,
        )
    else:
        start = uniform_measure(mdp.n_states) if rho0 is None else make_measure(parse_vector(rho0))
        value, policy = solve_optimal_nonlinear(
            mdp, functional, start, policy_cap=config.policy_cap, threads=config.threads
        )
        vertex = [
            solve_optimal_nonlinear(mdp, functional, dirac(s, mdp.n_states), policy_cap=config.policy_cap)[0]
            for s in range(mdp.n_states)
        ]
        report.update(
            functional=functional, rho0=start, value=value, pi_star=list(policy), vertex_values=vertex
        )

    writer = ArtifactWriter(out_dir, _manifest("solve", argv, seed, problem_path))
    writer.write_json("solution.json", report)
    writer.finalize()
    return report, EXIT_OK


def cmd_certify(
    problem_path: str,
    out_dir: str,
    config: ToolConfig,
    argv: Sequence[str] = (),
    dissimilarity: str = "tv",
    metric_path: Optional[str] = None,
    samples: int = 200,
    seed: int = 0,
    use_quadratic: bool = False,
    n_test: int = 20,
    steps: int = 200,
) -> Report:
    mdp, problem = load_problem(problem_path)
    require_valid(mdp)
    functional = _functional(mdp, problem, None, None)
    steady = optimal_steady_state(mdp, functional, config.policy_cap, config.threads)
    if not steady.unique:
        logger.warning("optimal steady state is not unique; certifying the measure reached from uniform")
    shifted = steady.shifted(functional)
    value, pi_star = _value_oracle(mdp, shifted, config)
    dissim = DissimilarityKind.from_name(dissimilarity, mdp.n_states, load_metric(metric_path))
    _require_kl_support(dissim, steady.rho_star)

    certificate = synthesize_storage(
        mdp,
        shifted,
        value,
        steady.rho_star,
        steady.policy,
        dissim,
        SynthesisConfig(
            n_samples=samples,
            seed=seed,
            policy_cap=min(64, config.policy_cap),
            use_quadratic=use_quadratic,
            threads=config.threads,
        ),
    )
    writer = ArtifactWriter(out_dir, _manifest("certify", argv, seed, problem_path, metric_path))
    writer.write_json("certificate.json", certificate)
    report: Dict[str, Any] = {
        "status": certificate.status,
        "margin": certificate.margin,
        "worst_point": certificate.worst_point,
    }

    if certificate.certified:
        if policy_count(mdp) <= config.policy_cap:
            equivalence = check_rotated_equivalence(
                mdp, shifted, certificate.storage, value, n_test=n_test, seed=seed, pi_star=pi_star,
                policy_cap=config.policy_cap, threads=config.threads,
            )
            writer.write_json("rotated_equivalence.json", equivalence)
            report["rotated_equivalence_passed"] = equivalence.passed
        else:
            logger.warning("policy count exceeds the enumeration cap; skipping the rotated-OCP check")
        closed_loop = pi_star if pi_star is not None else steady.policy
        lyapunov = check_lyapunov(
            mdp, certificate.storage, certificate.alpha, value, dissim, steady.rho_star, closed_loop,
            TrajectoryConfig(n_trajectories=n_test, steps=steps, seed=seed),
        )
        writer.write_json("lyapunov.json", lyapunov)
        frames = [t.to_frame().assign(trajectory=i) for i, t in enumerate(lyapunov.trajectories)]
        writer.write_csv("trajectories.csv", pd.concat(frames, ignore_index=True))
        report["lyapunov_passed"] = lyapunov.passed
    writer.finalize()
    return report, EXIT_OK if certificate.certified else EXIT_NOT_CERTIFIED


def cmd_learn(
    problem_path: str,
    learning_config_path: str,
    out_dir: str,
    config: ToolConfig,
    argv: Sequence[str] = (),
    seed: Optional[int] = None,
    dissimilarity: str = "tv",
    alpha0: float = 1e-6,
    horizon: int = 1,
) -> Report:
    mdp, problem = load_problem(problem_path)
    require_valid(mdp)
    raw_config = load_json(learning_config_path)
    if not isinstance(raw_config, dict):
        raise InputError(f"{learning_config_path}: learning config must be an object")
    learning_config = LearningConfig.from_dict(raw_config)
    if seed is not None:
        learning_config.seed = seed
    functional = _functional(mdp, problem, None, None)
    if not functional.is_linear:
        raise InputError("learning works on the classic (linear) functional only")
    steady = optimal_steady_state(mdp, functional, config.policy_cap, config.threads)
    shifted = steady.shifted(functional)
    relative = relative_mdp(mdp, steady.l0)
    solution = solve_optimal_linear(relative)
    value = LinearValueOracle(solution)

    manifest = _manifest("learn", argv, learning_config.seed, problem_path, learning_config_path)
    writer = ArtifactWriter(out_dir, manifest)
    try:
        result = fitted_q_learning(relative, QParameterization.zeros(mdp), learning_config, solution.q_star)
    except LearningFailure as e:
        writer.write_csv("history.csv", pd.DataFrame(e.history, columns=HISTORY_COLUMNS))
        writer.finalize()
        return {"error": str(e), "kind": e.kind, "iterations": len(e.history)}, EXIT_LEARNING
    writer.write_json("learned.json", result)
    writer.write_csv("history.csv", result.history_frame())

    dissim = DissimilarityKind.from_name(dissimilarity, mdp.n_states)
    _require_kl_support(dissim, steady.rho_star)
    alpha = ClassKInftyFn(alpha0)
    candidate = theta_from_learned(
        mdp, shifted, result.param, steady.rho_star, dissim, alpha,
        LiftConfig(horizon=horizon, seed=learning_config.seed, policy_cap=config.policy_cap),
    )
    writer.write_json("theta.json", candidate)
    report: Dict[str, Any] = {
        "final_error": result.final_error,
        "unvisited": [list(pair) for pair in result.unvisited],
        "candidate_accepted": candidate.accepted,
    }
    if candidate.theta is not None:
        theta_audit = check_theta_storage(
            mdp, shifted, candidate.theta, value, steady.rho_star, dissim, alpha,
            AuditConfig(seed=learning_config.seed, policy_cap=config.policy_cap),
        )
        writer.write_json("theta_storage.json", theta_audit)
        report["theta_storage_passed"] = theta_audit.passed
    writer.finalize()
    return report, EXIT_OK


def cmd_simulate(
    problem_path: str,
    out_dir: str,
    config: ToolConfig,
    argv: Sequence[str] = (),
    rho0: Optional[Sequence[str]] = None,
    steps: int = 200,
    dissimilarity: str = "tv",
    metric_path: Optional[str] = None,
    certificate_path: Optional[str] = None,
    rho_star: Optional[str] = None,
    policy: Optional[str] = None,
    eps_grid: Optional[Sequence[float]] = None,
) -> Report:
    mdp, problem = load_problem(problem_path)
    require_valid(mdp)
    certificate: Dict[str, Any] = load_json(certificate_path) if certificate_path else {}
    if rho_star is not None:
        target = make_measure(parse_vector(rho_star))
    elif "rho_star" in certificate:
        target = make_measure(certificate["rho_star"])
    else:
        raise InputError("simulate needs rho* from --certificate or --rho-star")
    if target.size != mdp.n_states:
        raise InputError(f"rho* has {target.size} entries, MDP has {mdp.n_states} states")

    functional = _functional(mdp, problem, None, None)
    steady = optimal_steady_state(mdp, functional, config.policy_cap, config.threads)
    value, pi_star = _value_oracle(mdp, steady.shifted(functional), config)
    if policy is not None:
        closed_loop = make_policy([int(a) for a in parse_vector(policy)], mdp)
    elif pi_star is not None:
        closed_loop = pi_star
    else:
        closed_loop = steady.policy
    storage = StorageFunctional.from_dict(certificate["storage"]) if "storage" in certificate else None
    alpha = ClassKInftyFn(**certificate["alpha"]) if "alpha" in certificate else None
    kind = certificate.get("dissimilarity", {}).get("kind", dissimilarity) if certificate else dissimilarity
    dissim = DissimilarityKind.from_name(kind, mdp.n_states, load_metric(metric_path))
    _require_kl_support(dissim, target)

    if rho0:
        starts = [make_measure(parse_vector(text)) for text in rho0]
    else:
        starts = [uniform_measure(mdp.n_states)]
    manifest = _manifest("simulate", argv, None, problem_path, certificate_path, metric_path)
    writer = ArtifactWriter(out_dir, manifest)
    summaries = []
    for index, start in enumerate(starts):
        if start.size != mdp.n_states:
            raise InputError(f"rho0 #{index} has {start.size} entries, MDP has {mdp.n_states} states")
        trajectory = simulate_measures(mdp, closed_loop, start, steps, dissim, target, value, storage)
        writer.write_csv(f"trajectory_{index}.csv", trajectory.to_frame())
        summary: Dict[str, Any] = {"rho0": start, "final_D": float(trajectory.dissimilarities[-1])}
        if alpha is not None:
            v_bar, d = trajectory.lyapunov, trajectory.dissimilarities
            bound = -np.array([alpha(x) for x in d[:-1]]) + lyapunov_tolerance(v_bar)
            summary["descent_violations"] = int(np.sum(np.diff(v_bar) > bound))
        summaries.append(summary)
    stability = check_d_stability(
        mdp, closed_loop, target, dissim, tuple(eps_grid or (0.5, 0.1, 0.01)), StabilityConfig(steps=steps)
    )
    report = {
        "policy": list(closed_loop),
        "rho_star": target,
        "steps": steps,
        "trajectories": summaries,
        "d_stability": stability,
    }
    writer.write_json("summary.json", report)
    writer.finalize()
    return report, EXIT_OK


__all__ = [
    "EXIT_OK",
    "EXIT_DOMAIN",
    "EXIT_USAGE",
    "EXIT_NOT_CERTIFIED",
    "EXIT_LEARNING",
    "cmd_validate",
    "cmd_solve",
    "cmd_certify",
    "cmd_learn",
    "cmd_simulate",
]
