"""RSDP, PF-SDP and APF-SDP estimators plus the excessive-penalty threshold.

All three solve the same lifted problem::

    min  Tr(C X) / c^4 + eta * sum_{i<N} X_ii
    s.t. the localization constraints,  X PSD

in SI units (RSDP is eta = 0). Dividing the data term by c^4 is the
(v.v - c^2)^2 factor of the full error covariance at v = 0; it makes
Tr(C X) / c^4 close to a chi-square variable with M - 2p degrees of
freedom, so the penalty scale does not depend on the units of time. The
solver works in scaled units (see :class:`tdsdp.linearize.Scaling`) where
the same problem reads min Tr(C' X') + eta Tr(P X') with P = diag(S^2).

Every solve adds a vanishing tie-break penalty (default 1e-12) to eta. The
relaxation has a zero-cost recession direction (moving u off the range of
G while shifting every d_i and u.v together), so without it the RSDP optimum
is not unique and rounding in C decides where the iterates drift.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .forward import make_rng
from .linearize import (
    LinearSystem,
    build_G,
    build_constraints,
    build_system,
    param_size,
    penalty_matrix,
)
from .sdp import SdpProblem, SdpSolution, Status, eigen_ratio, extract_solution, solve

__all__ = [
    "EstimateResult",
    "EstimationError",
    "PenaltyConfig",
    "apf_sdp",
    "build_error_propagation",
    "distance_jacobian",
    "excessive_penalty_threshold",
    "lemma1_witness",
    "param_jacobian",
    "pf_sdp",
    "rsdp",
]

TIE_BREAK = 1e-12
# With zero noise the weight is the identity (in scaled units), which on its
# own would rank the data term like unit noise; it is multiplied by this
# factor (a delay spread of about 3e-5 scaled time units) so that the penalty
# stays a small perturbation. Much larger values push the cost's dynamic
# range past what the interior-point iteration resolves in double precision.
NOISELESS_WEIGHT = 1e9


class EstimationError(RuntimeError):
    """An estimator could not produce a solution; ``trace`` holds the partial log."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace or [])


@dataclass(frozen=True)
class PenaltyConfig:
    eta0: float = 1e-6
    gamma: float = 10.0
    alpha: float = 5.0
    delta: float = 1e-5
    quantile: float = 0.99
    mc_samples: int = 100_000
    max_outer: int = 50

    def __post_init__(self):
        if not self.eta0 > 0:
            raise ValueError("eta0 must be positive")
        if not self.gamma > 1:
            raise ValueError("gamma must be > 1")
        if not self.alpha > 1:
            raise ValueError("alpha must be > 1")
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if not 0 < self.quantile < 1:
            raise ValueError("quantile must lie in (0, 1)")
        if self.mc_samples < 1 or self.max_outer < 1:
            raise ValueError("mc_samples and max_outer must be positive")


@dataclass
class EstimateResult:
    """Estimator output. ``X`` is the solver matrix in scaled units."""

    u_hat: np.ndarray
    v_hat: np.ndarray
    x_hat: np.ndarray
    X: np.ndarray
    tau: float
    objective: float
    penalty: float
    eta_final: float
    delta: float
    rank_one: bool
    status: Status
    iterations: int
    epsilon_used: float | None = None
    converged: bool = True
    # Worst solver diagnostics over every SDP solved for this estimate.
    max_gap: float = 0.0
    max_primal_infeasibility: float = 0.0
    max_dual_infeasibility: float = 0.0
    trace: list = field(default_factory=list, repr=False)
    solution: SdpSolution | None = field(default=None, repr=False)


@dataclass
class _Prepared:
    system: LinearSystem
    problem_C: np.ndarray
    P: np.ndarray
    constraints: object
    tie_break: float
    tolerance: float
    max_iterations: int


def _delays(measurements):
    return np.asarray(getattr(measurements, "t", measurements), dtype=float)


def _prepare(measurements, sensors, c, Q_n, tie_break, tolerance, max_iterations, scale=True):
    if not tie_break >= 0:
        raise ValueError("tie_break must be non-negative")
    ls = build_system(_delays(measurements), sensors, c, Q_n, scale=scale)
    weight = NOISELESS_WEIGHT if not np.any(ls.Q_n) else 1.0
    return _Prepared(
        system=ls,
        problem_C=ls.C * (weight / ls.c**4),
        P=penalty_matrix(ls.scaling, ls.M, ls.p),
        constraints=build_constraints(ls.sensors),
        tie_break=float(tie_break),
        tolerance=tolerance,
        max_iterations=max_iterations,
    )


def _solve_at(prep: _Prepared, eta: float, delta: float) -> EstimateResult:
    ls = prep.system
    sol = solve(
        SdpProblem(
            prep.problem_C + (eta + prep.tie_break) * prep.P,
            prep.constraints,
            tolerance=prep.tolerance,
            max_iterations=prep.max_iterations,
        )
    )
    try:
        _, _, x_s = extract_solution(sol.X, ls.p, ls.M)
        tau = eigen_ratio(sol.X)
    except ValueError as exc:
        raise EstimationError(f"solver returned {sol.status.value} with unusable X: {exc}") from exc
    x = ls.scaling.to_si(x_s, ls.M, ls.p)
    objective = float(np.vdot(prep.problem_C, sol.X))
    penalty = float(np.vdot(prep.P, sol.X))
    return EstimateResult(
        u_hat=x[: ls.p].copy(),
        v_hat=x[ls.p : 2 * ls.p].copy(),
        x_hat=x,
        X=sol.X,
        tau=tau,
        objective=objective,
        penalty=penalty,
        eta_final=float(eta),
        delta=float(delta),
        rank_one=bool(tau < delta),
        status=sol.status,
        iterations=sol.iterations,
        max_gap=sol.gap,
        max_primal_infeasibility=sol.primal_infeasibility,
        max_dual_infeasibility=sol.dual_infeasibility,
        solution=sol,
    )


def lemma1_witness(X) -> float:
    """max_{i<N} |X_ii - X_iN^2| / (1 + X_ii); zero for X = x x^T with x_N = 1."""
    X = np.asarray(X, dtype=float)
    diag = np.diag(X)[:-1]
    return float(np.max(np.abs(diag - X[:-1, -1] ** 2) / (1.0 + diag)))


def rsdp(measurements, sensors, c, Q_n, *, delta=1e-5, tie_break=TIE_BREAK,
         tolerance=1e-9, max_iterations=100, scale=True) -> EstimateResult:
    """Relaxed SDP: drop the rank constraint and solve once.

    The rank-one flag (tau < delta) is reported, not enforced. A non-Optimal
    solver status is passed through in ``status``.
    """
    prep = _prepare(measurements, sensors, c, Q_n, tie_break, tolerance, max_iterations, scale)
    return _solve_at(prep, 0.0, delta)


def pf_sdp(measurements, sensors, c, Q_n, eta, *, delta=1e-5, tie_break=TIE_BREAK,
           tolerance=1e-9, max_iterations=100, scale=True) -> EstimateResult:
    """Penalty-function SDP with fixed coefficient ``eta`` (SI units)."""
    if not eta >= 0:
        raise ValueError("eta must be non-negative")
    prep = _prepare(measurements, sensors, c, Q_n, tie_break, tolerance, max_iterations, scale)
    return _solve_at(prep, float(eta), delta)


def distance_jacobian(u, sensors) -> np.ndarray:
    """M x p matrix of gradients of d_i = |u - s_i| with respect to u."""
    r = np.asarray(u, dtype=float) - np.asarray(sensors, dtype=float)
    d = np.linalg.norm(r, axis=1)
    if np.any(d == 0):
        raise ValueError("distance gradient undefined: u coincides with a sensor")
    return r / d[:, None]


def param_jacobian(u, v, sensors) -> np.ndarray:
    """H = dx/dz for z = [u; v]: an N x 2p matrix."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    sensors = np.asarray(sensors, dtype=float)
    M, p = sensors.shape
    H = np.zeros((param_size(M, p), 2 * p))
    H[:p, :p] = np.eye(p)
    H[p : 2 * p, p:] = np.eye(p)
    H[2 * p, :p] = v
    H[2 * p, p:] = u
    H[2 * p + 1, p:] = 2.0 * v
    H[2 * p + 2 : 2 * p + 2 + M, :p] = distance_jacobian(u, sensors)
    return H


def build_error_propagation(x_ref, sensors, c, W, t) -> np.ndarray:
    """Matrix L with Tr(C X*) ~ n^T L n to first order in the delay noise n.

    ``x_ref`` is the lifted vector the noise is linearised around (the
    current estimate stands in for the unknown truth). All arguments must be
    in one unit system.
    """
    sensors = np.asarray(sensors, dtype=float)
    M, p = sensors.shape
    x_ref = np.asarray(x_ref, dtype=float)
    if x_ref.shape != (param_size(M, p),):
        raise ValueError(f"x_ref must have length {param_size(M, p)}")
    u, v = x_ref[:p], x_ref[p : 2 * p]
    G = build_G(t, sensors, c)
    H = param_jacobian(u, v, sensors)
    P = G @ H
    PtW = P.T @ W
    normal = PtW @ P
    if np.linalg.cond(normal) > 1e14:
        raise ValueError("P^T W P is singular: degenerate geometry")
    B = (v @ v - c * c) * np.eye(M)
    E = H @ np.linalg.solve(normal, PtW @ B)
    # Row i of T picks v.v and the homogenisation entry: T x = v.v - c^2.
    T = np.zeros((M, len(x_ref)))
    T[:, 2 * p + 1] = 1.0
    T[:, -1] = -c * c
    F = np.diag(T @ x_ref)
    return F.T @ W @ (F - G @ E)


def excessive_penalty_threshold(L, Q_n, quantile=0.99, mc_samples=100_000, seed=0) -> float:
    """Quantile of n^T L n for n ~ N(0, Q_n), estimated by seeded sampling.

    n^T L n equals sum_i lambda_i chi2(1) with lambda_i the eigenvalues of
    sym(L) Q_n (only the symmetric part of L enters a quadratic form, and it
    keeps the eigenvalues real). Weights that vanish relative to the largest
    are dropped before sampling.
    """
    if not 0 < quantile < 1:
        raise ValueError("quantile must lie in (0, 1)")
    L = np.asarray(L, dtype=float)
    Q_n = np.asarray(Q_n, dtype=float)
    Ls = 0.5 * (L + L.T)
    lam = np.real(np.linalg.eigvals(Ls @ Q_n))
    top = np.max(np.abs(lam)) if lam.size else 0.0
    lam = np.sort(lam[np.abs(lam) > 1e-12 * top]) if top > 0 else lam[:0]
    if lam.size == 0:
        return 0.0
    z = make_rng(seed).standard_normal((int(mc_samples), lam.size))
    return float(np.quantile((z * z) @ lam, quantile))


def apf_sdp(measurements, sensors, c, Q_n, config: PenaltyConfig | None = None, *,
            seed=0, tie_break=TIE_BREAK, tolerance=1e-9, max_iterations=100,
            scale=True) -> EstimateResult:
    """Adaptive penalty: raise eta until rank one, back off on excessive penalty.

    Loop on the integer exponent k (eta = eta0 gamma^k):

    * tau >= delta: k += 1.
    * tau < delta and Tr(C X)/c^4 < epsilon: accept.
    * tau < delta otherwise (excessive penalty): delta *= alpha and k -= 1
      (never below 0), so the next pass looks at a different problem.

    epsilon is the ``quantile`` point of the weighted chi-square law built at
    the candidate's own estimate. Solves and thresholds are cached per k. On
    hitting ``max_outer`` the best rank-one candidate (smallest Tr(C X)),
    else the one with smallest tau, is returned with ``converged=False``.
    """
    cfg = config or PenaltyConfig()
    prep = _prepare(measurements, sensors, c, Q_n, tie_break, tolerance, max_iterations, scale)
    ls = prep.system
    solves: dict[int, EstimateResult] = {}
    thresholds: dict[int, float] = {}
    trace = []
    delta = cfg.delta
    k = 0
    total_iterations = 0
    worst = Status.OPTIMAL

    def epsilon_for(k, res):
        if k not in thresholds:
            x_s = ls.scaling.from_si(res.x_hat, ls.M, ls.p)
            L = build_error_propagation(x_s, ls.sensors, ls.c, ls.W, ls.t) / ls.c**4
            thresholds[k] = excessive_penalty_threshold(
                L, ls.Q_n, cfg.quantile, cfg.mc_samples, seed
            )
        return thresholds[k]

    for _ in range(cfg.max_outer):
        eta = cfg.eta0 * cfg.gamma**k
        if k not in solves:
            try:
                solves[k] = _solve_at(prep, eta, delta)
            except EstimationError as exc:
                raise EstimationError(str(exc), trace) from exc
            total_iterations += solves[k].iterations
            if solves[k].status is not Status.OPTIMAL:
                worst = solves[k].status
        res = solves[k]
        event = {"eta": eta, "tau": res.tau, "objective": res.objective, "delta": delta,
                 "epsilon": None}
        trace.append(event)
        if res.tau >= delta:
            event["action"] = "increase"
            k += 1
            continue
        try:
            eps = epsilon_for(k, res)
        except ValueError as exc:
            raise EstimationError(f"threshold failed: {exc}", trace) from exc
        event["epsilon"] = eps
        if res.objective < eps:
            event["action"] = "accept"
            return _finish(res, eta, delta, eps, True, trace, total_iterations, worst, solves)
        event["action"] = "backtrack"
        delta *= cfg.alpha
        k = max(k - 1, 0)

    # Cap reached: best rank-one candidate under the final delta, else smallest tau.
    rank_one = [(r.objective, kk) for kk, r in solves.items() if r.tau < delta]
    if rank_one:
        kk = min(rank_one)[1]
    else:
        kk = min((r.tau, kk) for kk, r in solves.items())[1]
    res = solves[kk]
    return _finish(res, cfg.eta0 * cfg.gamma**kk, delta, thresholds.get(kk), False, trace,
                   total_iterations, worst, solves)


def _finish(res, eta, delta, eps, converged, trace, iterations, worst, solves):
    status = res.status if res.status is not Status.OPTIMAL else worst
    return EstimateResult(
        u_hat=res.u_hat,
        v_hat=res.v_hat,
        x_hat=res.x_hat,
        X=res.X,
        tau=res.tau,
        objective=res.objective,
        penalty=res.penalty,
        eta_final=float(eta),
        delta=float(delta),
        rank_one=bool(res.tau < delta),
        status=status,
        iterations=iterations,
        epsilon_used=eps,
        converged=converged,
        max_gap=max(r.max_gap for r in solves.values()),
        max_primal_infeasibility=max(r.max_primal_infeasibility for r in solves.values()),
        max_dual_infeasibility=max(r.max_dual_infeasibility for r in solves.values()),
        trace=trace,
        solution=res.solution,
    )
