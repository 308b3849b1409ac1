"""Dense primal-dual interior-point solver for small SDPs.

Solves::

    min  <C, X>   s.t.  <A_k, X> = b_k  (k = 1..m),   X PSD
    max  b.y      s.t.  C - sum_k y_k A_k = Z,         Z PSD

Method: infeasible-start path following with the Nesterov-Todd search
direction and Mehrotra predictor-corrector. The centering parameter is
sigma = (mu_aff / mu)^3, where mu_aff is the complementarity after the
affine-scaling step. Step lengths use a fraction-to-boundary factor of 0.98.

Details that matter for accuracy on the rank-deficient optima of the
localization problems:

* Preconditioning. The problem is first transformed by a congruence
  X = T X' T^T that caps the eigenvalues of C at 1, and each constraint row is
  normalised. Neither changes the cone, the optimal value or <X, Z>.
* Newton system. The Schur complement is the Gram matrix of the scaled
  constraint matrices; it is solved through a QR factor of the stacked
  vectors with a static 1e-12 relative diagonal shift and two refinement
  steps. dZ is taken from the linear dual equation, dX gets a least-norm
  correction that restores A(dX) = Rp, and a step that would leave either
  matrix without a Cholesky factor is halved.
* Starting point. X = xi I, Z = zeta I with xi from b and zeta from Tr(C)
  and ||C|| (in the preconditioned coordinates).
* Stopping. gap = <X, Z> / (1 + |b.y| + |<C, X>|) together with the relative
  primal and dual residuals. Once all three are below the tolerance the
  iteration continues while the measure still halves ("polishing"), which
  makes the small eigenvalues of X, and hence the eigen ratio, accurate.
* Restarts. A pass that ends at the iteration cap or in numerical trouble
  is restarted from a central point in coordinates rebalanced by its final
  X (at most MAX_RESTARTS times); the best pass is returned.

Intended for N up to a few dozen; everything is dense. Identical inputs give
identical iterate sequences.
"""

from __future__ import annotations

import csv
import enum
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .linearize import ConstraintSet

__all__ = [
    "SdpProblem",
    "SdpSolution",
    "Status",
    "eigen_ratio",
    "extract_solution",
    "solve",
    "write_trace_csv",
]

STEP_FRACTION = 0.98
SCHUR_REGULARIZATION = 1e-12
MAX_RESTARTS = 2


class Status(str, enum.Enum):
    OPTIMAL = "Optimal"
    MAX_ITER = "MaxIter"
    NUMERICAL_FAILURE = "NumericalFailure"
    INFEASIBLE = "Infeasible"


@dataclass
class SdpProblem:
    C: np.ndarray
    constraints: ConstraintSet
    tolerance: float = 1e-9
    max_iterations: int = 100
    polish: bool = True

    def check_independence(self) -> bool:
        """Warn (and return False) if the constraint matrices are linearly dependent."""
        A = self.constraints.A.reshape(len(self.constraints), -1)
        rank = np.linalg.matrix_rank(A)
        if rank < A.shape[0]:
            warnings.warn(f"constraint matrices have rank {rank} < {A.shape[0]}", stacklevel=2)
            return False
        return True


@dataclass
class SdpSolution:
    X: np.ndarray
    y: np.ndarray
    Z: np.ndarray
    objective: float
    dual_objective: float
    gap: float
    primal_infeasibility: float
    dual_infeasibility: float
    iterations: int
    status: Status
    trace: list = field(default_factory=list, repr=False)

    @property
    def optimal(self) -> bool:
        return self.status is Status.OPTIMAL


def _sym(M):
    return 0.5 * (M + M.T)


def _max_step(d, dM) -> float:
    """Largest alpha with diag(d) + alpha dM PSD (inf if unbounded)."""
    r = 1.0 / np.sqrt(d)
    lam_min = np.linalg.eigvalsh(_sym(dM * np.outer(r, r)))[0]
    if lam_min >= 0:
        return np.inf
    return -1.0 / lam_min


def _is_pd(M) -> bool:
    try:
        np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        return False
    return True


def _nt_scaling(X, Z):
    """Factors of the Nesterov-Todd scaling point.

    Returns (G, d) with G^-1 X G^-T = G^T Z G = diag(d).
    """
    Lx = np.linalg.cholesky(X)
    Lz = np.linalg.cholesky(Z)
    _, d, Vt = np.linalg.svd(Lz.T @ Lx)
    G = (Lx @ Vt.T) / np.sqrt(d)
    return G, d


@dataclass
class _Pass:
    """Outcome of one interior-point pass, already mapped to caller coordinates."""

    X: np.ndarray
    y: np.ndarray
    Z: np.ndarray
    X_internal: np.ndarray
    Z_internal: np.ndarray
    gap: float
    pinf: float
    dinf: float
    iterations: int
    status: Status
    trace: list

    @property
    def merit(self) -> float:
        return max(self.gap, self.pinf, self.dinf)


def solve(problem: SdpProblem, verbose: bool = False) -> SdpSolution:
    """Run the interior-point iteration; see the module docstring.

    Deterministic for identical inputs. With ``verbose`` each iteration is
    also printed.
    """
    C0 = _sym(np.asarray(problem.C, dtype=float))
    A0 = np.asarray(problem.constraints.A, dtype=float)
    b0 = np.asarray(problem.constraints.b, dtype=float)

    # Congruence X = T X' T^T that caps the eigenvalues of C at 1. The cone,
    # <X, Z> and the constraint values are unchanged; only conditioning improves.
    lam, V = np.linalg.eigh(C0)
    scale = np.sqrt(1.0 / np.maximum(1.0, lam))
    T, T_inv = V * scale, V.T / scale[:, None]
    result = _ipm(C0, A0, b0, T, T_inv, problem, verbose)
    latest = result
    for _ in range(MAX_RESTARTS):
        if latest.status not in (Status.MAX_ITER, Status.NUMERICAL_FAILURE):
            break
        if not np.isfinite(latest.merit):
            break
        # Restart in coordinates balanced by the previous pass's solution:
        # near a degenerate optimum X and Z can need eigenvalues that span
        # more than double precision resolves, and this congruence brings
        # both spectra to O(1) before starting again from a central point.
        w, Q = np.linalg.eigh(latest.X_internal)
        w = np.clip(w, 0.0, None)
        z_top = max(np.linalg.eigvalsh(latest.Z_internal)[-1], 1e-300)
        rho = min(w[-1], max(1.0 / z_top, 1e-12 * w[-1]))
        r = np.sqrt(w + rho)
        T, T_inv = T @ (Q * r), (Q.T / r[:, None]) @ T_inv
        if verbose:
            print(f"restart with rho = {rho:.2e}")
        latest = _ipm(C0, A0, b0, T, T_inv, problem, verbose)
        for row in latest.trace:
            row["iteration"] += result.iterations
        latest.trace = result.trace + latest.trace
        latest.iterations += result.iterations
        if latest.status is Status.OPTIMAL or latest.merit < result.merit:
            result = latest
        else:
            result.trace, result.iterations = latest.trace, latest.iterations
    return SdpSolution(
        X=result.X, y=result.y, Z=result.Z,
        objective=float(np.vdot(C0, result.X)),
        dual_objective=float(b0 @ result.y),
        gap=float(result.gap),
        primal_infeasibility=float(result.pinf),
        dual_infeasibility=float(result.dinf),
        iterations=result.iterations,
        status=result.status,
        trace=result.trace,
    )


def _ipm(C0, A0, b0, T, T_inv, problem: SdpProblem, verbose: bool) -> _Pass:
    """One path-following pass on the problem transformed by X = T X' T^T."""
    m, n = A0.shape[0], C0.shape[0]
    tol = problem.tolerance
    C = _sym(T.T @ C0 @ T)
    A = np.einsum("ai,kab,bj->kij", T, A0, T)
    row_scale = np.sqrt(np.einsum("kij,kij->k", A, A))
    A = A / row_scale[:, None, None]
    b = b0 / row_scale

    def op(X):
        return np.einsum("kij,ji->k", A, X)

    def adj(y):
        return np.tensordot(y, A, axes=1)

    # Orthonormal basis of the constraint span, for the least-norm primal
    # correction (QR keeps the error at cond(A) rather than cond(A)^2).
    A_q, A_r = np.linalg.qr(A.reshape(m, -1).T)
    normA = np.ones(m)
    normC = np.linalg.norm(C)
    normb = np.linalg.norm(b)
    xi = max(10.0, np.sqrt(n), n * np.max((1.0 + np.abs(b)) / (1.0 + normA)))
    zeta = max(10.0, np.sqrt(n), abs(np.trace(C)) / np.sqrt(n), normC, np.max(normA))
    X = xi * np.eye(n)
    Z = zeta * np.eye(n)
    y = np.zeros(m)

    trace = []
    status = Status.MAX_ITER
    stalled = 0
    slow = 0
    it = 0
    best = ((2, np.inf),)
    while True:
        Rp = b - op(X)
        Rd = _sym(C - adj(y) - Z)
        pobj = float(np.vdot(C, X))
        dobj = float(b @ y)
        xz = float(np.vdot(X, Z))
        gap = xz / (1.0 + abs(pobj) + abs(dobj))
        pinf = np.linalg.norm(Rp) / (1.0 + normb)
        dinf = np.linalg.norm(Rd) / (1.0 + normC)
        trace.append(
            {"iteration": it, "primal": pobj, "dual": dobj, "complementarity": xz,
             "gap": gap, "pinf": pinf, "dinf": dinf}
        )
        if verbose:
            print(f"{it:3d} pobj={pobj:+.10e} dobj={dobj:+.10e} gap={gap:.2e} pinf={pinf:.2e} dinf={dinf:.2e}")
        # Once both residuals are well inside the tolerance, iterates are
        # ranked mostly by gap (polishing may push it far below a stalled
        # residual, which sharpens small eigenvalues of X); otherwise by the
        # worst of the three measures.
        feasible = max(pinf, dinf) <= 0.1 * tol
        key = (0, gap + 0.01 * (pinf + dinf)) if feasible else (1, max(gap, pinf, dinf))
        if best[0][0] == 0 and best[0][1] <= tol:
            # Polishing: keep going while the measure still drops quickly.
            slow = slow + 1 if key >= (0, 0.5 * best[0][1]) else 0
        if key < best[0]:
            best = (key, X, y, Z, gap, pinf, dinf)
        if best[0] <= (0, tol) and (not problem.polish or slow >= 2):
            status = Status.OPTIMAL
            break
        if np.linalg.norm(y) >= 1e8 and _dual_ray(A0, b0, y / row_scale, tol):
            status = Status.INFEASIBLE
            break
        if it >= problem.max_iterations:
            status = Status.MAX_ITER
            break
        if stalled >= 3:
            status = Status.NUMERICAL_FAILURE
            break
        it += 1

        try:
            G, d = _nt_scaling(X, Z)
        except np.linalg.LinAlgError:
            status = Status.NUMERICAL_FAILURE
            break
        # Scaled constraint matrices G^T A_k G; the Schur matrix is their Gram
        # matrix, solved through a QR factor of the stacked vectors.
        At = np.einsum("ai,kab,bj->kij", G, A, G)
        At_flat = At.reshape(m, -1).T
        Rq = np.linalg.qr(At_flat, mode="r")
        Rq[np.diag_indices(m)] += np.copysign(
            SCHUR_REGULARIZATION * np.max(np.abs(np.diag(Rq))), np.diag(Rq)
        )
        Rd_t = G.T @ Rd @ G

        def schur_solve(rhs):
            return sla.solve_triangular(Rq, sla.solve_triangular(Rq, rhs, trans="T"))

        def direction(E):
            rhs = Rp - np.einsum("kij,ij->k", At, E - Rd_t)
            dy = schur_solve(rhs)
            for _ in range(2):
                r = rhs - At_flat.T @ (At_flat @ dy)
                dy = dy + schur_solve(r)
            # dZ comes straight from the linear dual equation rather than
            # through the scaling, which is badly conditioned near the end.
            dZ = _sym(Rd - adj(dy))
            dZt = _sym(G.T @ dZ @ G)
            dXt = _sym(E - dZt)
            return dXt, dy, dZt, dZ

        mu = xz / n
        dsum = d[:, None] + d[None, :]
        dXa, _, dZa, _ = direction(-np.diag(d))
        ap = min(1.0, _max_step(d, dXa))
        ad = min(1.0, _max_step(d, dZa))
        mu_aff = float(np.vdot(np.diag(d) + ap * dXa, np.diag(d) + ad * dZa)) / n
        sigma = min(1.0, max(0.0, mu_aff / mu) ** 3) if mu > 0 else 0.0

        K = _sym(dXa @ dZa)
        E = 2.0 * (np.diag(sigma * mu - d * d) - K) / dsum
        dXt, dy, dZt, dZ = direction(E)
        ap = min(1.0, STEP_FRACTION * _max_step(d, dXt))
        ad = min(1.0, STEP_FRACTION * _max_step(d, dZt))
        if not (np.isfinite(ap) and np.isfinite(ad)):
            status = Status.NUMERICAL_FAILURE
            break
        dX = _sym(G @ dXt @ G.T)
        # Least-norm correction so that A(dX) = Rp holds to rounding; the
        # scaled direction loses primal feasibility once G is ill conditioned.
        dX = dX + _sym((A_q @ sla.solve_triangular(A_r, Rp - op(dX), trans="T")).reshape(n, n))
        # The step rule works on the scaled pair; rounding can still leave a
        # tiny negative eigenvalue in the unscaled update, so back off until
        # both factors exist.
        for _ in range(30):
            X_new = _sym(X + ap * dX)
            Z_new = _sym(Z + ad * dZ)
            if _is_pd(X_new) and _is_pd(Z_new):
                break
            ap *= 0.5
            ad *= 0.5
        else:
            status = Status.NUMERICAL_FAILURE
            break
        if verbose:
            print(f"    sigma={sigma:.2e} step=({ap:.2e}, {ad:.2e})")
        stalled = stalled + 1 if max(ap, ad) < 1e-8 else 0
        X, Z = X_new, Z_new
        y = y + ad * dy

    # Return the best iterate seen; it may meet the tolerance even when a
    # later (polishing) step failed.
    if best[0][0] < 2:
        _, X, y, Z, gap, pinf, dinf = best
        if best[0] <= (0, tol):
            status = Status.OPTIMAL
    X_int, Z_int = X, Z

    # Back to the caller's coordinates. The gap is congruence invariant and is
    # kept from the scaled iterate; recomputing <X, Z> here would cancel badly.
    X = _sym(T @ X @ T.T)
    Z = _sym(T_inv.T @ Z @ T_inv)
    y = y / row_scale
    pinf = np.linalg.norm(b0 - np.einsum("kij,ji->k", A0, X)) / (1.0 + np.linalg.norm(b0))
    dinf = np.linalg.norm(C0 - np.tensordot(y, A0, axes=1) - Z) / (1.0 + np.linalg.norm(C0))
    if status is Status.OPTIMAL and max(pinf, dinf) > tol:
        status = Status.NUMERICAL_FAILURE
    return _Pass(X, y, Z, X_int, Z_int, float(gap), float(pinf), float(dinf), it, status, trace)


def _dual_ray(A, b, y, tol) -> bool:
    """Farkas certificate: b.y > 0 with sum y_k A_k NSD means no PSD X fits.

    Checked in the caller's coordinates. In the preconditioned ones a large
    cost makes the optimal multipliers large enough to pass for a ray.
    """
    by = b @ y
    if by <= 0:
        return False
    lam_max = np.linalg.eigvalsh(np.tensordot(y / by, A, axes=1))[-1]
    return lam_max <= tol


def write_trace_csv(solution: SdpSolution, fh) -> None:
    w = csv.writer(fh)
    w.writerow(["iteration", "gap", "objective"])
    for row in solution.trace:
        w.writerow([row["iteration"], repr(row["gap"]), repr(row["primal"])])


def eigen_ratio(X) -> float:
    """Second-largest over largest eigenvalue; near 0 means effectively rank one."""
    w = np.linalg.eigvalsh(_sym(np.asarray(X, dtype=float)))
    if not w[-1] > 0:
        raise ValueError("eigen ratio undefined: largest eigenvalue is not positive")
    if len(w) < 2:
        return 0.0
    return float(min(1.0, max(0.0, w[-2] / w[-1])))


def extract_solution(X, p: int, M: int):
    """Recover (u, v, x) from the lifted matrix via its dominant eigenvector.

    The eigenvector is scaled so its last (homogenisation) entry is exactly 1,
    which also fixes its sign. If that entry is numerically zero the last
    column of X is used instead.
    """
    X = _sym(np.asarray(X, dtype=float))
    N = X.shape[0]
    if N != M + 2 * p + 3:
        raise ValueError(f"X is {N}x{N}, expected {M + 2 * p + 3}")
    if not abs(X[-1, -1] - 1.0) <= 1e-6:
        raise ValueError(f"degenerate X: homogenisation entry {X[-1, -1]} is not 1")
    w, V = np.linalg.eigh(X)
    if not w[-1] > 0:
        raise ValueError("degenerate X: no positive eigenvalue")
    q = V[:, -1]
    if abs(q[-1]) < 1e-6:
        x = X[:, -1] / X[-1, -1]
    else:
        x = q * np.sqrt(w[-1])
        x = x / x[-1]
    x[-1] = 1.0
    return x[:p].copy(), x[p : 2 * p].copy(), x
