"""Linearised measurement equations and the lifted constraint set.

The unknown vector has the layout (0-based indices, p = dimension,
M = sensor count, N = M + 2p + 3)::

    x[0:p]          u            initial position
    x[p:2p]         v            velocity
    x[2p]           u.v
    x[2p+1]         v.v
    x[2p+2:2p+2+M]  d_i = |u - s_i|
    x[N-1]          1            homogenisation entry

Each delay gives one linear equation ``g_i . x = eps_i`` with
``eps_i = (v.v - c^2) n_i``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "ConstraintSet",
    "LinearSystem",
    "Scaling",
    "build_G",
    "build_constraints",
    "build_system",
    "build_weight",
    "cost_matrix",
    "check_param_vector",
    "constraint_residuals",
    "param_size",
    "param_vector",
    "penalty_matrix",
]


def param_size(M: int, p: int) -> int:
    return M + 2 * p + 3


def param_vector(u, v, sensors) -> np.ndarray:
    """Lift (u, v) to the full consistent parameter vector x."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    sensors = np.asarray(sensors, dtype=float)
    d = np.linalg.norm(u - sensors, axis=1)
    return np.concatenate([u, v, [u @ v, v @ v], d, [1.0]])


def check_param_vector(x, M: int, p: int, tol: float = 0.0) -> None:
    x = np.asarray(x)
    if x.shape != (param_size(M, p),):
        raise ValueError(f"parameter vector must have length {param_size(M, p)}")
    if x[-1] != 1.0:
        raise ValueError("parameter vector: last entry must be exactly 1")
    if x[2 * p + 1] < -tol or np.any(x[2 * p + 2 : 2 * p + 2 + M] < -tol):
        raise ValueError("parameter vector: v.v and distances must be non-negative")


def build_G(t, sensors, c) -> np.ndarray:
    """Rows ``[0_p, -2 s_i, 2, t_i, 2c e_i, -t_i c^2]``."""
    t = np.asarray(t, dtype=float)
    sensors = np.asarray(sensors, dtype=float)
    M, p = sensors.shape
    if t.shape != (M,):
        raise ValueError(f"delay vector has shape {t.shape}, expected ({M},)")
    N = param_size(M, p)
    G = np.zeros((M, N))
    G[:, p : 2 * p] = -2.0 * sensors
    G[:, 2 * p] = 2.0
    G[:, 2 * p + 1] = t
    G[np.arange(M), 2 * p + 2 + np.arange(M)] = 2.0 * c
    G[:, N - 1] = -t * c * c
    return G


def build_weight(Q_n, noiseless: bool = False) -> np.ndarray:
    """W = Q_n^-1.

    The true error covariance is (v.v - c^2)^2 Q_n; the scalar factor does not
    move the weighted least-squares minimiser and needs the unknown v, so it is
    left out. ``noiseless`` substitutes the identity for a zero covariance.
    """
    Q_n = np.asarray(Q_n, dtype=float)
    if noiseless:
        return np.eye(Q_n.shape[0])
    try:
        c_factor = np.linalg.cholesky(Q_n)
    except np.linalg.LinAlgError:
        raise ValueError("noise covariance is singular; pass noiseless=True for zero noise") from None
    inv_c = np.linalg.solve(c_factor, np.eye(Q_n.shape[0]))
    return inv_c.T @ inv_c


@dataclass(frozen=True)
class ConstraintSet:
    """Trace constraints ``Tr(A[k] X) = b[k]`` stacked as an (m, N, N) array.

    Order: velocity norm, M distances, inner product, homogenisation.
    """

    A: np.ndarray
    b: np.ndarray

    def __len__(self):
        return len(self.b)

    def residuals(self, X) -> np.ndarray:
        return np.einsum("kij,ji->k", self.A, X) - self.b


def _sym_pair(A, i, j, value):
    A[i, j] += 0.5 * value
    A[j, i] += 0.5 * value


def build_constraints(sensors) -> ConstraintSet:
    sensors = np.asarray(sensors, dtype=float)
    M, p = sensors.shape
    N = param_size(M, p)
    last = N - 1
    iu = np.arange(p)
    iv = p + np.arange(p)
    A = np.zeros((M + 3, N, N))

    # |v|^2 = x[2p+1]
    A[0, iv, iv] = 1.0
    _sym_pair(A[0], 2 * p + 1, last, -1.0)

    # |u - s_i|^2 = d_i^2 with D_i = [I_p, 0, -s_i]
    for i, s in enumerate(sensors):
        k = 1 + i
        D = np.zeros((p, N))
        D[:, iu] = np.eye(p)
        D[:, last] = -s
        A[k] = D.T @ D
        A[k, 2 * p + 2 + i, 2 * p + 2 + i] -= 1.0

    # u.v = x[2p]
    k = M + 1
    for j in range(p):
        _sym_pair(A[k], j, p + j, 1.0)
    _sym_pair(A[k], 2 * p, last, -1.0)

    A[M + 2, last, last] = 1.0
    b = np.zeros(M + 3)
    b[-1] = 1.0
    return ConstraintSet(A, b)


def constraint_residuals(constraints: ConstraintSet, X) -> np.ndarray:
    return constraints.residuals(np.asarray(X, dtype=float))


@dataclass(frozen=True)
class Scaling:
    """Unit change applied before building the SDP.

    Lengths are measured in ``length`` metres and time in ``time`` seconds.
    ``for_geometry`` picks length = largest sensor range and time = length / c
    so the scaled signal speed is 1 and every entry of x is O(1).
    """

    length: float = 1.0
    time: float = 1.0

    @classmethod
    def for_geometry(cls, sensors, c) -> "Scaling":
        L = float(np.max(np.linalg.norm(np.asarray(sensors, dtype=float), axis=1)))
        return cls(L, L / c)

    @property
    def speed(self) -> float:
        return self.length / self.time

    def param_scale(self, M: int, p: int) -> np.ndarray:
        """Diagonal S with x_si = S * x_scaled."""
        L, V = self.length, self.speed
        return np.concatenate([np.full(p, L), np.full(p, V), [L * V, V * V], np.full(M, L), [1.0]])

    def to_si(self, x_scaled, M: int, p: int) -> np.ndarray:
        return np.asarray(x_scaled) * self.param_scale(M, p)

    def from_si(self, x_si, M: int, p: int) -> np.ndarray:
        return np.asarray(x_si) / self.param_scale(M, p)


@dataclass(frozen=True)
class LinearSystem:
    """G, W and C = G^T W G expressed in scaled units, with the scaled inputs."""

    G: np.ndarray
    W: np.ndarray
    C: np.ndarray
    t: np.ndarray
    sensors: np.ndarray
    c: float
    Q_n: np.ndarray
    scaling: Scaling

    @property
    def M(self) -> int:
        return self.sensors.shape[0]

    @property
    def p(self) -> int:
        return self.sensors.shape[1]

    @property
    def N(self) -> int:
        return param_size(self.M, self.p)


def build_system(t, sensors, c, Q_n, scale: bool = True, noiseless: bool | None = None) -> LinearSystem:
    """Scale the inputs, then assemble G, W and C for the scaled problem.

    ``noiseless=None`` means: use the identity weight iff Q_n is all zero.
    """
    sensors = np.asarray(sensors, dtype=float)
    Q_n = np.asarray(Q_n, dtype=float)
    if noiseless is None:
        noiseless = not np.any(Q_n)
    sc = Scaling.for_geometry(sensors, c) if scale else Scaling()
    t_s = np.asarray(t, dtype=float) / sc.time
    s_s = sensors / sc.length
    c_s = c / sc.speed
    Q_s = Q_n / sc.time**2
    G = build_G(t_s, s_s, c_s)
    W = build_weight(Q_s, noiseless=noiseless)
    return LinearSystem(G, W, cost_matrix(G, W), t_s, s_s, c_s, Q_s, sc)


def cost_matrix(G, W) -> np.ndarray:
    """C = G^T W G, projected onto the PSD cone.

    With a large weight the rounding in G^T W G leaves eigenvalues of order
    eps * |C| on both sides of zero in the null space of G (which always
    contains the u block). A negative one makes the relaxed problem unbounded
    in floating point, so they are clipped to zero.
    """
    F = np.linalg.cholesky(0.5 * (W + W.T)).T @ G
    lam, V = np.linalg.eigh(F.T @ F)
    C = (V * np.clip(lam, 0.0, None)) @ V.T
    return 0.5 * (C + C.T)


def penalty_matrix(scaling: Scaling, M: int, p: int) -> np.ndarray:
    """Diagonal P with Tr(P X') = sum_{i<N} X_ii for X = S X' S in SI units.

    X' is the scaled lifted matrix; the homogenisation entry is not penalised.
    """
    S = scaling.param_scale(M, p)
    P = np.diag(S * S)
    P[-1, -1] = 0.0
    return P
