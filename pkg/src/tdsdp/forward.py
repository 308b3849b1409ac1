"""Round-trip time-delay forward model and seeded measurement simulation.

Noise generation is fixed to numpy's PCG64 bit generator with the ziggurat
normal transform (``Generator.standard_normal``). Correlated covariances are
handled by a Cholesky factor times iid normals. Per-run seeds are derived
with SplitMix64 (:func:`derive_seed`) so serial and parallel sweeps draw
identical streams.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .scenario import Scenario

__all__ = [
    "BracketError",
    "TDMeasurements",
    "derive_seed",
    "make_rng",
    "noise_factor",
    "simulate_measurements",
    "splitmix64",
    "true_delay",
    "true_delay_implicit",
    "true_delays",
    "write_measurements_csv",
]

_MASK64 = (1 << 64) - 1


class BracketError(ValueError):
    """The implicit delay equation has no sign change on the search bracket."""


def splitmix64(x: int) -> int:
    """One SplitMix64 output for state ``x`` (after the golden-ratio increment)."""
    z = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(base_seed: int, *keys: int) -> int:
    """Mix a base seed with integer keys (grid index, run index, ...) into a u64."""
    h = splitmix64(base_seed & _MASK64)
    for k in keys:
        h = splitmix64(h ^ (k & _MASK64))
    return h


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def _check_speed(v, c):
    if not np.linalg.norm(v) < c:
        raise ValueError(f"source speed |v| = {np.linalg.norm(v)} must be below c = {c}")


def true_delay(u, v, c, s_i) -> float:
    """Closed-form round-trip delay for a source moving at constant velocity."""
    u, v, s_i = (np.asarray(a, dtype=float) for a in (u, v, s_i))
    _check_speed(v, c)
    r = u - s_i
    d = np.linalg.norm(r)
    return float((2.0 * r @ v + 2.0 * c * d) / (c * c - v @ v))


def true_delays(u, v, c, sensors) -> np.ndarray:
    """Vectorised :func:`true_delay` over an M x p sensor array."""
    u, v, sensors = (np.asarray(a, dtype=float) for a in (u, v, sensors))
    _check_speed(v, c)
    r = u - sensors
    d = np.linalg.norm(r, axis=1)
    return (2.0 * r @ v + 2.0 * c * d) / (c * c - v @ v)


def true_delay_implicit(u, v, c, s_i, tol: float = 1e-14) -> float:
    """Solve ``c t = |u - s| + |u + v t - s|`` for t by bisection.

    Independent of :func:`true_delay`; used as its oracle. ``tol`` is the
    relative bracket width at which bisection stops (it also stops once the
    bracket cannot be halved in floating point).
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    u, v, s_i = (np.asarray(a, dtype=float) for a in (u, v, s_i))
    r = u - s_i
    d = float(np.linalg.norm(r))
    speed = float(np.linalg.norm(v))
    if d == 0.0 and speed < c:
        return 0.0
    if not speed < c:
        raise BracketError(f"no sign change: |v| = {speed} >= c = {c}")

    def f(t):
        return d + np.linalg.norm(r + v * t) - c * t

    lo, hi = 0.0, 4.0 * d / (c - speed)
    f_lo, f_hi = f(lo), f(hi)
    if not (f_lo > 0 > f_hi):
        raise BracketError(f"no sign change on [0, {hi}]: f = ({f_lo}, {f_hi})")
    for _ in range(2000):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi or hi - lo <= tol * mid:
            break
        if f(mid) > 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def noise_factor(Q: np.ndarray) -> np.ndarray:
    """Return F with F F^T = Q (Cholesky, or eigen square root if Q is singular)."""
    Q = np.asarray(Q, dtype=float)
    if not np.any(Q):
        return np.zeros_like(Q)
    try:
        return np.linalg.cholesky(Q)
    except np.linalg.LinAlgError:
        w, V = np.linalg.eigh(Q)
        return V * np.sqrt(np.clip(w, 0.0, None))


@dataclass(frozen=True)
class TDMeasurements:
    t: np.ndarray
    t_true: np.ndarray
    seed: int
    scenario_label: str = ""

    @property
    def noise(self) -> np.ndarray:
        return self.t - self.t_true


def simulate_measurements(
    scenario: Scenario, seed: int, rng: np.random.Generator | None = None
) -> TDMeasurements:
    """Noisy delays ``t = t_true + n`` with ``n ~ N(0, Q_n)``.

    The generator is built from ``seed`` unless an existing ``rng`` is passed
    (the harness does this so one run stream also feeds other random draws).
    """
    t_true = true_delays(
        scenario.source_position, scenario.source_velocity, scenario.signal_speed, scenario.sensors
    )
    if rng is None:
        rng = make_rng(seed)
    z = rng.standard_normal(scenario.M)
    if scenario.noiseless:
        t = t_true.copy()
    else:
        t = t_true + noise_factor(scenario.noise_covariance) @ z
    return TDMeasurements(t, t_true, int(seed), scenario.label)


def write_measurements_csv(meas: TDMeasurements, fh) -> None:
    """Debug dump: one row per sensor with (index, t_true, t)."""
    w = csv.writer(fh)
    w.writerow(["sensor", "t_true", "t"])
    for i, (a, b) in enumerate(zip(meas.t_true, meas.t)):
        w.writerow([i, repr(float(a)), repr(float(b))])
