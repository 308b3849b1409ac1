"""Experiment data model and scenario file ingestion.

Everything inside a :class:`Scenario` is SI (m, s, m/s, s^2). Scenario files
are JSON documents in which every dimensional quantity carries an explicit
unit tag; see :func:`load_scenario` for the layout.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "BUILTIN_LAYOUTS",
    "Scenario",
    "ScenarioError",
    "SensorLayout",
    "builtin",
    "dump_scenario",
    "load_scenario",
    "make_scenario",
]


class ScenarioError(ValueError):
    """A scenario document is malformed or violates a scenario invariant."""


_LENGTH = {"m": 1.0, "km": 1000.0}
_SPEED = {"m/s": 1.0, "km/s": 1000.0}
_TIME2 = {"s2": 1.0, "ms2": 1e-6}

# Sensor tables stored in the units they were published in.
# sim10: uniform U(-1, 1) km draws; real9: hardware layout in metres.
BUILTIN_LAYOUTS = {
    "sim10": (
        "km",
        (
            (0.145, -0.385),
            (-0.020, 0.199),
            (-0.207, -0.163),
            (0.400, -0.464),
            (-0.358, 0.765),
            (0.187, -0.167),
            (-0.604, -0.473),
            (0.621, 0.409),
            (-0.099, 0.736),
            (0.205, -0.456),
        ),
    ),
    "real9": (
        "m",
        (
            (5.0, 5.0),
            (5.0, -5.0),
            (-5.0, 5.0),
            (-5.0, -5.0),
            (5.0, 0.0),
            (-5.0, 0.0),
            (0.0, 5.0),
            (0.0, -5.0),
            (0.0, 0.0),
        ),
    ),
}


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.flags.writeable = False
    return arr


def _convert(values, unit, table, what):
    if unit is None:
        raise ScenarioError(f"unit tag missing for {what}")
    try:
        factor = table[unit]
    except KeyError:
        raise ScenarioError(
            f"unknown unit {unit!r} for {what}; expected one of {sorted(table)}"
        ) from None
    arr = np.asarray(values, dtype=float)
    if factor == 1.0:
        return arr
    return arr * factor


@dataclass(frozen=True)
class SensorLayout:
    """Sensor positions without a source, as returned by :func:`builtin`."""

    name: str
    sensors: np.ndarray
    source_unit: str

    def first(self, count: int) -> np.ndarray:
        if not 1 <= count <= len(self.sensors):
            raise ScenarioError(
                f"layout {self.name!r} has {len(self.sensors)} sensors, "
                f"cannot select {count}"
            )
        return self.sensors[:count]


def builtin(name: str) -> SensorLayout:
    """Return a bundled sensor layout converted to metres."""
    try:
        unit, rows = BUILTIN_LAYOUTS[name]
    except KeyError:
        raise ScenarioError(
            f"unknown builtin layout {name!r}; available: {sorted(BUILTIN_LAYOUTS)}"
        ) from None
    return SensorLayout(name, _frozen(_convert(rows, unit, _LENGTH, name)), unit)


@dataclass(frozen=True)
class Scenario:
    sensors: np.ndarray
    source_position: np.ndarray
    source_velocity: np.ndarray
    signal_speed: float
    noise_covariance: np.ndarray
    label: str = ""
    allow_noiseless: bool = field(default=False, repr=False)

    def __post_init__(self):
        for name in ("sensors", "source_position", "source_velocity", "noise_covariance"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        object.__setattr__(self, "signal_speed", float(self.signal_speed))
        _validate(self)

    @property
    def M(self) -> int:
        return self.sensors.shape[0]

    @property
    def p(self) -> int:
        return self.sensors.shape[1]

    @property
    def noiseless(self) -> bool:
        return not np.any(self.noise_covariance)

    def with_sensors(self, count: int) -> "Scenario":
        """Copy restricted to the first ``count`` sensors."""
        return make_scenario(
            self.sensors[:count],
            self.source_position,
            self.source_velocity,
            self.signal_speed,
            self.noise_covariance[:count, :count],
            label=self.label,
            allow_noiseless=self.allow_noiseless,
        )


def _validate(s: Scenario) -> None:
    if s.sensors.ndim != 2 or s.sensors.shape[1] not in (2, 3):
        raise ScenarioError("dimension: sensors must be an M x p array with p in {2, 3}")
    M, p = s.sensors.shape
    if s.source_position.shape != (p,) or s.source_velocity.shape != (p,):
        raise ScenarioError(f"dimension: source position and velocity must have length {p}")
    if M < 2 * p + 1:
        raise ScenarioError(f"sensor count: need M >= 2p+1 = {2 * p + 1}, got M = {M}")
    if not np.isfinite(s.signal_speed) or s.signal_speed <= 0:
        raise ScenarioError("signal speed: c must be positive and finite")
    if not np.linalg.norm(s.source_velocity) < s.signal_speed:
        raise ScenarioError(
            f"speed: |v| = {np.linalg.norm(s.source_velocity)!r} must be strictly "
            f"below c = {s.signal_speed!r}"
        )
    Q = s.noise_covariance
    if Q.shape != (M, M):
        raise ScenarioError(f"noise covariance: expected shape {(M, M)}, got {Q.shape}")
    if not np.array_equal(Q, Q.T):
        raise ScenarioError("noise covariance: Q_n must be symmetric")
    if not np.any(Q):
        if not s.allow_noiseless:
            raise ScenarioError("noise covariance: zero noise requires the noiseless test flag")
    else:
        w = np.linalg.eigvalsh(Q)
        if w[0] < -1e-12 * max(w[-1], 0.0):
            raise ScenarioError("noise covariance: Q_n must be positive semidefinite")
    diffs = s.sensors[:, None, :] - s.sensors[None, :, :]
    dist = np.linalg.norm(diffs, axis=-1) + np.eye(M)
    if np.any(dist == 0):
        raise ScenarioError("sensors: positions must be distinct")
    if np.any(np.linalg.norm(s.sensors - s.source_position, axis=1) == 0):
        raise ScenarioError("sensors: source position coincides with a sensor (d_i = 0)")


def make_scenario(sensors, u, v, c, noise, label="", allow_noiseless=False) -> Scenario:
    """Build a validated scenario from SI quantities.

    ``noise`` is either a scalar variance (s^2), giving ``noise * I``, or a
    full M x M covariance.
    """
    sensors = np.asarray(sensors, dtype=float)
    noise = np.asarray(noise, dtype=float)
    if noise.ndim == 0:
        if noise < 0:
            raise ScenarioError("noise covariance: variance must be non-negative")
        noise = float(noise) * np.eye(len(sensors))
    return Scenario(sensors, u, v, c, noise, label, allow_noiseless)


def _quantity(doc, key, table):
    try:
        entry = doc[key]
    except KeyError:
        raise ScenarioError(f"missing field {key!r}") from None
    if not isinstance(entry, dict) or "value" not in entry:
        raise ScenarioError(f"field {key!r} must be an object with 'value' and 'unit'")
    return _convert(entry["value"], entry.get("unit"), table, key)


def load_scenario(text: str, allow_noiseless: bool = False) -> Scenario:
    """Parse a JSON scenario document into an SI :class:`Scenario`.

    Layout::

        {
          "label": "fig4",
          "dimension": 2,
          "sensors": {"unit": "km", "positions": [[0.145, -0.385], ...]},
          "source_position": {"value": [200, -400], "unit": "m"},
          "source_velocity": {"value": [-1, 1], "unit": "m/s"},
          "signal_speed": {"value": 350, "unit": "m/s"},
          "noise": {"sigma2": 1e-4, "unit": "s2"}
        }

    ``sensors`` may instead be ``{"builtin": "sim10", "count": 8}``. ``noise``
    accepts ``sigma2`` (scalar variance), ``sigma2_db`` (10 log10 of the
    variance in s^2) or ``covariance`` (full matrix).
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"parse failure: {exc}") from exc
    if not isinstance(doc, dict):
        raise ScenarioError("parse failure: top level must be an object")

    sens = doc.get("sensors")
    if not isinstance(sens, dict):
        raise ScenarioError("missing field 'sensors'")
    if "builtin" in sens:
        layout = builtin(sens["builtin"])
        sensors = layout.first(int(sens.get("count", len(layout.sensors))))
    else:
        if "positions" not in sens:
            raise ScenarioError("sensors need 'positions' or 'builtin'")
        sensors = _convert(sens["positions"], sens.get("unit"), _LENGTH, "sensors")
    if sensors.ndim != 2:
        raise ScenarioError("dimension: sensor positions must be a list of vectors")
    p = int(doc.get("dimension", sensors.shape[1]))
    if sensors.shape[1] != p:
        raise ScenarioError(f"dimension: declared p = {p} but sensors have {sensors.shape[1]} coordinates")

    u = _quantity(doc, "source_position", _LENGTH)
    v = _quantity(doc, "source_velocity", _SPEED)
    c = float(_quantity(doc, "signal_speed", _SPEED))

    noise = doc.get("noise")
    if not isinstance(noise, dict):
        raise ScenarioError("missing field 'noise'")
    if "sigma2_db" in noise:
        Q = 10.0 ** (float(noise["sigma2_db"]) / 10.0)
    elif "sigma2" in noise:
        Q = _convert(noise["sigma2"], noise.get("unit"), _TIME2, "noise")
    elif "covariance" in noise:
        Q = _convert(noise["covariance"], noise.get("unit"), _TIME2, "noise")
    else:
        raise ScenarioError("noise needs one of 'sigma2', 'sigma2_db', 'covariance'")

    return make_scenario(
        sensors, u, v, c, Q, label=str(doc.get("label", "")), allow_noiseless=allow_noiseless
    )


def dump_scenario(s: Scenario) -> str:
    """Serialize to the JSON layout in SI units; reloading is bit-exact."""
    doc = {
        "label": s.label,
        "dimension": s.p,
        "sensors": {"unit": "m", "positions": s.sensors.tolist()},
        "source_position": {"value": s.source_position.tolist(), "unit": "m"},
        "source_velocity": {"value": s.source_velocity.tolist(), "unit": "m/s"},
        "signal_speed": {"value": s.signal_speed, "unit": "m/s"},
        "noise": {"covariance": s.noise_covariance.tolist(), "unit": "s2"},
    }
    return json.dumps(doc, indent=2)
