"""Seeded Monte Carlo experiments: configs, presets, runs and summaries.

A run sweeps one axis (optionally crossed with a ``series`` axis), and for
every grid point and run index simulates delays and applies each selected
estimator. Outputs, all plain text:

* ``records.csv``   one row per (grid point, run, estimator), sorted by that key;
* ``aggregates.json`` per (grid point, estimator) statistics recomputed from
  the records (``summarize`` reproduces it bit for bit);
* ``plot_<name>.csv`` one row per grid point with labelled curve columns;
* ``cdf_<name>.csv`` sorted per-run errors (only when ``emit_cdf`` is set).

Seeds: run k uses ``derive_seed(base_seed, k)`` at every grid point, so all
points of a sweep see the same underlying normal draws (common random
numbers). Within a point the stream supplies, in order: the signal speed
(when drawn), the velocity (when drawn) and the delay noise. Results do not
depend on the worker count. The only non-deterministic column is
``wall_time_s``.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .analysis import cdf, crlb, logmsed
from .estimators import EstimationError, PenaltyConfig, apf_sdp, lemma1_witness, pf_sdp, rsdp
from .forward import derive_seed, make_rng, simulate_measurements
from .scenario import ScenarioError, builtin, load_scenario, make_scenario

__all__ = [
    "AXES",
    "Axis",
    "ConfigError",
    "ExperimentConfig",
    "ExperimentReport",
    "RECORD_FIELDS",
    "SummaryError",
    "TIMING_FIELDS",
    "aggregate",
    "config_from_dict",
    "config_to_dict",
    "grid",
    "presets",
    "read_records",
    "run",
    "summarize",
    "write_outputs",
]

AXES = ("noise_db", "eta_log", "speed_c", "sensor_count")

RECORD_FIELDS = (
    "grid_index", "series_axis", "series_value", "sweep_axis", "sweep_value",
    "run", "estimator", "seed", "M", "c", "sigma2", "eta",
    "u_true_x", "u_true_y", "u_true_z", "v_true_x", "v_true_y", "v_true_z",
    "u_hat_x", "u_hat_y", "u_hat_z", "v_hat_x", "v_hat_y", "v_hat_z",
    "err_u2", "err_v2", "tau", "rank_one", "accepted", "eta_final", "delta_final",
    "objective", "epsilon", "status", "iterations", "max_gap", "max_pinf", "max_dinf",
    "lemma1", "crlb_u", "crlb_v", "error", "wall_time_s",
)
TIMING_FIELDS = ("wall_time_s",)


class ConfigError(ValueError):
    """An experiment configuration is invalid."""


class SummaryError(ValueError):
    """A records file is malformed; the message carries the line number."""


@dataclass(frozen=True)
class Axis:
    name: str
    values: tuple

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(float(x) for x in self.values))


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment. Quantities are SI; ``noise_db`` is 10 log10(sigma^2 / s^2)."""

    name: str
    sweep: Axis
    series: Axis | None = None
    estimators: tuple = ("rsdp", "apf")
    layout: str = "sim10"
    scenario_file: str | None = None
    sensor_count: int = 8
    source_position: tuple = (200.0, -400.0)
    source_velocity: tuple = (-1.0, 1.0)
    speed_range: tuple | None = None
    signal_speed: float = 350.0
    random_c: bool = False
    c_range: tuple = (300.0, 400.0)
    noise_db: float | None = -40.0
    noise_sigma2: float | None = None
    eta_log: float | None = None
    penalty: PenaltyConfig = field(default_factory=PenaltyConfig)
    delta: float = 1e-5
    runs: int = 200
    base_seed: int = 0
    emit_cdf: bool = False
    reference_runs: int | None = None
    description: str = ""

    def axes(self):
        return [a for a in (self.series, self.sweep) if a is not None]


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    rows: list
    aggregates: dict
    files: dict = field(default_factory=dict)


# --------------------------------------------------------------------------- config


def _parse_estimator(spec: str):
    if spec in ("rsdp", "apf", "pf"):
        return spec, None
    if spec.startswith("pf:"):
        try:
            return "pf", float(spec[3:])
        except ValueError:
            pass
    raise ConfigError(f"unknown estimator {spec!r}; use rsdp, apf, pf or pf:<log10 eta>")


def _base_setup(cfg: ExperimentConfig):
    """Sensors, u, v, c and sigma^2 (or full covariance) before axis overrides."""
    if cfg.scenario_file:
        try:
            scn = load_scenario(Path(cfg.scenario_file).read_text(), allow_noiseless=True)
        except OSError as exc:
            raise ConfigError(f"cannot read scenario file: {exc}") from exc
        return scn.sensors, scn.source_position, scn.source_velocity, scn.signal_speed, scn.noise_covariance
    sensors = builtin(cfg.layout).sensors
    if cfg.noise_sigma2 is not None:
        noise = float(cfg.noise_sigma2)
    elif cfg.noise_db is not None:
        noise = 10.0 ** (cfg.noise_db / 10.0)
    else:
        noise = None
    return (
        sensors,
        np.asarray(cfg.source_position, dtype=float),
        np.asarray(cfg.source_velocity, dtype=float),
        float(cfg.signal_speed),
        noise,
    )


def validate(cfg: ExperimentConfig) -> None:
    axes = cfg.axes()
    for a in axes:
        if a.name not in AXES:
            raise ConfigError(f"unknown sweep axis {a.name!r}; expected one of {AXES}")
        if not a.values:
            raise ConfigError(f"axis {a.name!r} has an empty grid")
        if not all(math.isfinite(x) for x in a.values):
            raise ConfigError(f"axis {a.name!r} has non-finite values")
    if cfg.series is not None and cfg.series.name == cfg.sweep.name:
        raise ConfigError("series and sweep axes must differ")
    if cfg.runs < 1:
        raise ConfigError("runs must be >= 1")
    if not 0 <= cfg.base_seed < 2**64:
        raise ConfigError("base seed must be an unsigned 64-bit integer")
    if not cfg.estimators:
        raise ConfigError("no estimators selected")
    names = {a.name for a in axes}
    for spec in cfg.estimators:
        kind, log_eta = _parse_estimator(spec)
        if kind == "pf" and log_eta is None and "eta_log" not in names and cfg.eta_log is None:
            raise ConfigError("estimator 'pf' needs eta_log (config value or sweep axis)")
    if len(set(cfg.estimators)) != len(cfg.estimators):
        raise ConfigError("duplicate estimator")
    sensors, u, v, c, noise = _base_setup(cfg)
    available = len(sensors)
    # A scenario file uses all of its sensors unless sensor_count is swept.
    counts = [available] if cfg.scenario_file else [cfg.sensor_count]
    for a in axes:
        if a.name == "sensor_count":
            counts = a.values
        elif a.name == "speed_c" and min(a.values) <= 0:
            raise ConfigError("speed_c values must be positive")
    for n in counts:
        if n != int(n) or not 1 <= n <= available:
            raise ConfigError(f"sensor_count {n} outside 1..{available}")
    if noise is None and "noise_db" not in names:
        raise ConfigError("noise level missing: set noise_db, noise_sigma2 or sweep noise_db")
    if cfg.speed_range is not None:
        lo, hi = cfg.speed_range
        if not 0 <= lo <= hi:
            raise ConfigError("speed_range must satisfy 0 <= low <= high")
    if cfg.random_c:
        lo, hi = cfg.c_range
        if not 0 < lo <= hi:
            raise ConfigError("c_range must satisfy 0 < low <= high")


def config_to_dict(cfg: ExperimentConfig) -> dict:
    d = asdict(cfg)
    d["sweep"] = {"name": cfg.sweep.name, "values": list(cfg.sweep.values)}
    d["series"] = None if cfg.series is None else {"name": cfg.series.name, "values": list(cfg.series.values)}
    for k in ("estimators", "source_position", "source_velocity", "c_range", "speed_range"):
        if d[k] is not None:
            d[k] = list(d[k])
    return d


def config_from_dict(d: dict) -> ExperimentConfig:
    d = dict(d)
    known = {f for f in ExperimentConfig.__dataclass_fields__}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown config fields: {sorted(unknown)}")
    try:
        for key in ("sweep", "series"):
            if d.get(key) is not None:
                a = d[key]
                if "grid" in a:
                    lo, hi, step = a["grid"]
                    values = _frange(lo, hi, step)
                else:
                    values = a["values"]
                d[key] = Axis(a["name"], values)
        if "penalty" in d and d["penalty"] is not None:
            d["penalty"] = PenaltyConfig(**d["penalty"])
        for k in ("estimators", "source_position", "source_velocity", "c_range", "speed_range"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        cfg = ExperimentConfig(**d)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config: {exc}") from exc
    validate(cfg)
    return cfg


def _frange(lo, hi, step):
    n = int(round((hi - lo) / step))
    return tuple(round(lo + i * step, 10) for i in range(n + 1))


def grid(cfg: ExperimentConfig):
    """Grid points in order as (series_value or None, sweep_value)."""
    series = cfg.series.values if cfg.series is not None else (None,)
    return [(s, w) for s in series for w in cfg.sweep.values]


# --------------------------------------------------------------------------- presets


def presets() -> dict:
    """Named configs for the simulated figures and tables (default K = 200)."""
    noise_grid = Axis("noise_db", _frange(-60, 20, 10))
    p = {}
    p["fig3"] = ExperimentConfig(
        name="fig3", series=Axis("noise_db", (-40, -20, 0)),
        sweep=Axis("eta_log", _frange(-6, 3, 0.5)), estimators=("rsdp", "pf"),
        reference_runs=1000,
        description="LOGMSED of PF-SDP against RSDP as eta varies, at three noise levels",
    )
    p["fig4"] = ExperimentConfig(
        name="fig4", sweep=noise_grid,
        estimators=("rsdp", "pf:-6", "pf:-4", "pf:-2", "apf"), reference_runs=1000,
        description="MSE of u and v against noise level, with CRLB",
    )
    p["fig5"] = ExperimentConfig(
        name="fig5", sweep=Axis("speed_c", _frange(100, 1000, 100)), noise_db=-40.0,
        estimators=("rsdp", "pf:-2", "apf"), reference_runs=1000,
        description="MSE of u and v against signal speed at -40 dB",
    )
    p["fig6"] = ExperimentConfig(
        name="fig6", sweep=Axis("sensor_count", _frange(5, 10, 1)), noise_db=-40.0,
        estimators=("rsdp", "pf:-2", "apf"), reference_runs=1000,
        description="MSE of u and v against sensor count (sensors taken in table order)",
    )
    p["table2"] = ExperimentConfig(
        name="table2", sweep=Axis("eta_log", _frange(-6, 2, 1)), noise_db=0.0,
        estimators=("pf",), reference_runs=1000,
        description="Rank-one PF-SDP solutions against eta at 0 dB",
    )
    p["table3"] = ExperimentConfig(
        name="table3", series=Axis("eta_log", (-1, 0, 1)), sweep=noise_grid,
        estimators=("pf",), reference_runs=1000,
        description="Rank-one PF-SDP solutions against noise level at three eta values",
    )
    p["real9_cdf"] = ExperimentConfig(
        name="real9_cdf", layout="real9", sweep=Axis("sensor_count", _frange(5, 9, 1)),
        sensor_count=9, source_position=(1.0, 2.0), source_velocity=(0.0, 0.0),
        speed_range=(1.0, 3.0), signal_speed=343.0, noise_db=None, noise_sigma2=6.3e-9,
        estimators=("rsdp", "pf:-2", "apf"), emit_cdf=True, reference_runs=200,
        description="Synthetic replay of the nine-sensor layout: error CDF and RMSE against sensor count",
    )
    return p


# --------------------------------------------------------------------------- running


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, str):
        return x
    x = float(x)
    return repr(x) if math.isfinite(x) else ""


def _vec3(a):
    a = [] if a is None else [float(t) for t in a]
    return a + [None] * (3 - len(a))


def _run_task(cfg: ExperimentConfig, run_index: int) -> list:
    """All grid points and estimators for one run index."""
    sensors0, u0, v0, c0, noise0 = _base_setup(cfg)
    seed = derive_seed(cfg.base_seed, run_index)
    specs = [_parse_estimator(s) for s in cfg.estimators]
    cache = {}
    rows = []
    for gi, (sv, wv) in enumerate(grid(cfg)):
        point = {}
        if cfg.series is not None:
            point[cfg.series.name] = sv
        point[cfg.sweep.name] = wv
        rng = make_rng(seed)
        count = int(point.get("sensor_count", cfg.sensor_count if not cfg.scenario_file else len(sensors0)))
        sensors = sensors0[:count]
        if "speed_c" in point:
            c = point["speed_c"]
        elif cfg.random_c:
            c = float(rng.uniform(*cfg.c_range))
        else:
            c = c0
        v = np.array(v0, dtype=float)
        if cfg.speed_range is not None:
            speed = float(rng.uniform(*cfg.speed_range))
            if len(v) == 2:
                theta = float(rng.uniform(0.0, 2.0 * math.pi))
                v = speed * np.array([math.cos(theta), math.sin(theta)])
            else:
                w = rng.standard_normal(len(v))
                v = speed * w / np.linalg.norm(w)
        if "noise_db" in point:
            noise = 10.0 ** (point["noise_db"] / 10.0)
        else:
            noise = noise0
        if np.ndim(noise) == 2:
            noise = np.asarray(noise)[:count, :count]
        sigma2 = float(noise) if np.ndim(noise) == 0 else float(np.mean(np.diag(noise)))
        base = {
            "grid_index": gi,
            "series_axis": cfg.series.name if cfg.series is not None else "",
            "series_value": sv,
            "sweep_axis": cfg.sweep.name,
            "sweep_value": wv,
            "run": run_index,
            "seed": seed,
            "M": count,
            "c": c,
            "sigma2": sigma2,
        }
        try:
            scn = make_scenario(sensors, u0, v, c, noise, label=cfg.name, allow_noiseless=True)
            meas = simulate_measurements(scn, seed, rng=rng)
        except (ScenarioError, ValueError) as exc:
            for spec in cfg.estimators:
                rows.append({**base, "estimator": spec, "error": f"scenario: {exc}"})
            continue
        try:
            bound = crlb(u0, v, c, sensors, scn.noise_covariance)
            cr_u, cr_v = bound.crlb_u, bound.crlb_v
        except ValueError:
            cr_u = cr_v = None
        key = (count, c, sigma2, tuple(v))
        for spec, (kind, fixed_log_eta) in zip(cfg.estimators, specs):
            log_eta = fixed_log_eta
            if kind == "pf" and log_eta is None:
                log_eta = point.get("eta_log", cfg.eta_log)
            eta = None if log_eta is None else 10.0 ** log_eta
            row = {**base, "estimator": spec, "eta": eta, "crlb_u": cr_u, "crlb_v": cr_v}
            row.update(zip(("u_true_x", "u_true_y", "u_true_z"), _vec3(u0)))
            row.update(zip(("v_true_x", "v_true_y", "v_true_z"), _vec3(v)))
            ck = (spec, eta, key)
            if ck not in cache:
                t0 = time.perf_counter()
                try:
                    if kind == "rsdp":
                        res = rsdp(meas, sensors, c, scn.noise_covariance, delta=cfg.delta)
                    elif kind == "pf":
                        res = pf_sdp(meas, sensors, c, scn.noise_covariance, eta, delta=cfg.delta)
                    else:
                        res = apf_sdp(meas, sensors, c, scn.noise_covariance, cfg.penalty, seed=seed)
                    cache[ck] = (_result_fields(res, u0, v), time.perf_counter() - t0)
                except (EstimationError, ValueError, np.linalg.LinAlgError) as exc:
                    cache[ck] = ({"error": f"{type(exc).__name__}: {exc}"}, time.perf_counter() - t0)
            fields, elapsed = cache[ck]
            row.update(fields)
            row["wall_time_s"] = elapsed
            rows.append(row)
    return [{k: _fmt(r.get(k)) for k in RECORD_FIELDS} for r in rows]


def _result_fields(res, u0, v0) -> dict:
    d = {
        "err_u2": float(np.sum((res.u_hat - u0) ** 2)),
        "err_v2": float(np.sum((res.v_hat - v0) ** 2)),
        "tau": res.tau,
        "rank_one": res.rank_one,
        "accepted": res.converged,
        "eta_final": res.eta_final,
        "delta_final": res.delta,
        "objective": res.objective,
        "epsilon": res.epsilon_used,
        "status": res.status.value,
        "iterations": res.iterations,
        "max_gap": res.max_gap,
        "max_pinf": res.max_primal_infeasibility,
        "max_dinf": res.max_dual_infeasibility,
        "lemma1": lemma1_witness(res.X),
        "error": "",
    }
    d.update(zip(("u_hat_x", "u_hat_y", "u_hat_z"), _vec3(res.u_hat)))
    d.update(zip(("v_hat_x", "v_hat_y", "v_hat_z"), _vec3(res.v_hat)))
    return d


def _sort_key(cfg_estimators):
    order = {e: i for i, e in enumerate(cfg_estimators)}

    def key(row):
        return (int(row["grid_index"]), int(row["run"]), order.get(row["estimator"], len(order)), row["estimator"])

    return key


def run(cfg: ExperimentConfig, workers: int = 1, out_dir=None, progress=None) -> ExperimentReport:
    """Execute every (grid point, run, estimator); optionally write the output files."""
    validate(cfg)
    if workers < 1:
        raise ConfigError("workers must be >= 1")
    indices = range(cfg.runs)
    rows = []
    if workers == 1:
        for k in indices:
            rows.extend(_run_task(cfg, k))
            if progress:
                progress(k + 1, cfg.runs)
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for done, chunk in enumerate(pool.map(_run_task, [cfg] * cfg.runs, indices), 1):
                rows.extend(chunk)
                if progress:
                    progress(done, cfg.runs)
    rows.sort(key=_sort_key(cfg.estimators))
    report = ExperimentReport(cfg, rows, aggregate(rows))
    if out_dir is not None:
        report.files = write_outputs(report, Path(out_dir))
    return report


# --------------------------------------------------------------------------- aggregation

_INT_FIELDS = ("grid_index", "run", "seed", "M", "iterations")
_FLOAT_FIELDS = (
    "series_value", "sweep_value", "c", "sigma2", "eta", "err_u2", "err_v2", "tau",
    "eta_final", "delta_final", "objective", "epsilon", "max_gap", "max_pinf", "max_dinf",
    "lemma1", "crlb_u", "crlb_v", "wall_time_s",
    "u_true_x", "u_true_y", "u_true_z", "v_true_x", "v_true_y", "v_true_z",
    "u_hat_x", "u_hat_y", "u_hat_z", "v_hat_x", "v_hat_y", "v_hat_z",
)
_BOOL_FIELDS = ("rank_one", "accepted")


def _parse_row(row: dict, line: int) -> dict:
    out = dict(row)
    try:
        for k in _INT_FIELDS:
            out[k] = int(row[k]) if row[k] != "" else None
        for k in _FLOAT_FIELDS:
            out[k] = float(row[k]) if row[k] != "" else None
        for k in _BOOL_FIELDS:
            if row[k] not in ("", "0", "1"):
                raise ValueError(f"{k} must be 0 or 1")
            out[k] = None if row[k] == "" else row[k] == "1"
    except ValueError as exc:
        raise SummaryError(f"line {line}: {exc}") from None
    if out["grid_index"] is None or out["run"] is None or not out["estimator"]:
        raise SummaryError(f"line {line}: missing grid_index, run or estimator")
    if not out["error"] and (out["err_u2"] is None or out["err_v2"] is None):
        raise SummaryError(f"line {line}: successful row without errors err_u2/err_v2")
    return out


def _db(x):
    return 10.0 * math.log10(x) if x is not None and x > 0 else None


def aggregate(rows) -> dict:
    """Statistics per (grid point, estimator) from string records."""
    parsed = [_parse_row(r, i + 2) for i, r in enumerate(rows)]
    return _aggregate_parsed(parsed)


def _aggregate_parsed(parsed) -> dict:
    if not parsed:
        raise SummaryError("no records")
    groups = {}
    for r in parsed:
        groups.setdefault((r["grid_index"], r["estimator"]), []).append(r)
    points = []
    by_key = {}
    for (gi, est), rs in sorted(groups.items(), key=lambda kv: (kv[0][0], kv[1][0]["estimator"])):
        ok = [r for r in rs if not r["error"]]
        eu = np.array([r["err_u2"] for r in ok])
        ev = np.array([r["err_v2"] for r in ok])
        cu = [r["crlb_u"] for r in rs if r["crlb_u"] is not None]
        cv = [r["crlb_v"] for r in rs if r["crlb_v"] is not None]
        p = {
            "grid_index": gi,
            "estimator": est,
            "series_axis": rs[0]["series_axis"],
            "series_value": rs[0]["series_value"],
            "sweep_axis": rs[0]["sweep_axis"],
            "sweep_value": rs[0]["sweep_value"],
            "K": len(rs),
            "failures": len(rs) - len(ok),
            "mse_u": float(np.mean(eu)) if ok else None,
            "mse_v": float(np.mean(ev)) if ok else None,
            "crlb_u": float(np.mean(cu)) if cu else None,
            "crlb_v": float(np.mean(cv)) if cv else None,
            "rank_one": sum(1 for r in ok if r["rank_one"]),
            "accepted": sum(1 for r in ok if r["accepted"]),
            "p80_u": cdf(np.sqrt(eu)).quantile(0.8) if ok else None,
            "p80_v": cdf(np.sqrt(ev)).quantile(0.8) if ok else None,
        }
        p["rmse_u"] = math.sqrt(p["mse_u"]) if p["mse_u"] is not None else None
        p["rmse_v"] = math.sqrt(p["mse_v"]) if p["mse_v"] is not None else None
        for k in ("mse_u", "mse_v", "crlb_u", "crlb_v"):
            p[k + "_db"] = _db(p[k])
        points.append(p)
        by_key[(gi, est)] = p
    for p in points:
        ref = by_key.get((p["grid_index"], "rsdp"))
        for k in ("u", "v"):
            a, b = p[f"mse_{k}"], ref[f"mse_{k}"] if ref else None
            p[f"logmsed_{k}"] = logmsed(a, b) if a and b else None
    return {"points": points, "records": len(parsed)}


def read_records(path) -> list:
    """Read records.csv, checking the header and every row's shape."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise SummaryError(f"cannot read {path}: {exc}") from exc
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise SummaryError(f"{path}: empty records file") from None
    if tuple(header) != RECORD_FIELDS:
        raise SummaryError(f"{path}: line 1: unexpected header")
    rows = []
    for values in reader:
        line = reader.line_num
        if not values:
            continue
        if len(values) != len(RECORD_FIELDS):
            raise SummaryError(
                f"{path}: line {line}: expected {len(RECORD_FIELDS)} fields, got {len(values)}"
            )
        rows.append((line, dict(zip(RECORD_FIELDS, values))))
    if not rows:
        raise SummaryError(f"{path}: no records")
    return rows


def summarize(path) -> dict:
    """Recompute the aggregates document from a records file."""
    rows = read_records(path)
    parsed = []
    for line, r in rows:
        try:
            parsed.append(_parse_row(r, line))
        except SummaryError as exc:
            raise SummaryError(f"{path}: {exc}") from None
    return _aggregate_parsed(parsed)


# --------------------------------------------------------------------------- files


def dumps_aggregates(agg: dict) -> str:
    return json.dumps(agg, indent=1, sort_keys=True) + "\n"


def write_outputs(report: ExperimentReport, out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    cfg = report.config
    files = {}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RECORD_FIELDS)
    for r in report.rows:
        w.writerow([r[k] for k in RECORD_FIELDS])
    files["records"] = out / "records.csv"
    files["records"].write_text(buf.getvalue())
    files["aggregates"] = out / "aggregates.json"
    files["aggregates"].write_text(dumps_aggregates(report.aggregates))
    files["config"] = out / "config.json"
    files["config"].write_text(json.dumps(config_to_dict(cfg), indent=1, sort_keys=True) + "\n")
    files["plot"] = out / f"plot_{cfg.name}.csv"
    files["plot"].write_text(_plot_table(report.aggregates, cfg.estimators))
    if cfg.emit_cdf:
        files["cdf"] = out / f"cdf_{cfg.name}.csv"
        files["cdf"].write_text(_cdf_table(report.rows))
    return files


def _plot_table(agg: dict, estimators) -> str:
    by_point = {}
    for p in agg["points"]:
        by_point.setdefault(p["grid_index"], {})[p["estimator"]] = p
    cols = ["series_value", "sweep_value", "crlb_u_db", "crlb_v_db"]
    per = ["mse_u_db", "mse_v_db", "logmsed_u", "logmsed_v", "rank_one", "p80_u", "p80_v"]
    for e in estimators:
        cols += [f"{e}_{k}" for k in per]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for gi in sorted(by_point):
        ps = by_point[gi]
        first = next(iter(ps.values()))
        row = [first["series_value"], first["sweep_value"], first["crlb_u_db"], first["crlb_v_db"]]
        for e in estimators:
            p = ps.get(e, {})
            row += [p.get(k) for k in per]
        w.writerow([_fmt(x) for x in row])
    return buf.getvalue()


def _cdf_table(rows) -> str:
    groups = {}
    for r in rows:
        if r["error"]:
            continue
        groups.setdefault((int(r["grid_index"]), r["estimator"]), []).append(r)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["grid_index", "sweep_value", "estimator", "level", "pos_error", "vel_error"])
    for (gi, est), rs in sorted(groups.items()):
        pos = cdf([math.sqrt(float(r["err_u2"])) for r in rs])
        vel = cdf([math.sqrt(float(r["err_v2"])) for r in rs])
        for lvl, a, b in zip(pos.levels, pos.values, vel.values):
            w.writerow([gi, rs[0]["sweep_value"], est, _fmt(lvl), _fmt(a), _fmt(b)])
    return buf.getvalue()


def with_overrides(cfg: ExperimentConfig, **kw) -> ExperimentConfig:
    """Copy of ``cfg`` with fields replaced (and re-validated)."""
    new = replace(cfg, **{k: v for k, v in kw.items() if v is not None})
    validate(new)
    return new
