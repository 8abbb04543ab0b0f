"""
Experiment specifications, desk-scale presets and runners.

A spec is a YAML mapping such as::

    experiment: mse-vs-alpha
    output: results/fig-alpha
    system: {num_channels: 4, block_length: 100}
    pilots: 20
    distributions: [S1, S2, S3, S4, S5, S_opt, U_opt]
    grids: {alpha: [0, 0.5, 1], snr_db: [15, 20, 25]}
    seed: 0

Unset keys fall back to the experiment's preset. Every runner returns
CSV tables; :func:`run_experiment` writes them together with a manifest.
Grid points are independent and may be dispatched to a process pool; the
results are collected in grid order so outputs do not depend on the
number of workers.
"""

from __future__ import annotations

import copy
import csv
import io
import itertools
import json
import os
import platform
import re
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from .air import estimate_air, family_mask
from .model import SUPPORTED_ORDERS, SystemConfig, make_constellation
from .optimizer import SPAN_MODES, GaConfig, optimize_structured, optimize_unstructured
from .patterns import HEURISTICS, kappa_for_rate, max_kappa
from .smoother import mask_objective

WORKERS_ENV = "PILOTCPE_WORKERS"
OPTIMIZED = ("S_opt", "U_opt")
GRID_AXES = ("alpha", "snr_db", "linewidth_hz", "num_channels")
FULL_SCALE_SYSTEM = {"block_length": 10000, "symbol_rate_baud": 20e9, "linewidth_hz": 200e3}

DESCRIPTIONS = {
    "mse-vs-alpha": "objective J vs 4D-channel correlation for heuristic and optimized distributions",
    "mse-heuristics": "objective J of S1-S5 (optionally S_opt) at a fixed pilot rate",
    "mse-grid": "objective J over the product of alpha, SNR, linewidth and M grids",
    "mse-reduction": "MSE reduction 1 - J(S4)/J(S1) in percent over a parameter grid",
    "air-sweep": "Monte-Carlo AIR vs pilot rate per distribution",
    "air-gain": "AIR gain of S4 over S1, each maximized over pilot rate",
    "optimize": "GA search for one optimized distribution; writes JSON and the mask",
}

PRESETS = {
    "mse-vs-alpha": {
        "system": {"num_channels": 4, "block_length": 100},
        "pilots": 20,
        "distributions": ["S1", "S2", "S3", "S4", "S5", "S_opt", "U_opt"],
        "grids": {"alpha": [0.0, 0.25, 0.5, 0.75, 1.0], "snr_db": [15.0, 20.0, 25.0]},
    },
    "mse-heuristics": {
        "system": {"num_channels": 4, "block_length": 1000},
        "pilot_rate": 0.01,
        "distributions": ["S1", "S2", "S3", "S4", "S5"],
        "grids": {"alpha": [0.0, 0.5, 1.0], "snr_db": [25.0]},
    },
    "mse-grid": {
        "system": {"num_channels": 4, "block_length": 1000},
        "pilot_rate": 0.01,
        "distributions": ["S1", "S2", "S3", "S4"],
        "grids": {"alpha": [0.0, 1.0], "snr_db": [10.0, 25.0]},
    },
    "mse-reduction": {
        "system": {"num_channels": 4, "block_length": 1000},
        "pilot_rate": 0.01,
        "distributions": ["S1", "S4"],
        "grids": {"alpha": [0.0, 0.5, 1.0], "snr_db": [10.0, 20.0, 30.0],
                  "linewidth_hz": [100e3, 1e6], "num_channels": [4, 16]},
    },
    "air-sweep": {
        "system": {"num_channels": 4, "block_length": 1000, "snr_db": 25.0},
        "constellation": 256,
        "distributions": ["S1", "S4"],
        "rate_grid": [0.002, 0.005, 0.01, 0.02, 0.05],
        "grids": {"alpha": [0.0, 1.0]},
        "runs": 200,
        "ci_target": 0.03,
    },
    "air-gain": {
        "system": {"num_channels": 4, "block_length": 1000},
        "constellation": [256],
        "rate_grid": [0.002, 0.005, 0.01, 0.02, 0.05],
        "grids": {"alpha": [0.0, 1.0], "snr_db": [25.0]},
        "runs": 200,
        "ci_target": 0.03,
    },
    "optimize": {
        "system": {"num_channels": 4, "block_length": 100, "snr_db": 20.0, "alpha": 1.0},
        "pilots": 20,
        "distributions": ["S_opt"],
    },
}

FULL_SCALE = {
    "air-sweep": {"runs": 1000, "ci_target": 0.01},
    "air-gain": {"runs": 1000, "ci_target": 0.01},
}


class SpecError(ValueError):
    """Invalid experiment spec; ``errors`` lists ``{"field", "message"}`` records."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(f"{e['field']}: {e['message']}" for e in self.errors))


@dataclass
class ExperimentSpec:
    experiment: str
    output: str = "results"
    system: dict = field(default_factory=dict)
    distributions: list = field(default_factory=list)
    grids: dict = field(default_factory=dict)
    pilots: int | None = None
    pilot_rate: float | None = None
    rate_grid: list = field(default_factory=list)
    constellation: object = 256
    runs: int = 200
    ci_target: float | None = None
    num_iters: int = 3
    seed: int = 0
    ga: dict = field(default_factory=dict)
    span: str = "block"
    full_scale: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def set_path(d: dict, dotted: str, value) -> None:
    """Assign ``value`` at ``a.b.c`` inside nested dict ``d``."""
    keys = dotted.split(".")
    for k in keys[:-1]:
        d = d.setdefault(k, {})
    d[keys[-1]] = value


class _Loader(yaml.SafeLoader):
    pass


# YAML 1.1 reads "1e6" as a string; accept exponent-only floats too
_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^(?:[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?
                  |[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)
                  |\.[0-9_]+(?:[eE][-+]?[0-9]+)?
                  |[-+]?\.(?:inf|Inf|INF)
                  |\.(?:nan|NaN|NAN))$""", re.X),
    list("-+0123456789."),
)


def parse_yaml(text: str):
    return yaml.load(text, Loader=_Loader)  # noqa: S506 - SafeLoader subclass


def load_spec_file(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise SpecError([{"field": "spec_file", "message": str(exc)}]) from None
    try:
        raw = parse_yaml(text)
    except yaml.YAMLError as exc:
        raise SpecError([{"field": "spec_file", "message": f"YAML parse error: {exc}"}]) from None
    if not isinstance(raw, dict):
        raise SpecError([{"field": "spec_file", "message": "top level must be a mapping"}])
    return raw


def resolve_spec(raw: dict, overrides: dict | None = None) -> ExperimentSpec:
    """Merge preset, file values and overrides; validate the result."""
    raw = _merge(raw, overrides or {})
    exp = raw.get("experiment")
    if exp not in PRESETS:
        raise SpecError([{"field": "experiment",
                          "message": f"unknown experiment {exp!r}; expected one of {sorted(PRESETS)}"}])
    known = {f.name for f in fields(ExperimentSpec)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise SpecError([{"field": k, "message": "unknown key"} for k in unknown])
    merged = _merge(PRESETS[exp], raw)
    # an explicit pilot count in the file replaces a preset rate and vice versa
    if "pilots" in raw and "pilot_rate" not in raw:
        merged.pop("pilot_rate", None)
    if "pilot_rate" in raw and "pilots" not in raw:
        merged.pop("pilots", None)
    if merged.get("full_scale"):
        merged["system"] = _merge(merged.get("system", {}), FULL_SCALE_SYSTEM)
        for k, v in FULL_SCALE.get(exp, {}).items():
            if k not in raw:
                merged[k] = v
    spec = ExperimentSpec(**merged)
    validate_spec(spec)
    return spec


def _base_config(spec: ExperimentSpec) -> SystemConfig:
    return SystemConfig(**spec.system)


def grid_points(spec: ExperimentSpec) -> list[dict]:
    """Product of the spec's axis grids (fixed axis order)."""
    axes = [(a, list(spec.grids[a])) for a in GRID_AXES if a in spec.grids]
    return [dict(zip([a for a, _ in axes], combo)) for combo in itertools.product(*[v for _, v in axes])]


def pilot_counts(spec: ExperimentSpec, M: int, N: int) -> tuple[int, int]:
    """``(kappa, L)``: pilots per channel for structured families and total pilots."""
    if spec.pilots is not None:
        L = int(spec.pilots)
        return (L // M if L % M == 0 else -1), L
    kappa = kappa_for_rate(float(spec.pilot_rate), N)
    return kappa, kappa * M


def validate_spec(spec: ExperimentSpec) -> None:
    errs = []

    def bad(fld, msg):
        errs.append({"field": fld, "message": msg})

    try:
        base = _base_config(spec)
    except (TypeError, ValueError) as exc:
        bad("system", str(exc))
        raise SpecError(errs) from None
    for axis, values in spec.grids.items():
        if axis not in GRID_AXES:
            bad(f"grids.{axis}", f"unknown axis; expected one of {list(GRID_AXES)}")
        elif not isinstance(values, list) or not values:
            bad(f"grids.{axis}", "grid must be a nonempty list")
    if errs:
        raise SpecError(errs)
    if spec.experiment.startswith("air") and not spec.rate_grid:
        bad("rate_grid", "rate grid must be nonempty")
    if spec.runs < 1:
        bad("runs", "runs must be >= 1")
    if spec.num_iters < 1:
        bad("num_iters", "num_iters must be >= 1")
    if spec.span not in SPAN_MODES:
        bad("span", f"expected one of {list(SPAN_MODES)}")
    orders = spec.constellation if isinstance(spec.constellation, list) else [spec.constellation]
    if not orders or any(o not in SUPPORTED_ORDERS for o in orders):
        bad("constellation", f"orders must be in {list(SUPPORTED_ORDERS)}")
    try:
        GaConfig(**spec.ga)
    except (TypeError, ValueError) as exc:
        bad("ga", str(exc))
    if spec.experiment != "air-gain" and not spec.distributions:
        bad("distributions", "at least one distribution is required")
    if spec.experiment == "mse-reduction" and not {"S1", "S4"} <= set(spec.distributions):
        bad("distributions", "mse-reduction needs S1 and S4")
    if not spec.experiment.startswith("air") and (spec.pilots is None) == (spec.pilot_rate is None):
        bad("pilots", "give exactly one of pilots (total) or pilot_rate")
    names = set(HEURISTICS) | set(OPTIMIZED) | {"Urnd"}
    for d in spec.distributions:
        if d not in names:
            bad("distributions", f"unknown distribution {d!r}")
    if errs:
        raise SpecError(errs)

    # constructibility at every grid point
    for pt in grid_points(spec) or [{}]:
        try:
            cfg = base.replace(**pt)
        except ValueError as exc:
            bad("grids", f"{pt}: {exc}")
            continue
        M, N = cfg.num_channels, cfg.block_length
        if spec.experiment.startswith("air"):
            families = ["S1", "S4"] if spec.experiment == "air-gain" else spec.distributions
            for rate in spec.rate_grid:
                kappa = kappa_for_rate(rate, N)
                for d in families:
                    if d in OPTIMIZED:
                        bad("distributions", f"{d} is not supported in AIR experiments")
                    elif not 0 <= kappa <= max_kappa(d, M, N):
                        bad("rate_grid", f"{d}: rate {rate} gives kappa={kappa} outside "
                                         f"[0, {max_kappa(d, M, N)}] for M={M}, N={N}")
            continue
        kappa, L = pilot_counts(spec, M, N)
        for d in spec.distributions:
            if d == "U_opt":
                if not 1 <= L <= M * N:
                    bad("pilots", f"U_opt needs 1 <= L <= {M * N}, got {L}")
            elif kappa < 0:
                bad("pilots", f"{d}: {L} pilots do not split evenly over M={M} channels")
            elif d == "S_opt":
                if kappa < 1 or kappa > N:
                    bad("pilots", f"S_opt needs 1 <= kappa <= N, got {kappa}")
            elif not 0 <= kappa <= max_kappa(d, M, N):
                bad("pilots", f"{d}: kappa={kappa} outside [0, {max_kappa(d, M, N)}] for M={M}, N={N}")
    if errs:
        # identical messages from many grid points collapse to one
        uniq = list({(e["field"], e["message"]): e for e in errs}.values())
        raise SpecError(uniq)


# ---------------------------------------------------------------- runners

def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.12g}"
    return str(x)


@dataclass
class Table:
    name: str
    header: list
    rows: list = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.header)
        for row in self.rows:
            w.writerow([fmt(v) for v in row])
        return buf.getvalue()


def _ga(spec: ExperimentSpec) -> GaConfig:
    ga = dict(spec.ga)
    ga.setdefault("rng_seed", spec.seed)
    return GaConfig(**ga)


def _distribution_J(spec: ExperimentSpec, cfg: SystemConfig, name: str):
    M, N = cfg.num_channels, cfg.block_length
    kappa, L = pilot_counts(spec, M, N)
    if name == "U_opt":
        res = optimize_unstructured(cfg, L, _ga(spec))
        return res.best_J, res.best_mask
    if name == "S_opt":
        res = optimize_structured(cfg, kappa, _ga(spec), spec.span)
        return res.best_J, res.best_mask
    mask = family_mask(name, kappa, M, N, spec.seed)
    return mask_objective(mask, cfg), mask


def _mse_point(args):
    spec, pt = args
    cfg = _base_config(spec).replace(**pt)
    out = []
    for name in spec.distributions:
        J, mask = _distribution_J(spec, cfg, name)
        out.append((cfg, name, mask, J))
    return out


def _air_point(args):
    spec, pt, order, family, rate = args
    cfg = _base_config(spec).replace(**pt)
    const = make_constellation(order, cfg.symbol_energy)
    kappa = kappa_for_rate(rate, cfg.block_length)
    mask = family_mask(family, kappa, cfg.num_channels, cfg.block_length, spec.seed)
    return estimate_air(cfg, mask, const, spec.runs, spec.seed, ci_target=spec.ci_target,
                        num_iters=spec.num_iters)


def _map(fn, tasks, workers: int):
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, tasks))


MSE_HEADER = ["M", "N", "snr_db", "alpha", "linewidth_hz", "distribution", "kappa", "pilots",
              "pilot_rate", "J", "mse"]


def run_mse(spec: ExperimentSpec, workers: int = 1) -> list[Table]:
    table = Table(spec.experiment, MSE_HEADER)
    for results in _map(_mse_point, [(spec, pt) for pt in grid_points(spec)], workers):
        for cfg, name, mask, J in results:
            M, N = cfg.num_channels, cfg.block_length
            per = mask.per_channel()
            kappa = int(per[0]) if np.all(per == per[0]) else ""
            table.rows.append([M, N, cfg.snr_db, cfg.alpha, cfg.linewidth_hz, name, kappa, mask.count,
                               mask.rate, J, J / (M * N)])
    return [table]


def run_reduction(spec: ExperimentSpec, workers: int = 1) -> list[Table]:
    table = Table("mse-reduction", ["M", "N", "snr_db", "alpha", "linewidth_hz", "kappa",
                                    "J_S1", "J_S4", "reduction_pct"])
    sub = copy.copy(spec)
    sub.distributions = ["S1", "S4"]
    for results in _map(_mse_point, [(sub, pt) for pt in grid_points(spec)], workers):
        (cfg, _, m1, j1), (_, _, _, j4) = results
        table.rows.append([cfg.num_channels, cfg.block_length, cfg.snr_db, cfg.alpha, cfg.linewidth_hz,
                           int(m1.per_channel()[0]), j1, j4, (1.0 - j4 / j1) * 100.0])
    return [table]


AIR_HEADER = ["format", "M", "snr_db", "alpha", "distribution", "pilot_rate", "gmi", "air", "ci", "blocks", "seed"]


def _air_rows(spec, tasks, workers):
    results = _map(_air_point, tasks, workers)
    rows = []
    for (s, pt, order, family, rate), res in zip(tasks, results):
        cfg = _base_config(s).replace(**pt)
        rows.append(([f"{order}QAM", cfg.num_channels, cfg.snr_db, cfg.alpha, family, res.pilot_rate,
                      res.gmi_bits_per_symbol, res.air_bits_per_symbol, res.ci_halfwidth,
                      res.num_blocks, s.seed], res))
    return rows


def _orders(spec):
    return spec.constellation if isinstance(spec.constellation, list) else [spec.constellation]


def run_air_sweep(spec: ExperimentSpec, workers: int = 1) -> list[Table]:
    tasks = [(spec, pt, order, fam, rate) for order in _orders(spec) for pt in grid_points(spec)
             for fam in spec.distributions for rate in spec.rate_grid]
    table = Table("air-sweep", AIR_HEADER, [row for row, _ in _air_rows(spec, tasks, workers)])
    return [table]


def run_air_gain(spec: ExperimentSpec, workers: int = 1) -> list[Table]:
    points = [(order, pt) for order in _orders(spec) for pt in grid_points(spec)]
    tasks = [(spec, pt, order, fam, rate) for order, pt in points
             for fam in ("S1", "S4") for rate in spec.rate_grid]
    rows = _air_rows(spec, tasks, workers)
    detail = Table("air-gain-points", AIR_HEADER, [row for row, _ in rows])
    gain = Table("air-gain", ["format", "M", "snr_db", "alpha", "rate_S1", "air_S1", "rate_S4", "air_S4",
                              "gain", "ci"])
    n = len(spec.rate_grid)
    for j, (order, pt) in enumerate(points):
        chunk = rows[2 * n * j: 2 * n * (j + 1)]
        b1 = max(chunk[:n], key=lambda r: r[1].air_bits_per_symbol)
        b4 = max(chunk[n:], key=lambda r: r[1].air_bits_per_symbol)
        ci = float(np.hypot(b1[1].ci_halfwidth, b4[1].ci_halfwidth))
        gain.rows.append([f"{order}QAM", b1[0][1], b1[0][2], b1[0][3], b1[1].pilot_rate,
                          b1[1].air_bits_per_symbol, b4[1].pilot_rate, b4[1].air_bits_per_symbol,
                          b4[1].air_bits_per_symbol - b1[1].air_bits_per_symbol, ci])
    return [gain, detail]


def run_optimize(spec: ExperimentSpec, workers: int = 1) -> tuple[list[Table], dict]:
    cfg = _base_config(spec)
    M, N = cfg.num_channels, cfg.block_length
    kappa, L = pilot_counts(spec, M, N)
    tables, extra = [], {}
    for name in spec.distributions:
        if name == "S_opt":
            res = optimize_structured(cfg, kappa, _ga(spec), spec.span)
        elif name == "U_opt":
            res = optimize_unstructured(cfg, L, _ga(spec))
        else:
            raise SpecError([{"field": "distributions", "message": "optimize accepts S_opt and U_opt"}])
        hist = Table(f"optimize-{name}-history", ["generation", "best_J"],
                     [[g, j] for g, j in enumerate(res.history)])
        tables.append(hist)
        rec = res.to_dict()
        rec.pop("wall_time_s", None)
        extra[f"optimize-{name}.json"] = json.dumps(rec, indent=2, sort_keys=True) + "\n"
        extra[f"optimize-{name}-mask.txt"] = res.best_mask.to_text()
    return tables, extra


RUNNERS = {
    "mse-vs-alpha": run_mse,
    "mse-heuristics": run_mse,
    "mse-grid": run_mse,
    "mse-reduction": run_reduction,
    "air-sweep": run_air_sweep,
    "air-gain": run_air_gain,
    "optimize": run_optimize,
}


def default_workers() -> int:
    value = os.environ.get(WORKERS_ENV, "1")
    try:
        return max(1, int(value))
    except ValueError:
        return 1


def _versions() -> dict:
    import scipy

    from . import __version__

    return {"pilotcpe": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def run_experiment(spec: ExperimentSpec, workers: int | None = None) -> dict:
    """Run ``spec`` and write CSV/JSON outputs plus ``manifest.json``.

    The manifest is written whether the run succeeds or raises; the
    exception is re-raised afterwards. Returns the manifest.
    """
    workers = default_workers() if workers is None else workers
    out = Path(spec.output)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"experiment": spec.experiment, "status": "running", "spec": spec.to_dict(),
                "seed": spec.seed, "workers": workers, "versions": _versions(), "outputs": []}
    start = time.perf_counter()
    try:
        result = RUNNERS[spec.experiment](spec, workers)
        tables, extra = result if isinstance(result, tuple) else (result, {})
        for t in tables:
            path = out / f"{t.name}.csv"
            path.write_text(t.to_csv())
            manifest["outputs"].append(path.name)
        for name, text in extra.items():
            (out / name).write_text(text)
            manifest["outputs"].append(name)
        manifest["status"] = "ok"
    except Exception as exc:
        manifest["status"] = "error"
        manifest["error"] = {"type": type(exc).__name__, "message": str(exc)}
        raise
    finally:
        manifest["wall_time_s"] = time.perf_counter() - start
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, default=str) + "\n")
    return manifest
