"""Config files, CSV outputs and run manifests.

Config grammar: one ``key = value`` per line, ``#`` starts a comment, keys
may carry a dotted section prefix (``sa.lhs_samples = 1000``). Vectors are
comma- or whitespace-separated. Unset keys keep the baseline values.
"""
from __future__ import annotations

import csv
import datetime as _dt
import platform
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .calibrate import CalibrationSpec
from .core import ConfigError, ModelConfig
from .engine import EnsembleSummary, TimeSeries
from .popsynth import PopulationSpec, derive_context_marginals, read_matrix
from .sensitivity import DEFAULT_NAMES, ParameterSpace, SensitivityResult, SweepResult


class ConfigParseError(ConfigError):
    def __init__(self, message, line: int | None = None, key: str | None = None):
        where = f"line {line}" if line is not None else "config"
        if key:
            where += f", key {key!r}"
        super().__init__(f"{where}: {message}")
        self.line = line
        self.key = key


@dataclass(frozen=True)
class SASettings:
    lhs_samples: int = 1000
    sobol_samples: int = 1000
    replicates: int = 1
    oat_replicates: int = 200
    oat_grid_points: int = 11
    sobol_bootstrap: int = 100
    regression_bootstrap: int = 1000
    repeats: int = 1
    bound_factor: float = 2.0


@dataclass
class RunConfig:
    model: ModelConfig
    population: PopulationSpec
    calibration: CalibrationSpec
    space: ParameterSpace
    sa: SASettings = field(default_factory=SASettings)
    source: dict = field(default_factory=dict)  # key -> raw value text, as parsed


# key -> (kind, lo, hi); kind: int, float, pos, prob, vec, probvec, names, window, str
_MODEL_KEYS = {
    "N": ("int", 1, None),
    "rho": ("prob", 0, 1),
    "gamma": ("prob", 0, 1),
    "initial_drinker_fraction": ("prob", 0, 1),
    "horizon_ticks": ("int", 0, None),
    "qs_window": ("window", 0, None),
    "seed": ("int", None, None),
    "class_year_fractions": ("probvec", 0, 1),
    "context_names": ("names", None, None),
    "context_sigmas": ("vec", 0, 1),
    "context_betas": ("vec", 0, 1),
    "tick_hours": ("int", 1, None),
    "ticks_per_day": ("int", 1, None),
    "ticks_per_year": ("int", 1, None),
}
_KEYS = {
    **_MODEL_KEYS,
    "population.concentration": ("pos", None, None),
    "population.mean_visit_probs": ("probvec", 0, 1),
    "population.anchor_p": ("prob", 0, 1),
    "population.matrix_file": ("str", None, None),
    "calibration.target_prevalence": ("prob", 0, 1),
    "calibration.beta_tilde_min": ("float", 0, 1),
    "calibration.beta_tilde_max": ("float", 0, 1),
    "calibration.replicates_per_eval": ("int", 1, None),
    "calibration.tolerance": ("pos", None, None),
    "calibration.max_iterations": ("int", 1, None),
    "sa.parameters": ("names", None, None),
    "sa.bound_factor": ("pos", None, None),
    "sa.lhs_samples": ("int", 2, None),
    "sa.sobol_samples": ("int", 2, None),
    "sa.replicates": ("int", 1, None),
    "sa.oat_replicates": ("int", 1, None),
    "sa.oat_grid_points": ("int", 1, None),
    "sa.sobol_bootstrap": ("int", 2, None),
    "sa.regression_bootstrap": ("int", 2, None),
    "sa.repeats": ("int", 1, None),
}


def _convert(kind, text, lo, hi, line, key):
    def fail(msg):
        raise ConfigParseError(msg, line, key)

    def num(s, cast=float):
        try:
            v = cast(s)
        except ValueError:
            fail(f"cannot parse {s!r} as {cast.__name__}")
        if lo is not None and v < lo:
            fail(f"value {v} below minimum {lo}")
        if hi is not None and v > hi:
            fail(f"value {v} above maximum {hi}")
        return v

    parts = text.replace(",", " ").split()
    if kind == "str":
        return text
    if kind == "names":
        if not parts:
            fail("empty list")
        return tuple(parts)
    if not parts:
        fail("missing value")
    if kind == "int":
        if len(parts) != 1:
            fail("expected a single integer")
        return num(parts[0], int)
    if kind in ("float", "prob", "pos"):
        if len(parts) != 1:
            fail("expected a single number")
        v = num(parts[0])
        if kind == "pos" and v <= 0:
            fail("must be positive")
        return v
    if kind == "window":
        if len(parts) != 2:
            fail("expected two integers: start end")
        a, b = num(parts[0], int), num(parts[1], int)
        if a > b:
            fail("window start after end")
        return (a, b)
    vec = tuple(num(p) for p in parts)
    if kind == "probvec" and abs(sum(vec) - 1.0) > 1e-6:
        fail(f"entries sum to {sum(vec):.6g}, expected 1")
    return vec


def parse_config_text(text: str, base_dir: Path | None = None) -> RunConfig:
    values = {}
    lines = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigParseError(f"malformed line {raw.strip()!r}, expected key = value", lineno)
        key, _, val = (s.strip() for s in line.partition("="))
        if key not in _KEYS:
            raise ConfigParseError("unknown key", lineno, key)
        if key in values:
            raise ConfigParseError(f"duplicate key (first set on line {lines[key]})", lineno, key)
        kind, lo, hi = _KEYS[key]
        values[key] = _convert(kind, val, lo, hi, lineno, key)
        lines[key] = lineno
    source = {k: text.splitlines()[lines[k] - 1].split("#", 1)[0].partition("=")[2].strip()
              for k in values}

    def err(key, msg):
        raise ConfigParseError(msg, lines.get(key), key)

    model_kw = {k: v for k, v in values.items() if k in _MODEL_KEYS}
    if "context_names" in model_kw:
        model_kw["n"] = len(model_kw["context_names"])
    if "population.concentration" in values:
        model_kw["concentration"] = values["population.concentration"]
    if "population.mean_visit_probs" in values and "population.anchor_p" in values:
        err("population.anchor_p", "give either mean_visit_probs or anchor_p, not both")
    if "population.mean_visit_probs" in values:
        model_kw["mean_visit_probs"] = values["population.mean_visit_probs"]
    elif "population.anchor_p" in values:
        sig = model_kw.get("context_sigmas", ModelConfig().context_sigmas)
        try:
            model_kw["mean_visit_probs"] = tuple(
                derive_context_marginals(sig[:-1], values["population.anchor_p"]))
        except ValueError as e:
            err("population.anchor_p", str(e))
    if "population.matrix_file" in values:
        path = Path(values["population.matrix_file"])
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        # snapshots are written elsewhere, so keep an absolute path
        source["population.matrix_file"] = str(path.resolve())
        n = model_kw.get("n", 5)
        model_kw["visit_matrix"] = read_matrix(path, model_kw.get("N", 538), n)
    try:
        model = ModelConfig(**model_kw).validate()
    except ConfigError as e:
        raise ConfigParseError(str(e)) from None

    cal_kw = {}
    for k in ("target_prevalence", "replicates_per_eval", "tolerance", "max_iterations"):
        if f"calibration.{k}" in values:
            cal_kw[k] = values[f"calibration.{k}"]
    default_bounds = CalibrationSpec().beta_tilde_bounds
    bounds = (values.get("calibration.beta_tilde_min", default_bounds[0]),
              values.get("calibration.beta_tilde_max", default_bounds[1]))
    try:
        calibration = CalibrationSpec(beta_tilde_bounds=bounds, **cal_kw)
    except ValueError as e:
        raise ConfigParseError(str(e), lines.get("calibration.beta_tilde_max")) from None

    sa_kw = {k.split(".", 1)[1]: v for k, v in values.items()
             if k.startswith("sa.") and k != "sa.parameters"}
    sa = SASettings(**sa_kw)
    names = values.get("sa.parameters", DEFAULT_NAMES)
    for name in names:
        if name not in model.context_names[:-1]:
            err("sa.parameters", f"{name!r} is not an active context")
    try:
        space = ParameterSpace.from_config(model, names, sa.bound_factor)
    except ValueError as e:
        err("sa.parameters", str(e))
    return RunConfig(model, PopulationSpec.from_config(model), calibration, space, sa, source)


def parse_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    return parse_config_text(text, path.parent)


def dump_config(run: RunConfig, seed: int | None = None) -> str:
    """Config text that parses back to ``run`` (optionally with a new seed)."""
    m = run.model
    vec = lambda xs: ", ".join(repr(float(x)) for x in xs)  # noqa: E731
    out = [
        f"N = {m.N}",
        f"context_names = {', '.join(m.context_names)}",
        f"context_sigmas = {vec(m.context_sigmas)}",
        f"context_betas = {vec(m.context_betas)}",
        f"rho = {m.rho!r}",
        f"gamma = {m.gamma!r}",
        f"class_year_fractions = {vec(m.class_year_fractions)}",
        f"initial_drinker_fraction = {m.initial_drinker_fraction!r}",
        f"horizon_ticks = {m.horizon_ticks}",
        f"qs_window = {m.qs_window[0]} {m.qs_window[1]}",
        f"seed = {m.seed if seed is None else seed}",
        f"tick_hours = {m.tick_hours}",
        f"ticks_per_day = {m.ticks_per_day}",
        f"ticks_per_year = {m.ticks_per_year}",
        f"population.concentration = {m.concentration!r}",
    ]
    if "population.matrix_file" in run.source:
        out.append(f"population.matrix_file = {run.source['population.matrix_file']}")
    if m.mean_visit_probs is not None:
        out.append(f"population.mean_visit_probs = {vec(m.mean_visit_probs)}")
    c = run.calibration
    out += [
        f"calibration.target_prevalence = {c.target_prevalence!r}",
        f"calibration.beta_tilde_min = {c.beta_tilde_bounds[0]!r}",
        f"calibration.beta_tilde_max = {c.beta_tilde_bounds[1]!r}",
        f"calibration.replicates_per_eval = {c.replicates_per_eval}",
        f"calibration.tolerance = {c.tolerance!r}",
        f"calibration.max_iterations = {c.max_iterations}",
        f"sa.parameters = {', '.join(run.space.names)}",
    ]
    out += [f"sa.{f.name} = {getattr(run.sa, f.name)!r}" for f in fields(SASettings)]
    return "\n".join(out) + "\n"


# -- time series ---------------------------------------------------------------

def _header(names, replicate: bool):
    cols = ["tick", "n_ND", "n_D", "n_FD", *(f"drinkers_{c}" for c in names)]
    return (["replicate"] + cols) if replicate else cols


def _open_csv(path):
    path = Path(path)
    try:
        fh = open(path, "w", encoding="utf-8", newline="")
    except OSError as e:
        raise OSError(f"cannot write {path}: {e}") from e
    return fh, csv.writer(fh, lineterminator="\n")


def write_timeseries(data, path, context_names=None) -> Path:
    """Per-tick counts for one replicate, or for every replicate of an ensemble
    (with a leading ``replicate`` column holding the replicate's seed)."""
    if isinstance(data, EnsembleSummary):
        series = data.series
        seeds = [data.base_seed + i for i in range(len(series))]
    else:
        series, seeds = [data], None
    names = context_names or (series[0].context_names if series else ()) or ()
    fh, w = _open_csv(path)
    with fh:
        w.writerow(_header(names, seeds is not None))
        for r, s in enumerate(series):
            for t, c, d in zip(s.ticks, s.counts, s.context_drinkers):
                row = [int(t), *map(int, c), *map(int, d)]
                w.writerow(([seeds[r]] + row) if seeds is not None else row)
    return Path(path)


def read_timeseries(path):
    """Inverse of :func:`write_timeseries`. Returns a TimeSeries, or a dict
    replicate -> TimeSeries when the file carries a replicate column."""
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    has_rep = header[0] == "replicate"
    off = 1 if has_rep else 0
    names = tuple(h.removeprefix("drinkers_") for h in header[off + 4:])

    def build(rs):
        a = np.array(rs, dtype=np.int64).reshape(-1, len(header) - off)
        return TimeSeries(a[:, 0], a[:, 1:4], a[:, 4:], names)

    if not has_rep:
        return build([r for r in body])
    groups = {}
    for r in body:
        groups.setdefault(int(r[0]), []).append(r[1:])
    return {k: build(v) for k, v in groups.items()}


def write_summary(summary: EnsembleSummary, path) -> Path:
    """Mean and SD of each state fraction per tick, 6 decimals."""
    fh, w = _open_csv(path)
    with fh:
        w.writerow(["tick", "mean_ND", "mean_D", "mean_FD", "sd_ND", "sd_D", "sd_FD"])
        for t, m, s in zip(summary.ticks, summary.mean, summary.sd):
            w.writerow([int(t), *(f"{v:.6f}" for v in m), *(f"{v:.6f}" for v in s)])
    return Path(path)


# -- sensitivity outputs ---------------------------------------------------------

def write_design(result: SensitivityResult, path) -> Path:
    fh, w = _open_csv(path)
    with fh:
        w.writerow(["sample_id", *(f"beta_tilde_{n}" for n in result.names), "qoi"])
        for i, (row, y) in enumerate(zip(result.design, result.qoi)):
            w.writerow([i, *(f"{v:.10g}" for v in row), f"{y:.6f}"])
    return Path(path)


def write_indices(result: SensitivityResult, path) -> Path:
    fh, w = _open_csv(path)
    with fh:
        w.writerow(["parameter", "method", "estimate", "ci_lo", "ci_hi"])
        for ix in result.indices:
            w.writerow([ix.parameter, ix.method, f"{ix.estimate:.6f}", f"{ix.ci_lo:.6f}",
                        f"{ix.ci_hi:.6f}"])
    return Path(path)


def write_sweep(sweep: SweepResult, path) -> Path:
    fh, w = _open_csv(path)
    with fh:
        w.writerow([f"beta_tilde_{sweep.parameter}", "qoi", "ci_lo", "ci_hi"])
        for row in zip(sweep.x, sweep.mean, sweep.ci_lo, sweep.ci_hi):
            w.writerow([f"{row[0]:.10g}", *(f"{v:.6f}" for v in row[1:])])
    return Path(path)


# -- manifest ------------------------------------------------------------------------

def write_manifest(out_dir, command: str, argv, run: RunConfig, seed: int, outputs,
                   started: _dt.datetime, extra: dict | None = None) -> Path:
    """Write ``manifest.txt`` plus the ``config.txt`` snapshot it points to.

    Re-running ``rerun`` from inside ``out_dir`` regenerates the outputs
    byte for byte; only the wall-clock lines differ.
    """
    out_dir = Path(out_dir)
    (out_dir / "config.txt").write_text(dump_config(run, seed), encoding="utf-8")
    finished = _dt.datetime.now(_dt.timezone.utc)
    lines = {
        "command": command,
        "argv": " ".join(argv),
        "seed": seed,
        "config_file": "config.txt",
        "outputs": ", ".join(Path(o).name for o in outputs),
        "tool_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "started_utc": started.isoformat(timespec="seconds"),
        "finished_utc": finished.isoformat(timespec="seconds"),
        "elapsed_seconds": f"{(finished - started).total_seconds():.3f}",
        **(extra or {}),
    }
    path = out_dir / "manifest.txt"
    path.write_text("".join(f"{k} = {v}\n" for k, v in lines.items()), encoding="utf-8")
    return path


def read_manifest(path) -> dict:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip() and not line.startswith("#"):
            k, _, v = line.partition("=")
            out[k.strip()] = v.strip()
    return out


def with_seed(run: RunConfig, seed: int) -> RunConfig:
    model = replace(run.model, seed=seed)
    return replace(run, model=model, population=PopulationSpec.from_config(model))
