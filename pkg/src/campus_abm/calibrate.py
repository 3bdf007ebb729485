"""Method-of-simulated-moments fit of the shared transmission probability.

One scalar ``beta_tilde`` = sigma_C * beta_C is shared by every active
context. It is tuned so that the simulated mean quasi-stationary drinker
fraction matches a target prevalence. Every objective evaluation reuses the
same replicate seeds (common random numbers), which makes the objective a
deterministic function of ``beta_tilde``.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import ModelConfig, ModelError
from .engine import run_ensemble
from .popsynth import visit_matrix_for

log = logging.getLogger(__name__)

INV_PHI = (math.sqrt(5) - 1) / 2


class CalibrationError(ModelError):
    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class BoundaryWarning(UserWarning):
    pass


@dataclass(frozen=True)
class CalibrationSpec:
    target_prevalence: float = 0.20
    beta_tilde_bounds: tuple = (0.0, 0.003)
    replicates_per_eval: int = 200
    tolerance: float = 0.005
    max_iterations: int = 40
    xtol: float = 1e-6
    seed: int | None = None  # replicate seeds start here; None -> config.seed
    threads: int = 1

    def __post_init__(self):
        lo, hi = self.beta_tilde_bounds
        if not 0 <= lo < hi <= 1:
            raise ValueError(f"bad beta_tilde_bounds {self.beta_tilde_bounds}")
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")
        if self.replicates_per_eval < 1 or self.max_iterations < 1:
            raise ValueError("replicates_per_eval and max_iterations must be >= 1")


@dataclass
class CalibrationResult:
    beta_tilde: float
    betas: tuple
    prevalence: float
    objective: float
    iterations: int
    converged: bool
    at_boundary: bool
    context_names: tuple = ()
    history: list = field(default_factory=list, repr=False)


def simulated_prevalence(beta_tilde: float, config: ModelConfig, spec: CalibrationSpec,
                         matrix=None) -> float:
    seed = config.seed if spec.seed is None else spec.seed
    summary = run_ensemble(config.with_transmission(beta_tilde), spec.replicates_per_eval,
                           base_seed=seed, threads=spec.threads, matrix=matrix)
    return summary.qs_mean


def msm_objective(beta_tilde: float, config: ModelConfig, spec: CalibrationSpec,
                  matrix=None) -> float:
    """Squared distance between simulated and target mean prevalence."""
    lo, hi = spec.beta_tilde_bounds
    if not lo <= beta_tilde <= hi:
        raise ValueError(f"beta_tilde {beta_tilde} outside {spec.beta_tilde_bounds}")
    m = simulated_prevalence(beta_tilde, config, spec, matrix)
    return (m - spec.target_prevalence) ** 2


def decompose(beta_tilde: float, sigmas) -> tuple:
    """Per-context beta = beta_tilde / sigma; zero where sigma is zero."""
    sig = np.asarray(sigmas, dtype=float)
    out = np.zeros_like(sig)
    np.divide(beta_tilde, sig, out=out, where=sig > 0)
    return tuple(float(b) for b in out)


def golden_section(f, lo: float, hi: float, max_iterations: int, xtol: float):
    """Minimise ``f`` on [lo, hi]. Returns (x, f(x), iterations, evaluations)."""
    cache = {}

    def ev(x):
        if x not in cache:
            cache[x] = f(x)
        return cache[x]

    # endpoints count too: a monotone moment can put the optimum at a bound
    a, b = lo, hi
    c = b - INV_PHI * (b - a)
    d = a + INV_PHI * (b - a)
    fc, fd = ev(c), ev(d)
    it = 0
    while it < max_iterations and (b - a) > xtol:
        it += 1
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - INV_PHI * (b - a)
            fc = ev(c)
        else:
            a, c, fc = c, d, fd
            d = a + INV_PHI * (b - a)
            fd = ev(d)
    ev(lo)
    ev(hi)
    x = min(cache, key=lambda k: (cache[k], k))
    return x, cache[x], it, sorted(cache.items())


def calibrate_beta(config: ModelConfig, spec: CalibrationSpec, matrix=None) -> CalibrationResult:
    config.validate()
    if matrix is None:
        matrix = visit_matrix_for(config)
    lo, hi = spec.beta_tilde_bounds
    prevalence = {}

    def objective(bt):
        m = simulated_prevalence(bt, config, spec, matrix)
        prevalence[bt] = m
        log.debug("beta_tilde=%.6g prevalence=%.4f", bt, m)
        return (m - spec.target_prevalence) ** 2

    x, fx, iters, history = golden_section(objective, lo, hi, spec.max_iterations, spec.xtol)
    achieved = prevalence[x]
    width = hi - lo
    at_boundary = min(x - lo, hi - x) <= max(spec.xtol, 1e-9 * width)
    converged = abs(achieved - spec.target_prevalence) <= spec.tolerance
    result = CalibrationResult(
        beta_tilde=x,
        betas=decompose(x, config.context_sigmas),
        prevalence=achieved,
        objective=fx,
        iterations=iters,
        converged=converged,
        at_boundary=at_boundary,
        context_names=config.context_names,
        history=[(bt, prevalence[bt], obj) for bt, obj in history],
    )
    if at_boundary:
        warnings.warn(
            f"optimum at the boundary of {spec.beta_tilde_bounds}: target "
            f"{spec.target_prevalence} may be unreachable within bounds", BoundaryWarning)
        return result
    if not converged:
        raise CalibrationError(
            f"|prevalence - target| = {abs(achieved - spec.target_prevalence):.4f} "
            f"> tolerance {spec.tolerance} after {iters} iterations", best=result)
    return result


def write_report(result: CalibrationResult, path) -> Path:
    path = Path(path)
    lines = [
        f"beta_tilde = {result.beta_tilde:.10g}",
        *(f"beta_{name} = {b:.10g}" for name, b in zip(result.context_names, result.betas)),
        f"achieved_prevalence = {result.prevalence:.6f}",
        f"objective = {result.objective:.6e}",
        f"iterations = {result.iterations}",
        f"converged = {str(result.converged).lower()}",
        f"at_boundary = {str(result.at_boundary).lower()}",
    ]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path
