"""Sensitivity of quasi-stationary prevalence to context transmission probabilities.

Local one-at-a-time sweeps, Latin-hypercube designs scored with partial
correlation (PCC) and standardized regression (SRC) coefficients, and Sobol
first/total-order indices (Jansen estimators) with percentile-bootstrap CIs.
"""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .core import ModelConfig, ModelError, RngStream
from .engine import run_ensemble
from .popsynth import visit_matrix_for

DEFAULT_NAMES = ("Dorm", "Library", "MU", "SDFC")


class DegenerateDesignError(ModelError, ValueError):
    pass


@dataclass(frozen=True)
class ParameterSpace:
    names: tuple = DEFAULT_NAMES
    bounds: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "bounds", tuple((float(lo), float(hi)) for lo, hi in self.bounds))
        if len(self.bounds) != len(self.names):
            raise ValueError("one (lower, upper) pair per parameter required")
        for name, (lo, hi) in zip(self.names, self.bounds):
            if not lo < hi:
                raise ValueError(f"{name}: lower bound {lo} not below upper {hi}")

    @classmethod
    def from_config(cls, config: ModelConfig, names=DEFAULT_NAMES, factor: float = 2.0):
        """Each context's sigma*beta ranges over [0, factor * baseline]."""
        bt = config.transmission_probs
        return cls(names, tuple((0.0, factor * bt[config.index_of(n)]) for n in names))

    @property
    def k(self) -> int:
        return len(self.names)

    @property
    def lower(self) -> np.ndarray:
        return np.array([b[0] for b in self.bounds])

    @property
    def upper(self) -> np.ndarray:
        return np.array([b[1] for b in self.bounds])

    def scale(self, unit: np.ndarray) -> np.ndarray:
        """Map points in the unit cube onto the bounds."""
        return self.lower + unit * (self.upper - self.lower)


@dataclass
class IndexEstimate:
    parameter: str
    method: str
    estimate: float
    ci_lo: float
    ci_hi: float


@dataclass
class SensitivityResult:
    method: str
    names: tuple
    design: np.ndarray
    qoi: np.ndarray
    indices: list[IndexEstimate]
    metadata: dict = field(default_factory=dict)

    def estimates(self, method: str | None = None) -> dict:
        return {i.parameter: i.estimate for i in self.indices if method in (None, i.method)}

    def get(self, parameter: str, method: str) -> IndexEstimate:
        for i in self.indices:
            if i.parameter == parameter and i.method == method:
                return i
        raise KeyError((parameter, method))


# -- model evaluation ---------------------------------------------------------

def point_config(point, space: ParameterSpace, config: ModelConfig) -> ModelConfig:
    bt = config.transmission_probs[:-1].copy()
    for name, v in zip(space.names, point):
        bt[config.index_of(name)] = v
    return config.with_transmission(bt)


def evaluate_qoi(point, config: ModelConfig, replicates: int = 1, seed: int = 0,
                 space: ParameterSpace | None = None, matrix=None) -> float:
    """Mean drinker fraction over the quasi-stationary window at ``point``."""
    space = space or ParameterSpace.from_config(config)
    cfg = point_config(point, space, config)
    return run_ensemble(cfg, replicates, base_seed=seed, matrix=matrix).qs_mean


def _evaluate_row(args):
    point, config, replicates, seed, space, matrix = args
    return evaluate_qoi(point, config, replicates, seed, space, matrix)


def evaluate_design(design, config: ModelConfig, space: ParameterSpace, replicates: int = 1,
                    base_seed: int = 0, threads: int = 1, matrix=None) -> np.ndarray:
    """QOI for every design row; row i uses seeds base_seed + i*replicates + j."""
    if matrix is None:
        matrix = visit_matrix_for(config)
    jobs = [(row, config, replicates, base_seed + i * replicates, space, matrix)
            for i, row in enumerate(np.asarray(design))]
    if threads <= 1:
        return np.array([_evaluate_row(j) for j in jobs])
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return np.array(list(pool.map(_evaluate_row, jobs, chunksize=max(1, len(jobs) // (8 * threads)))))


# -- local one-at-a-time ------------------------------------------------------

@dataclass
class SweepResult:
    parameter: str
    x: np.ndarray
    mean: np.ndarray
    ci_lo: np.ndarray
    ci_hi: np.ndarray


def oat_sweep(space: ParameterSpace, dimension: int, grid_points: int, config: ModelConfig,
              replicates: int = 200, seed: int = 0, threads: int = 1, matrix=None) -> SweepResult:
    """Vary one parameter over a uniform grid, the rest pinned at baseline."""
    if not 0 <= dimension < space.k:
        raise IndexError(f"dimension {dimension} outside [0, {space.k})")
    if matrix is None:
        matrix = visit_matrix_for(config)
    baseline = np.array([config.transmission_probs[config.index_of(n)] for n in space.names])
    lo, hi = space.bounds[dimension]
    xs = np.array([baseline[dimension]]) if grid_points == 1 else np.linspace(lo, hi, grid_points)
    means, los, his = [], [], []
    for x in xs:
        point = baseline.copy()
        point[dimension] = x
        s = run_ensemble(point_config(point, space, config), replicates, base_seed=seed,
                         threads=threads, matrix=matrix)
        means.append(s.qs_mean)
        a, b = s.qs_ci
        los.append(a)
        his.append(b)
    return SweepResult(space.names[dimension], xs, np.array(means), np.array(los), np.array(his))


# -- Latin hypercube + regression indices -------------------------------------

def lhs_sample(space: ParameterSpace, n: int, rng: RngStream) -> np.ndarray:
    """One point per equal-width stratum in every column, columns permuted independently."""
    if n < 2:
        raise ValueError("LHS needs n >= 2")
    strata = np.column_stack([rng.permutation(n) for _ in range(space.k)])
    unit = (strata + rng.random((n, space.k))) / n
    return space.scale(unit)


def _check_design(X, y):
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n, k = X.shape
    if len(y) != n:
        raise ValueError("design rows and qoi length differ")
    if n < k + 2:
        raise DegenerateDesignError(f"need more than {k + 1} samples, got {n}")
    if np.ptp(y) == 0:
        raise DegenerateDesignError("response is constant")
    design = np.column_stack([np.ones(n), X])
    if np.linalg.matrix_rank(design) < k + 1:
        raise DegenerateDesignError("design columns are collinear or constant")
    return X, y


def _residuals(A, b):
    coef, *_ = np.linalg.lstsq(A, b, rcond=None)
    return b - A @ coef


def pcc(design, qoi) -> np.ndarray:
    """Partial correlation of the response with each column, others regressed out."""
    X, y = _check_design(design, qoi)
    n, k = X.shape
    out = np.empty(k)
    for j in range(k):
        others = np.column_stack([np.ones(n), np.delete(X, j, axis=1)])
        ex = _residuals(others, X[:, j])
        ey = _residuals(others, y)
        denom = np.sqrt((ex @ ex) * (ey @ ey))
        out[j] = (ex @ ey) / denom if denom > 0 else 0.0
    return out


def src(design, qoi) -> np.ndarray:
    """OLS slopes scaled by sd(x_j) / sd(y)."""
    X, y = _check_design(design, qoi)
    A = np.column_stack([np.ones(len(y)), X])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    return coef[1:] * X.std(axis=0, ddof=1) / y.std(ddof=1)


# -- bootstrap ----------------------------------------------------------------

def bootstrap_ci(samples, statistic, B: int = 100, confidence: float = 0.95,
                 rng: RngStream | None = None, estimate=None):
    """Percentile bootstrap interval for ``statistic`` over rows of ``samples``.

    ``statistic`` may return a scalar or a vector; the interval has the same
    shape. If ``estimate`` is given the interval is widened to cover it.
    """
    if B < 2:
        raise ValueError("B must be at least 2")
    samples = np.asarray(samples)
    n = len(samples)
    if n == 0:
        raise ValueError("samples is empty")
    rng = rng if rng is not None else np.random.default_rng()
    stats = []
    for _ in range(B):
        idx = rng.integers(0, n, n)
        try:
            stats.append(statistic(samples[idx]))
        except DegenerateDesignError:
            continue
    if len(stats) < 2:
        raise DegenerateDesignError("too few non-degenerate bootstrap resamples")
    stats = np.asarray(stats, dtype=float)
    alpha = (1.0 - confidence) / 2
    lo = np.quantile(stats, alpha, axis=0)
    hi = np.quantile(stats, 1.0 - alpha, axis=0)
    if estimate is not None:
        lo = np.minimum(lo, estimate)
        hi = np.maximum(hi, estimate)
    return lo, hi


def regression_indices(space: ParameterSpace, design, qoi, B: int = 1000, rng=None,
                       confidence: float = 0.95) -> list[IndexEstimate]:
    design = np.asarray(design, dtype=float)
    qoi = np.asarray(qoi, dtype=float)
    k = space.k
    joined = np.column_stack([design, qoi])
    out = []
    for method, fn in (("PCC", pcc), ("SRC", src)):
        est = fn(design, qoi)
        lo, hi = bootstrap_ci(joined, lambda s, fn=fn: fn(s[:, :k], s[:, k]), B, confidence,
                              rng, estimate=est)
        out += [IndexEstimate(name, method, float(e), float(a), float(b))
                for name, e, a, b in zip(space.names, est, lo, hi)]
    return out


# -- Sobol --------------------------------------------------------------------

@dataclass
class SobolDesign:
    A: np.ndarray
    B: np.ndarray
    AB: np.ndarray  # (k, n, k): AB[j] is A with column j taken from B

    @property
    def n(self) -> int:
        return len(self.A)

    def stacked(self) -> np.ndarray:
        """All n*(k+2) evaluation points: A, then B, then AB[0], ..., AB[k-1]."""
        return np.concatenate([self.A, self.B, *self.AB])

    def split(self, values):
        """Inverse of ``stacked`` for a vector of model outputs."""
        v = np.asarray(values, dtype=float)
        n, k = self.n, self.A.shape[1]
        if len(v) != n * (k + 2):
            raise ValueError(f"expected {n * (k + 2)} values, got {len(v)}")
        return v[:n], v[n:2 * n], v[2 * n:].reshape(k, n)


def sobol_design(space: ParameterSpace, n: int, rng: RngStream) -> SobolDesign:
    if n < 2:
        raise ValueError("Sobol design needs n >= 2")
    A = space.scale(rng.random((n, space.k)))
    B = space.scale(rng.random((n, space.k)))
    AB = np.repeat(A[None], space.k, axis=0)
    for j in range(space.k):
        AB[j, :, j] = B[:, j]
    return SobolDesign(A, B, AB)


def sobol_indices(fA, fB, fAB):
    """Jansen first-order and total-order estimators.

    ``fAB`` has shape (k, n). Estimates are returned unclipped, so sampling
    noise can push them slightly below 0 or above 1.
    """
    fA = np.asarray(fA, dtype=float)
    fB = np.asarray(fB, dtype=float)
    fAB = np.atleast_2d(np.asarray(fAB, dtype=float))
    V = np.var(np.concatenate([fA, fB]), ddof=1)
    if not V > 0:
        raise DegenerateDesignError("response variance is zero")
    S = (V - 0.5 * np.mean((fB - fAB) ** 2, axis=1)) / V
    ST = 0.5 * np.mean((fA - fAB) ** 2, axis=1) / V
    return S, ST


def sobol_analysis(space: ParameterSpace, design: SobolDesign, values, B: int = 100,
                   rng=None, confidence: float = 0.95) -> list[IndexEstimate]:
    fA, fB, fAB = design.split(values)
    S, ST = sobol_indices(fA, fB, fAB)
    # resample the n base rows jointly across A, B and every AB[j]
    rows = np.column_stack([fA, fB, fAB.T])
    k = space.k

    def stat(r):
        s, st = sobol_indices(r[:, 0], r[:, 1], r[:, 2:].T)
        return np.concatenate([s, st])

    lo, hi = bootstrap_ci(rows, stat, B, confidence, rng, estimate=np.concatenate([S, ST]))
    out = [IndexEstimate(name, "S", float(S[j]), float(lo[j]), float(hi[j]))
           for j, name in enumerate(space.names)]
    out += [IndexEstimate(name, "ST", float(ST[j]), float(lo[k + j]), float(hi[k + j]))
            for j, name in enumerate(space.names)]
    return out


# -- drivers ------------------------------------------------------------------

def run_lhs(config: ModelConfig, space: ParameterSpace, n: int = 1000, replicates: int = 1,
            seed: int = 0, B: int = 1000, repeats: int = 1, threads: int = 1) -> SensitivityResult:
    """LHS design(s) -> QOI -> PCC and SRC. Repeated designs are pooled."""
    rng = np.random.default_rng([seed, 2])
    design = np.concatenate([lhs_sample(space, n, rng) for _ in range(repeats)])
    qoi = evaluate_design(design, config, space, replicates, seed, threads)
    indices = regression_indices(space, design, qoi, B, rng)
    return SensitivityResult("lhs", space.names, design, qoi, indices,
                             dict(n=n, replicates=replicates, seed=seed, bootstrap=B,
                                  repeats=repeats))


def run_sobol(config: ModelConfig, space: ParameterSpace, n: int = 1000, replicates: int = 1,
              seed: int = 0, B: int = 100, threads: int = 1) -> SensitivityResult:
    rng = np.random.default_rng([seed, 3])
    design = sobol_design(space, n, rng)
    points = design.stacked()
    qoi = evaluate_design(points, config, space, replicates, seed, threads)
    indices = sobol_analysis(space, design, qoi, B, rng)
    return SensitivityResult("sobol", space.names, points, qoi, indices,
                             dict(n=n, replicates=replicates, seed=seed, bootstrap=B,
                                  evaluations=len(points)))
