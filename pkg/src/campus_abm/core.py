"""Domain types and the closed-form probability kernels of the campus model."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

# Baseline parameters, context order: Library, MU, SDFC, Dorm, Others.
CONTEXT_NAMES = ("Library", "MU", "SDFC", "Dorm", "Others")
BASELINE_SIGMAS = (0.1429, 0.4492, 0.2043, 0.2037, 0.0)
BASELINE_BETAS = (0.0105, 0.0033, 0.0073, 0.0074, 0.0)
BASELINE_RHO = 0.0187
BASELINE_GAMMA = 0.0187
CLASS_YEAR_FRACTIONS = (0.30, 0.25, 0.23, 0.18, 0.04)
# mean probability of visiting MU, used to anchor the visit marginals
MU_VISIT_PROB = 0.33

TOL = 1e-9

RngStream = np.random.Generator


def make_rng(seed: int) -> RngStream:
    return np.random.default_rng(seed)


class ModelError(Exception):
    """Base class for errors raised by this package."""


class InvalidInputError(ModelError, ValueError):
    pass


class ConfigError(ModelError, ValueError):
    pass


class DrinkingState(enum.IntEnum):
    ND = 0
    D = 1
    FD = 2


# the only state changes the dynamics may produce (class-year replacement aside)
LEGAL_TRANSITIONS = frozenset({
    (DrinkingState.ND, DrinkingState.D),
    (DrinkingState.D, DrinkingState.FD),
    (DrinkingState.FD, DrinkingState.D),
})

# sentinel for "duration not yet assigned"
UNASSIGNED = -1.0


@dataclass
class Agent:
    id: int
    class_year: int
    visit_probs: np.ndarray
    current_context: int
    state: DrinkingState
    drinking_period: float = 0.0

    def check(self) -> None:
        p = np.asarray(self.visit_probs, dtype=float)
        if np.any(p < 0) or abs(p.sum() - 1.0) > TOL:
            raise InvalidInputError(f"agent {self.id}: visit_probs not a probability vector")
        if not 0 <= self.class_year <= 4:
            raise InvalidInputError(f"agent {self.id}: class_year {self.class_year} out of range")
        dp = self.drinking_period
        if not (dp >= 0 or dp == UNASSIGNED):
            raise InvalidInputError(f"agent {self.id}: drinking_period {dp}")
        if (dp == UNASSIGNED or dp > 0) and self.state != DrinkingState.D:
            raise InvalidInputError(f"agent {self.id}: drinking_period set on a non-drinker")


@dataclass
class Context:
    id: int
    name: str
    sigma: float
    beta: float
    drinker_count: int = 0

    @property
    def transmission(self) -> float:
        return self.sigma * self.beta


def _as_tuple(x) -> tuple:
    return tuple(float(v) for v in x)


@dataclass(frozen=True)
class ModelConfig:
    """Every parameter of a run. Unset fields take the baseline values."""

    N: int = 538
    n: int = 5
    context_names: tuple = CONTEXT_NAMES
    tick_hours: int = 2
    ticks_per_day: int = 8
    ticks_per_year: int = 1440
    rho: float = BASELINE_RHO
    gamma: float = BASELINE_GAMMA
    class_year_fractions: tuple = CLASS_YEAR_FRACTIONS
    initial_drinker_fraction: float = 0.05
    context_sigmas: tuple = BASELINE_SIGMAS
    context_betas: tuple = BASELINE_BETAS
    horizon_ticks: int = 100
    qs_window: tuple = (50, 100)
    seed: int = 0
    # population synthesis
    mean_visit_probs: tuple | None = None
    concentration: float = 10.0
    visit_matrix: np.ndarray | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        for name in ("class_year_fractions", "context_sigmas", "context_betas"):
            object.__setattr__(self, name, _as_tuple(getattr(self, name)))
        if self.mean_visit_probs is not None:
            object.__setattr__(self, "mean_visit_probs", _as_tuple(self.mean_visit_probs))
        object.__setattr__(self, "context_names", tuple(self.context_names))
        object.__setattr__(self, "qs_window", tuple(int(v) for v in self.qs_window))

    def validate(self) -> "ModelConfig":
        def bad(msg):
            raise ConfigError(msg)

        if self.N < 1:
            bad(f"N must be positive, got {self.N}")
        if self.n < 2:
            bad(f"n must be at least 2, got {self.n}")
        for name in ("context_names", "context_sigmas", "context_betas"):
            if len(getattr(self, name)) != self.n:
                bad(f"{name} must have {self.n} entries")
        for name in ("rho", "gamma", "initial_drinker_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                bad(f"{name} = {v} outside [0, 1]")
        for name in ("context_sigmas", "context_betas", "class_year_fractions"):
            v = np.asarray(getattr(self, name))
            if np.any(v < 0) or np.any(v > 1):
                bad(f"{name} has entries outside [0, 1]")
        if self.context_sigmas[-1] != 0.0:
            bad("the last context (Others) must have sigma = 0")
        if len(self.class_year_fractions) != 5 or abs(sum(self.class_year_fractions) - 1) > 1e-6:
            bad("class_year_fractions must be 5 values summing to 1")
        if self.horizon_ticks < 0:
            bad("horizon_ticks must be non-negative")
        lo, hi = self.qs_window
        if not 0 <= lo <= hi <= self.horizon_ticks:
            bad(f"qs_window {self.qs_window} not inside [0, {self.horizon_ticks}]")
        if self.concentration <= 0:
            bad("concentration must be positive")
        if self.mean_visit_probs is not None:
            p = np.asarray(self.mean_visit_probs)
            if len(p) != self.n or np.any(p < 0) or abs(p.sum() - 1) > 1e-6:
                bad("mean_visit_probs must be a probability vector of length n")
        if self.visit_matrix is not None:
            m = np.asarray(self.visit_matrix)
            if m.shape != (self.N, self.n):
                bad(f"visit_matrix shape {m.shape} != ({self.N}, {self.n})")
        return self

    @property
    def transmission_probs(self) -> np.ndarray:
        """Per-context composite sigma*beta."""
        return np.asarray(self.context_sigmas) * np.asarray(self.context_betas)

    def contexts(self) -> list[Context]:
        return [Context(i, name, s, b) for i, (name, s, b) in
                enumerate(zip(self.context_names, self.context_sigmas, self.context_betas))]

    def with_transmission(self, beta_tilde) -> "ModelConfig":
        """Copy with per-context sigma*beta set to ``beta_tilde``.

        ``beta_tilde`` is a scalar (shared by all active contexts) or one
        value per active context (all but Others). Sigmas are kept, betas
        are solved as beta_tilde / sigma.
        """
        sig = np.asarray(self.context_sigmas)
        bt = np.broadcast_to(np.asarray(beta_tilde, dtype=float), (self.n - 1,))
        betas = np.zeros(self.n)
        active = sig[:-1] > 0
        betas[:-1][active] = bt[active] / sig[:-1][active]
        return replace(self, context_betas=tuple(betas))

    def index_of(self, context_name: str) -> int:
        try:
            return self.context_names.index(context_name)
        except ValueError:
            raise ConfigError(f"unknown context {context_name!r}") from None


def contact_probabilities(mean_visit_probs) -> np.ndarray:
    """Contact probabilities from mean visit probabilities.

    Each active context gets sqrt(N p_i) / sum_j sqrt(N p_j); N cancels. The
    last entry (Others) is forced to zero.
    """
    p = np.asarray(mean_visit_probs, dtype=float)
    if p.ndim != 1 or len(p) < 2:
        raise InvalidInputError("need a 1-d vector with at least two contexts")
    if np.any(p < 0):
        raise InvalidInputError("visit probabilities must be non-negative")
    root = np.sqrt(p[:-1])
    total = root.sum()
    if total <= 0:
        raise InvalidInputError("all active-context visit probabilities are zero")
    return np.append(root / total, 0.0)


def per_contact_success(sigma: float, beta: float, phi: float) -> float:
    return sigma * beta * (1.0 - phi)


def aggregate_conversion_prob(sigma: float, beta: float, phi: float, drinkers: int) -> float:
    """Probability that a susceptible sharing a context with ``drinkers``
    drinkers converts this tick, assuming one common resistancy ``phi``."""
    if drinkers < 0:
        raise InvalidInputError("drinker count must be non-negative")
    if drinkers == 0:
        return 0.0
    s = per_contact_success(sigma, beta, phi)
    if drinkers == 1:
        return s
    return float(-np.expm1(drinkers * np.log1p(-s))) if s < 1 else 1.0
