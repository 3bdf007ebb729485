"""Tick loop and replicate/ensemble runners.

Agents are held as parallel arrays inside :class:`SimState`; ``SimState.agents``
materialises :class:`~campus_abm.core.Agent` objects on demand. Each tick runs
four phases over the whole population in order: movement, transmission,
recovery, reinitiation. Class years advance at the end of every academic year.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .core import (
    UNASSIGNED,
    Agent,
    Context,
    DrinkingState,
    ModelConfig,
    RngStream,
    make_rng,
)
from .popsynth import PopulationSpec, initialize_population, visit_matrix_for

ND, D, FD = int(DrinkingState.ND), int(DrinkingState.D), int(DrinkingState.FD)


def sample_context(visit_probs, u: float) -> int:
    """Smallest m with cumsum(P)[m] >= u, i.e. sum_{j<m} P < u <= sum_{j<=m} P."""
    cum = np.cumsum(np.asarray(visit_probs, dtype=float))
    cum /= cum[-1]
    return int(np.searchsorted(cum, u, side="left"))


def _cumulative(matrix: np.ndarray) -> np.ndarray:
    cum = np.cumsum(matrix, axis=1)
    # exact 1.0 at the top of every row so u <= 1 always lands
    return cum / cum[:, -1:]


@dataclass
class SimState:
    tick: int
    visit_probs: np.ndarray      # (N, n)
    class_year: np.ndarray       # (N,) int
    context: np.ndarray          # (N,) int
    state: np.ndarray            # (N,) int, DrinkingState values
    drinking_period: np.ndarray  # (N,) float, UNASSIGNED = -1
    contexts: list[Context]
    newly_converted: np.ndarray = None  # (N,) bool, the NC set
    _cum: np.ndarray = field(default=None, repr=False)
    _transmission: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.newly_converted is None:
            self.newly_converted = np.zeros(self.N, dtype=bool)
        self._cum = _cumulative(self.visit_probs)
        self._transmission = np.array([c.sigma * c.beta for c in self.contexts])
        self.recount()

    @classmethod
    def from_agents(cls, agents: list[Agent], contexts: list[Context], tick: int = 0) -> "SimState":
        return cls(
            tick=tick,
            visit_probs=np.array([a.visit_probs for a in agents], dtype=float),
            class_year=np.array([a.class_year for a in agents], dtype=np.int64),
            context=np.array([a.current_context for a in agents], dtype=np.int64),
            state=np.array([int(a.state) for a in agents], dtype=np.int64),
            drinking_period=np.array([a.drinking_period for a in agents], dtype=float),
            contexts=contexts,
        )

    @property
    def N(self) -> int:
        return len(self.state)

    @property
    def agents(self) -> list[Agent]:
        return [
            Agent(i, int(self.class_year[i]), self.visit_probs[i].copy(), int(self.context[i]),
                  DrinkingState(int(self.state[i])), float(self.drinking_period[i]))
            for i in range(self.N)
        ]

    def counts(self) -> tuple[int, int, int]:
        c = np.bincount(self.state, minlength=3)
        return int(c[ND]), int(c[D]), int(c[FD])

    def context_drinkers(self) -> np.ndarray:
        return np.bincount(self.context[self.state == D], minlength=len(self.contexts))

    def recount(self) -> None:
        for ctx, k in zip(self.contexts, self.context_drinkers()):
            ctx.drinker_count = int(k)


def movement_phase(state: SimState, rng: RngStream) -> SimState:
    # u in (0, 1]: strict lower bound, inclusive upper bound
    u = 1.0 - rng.random(state.N)
    state.context = (u[:, None] > state._cum).sum(axis=1)
    state.recount()
    return state


def transmission_phase(state: SimState, rng: RngStream) -> SimState:
    """Pairwise drinker -> susceptible transmission inside each context.

    Every (drinker, target) pair in a context draws u1, u2 and succeeds when
    u1 <= sigma*beta*u2. A target converts if any pair succeeds. Because each
    pair has its own draws, the result does not depend on the order drinkers
    are processed in. Drinkers are those present at the start of the phase.
    """
    drinking = state.state == D
    eligible = ~drinking & ~state.newly_converted
    converted = np.zeros(state.N, dtype=bool)
    for c, s in enumerate(state._transmission):
        if s <= 0.0:
            continue
        here = state.context == c
        n_src = int(np.count_nonzero(drinking & here))
        if n_src == 0:
            continue
        targets = np.flatnonzero(eligible & here)
        if targets.size == 0:
            continue
        u1 = rng.random((n_src, targets.size))
        u2 = rng.random((n_src, targets.size))
        hit = (u1 <= s * u2).any(axis=0)
        converted[targets[hit]] = True
    state.state[converted] = D
    state.drinking_period[converted] = UNASSIGNED
    state.newly_converted |= converted
    return state


def recovery_phase(state: SimState, rng: RngStream, gamma: float, dt: float = 1.0,
                   drinkers: np.ndarray | None = None) -> SimState:
    """Advance drinking durations of agents that were drinkers at tick start.

    An unassigned duration is drawn as max(dt, Exponential(mean 1/gamma));
    a positive one is decremented by dt; otherwise the agent becomes FD.
    """
    if drinkers is None:
        drinkers = (state.state == D) & ~state.newly_converted
    dp = state.drinking_period
    assign = drinkers & (dp == UNASSIGNED)
    count = int(np.count_nonzero(assign))
    if count:
        draws = rng.exponential(1.0 / gamma, count) if gamma > 0 else np.full(count, np.inf)
        dp[assign] = np.maximum(dt, draws)
    tick_down = drinkers & ~assign & (dp > 0)
    # floor at 0: same exit tick, keeps the period non-negative
    dp[tick_down] = np.maximum(dp[tick_down] - dt, 0.0)
    leave = drinkers & ~assign & ~tick_down
    state.state[leave] = FD
    dp[leave] = 0.0
    return state


def reinitiation_phase(state: SimState, rng: RngStream, rho: float,
                       former: np.ndarray | None = None) -> SimState:
    """Former drinkers not converted this tick relapse with probability rho."""
    if former is None:
        former = state.state == FD
    eligible = former & ~state.newly_converted & (state.state == FD)
    relapse = eligible & (rng.random(state.N) < rho)
    state.state[relapse] = D
    state.drinking_period[relapse] = UNASSIGNED
    state.newly_converted |= relapse
    return state


def class_year_phase(state: SimState) -> SimState:
    """Everyone moves up a year; graduates are replaced by non-drinking freshmen."""
    state.class_year += 1
    leaving = state.class_year >= 5
    state.class_year[leaving] = 0
    state.state[leaving] = ND
    state.drinking_period[leaving] = 0.0
    state.recount()
    return state


def step(state: SimState, config: ModelConfig, rng: RngStream) -> SimState:
    state.newly_converted[:] = False
    movement_phase(state, rng)
    # recovery and reinitiation act on the states held at the start of the tick
    drinkers = state.state == D
    former = state.state == FD
    transmission_phase(state, rng)
    recovery_phase(state, rng, config.gamma, drinkers=drinkers & ~state.newly_converted)
    reinitiation_phase(state, rng, config.rho, former=former)
    state.tick += 1
    if state.tick % config.ticks_per_year == 0:
        class_year_phase(state)
    state.recount()
    return state


@dataclass
class TimeSeries:
    ticks: np.ndarray            # (T,)
    counts: np.ndarray           # (T, 3) ND, D, FD
    context_drinkers: np.ndarray  # (T, n)
    context_names: tuple = ()

    @property
    def N(self) -> int:
        return int(self.counts[0].sum()) if len(self.counts) else 0

    def fractions(self) -> np.ndarray:
        return self.counts / self.counts.sum(axis=1, keepdims=True)

    def drinker_fraction(self) -> np.ndarray:
        return self.fractions()[:, D]

    def window_mean(self, window) -> float:
        lo, hi = window
        mask = (self.ticks >= lo) & (self.ticks <= hi)
        return float(self.drinker_fraction()[mask].mean())

    def __eq__(self, other):
        return (isinstance(other, TimeSeries)
                and np.array_equal(self.ticks, other.ticks)
                and np.array_equal(self.counts, other.counts)
                and np.array_equal(self.context_drinkers, other.context_drinkers))


def init_state(config: ModelConfig, seed: int, matrix=None) -> tuple[SimState, RngStream]:
    config.validate()
    if matrix is None:
        matrix = visit_matrix_for(config)
    rng = make_rng(seed)
    agents = initialize_population(PopulationSpec.from_config(config), matrix, rng)
    return SimState.from_agents(agents, config.contexts()), rng


def run_replicate(config: ModelConfig, seed: int, matrix=None) -> TimeSeries:
    """One stochastic realisation, fully determined by ``(config, seed)``."""
    state, rng = init_state(config, seed, matrix)
    T = config.horizon_ticks + 1
    counts = np.empty((T, 3), dtype=np.int64)
    per_ctx = np.empty((T, config.n), dtype=np.int64)
    counts[0] = state.counts()
    per_ctx[0] = state.context_drinkers()
    for t in range(1, T):
        step(state, config, rng)
        counts[t] = state.counts()
        per_ctx[t] = state.context_drinkers()
    return TimeSeries(np.arange(T), counts, per_ctx, config.context_names)


@dataclass
class EnsembleSummary:
    ticks: np.ndarray
    mean: np.ndarray       # (T, 3) mean state fractions
    sd: np.ndarray         # (T, 3)
    qs_values: np.ndarray  # per-replicate window-mean drinker fraction
    qs_window: tuple
    base_seed: int
    series: list[TimeSeries] = field(default_factory=list, repr=False)

    @property
    def replicates(self) -> int:
        return len(self.qs_values)

    @property
    def qs_mean(self) -> float:
        return float(self.qs_values.mean())

    @property
    def qs_sd(self) -> float:
        return float(self.qs_values.std(ddof=1)) if self.replicates > 1 else 0.0

    @property
    def qs_ci(self) -> tuple[float, float]:
        half = 1.96 * self.qs_sd / math.sqrt(self.replicates)
        return self.qs_mean - half, self.qs_mean + half


def replicate_seeds(base_seed: int, replicates: int) -> list[int]:
    return [base_seed + i for i in range(replicates)]


def _run_many(config: ModelConfig, seeds, matrix, threads: int) -> list[TimeSeries]:
    if threads <= 1 or len(seeds) < 2:
        return [run_replicate(config, s, matrix) for s in seeds]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(run_replicate, [config] * len(seeds), seeds,
                             [matrix] * len(seeds), chunksize=max(1, len(seeds) // (4 * threads))))


def summarize(series: list[TimeSeries], qs_window, base_seed: int = 0) -> EnsembleSummary:
    fr = np.stack([s.fractions() for s in series])
    ddof = 1 if len(series) > 1 else 0
    return EnsembleSummary(
        ticks=series[0].ticks.copy(),
        mean=fr.mean(axis=0),
        sd=fr.std(axis=0, ddof=ddof),
        qs_values=np.array([s.window_mean(qs_window) for s in series]),
        qs_window=tuple(qs_window),
        base_seed=base_seed,
        series=series,
    )


def run_ensemble(config: ModelConfig, replicates: int, base_seed: int | None = None,
                 threads: int = 1, matrix=None) -> EnsembleSummary:
    """Run ``replicates`` realisations with seeds base_seed + i and aggregate."""
    if replicates < 1:
        raise ValueError("replicates must be >= 1")
    config.validate()
    if base_seed is None:
        base_seed = config.seed
    if matrix is None:
        matrix = visit_matrix_for(config)
    series = _run_many(config, replicate_seeds(base_seed, replicates), matrix, threads)
    return summarize(series, config.qs_window, base_seed)
