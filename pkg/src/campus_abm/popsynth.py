"""Population synthesis: visit-probability matrix and initial agents.

The individual survey rows behind the model are not available, so each
agent's visit-probability row is drawn from a Dirichlet distribution centred
on the baseline context marginals. This is an assumption of this package,
not a reconstruction of real responses.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import (
    BASELINE_SIGMAS,
    CLASS_YEAR_FRACTIONS,
    CONTEXT_NAMES,
    MU_VISIT_PROB,
    UNASSIGNED,
    Agent,
    ConfigError,
    DrinkingState,
    InvalidInputError,
    ModelConfig,
    RngStream,
)


class InvalidAnchorError(InvalidInputError):
    pass


def derive_context_marginals(target_sigmas, anchor_p: float, anchor_index: int = 1) -> np.ndarray:
    """Invert the contact-probability map.

    Returns mean visit probabilities for the active contexts plus a final
    Others entry taking the remaining mass, such that feeding the result to
    ``contact_probabilities`` gives back ``target_sigmas``. The scale is
    fixed by pinning context ``anchor_index`` (MU by default) to ``anchor_p``.
    """
    sig = np.asarray(target_sigmas, dtype=float)
    if np.any(sig <= 0):
        raise InvalidInputError("target sigmas must be positive")
    if abs(sig.sum() - 1.0) > 1e-3:
        raise InvalidInputError(f"target sigmas sum to {sig.sum():.6f}, expected 1")
    if not 0.0 < anchor_p < 1.0:
        raise InvalidAnchorError(f"anchor probability {anchor_p} not in (0, 1)")
    p = (sig / sig[anchor_index]) ** 2 * anchor_p
    others = 1.0 - p.sum()
    if others < -1e-12:
        raise InvalidAnchorError(
            f"anchor {anchor_p} leaves negative mass {others:.4g} for Others")
    return np.append(p, max(others, 0.0))


def default_marginals() -> np.ndarray:
    return derive_context_marginals(BASELINE_SIGMAS[:-1], MU_VISIT_PROB)


@dataclass(frozen=True)
class PopulationSpec:
    N: int = 538
    context_names: tuple = CONTEXT_NAMES
    mean_visit_probs: tuple = tuple(default_marginals())
    concentration: float = 10.0
    class_year_fractions: tuple = CLASS_YEAR_FRACTIONS
    initial_drinker_fraction: float = 0.05

    def __post_init__(self):
        p = np.asarray(self.mean_visit_probs, dtype=float)
        if abs(p.sum() - 1.0) > 1e-6 or np.any(p < 0):
            raise ConfigError("mean_visit_probs must be a probability vector")
        if len(p) != len(self.context_names):
            raise ConfigError("mean_visit_probs and context_names differ in length")
        if self.concentration <= 0:
            raise ConfigError("concentration must be positive")

    @classmethod
    def from_config(cls, config: ModelConfig) -> "PopulationSpec":
        marginals = config.mean_visit_probs
        if marginals is None:
            marginals = tuple(default_marginals())
        return cls(
            N=config.N,
            context_names=config.context_names,
            mean_visit_probs=tuple(marginals),
            concentration=config.concentration,
            class_year_fractions=config.class_year_fractions,
            initial_drinker_fraction=config.initial_drinker_fraction,
        )


def synthesize_visit_matrix(spec: PopulationSpec, rng: RngStream) -> np.ndarray:
    """Draw one visit-probability row per agent, Dirichlet(kappa * p)."""
    p = np.asarray(spec.mean_visit_probs, dtype=float)
    # Dirichlet needs strictly positive parameters; zero-mass contexts stay zero
    support = p > 0
    out = np.zeros((spec.N, len(p)))
    if support.sum() == 1:
        out[:, support] = 1.0
        return out
    rows = rng.dirichlet(spec.concentration * p[support], size=spec.N)
    out[:, support] = rows / rows.sum(axis=1, keepdims=True)
    return out


def initialize_population(spec: PopulationSpec, matrix, rng: RngStream) -> list[Agent]:
    matrix = np.asarray(matrix, dtype=float)
    if matrix.shape[0] != spec.N:
        raise InvalidInputError(f"matrix has {matrix.shape[0]} rows, expected {spec.N}")
    years = rng.choice(5, size=spec.N, p=np.asarray(spec.class_year_fractions))
    drinkers = rng.random(spec.N) < spec.initial_drinker_fraction
    others = matrix.shape[1] - 1
    agents = []
    for i in range(spec.N):
        if drinkers[i]:
            state, dp = DrinkingState.D, UNASSIGNED
        else:
            state, dp = DrinkingState.ND, 0.0
        # everyone starts off-campus until the first movement phase
        agents.append(Agent(i, int(years[i]), matrix[i].copy(), others, state, dp))
    return agents


def read_matrix(path, N: int | None = None, n: int | None = None) -> np.ndarray:
    """Read a visit matrix: one agent per line, whitespace-separated reals."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = [float(x) for x in line.split()]
            except ValueError:
                raise ConfigError(f"{path}:{lineno}: non-numeric entry") from None
            if n is not None and len(row) != n:
                raise ConfigError(f"{path}:{lineno}: expected {n} values, got {len(row)}")
            if min(row) < 0 or abs(sum(row) - 1.0) > 1e-6:
                raise ConfigError(f"{path}:{lineno}: row is not a probability vector")
            rows.append(row)
    if N is not None and len(rows) != N:
        raise ConfigError(f"{path}: {len(rows)} rows, expected N = {N}")
    if len({len(r) for r in rows}) > 1:
        raise ConfigError(f"{path}: rows have differing lengths")
    m = np.array(rows)
    return m / m.sum(axis=1, keepdims=True)


def write_matrix(matrix, path) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in np.asarray(matrix):
            fh.write(" ".join(repr(float(x)) for x in row) + "\n")
    return path


def visit_matrix_for(config: ModelConfig) -> np.ndarray:
    """The visit matrix a run uses: explicit if given, else synthesized from
    ``config.seed`` so that all replicates share one population."""
    if config.visit_matrix is not None:
        return np.asarray(config.visit_matrix, dtype=float)
    spec = PopulationSpec.from_config(config)
    # separate entropy from the per-replicate streams seeded with plain ints
    return synthesize_visit_matrix(spec, np.random.default_rng([config.seed, 1]))
