import math

import numpy as np
import pytest
from scipy import stats

from campus_abm.core import (
    LEGAL_TRANSITIONS,
    ConfigError,
    Context,
    ModelConfig,
)
from campus_abm.engine import (
    SimState,
    TimeSeries,
    class_year_phase,
    init_state,
    movement_phase,
    recovery_phase,
    reinitiation_phase,
    run_ensemble,
    run_replicate,
    sample_context,
    step,
    summarize,
    transmission_phase,
)

ND, D, FD = 0, 1, 2


def make_state(states, contexts, sigma_beta, visit=None, dp=None, years=None):
    """Hand-built state with every agent already placed."""
    states = np.asarray(states)
    n = len(sigma_beta)
    N = len(states)
    if visit is None:
        visit = np.zeros((N, n))
        visit[np.arange(N), contexts] = 1.0
    ctx = [Context(i, f"c{i}", 1.0, float(s)) for i, s in enumerate(sigma_beta)]
    if dp is None:
        dp = np.where(states == D, -1.0, 0.0)
    return SimState(
        tick=0, visit_probs=np.asarray(visit, float),
        class_year=np.zeros(N, int) if years is None else np.asarray(years),
        context=np.asarray(contexts), state=states.copy(),
        drinking_period=np.asarray(dp, float), contexts=ctx)


# -- movement ----------------------------------------------------------------

P = [0.14, 0.06, 0.41, 0.24, 0.15]


def test_sample_context_examples():
    assert sample_context(P, 0.10) == 0
    assert all(sample_context([1, 0, 0, 0, 0], u) == 0 for u in (0.0, 0.3, 0.999, 1.0))
    # cumulative sums 0.14, 0.20, 0.61: u = 0.20 sits on the inclusive upper
    # edge of the second bin
    assert sample_context(P, 0.20) == 1
    assert sample_context(P, 0.2000001) == 2
    assert sample_context(P, 0.14) == 0
    assert sample_context(P, 1.0) == 4


def test_sample_context_skips_zero_mass_bins():
    assert sample_context([0, 0.5, 0, 0.5, 0], 0.5) == 1
    assert sample_context([0, 0.5, 0, 0.5, 0], 1.0) == 3


def test_movement_marginal_chi_square():
    visit = np.array([P])
    st_ = make_state([ND], [4], [0, 0, 0, 0, 0], visit=visit)
    rng = np.random.default_rng(5)
    counts = np.zeros(5)
    for _ in range(100_000):
        movement_phase(st_, rng)
        counts[st_.context[0]] += 1
    p = stats.chisquare(counts, np.array(P) * counts.sum()).pvalue
    assert p > 0.01


def test_movement_recounts_drinkers():
    visit = np.tile(P, (300, 1))
    states = np.array([D] * 100 + [ND] * 200)
    st_ = make_state(states, [4] * 300, [0.1] * 4 + [0], visit=visit)
    movement_phase(st_, np.random.default_rng(0))
    for c in st_.contexts:
        assert c.drinker_count == np.sum((st_.context == c.id) & (st_.state == D))


# -- transmission -------------------------------------------------------------

def test_no_drinkers_no_change():
    st_ = make_state([ND, FD, ND], [0, 0, 0], [0.9, 0])
    transmission_phase(st_, np.random.default_rng(0))
    assert list(st_.state) == [ND, FD, ND]


def test_zero_transmission_no_conversions():
    st_ = make_state([D, ND, FD, D, ND], [0, 0, 0, 1, 1], [0.0, 0.0, 0])
    for seed in range(50):
        transmission_phase(st_, np.random.default_rng(seed))
    assert list(st_.state) == [D, ND, FD, D, ND]


def test_pairwise_marginal_is_half_sigma_beta():
    # 100 independent contexts, each with one drinker and k susceptibles
    k, groups, s = 10, 100, 0.3
    states = np.tile([D] + [ND] * k, groups)
    ctxs = np.repeat(np.arange(groups), k + 1)
    converted = 0
    rng = np.random.default_rng(17)
    reps = 1000  # 10^5 tick-trials
    for _ in range(reps):
        st_ = make_state(states, ctxs, [s] * groups + [0])
        transmission_phase(st_, rng)
        converted += np.sum(st_.state == D) - groups
    expected = k * s / 2
    assert abs(converted / (reps * groups) / expected - 1) < 0.02


def test_new_converts_do_not_spread_same_tick():
    # converts are flagged in NC and never act as sources in the same phase
    st_ = make_state([D] + [ND] * 5 + [FD] * 3, [0] * 9, [1.0, 0])
    st_.drinking_period[0] = 10.0
    transmission_phase(st_, np.random.default_rng(0))
    # u1 <= 1 * u2 succeeds with probability 1/2 per pair, so not all convert
    assert st_.newly_converted.sum() == np.sum(st_.state == D) - 1
    assert np.all(st_.drinking_period[st_.newly_converted] == -1)
    assert st_.drinking_period[0] == 10.0


def test_others_context_never_transmits():
    st_ = make_state([D, D, ND, ND], [1, 1, 1, 1], [0.5, 0.0])
    for seed in range(100):
        transmission_phase(st_, np.random.default_rng(seed))
    assert list(st_.state) == [D, D, ND, ND]


# -- recovery -----------------------------------------------------------------

def test_recovery_decrements():
    st_ = make_state([D], [0], [0, 0], dp=[5.0])
    recovery_phase(st_, np.random.default_rng(0), gamma=0.0187)
    assert st_.drinking_period[0] == 4.0
    assert st_.state[0] == D


def test_recovery_ends_in_fd():
    st_ = make_state([D, D], [0, 0], [0, 0], dp=[0.0, 0.4])
    recovery_phase(st_, np.random.default_rng(0), gamma=0.0187)
    assert st_.state[0] == FD and st_.drinking_period[0] == 0
    assert st_.state[1] == D
    recovery_phase(st_, np.random.default_rng(0), gamma=0.0187)
    assert st_.state[1] == FD


def _duration_draws(gamma, n, seed):
    st_ = make_state(np.full(n, D), np.zeros(n, int), [0, 0])
    recovery_phase(st_, np.random.default_rng(seed), gamma=gamma)
    return st_.drinking_period.copy()


def test_duration_mean_and_truncation():
    g = 0.0187
    d = _duration_draws(g, 100_000, 3)
    assert d.min() >= 1.0
    # E[max(1, X)] for X ~ Exp(rate g) is 1 + exp(-g)/g; 1/g = 53.48
    exact = 1 + math.exp(-g) / g
    assert abs(d.mean() - exact) < 4 * d.std() / math.sqrt(len(d))
    assert d.mean() == pytest.approx(1 / g, rel=0.01)


def test_duration_tail_is_exponential():
    g = 0.0187
    d = _duration_draws(g, 100_000, 4)
    # memorylessness: the excess over the truncation point is Exp(g) again
    tail = d[d > 1.0] - 1.0
    assert stats.kstest(tail, "expon", args=(0, 1 / g)).pvalue > 0.01


# -- reinitiation -------------------------------------------------------------

def test_reinitiation_extremes():
    st_ = make_state([FD] * 50, [0] * 50, [0, 0])
    reinitiation_phase(st_, np.random.default_rng(0), rho=0.0)
    assert np.all(st_.state == FD)
    reinitiation_phase(st_, np.random.default_rng(0), rho=1.0)
    assert np.all(st_.state == D) and np.all(st_.drinking_period == -1)


def test_reinitiation_skips_newly_converted():
    st_ = make_state([FD, FD], [0, 0], [0, 0])
    st_.newly_converted[0] = True
    reinitiation_phase(st_, np.random.default_rng(0), rho=1.0)
    assert st_.state[0] == FD and st_.state[1] == D


def test_reinitiation_rate():
    rng = np.random.default_rng(8)
    hits = 0
    for _ in range(100):
        st_ = make_state([FD] * 1000, [0] * 1000, [0, 0])
        reinitiation_phase(st_, rng, rho=0.0187)
        hits += np.sum(st_.state == D)
    assert abs(hits / 100_000 - 0.0187) < 0.002


# -- class year ---------------------------------------------------------------

def test_graduates_replaced_by_freshmen():
    st_ = make_state([D, FD, ND], [0, 0, 0], [0, 0], years=[4, 4, 4], dp=[7.0, 0, 0])
    class_year_phase(st_)
    assert list(st_.class_year) == [0, 0, 0]
    assert list(st_.state) == [ND, ND, ND]
    assert list(st_.drinking_period) == [0, 0, 0]
    assert st_.N == 3


def test_class_year_histogram_shift():
    years = np.repeat(np.arange(5), [30, 25, 23, 18, 4])
    states = np.full(100, FD)
    st_ = make_state(states, np.zeros(100, int), [0, 0], years=years)
    visit_before = st_.visit_probs.copy()
    class_year_phase(st_)
    np.testing.assert_array_equal(np.bincount(st_.class_year, minlength=5), [4, 30, 25, 23, 18])
    assert np.sum(st_.state == ND) == 4
    np.testing.assert_array_equal(st_.visit_probs, visit_before)


def test_class_year_runs_every_academic_year():
    cfg = ModelConfig(N=60, ticks_per_year=10, horizon_ticks=30, qs_window=(0, 30))
    state, rng = init_state(cfg, 1)
    years0 = state.class_year.copy()
    for _ in range(10):
        step(state, cfg, rng)
    np.testing.assert_array_equal(state.class_year, (years0 + 1) % 5)
    for _ in range(9):
        step(state, cfg, rng)
    np.testing.assert_array_equal(state.class_year, (years0 + 1) % 5)
    step(state, cfg, rng)
    np.testing.assert_array_equal(state.class_year, (years0 + 2) % 5)


# -- whole replicates ---------------------------------------------------------

def test_no_source_no_drinkers():
    ts = run_replicate(ModelConfig(initial_drinker_fraction=0.0, rho=0.0), seed=3)
    assert np.all(ts.counts[:, D] == 0)


def test_same_seed_identical():
    cfg = ModelConfig()
    assert run_replicate(cfg, 9) == run_replicate(cfg, 9)
    assert run_replicate(cfg, 9) != run_replicate(cfg, 10)


def test_invalid_config_raises_before_work():
    with pytest.raises(ConfigError):
        run_replicate(ModelConfig(rho=2.0), 0)


def test_conservation_and_legal_transitions():
    cfg = ModelConfig(horizon_ticks=200, qs_window=(0, 200), ticks_per_year=75)
    state, rng = init_state(cfg, 21)
    seen = set()
    for t in range(cfg.horizon_ticks):
        before = state.state.copy()
        step(state, cfg, rng)
        assert sum(state.counts()) == cfg.N
        assert np.array_equal(state.context_drinkers(),
                              [c.drinker_count for c in state.contexts])
        changed = before != state.state
        pairs = set(zip(before[changed].tolist(), state.state[changed].tolist()))
        if state.tick % cfg.ticks_per_year == 0:
            # replacement may send anyone to ND; ignore those agents
            pairs = {p for p in pairs if p[1] != ND}
        assert pairs <= {(int(a), int(b)) for a, b in LEGAL_TRANSITIONS}
        seen |= pairs
        for a in state.agents[:20]:
            a.check()
    assert seen == {(0, 1), (1, 2), (2, 1)}


def test_ensemble_single_replicate_matches_series():
    cfg = ModelConfig(horizon_ticks=60, qs_window=(30, 60))
    s = run_ensemble(cfg, 1, base_seed=4)
    ts = run_replicate(cfg, 4)
    np.testing.assert_array_equal(s.mean, ts.fractions())
    assert s.qs_mean == pytest.approx(ts.window_mean((30, 60)))
    assert s.qs_ci == (s.qs_mean, s.qs_mean)


def test_ensemble_parallel_matches_sequential():
    cfg = ModelConfig(horizon_ticks=40, qs_window=(20, 40))
    a = run_ensemble(cfg, 6, base_seed=2, threads=1)
    b = run_ensemble(cfg, 6, base_seed=2, threads=3)
    np.testing.assert_array_equal(a.mean, b.mean)
    np.testing.assert_array_equal(a.qs_values, b.qs_values)
    # aggregation does not depend on replicate order
    c = summarize(list(reversed(a.series)), cfg.qs_window)
    np.testing.assert_allclose(c.mean, a.mean, rtol=1e-12)
    assert c.qs_mean == pytest.approx(a.qs_mean, rel=1e-12)


def test_ensemble_ci_normal_approximation():
    cfg = ModelConfig(horizon_ticks=60, qs_window=(30, 60))
    s = run_ensemble(cfg, 12, base_seed=0)
    half = 1.96 * np.std(s.qs_values, ddof=1) / math.sqrt(12)
    assert s.qs_ci == pytest.approx((s.qs_mean - half, s.qs_mean + half))
    assert 0 <= s.qs_mean <= 1
    assert np.all(s.mean >= 0) and np.all(s.mean <= 1)


def test_empty_timeseries_window_mean():
    ts = TimeSeries(np.arange(3), np.array([[9, 1, 0]] * 3), np.zeros((3, 2), int))
    assert ts.window_mean((0, 2)) == pytest.approx(0.1)


@pytest.mark.slow
def test_prevalence_monotone_in_beta():
    base = ModelConfig()
    means = []
    for factor in (0.5, 1.0, 1.5):
        cfg = base.with_transmission(base.transmission_probs[:-1] * factor)
        s = run_ensemble(cfg, 200, base_seed=100)
        means.append((s.qs_mean, s.qs_ci[1] - s.qs_ci[0]))
    for (m0, w0), (m1, _) in zip(means, means[1:]):
        assert m1 >= m0 - w0
