import itertools
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conjnash.market import MarketSpec, ParamSet, best_responses, precompute_tables
from conjnash.nash import (EQUILIBRIUM, TWO_ROUND_CYCLE, UNKNOWN, find_all_equilibria,
                           fixed_point_scan, group_flips, play_game, play_games,
                           read_outcome_log, write_outcome_log)


def toy(payoff):
    """Tables from a symmetric payoff array indexed [own line, other lines...]."""
    payoff = np.asarray(payoff, dtype=float)
    a, W = payoff.shape[0], payoff.ndim
    margins = payoff.ravel()
    best, bm = best_responses(margins, a, W)
    return SimpleNamespace(margins=margins, best_line=best, best_margin=bm,
                           n_lines=a, n_firms=W)


def brute_equilibria(t):
    # fixed points straight from the margin table, lowest-rank tie rule
    a, W = t.n_lines, t.n_firms
    M = t.margins.reshape((a,) * W)
    out = set()
    for s in itertools.product(range(a), repeat=W):
        ok = True
        for w in range(W):
            others = s[:w] + s[w + 1:]
            col = [M[(l,) + others] for l in range(a)]
            if col.index(max(col)) != s[w]:
                ok = False
        if ok:
            out.add(int(np.ravel_multi_index(s, (a,) * W)))
    return out


def playout(t, k0, rounds):
    # step-by-step game with dict look-ups
    a, W = t.n_lines, t.n_firms
    br = {tuple(np.unravel_index(p, (a,) * (W - 1))): int(t.best_line[p])
          for p in range(a ** (W - 1))}
    state = [0] + list(np.unravel_index(k0, (a,) * (W - 1)))
    hist = []
    for b in range(1, rounds + 1):
        for w in range(W):
            state[w] = br[tuple(state[:w] + state[w + 1:])]
        hist.append(tuple(int(v) for v in state))
        if b >= 2 and hist[-1] == hist[-2]:
            return EQUILIBRIUM, b, hist[-1]
    if rounds >= 3 and hist[-1] == hist[-3]:
        return TWO_ROUND_CYCLE, rounds, hist[-1]
    return UNKNOWN, rounds, hist[-1]


def test_dominant_product():
    t = toy([[3, 3], [1, 1]])
    tally = find_all_equilibria(t)
    assert tally.n_games == 2 and tally.n_two_round_cycles == 0
    assert tally.equilibria.as_set() == {0}
    assert all(o.rounds_played == 2 for o in tally.outcomes)
    assert set(fixed_point_scan(t).tolist()) == {0}


def test_anti_coordination():
    t = toy([[0, 1], [1, 0]])
    tally = find_all_equilibria(t)
    assert tally.equilibria.as_set() == {1, 2} == set(fixed_point_scan(t).tolist())
    assert list(tally.equilibria.flip_groups.values()) == [[1, 2]]


def test_rock_paper_scissors_has_no_fixed_point():
    # best response to x is x + 1 mod 3
    t = toy([[1 if own == (o + 1) % 3 else 0 for o in range(3)] for own in range(3)])
    assert len(fixed_point_scan(t)) == 0
    tally = find_all_equilibria(t)
    assert tally.n_unknown == 3 and len(tally.equilibria) == 0


def test_two_round_cycle():
    t = toy([[1 if own == (o + 1) % 4 else 0 for o in range(4)] for own in range(4)])
    out = play_game(0, t)
    assert out.result == TWO_ROUND_CYCLE and out.rounds_played == 20
    assert len(fixed_point_scan(t)) == 0


def test_start_at_equilibrium_takes_two_rounds():
    t = toy([[0, 1], [1, 0]])
    # equilibrium (1, 0): firms 2..W hold line 0
    out = play_game(0, t)
    assert out.result == EQUILIBRIUM and out.rounds_played == 2 and out.scenario == 2


def test_round_cap_validation():
    t = toy([[1, 0], [0, 1]])
    with pytest.raises(ValueError):
        play_game(0, t, max_rounds=1)
    with pytest.raises(ValueError):
        play_games([0], t, max_rounds=1)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 3), st.integers(2, 5), st.integers(0, 2 ** 31), st.integers(2, 8))
def test_against_playout_and_brute_force(W, a, seed, rounds):
    g = np.random.default_rng(seed)
    # few distinct values force margin ties
    t = toy(g.integers(0, 4, size=(a,) * W))
    code, rnd, final = play_games(np.arange(a ** (W - 1)), t, rounds)
    names = {0: EQUILIBRIUM, 1: TWO_ROUND_CYCLE, 2: UNKNOWN}
    for k0 in range(a ** (W - 1)):
        res, b, sc = playout(t, k0, rounds)
        single = play_game(k0, t, rounds)
        assert (names[int(code[k0])], int(rnd[k0])) == (res, b) == (single.result,
                                                                    single.rounds_played)
        assert int(final[k0]) == single.scenario == int(np.ravel_multi_index(sc, (a,) * W))
    fp = set(fixed_point_scan(t).tolist())
    assert fp == brute_equilibria(t)
    assert find_all_equilibria(t, max_rounds=rounds).equilibria.as_set() <= fp
    assert find_all_equilibria(t).equilibria.as_set() == fp


def _market(rng, W=3, rule="first"):
    spec = MarketSpec(2, 5, (299, 599, 899, 1199, 1499), (25, 30, 33, 44, 54), 129.0, W, 1)
    return precompute_tables(spec, ParamSet("draws", rng.normal(0, 2, (30, 8, 2)), rule))


def test_flip_closure_and_groups(rng):
    for rule in ("first", "logit"):
        t = _market(rng, 3, rule)
        eq = find_all_equilibria(t).equilibria
        found = eq.as_set()
        for s in eq.lines():
            for perm in itertools.permutations(s):
                assert int(np.ravel_multi_index(perm, (25,) * 3)) in found
        for key, members in group_flips(eq.scenarios, 25, 3).items():
            for m in members:
                assert tuple(sorted(np.unravel_index(m, (25,) * 3))) == key


def test_worker_determinism(rng):
    t = _market(rng, 3, "logit")
    ref = find_all_equilibria(t, workers=1)
    for w in (2, 4):
        other = find_all_equilibria(t, workers=w)
        assert other.outcomes == ref.outcomes


def test_outcome_log_round_trip(rng, tmp_path):
    t = _market(rng, 2)
    tally = find_all_equilibria(t)
    p = tmp_path / "o.csv"
    write_outcome_log(tally, t, p, np.arange(25)[:, None])
    assert read_outcome_log(p) == tally.outcomes
    assert open(p).readline().startswith("initial_state,result,rounds,scenario_rank")
