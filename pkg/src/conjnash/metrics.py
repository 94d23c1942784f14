"""Equilibrium measures per run and across rule x parameter-set combinations.

Flip policy is fixed per measure: equilibrium counts and differentiation
use the no-flip set, average rounds, equality, level frequencies and margin
bounds use the with-flip set.
"""
from dataclasses import asdict, dataclass

import numpy as np

from .market import decode_scenarios, enumerate_lines, enumerate_products
from .nash import EQUILIBRIUM, TWO_ROUND_CYCLE, UNKNOWN

TOTAL = "total"
PARTIAL = "partial"
NEITHER = "neither"


def _scenarios(eq):
    if hasattr(eq, "scenarios"):
        return np.asarray(eq.scenarios, dtype=np.int64)
    return np.asarray(sorted(eq), dtype=np.int64)


def dedup_and_flips(outcomes, n_lines, n_firms):
    """(no-flip set, with-flip set) from a run's game outcomes.

    With flips: distinct scenario ranks. Without: distinct unordered line
    multisets, each represented by its sorted line tuple.
    """
    ranks = sorted({o.scenario for o in outcomes if o.result == EQUILIBRIUM})
    with_flip = set(ranks)
    lines = decode_scenarios(np.asarray(ranks, dtype=np.int64), n_lines, n_firms)
    no_flip = {tuple(sorted(int(a) for a in row)) for row in lines}
    return no_flip, with_flip


def differentiation_share(no_flip):
    """Share of equilibria with at least two distinct lines; None if empty."""
    if not no_flip:
        return None
    return sum(len(set(g)) > 1 for g in no_flip) / len(no_flip)


def equality_class(found, truth):
    f, t = set(found), set(truth)
    if f == t:
        return TOTAL
    if f >= t:
        return PARTIAL
    return NEITHER


def level_frequencies(scenarios, spec):
    """(features, levels) relative frequency over every product of every firm
    in every listed scenario (flips included)."""
    scen = np.asarray(sorted(scenarios), dtype=np.int64)
    if len(scen) == 0:
        raise ValueError("no equilibria to tally")
    levels, _ = enumerate_products(spec)
    lines = enumerate_lines(spec.tau, spec.line_size)
    firm_lines = decode_scenarios(scen, spec.n_lines, spec.n_firms)
    prods = lines[firm_lines].ravel()
    counts = np.zeros((spec.n_features, spec.n_levels))
    for f in range(spec.n_features):
        counts[f] = np.bincount(levels[prods, f], minlength=spec.n_levels)
    return counts / counts.sum(axis=1, keepdims=True)


def level_freq_mae(freq_a, freq_b, features=None):
    a = np.asarray(freq_a, dtype=float)
    b = np.asarray(freq_b, dtype=float)
    if a.shape != b.shape:
        raise ValueError("level frequency tables have different domains")
    if features is not None:
        a, b = a[list(features)], b[list(features)]
    return float(np.abs(a - b).mean())


def margin_bounds(scenarios, tables):
    scen = np.asarray(sorted(scenarios), dtype=np.int64)
    if len(scen) == 0:
        return None
    m = tables.margins[scen]
    return float(m.min()), float(m.max())


@dataclass
class RunMeasures:
    n_games: int
    n_equilibria_noflip: int
    n_equilibria_flip: int
    avg_rounds: float
    pct_equilibrium_games: float
    pct_two_round_cycles: float
    pct_unknown_cycles: float
    differentiation_share: float
    equality: str
    margin_min: float
    margin_max: float
    price_mae: float
    design_mae: float

    def row(self):
        return asdict(self)


def _nan(x):
    return float("nan") if x is None else x


def run_measures(tally, tables, truth=None, truth_freq=None):
    """All measures of one run; `truth` is the reference with-flip set."""
    outcomes = tally.outcomes
    n_games = len(outcomes)
    no_flip, with_flip = dedup_and_flips(outcomes, tables.n_lines, tables.n_firms)
    eq_rounds = [o.rounds_played for o in outcomes if o.result == EQUILIBRIUM]
    n_eq = len(eq_rounds)
    n_cyc = sum(o.result == TWO_ROUND_CYCLE for o in outcomes)
    n_unk = sum(o.result == UNKNOWN for o in outcomes)
    bounds = margin_bounds(with_flip, tables)
    price_mae = design_mae = float("nan")
    if truth_freq is not None and with_flip:
        freq = level_frequencies(with_flip, tables.spec)
        price_mae = level_freq_mae(freq, truth_freq, [0])
        if tables.spec.n_features > 1:
            design_mae = level_freq_mae(freq, truth_freq,
                                        range(1, tables.spec.n_features))
    return RunMeasures(
        n_games=n_games,
        n_equilibria_noflip=len(no_flip),
        n_equilibria_flip=len(with_flip),
        avg_rounds=float(np.mean(eq_rounds)) if n_eq else float("nan"),
        pct_equilibrium_games=n_eq / n_games,
        pct_two_round_cycles=n_cyc / n_games,
        pct_unknown_cycles=n_unk / n_games,
        differentiation_share=_nan(differentiation_share(no_flip)),
        equality=equality_class(with_flip, truth) if truth is not None else "",
        margin_min=bounds[0] if bounds else float("nan"),
        margin_max=bounds[1] if bounds else float("nan"),
        price_mae=price_mae,
        design_mae=design_mae,
    )
