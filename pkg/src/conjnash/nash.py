"""Sequential myopic best-response games and a fixed-point oracle.

A round lets firms 1..W re-optimize in order, each by looking up its best
response to the other firms' current lines (taken in firm order). A game
starts from a partial scenario of firms 2..W and ends in an equilibrium when
the complete scenario is unchanged over two consecutive rounds. At the round
cap a game is labelled a 2-round cycle if the last scenario equals the one
two rounds earlier, otherwise unknown.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .market import decode_scenarios, default_workers, encode_scenarios

EQUILIBRIUM = "equilibrium"
TWO_ROUND_CYCLE = "two_round_cycle"
UNKNOWN = "unknown"
DEFAULT_MAX_ROUNDS = 20

_CODES = {0: EQUILIBRIUM, 1: TWO_ROUND_CYCLE, 2: UNKNOWN}


@dataclass(frozen=True)
class GameOutcome:
    initial_state: int
    result: str
    rounds_played: int
    scenario: int  # equilibrium scenario, else the scenario after the last round


@dataclass
class EquilibriumSet:
    scenarios: np.ndarray
    flip_groups: dict
    n_lines: int
    n_firms: int
    provenance: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.scenarios)

    def lines(self):
        return decode_scenarios(self.scenarios, self.n_lines, self.n_firms)

    def as_set(self):
        return {int(s) for s in self.scenarios}


@dataclass
class GameTally:
    outcomes: list
    equilibria: EquilibriumSet
    n_games: int
    n_equilibrium_games: int
    n_two_round_cycles: int
    n_unknown: int


def _best_line(table):
    return getattr(table, "best_line", table)


def _respond(best_line, state, w, n_lines):
    others = np.delete(state, w, axis=1)
    return best_line[encode_scenarios(others, n_lines)]


def play_game(k0_minus, tables, max_rounds=DEFAULT_MAX_ROUNDS, n_lines=None, n_firms=None):
    """Play one game from partial scenario `k0_minus`."""
    if max_rounds < 2:
        raise ValueError("at least two rounds are needed to detect an equilibrium")
    best_line = _best_line(tables)
    n_lines = n_lines or tables.n_lines
    n_firms = n_firms or tables.n_firms
    state = [0] + list(decode_scenarios(np.array([k0_minus]), n_lines, n_firms - 1)[0])
    history = []
    for b in range(1, max_rounds + 1):
        for w in range(n_firms):
            others = state[:w] + state[w + 1:]
            partial = 0
            for a in others:
                partial = partial * n_lines + int(a)
            state[w] = int(best_line[partial])
        cur = 0
        for a in state:
            cur = cur * n_lines + a
        history.append(cur)
        if b >= 2 and history[-1] == history[-2]:
            return GameOutcome(int(k0_minus), EQUILIBRIUM, b, cur)
    if max_rounds >= 3 and history[-1] == history[-3]:
        return GameOutcome(int(k0_minus), TWO_ROUND_CYCLE, max_rounds, history[-1])
    return GameOutcome(int(k0_minus), UNKNOWN, max_rounds, history[-1])


def play_games(initial_states, tables, max_rounds=DEFAULT_MAX_ROUNDS):
    """Vectorized `play_game` over many initial states.

    Returns (result codes, rounds, scenario ranks) with codes 0 = equilibrium,
    1 = 2-round cycle, 2 = unknown.
    """
    if max_rounds < 2:
        raise ValueError("at least two rounds are needed to detect an equilibrium")
    best_line = _best_line(tables)
    n_lines, n_firms = tables.n_lines, tables.n_firms
    init = np.asarray(initial_states, dtype=np.int64)
    G = len(init)
    state = np.zeros((G, n_firms), dtype=np.int64)
    state[:, 1:] = decode_scenarios(init, n_lines, n_firms - 1)
    code = np.full(G, -1, dtype=np.int64)
    rounds = np.full(G, max_rounds, dtype=np.int64)
    final = np.zeros(G, dtype=np.int64)
    hist = []
    for b in range(1, max_rounds + 1):
        for w in range(n_firms):
            state[:, w] = _respond(best_line, state, w, n_lines)
        cur = encode_scenarios(state, n_lines)
        hist.append(cur)
        if b >= 2:
            new_eq = (code < 0) & (cur == hist[-2])
            code[new_eq] = 0
            rounds[new_eq] = b
            final[new_eq] = cur[new_eq]
        if len(hist) > 3:
            hist.pop(0)
        if np.all(code >= 0):
            break
    open_ = code < 0
    if open_.any():
        last = hist[-1]
        cyc = np.zeros(G, dtype=bool)
        if max_rounds >= 3:
            cyc = last == hist[-3]
        code[open_ & cyc] = 1
        code[open_ & ~cyc] = 2
        final[open_] = last[open_]
    return code, rounds, final


def group_flips(scenarios, n_lines, n_firms):
    groups = {}
    lines = decode_scenarios(np.asarray(scenarios, dtype=np.int64), n_lines, n_firms)
    for s, row in zip(scenarios, lines):
        groups.setdefault(tuple(sorted(int(a) for a in row)), []).append(int(s))
    return groups


def equilibrium_set(scenarios, n_lines, n_firms, provenance=None):
    uniq = np.unique(np.asarray(scenarios, dtype=np.int64))
    return EquilibriumSet(scenarios=uniq, flip_groups=group_flips(uniq, n_lines, n_firms),
                          n_lines=n_lines, n_firms=n_firms, provenance=provenance or {})


def find_all_equilibria(tables, max_rounds=DEFAULT_MAX_ROUNDS, workers=None,
                        provenance=None):
    """Play a game from every partial scenario and collect the equilibria."""
    n_games = tables.n_lines ** (tables.n_firms - 1)
    workers = workers or default_workers()
    init = np.arange(n_games, dtype=np.int64)
    if workers == 1 or n_games < 1024:
        code, rounds, final = play_games(init, tables, max_rounds)
    else:
        chunks = np.array_split(init, workers * 4)
        with ThreadPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(lambda c: play_games(c, tables, max_rounds), chunks))
        code = np.concatenate([p[0] for p in parts])
        rounds = np.concatenate([p[1] for p in parts])
        final = np.concatenate([p[2] for p in parts])
    outcomes = [GameOutcome(int(k), _CODES[int(c)], int(r), int(s))
                for k, c, r, s in zip(init, code, rounds, final)]
    eq = equilibrium_set(final[code == 0], tables.n_lines, tables.n_firms, provenance)
    return GameTally(outcomes=outcomes, equilibria=eq, n_games=n_games,
                     n_equilibrium_games=int((code == 0).sum()),
                     n_two_round_cycles=int((code == 1).sum()),
                     n_unknown=int((code == 2).sum()))


def fixed_point_scan(tables, chunk=1 << 20):
    """Every complete scenario in which each firm already plays its best response."""
    best_line = _best_line(tables)
    n_lines, n_firms = tables.n_lines, tables.n_firms
    k = n_lines ** n_firms
    found = []
    for lo in range(0, k, chunk):
        ranks = np.arange(lo, min(k, lo + chunk), dtype=np.int64)
        state = decode_scenarios(ranks, n_lines, n_firms)
        ok = np.ones(len(ranks), dtype=bool)
        for w in range(n_firms):
            ok &= _respond(best_line, state, w, n_lines) == state[:, w]
        found.append(ranks[ok])
    return np.concatenate(found) if found else np.empty(0, dtype=np.int64)


def write_outcome_log(tally, tables, path, line_products=None):
    """CSV of every game: start, result, rounds, scenario and each firm's line."""
    import csv

    n_lines, n_firms = tables.n_lines, tables.n_firms
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["initial_state", "result", "rounds", "scenario_rank"]
                   + [f"firm{f + 1}_line" for f in range(n_firms)]
                   + [f"firm{f + 1}_products" for f in range(n_firms)])
        ranks = np.array([o.scenario for o in tally.outcomes], dtype=np.int64)
        lines = decode_scenarios(ranks, n_lines, n_firms)
        for o, row in zip(tally.outcomes, lines):
            prods = []
            for a in row:
                if line_products is None:
                    prods.append("")
                else:
                    prods.append("|".join(str(int(p)) for p in line_products[a]))
            w.writerow([o.initial_state, o.result, o.rounds_played, o.scenario]
                       + [int(a) for a in row] + prods)


def read_outcome_log(path):
    """Game outcomes back from a log written by `write_outcome_log`."""
    import csv

    with open(path, newline="") as fh:
        return [GameOutcome(int(r["initial_state"]), r["result"], int(r["rounds"]),
                            int(r["scenario_rank"])) for r in csv.DictReader(fh)]
