"""Products, lines, demand and the pre-computed scenario / best-response tables.

Integer encodings
-----------------
product rank
    mixed radix over feature levels, feature 0 (price) most significant:
    ``rank = sum(level[l] * m**(L-1-l))``; ``tau = m**L``.
line rank
    combinatorial number system (colex) over sorted distinct product
    ranks ``c_1 < ... < c_q``: ``rank = sum(comb(c_i, i))``; ``a = comb(tau, q)``.
scenario rank
    mixed radix over firm line ranks, firm 1 most significant:
    ``rank = sum(a_w * a**(W-w))``; the partial scenario of firms 2..W is
    ``rank % a**(W-1)`` so ``rank = a_1 * a**(W-1) + partial``.
"""
import hashlib
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from math import comb

import numpy as np

from .errors import CapacityError
from .kernels import get_backend

CODEC_VERSION = 1
DEFAULT_MAX_SCENARIOS = 50_000_000


@dataclass(frozen=True)
class MarketSpec:
    n_features: int
    n_levels: int
    prices: tuple
    costs: tuple  # (n_features-1) * n_levels, feature-major
    delta: float
    n_firms: int = 2
    line_size: int = 1

    def __post_init__(self):
        object.__setattr__(self, "prices", tuple(float(p) for p in self.prices))
        object.__setattr__(self, "costs", tuple(float(c) for c in self.costs))
        if len(self.prices) != self.n_levels:
            raise ValueError("need one price per level")
        if len(self.costs) != self.n_levels * (self.n_features - 1):
            raise ValueError("need one cost per non-price level")
        if self.n_firms < 2 or self.line_size < 1:
            raise ValueError("need n_firms >= 2 and line_size >= 1")
        if any(c < 0 for c in self.costs):
            raise ValueError("costs must be non-negative")
        if any(b <= a for a, b in zip(self.prices, self.prices[1:])):
            raise ValueError("prices must be strictly increasing")

    @property
    def tau(self):
        return self.n_levels ** self.n_features

    @property
    def n_lines(self):
        return comb(self.tau, self.line_size)

    @property
    def n_scenarios(self):
        return self.n_lines ** self.n_firms

    @property
    def n_partial(self):
        return self.n_lines ** (self.n_firms - 1)

    def cost_matrix(self):
        return np.asarray(self.costs).reshape(self.n_features - 1, self.n_levels)

    def digest(self):
        h = hashlib.sha256(repr((CODEC_VERSION, self.n_features, self.n_levels, self.prices,
                                 self.costs, self.delta, self.n_firms,
                                 self.line_size)).encode())
        return h.hexdigest()[:16]


# product codec ------------------------------------------------------------

def product_rank(levels, n_levels):
    r = 0
    for v in levels:
        r = r * n_levels + int(v)
    return r


def product_levels(rank, n_features, n_levels):
    out = []
    for _ in range(n_features):
        out.append(rank % n_levels)
        rank //= n_levels
    return tuple(reversed(out))


def enumerate_products(spec):
    """Level tuples (tau, L) in rank order and their unit margins."""
    L, m = spec.n_features, spec.n_levels
    levels = np.indices((m,) * L).reshape(L, -1).T.astype(np.int64)
    price = np.asarray(spec.prices)[levels[:, 0]]
    cost = np.zeros(len(levels))
    cm = spec.cost_matrix()
    for f in range(1, L):
        cost = cost + cm[f - 1][levels[:, f]]
    return levels, price - cost - spec.delta


# line codec ----------------------------------------------------------------

def line_rank(products):
    c = sorted(int(p) for p in products)
    if len(set(c)) != len(c):
        raise ValueError("line products must be distinct")
    return sum(comb(ci, i + 1) for i, ci in enumerate(c))


def line_products(rank, q):
    out = []
    for i in range(q, 0, -1):
        c = i - 1
        while comb(c + 1, i) <= rank:
            c += 1
        out.append(c)
        rank -= comb(c, i)
    return tuple(reversed(out))


def enumerate_lines(tau, q, max_lines=None):
    """All q-subsets of products as an (a, q) array, row index = line rank."""
    if q > tau:
        raise ValueError("line size exceeds product count")
    a = comb(tau, q)
    if max_lines is not None and a > max_lines:
        raise CapacityError(f"{a} lines exceed the limit {max_lines}", a)
    if q == 1:
        return np.arange(tau, dtype=np.int64)[:, None]
    out = np.empty((a, q), dtype=np.int64)
    # colex order: iterate combinations with the largest element varying slowest
    comb_ = list(range(q))
    for r in range(a):
        out[r] = comb_
        i = 0
        while i < q - 1 and comb_[i] + 1 == comb_[i + 1]:
            comb_[i] = i
            i += 1
        comb_[i] += 1
    return out


# scenario codec ------------------------------------------------------------

def scenario_rank(line_ranks, n_lines):
    r = 0
    for a in line_ranks:
        r = r * n_lines + int(a)
    return r


def scenario_lines(rank, n_lines, n_firms):
    out = []
    for _ in range(n_firms):
        out.append(rank % n_lines)
        rank //= n_lines
    return tuple(reversed(out))


def decode_scenarios(ranks, n_lines, n_firms):
    ranks = np.asarray(ranks, dtype=np.int64)
    out = np.empty(ranks.shape + (n_firms,), dtype=np.int64)
    rest = ranks.copy()
    for w in range(n_firms - 1, -1, -1):
        out[..., w] = rest % n_lines
        rest = rest // n_lines
    return out


def encode_scenarios(lines, n_lines):
    lines = np.asarray(lines, dtype=np.int64)
    r = np.zeros(lines.shape[:-1], dtype=np.int64)
    for w in range(lines.shape[-1]):
        r = r * n_lines + lines[..., w]
    return r


# parameter sets ------------------------------------------------------------

@dataclass
class ParamSet:
    kind: str  # draws | point | true
    part_worths: np.ndarray  # respondents x o x n
    rule: str = "first"

    def __post_init__(self):
        if self.kind not in ("draws", "point", "true"):
            raise ValueError(f"unknown parameter set kind {self.kind!r}")
        if self.rule not in ("first", "logit"):
            raise ValueError(f"unknown choice rule {self.rule!r}")
        pw = np.asarray(self.part_worths, dtype=float)
        if pw.ndim == 2:
            pw = pw[:, :, None]
        self.part_worths = pw

    @classmethod
    def from_draws(cls, draws, rule="first"):
        return cls("draws", getattr(draws, "draws", draws), rule)

    @classmethod
    def from_point(cls, draws, rule="first"):
        d = np.asarray(getattr(draws, "draws", draws), dtype=float)
        return cls("point", d.mean(axis=2), rule)

    @classmethod
    def from_truth(cls, B, rule="first", scale=1.0):
        return cls("true", np.asarray(B, dtype=float) / scale, rule)

    @property
    def n_respondents(self):
        return self.part_worths.shape[0]

    @property
    def n_draws(self):
        return self.part_worths.shape[2]

    def extended(self, n_features, n_levels):
        """Part-worths with reference levels re-inserted: (N, L, m, n)."""
        N, o, n = self.part_worths.shape
        blocks = self.part_worths.reshape(N, n_features, n_levels - 1, n)
        return np.concatenate([np.zeros((N, n_features, 1, n)), blocks], axis=2)


def product_utilities(spec, params):
    """(tau, N*n) utilities of every product for every respondent-draw column."""
    levels, _ = enumerate_products(spec)
    ext = params.extended(spec.n_features, spec.n_levels)  # N, L, m, n
    N, L, m, n = ext.shape
    u = np.zeros((len(levels), N, n))
    for f in range(L):
        u = u + ext[:, f, :, :][:, levels[:, f], :].transpose(1, 0, 2)
    return np.ascontiguousarray(u.reshape(len(levels), N * n))


def exp_utilities(util):
    # per-column max shift keeps exp finite; logit shares are shift invariant
    return np.ascontiguousarray(np.exp(util - util.max(axis=0, keepdims=True)))


def demand(products, util, rule, n_draws):
    """Expected demand (respondent units) of each product in a scenario.

    `products` lists the scenario's product ranks (duplicates allowed, one
    entry per offered product); `util` is the product_utilities table.
    """
    products = np.asarray(products, dtype=np.int64)
    U = util[products]  # P x R
    if rule == "first":
        hit = U == U.max(axis=0)
        count = hit.sum(axis=0)
        out = np.zeros(len(products))
        for c in np.unique(count):
            # exact integer tallies per tie size keep equal splits exact
            out += np.count_nonzero(hit & (count == c), axis=1) / (float(c) * n_draws)
        return out
    else:
        e = np.exp(U - U.max(axis=0))
        share = e / e.sum(axis=0)
    return share.sum(axis=1) / n_draws


def firm_margins(spec, util, unit_margin, lines, scenario, rule, n_draws):
    """Total margin of every firm in one complete scenario (list of line ranks)."""
    q = spec.line_size
    prods = np.concatenate([lines[a] for a in scenario])
    d = demand(prods, util, rule, n_draws)
    m = d * unit_margin[prods]
    return m.reshape(len(scenario), q).sum(axis=1)


@dataclass
class MarketTables:
    """Scenario margins (firm 1 viewpoint) and the best-response look-up."""
    spec: MarketSpec
    margins: np.ndarray  # k
    best_line: np.ndarray  # k^-
    best_margin: np.ndarray  # k^-
    rule: str
    kind: str
    codec_version: int = CODEC_VERSION

    @property
    def n_lines(self):
        return self.spec.n_lines

    @property
    def n_firms(self):
        return self.spec.n_firms

    def scenario_matrix(self):
        """The complete table: one row per scenario, line ranks then margin."""
        lines = decode_scenarios(np.arange(len(self.margins)), self.n_lines, self.n_firms)
        return np.column_stack([lines, self.margins])

    def best_response_matrix(self):
        partial = decode_scenarios(np.arange(len(self.best_line)), self.n_lines,
                                   self.n_firms - 1)
        return np.column_stack([self.best_line, partial, self.best_margin])

    def margin_of(self, firm, lines):
        """Margin of `firm` (0-based) in the scenario given by `lines`."""
        lines = list(lines)
        own = lines.pop(firm)
        return float(self.margins[scenario_rank([own] + lines, self.n_lines)])


def default_workers():
    env = os.environ.get("CONJNASH_WORKERS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _chunk_bounds(total, n_chunks):
    edges = np.linspace(0, total, n_chunks + 1).astype(np.int64)
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def scenario_margins(spec, params, workers=None, backend=None, max_scenarios=None):
    """Firm-1 margin for every complete scenario rank."""
    k = spec.n_scenarios
    limit = DEFAULT_MAX_SCENARIOS if max_scenarios is None else max_scenarios
    if k > limit:
        raise CapacityError(f"{k} scenarios exceed the limit {limit}", k)
    kern = get_backend(backend)
    _, unit = enumerate_products(spec)
    lines = enumerate_lines(spec.tau, spec.line_size)
    util = product_utilities(spec, params)
    if params.rule == "first":
        table, fn = util, kern.margins_first
    else:
        table, fn = exp_utilities(util), kern.margins_logit
    unit = np.ascontiguousarray(unit, dtype=np.float64)
    lines = np.ascontiguousarray(lines, dtype=np.int64)
    n = params.n_draws
    workers = workers or default_workers()
    n_chunks = max(1, min(k, workers * 8)) if workers > 1 else 1
    bounds = _chunk_bounds(k, n_chunks)

    def run(b):
        return fn(table, unit, lines, spec.n_firms, n, b[0], b[1])

    if workers == 1:
        parts = [run(b) for b in bounds]
    else:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(run, bounds))
    return np.concatenate(parts)


def best_responses(margins, n_lines, n_firms):
    """Arg-max line (lowest rank on ties) and max margin per partial scenario."""
    M = np.asarray(margins).reshape(n_lines, n_lines ** (n_firms - 1))
    best = np.argmax(M, axis=0)
    return best.astype(np.int64), M[best, np.arange(M.shape[1])]


def precompute_tables(spec, params, workers=None, backend=None, max_scenarios=None):
    margins = scenario_margins(spec, params, workers, backend, max_scenarios)
    best, best_m = best_responses(margins, spec.n_lines, spec.n_firms)
    return MarketTables(spec=spec, margins=margins, best_line=best, best_margin=best_m,
                        rule=params.rule, kind=params.kind)


def save_tables(tables, path):
    s = tables.spec
    np.savez_compressed(
        path, margins=tables.margins, best_line=tables.best_line,
        best_margin=tables.best_margin, rule=tables.rule, kind=tables.kind,
        codec_version=tables.codec_version, spec_hash=s.digest(),
        n_scenarios=len(tables.margins),
        spec=np.array([s.n_features, s.n_levels, s.n_firms, s.line_size]),
        prices=np.asarray(s.prices), costs=np.asarray(s.costs), delta=s.delta)


def load_tables(path, spec=None):
    z = np.load(path)
    if int(z["codec_version"]) != CODEC_VERSION:
        raise ValueError("table file written with a different codec version")
    if spec is None:
        nf, nl, nw, q = (int(v) for v in z["spec"])
        spec = MarketSpec(nf, nl, tuple(z["prices"]), tuple(z["costs"]),
                          float(z["delta"]), nw, q)
    elif str(z["spec_hash"]) != spec.digest():
        raise ValueError("table file belongs to a different market spec")
    return MarketTables(spec=spec, margins=z["margins"], best_line=z["best_line"],
                        best_margin=z["best_margin"], rule=str(z["rule"]),
                        kind=str(z["kind"]))
