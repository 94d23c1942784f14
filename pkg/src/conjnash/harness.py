"""Experiment orchestration: conditions, costs, seeds, staged runs with resume.

A run directory holds one sub-directory per (condition, replication) cell
with stage-named checkpoint files, plus the combined ``measures.csv`` and
``levelfreq.csv``. A stage is skipped when its checkpoint exists, so a
partial run resumes where it stopped.
"""
import csv
import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from math import comb

import numpy as np

from . import __version__
from .designgen import ChoiceDesign, DesignSpec, generate_design
from .designgen import export_csv as export_design
from .diagnostics import assess, export_csv as export_assessment, filter_monotone_draws
from .errors import CapacityError, ConfigurationError, NeedsLongerChainError
from .hbmxl import load_chain, run_chain, save_chain
from .kernels import BACKEND
from .market import (DEFAULT_MAX_SCENARIOS, MarketSpec, ParamSet, enumerate_lines,
                     load_tables, precompute_tables, save_tables)
from .metrics import dedup_and_flips, level_frequencies, run_measures
from .nash import GameTally, find_all_equilibria, read_outcome_log, write_outcome_log
from .prefgen import PreferenceSpec, generate_preferences
from .prefgen import export_csv as export_prefs
from .respsim import export_csv as export_responses
from .respsim import simulate_responses
from .seeding import stage_rng

log = logging.getLogger(__name__)

# (features, products per line, firms, products, lines, scenarios)
CONDITIONS = (
    (2, 1, 2, 25, 25, 625),
    (3, 1, 2, 125, 125, 15625),
    (2, 1, 3, 25, 25, 15625),
    (2, 2, 2, 25, 300, 90000),
    (4, 1, 2, 625, 625, 390625),
    (2, 1, 4, 25, 25, 390625),
    (3, 1, 3, 125, 125, 1953125),
    (2, 3, 2, 25, 2300, 5290000),
    (5, 1, 2, 3125, 3125, 9765625),
    (2, 1, 5, 25, 25, 9765625),
    (2, 2, 3, 25, 300, 27000000),
    (3, 2, 2, 125, 7750, 60062500),
    (2, 4, 2, 25, 12650, 160022500),
    (6, 1, 2, 15625, 15625, 244140625),
    (4, 1, 3, 625, 625, 244140625),
    (3, 1, 4, 125, 125, 244140625),
)
N_LEVELS = 5
RULES = ("first", "logit")
PARAMSETS = ("draws", "point", "true")
RUNTIME_KEYS = ("max_scenarios", "memory_budget")


# feature costs -------------------------------------------------------------

@dataclass(frozen=True)
class FeatureCostTable:
    features: tuple  # non-price feature names in order
    labels: dict  # feature -> level labels
    costs: dict  # feature -> level costs
    prices: tuple
    price_labels: tuple
    base_cost: float

    def __post_init__(self):
        m = len(self.prices)
        for f in self.features:
            if len(self.costs[f]) != m:
                raise ConfigurationError(f"feature {f!r} has {len(self.costs[f])} levels, "
                                         f"expected {m}")
            if any(c < 0 for c in self.costs[f]):
                raise ConfigurationError(f"negative cost for feature {f!r}")
        if self.base_cost < 0:
            raise ConfigurationError("negative base cost")

    @property
    def n_levels(self):
        return len(self.prices)

    def cost_vector(self, features):
        return tuple(c for f in features for c in self.costs[f])


def read_cost_table(path=None):
    """Parse a cost CSV (feature, level_index, label, cost); rows with feature
    ``price`` give prices and the ``base`` row gives the base cost."""
    if path is None:
        fh = resources.files("conjnash").joinpath("data/notebook_costs.csv").open(newline="")
    else:
        fh = open(path, newline="")
    rows = {}
    base = None
    with fh:
        for r in csv.DictReader(fh):
            name = r["feature"].strip()
            if name == "base":
                base = float(r["cost"])
                continue
            rows.setdefault(name, []).append((int(r["level_index"]), r["label"], float(r["cost"])))
    if base is None or "price" not in rows:
        raise ConfigurationError("cost table needs price rows and a base row")
    ordered = {}
    for name, lv in rows.items():
        lv.sort()
        if [i for i, _, _ in lv] != list(range(1, len(lv) + 1)):
            raise ConfigurationError(f"feature {name!r} level indices must run 1..m")
        ordered[name] = lv
    price = ordered.pop("price")
    feats = tuple(ordered)
    return FeatureCostTable(
        features=feats,
        labels={f: tuple(l for _, l, _ in ordered[f]) for f in feats},
        costs={f: tuple(c for _, _, c in ordered[f]) for f in feats},
        prices=tuple(c for _, _, c in price),
        price_labels=tuple(l for _, l, _ in price),
        base_cost=base)


def resolve_delta(table, included_features, rng=None, levels=None):
    """Base cost plus one level cost per excluded non-price feature.

    Levels are drawn uniformly from `rng` unless given in `levels`
    (feature -> 0-based level). Returns (delta, chosen levels).
    """
    unknown = set(included_features) - set(table.features)
    if unknown:
        raise ConfigurationError(f"unknown features {sorted(unknown)}")
    chosen = {}
    delta = table.base_cost
    for f in table.features:
        if f in included_features:
            continue
        if levels is not None and f in levels:
            lv = int(levels[f])
        else:
            lv = int(rng.integers(table.n_levels))
        chosen[f] = lv
        delta += table.costs[f][lv]
    return delta, chosen


def delta_bounds(table, included_features):
    excl = [f for f in table.features if f not in included_features]
    return (table.base_cost + sum(min(table.costs[f]) for f in excl),
            table.base_cost + sum(max(table.costs[f]) for f in excl))


# configuration -------------------------------------------------------------

@dataclass
class ExperimentConfig:
    condition: int = 1  # 1-based Table row; 0 marks a custom condition
    n_features: int = None
    line_size: int = None
    n_firms: int = None
    variance_profile: str = "homogeneous"
    mrge_target: float = 0.125
    rules: tuple = RULES
    paramsets: tuple = PARAMSETS
    seed: int = 1
    replications: int = 1
    n_respondents: int = 500
    n_levels: int = N_LEVELS
    n_alternatives: int = 5
    n_train_sets: int = 15
    n_holdout_sets: int = 5
    design_starts: int = 50
    burn_in: int = 10_000
    keep: int = 30_000
    n_draws: int = 500
    thinning: int = 10
    max_rounds: int = 20
    max_extensions: int = 3
    mrge_rate: float = 0.5
    mrge_tolerance: float = 1e-5
    mrge_max_iter: int = 10_000
    max_scenarios: int = DEFAULT_MAX_SCENARIOS
    memory_budget: float = 2 * 2 ** 30  # bytes
    monotone_features: tuple = (0,)
    cost_table: str = None
    alpha: float = 0.05

    def __post_init__(self):
        self.rules = tuple(self.rules)
        self.paramsets = tuple(self.paramsets)
        self.monotone_features = tuple(self.monotone_features)
        if self.condition:
            if not 1 <= self.condition <= len(CONDITIONS):
                raise ConfigurationError(f"no base condition {self.condition}")
            L, q, w = CONDITIONS[self.condition - 1][:3]
            for name, v in (("n_features", L), ("line_size", q), ("n_firms", w)):
                cur = getattr(self, name)
                if cur is not None and cur != v:
                    raise ConfigurationError(
                        f"{name}={cur} conflicts with base condition {self.condition}; "
                        f"set condition: 0 for a custom condition")
                setattr(self, name, v)
        elif None in (self.n_features, self.line_size, self.n_firms):
            raise ConfigurationError("custom condition needs n_features, line_size, n_firms")
        bad = set(self.rules) - set(RULES) or set(self.paramsets) - set(PARAMSETS)
        if bad:
            raise ConfigurationError(f"unknown rules or parameter sets {sorted(bad)}")
        if self.thinning < 1 or self.n_draws < 1 or self.replications < 1:
            raise ConfigurationError("thinning, n_draws and replications must be positive")

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        flat = {}
        for k, v in (d or {}).items():
            # nested sections are accepted and flattened
            if isinstance(v, dict):
                flat.update(v)
            else:
                flat[k] = v
        extra = set(flat) - names
        if extra:
            raise ConfigurationError(f"unknown config keys {sorted(extra)}")
        return cls(**flat)

    @classmethod
    def load(cls, path, **overrides):
        import yaml

        with open(path) as fh:
            d = yaml.safe_load(fh) or {}
        cfg = cls.from_dict(d)
        return cfg.override(**overrides) if overrides else cfg

    def override(self, **kw):
        kw = {k: v for k, v in kw.items() if v is not None}
        if kw.get("condition"):
            # dimensions follow the new base condition
            for k in ("n_features", "line_size", "n_firms"):
                kw.setdefault(k, None)
        return replace(self, **kw)

    def as_dict(self):
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    def digest(self):
        # capacity limits never change outputs, so they stay out of the hash
        d = {k: v for k, v in self.as_dict().items() if k not in RUNTIME_KEYS}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    @property
    def label(self):
        return f"c{self.condition:02d}" if self.condition else \
            f"custom_l{self.n_features}q{self.line_size}w{self.n_firms}"


# combinatorics ---------------------------------------------------------------

@dataclass
class ConditionReport:
    n_features: int
    line_size: int
    n_firms: int
    tau: int
    n_lines: int
    n_scenarios: int
    n_partial: int
    table_row: int = 0
    matches: bool = True

    def line(self):
        return (f"l={self.n_features} q={self.line_size} w={self.n_firms}: tau={self.tau} "
                f"a={self.n_lines} k={self.n_scenarios} k-={self.n_partial}")


def combinatorics(n_features, line_size, n_firms, n_levels=N_LEVELS):
    tau = n_levels ** n_features
    a = comb(tau, line_size)
    return tau, a, a ** n_firms, a ** (n_firms - 1)


def validate_condition_table(config):
    """Recompute the scenario counts for a config (or a Table row number) and
    cross-check them against the embedded constants."""
    if isinstance(config, int):
        config = ExperimentConfig(condition=config)
    L, q, w = config.n_features, config.line_size, config.n_firms
    tau, a, k, km = combinatorics(L, q, w, config.n_levels)
    rep = ConditionReport(L, q, w, tau, a, k, km)
    row = next((i + 1 for i, c in enumerate(CONDITIONS) if c[:3] == (L, q, w)), 0)
    if row and config.n_levels == N_LEVELS:
        rep.table_row = row
        ref = CONDITIONS[row - 1][3:]
        rep.matches = ref == (tau, a, k)
        if not rep.matches:
            raise ConfigurationError(f"condition {row}: computed {(tau, a, k)} but the "
                                     f"embedded table has {ref}")
    return rep


def check_capacity(config):
    """Fail before any allocation when the scenario table or the utility
    table would exceed the configured limits."""
    tau, a, k, _ = combinatorics(config.n_features, config.line_size, config.n_firms,
                                 config.n_levels)
    if k > config.max_scenarios:
        raise CapacityError(f"condition needs k = {k} scenarios, limit is "
                            f"{config.max_scenarios}", k)
    need = 8 * (k + 2 * tau * config.n_respondents * config.n_draws)
    if need > config.memory_budget:
        raise CapacityError(f"k = {k}: tables need about {need / 2 ** 30:.2f} GiB, "
                            f"budget {config.memory_budget / 2 ** 30:.2f} GiB", k)
    return k


# stages ----------------------------------------------------------------------

def cell_seed(config, replication):
    ss = np.random.SeedSequence([int(config.seed), int(config.condition),
                                 int(config.n_features), int(config.line_size),
                                 int(config.n_firms), int(replication)])
    return int(ss.generate_state(1, np.uint32)[0])


def _atomic_npz(path, **arrays):
    tmp = path + ".tmp.npz"
    np.savez_compressed(tmp, **arrays)
    os.replace(tmp, path)


def _atomic_json(path, obj):
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
    os.replace(tmp, path)


@dataclass
class Cell:
    config: ExperimentConfig
    replication: int
    path: str
    seed: int = 0
    state: dict = field(default_factory=dict)

    def file(self, name):
        return os.path.join(self.path, name)

    def has(self, name):
        return os.path.exists(self.file(name))


def _stage_prefs(cell):
    c = cell.config
    if not cell.has("prefs.npz"):
        spec = PreferenceSpec(c.n_features, c.n_levels, c.n_respondents, c.variance_profile,
                              c.monotone_features, cell.seed)
        p = generate_preferences(spec, stage_rng(cell.seed, "prefgen"))
        _atomic_npz(cell.file("prefs.npz"), B=p.B, hypermeans=p.hypermeans,
                    variances=p.variances, assignment=p.assignment)
        export_prefs(p, cell.file("prefs.csv"))
    cell.state["B"] = np.load(cell.file("prefs.npz"))["B"]


def _stage_design(cell):
    c = cell.config
    if not cell.has("design.npz"):
        spec = DesignSpec(c.n_features, c.n_levels, c.n_alternatives, c.n_train_sets,
                          c.n_holdout_sets, c.design_starts, cell.seed)
        train, hold = generate_design(spec, stage_rng(cell.seed, "designgen"))
        _atomic_npz(cell.file("design.npz"), train=train.levels,
                    holdout=hold.levels if hold is not None else np.zeros((0,) + train.levels.shape[1:], int),
                    d_error=train.d_error, d_efficiency=train.d_efficiency)
        export_design(train, cell.file("design.csv"))
        if hold is not None:
            export_design(hold, cell.file("design.csv"), mode="a", write_header=False)
    z = np.load(cell.file("design.npz"))
    cell.state["train"] = ChoiceDesign(z["train"], c.n_levels, "train").sets
    hold = z["holdout"]
    cell.state["holdout"] = ChoiceDesign(hold, c.n_levels, "holdout").sets if len(hold) else None


def _stage_responses(cell):
    c = cell.config
    if not cell.has("responses.npz"):
        cal, train, hold = simulate_responses(
            cell.state["B"], cell.state["train"], cell.state["holdout"], c.mrge_target,
            c.mrge_rate, c.mrge_tolerance, c.mrge_max_iter, rng=stage_rng(cell.seed, "respsim"))
        _atomic_npz(cell.file("responses.npz"), train_f=train.f,
                    holdout_f=hold.f if hold is not None else np.zeros(0, np.int8),
                    scale=cal.scale, achieved=cal.achieved_mrge, iterations=cal.iterations_used)
        export_responses(train, cell.file("responses.csv"))
        if hold is not None:
            export_responses(hold, cell.file("responses.csv"), "holdout", "a", False)
    z = np.load(cell.file("responses.npz"))
    cell.state["train_f"] = z["train_f"]
    cell.state["holdout_f"] = z["holdout_f"] if z["holdout_f"].size else None
    cell.state["scale"] = float(z["scale"])


def _chain_seed(cell, k):
    return int(stage_rng(cell.seed, "hbmxl", k).integers(2 ** 31))


def _stage_estimate(cell):
    """Two chains; the post-burn-in length grows while the monotonicity
    filter cannot supply n draws per respondent."""
    c = cell.config
    if not cell.has("chain_b.npz"):
        keep = c.keep
        for attempt in range(c.max_extensions + 1):
            chains = []
            for k, name in enumerate(("chain_a", "chain_b")):
                ck = cell.file(f"{name}.ckpt.npz")
                chains.append(run_chain(cell.state["train_f"], cell.state["train"],
                                        burn_in=c.burn_in, keep=keep, seed=_chain_seed(cell, k),
                                        checkpoint=ck))
            try:
                filter_monotone_draws(chains[0], c.monotone_features, c.n_levels,
                                      c.n_draws, c.thinning)
                break
            except NeedsLongerChainError as exc:
                if attempt == c.max_extensions:
                    raise
                keep = int(np.ceil(1.1 * exc.estimated_length / c.thinning)) * c.thinning
                log.info("%s: extending chains to keep=%d", cell.path, keep)
        save_chain(chains[0], cell.file("chain_a.npz"))
        save_chain(chains[1], cell.file("chain_b.npz"))
    cell.state["chains"] = (load_chain(cell.file("chain_a.npz")),
                            load_chain(cell.file("chain_b.npz")))


def _stage_diagnose(cell):
    c = cell.config
    if not cell.has("draws.npz"):
        a, b = cell.state["chains"]
        dt = filter_monotone_draws(a, c.monotone_features, c.n_levels, c.n_draws, c.thinning)
        _atomic_npz(cell.file("draws.npz"), draws=dt.draws, kept=dt.kept_iterations,
                    thinning=dt.thinning_factor, source_length=dt.source_chain_length)
        if cell.state["holdout_f"] is not None:
            rep = assess(dt.draws, cell.state["B"], cell.state["scale"],
                         cell.state["holdout"], cell.state["holdout_f"], c.alpha,
                         chains=(a, b), burn_in=a.burn_in)
            export_assessment(rep, cell.file("assessment.csv"))
    cell.state["draws"] = np.load(cell.file("draws.npz"))["draws"]


def market_spec(config, seed, table=None):
    """Market of a condition with delta resolved from the cost table."""
    table = table or read_cost_table(config.cost_table)
    if table.n_levels != config.n_levels:
        raise ConfigurationError("cost table and config disagree on the number of levels")
    if config.n_features - 1 > len(table.features):
        raise ConfigurationError("cost table has too few features for the condition")
    included = table.features[:config.n_features - 1]
    delta, chosen = resolve_delta(table, included, stage_rng(seed, "delta"))
    spec = MarketSpec(config.n_features, config.n_levels, table.prices,
                      table.cost_vector(included), delta, config.n_firms, config.line_size)
    return spec, chosen


def _paramset(cell, kind, rule):
    if kind == "draws":
        return ParamSet.from_draws(cell.state["draws"], rule)
    if kind == "point":
        return ParamSet.from_point(cell.state["draws"], rule)
    return ParamSet.from_truth(cell.state["B"], rule, cell.state["scale"])


def _stage_market(cell, workers, backend):
    c = cell.config
    check_capacity(c)
    spec, chosen = market_spec(c, cell.seed)
    if not cell.has("delta.json"):
        _atomic_json(cell.file("delta.json"), {"delta": spec.delta, "levels": chosen,
                                               "seed": cell.seed})
    cell.state["spec"] = spec
    kinds = list(c.paramsets)
    if "true" not in kinds:
        kinds.append("true")  # reference for the equality measures
    for rule in c.rules:
        for kind in kinds:
            name = f"tables_{rule}_{kind}.npz"
            if not cell.has(name):
                tab = precompute_tables(spec, _paramset(cell, kind, rule), workers, backend,
                                        c.max_scenarios)
                save_tables(tab, cell.file(name))


def _stage_nash(cell, workers):
    c = cell.config
    spec = cell.state["spec"]
    lines = enumerate_lines(spec.tau, spec.line_size)
    kinds = set(c.paramsets) | {"true"}
    for rule in c.rules:
        for kind in sorted(kinds):
            name = f"outcomes_{rule}_{kind}.csv"
            if cell.has(name):
                continue
            tab = load_tables(cell.file(f"tables_{rule}_{kind}.npz"), spec)
            tally = find_all_equilibria(tab, c.max_rounds, workers,
                                        provenance={"rule": rule, "kind": kind})
            tmp = cell.file(name + ".tmp")
            write_outcome_log(tally, tab, tmp, lines)
            os.replace(tmp, cell.file(name))


MEASURE_KEYS = ("condition", "replication", "rule", "paramset")


def _stage_metrics(cell):
    c = cell.config
    spec = cell.state["spec"]
    rows, freq_rows = [], []
    for rule in c.rules:
        tabs = {}
        tallies = {}
        for kind in set(c.paramsets) | {"true"}:
            tabs[kind] = load_tables(cell.file(f"tables_{rule}_{kind}.npz"), spec)
            outs = read_outcome_log(cell.file(f"outcomes_{rule}_{kind}.csv"))
            tallies[kind] = GameTally(outs, None, len(outs), 0, 0, 0)
        _, truth = dedup_and_flips(tallies["true"].outcomes, spec.n_lines, spec.n_firms)
        truth_freq = level_frequencies(truth, spec) if truth else None
        for kind in c.paramsets:
            m = run_measures(tallies[kind], tabs[kind], truth, truth_freq)
            rows.append([c.label, cell.replication, rule, kind] + list(m.row().values()))
            _, found = dedup_and_flips(tallies[kind].outcomes, spec.n_lines, spec.n_firms)
            if found:
                freq = level_frequencies(found, spec)
                for f in range(spec.n_features):
                    for v in range(spec.n_levels):
                        freq_rows.append([c.label, cell.replication, rule, kind, f, v + 1,
                                          repr(float(freq[f, v]))])
    return rows, freq_rows


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


STAGE_ORDER = ("prefs", "design", "responses", "estimate", "diagnose", "precompute",
               "play", "analyze")


def open_cell(config, replication, root, backend=None):
    cell = Cell(config, replication, os.path.join(root, f"{config.label}_r{replication}"))
    cell.seed = cell_seed(config, replication)
    os.makedirs(cell.path, exist_ok=True)
    man = cell.file("manifest.json")
    if os.path.exists(man):
        with open(man) as fh:
            old = json.load(fh)
        if old.get("config_hash") != config.digest():
            raise ConfigurationError(f"{cell.path} was written with a different config")
    else:
        _atomic_json(man, {
            "config_hash": config.digest(), "config": config.as_dict(),
            "replication": replication, "cell_seed": cell.seed,
            "seed_scheme": "SeedSequence([master, stage id, *extra]) per stage",
            "version": __version__, "numpy": np.__version__, "backend": backend or BACKEND})
    return cell


def run_cell(config, replication, root, workers=None, backend=None, until="analyze"):
    """Run (or resume) one cell through stage `until`; returns measure rows
    when the analysis stage is reached."""
    if until not in STAGE_ORDER:
        raise ConfigurationError(f"unknown stage {until!r}")
    cell = open_cell(config, replication, root, backend)
    steps = {
        "prefs": _stage_prefs, "design": _stage_design, "responses": _stage_responses,
        "estimate": _stage_estimate, "diagnose": _stage_diagnose,
        "precompute": lambda c: _stage_market(c, workers, backend),
        "play": lambda c: _stage_nash(c, workers),
    }
    for name in STAGE_ORDER[:STAGE_ORDER.index(until) + 1]:
        if name == "analyze":
            return _stage_metrics(cell)
        log.info("%s: %s", cell.path, name)
        steps[name](cell)
    return None


def _measure_header():
    from .metrics import RunMeasures

    return list(MEASURE_KEYS) + [f.name for f in fields(RunMeasures)]


def run_experiment(config, root, workers=None, backend=None):
    """Run every replication of a config under `root`; returns `root`."""
    validate_condition_table(config)
    check_capacity(config)
    os.makedirs(root, exist_ok=True)
    rows, freq_rows = [], []
    for r in range(config.replications):
        a, b = run_cell(config, r, root, workers, backend)
        rows += a
        freq_rows += b
    write_csv(os.path.join(root, "measures.csv"), _measure_header(), rows)
    write_csv(os.path.join(root, "levelfreq.csv"),
              list(MEASURE_KEYS) + ["feature", "level", "frequency"], freq_rows)
    return root


def write_csv(path, header, rows):
    tmp = path + ".tmp"
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    os.replace(tmp, path)
