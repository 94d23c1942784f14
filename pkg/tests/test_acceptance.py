"""Acceptance checks. Each test records one PASS/FAIL line, listed in the
"acceptance criteria" section at the end of the pytest run."""
import filecmp
import itertools
import os
import time

import numpy as np
import pytest

from conjnash.designgen import ChoiceDesign, DesignSpec, assess_design, generate_design
from conjnash.diagnostics import credible_interval, predictive_measures, psrf, recovery_measures
from conjnash.harness import (ExperimentConfig, _measure_header, market_spec, run_cell,
                              run_experiment, validate_condition_table, write_csv)
from conjnash.hbmxl import load_chain
from conjnash.kernels import available_backends
from conjnash.market import (ParamSet, decode_scenarios, default_workers, demand,
                             enumerate_lines, enumerate_products, precompute_tables, product_utilities,
                             scenario_margins, scenario_rank)
from conjnash.metrics import dedup_and_flips, run_measures
from conjnash.nash import find_all_equilibria, fixed_point_scan, write_outcome_log
from conjnash.prefgen import PreferenceSpec, generate_preferences
from conjnash.respsim import simulate_responses

# base conditions as published: (features, line size, firms, tau, a, k)
PUBLISHED = [
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
]

ORACLE_CONDITIONS = (1, 3)
RULES = ("first", "logit")


def hand_seeded_sets():
    g = np.random.default_rng(2024)
    o = 2 * 4
    return {
        "normal": g.normal(0.0, 1.5, size=(50, o, 4)),
        # small integers make exact utility ties common
        "integer": g.integers(-2, 3, size=(30, o, 2)).astype(float),
    }


@pytest.fixture(scope="module")
def estimated(tmp_path_factory):
    """A short two-feature estimation shared by the oracle checks."""
    root = tmp_path_factory.mktemp("est")
    cfg = ExperimentConfig(condition=1, n_respondents=60, burn_in=1000, keep=2000,
                           n_draws=20, thinning=10, design_starts=5, seed=3)
    run_cell(cfg, 0, str(root), until="diagnose")
    cell = root / f"{cfg.label}_r0"
    draws = np.load(cell / "draws.npz")["draws"]
    B = np.load(cell / "prefs.npz")["B"]
    scale = float(np.load(cell / "responses.npz")["scale"])
    return draws, B, scale


def parameter_sets(estimated, rule):
    draws, B, scale = estimated
    out = {f"hand_{k}": ParamSet("draws", v, rule) for k, v in hand_seeded_sets().items()}
    out["est_draws"] = ParamSet.from_draws(draws, rule)
    out["est_point"] = ParamSet.from_point(draws, rule)
    out["est_true"] = ParamSet.from_truth(B, rule, scale)
    return out


_GAMES = {}


def oracle_games(estimated, workers):
    """Tables, game tallies and fixed-point sets for every condition x rule x
    parameter set, computed with `workers` threads (cached)."""
    if workers not in _GAMES:
        res = {}
        t0 = time.perf_counter()
        for cond in ORACLE_CONDITIONS:
            spec, _ = market_spec(ExperimentConfig(condition=cond), seed=0)
            for rule in RULES:
                for name, ps in parameter_sets(estimated, rule).items():
                    tab = precompute_tables(spec, ps, workers=workers)
                    tally = find_all_equilibria(tab, workers=workers)
                    res[cond, rule, name] = (tab, tally, fixed_point_scan(tab))
        _GAMES[workers] = res, time.perf_counter() - t0
    return _GAMES[workers]


def test_criterion_01_condition_table(acceptance):
    t0 = time.perf_counter()
    bad = []
    for row, (L, q, W, tau, a, k) in enumerate(PUBLISHED, 1):
        r = validate_condition_table(row)
        if (r.n_features, r.line_size, r.n_firms, r.tau, r.n_lines, r.n_scenarios) != (L, q, W, tau, a, k):
            bad.append(row)
    dt = time.perf_counter() - t0
    ok = not bad and dt < 1.0
    acceptance(1, ok, f"16 rows, mismatches={bad}, {dt:.3f} s (limit 1 s)")
    assert ok


def test_criterion_02_mrge_calibration(acceptance):
    worst = 0.0
    iters = []
    t_total = 0.0
    for seed in range(10):
        prefs = generate_preferences(PreferenceSpec(2, 5, 500, seed=seed),
                                     np.random.default_rng(seed))
        train, hold = generate_design(DesignSpec(2, 5, 5, 15, 5, 5, seed),
                                      np.random.default_rng(seed))
        for target in (0.125, 0.5):
            t0 = time.perf_counter()
            cal, _, _ = simulate_responses(prefs.B, train.sets, hold.sets, target, d=0.5,
                                           t=1e-5, r_max=10_000,
                                           rng=np.random.default_rng([seed, int(target * 1000)]))
            t_total += time.perf_counter() - t0
            worst = max(worst, abs(cal.achieved_mrge - target))
            iters.append(cal.iterations_used)
    ok = worst <= 1e-5 and t_total < 30.0
    acceptance(2, ok, f"20 calibrations, max |achieved-target|={worst:.2e}, "
                      f"iterations {min(iters)}-{max(iters)}, {t_total:.1f} s (limit 30 s)")
    assert ok


def test_criterion_03_design_efficiency(acceptance):
    t0 = time.perf_counter()
    effs, problems = [], []
    for L in (2, 3):
        spec = DesignSpec(L, 5, 5, 15, 5, n_random_starts=50, seed=L)
        train, hold = generate_design(spec, np.random.default_rng(L))
        rep = assess_design(train, hold)
        effs.append(rep.d_efficiency)
        if rep.duplicate_sets_within or rep.duplicate_sets_across:
            problems.append(f"duplicates at L={L}")
        if not np.all(rep.level_counts == 15 * 5 // 5):
            problems.append(f"unbalanced at L={L}")
        if rep.d_efficiency < 96.0:
            problems.append(f"efficiency {rep.d_efficiency:.2f}% at L={L}")
    dt = time.perf_counter() - t0
    ok = not problems and dt < 300
    acceptance(3, ok, "D-efficiency " + ", ".join(f"{e:.2f}%" for e in effs)
               + f" (floor 96%), issues={problems}, {dt:.1f} s (limit 300 s)")
    assert ok


def test_criterion_04_oracle_equivalence(estimated, acceptance):
    res, dt = oracle_games(estimated, 1)
    bad = [key for key, (_, tally, fp) in res.items()
           if tally.equilibria.as_set() != {int(s) for s in fp}]
    n_eq = sum(len(fp) for _, _, fp in res.values())
    ok = not bad and dt < 60
    acceptance(4, ok, f"{len(res)} tables (conditions 1, 3 x 2 rules x 5 sets), "
                      f"{n_eq} equilibria, mismatches={bad}, {dt:.1f} s (limit 60 s)")
    assert ok


def test_criterion_05_flip_closure(estimated, acceptance):
    res, _ = oracle_games(estimated, 1)
    checked, missing = 0, []
    for key, (tab, tally, fp) in res.items():
        _, with_flip = dedup_and_flips(tally.outcomes, tab.n_lines, tab.n_firms)
        fixed = {int(s) for s in fp}
        for row in decode_scenarios(np.array(sorted(with_flip), dtype=np.int64),
                                    tab.n_lines, tab.n_firms):
            if len(set(row.tolist())) < 2:
                continue
            checked += 1
            for perm in set(itertools.permutations(row.tolist())):
                s = scenario_rank(list(perm), tab.n_lines)
                if s not in with_flip or s not in fixed:
                    missing.append((key, perm))
    ok = not missing and checked > 0
    acceptance(5, ok, f"{checked} differentiated equilibria, missing permutations={len(missing)}")
    assert ok


def test_criterion_06_demand_conservation(acceptance):
    g = np.random.default_rng(606)
    N, n = 500, 4
    cfg = ExperimentConfig(condition=11)  # two features, two products, three firms
    spec, _ = market_spec(cfg, seed=0)
    lines = enumerate_lines(spec.tau, spec.line_size)
    pw = g.normal(0.0, 1.0, size=(N, spec.n_features * (spec.n_levels - 1), n))
    pw[: N // 2] = np.round(pw[: N // 2])  # half the respondents produce ties
    worst = {}
    for rule in RULES:
        util = product_utilities(spec, ParamSet("draws", pw, rule))
        err = 0.0
        for s in g.integers(spec.n_scenarios, size=1000):
            prods = lines[decode_scenarios(np.array([s]), spec.n_lines, spec.n_firms)[0]].ravel()
            err = max(err, abs(demand(prods, util, rule, n).sum() - N))
        worst[rule] = err
    # identical products split evenly under the first rule
    util = product_utilities(spec, ParamSet("draws", pw, "first"))
    split_bad = 0
    for W in (2, 3, 4, 5, 7):
        for p in g.integers(spec.tau, size=20):
            d = demand([p] * W, util, "first", n)
            split_bad += int(np.any(d != N / W))
    # and through the scenario kernels: every firm offering the same product
    spec3, _ = market_spec(ExperimentConfig(condition=3), seed=0)
    pw3 = pw.copy()
    diag = np.array([scenario_rank([a] * 3, spec3.n_lines) for a in range(spec3.n_lines)])
    _, unit = enumerate_products(spec3)  # one product per line, so line a is product a
    kernel_bad = 0
    for b in available_backends():
        m = scenario_margins(spec3, ParamSet("draws", pw3, "first"), workers=1, backend=b)
        kernel_bad += int(np.any(m[diag] != (N / 3) * unit))
    ok = all(v <= 1e-9 for v in worst.values()) and split_bad == 0 and kernel_bad == 0
    acceptance(6, ok, f"max |total-i| first={worst['first']:.1e} logit={worst['logit']:.1e} "
                      f"(tol 1e-9), unequal identical-product splits={split_bad + kernel_bad}")
    assert ok


def recovery_run(root, seed, burn_in=2000, keep=5000):
    cfg = ExperimentConfig(condition=1, n_respondents=200, mrge_target=0.125,
                           variance_profile="homogeneous", burn_in=burn_in, keep=keep,
                           n_draws=100, thinning=10, design_starts=50, seed=seed)
    t0 = time.perf_counter()
    run_cell(cfg, 0, str(root), until="diagnose")
    dt = time.perf_counter() - t0
    cell = root / f"{cfg.label}_r0"
    a, b = load_chain(cell / "chain_a.npz"), load_chain(cell / "chain_b.npz")
    uni, _ = psrf(a, b, a.burn_in)
    draws = np.load(cell / "draws.npz")["draws"]
    B = np.load(cell / "prefs.npz")["B"]
    z = np.load(cell / "responses.npz")
    hold_x = ChoiceDesign(np.load(cell / "design.npz")["holdout"], cfg.n_levels).sets
    _, corr, _ = recovery_measures(draws.mean(axis=2, keepdims=True), B, float(z["scale"]))
    hit, _ = predictive_measures(draws, hold_x, z["holdout_f"])
    return dict(share=float(np.mean(uni <= 1.2)), corr=float(corr[0]),
                hit_hi=credible_interval(hit, cfg.alpha)[1], seconds=dt)


def test_criterion_07_recovery(tmp_path, acceptance):
    # a property floor should not hinge on one seed, so three seeds must pass
    runs = {s: recovery_run(tmp_path / f"s{s}", s) for s in (1, 2, 3)}
    ok = all(r["share"] >= 0.95 and r["corr"] >= 0.7 and r["hit_hi"] >= 0.5
             and r["seconds"] < 1800 for r in runs.values())
    detail = "; ".join(f"seed {s}: PSRF<=1.2 {100 * r['share']:.1f}%, corr {r['corr']:.3f}, "
                       f"hit upper {r['hit_hi']:.3f}, {r['seconds']:.0f} s"
                       for s, r in runs.items())
    acceptance(7, ok, f"floors 95% / 0.7 / 0.5, limit 1800 s; {detail}")
    assert ok


@pytest.mark.slow
@pytest.mark.skipif(not os.environ.get("CONJNASH_SLOW"), reason="set CONJNASH_SLOW=1")
def test_recovery_converges_at_full_chain_length(tmp_path):
    r = recovery_run(tmp_path, 2, burn_in=10_000, keep=30_000)
    assert r["share"] >= 0.95 and r["corr"] >= 0.7 and r["hit_hi"] >= 0.5


def test_criterion_08_true_truth(acceptance):
    bad = []
    for cond in ORACLE_CONDITIONS:
        spec, _ = market_spec(ExperimentConfig(condition=cond), seed=0)
        B = generate_preferences(PreferenceSpec(2, 5, 120, seed=cond),
                                 np.random.default_rng(cond)).B
        scale = 1.7319
        for rule in RULES:
            sets = {"true": ParamSet.from_truth(B, rule, scale),
                    "draws": ParamSet.from_draws((B / scale)[:, :, None], rule),
                    "point": ParamSet.from_point((B / scale)[:, :, None], rule)}
            tabs = {k: precompute_tables(spec, v, workers=1) for k, v in sets.items()}
            eqs = {k: find_all_equilibria(t, workers=1) for k, t in tabs.items()}
            for k in ("draws", "point"):
                same = (np.array_equal(tabs[k].margins, tabs["true"].margins)
                        and np.array_equal(tabs[k].best_line, tabs["true"].best_line)
                        and np.array_equal(tabs[k].best_margin, tabs["true"].best_margin)
                        and eqs[k].outcomes == eqs["true"].outcomes)
                if not same:
                    bad.append((cond, rule, k))
    ok = not bad
    acceptance(8, ok, f"draws/point/true identical on conditions 1, 3 x 2 rules, differences={bad}")
    assert ok


def test_criterion_09_credible_interval(acceptance):
    g = np.random.default_rng(9)
    vectors = [g.normal(size=500), g.integers(-50, 50, size=500).astype(float),
               g.permutation(np.arange(500.0)), g.standard_cauchy(500)]
    bad = 0
    for v in vectors:
        s = np.sort(v)
        lo, hi = credible_interval(v, 0.05)
        bad += int(lo != 0.5 * s[11] + 0.5 * s[12])
        bad += int(hi != 0.5 * s[486] + 0.5 * s[487])
    ok = bad == 0
    acceptance(9, ok, f"n=500, alpha=0.05 on {len(vectors)} vectors, inexact bounds={bad}")
    assert ok


def _write_oracle_outputs(res, root):
    os.makedirs(root, exist_ok=True)
    rows = []
    lines = {}
    for (cond, rule, name), (tab, tally, _) in sorted(res.items()):
        if cond not in lines:
            lines[cond] = enumerate_lines(tab.spec.tau, tab.spec.line_size)
        write_outcome_log(tally, tab, os.path.join(root, f"c{cond}_{rule}_{name}.csv"), lines[cond])
        truth = None
        if name.startswith("est_"):
            t_tab, t_tally, _ = res[cond, rule, "est_true"]
            truth = dedup_and_flips(t_tally.outcomes, t_tab.n_lines, t_tab.n_firms)[1]
        m = run_measures(tally, tab, truth)
        rows.append([cond, 0, rule, name] + list(m.row().values()))
    write_csv(os.path.join(root, "measures.csv"), _measure_header(), rows)
    return sorted(os.listdir(root))


def test_criterion_10_parallel_determinism(estimated, tmp_path, acceptance):
    counts = sorted({1, 4, default_workers(), 8})
    listing = {}
    for w in counts:
        res, _ = oracle_games(estimated, w)
        listing[w] = _write_oracle_outputs(res, str(tmp_path / f"oracle_w{w}"))
    # the same through the experiment runner
    cfg = ExperimentConfig(condition=3, n_respondents=40, burn_in=200, keep=1000, n_draws=10,
                           thinning=5, design_starts=3, seed=10)
    for w in counts:
        run_experiment(cfg, str(tmp_path / f"run_w{w}"), workers=w)
    diffs = []
    ref = tmp_path / f"oracle_w{counts[0]}"
    for w in counts[1:]:
        if listing[w] != listing[counts[0]]:
            diffs.append(f"file list w={w}")
        for f in listing[counts[0]]:
            if not filecmp.cmp(ref / f, tmp_path / f"oracle_w{w}" / f, shallow=False):
                diffs.append(f"{f} w={w}")
        run_ref = tmp_path / f"run_w{counts[0]}"
        run_w = tmp_path / f"run_w{w}"
        names = ["measures.csv", "levelfreq.csv"] + [
            os.path.join(f"{cfg.label}_r0", f) for f in os.listdir(run_ref / f"{cfg.label}_r0")
            if f.startswith("outcomes_")]
        for f in names:
            if not filecmp.cmp(run_ref / f, run_w / f, shallow=False):
                diffs.append(f"run {f} w={w}")
    n_files = len(listing[counts[0]])
    ok = not diffs
    acceptance(10, ok, f"workers {counts}: {n_files} oracle files and the runner's outcome "
                       f"logs and measures.csv compared byte for byte, differences={diffs}")
    assert ok
