"""D-efficient choice designs by modified Fedorov exchange.

Designs are held as integer level arrays of shape (sets, alternatives,
features) with 0-based levels; `encode` turns them into the dummy-coded
tensor used by the estimation and response code.
"""
from dataclasses import dataclass, field
from math import comb

import numpy as np

from .errors import DegenerateDesignError, InfeasibleDesignError
from .seeding import stage_rng


@dataclass(frozen=True)
class DesignSpec:
    n_features: int
    n_levels: int
    n_alternatives: int
    n_train_sets: int
    n_holdout_sets: int = 0
    n_random_starts: int = 50
    seed: int = 0
    max_passes: int = 100

    def __post_init__(self):
        if self.n_alternatives != self.n_levels:
            raise ValueError("symmetric setting requires n_alternatives == n_levels")
        if self.n_train_sets % self.n_levels:
            raise ValueError("n_train_sets must be a multiple of n_levels")
        if self.n_levels ** self.n_features < self.n_alternatives:
            raise ValueError("full factorial smaller than a choice set")

    @property
    def n_params(self):
        return self.n_features * (self.n_levels - 1)


@dataclass
class ChoiceDesign:
    levels: np.ndarray
    n_levels: int
    role: str = "train"
    d_error: float = float("nan")
    d_efficiency: float = float("nan")
    restart_efficiency: float = float("nan")
    trajectory: list = field(default_factory=list, repr=False)

    @property
    def sets(self):
        return encode(self.levels, self.n_levels)

    @property
    def n_sets(self):
        return self.levels.shape[0]

    @property
    def n_alternatives(self):
        return self.levels.shape[1]

    @property
    def n_features(self):
        return self.levels.shape[2]


def encode(levels, n_levels):
    """Dummy-code a (..., n_features) level array into (..., n_features*(m-1))."""
    levels = np.asarray(levels)
    nf = levels.shape[-1]
    out = np.zeros(levels.shape[:-1] + (nf * (n_levels - 1),))
    for f in range(nf):
        lv = levels[..., f]
        for v in range(1, n_levels):
            out[..., f * (n_levels - 1) + v - 1] = lv == v
    return out


def decode(x, n_features, n_levels):
    x = np.asarray(x)
    blocks = x.reshape(x.shape[:-1] + (n_features, n_levels - 1))
    if np.any(blocks.sum(axis=-1) > 1):
        raise ValueError("more than one level set for a feature")
    idx = np.argmax(blocks, axis=-1) + 1
    return np.where(blocks.any(axis=-1), idx, 0).astype(np.int64)


def full_factorial(n_features, n_levels):
    """Candidate profiles in mixed-radix order, first feature most significant."""
    grids = np.indices((n_levels,) * n_features).reshape(n_features, -1).T
    return np.ascontiguousarray(grids.astype(np.int64))


def set_key(set_levels):
    return tuple(sorted(tuple(int(v) for v in alt) for alt in set_levels))


def information_matrix(x):
    """Logit information at zero part-worths for a dummy tensor (K, J, o)."""
    x = np.asarray(x, dtype=float)
    J = x.shape[1]
    xc = x - x.mean(axis=1, keepdims=True)
    return np.einsum("kjo,kjp->op", xc, xc) / J


def _d_error_from_info(info):
    o = info.shape[0]
    sign, logdet = np.linalg.slogdet(info)
    if sign <= 0 or not np.isfinite(logdet) or logdet < -30 * o:
        raise DegenerateDesignError("information matrix is singular")
    return float(np.exp(-logdet / o))


def d_error(design):
    if isinstance(design, ChoiceDesign):
        x = design.sets
    else:
        x = np.asarray(design, dtype=float)
    return _d_error_from_info(information_matrix(x))


def reference_d_error(n_features, n_levels, n_alternatives, n_sets):
    """D-error of the ideal design: every feature level once per set and
    all cross-feature level pairs balanced. Used as the 100% reference."""
    m = n_levels
    block = (np.eye(m - 1) - np.full((m - 1, m - 1), 1.0 / m)) * n_sets / n_alternatives
    info = np.kron(np.eye(n_features), block)
    return _d_error_from_info(info)


def n_distinct_sets(n_candidates, n_alternatives):
    return comb(n_candidates + n_alternatives - 1, n_alternatives)


class _Exchanger:
    """Alternative-wise exchange state for one design."""

    def __init__(self, levels, cand_levels, cand_x, n_levels, forbidden):
        self.levels = levels.copy()
        self.cand_levels = cand_levels
        self.cand_x = cand_x
        self.m = n_levels
        self.forbidden = forbidden
        self.x = encode(self.levels, n_levels)
        self.K, self.J, self.o = self.x.shape
        self.set_contrib = np.stack([self._contrib(self.x[k]) for k in range(self.K)])
        self.info = self.set_contrib.sum(axis=0)

    def _contrib(self, xk):
        xc = xk - xk.mean(axis=0)
        return xc.T @ xc / self.J

    def keys(self):
        return [set_key(self.levels[k]) for k in range(self.K)]

    def candidate_infos(self, k, j):
        xk = self.x[k]
        J = self.J
        s = xk.sum(axis=0) - xk[j]
        gram = xk.T @ xk - np.outer(xk[j], xk[j])
        base = self.info - self.set_contrib[k] + gram / J
        sc = s[None, :] + self.cand_x
        return (base[None]
                + np.einsum("co,cp->cop", self.cand_x, self.cand_x) / J
                - np.einsum("co,cp->cop", sc, sc) / (J * J))

    def swap(self, k, j, c):
        self.levels[k, j] = self.cand_levels[c]
        self.x[k, j] = self.cand_x[c]
        self.info = self.info - self.set_contrib[k]
        self.set_contrib[k] = self._contrib(self.x[k])
        self.info = self.info + self.set_contrib[k]


def _random_design(rng, n_sets, n_alts, n_cand, cand_levels, forbidden):
    taken = set(forbidden)
    levels = np.empty((n_sets, n_alts, cand_levels.shape[1]), dtype=np.int64)
    for k in range(n_sets):
        for _ in range(10000):
            pick = rng.integers(0, n_cand, size=n_alts)
            key = set_key(cand_levels[pick])
            if key not in taken:
                break
        else:
            raise InfeasibleDesignError("could not draw a unique random set")
        taken.add(key)
        levels[k] = cand_levels[pick]
    return levels


def _logdet(infos):
    sign, logdet = np.linalg.slogdet(infos)
    return np.where(sign > 0, logdet, -np.inf)


def fedorov(levels, n_levels, forbidden=(), max_passes=100):
    """Improve a start design until no single alternative swap helps.

    Each pass visits every (set, alternative) position, evaluates all
    full-factorial candidates and takes the best one if it raises the
    information determinant and keeps all sets unique. Returns the improved
    level array and the D-error after every pass.
    """
    nf = levels.shape[2]
    cand_levels = full_factorial(nf, n_levels)
    cand_x = encode(cand_levels, n_levels)
    ex = _Exchanger(levels, cand_levels, cand_x, n_levels, forbidden)
    o = ex.o
    forbidden = set(forbidden)
    current = _logdet(ex.info[None])[0]
    trajectory = [np.exp(-current / o) if np.isfinite(current) else np.inf]
    for _ in range(max_passes):
        improved = False
        for k in range(ex.K):
            for j in range(ex.J):
                ld = _logdet(ex.candidate_infos(k, j))
                order = np.argsort(-ld, kind="stable")
                others = {set_key(ex.levels[kk]) for kk in range(ex.K) if kk != k}
                others |= forbidden
                for c in order:
                    if not ld[c] > current + 1e-12:
                        break
                    trial = ex.levels[k].copy()
                    trial[j] = cand_levels[c]
                    if set_key(trial) in others:
                        continue
                    ex.swap(k, j, c)
                    current = ld[c]
                    improved = True
                    break
        trajectory.append(np.exp(-current / o) if np.isfinite(current) else np.inf)
        if not improved:
            break
    return ex.levels, trajectory


def _optimize(n_features, n_levels, n_alts, n_sets, n_starts, rng, forbidden, max_passes):
    cand_levels = full_factorial(n_features, n_levels)
    n_cand = len(cand_levels)
    if n_sets + len(forbidden) > n_distinct_sets(n_cand, n_alts):
        raise InfeasibleDesignError(
            f"{n_sets + len(forbidden)} unique sets requested, only "
            f"{n_distinct_sets(n_cand, n_alts)} exist")
    results = []
    for r in range(n_starts):
        start = _random_design(rng, n_sets, n_alts, n_cand, cand_levels, forbidden)
        levels, traj = fedorov(start, n_levels, forbidden, max_passes)
        try:
            err = d_error(encode(levels, n_levels))
        except DegenerateDesignError:
            err = np.inf
        results.append((err, r, levels, traj))
    best = min(results, key=lambda t: (t[0], t[1]))
    if not np.isfinite(best[0]):
        raise DegenerateDesignError("every restart ended singular")
    return best, results


def generate_design(spec, rng=None):
    """Best-of-restarts training design plus a hold-out design unique against it."""
    if rng is None:
        rng = stage_rng(spec.seed, "designgen")
    ref = reference_d_error(spec.n_features, spec.n_levels, spec.n_alternatives,
                            spec.n_train_sets)
    (err, _, levels, traj), _ = _optimize(
        spec.n_features, spec.n_levels, spec.n_alternatives, spec.n_train_sets,
        spec.n_random_starts, rng, (), spec.max_passes)
    train = ChoiceDesign(levels=levels, n_levels=spec.n_levels, role="train",
                         d_error=err, d_efficiency=100.0 * ref / err,
                         restart_efficiency=100.0, trajectory=traj)
    holdout = None
    if spec.n_holdout_sets:
        forbidden = {set_key(s) for s in levels}
        try:
            ref_h = reference_d_error(spec.n_features, spec.n_levels,
                                      spec.n_alternatives, spec.n_holdout_sets)
        except DegenerateDesignError:
            ref_h = np.nan
        (err_h, _, hl, traj_h), _ = _optimize_holdout(spec, rng, forbidden)
        holdout = ChoiceDesign(levels=hl, n_levels=spec.n_levels, role="holdout",
                               d_error=err_h, d_efficiency=100.0 * ref_h / err_h,
                               restart_efficiency=100.0, trajectory=traj_h)
    return train, holdout


def _optimize_holdout(spec, rng, forbidden):
    return _optimize(spec.n_features, spec.n_levels, spec.n_alternatives,
                     spec.n_holdout_sets, spec.n_random_starts, rng, forbidden,
                     spec.max_passes)


def design_restart_errors(spec, rng=None):
    """D-error of every restart, for diagnostics."""
    if rng is None:
        rng = stage_rng(spec.seed, "designgen")
    _, results = _optimize(spec.n_features, spec.n_levels, spec.n_alternatives,
                           spec.n_train_sets, spec.n_random_starts, rng, (),
                           spec.max_passes)
    return [r[0] for r in results]


@dataclass
class DesignReport:
    level_counts: np.ndarray
    max_balance_deviation: float
    overlap: np.ndarray
    duplicate_alternative: np.ndarray
    cooccurrence_deviation: float
    duplicate_sets_within: int
    duplicate_sets_across: int
    d_error: float
    d_efficiency: float

    @property
    def minimal_overlap(self):
        return bool(np.all(self.overlap == 0))

    def lines(self):
        out = [
            f"D-error              {self.d_error:.6g}",
            f"D-efficiency         {self.d_efficiency:.2f}%",
            f"max balance dev.     {self.max_balance_deviation:g}",
            f"within-set overlap   {int(self.overlap.sum())}",
            f"dup. alternatives    {int(self.duplicate_alternative.sum())}",
            f"co-occurrence dev.   {self.cooccurrence_deviation:.4g}",
            f"dup. sets (within)   {self.duplicate_sets_within}",
            f"dup. sets (across)   {self.duplicate_sets_across}",
        ]
        for f, row in enumerate(self.level_counts):
            out.append(f"feature {f} counts     " + " ".join(str(int(c)) for c in row))
        return out


def _balance_deviation(counts, total_per_feature, m):
    lo = total_per_feature // m
    hi = -(-total_per_feature // m)
    dev = np.maximum(lo - counts, counts - hi)
    return float(max(dev.max(), 0))


def assess_design(train, holdout=None):
    levels = train.levels
    K, J, nf = levels.shape
    m = train.n_levels
    counts = np.stack([np.bincount(levels[:, :, f].ravel(), minlength=m)
                       for f in range(nf)])
    overlap = np.zeros(K, dtype=np.int64)
    dup_alt = np.zeros(K, dtype=bool)
    for k in range(K):
        overlap[k] = sum(J - len(np.unique(levels[k, :, f])) for f in range(nf))
        dup_alt[k] = len({tuple(a) for a in levels[k]}) < J
    # deviation of pairwise level co-occurrence from proportionality
    n = K * J
    dev = 0.0
    flat = levels.reshape(n, nf)
    for a in range(nf):
        for b in range(a + 1, nf):
            table = np.zeros((m, m))
            np.add.at(table, (flat[:, a], flat[:, b]), 1)
            expected = np.outer(counts[a], counts[b]) / n
            dev = max(dev, float(np.abs(table - expected).max()))
    keys = [set_key(s) for s in levels]
    within = len(keys) - len(set(keys))
    across = 0
    if holdout is not None:
        hkeys = [set_key(s) for s in holdout.levels]
        within += len(hkeys) - len(set(hkeys))
        across = len(set(keys) & set(hkeys))
    try:
        err = d_error(train)
        eff = 100.0 * reference_d_error(nf, m, J, K) / err
    except DegenerateDesignError:
        err, eff = np.inf, 0.0
    return DesignReport(level_counts=counts,
                        max_balance_deviation=_balance_deviation(counts, K * J, m),
                        overlap=overlap, duplicate_alternative=dup_alt,
                        cooccurrence_deviation=dev, duplicate_sets_within=within,
                        duplicate_sets_across=across, d_error=err, d_efficiency=eff)


def export_csv(design, path, mode="w", write_header=True):
    import csv

    with open(path, mode, newline="") as fh:
        w = csv.writer(fh)
        if write_header:
            w.writerow(["role", "set", "alternative", "feature", "level"])
        K, J, nf = design.levels.shape
        for k in range(K):
            for j in range(J):
                for f in range(nf):
                    w.writerow([design.role, k, j, f, int(design.levels[k, j, f]) + 1])


def import_csv(path, n_levels):
    import csv

    rows = {}
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            role = rec.get("role", "train")
            rows.setdefault(role, []).append(
                (int(rec["set"]), int(rec["alternative"]), int(rec["feature"]),
                 int(rec["level"]) - 1))
    designs = {}
    for role, recs in rows.items():
        K = max(r[0] for r in recs) + 1
        J = max(r[1] for r in recs) + 1
        nf = max(r[2] for r in recs) + 1
        levels = np.zeros((K, J, nf), dtype=np.int64)
        for k, j, f, v in recs:
            levels[k, j, f] = v
        designs[role] = ChoiceDesign(levels=levels, n_levels=n_levels, role=role)
    return designs
