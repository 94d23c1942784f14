"""Convergence checks, monotonicity filtering, thinning, credible intervals
and recovery / predictive accuracy measures."""
from dataclasses import dataclass, field

import numpy as np

from .errors import NeedsLongerChainError, UndefinedVarianceError
from .prefgen import is_monotone

PSRF_THRESHOLD = 1.1


@dataclass
class DrawTensor:
    draws: np.ndarray  # respondents x o x n
    thinning_factor: int
    source_chain_length: int
    kept_iterations: np.ndarray = field(default=None, repr=False)

    @property
    def n(self):
        return self.draws.shape[2]


def _split_sequences(chains, burn_in):
    seqs = []
    for c in chains:
        c = np.asarray(c, dtype=float)[burn_in:]
        half = len(c) // 2
        seqs.append(c[:half])
        seqs.append(c[half:2 * half])
    return np.stack(seqs)  # sequences x n x params


def psrf_sequences(seqs):
    """Univariate and multivariate PSRF of an (m, n, p) stack of sequences."""
    seqs = np.asarray(seqs, dtype=float)
    m, n = seqs.shape[:2]
    seqs = seqs.reshape(m, n, -1)
    means = seqs.mean(axis=1)
    uni = _psrf_univariate(seqs)

    p = seqs.shape[2]
    if p == 1:
        return uni, float(uni[0])
    centered = seqs - means[:, None, :]
    Wm = np.einsum("mnp,mnq->pq", centered, centered) / (m * (n - 1))
    mc = means - means.mean(axis=0)
    Bn = mc.T @ mc / (m - 1)  # B / n
    try:
        L = np.linalg.cholesky(Wm)
    except np.linalg.LinAlgError:
        return uni, float("nan")
    Li = np.linalg.inv(L)
    lam = np.linalg.eigvalsh(Li @ Bn @ Li.T).max()
    multi = float(np.sqrt((n - 1) / n + (m + 1) / m * lam))
    return uni, multi


def psrf(chain_a, chain_b, burn_in):
    """PSRF from two chains split in half after burn-in.

    Accepts arrays (iterations, ...) or McmcChain objects; for chains the
    univariate vector covers betabar, the upper triangle of Sigma and every
    individual part-worth, and the multivariate value covers the
    hyperparameters.
    """
    if hasattr(chain_a, "hyper_draws"):
        hyper = _split_sequences([chain_a.hyper_draws(), chain_b.hyper_draws()], burn_in)
        every = chain_a.beta_store_every
        bstart = -(-burn_in // every)
        beta = _split_sequences(
            [chain_a.beta_draws.reshape(chain_a.beta_draws.shape[0], -1),
             chain_b.beta_draws.reshape(chain_b.beta_draws.shape[0], -1)], bstart)
        uni_h, multi = psrf_sequences(hyper)
        uni_b = _psrf_univariate(beta)
        return np.concatenate([uni_h, uni_b]), multi
    a = np.asarray(chain_a, dtype=float)
    b = np.asarray(chain_b, dtype=float)
    if len(a) != len(b) or len(a) <= 2 * burn_in:
        raise ValueError("chains need equal length > 2 * burn_in")
    if a.ndim == 1:
        a, b = a[:, None], b[:, None]
    return psrf_sequences(_split_sequences([a.reshape(len(a), -1), b.reshape(len(b), -1)],
                                           burn_in))


def _psrf_univariate(seqs):
    m, n = seqs.shape[:2]
    seqs = seqs.reshape(m, n, -1)
    B = n * seqs.mean(axis=1).var(axis=0, ddof=1)
    W = seqs.var(axis=1, ddof=1).mean(axis=0)
    if np.any(W == 0):
        raise UndefinedVarianceError("within-sequence variance is zero")
    return np.sqrt(((n - 1) / n * W + B / n) / W)


def filter_monotone_draws(chain, monotone_features, n_levels, required_n, thinning,
                          burn_in=None):
    """Thin the post-burn-in chain, then keep the last `required_n`
    draws per respondent that satisfy the monotonicity constraint.

    `chain` is a McmcChain or an (iterations, respondents, o) array.
    """
    every = 1
    if hasattr(chain, "beta_draws"):
        every = chain.beta_store_every
        beta = chain.beta_draws
        if burn_in is None:
            burn_in = chain.burn_in
        if thinning % every:
            raise ValueError("thinning must be a multiple of the chain's storage interval")
        step = thinning // every
        start = -(-burn_in // every)
        iters = np.arange(beta.shape[0]) * every
    else:
        beta = np.asarray(chain)
        burn_in = burn_in or 0
        step, start = thinning, burn_in
        iters = np.arange(beta.shape[0])
    thinned = beta[start::step]
    t_iters = iters[start::step]
    n_thin, N, o = thinned.shape
    if monotone_features:
        ok = is_monotone(thinned, monotone_features, n_levels)  # n_thin x N
    else:
        ok = np.ones((n_thin, N), dtype=bool)
    counts = ok.sum(axis=0)
    if counts.min() < required_n:
        frac = counts.min() / max(n_thin, 1)
        post_length = (required_n * thinning / frac) if frac > 0 else float("inf")
        raise NeedsLongerChainError(
            f"respondent {int(counts.argmin())} has {int(counts.min())} acceptable "
            f"draws, {required_n} required; estimated post-burn-in length "
            f"{post_length:.0f}", estimated_length=post_length, min_fraction=frac)
    draws = np.empty((N, o, required_n))
    kept = np.empty((N, required_n), dtype=np.int64)
    for i in range(N):
        idx = np.flatnonzero(ok[:, i])[-required_n:]
        draws[i] = thinned[idx, i, :].T
        kept[i] = t_iters[idx]
    return DrawTensor(draws=draws, thinning_factor=thinning,
                      source_chain_length=beta.shape[0] * every,
                      kept_iterations=kept)


def extrapolated_length(min_fraction, required_n, thinning):
    return required_n * thinning / min_fraction


def _order_stat(sorted_vals, pos):
    n = len(sorted_vals)
    if pos <= 1:
        return float(sorted_vals[0])
    if pos >= n:
        return float(sorted_vals[-1])
    lo = int(np.floor(pos))
    frac = pos - lo
    if frac == 0:
        return float(sorted_vals[lo - 1])
    return float((1 - frac) * sorted_vals[lo - 1] + frac * sorted_vals[lo])


def credible_interval(values, alpha=0.05):
    """Interval from 1-indexed order statistics at alpha/2*n and (1-alpha/2)*n,
    linearly interpolated when a position is fractional."""
    v = np.sort(np.asarray(values, dtype=float).ravel())
    n = len(v)
    if n < 2:
        raise ValueError("need at least two values")
    return _order_stat(v, alpha / 2 * n), _order_stat(v, (1 - alpha / 2) * n)


def _draws_array(draws):
    return draws.draws if isinstance(draws, DrawTensor) else np.asarray(draws, dtype=float)


def recovery_measures(draws, truth, s):
    """Per-draw RMSE of s-scaled estimates against truth and mean
    per-respondent Pearson correlation.

    Returns (rmse, corr, n_excluded) where n_excluded counts respondent-draw
    pairs with zero variance dropped from the correlation mean.
    """
    if not s > 0:
        raise ValueError("scale must be positive")
    D = _draws_array(draws)  # N x o x n
    B = np.asarray(getattr(truth, "B", truth), dtype=float)
    if D.shape[:2] != B.shape:
        raise ValueError("draws and truth dimensions differ")
    diff = s * D - B[:, :, None]
    rmse = np.sqrt((diff ** 2).mean(axis=(0, 1)))

    dc = D - D.mean(axis=1, keepdims=True)
    bc = B - B.mean(axis=1, keepdims=True)
    num = np.einsum("ion,io->in", dc, bc)
    den = np.sqrt((dc ** 2).sum(axis=1) * (bc ** 2).sum(axis=1)[:, None])
    valid = den > 0
    r = np.where(valid, num / np.where(valid, den, 1.0), 0.0)
    n_valid = valid.sum(axis=0)
    corr = np.where(n_valid > 0, r.sum(axis=0) / np.maximum(n_valid, 1), np.nan)
    return rmse, corr, int((~valid).sum())


def first_choice_shares(u):
    """Tie-split first-choice indicators over the last axis."""
    best = u.max(axis=-1, keepdims=True)
    hit = u == best
    return hit / hit.sum(axis=-1, keepdims=True)


def logit_shares(u):
    e = np.exp(u - u.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def predictive_measures(draws, holdout_x, holdout_f, rule="first"):
    """Per-draw hit rate and share-of-choice RMSE on hold-out sets.

    Hit rate always uses first-choice predictions (a tied prediction earns
    1/|S| when the chosen alternative is among the maximizers); the share
    RMSE uses `rule` ("first" or "logit") for predicted shares.
    """
    D = _draws_array(draws)
    x = np.asarray(holdout_x, dtype=float)
    f = np.asarray(getattr(holdout_f, "f", holdout_f), dtype=float)
    N, K, J = f.shape
    u = np.einsum("ion,kjo->nikj", D, x)
    fc = first_choice_shares(u)
    hitrate = (fc * f[None]).sum(axis=(2, 3)).mean(axis=1) / K
    pred = fc if rule == "first" else logit_shares(u)
    diff = pred.mean(axis=1) - f.mean(axis=0)[None]
    rmse = np.sqrt((diff ** 2).mean(axis=(1, 2)))
    return hitrate, rmse


@dataclass
class AssessmentReport:
    measures: dict
    intervals: dict
    psrf_univariate: np.ndarray = None
    psrf_multivariate: float = float("nan")
    alpha: float = 0.05
    corr_excluded: int = 0

    def psrf_share_below(self, threshold=PSRF_THRESHOLD):
        if self.psrf_univariate is None:
            return float("nan")
        return float(np.mean(self.psrf_univariate <= threshold))

    def rows(self):
        for name, vals in self.measures.items():
            for n, v in enumerate(vals):
                yield name, str(n), float(v)
            lo, hi = self.intervals[name]
            yield name, "lower", lo
            yield name, "upper", hi
        if self.psrf_univariate is not None:
            for p, v in enumerate(self.psrf_univariate):
                yield "psrf", str(p), float(v)
            yield "mpsrf", "", float(self.psrf_multivariate)


def assess(draws, truth, s, holdout_x, holdout_f, alpha=0.05, chains=None, burn_in=0):
    rmse, corr, excluded = recovery_measures(draws, truth, s)
    hit, soc_first = predictive_measures(draws, holdout_x, holdout_f, "first")
    _, soc_logit = predictive_measures(draws, holdout_x, holdout_f, "logit")
    measures = {"rmse_rec": rmse, "corr": corr, "hitrate": hit,
                "rmse_soc_first": soc_first, "rmse_soc_logit": soc_logit}
    intervals = {k: credible_interval(v, alpha) for k, v in measures.items()}
    uni, multi = (None, float("nan"))
    if chains is not None:
        uni, multi = psrf(chains[0], chains[1], burn_in)
    return AssessmentReport(measures=measures, intervals=intervals, psrf_univariate=uni,
                            psrf_multivariate=multi, alpha=alpha, corr_excluded=excluded)


def export_csv(report, path):
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["measure", "index", "value"])
        for name, idx, v in report.rows():
            w.writerow([name, idx, repr(v)])
