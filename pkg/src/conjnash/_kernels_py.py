"""Numpy fallback for the compiled scenario-margin kernels.

Mirrors `_kernels.pyx` operation for operation, including sequential
summation order, so both backends return bit-identical margins.
"""
import numpy as np

_CHUNK_CELLS = 4_000_000


def decode_scenarios(ranks, n_lines, n_firms):
    ranks = np.asarray(ranks, dtype=np.int64)
    out = np.empty((len(ranks), n_firms), dtype=np.int64)
    rest = ranks.copy()
    for w in range(n_firms - 1, -1, -1):
        out[:, w] = rest % n_lines
        rest //= n_lines
    return out


def _products(lines, n_firms, ranks):
    firm_lines = decode_scenarios(ranks, lines.shape[0], n_firms)
    return lines[firm_lines].reshape(len(ranks), -1)


def _seqsum(a):
    # sequential left-to-right sum over the last axis
    return np.cumsum(a, axis=-1)[..., -1]


def _chunks(start, stop, per_scenario):
    step = max(1, _CHUNK_CELLS // max(per_scenario, 1))
    for lo in range(start, stop, step):
        yield lo, min(stop, lo + step)


def _tie_split(hit, count, n_prod, n_draws):
    # integer hit counts per tie size, one division per size as in the C kernel
    demand = np.zeros(hit.shape[:-1])
    for c in range(1, n_prod + 1):
        n_c = np.count_nonzero(hit & (count == c), axis=-1)
        demand = np.where(n_c > 0, demand + n_c / (float(c) * n_draws), demand)
    return demand


def margins_first(util, unit_margin, lines, n_firms, n_draws, start, stop):
    q = lines.shape[1]
    R = util.shape[1]
    n_prod = n_firms * q
    out = np.empty(stop - start)
    for lo, hi in _chunks(start, stop, n_prod * R):
        prods = _products(lines, n_firms, np.arange(lo, hi))
        U = util[prods]
        best = U.max(axis=1)
        count = (U == best[:, None, :]).sum(axis=1)
        total = np.zeros(hi - lo)
        for qq in range(q):
            demand = _tie_split(U[:, qq, :] == best, count, n_prod, n_draws)
            total = total + demand * unit_margin[prods[:, qq]]
        out[lo - start:hi - start] = total
    return out


def margins_logit(expu, unit_margin, lines, n_firms, n_draws, start, stop):
    q = lines.shape[1]
    R = expu.shape[1]
    out = np.empty(stop - start)
    for lo, hi in _chunks(start, stop, n_firms * q * R):
        prods = _products(lines, n_firms, np.arange(lo, hi))
        sorted_prods = np.sort(prods, axis=1)
        denom = np.zeros((hi - lo, R))
        for p in range(prods.shape[1]):
            denom = denom + expu[sorted_prods[:, p]]
        total = np.zeros(hi - lo)
        for qq in range(q):
            demand = _seqsum(expu[prods[:, qq]] / denom)
            total = total + (demand / n_draws) * unit_margin[prods[:, qq]]
        out[lo - start:hi - start] = total
    return out
