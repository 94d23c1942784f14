# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled scenario-margin kernels.

Both kernels fill ``out[s - start]`` with firm 1's total contribution margin
for every complete scenario rank ``s`` in ``[start, stop)``. Scenario ranks
are mixed radix in the line count, firm 1 most significant. Summation order
is fixed so results do not depend on how the range is chunked. First-choice
demand is accumulated as integer hit counts per tie size and divided once
per size, so equal splits are exact; logit sums run over respondent-draw
columns in order with denominators over the scenario's products sorted by
product rank.
"""
import numpy as np

cimport numpy as cnp
from libc.stdlib cimport malloc, free

cnp.import_array()


cdef inline void _decode(long long rank, long long n_lines, int n_firms,
                         long long* firm_lines) noexcept nogil:
    cdef int w
    for w in range(n_firms - 1, -1, -1):
        firm_lines[w] = rank % n_lines
        rank = rank // n_lines


def margins_first(const double[:, ::1] util, const double[::1] unit_margin,
                  const long long[:, ::1] lines, int n_firms, int n_draws,
                  long long start, long long stop):
    cdef Py_ssize_t n_lines = lines.shape[0]
    cdef Py_ssize_t q = lines.shape[1]
    cdef Py_ssize_t R = util.shape[1]
    cdef Py_ssize_t n_prod = n_firms * q
    cdef Py_ssize_t width = n_prod + 1
    out_arr = np.empty(stop - start, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef long long* firm_lines = <long long*> malloc(n_firms * sizeof(long long))
    cdef long long* prods = <long long*> malloc(n_prod * sizeof(long long))
    # hits[qq * width + c]: columns where product qq ties with c - 1 others at the max
    cdef long long* hits = <long long*> malloc(q * width * sizeof(long long))
    cdef double* best = <double*> malloc(R * sizeof(double))
    cdef int* count = <int*> malloc(R * sizeof(int))
    cdef const double* row
    cdef long long s
    cdef Py_ssize_t r, p, w, qq, c
    cdef double demand, total
    if firm_lines == NULL or prods == NULL or hits == NULL or best == NULL or count == NULL:
        free(firm_lines); free(prods); free(hits); free(best); free(count)
        raise MemoryError()
    with nogil:
        for s in range(start, stop):
            _decode(s, n_lines, n_firms, firm_lines)
            for w in range(n_firms):
                for qq in range(q):
                    prods[w * q + qq] = lines[firm_lines[w], qq]
            # row-wise passes over contiguous utility rows
            row = &util[prods[0], 0]
            for r in range(R):
                best[r] = row[r]
            for p in range(1, n_prod):
                row = &util[prods[p], 0]
                for r in range(R):
                    best[r] = row[r] if row[r] > best[r] else best[r]
            for r in range(R):
                count[r] = 0
            for p in range(n_prod):
                row = &util[prods[p], 0]
                for r in range(R):
                    count[r] += row[r] == best[r]
            for p in range(q * width):
                hits[p] = 0
            for qq in range(q):
                row = &util[prods[qq], 0]
                for r in range(R):
                    if row[r] == best[r]:
                        hits[qq * width + count[r]] += 1
            total = 0.0
            for qq in range(q):
                demand = 0.0
                for c in range(1, width):
                    if hits[qq * width + c]:
                        demand += hits[qq * width + c] / (<double> c * n_draws)
                total += demand * unit_margin[prods[qq]]
            out[s - start] = total
    free(firm_lines); free(prods); free(hits); free(best); free(count)
    return out_arr


def margins_logit(const double[:, ::1] expu, const double[::1] unit_margin,
                  const long long[:, ::1] lines, int n_firms, int n_draws,
                  long long start, long long stop):
    cdef Py_ssize_t n_lines = lines.shape[0]
    cdef Py_ssize_t q = lines.shape[1]
    cdef Py_ssize_t R = expu.shape[1]
    cdef Py_ssize_t n_prod = n_firms * q
    out_arr = np.empty(stop - start, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef long long* firm_lines = <long long*> malloc(n_firms * sizeof(long long))
    cdef long long* prods = <long long*> malloc(n_prod * sizeof(long long))
    cdef long long* sorted_prods = <long long*> malloc(n_prod * sizeof(long long))
    cdef double* demand = <double*> malloc(q * sizeof(double))
    cdef long long s, tmp
    cdef Py_ssize_t r, p, w, qq, a, b
    cdef double denom, total
    if firm_lines == NULL or prods == NULL or sorted_prods == NULL or demand == NULL:
        free(firm_lines); free(prods); free(sorted_prods); free(demand)
        raise MemoryError()
    with nogil:
        for s in range(start, stop):
            _decode(s, n_lines, n_firms, firm_lines)
            for w in range(n_firms):
                for qq in range(q):
                    prods[w * q + qq] = lines[firm_lines[w], qq]
            for p in range(n_prod):
                sorted_prods[p] = prods[p]
            # insertion sort, scenarios hold few products
            for a in range(1, n_prod):
                tmp = sorted_prods[a]
                b = a - 1
                while b >= 0 and sorted_prods[b] > tmp:
                    sorted_prods[b + 1] = sorted_prods[b]
                    b -= 1
                sorted_prods[b + 1] = tmp
            for qq in range(q):
                demand[qq] = 0.0
            for r in range(R):
                denom = 0.0
                for p in range(n_prod):
                    denom += expu[sorted_prods[p], r]
                for qq in range(q):
                    demand[qq] += expu[prods[qq], r] / denom
            total = 0.0
            for qq in range(q):
                total += (demand[qq] / n_draws) * unit_margin[prods[qq]]
            out[s - start] = total
    free(firm_lines); free(prods); free(sorted_prods); free(demand)
    return out_arr
