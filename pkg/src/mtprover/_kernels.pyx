# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled dynamic-programming kernels.

Must stay behaviourally identical to ``_kernels_py``; the test-suite runs
both on the same inputs.
"""

import numpy as np
cimport numpy as cnp
from libc.stdint cimport int64_t, int32_t, int8_t

cnp.import_array()

cdef enum:
    OP_DIAG = 0
    OP_DEL = 1
    OP_INS = 2


cdef inline int32_t _min3(int32_t a, int32_t b, int32_t c) noexcept nogil:
    if b < a:
        a = b
    if c < a:
        a = c
    return a


def edit_ops(const int64_t[::1] ref, const int64_t[::1] hyp):
    """Return ``(substitutions, deletions, insertions)`` of a minimum-cost alignment."""
    cdef Py_ssize_t n = ref.shape[0], m = hyp.shape[0]
    cdef Py_ssize_t i, j, w = m + 1
    cdef cnp.ndarray[int32_t, ndim=1] table = np.empty((n + 1) * (m + 1), dtype=np.int32)
    cdef int32_t[::1] D = table
    cdef int32_t cost
    cdef long subs = 0, dels = 0, ins = 0
    with nogil:
        for j in range(m + 1):
            D[j] = <int32_t>j
        for i in range(1, n + 1):
            D[i * w] = <int32_t>i
            for j in range(1, m + 1):
                cost = 0 if ref[i - 1] == hyp[j - 1] else 1
                D[i * w + j] = _min3(D[(i - 1) * w + j - 1] + cost,
                                     D[(i - 1) * w + j] + 1,
                                     D[i * w + j - 1] + 1)
        i = n
        j = m
        while i > 0 or j > 0:
            if i > 0 and j > 0:
                cost = 0 if ref[i - 1] == hyp[j - 1] else 1
                if D[i * w + j] == D[(i - 1) * w + j - 1] + cost:
                    subs += cost
                    i -= 1
                    j -= 1
                    continue
            if i > 0 and D[i * w + j] == D[(i - 1) * w + j] + 1:
                dels += 1
                i -= 1
            else:
                ins += 1
                j -= 1
    return subs, dels, ins


cdef inline int32_t _slot_cost(const int64_t[:, ::1] slots, Py_ssize_t row, int64_t tok) noexcept nogil:
    cdef Py_ssize_t k
    for k in range(slots.shape[1]):
        if slots[row, k] == tok:
            return 0
    return 1


def align_slots(const int64_t[:, ::1] slots, const int64_t[::1] tokens):
    """Align ``tokens`` to the rows of ``slots`` (NULL arcs are -1).

    Returns the alignment as an int8 array of operations in left-to-right
    order: 0 pairs a slot with a token, 1 leaves a slot without a token,
    2 puts a token into a new slot.
    """
    cdef Py_ssize_t n = slots.shape[0], m = tokens.shape[0]
    cdef Py_ssize_t i, j, w = m + 1, k = 0
    cdef cnp.ndarray[int32_t, ndim=1] table = np.empty((n + 1) * (m + 1), dtype=np.int32)
    cdef int32_t[::1] D = table
    cdef cnp.ndarray[int8_t, ndim=1] ops_arr = np.empty(n + m, dtype=np.int8)
    cdef int8_t[::1] ops = ops_arr
    cdef int32_t cost
    with nogil:
        for j in range(m + 1):
            D[j] = <int32_t>j
        for i in range(1, n + 1):
            D[i * w] = <int32_t>i
            for j in range(1, m + 1):
                cost = _slot_cost(slots, i - 1, tokens[j - 1])
                D[i * w + j] = _min3(D[(i - 1) * w + j - 1] + cost,
                                     D[(i - 1) * w + j] + 1,
                                     D[i * w + j - 1] + 1)
        i = n
        j = m
        while i > 0 or j > 0:
            if i > 0 and j > 0:
                cost = _slot_cost(slots, i - 1, tokens[j - 1])
                if D[i * w + j] == D[(i - 1) * w + j - 1] + cost:
                    ops[k] = OP_DIAG
                    k += 1
                    i -= 1
                    j -= 1
                    continue
            if i > 0 and D[i * w + j] == D[(i - 1) * w + j] + 1:
                ops[k] = OP_DEL
                i -= 1
            else:
                ops[k] = OP_INS
                j -= 1
            k += 1
    return ops_arr[:k][::-1].copy()
