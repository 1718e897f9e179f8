"""Pure-Python versions of the compiled kernels in ``_kernels.pyx``."""

import numpy as np

OP_DIAG = 0
OP_DEL = 1
OP_INS = 2


def _table(n, m, mismatch):
    """Unit-cost DP table; ``mismatch[i][j]`` is the diagonal cost of cell (i+1, j+1)."""
    D = [list(range(m + 1))]
    for i in range(1, n + 1):
        prev = D[-1]
        mis = mismatch[i - 1]
        row = [i] * (m + 1)
        left = i
        for j in range(1, m + 1):
            v = prev[j - 1] + mis[j - 1]
            up = prev[j] + 1
            if up < v:
                v = up
            if left + 1 < v:
                v = left + 1
            row[j] = left = v
        D.append(row)
    return D


def _backtrace(D, n, m, mismatch):
    # prefers diagonal, then deletion, then insertion, walking back from (n, m)
    i, j = n, m
    ops = []
    while i > 0 or j > 0:
        if i > 0 and j > 0 and D[i][j] == D[i - 1][j - 1] + mismatch[i - 1][j - 1]:
            ops.append(OP_DIAG)
            i -= 1
            j -= 1
        elif i > 0 and D[i][j] == D[i - 1][j] + 1:
            ops.append(OP_DEL)
            i -= 1
        else:
            ops.append(OP_INS)
            j -= 1
    ops.reverse()
    return ops


def edit_ops(ref, hyp):
    ref = np.asarray(ref).tolist()
    hyp = np.asarray(hyp).tolist()
    n, m = len(ref), len(hyp)
    mismatch = [[0 if r == h else 1 for h in hyp] for r in ref]
    D = _table(n, m, mismatch)
    subs = dels = ins = 0
    i = j = 0
    for op in _backtrace(D, n, m, mismatch):
        if op == OP_DIAG:
            subs += mismatch[i][j]
            i += 1
            j += 1
        elif op == OP_DEL:
            dels += 1
            i += 1
        else:
            ins += 1
            j += 1
    return subs, dels, ins


def align_slots(slots, tokens):
    rows = [set(row) for row in np.asarray(slots).tolist()] if len(slots) else []
    toks = np.asarray(tokens).tolist()
    mismatch = [[0 if t in row else 1 for t in toks] for row in rows]
    D = _table(len(rows), len(toks), mismatch)
    return np.asarray(_backtrace(D, len(rows), len(toks), mismatch), dtype=np.int8)
