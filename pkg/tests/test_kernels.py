import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtprover import kernels
from mtprover.kernels import OP_DEL, OP_DIAG, OP_INS

BACKENDS = kernels.backends()
seqs = st.lists(st.integers(0, 3), max_size=12).map(lambda x: np.asarray(x, dtype=np.int64))


def test_selected_backend_is_listed():
    assert kernels.BACKEND in BACKENDS
    assert list(BACKENDS)[-1] == "python"


@pytest.mark.parametrize("name", list(BACKENDS))
def test_edit_ops_examples(name):
    k = BACKENDS[name]
    a = np.array([0, 1, 2], dtype=np.int64)
    assert tuple(k.edit_ops(a, np.array([0, 3, 2], dtype=np.int64))) == (1, 0, 0)
    assert tuple(k.edit_ops(a, np.array([], dtype=np.int64))) == (0, 3, 0)
    assert tuple(k.edit_ops(np.array([], dtype=np.int64), a)) == (0, 0, 3)


@pytest.mark.parametrize("name", list(BACKENDS))
def test_align_slots_ops(name):
    k = BACKENDS[name]
    slots = np.array([[0, 0], [1, 4], [2, 2]], dtype=np.int64)
    ops = k.align_slots(slots, np.array([0, 4, 9, 2], dtype=np.int64))
    assert list(ops) == [OP_DIAG, OP_DIAG, OP_INS, OP_DIAG]
    ops = k.align_slots(slots, np.array([0, 2], dtype=np.int64))
    assert list(ops) == [OP_DIAG, OP_DEL, OP_DIAG]


@settings(max_examples=300, deadline=None)
@given(seqs, seqs)
def test_backends_agree_on_edit_ops(a, b):
    results = {tuple(int(x) for x in k.edit_ops(a, b)) for k in BACKENDS.values()}
    assert len(results) == 1


@settings(max_examples=300, deadline=None)
@given(st.lists(st.lists(st.integers(-1, 3), min_size=2, max_size=2), max_size=10), seqs)
def test_backends_agree_on_align_slots(rows, toks):
    slots = np.asarray(rows, dtype=np.int64).reshape(len(rows), 2)
    results = {k.align_slots(slots, toks).tobytes() for k in BACKENDS.values()}
    assert len(results) == 1
