"""Kernel selection: the compiled extension when it was built, else pure Python.

Set ``MTPROVER_KERNELS=python`` to force the fallback.
"""

import os

from mtprover import _kernels_py

try:
    from mtprover import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

_forced = os.environ.get("MTPROVER_KERNELS", "").strip().lower()
if _forced not in ("", "cython", "python"):
    raise ImportError(f"MTPROVER_KERNELS must be 'cython' or 'python', got {_forced!r}")
if _forced == "cython" and _compiled is None:
    raise ImportError("MTPROVER_KERNELS=cython but the compiled extension is not built")

BACKEND = "python" if _forced == "python" or _compiled is None else "cython"
_impl = _compiled if BACKEND == "cython" else _kernels_py

OP_DIAG = _kernels_py.OP_DIAG
OP_DEL = _kernels_py.OP_DEL
OP_INS = _kernels_py.OP_INS

edit_ops = _impl.edit_ops
align_slots = _impl.align_slots


def backends():
    """Available implementations keyed by name, compiled first."""
    out = {}
    if _compiled is not None:
        out["cython"] = _compiled
    out["python"] = _kernels_py
    return out
