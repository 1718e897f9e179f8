"""Compare the compiled and pure-Python kernels.

    python3 benchmarks/bench_kernels.py [--repeat 3] [--clips 2000]

Times raw ``edit_ops`` and ``align_slots`` calls on random token arrays, then
a full ``fuse_session`` over a synthetic session with each backend swapped in.
"""

import argparse
import time

import numpy as np

from mtprover import kernels, rover
from mtprover.synthetic import synthetic_session


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--clips", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    pairs = [(rng.integers(0, 30, size=40), rng.integers(0, 30, size=44)) for _ in range(500)]
    slot_cases = [(rng.integers(0, 30, size=(40, 2)), rng.integers(0, 30, size=42)) for _ in range(500)]
    clips = synthetic_session(args.clips, seed=args.seed)

    backends = kernels.backends()
    rows = []
    for name, impl in backends.items():
        ed = best_of(lambda: [impl.edit_ops(a, b) for a, b in pairs], args.repeat)
        al = best_of(lambda: [impl.align_slots(s, t) for s, t in slot_cases], args.repeat)
        saved = kernels.align_slots
        kernels.align_slots = impl.align_slots
        try:
            fu = best_of(lambda: rover.fuse_session(clips), args.repeat)
        finally:
            kernels.align_slots = saved
        rows.append((name, ed, al, fu))

    print(f"{'backend':8} {'edit_ops x500':>14} {'align_slots x500':>17} {f'fuse {args.clips} clips':>17}")
    for name, ed, al, fu in rows:
        print(f"{name:8} {ed:13.4f}s {al:16.4f}s {fu:16.4f}s")
    if len(rows) == 2:
        (_, e0, a0, f0), (_, e1, a1, f1) = rows
        print(f"{'speedup':8} {e1 / e0:13.1f}x {a1 / a0:16.1f}x {f1 / f0:16.1f}x")
    else:
        print("compiled extension not built; only the Python fallback was timed")


if __name__ == "__main__":
    main()
