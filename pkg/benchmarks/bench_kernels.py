"""Time the compiled kernels against the numpy/scipy fallback.

    python benchmarks/bench_kernels.py --users 2000 --items 1000 --per-user 40
"""
import argparse
import time

import numpy as np
import scipy.sparse as sp

from recknow import _fallback

try:
    from recknow import _kernels
except ImportError:
    _kernels = None


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def random_log(n_users, n_items, per_user, rng):
    rows = [np.sort(rng.choice(n_items, size=per_user, replace=False)) for _ in range(n_users)]
    u_indices = np.concatenate(rows).astype(np.int32)
    u_indptr = np.arange(0, per_user * (n_users + 1), per_user, dtype=np.int32)
    X = sp.csr_matrix((np.ones(len(u_indices), dtype=np.int32), u_indices, u_indptr),
                      shape=(n_users, n_items))
    XT = X.T.tocsr()
    XT.sort_indices()
    return u_indptr, u_indices, XT.indptr.astype(np.int32), XT.indices.astype(np.int32)


def bench_cooccurrence(impl, args, rng):
    arrays = random_log(args.users, args.items, args.per_user, rng)
    return best_of(lambda: impl.cooccurrence_csr(*arrays, args.items), args.repeat)


def bench_bpr(impl, args, rng):
    n = args.users * args.per_user
    users = rng.integers(args.users, size=n).astype(np.int64)
    pos = rng.integers(args.items, size=n).astype(np.int64)
    neg = rng.integers(args.items, size=n).astype(np.int64)
    U0 = rng.normal(0, 0.1, size=(args.users, args.dim))
    V0 = rng.normal(0, 0.1, size=(args.items, args.dim))

    def once():
        impl.bpr_epoch(U0.copy(), V0.copy(), users, pos, neg, 0.05, 0.01)

    return best_of(once, args.repeat)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--users", type=int, default=2000)
    p.add_argument("--items", type=int, default=1000)
    p.add_argument("--per-user", type=int, default=40)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)

    impls = [("python", _fallback)] + ([("cython", _kernels)] if _kernels else [])
    if _kernels is None:
        print("compiled extension not importable; timing the fallback only")
    print(f"{'kernel':<18}{'backend':<10}{'seconds':>10}")
    for name, bench in (("cooccurrence_csr", bench_cooccurrence), ("bpr_epoch", bench_bpr)):
        times = {}
        for label, impl in impls:
            times[label] = bench(impl, args, np.random.default_rng(args.seed))
            print(f"{name:<18}{label:<10}{times[label]:>10.4f}")
        if len(times) == 2:
            print(f"{name:<18}{'speedup':<10}{times['python'] / times['cython']:>9.1f}x")


if __name__ == "__main__":
    main()
