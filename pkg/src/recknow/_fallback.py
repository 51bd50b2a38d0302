"""Pure numpy/scipy versions of the compiled kernels in ``_kernels.pyx``."""
import math

import numpy as np
import scipy.sparse as sp


def bpr_epoch(U, V, users, pos, neg, lr, reg):
    total = 0.0
    for u, i, j in zip(users.tolist(), pos.tolist(), neg.tolist()):
        uf = U[u].copy()
        i_f = V[i].copy()
        j_f = V[j].copy()
        x = float(np.dot(uf, i_f - j_f))
        total += math.log1p(math.exp(-x)) if x > 0 else -x + math.log1p(math.exp(x))
        g = 1.0 / (1.0 + math.exp(x))
        U[u] = uf + lr * (g * (i_f - j_f) - reg * uf)
        V[i] = i_f + lr * (g * uf - reg * i_f)
        V[j] = j_f + lr * (-g * uf - reg * j_f)
    return total


def cooccurrence_csr(u_indptr, u_indices, i_indptr, i_indices, n_items):
    n_users = len(u_indptr) - 1
    X = sp.csr_matrix(
        (np.ones(len(u_indices), dtype=np.int32), u_indices, u_indptr), shape=(n_users, n_items)
    )
    C = (X.T @ X).tocsr()
    C.setdiag(0)
    C.eliminate_zeros()
    C.sort_indices()
    return C.indptr.astype(np.int64), C.indices.astype(np.int32), C.data.astype(np.int32)
