# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops. Signatures mirror :mod:`recknow._fallback`."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log1p
from libc.stdlib cimport qsort

cnp.import_array()


cdef int _cmp_int(const void* a, const void* b) noexcept nogil:
    cdef int x = (<int*>a)[0]
    cdef int y = (<int*>b)[0]
    return (x > y) - (x < y)


def bpr_epoch(double[:, ::1] U, double[:, ::1] V,
              const long long[::1] users, const long long[::1] pos, const long long[::1] neg,
              double lr, double reg):
    """One pass of pairwise-logistic SGD over (user, pos, neg) triples, in place.

    Returns the summed ranking loss -log sigmoid(u.(v_pos - v_neg)) measured
    before each update.
    """
    cdef Py_ssize_t n = users.shape[0], d = U.shape[1], t, f
    cdef long long u, i, j
    cdef double x, g, uf, i_f, j_f, total = 0.0
    with nogil:
        for t in range(n):
            u = users[t]
            i = pos[t]
            j = neg[t]
            x = 0.0
            for f in range(d):
                x = x + U[u, f] * (V[i, f] - V[j, f])
            if x > 0:
                total = total + log1p(exp(-x))
            else:
                total = total - x + log1p(exp(x))
            g = 1.0 / (1.0 + exp(x))
            for f in range(d):
                uf = U[u, f]
                i_f = V[i, f]
                j_f = V[j, f]
                U[u, f] = uf + lr * (g * (i_f - j_f) - reg * uf)
                V[i, f] = i_f + lr * (g * uf - reg * i_f)
                V[j, f] = j_f + lr * (-g * uf - reg * j_f)
    return total


def cooccurrence_csr(const int[::1] u_indptr, const int[::1] u_indices,
                     const int[::1] i_indptr, const int[::1] i_indices, int n_items):
    """Symmetric item-item co-occurrence counts as CSR arrays, diagonal excluded.

    ``u_*`` is the user->items CSR, ``i_*`` its transpose; both must hold
    each (user, item) pair at most once.
    """
    cdef cnp.ndarray[cnp.int32_t, ndim=1] acc = np.zeros(n_items, dtype=np.int32)
    cdef cnp.ndarray[cnp.int32_t, ndim=1] touched = np.empty(n_items, dtype=np.int32)
    cdef int[::1] accv = acc
    cdef int[::1] tv = touched
    cdef Py_ssize_t cap = max(16, 4 * n_items)
    out_idx = np.empty(cap, dtype=np.int32)
    out_val = np.empty(cap, dtype=np.int32)
    cdef int[::1] oi = out_idx
    cdef int[::1] ov = out_val
    indptr = np.zeros(n_items + 1, dtype=np.int64)
    cdef long long[::1] ip = indptr
    cdef Py_ssize_t nnz = 0, nt, a, b, c, k
    cdef int item, user, other
    for item in range(n_items):
        nt = 0
        with nogil:
            for a in range(i_indptr[item], i_indptr[item + 1]):
                user = i_indices[a]
                for b in range(u_indptr[user], u_indptr[user + 1]):
                    other = u_indices[b]
                    if other == item:
                        continue
                    if accv[other] == 0:
                        tv[nt] = other
                        nt += 1
                    accv[other] += 1
            if nt * 8 < n_items:
                qsort(&tv[0], nt, sizeof(int), _cmp_int)
            else:
                # dense row: a linear scan is cheaper than sorting
                nt = 0
                for k in range(n_items):
                    if accv[k] != 0:
                        tv[nt] = <int>k
                        nt += 1
        if nnz + nt > cap:
            cap = max(2 * cap, nnz + nt)
            out_idx = np.resize(out_idx, cap)
            out_val = np.resize(out_val, cap)
            oi = out_idx
            ov = out_val
        with nogil:
            for c in range(nt):
                k = tv[c]
                oi[nnz] = <int>k
                ov[nnz] = accv[k]
                accv[k] = 0
                nnz += 1
        ip[item + 1] = nnz
    return indptr, out_idx[:nnz].copy(), out_val[:nnz].copy()
