# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Modular arithmetic kernels for power-of-two negacyclic rings.

All polynomials live in Z_q[X]/(X^N + 1) with q < 2^62 and q = 1 (mod 2N).
The evaluation ("NTT") domain used throughout is the natural-order list of
values m(psi^(2i+1)), i = 0..N-1, where psi is a fixed primitive 2N-th root
of unity mod q.  Forward transform: twist by psi^k, then a radix-2 DIT FFT
with root omega = psi^2.
"""

import numpy as np

cimport numpy as cnp

ctypedef unsigned long long u64

cdef extern from *:
    ctypedef unsigned long long u128 "__uint128_t"


cdef inline u64 mulmod(u64 a, u64 b, u64 q) nogil:
    return <u64>((<u128>a * b) % q)


cdef inline u64 addmod_s(u64 a, u64 b, u64 q) nogil:
    cdef u64 s = a + b
    if s >= q:
        s -= q
    return s


cdef inline u64 submod_s(u64 a, u64 b, u64 q) nogil:
    if a >= b:
        return a - b
    return a + q - b


def ntt_forward(u64[::1] a, u64[::1] psi_pows, u64[::1] w_pows,
                unsigned int[::1] bitrev, u64 q):
    """In-place forward transform to the evaluation domain.

    psi_pows[k] = psi^k, w_pows[j] = omega^j with omega = psi^2 (order N).
    """
    cdef Py_ssize_t n = a.shape[0]
    cdef Py_ssize_t i, m, length, half, j, p1, p2, stride
    cdef u64 u, v, w
    cdef unsigned int r
    # twist then bit-reverse in one pass
    cdef u64[::1] tmp = np.empty(n, dtype=np.uint64)
    for i in range(n):
        tmp[bitrev[i]] = mulmod(a[i], psi_pows[i], q)
    for i in range(n):
        a[i] = tmp[i]
    length = 2
    while length <= n:
        half = length >> 1
        stride = n // length
        for m in range(0, n, length):
            for j in range(half):
                w = w_pows[j * stride]
                p1 = m + j
                p2 = p1 + half
                u = a[p1]
                v = mulmod(a[p2], w, q)
                a[p1] = addmod_s(u, v, q)
                a[p2] = submod_s(u, v, q)
        length <<= 1


def ntt_inverse(u64[::1] a, u64[::1] ipsi_pows, u64[::1] iw_pows,
                unsigned int[::1] bitrev, u64 q):
    """In-place inverse transform back to the coefficient domain.

    ipsi_pows[k] = psi^{-k} * N^{-1} (the 1/N factor is folded in).
    """
    cdef Py_ssize_t n = a.shape[0]
    cdef Py_ssize_t i, m, length, half, j, p1, p2, stride
    cdef u64 u, v, w
    cdef u64[::1] tmp = np.empty(n, dtype=np.uint64)
    for i in range(n):
        tmp[bitrev[i]] = a[i]
    for i in range(n):
        a[i] = tmp[i]
    length = 2
    while length <= n:
        half = length >> 1
        stride = n // length
        for m in range(0, n, length):
            for j in range(half):
                w = iw_pows[j * stride]
                p1 = m + j
                p2 = p1 + half
                u = a[p1]
                v = mulmod(a[p2], w, q)
                a[p1] = addmod_s(u, v, q)
                a[p2] = submod_s(u, v, q)
        length <<= 1
    for i in range(n):
        a[i] = mulmod(a[i], ipsi_pows[i], q)


def arr_addmod(u64[::1] out, u64[::1] a, u64[::1] b, u64 q):
    cdef Py_ssize_t i
    for i in range(out.shape[0]):
        out[i] = addmod_s(a[i], b[i], q)


def arr_submod(u64[::1] out, u64[::1] a, u64[::1] b, u64 q):
    cdef Py_ssize_t i
    for i in range(out.shape[0]):
        out[i] = submod_s(a[i], b[i], q)


def arr_negmod(u64[::1] out, u64[::1] a, u64 q):
    cdef Py_ssize_t i
    for i in range(out.shape[0]):
        out[i] = (q - a[i]) if a[i] else 0


def arr_mulmod(u64[::1] out, u64[::1] a, u64[::1] b, u64 q):
    cdef Py_ssize_t i
    for i in range(out.shape[0]):
        out[i] = mulmod(a[i], b[i], q)


def arr_mulmod_scalar(u64[::1] out, u64[::1] a, u64 s, u64 q):
    cdef Py_ssize_t i
    for i in range(out.shape[0]):
        out[i] = mulmod(a[i], s, q)


def arr_mac(u64[::1] acc, u64[::1] a, u64[::1] b, u64 q):
    """acc += a * b (mod q), elementwise."""
    cdef Py_ssize_t i
    for i in range(acc.shape[0]):
        acc[i] = addmod_s(acc[i], mulmod(a[i], b[i], q), q)


def arr_mac_perm(u64[::1] acc, u64[::1] a, unsigned int[::1] perm,
                 u64[::1] b, u64 q):
    """acc += a[perm] * b (mod q), elementwise (fused automorphism)."""
    cdef Py_ssize_t i
    for i in range(acc.shape[0]):
        acc[i] = addmod_s(acc[i], mulmod(a[perm[i]], b[i], q), q)


def weighted_sum_mod(u64[::1] out, u64[:, ::1] ys, u64[::1] scalars, u64 q):
    """out = sum_i ys[i] * scalars[i] (mod q). Fast CRT basis extension core."""
    cdef Py_ssize_t rows = ys.shape[0]
    cdef Py_ssize_t n = ys.shape[1]
    cdef Py_ssize_t i, k
    cdef u128 acc
    cdef u64 s
    for k in range(n):
        acc = 0
        for i in range(rows):
            acc += <u128>(ys[i, k] % q) * scalars[i]
        out[k] = <u64>(acc % q)
